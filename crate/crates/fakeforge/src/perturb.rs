//! Robustness transform suite over 8-bit RGB rasters.
//!
//! Every transform is a pure function of (image bytes, spec, seed), so
//! perturbed corpora are bit-reproducible regardless of processing order.

use std::path::Path;

use image::RgbImage;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::digest::sha256_hex_parts;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbationKind {
    Jpeg,
    Resize,
    GaussianNoise,
    FlipHorizontal,
    Rotate,
    Sharpen,
    Contrast,
    Blur,
    Identity,
}

/// One tagged transform. `parameter` is unused for flip and identity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationSpec {
    pub tag: String,
    pub kind: PerturbationKind,
    pub parameter: f64,
}

impl PerturbationSpec {
    fn new(tag: &str, kind: PerturbationKind, parameter: f64) -> Self {
        PerturbationSpec {
            tag: tag.into(),
            kind,
            parameter,
        }
    }

    pub fn identity() -> Self {
        PerturbationSpec::new("Origin image", PerturbationKind::Identity, 0.0)
    }
}

/// The built-in suite: twelve distortions plus the identity baseline, in
/// report row order.
pub fn suite() -> Vec<PerturbationSpec> {
    use PerturbationKind::*;
    vec![
        PerturbationSpec::new("JPEG 70", Jpeg, 70.0),
        PerturbationSpec::new("JPEG 80", Jpeg, 80.0),
        PerturbationSpec::new("Resize 0.5", Resize, 0.5),
        PerturbationSpec::new("Resize 0.75", Resize, 0.75),
        PerturbationSpec::new("Gaussian 10", GaussianNoise, 10.0),
        PerturbationSpec::new("Gaussian 5", GaussianNoise, 5.0),
        PerturbationSpec::new("Flip horizontal", FlipHorizontal, 0.0),
        PerturbationSpec::new("Rotate 15", Rotate, 15.0),
        PerturbationSpec::new("Sharpen 1.5", Sharpen, 1.5),
        PerturbationSpec::new("Contrast 0.7", Contrast, 0.7),
        PerturbationSpec::new("Contrast 1.3", Contrast, 1.3),
        PerturbationSpec::new("Blur 3", Blur, 3.0),
        PerturbationSpec::identity(),
    ]
}

/// Find a suite spec by tag, ignoring case and space/underscore differences,
/// so `jpeg_70` selects "JPEG 70".
pub fn find_spec(tag: &str) -> Option<PerturbationSpec> {
    fn norm(s: &str) -> String {
        s.chars()
            .filter(|c| c.is_alphanumeric() || *c == '.')
            .collect::<String>()
            .to_lowercase()
    }
    let wanted = norm(tag);
    suite().into_iter().find(|s| norm(&s.tag) == wanted)
}

/// Derive the per-record noise seed from the run seed and the record id, so
/// noise is reproducible independent of processing order.
pub fn record_seed(seed: u64, record_id: &str) -> u64 {
    let digest = sha256_hex_parts([&seed.to_le_bytes()[..], record_id.as_bytes()]);
    u64::from_str_radix(&digest[..16], 16).unwrap_or(seed)
}

/// Apply one transform. Pure in (image, spec, seed).
pub fn apply(image: &RgbImage, spec: &PerturbationSpec, seed: u64) -> Result<RgbImage> {
    if image.width() == 0 || image.height() == 0 {
        return Err(Error::Precondition("empty image".into()));
    }
    let p = spec.parameter;
    match spec.kind {
        PerturbationKind::Identity => Ok(image.clone()),
        PerturbationKind::Jpeg => {
            check_range(spec, (1.0..=100.0).contains(&p), "quality must be in 1..=100")?;
            jpeg_cycle(image, p as u8)
        }
        PerturbationKind::Resize => {
            check_range(spec, p > 0.0 && p <= 1.0, "factor must be in (0, 1]")?;
            Ok(resize_bilinear(image, p))
        }
        PerturbationKind::GaussianNoise => {
            check_range(spec, p >= 0.0, "sigma must be >= 0")?;
            Ok(gaussian_noise(image, p, seed))
        }
        PerturbationKind::FlipHorizontal => Ok(flip_horizontal(image)),
        PerturbationKind::Rotate => Ok(rotate_about_center(image, p)),
        PerturbationKind::Sharpen => {
            check_range(spec, p > 0.0, "factor must be > 0")?;
            Ok(sharpen(image, p))
        }
        PerturbationKind::Contrast => {
            check_range(spec, p > 0.0, "factor must be > 0")?;
            Ok(contrast(image, p))
        }
        PerturbationKind::Blur => {
            check_range(spec, p >= 0.0, "sigma must be >= 0")?;
            Ok(gaussian_blur(image, p))
        }
    }
}

fn check_range(spec: &PerturbationSpec, ok: bool, message: &str) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::ParameterOutOfRange {
            kind: spec.tag.clone(),
            message: format!("{message} (got {})", spec.parameter),
        })
    }
}

/// Decode a file into an 8-bit RGB raster.
pub fn load_rgb(path: impl AsRef<Path>) -> Result<RgbImage> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    image::load_from_memory(&bytes)
        .map(|d| d.to_rgb8())
        .map_err(|e| Error::ImageUnreadable {
            record_id: String::new(),
            path: path.to_path_buf(),
            message: e.to_string(),
        })
}

/// Lossless PNG bytes for a raster (the encoding used when a perturbed image
/// is attached to a request or written to disk).
pub fn png_bytes(image: &RgbImage) -> Result<Vec<u8>> {
    let mut out = std::io::Cursor::new(Vec::new());
    image
        .write_to(&mut out, image::ImageFormat::Png)
        .map_err(|e| Error::Other(format!("png encode: {e}")))?;
    Ok(out.into_inner())
}

fn jpeg_cycle(image: &RgbImage, quality: u8) -> Result<RgbImage> {
    let mut buf = Vec::new();
    let mut encoder = image::codecs::jpeg::JpegEncoder::new_with_quality(&mut buf, quality);
    encoder
        .encode(
            image.as_raw(),
            image.width(),
            image.height(),
            image::ExtendedColorType::Rgb8,
        )
        .map_err(|e| Error::Other(format!("jpeg encode: {e}")))?;
    image::load_from_memory(&buf)
        .map(|d| d.to_rgb8())
        .map_err(|e| Error::Other(format!("jpeg decode: {e}")))
}

fn clamp_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

fn sample_bilinear(image: &RgbImage, x: f64, y: f64) -> Option<[f64; 3]> {
    let (w, h) = (image.width() as f64, image.height() as f64);
    if x < -0.5 || y < -0.5 || x > w - 0.5 || y > h - 0.5 {
        return None;
    }
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let px = |ix: f64, iy: f64| -> [f64; 3] {
        let cx = ix.clamp(0.0, w - 1.0) as u32;
        let cy = iy.clamp(0.0, h - 1.0) as u32;
        let p = image.get_pixel(cx, cy).0;
        [p[0] as f64, p[1] as f64, p[2] as f64]
    };
    let p00 = px(x0, y0);
    let p10 = px(x0 + 1.0, y0);
    let p01 = px(x0, y0 + 1.0);
    let p11 = px(x0 + 1.0, y0 + 1.0);
    let mut out = [0.0; 3];
    for c in 0..3 {
        let top = p00[c] * (1.0 - fx) + p10[c] * fx;
        let bottom = p01[c] * (1.0 - fx) + p11[c] * fx;
        out[c] = top * (1.0 - fy) + bottom * fy;
    }
    Some(out)
}

/// Bilinear downscale; output dimensions are round(factor * dim), floor 1.
/// The model under test receives the resized image as-is, never upscaled back.
fn resize_bilinear(image: &RgbImage, factor: f64) -> RgbImage {
    let out_w = ((image.width() as f64 * factor).round() as u32).max(1);
    let out_h = ((image.height() as f64 * factor).round() as u32).max(1);
    let scale_x = image.width() as f64 / out_w as f64;
    let scale_y = image.height() as f64 / out_h as f64;
    let mut out = RgbImage::new(out_w, out_h);
    for y in 0..out_h {
        for x in 0..out_w {
            let src_x = (x as f64 + 0.5) * scale_x - 0.5;
            let src_y = (y as f64 + 0.5) * scale_y - 0.5;
            let s = sample_bilinear(image, src_x, src_y).unwrap_or([0.0; 3]);
            out.put_pixel(x, y, image::Rgb([clamp_u8(s[0]), clamp_u8(s[1]), clamp_u8(s[2])]));
        }
    }
    out
}

/// i.i.d. Gaussian noise per subpixel, standard deviation in 8-bit units,
/// clamped to [0, 255].
fn gaussian_noise(image: &RgbImage, sigma: f64, seed: u64) -> RgbImage {
    if sigma == 0.0 {
        return image.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, sigma).expect("sigma validated");
    let mut out = image.clone();
    for value in out.as_mut().iter_mut() {
        let noisy = *value as f64 + normal.sample(&mut rng);
        *value = clamp_u8(noisy);
    }
    out
}

fn flip_horizontal(image: &RgbImage) -> RgbImage {
    let (w, h) = image.dimensions();
    let mut out = RgbImage::new(w, h);
    for y in 0..h {
        for x in 0..w {
            out.put_pixel(w - 1 - x, y, *image.get_pixel(x, y));
        }
    }
    out
}

/// Rotate counterclockwise about the center by `degrees`, bilinear sampling,
/// canvas size preserved, out-of-frame filled black.
fn rotate_about_center(image: &RgbImage, degrees: f64) -> RgbImage {
    let theta = degrees.to_radians();
    let (sin, cos) = theta.sin_cos();
    let (w, h) = image.dimensions();
    let cx = (w as f64 - 1.0) / 2.0;
    let cy = (h as f64 - 1.0) / 2.0;
    let mut out = RgbImage::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let dx = x as f64 - cx;
            let dy = y as f64 - cy;
            let src_x = cx + cos * dx + sin * dy;
            let src_y = cy - sin * dx + cos * dy;
            let pixel = match sample_bilinear(image, src_x, src_y) {
                Some(s) => image::Rgb([clamp_u8(s[0]), clamp_u8(s[1]), clamp_u8(s[2])]),
                None => image::Rgb([0, 0, 0]),
            };
            out.put_pixel(x, y, pixel);
        }
    }
    out
}

/// 3x3 box-filter smooth with replicated borders, per channel.
fn box_smooth(image: &RgbImage) -> Vec<[f64; 3]> {
    let (w, h) = (image.width() as i64, image.height() as i64);
    let mut out = vec![[0.0f64; 3]; (w * h) as usize];
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0.0f64; 3];
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let sx = (x + dx).clamp(0, w - 1) as u32;
                    let sy = (y + dy).clamp(0, h - 1) as u32;
                    let p = image.get_pixel(sx, sy).0;
                    for c in 0..3 {
                        acc[c] += p[c] as f64;
                    }
                }
            }
            out[(y * w + x) as usize] = [acc[0] / 9.0, acc[1] / 9.0, acc[2] / 9.0];
        }
    }
    out
}

/// out = clamp(smooth + f * (original - smooth)) with a 3x3 box smooth.
fn sharpen(image: &RgbImage, factor: f64) -> RgbImage {
    let smooth = box_smooth(image);
    let w = image.width();
    let mut out = image.clone();
    for (i, pixel) in out.pixels_mut().enumerate() {
        let x = (i as u32) % w;
        let y = (i as u32) / w;
        let original = image.get_pixel(x, y).0;
        let s = smooth[i];
        for c in 0..3 {
            pixel.0[c] = clamp_u8(s[c] + factor * (original[c] as f64 - s[c]));
        }
    }
    out
}

/// out = clamp(mu + c * (pixel - mu)) per channel, with mu the global mean of
/// the BT.601 luma channel.
fn contrast(image: &RgbImage, factor: f64) -> RgbImage {
    let mut luma_sum = 0.0f64;
    for p in image.pixels() {
        luma_sum += 0.299 * p.0[0] as f64 + 0.587 * p.0[1] as f64 + 0.114 * p.0[2] as f64;
    }
    let mu = luma_sum / (image.width() as f64 * image.height() as f64);
    let mut out = image.clone();
    for pixel in out.pixels_mut() {
        for c in 0..3 {
            pixel.0[c] = clamp_u8(mu + factor * (pixel.0[c] as f64 - mu));
        }
    }
    out
}

/// Separable Gaussian blur with the kernel truncated at 3 sigma, replicated
/// borders.
fn gaussian_blur(image: &RgbImage, sigma: f64) -> RgbImage {
    if sigma == 0.0 {
        return image.clone();
    }
    let radius = (3.0 * sigma).floor().max(1.0) as i64;
    let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
    for i in -radius..=radius {
        kernel.push((-((i * i) as f64) / (2.0 * sigma * sigma)).exp());
    }
    let norm: f64 = kernel.iter().sum();
    for k in &mut kernel {
        *k /= norm;
    }

    let (w, h) = (image.width() as i64, image.height() as i64);
    // horizontal pass into f64 planes, then vertical pass back to u8
    let mut horizontal = vec![[0.0f64; 3]; (w * h) as usize];
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0.0f64; 3];
            for (ki, k) in kernel.iter().enumerate() {
                let sx = (x + ki as i64 - radius).clamp(0, w - 1) as u32;
                let p = image.get_pixel(sx, y as u32).0;
                for c in 0..3 {
                    acc[c] += k * p[c] as f64;
                }
            }
            horizontal[(y * w + x) as usize] = acc;
        }
    }
    let mut out = image.clone();
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0.0f64; 3];
            for (ki, k) in kernel.iter().enumerate() {
                let sy = (y + ki as i64 - radius).clamp(0, h - 1);
                let s = horizontal[(sy * w + x) as usize];
                for c in 0..3 {
                    acc[c] += k * s[c];
                }
            }
            out.put_pixel(
                x as u32,
                y as u32,
                image::Rgb([clamp_u8(acc[0]), clamp_u8(acc[1]), clamp_u8(acc[2])]),
            );
        }
    }
    out
}
