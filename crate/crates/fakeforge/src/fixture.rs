//! Deterministic synthetic corpora for examples, demos, and tests.
//!
//! Users of the real pipeline bring their own images; everything here only
//! needs to be decodable, varied, and reproducible.

use std::path::{Path, PathBuf};

use image::RgbImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::datamodel::{write_manifest, Authenticity, Category, ImageRecord};
use crate::error::Result;

/// A small seeded RGB pattern; distinct seeds give distinct images.
pub fn synthetic_image(seed: u64, width: u32, height: u32) -> RgbImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fx: f64 = rng.gen_range(0.02..0.3);
    let fy: f64 = rng.gen_range(0.02..0.3);
    let phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let base: [f64; 3] = [
        rng.gen_range(40.0..200.0),
        rng.gen_range(40.0..200.0),
        rng.gen_range(40.0..200.0),
    ];
    RgbImage::from_fn(width, height, |x, y| {
        let wave = ((x as f64 * fx + phase).sin() + (y as f64 * fy).cos()) * 40.0;
        let diag = ((x + y) % 32) as f64;
        image::Rgb([
            (base[0] + wave).clamp(0.0, 255.0) as u8,
            (base[1] + wave * 0.5 + diag).clamp(0.0, 255.0) as u8,
            (base[2] - wave * 0.3 + diag * 0.5).clamp(0.0, 255.0) as u8,
        ])
    })
}

/// Layout of one corpus cell: how many records of (category, authenticity).
pub type CorpusLayout = Vec<(Category, Authenticity, usize)>;

/// A layout that touches all seven categories with alternating authenticity.
pub fn balanced_layout(per_cell: usize) -> CorpusLayout {
    let mut layout = Vec::new();
    for category in Category::ALL {
        layout.push((category, Authenticity::Real, per_cell));
        layout.push((category, Authenticity::Fake, per_cell));
    }
    layout
}

/// Write PNG images plus a manifest under `dir`; returns the records.
/// Paths in the manifest are absolute. Deterministic given the seed.
pub fn build_corpus(dir: &Path, layout: &CorpusLayout, seed: u64) -> Result<Vec<ImageRecord>> {
    std::fs::create_dir_all(dir).map_err(|e| crate::error::Error::io(dir, e))?;
    let mut records = Vec::new();
    let mut index = 0usize;
    for (category, authenticity, count) in layout {
        for _ in 0..*count {
            let id = format!("img_{index:04}");
            let path = dir.join(format!("{id}.png"));
            let img = synthetic_image(seed.wrapping_add(index as u64), 64, 48);
            img.save(&path)
                .map_err(|e| crate::error::Error::Other(format!("save fixture image: {e}")))?;
            records.push(ImageRecord {
                id,
                image_path: path.to_string_lossy().into_owned(),
                authenticity: *authenticity,
                category: Some(*category),
                source: Some("fixture".into()),
                hard_sample: false,
                extra: serde_json::Map::new(),
            });
            index += 1;
        }
    }
    let manifest = dir.join("manifest.jsonl");
    write_manifest(&manifest, &records)?;
    Ok(records)
}

/// Path of the manifest written by [`build_corpus`].
pub fn manifest_path(dir: &Path) -> PathBuf {
    dir.join("manifest.jsonl")
}
