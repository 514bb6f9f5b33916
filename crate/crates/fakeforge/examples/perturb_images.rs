//! Apply the whole robustness transform suite to one synthetic image and
//! write the results as PNGs.
//!
//! Run:
//! ```bash
//! cargo run -p fakeforge --example perturb_images
//! ```

use fakeforge::fixture::synthetic_image;
use fakeforge::perturb::{apply, png_bytes, record_seed, suite};

fn main() -> anyhow::Result<()> {
    let out_dir = std::env::temp_dir().join("fakeforge_examples/perturb_images");
    std::fs::create_dir_all(&out_dir)?;

    let image = synthetic_image(7, 256, 192);
    let seed = record_seed(42, "demo_image");

    println!("{:<18} {:>10} {:>12}", "spec", "size", "dimensions");
    for spec in suite() {
        let perturbed = apply(&image, &spec, seed)?;
        let bytes = png_bytes(&perturbed)?;
        let name = spec.tag.to_lowercase().replace([' ', '.'], "_");
        let path = out_dir.join(format!("{name}.png"));
        std::fs::write(&path, &bytes)?;
        println!(
            "{:<18} {:>9}B {:>7}x{}",
            spec.tag,
            bytes.len(),
            perturbed.width(),
            perturbed.height()
        );
    }
    println!("\nwrote outputs under {}", out_dir.display());
    Ok(())
}
