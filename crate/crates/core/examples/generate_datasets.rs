//! Builds tiny denoiser, updater and test datasets on disk and reads them
//! back. Real runs use `caustic-recon gen-denoise` and friends.
//!
//!     cargo run --release --example generate_datasets [out_dir]

use std::path::Path;

use caustic_recon::datasets::{
    gen_denoise_dataset, gen_test_set, gen_updater_dataset, load_denoise_dataset, load_test_set, GenConfig, Quality,
    UpdaterGen,
};
use caustic_recon::metrics::l_irrad;

fn main() -> caustic_recon::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "target/examples-out/datasets".into());
    let out = Path::new(&out);
    let mut cfg = GenConfig::desk(42);
    cfg.scene.sensor_res = 32;
    cfg.field_res = 32;
    cfg.quality = Quality { low: 2_000, high: 32_000 };

    gen_denoise_dataset(&cfg, 8, &out.join("denoise"))?;
    let (pairs, manifest) = load_denoise_dataset(&out.join("denoise"))?;
    println!("denoise: {} pairs, n_l {} / {}", pairs.len(), manifest.quality.low, manifest.quality.high);
    for p in pairs.iter().take(3) {
        println!("  l_irrad(low, high) = {:.4e}", l_irrad(&p.low, &p.high)?);
    }

    let m = gen_updater_dataset(&cfg, &UpdaterGen::default(), None, 8, &out.join("updater"))?;
    for s in &m.samples {
        println!("updater {}: {}", s.dir, s.name);
    }

    gen_test_set(&cfg, &out.join("test"))?;
    let (tests, _) = load_test_set(&out.join("test"))?;
    for t in &tests {
        println!("test {:>20}: tallest {:.2} mm", t.name, t.field.max_height() * 1e3);
    }
    Ok(())
}
