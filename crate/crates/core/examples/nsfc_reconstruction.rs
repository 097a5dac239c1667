//! Learned reconstruction with trained checkpoints, next to the classical
//! baseline and the two ablations.
//!
//!     cargo run --release --example train_networks out
//!     cargo run --release --example nsfc_reconstruction out

use std::path::Path;

use caustic_recon::datasets::{gen_test_samples, GenConfig};
use caustic_recon::neural::{load_role, Role};
use caustic_recon::reconstruct::{log_grid, reconstruct, tune_classical, Ablation, Method, Models, ReconstructConfig};
use caustic_recon::HeightField;

fn main() -> caustic_recon::Result<()> {
    let dir = std::env::args().nth(1).unwrap_or_else(|| "target/examples-out".into());
    let den = load_role(Path::new(&dir).join("denoiser.nsfw"), Role::Denoiser)?;
    let upd = load_role(Path::new(&dir).join("updater.nsfw"), Role::Updater)?;

    // the checkpoints from train_networks expect 32x32 fields
    let mut cfg = GenConfig::desk(9);
    cfg.scene.sensor_res = 32;
    cfg.field_res = 32;
    cfg.quality.low = 2_000;
    cfg.quality.high = 32_000;
    let (tests, _) = gen_test_samples(&cfg)?;
    let scene = cfg.scene.with_n_l(cfg.quality.low);
    let flat = HeightField::new_flat(cfg.field_res, scene.substrate_extent, scene.base_thickness)?;
    let models = Models { denoiser: Some(&den), updater: Some(&upd) };

    // the baseline gets its step size tuned on the first sample
    let base = ReconstructConfig::new(scene.clone(), Method::Classical, 6, 3);
    let steps = log_grid(1e-6, 1e-1, 2);
    let (tuned, _) = tune_classical(&tests[0].target, &flat, &tests[0].field, &base, &steps, &[0.0, 0.3], &[0.0])?;
    println!("classical step {:.0e}, threshold {}", tuned.step, tuned.threshold);

    let variants = [
        ("n-sfc", Ablation::default()),
        ("no denoiser", Ablation { no_denoiser: true, no_gradient: false }),
        ("no gradient", Ablation { no_denoiser: false, no_gradient: true }),
    ];
    for s in tests.iter().take(4) {
        print!("{:>20}:", s.name);
        for (label, ablation) in variants {
            let cfg = ReconstructConfig { ablation, ..ReconstructConfig::new(scene.clone(), Method::Nsfc, 6, 3) };
            let run = reconstruct(&s.target, &flat, Some(&s.field), &cfg, models)?;
            print!("  {label} {:.3}", run.min_l_rel().unwrap());
        }
        let classical = ReconstructConfig { classical: tuned, ..base.clone() };
        let run = reconstruct(&s.target, &flat, Some(&s.field), &classical, Models::default())?;
        println!("  classical {:.3}", run.min_l_rel().unwrap());
    }
    Ok(())
}
