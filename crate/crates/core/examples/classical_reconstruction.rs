//! Gradient-descent reconstruction with the classical update rule, with a
//! small grid search over the step size.
//!
//!     cargo run --release --example classical_reconstruction

use caustic_recon::datasets::{gen_test_samples, GenConfig};
use caustic_recon::reconstruct::{log_grid, reconstruct, tune_classical, Method, Models, ReconstructConfig};
use caustic_recon::HeightField;

fn main() -> caustic_recon::Result<()> {
    let cfg = GenConfig::desk(9);
    let (tests, _) = gen_test_samples(&cfg)?;
    let sample = &tests[0];
    let scene = cfg.scene.clone();
    let flat = HeightField::new_flat(cfg.field_res, scene.substrate_extent, scene.base_thickness)?;
    let base = ReconstructConfig::new(scene, Method::Classical, 8, 1);

    let (classical, score) =
        tune_classical(&sample.target, &flat, &sample.field, &base, &log_grid(1e-8, 1e-4, 2), &[0.0, 0.3], &[0.0])?;
    println!("best step {:.1e}, threshold {} (min l_rel {score:.4})", classical.step, classical.threshold);

    let run = reconstruct(
        &sample.target,
        &flat,
        Some(&sample.field),
        &ReconstructConfig { classical, ..base },
        Models::default(),
    )?;
    for h in &run.history {
        println!(
            "iter {}: l_irrad {:.4e}  l_rel {:.4}  ssim {:.4}",
            h.iteration,
            h.l_irrad,
            h.l_rel.unwrap(),
            h.ssim.unwrap()
        );
    }
    Ok(())
}
