//! Error measures used in evaluation: relative height error, SSIM and the
//! Hausdorff distance between point sets.
//!
//!     cargo run --example metrics_tour

use caustic_recon::heightfield::handpicked_lines;
use caustic_recon::metrics::{hausdorff, l_rel, soft_hausdorff, ssim_fields};
use caustic_recon::HeightField;

fn main() -> caustic_recon::Result<()> {
    let (ext, d) = ((0.05, 0.05), 3e-3);
    let truth = HeightField::from_lines(64, ext, d, &handpicked_lines())?;
    let flat = HeightField::new_flat(64, ext, d)?;
    let half = truth.with_heights_clamped(truth.heights().iter().map(|h| 0.5 * h).collect())?;

    println!("l_rel(truth, truth) = {}", l_rel(&truth, &truth)?);
    println!("l_rel(flat, truth)  = {}", l_rel(&flat, &truth)?);
    println!("l_rel(half, truth)  = {:.3}", l_rel(&half, &truth)?);
    println!("ssim(truth, truth)  = {}", ssim_fields(&truth, &truth)?);
    println!("ssim(half, truth)   = {:.3}", ssim_fields(&half, &truth)?);

    let a = [[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]];
    let b = [[0.0, 0.1], [1.2, 0.0]];
    println!("hausdorff(a, b) = {:.4}", hausdorff(&a, &b)?);
    for tau in [0.1, 0.01, 0.001] {
        println!("  soft surrogate at tau {tau}: {:.4}", soft_hausdorff(&a, &b, tau)?.0);
    }
    Ok(())
}
