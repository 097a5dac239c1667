//! Compares the adjoint renderer with finite differences that reuse the
//! same photons on both sides of every difference.
//!
//!     cargo run --release --example render_gradient

use caustic_recon::metrics::{l_irrad, l_irrad_backward};
use caustic_recon::render::{finite_diff_render_gradient, render, render_backward};
use caustic_recon::{HeightField, SceneParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> caustic_recon::Result<()> {
    let scene = SceneParams { n_l: 1000, sensor_res: 32, ..SceneParams::desk() };
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let field = |rng: &mut ChaCha8Rng| {
        let h: Vec<f64> = (0..64).map(|_| rng.gen::<f64>() * 1.5e-3).collect();
        HeightField::from_heights(8, h, scene.substrate_extent, scene.base_thickness)
    };
    let (x, truth) = (field(&mut rng)?, field(&mut rng)?);
    let target = render(&truth, &scene.with_n_l(20_000), 1)?;

    let seed = 5;
    let e = render(&x, &scene, seed)?;
    let adjoint = render_backward(&x, &scene, seed, &l_irrad_backward(&e, &target)?)?;
    let fd = finite_diff_render_gradient(&x, &scene, seed, 1e-7, |img| l_irrad(img, &target).unwrap())?;

    let mut order: Vec<usize> = (0..fd.len()).collect();
    order.sort_by(|&a, &b| fd[b].abs().total_cmp(&fd[a].abs()));
    println!("texel   finite diff      adjoint   rel err");
    for &i in &order[..10] {
        println!("{i:5} {:12.4e} {:12.4e} {:9.4}", fd[i], adjoint[i], (adjoint[i] - fd[i]).abs() / fd[i].abs());
    }
    Ok(())
}
