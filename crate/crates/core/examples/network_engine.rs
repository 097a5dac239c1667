//! The convolutional engine on its own: build a UNet, run it forward and
//! backward, and fit a toy mapping with Adam.
//!
//!     cargo run --release --example network_engine

use caustic_recon::neural::{adam_step, AdamState, Network, NetworkConfig, Nonlin, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> caustic_recon::Result<()> {
    let cfg = NetworkConfig { c_init: 4, n_s: 2, nonlin: Nonlin::Elu, ..NetworkConfig::desk_denoiser() };
    let mut net = Network::denoiser(cfg, 1)?;
    println!("denoiser with {} parameters, input side must divide by {}", net.param_count(), net.divisor());

    // learn y = 0.5 * blur(x) on random 16x16 images
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let data: Vec<(Tensor, Tensor)> = (0..16)
        .map(|_| {
            let x: Vec<f64> = (0..256).map(|_| rng.gen::<f64>()).collect();
            let y: Vec<f64> = (0..256usize)
                .map(|i| {
                    let (r, c) = (i / 16, i % 16);
                    let left = x[r * 16 + c.saturating_sub(1)];
                    let right = x[r * 16 + (c + 1).min(15)];
                    0.5 * (left + x[i] + right) / 3.0
                })
                .collect();
            (Tensor::from_vec(1, 16, 16, x).unwrap(), Tensor::from_vec(1, 16, 16, y).unwrap())
        })
        .collect();

    let mut adam = AdamState::new(net.param_count());
    for epoch in 0..=200 {
        let mut grads = vec![0.0; net.param_count()];
        let mut loss = 0.0;
        for (x, y) in &data {
            let (out, trace) = net.forward_traced(x)?;
            let dy: Vec<f64> = out.data().iter().zip(y.data()).map(|(o, t)| 2.0 * (o - t) / 256.0).collect();
            loss += out.data().iter().zip(y.data()).map(|(o, t)| (o - t) * (o - t)).sum::<f64>() / 256.0;
            let (_, g) = net.backward(&trace, &Tensor::from_vec(1, 16, 16, dy)?)?;
            grads.iter_mut().zip(g).for_each(|(a, b)| *a += b / data.len() as f64);
        }
        if epoch % 50 == 0 {
            println!("epoch {epoch:3}: mse {:.3e}", loss / data.len() as f64);
        }
        adam_step(net.params_mut(), &grads, &mut adam, 3e-3)?;
    }
    Ok(())
}
