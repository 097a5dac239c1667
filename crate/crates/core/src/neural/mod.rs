//! Small convolutional network engine: the UNet family, the caustic
//! denoiser, the height-field updater, reverse-mode gradients and Adam.

mod adam;
mod checkpoint;
mod conv;
mod network;
mod nonlin;
mod tensor;
mod train;

pub use adam::{adam_step, AdamState};
pub use checkpoint::{decode_network, encode_network, load_network, load_role, save_network, CheckpointHeader};
pub use conv::{conv2d, conv2d_backward, ConvSpec};
pub use network::{Network, NetworkConfig, Role, Trace};
pub use nonlin::Nonlin;
pub use tensor::Tensor;
pub use train::{train_denoiser, train_updater, DenoiseExample, TrainOptions, TrainReport, UpdaterExample};

use crate::error::{Error, Result};
use crate::heightfield::HeightField;
use crate::render::Irradiance;

/// Heights enter and leave the updater in millimetres.
pub const HEIGHT_SCALE: f64 = 1e3;

fn role_check(net: &Network, role: Role) -> Result<()> {
    if net.role() != role {
        return Err(Error::invalid(format!("expected {role:?} network, got {:?}", net.role())));
    }
    Ok(())
}

/// Denoises one channel given in the working domain (`log1p` irradiance).
pub fn denoise_log(net: &Network, x: &Tensor) -> Result<Tensor> {
    let mut y = net.forward(x)?;
    y.add_assign(x);
    Ok(y)
}

/// Applies the denoiser to every wavelength channel independently.
pub fn denoise(net: &Network, e: &Irradiance) -> Result<Irradiance> {
    role_check(net, Role::Denoiser)?;
    let res = e.res();
    let mut out = Vec::with_capacity(e.values().len());
    for c in 0..e.channels() {
        let src = e.channel(c);
        let x = Tensor::from_vec(1, res, res, src.iter().map(|v| v.ln_1p()).collect())?;
        let r = net.forward(&x)?;
        // expm1(log1p(e) + r) written so that r = 0 returns e exactly
        out.extend(src.iter().zip(r.data()).map(|(&v, &r)| {
            let y = v + (1.0 + v) * r.exp_m1();
            if y.is_nan() {
                0.0
            } else {
                y.clamp(0.0, f64::MAX)
            }
        }));
    }
    Irradiance::from_values(e.channels(), res, e.pixel_pitch(), out)
}

/// The denoiser is treated as the identity in the backward pass.
pub fn denoise_backward_identity(dl_dout: Vec<f64>) -> Vec<f64> {
    dl_dout
}

/// Stacks `[x, g, pool(E_sim), pool(E_target)]` into updater input channels.
///
/// Heights are in millimetres, the gradient is divided by its RMS, and the
/// caustics are average-pooled to the field resolution and `log1p`-compressed.
pub fn updater_features(x: &HeightField, grad: &[f64], e_sim: &Irradiance, e_target: &Irradiance) -> Result<Tensor> {
    let n = x.n();
    if grad.len() != n * n {
        return Err(Error::shape(format!("gradient has {} values for a {n}x{n} field", grad.len())));
    }
    if !e_sim.same_shape(e_target) {
        return Err(Error::shape("simulated and target caustics differ in shape"));
    }
    let pooled_sim = e_sim.avg_pool(n)?;
    let pooled_target = e_target.avg_pool(n)?;
    let rms = (grad.iter().map(|g| g * g).sum::<f64>() / grad.len() as f64).sqrt();
    let inv = if rms > 0.0 && rms.is_finite() { 1.0 / rms } else { 0.0 };
    let mut data = Vec::with_capacity((2 + 2 * e_sim.channels()) * n * n);
    data.extend(x.heights().iter().map(|h| h * HEIGHT_SCALE));
    data.extend(grad.iter().map(|g| g * inv));
    data.extend(pooled_sim.iter().map(|v| v.ln_1p()));
    data.extend(pooled_target.iter().map(|v| v.ln_1p()));
    Tensor::from_vec(2 + 2 * e_sim.channels(), n, n, data)
}

/// Returns the update `Delta` in metres; the caller applies `x - Delta`.
pub fn updater_forward(
    net: &Network,
    x: &HeightField,
    grad: &[f64],
    e_sim: &Irradiance,
    e_target: &Irradiance,
) -> Result<Vec<f64>> {
    role_check(net, Role::Updater)?;
    let features = updater_features(x, grad, e_sim, e_target)?;
    let out = net.forward(&features)?;
    Ok(out.data().iter().map(|d| d / HEIGHT_SCALE).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::render::SceneParams;

    fn scene() -> SceneParams {
        SceneParams::desk()
    }

    #[test]
    fn fresh_denoiser_is_identity() {
        let s = scene();
        let m = s.sensor_res;
        let values: Vec<f64> = (0..3 * m * m).map(|i| ((i % 17) as f64) * 0.37).collect();
        let e = Irradiance::from_values(3, m, s.pixel_pitch(), values).unwrap();
        let net = Network::denoiser(NetworkConfig::desk_denoiser(), 1).unwrap();
        let d = denoise(&net, &e).unwrap();
        assert_eq!(d, e);
    }

    #[test]
    fn denoise_output_non_negative() {
        let s = scene();
        let m = s.sensor_res;
        let mut net = Network::denoiser(NetworkConfig::desk_denoiser(), 2).unwrap();
        for (i, p) in net.params_mut().iter_mut().enumerate() {
            *p += ((i * 7919) % 13) as f64 * 0.05 - 0.3;
        }
        let values: Vec<f64> = (0..3 * m * m).map(|i| ((i * 31) % 23) as f64).collect();
        let e = Irradiance::from_values(3, m, s.pixel_pitch(), values).unwrap();
        let d = denoise(&net, &e).unwrap();
        assert!(d.values().iter().all(|v| v.is_finite() && *v >= 0.0));
    }

    #[test]
    fn backward_identity_passes_through() {
        let g = vec![1.0, -2.0, 3.5];
        assert_eq!(denoise_backward_identity(g.clone()), g);
    }

    #[test]
    fn zero_final_layer_updater_is_fixed_point() {
        let s = scene();
        let n = 64;
        let x = HeightField::from_heights(
            n,
            (0..n * n).map(|i| (i % 9) as f64 * 1e-4).collect(),
            s.substrate_extent,
            s.base_thickness,
        )
        .unwrap();
        let e = Irradiance::from_values(3, s.sensor_res, s.pixel_pitch(), vec![1.0; 3 * s.sensor_res * s.sensor_res])
            .unwrap();
        let net = Network::updater(NetworkConfig::desk_updater(), 3, 3).unwrap();
        let mut cur = x.clone();
        for _ in 0..3 {
            let delta = updater_forward(&net, &cur, &vec![0.5; n * n], &e, &e).unwrap();
            let next: Vec<f64> = cur.heights().iter().zip(&delta).map(|(h, d)| (h - d).max(0.0)).collect();
            cur = cur.with_heights_clamped(next).unwrap();
        }
        assert_eq!(cur.heights(), x.heights());
    }

    #[test]
    fn updater_rejects_mismatched_inputs() {
        let s = scene();
        let x = HeightField::new_flat(64, s.substrate_extent, s.base_thickness).unwrap();
        let e = Irradiance::zeros(3, 48, s.pixel_pitch());
        let net = Network::updater(NetworkConfig::desk_updater(), 3, 3).unwrap();
        assert!(updater_forward(&net, &x, &vec![0.0; 64 * 64], &e, &e).is_err());
        let e = Irradiance::zeros(3, 64, s.pixel_pitch());
        assert!(updater_forward(&net, &x, &[0.0; 5], &e, &e).is_err());
        let d = Network::denoiser(NetworkConfig::desk_denoiser(), 0).unwrap();
        assert!(updater_forward(&d, &x, &vec![0.0; 64 * 64], &e, &e).is_err());
    }
}
