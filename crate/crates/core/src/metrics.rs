//! Objectives and evaluation metrics.

use crate::error::{Error, Result};
use crate::heightfield::HeightField;
use crate::render::Irradiance;

/// Mean squared irradiance difference over all `n_w * m * m` entries.
pub fn l_irrad(e: &Irradiance, target: &Irradiance) -> Result<f64> {
    check_pair(e, target)?;
    Ok(mse(e.values(), target.values()))
}

pub(crate) fn mse(a: &[f64], b: &[f64]) -> f64 {
    let sum: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    sum / a.len() as f64
}

/// Gradient of [`l_irrad`] with respect to its first argument.
pub fn l_irrad_backward(e: &Irradiance, target: &Irradiance) -> Result<Vec<f64>> {
    check_pair(e, target)?;
    let scale = 2.0 / e.values().len() as f64;
    Ok(e.values().iter().zip(target.values()).map(|(x, y)| scale * (x - y)).collect())
}

fn check_pair(e: &Irradiance, target: &Irradiance) -> Result<()> {
    if e.same_shape(target) {
        Ok(())
    } else {
        Err(Error::shape(format!(
            "irradiance {}x{}x{} vs {}x{}x{}",
            e.channels(),
            e.res(),
            e.res(),
            target.channels(),
            target.res(),
            target.res()
        )))
    }
}

/// Relative L2 error of elevations, `||h - truth|| / ||truth||`.
pub fn l_rel(h: &HeightField, truth: &HeightField) -> Result<f64> {
    l_rel_slices(h.heights(), truth.heights())
}

pub fn l_rel_slices(h: &[f64], truth: &[f64]) -> Result<f64> {
    if h.len() != truth.len() {
        return Err(Error::shape(format!("{} vs {} heights", h.len(), truth.len())));
    }
    let denom: f64 = truth.iter().map(|v| v * v).sum::<f64>().sqrt();
    if denom == 0.0 {
        return Err(Error::invalid("relative error against an all-zero ground truth"));
    }
    let num: f64 = h.iter().zip(truth).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    Ok(num / denom)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SsimParams {
    pub window: usize,
    pub gaussian_sigma: f64,
    pub k1: f64,
    pub k2: f64,
    /// `None` uses the maximum of the reference (second) image.
    pub dynamic_range: Option<f64>,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self { window: 11, gaussian_sigma: 1.5, k1: 0.01, k2: 0.03, dynamic_range: None }
    }
}

/// Mean structural similarity over all fully covered Gaussian windows.
pub fn ssim(a: &[f64], b: &[f64], rows: usize, cols: usize, p: &SsimParams) -> Result<f64> {
    if a.len() != rows * cols || b.len() != rows * cols {
        return Err(Error::shape(format!("ssim inputs {} / {} for {rows}x{cols}", a.len(), b.len())));
    }
    if p.window < 3 || p.window % 2 == 0 {
        return Err(Error::invalid(format!("ssim window must be odd and >= 3, got {}", p.window)));
    }
    if rows < p.window || cols < p.window {
        return Err(Error::shape(format!("{rows}x{cols} image is smaller than the {} window", p.window)));
    }
    if !(p.k1 > 0.0 && p.k2 > 0.0 && p.gaussian_sigma > 0.0) {
        return Err(Error::invalid("ssim constants must be > 0"));
    }
    let range = p.dynamic_range.unwrap_or_else(|| b.iter().copied().fold(f64::NEG_INFINITY, f64::max));
    if !(range > 0.0 && range.is_finite()) {
        return Err(Error::invalid(format!("ssim dynamic range must be > 0, got {range}")));
    }
    let c1 = (p.k1 * range).powi(2);
    let c2 = (p.k2 * range).powi(2);

    let half = (p.window / 2) as f64;
    let mut kernel: Vec<f64> =
        (0..p.window).map(|i| (-((i as f64 - half).powi(2)) / (2.0 * p.gaussian_sigma.powi(2))).exp()).collect();
    let ksum: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= ksum);

    let (out_r, out_c) = (rows - p.window + 1, cols - p.window + 1);
    let filter = |img: &dyn Fn(usize) -> f64| -> Vec<f64> {
        let mut horiz = vec![0.0; rows * out_c];
        for r in 0..rows {
            for c in 0..out_c {
                horiz[r * out_c + c] = kernel.iter().enumerate().map(|(k, w)| w * img(r * cols + c + k)).sum();
            }
        }
        let mut out = vec![0.0; out_r * out_c];
        for r in 0..out_r {
            for c in 0..out_c {
                out[r * out_c + c] = kernel.iter().enumerate().map(|(k, w)| w * horiz[(r + k) * out_c + c]).sum();
            }
        }
        out
    };
    let mu_a = filter(&|i| a[i]);
    let mu_b = filter(&|i| b[i]);
    let aa = filter(&|i| a[i] * a[i]);
    let bb = filter(&|i| b[i] * b[i]);
    let ab = filter(&|i| a[i] * b[i]);
    let mut total = 0.0;
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = aa[i] - ma * ma;
        let vb = bb[i] - mb * mb;
        let cov = ab[i] - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    Ok(total / mu_a.len() as f64)
}

/// SSIM between two height fields using the ground truth's peak as range.
pub fn ssim_fields(h: &HeightField, truth: &HeightField) -> Result<f64> {
    if h.n() != truth.n() {
        return Err(Error::shape(format!("{} vs {} field resolution", h.n(), truth.n())));
    }
    ssim(h.heights(), truth.heights(), h.n(), h.n(), &SsimParams::default())
}

fn dist<const D: usize>(a: &[f64; D], b: &[f64; D]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Symmetric Hausdorff distance between two finite point sets.
pub fn hausdorff<const D: usize>(a: &[[f64; D]], b: &[[f64; D]]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::invalid("hausdorff distance of an empty point set"));
    }
    let directed = |from: &[[f64; D]], to: &[[f64; D]]| {
        from.iter().map(|p| to.iter().map(|q| dist(p, q)).fold(f64::INFINITY, f64::min)).fold(0.0, f64::max)
    };
    Ok(directed(a, b).max(directed(b, a)))
}

fn log_sum_exp(xs: &[f64]) -> (f64, Vec<f64>) {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = xs.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = exps.iter().sum();
    (m + s.ln(), exps.into_iter().map(|e| e / s).collect())
}

/// Smooth Hausdorff surrogate with temperature `tau`: soft-min over the
/// nearest neighbours, soft-max over each set and over both directions.
/// Returns the value and its gradient with respect to the points of `a`.
///
/// Differs from the exact distance by at most
/// `tau * (ln|a| + ln|b| + ln 2)`.
pub fn soft_hausdorff<const D: usize>(a: &[[f64; D]], b: &[[f64; D]], tau: f64) -> Result<(f64, Vec<[f64; D]>)> {
    soft_hausdorff_split(a, b, tau, tau)
}

/// [`soft_hausdorff`] with separate temperatures for the nearest-neighbour
/// soft-min (`tau_near`) and the outer soft-max (`tau_far`). A large
/// `tau_far` turns the outer max into a log-mean, close to a Chamfer loss.
pub fn soft_hausdorff_split<const D: usize>(
    a: &[[f64; D]],
    b: &[[f64; D]],
    tau_near: f64,
    tau_far: f64,
) -> Result<(f64, Vec<[f64; D]>)> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::invalid("hausdorff distance of an empty point set"));
    }
    if !(tau_near > 0.0 && tau_far > 0.0) {
        return Err(Error::invalid("temperature must be > 0"));
    }
    let (na, nb) = (a.len(), b.len());
    let d: Vec<f64> = a.iter().flat_map(|p| b.iter().map(move |q| dist(p, q))).collect();

    // a -> b: soft-min over j, soft-max over i
    let mut m_a = Vec::with_capacity(na);
    let mut p_ab = vec![0.0; na * nb];
    for i in 0..na {
        let neg: Vec<f64> = (0..nb).map(|j| -d[i * nb + j] / tau_near).collect();
        let (lse, w) = log_sum_exp(&neg);
        m_a.push(-tau_near * lse);
        p_ab[i * nb..(i + 1) * nb].copy_from_slice(&w);
    }
    let scaled: Vec<f64> = m_a.iter().map(|m| m / tau_far).collect();
    let (lse_a, q_a) = log_sum_exp(&scaled);
    let h_ab = tau_far * lse_a;

    // b -> a
    let mut m_b = Vec::with_capacity(nb);
    let mut p_ba = vec![0.0; na * nb];
    for j in 0..nb {
        let neg: Vec<f64> = (0..na).map(|i| -d[i * nb + j] / tau_near).collect();
        let (lse, w) = log_sum_exp(&neg);
        m_b.push(-tau_near * lse);
        for i in 0..na {
            p_ba[i * nb + j] = w[i];
        }
    }
    let scaled: Vec<f64> = m_b.iter().map(|m| m / tau_far).collect();
    let (lse_b, q_b) = log_sum_exp(&scaled);
    let h_ba = tau_far * lse_b;

    let (lse, dir_w) = log_sum_exp(&[h_ab / tau_far, h_ba / tau_far]);
    let value = tau_far * lse;

    let mut grad = vec![[0.0; D]; na];
    for i in 0..na {
        for j in 0..nb {
            let dij = d[i * nb + j];
            if dij == 0.0 {
                continue;
            }
            let w = dir_w[0] * q_a[i] * p_ab[i * nb + j] + dir_w[1] * q_b[j] * p_ba[i * nb + j];
            for k in 0..D {
                grad[i][k] += w * (a[i][k] - b[j][k]) / dij;
            }
        }
    }
    Ok((value, grad))
}
