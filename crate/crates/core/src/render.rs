//! Multispectral photon-splatting caustic renderer and its adjoint.
//!
//! Light enters the top height-field surface of a glass slab, refracts there
//! and again at the flat bottom face (z = 0), and lands on a screen plane
//! below the slab. Each light path carries one branch per wavelength; every
//! branch deposits its energy on the sensor with an elliptical Gaussian
//! footprint stretched along the projected exit direction.
//!
//! The adjoint re-traces exactly the same photons (same seed) and chains the
//! image gradient through the splat position, both refractions and the
//! bilinear surface normal back to the height texels. The footprint shape is
//! held fixed in the adjoint.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heightfield::HeightField;
use crate::io::Grid;
use crate::vec3::{self, Vec3};

/// Photons traced per RNG stream / accumulation batch.
pub const BATCH: usize = 4096;
/// Batches reduced together in deterministic mode.
const WAVE: usize = 8;
/// Footprint cutoff in standard deviations.
const CUTOFF_SIGMAS: f64 = 3.0;
/// Largest major/minor footprint ratio.
const MAX_ANISOTROPY: f64 = 8.0;

/// Sellmeier dispersion model, `C` coefficients in square micrometers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectralIor {
    pub b: [f64; 3],
    pub c: [f64; 3],
}

impl Default for SpectralIor {
    /// Fused silica (Malitson).
    fn default() -> Self {
        Self {
            b: [0.696_166_3, 0.407_942_6, 0.897_479_4],
            c: [0.068_404_3f64.powi(2), 0.116_241_4f64.powi(2), 9.896_161f64.powi(2)],
        }
    }
}

impl SpectralIor {
    pub fn ior(&self, wavelength_nm: f64) -> Result<f64> {
        if !(wavelength_nm > 0.0 && wavelength_nm.is_finite()) {
            return Err(Error::invalid(format!("wavelength must be > 0 nm, got {wavelength_nm}")));
        }
        let l2 = (wavelength_nm * 1e-3).powi(2);
        let mut n2 = 1.0;
        for (b, c) in self.b.iter().zip(&self.c) {
            let denom = l2 - c;
            if denom.abs() < 1e-12 {
                return Err(Error::Numeric(format!("Sellmeier pole at {wavelength_nm} nm")));
            }
            n2 += b * l2 / denom;
        }
        if !(n2 > 0.0) {
            return Err(Error::Numeric(format!("negative n^2 at {wavelength_nm} nm")));
        }
        Ok(n2.sqrt())
    }
}

/// Non-differentiable scene description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneParams {
    /// Light paths per rendering.
    pub n_l: usize,
    /// Simulated wavelengths in nm; one irradiance channel each.
    pub wavelengths: Vec<f64>,
    /// Footprint smoothing; 16 gives a one-pixel minor standard deviation.
    pub smoothing: f64,
    /// Half-angle of the emission cone in radians, 0 = collimated.
    pub emission_angle: f64,
    /// Radiosity per wavelength (W/m^2).
    pub radiosity: Vec<f64>,
    pub light_pos: [f64; 3],
    pub screen_pos: [f64; 3],
    pub substrate_extent: (f64, f64),
    /// Sensor is `sensor_res x sensor_res` pixels covering the substrate extent.
    pub sensor_res: usize,
    pub base_thickness: f64,
    pub glass: SpectralIor,
}

impl SceneParams {
    /// Full-size process values (512 x 512 sensor, 10^6 light paths).
    pub fn full() -> Self {
        Self {
            n_l: 1_000_000,
            wavelengths: vec![610.0, 530.0, 430.0],
            smoothing: 16.0,
            emission_angle: 0.0,
            radiosity: vec![1.0, 1.0, 1.0],
            light_pos: [0.0, 0.0, 1.0],
            screen_pos: [0.0, 0.0, -1e-6],
            substrate_extent: (0.05, 0.05),
            sensor_res: 512,
            base_thickness: 3e-3,
            glass: SpectralIor::default(),
        }
    }

    /// Desk-scale scene: 64 x 64 sensor and 10^4 light paths.
    pub fn desk() -> Self {
        Self { n_l: 10_000, sensor_res: 64, ..Self::full() }
    }

    pub fn n_w(&self) -> usize {
        self.wavelengths.len()
    }

    pub fn with_n_l(&self, n_l: usize) -> Self {
        Self { n_l, ..self.clone() }
    }

    pub fn pixel_pitch(&self) -> (f64, f64) {
        (self.substrate_extent.0 / self.sensor_res as f64, self.substrate_extent.1 / self.sensor_res as f64)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_l == 0 {
            return Err(Error::invalid("n_l must be >= 1"));
        }
        if self.wavelengths.is_empty() || self.wavelengths.len() != self.radiosity.len() {
            return Err(Error::invalid(format!(
                "{} wavelengths but {} radiosity values",
                self.wavelengths.len(),
                self.radiosity.len()
            )));
        }
        if self.radiosity.iter().any(|r| !(*r >= 0.0 && r.is_finite())) {
            return Err(Error::invalid("radiosity components must be finite and >= 0"));
        }
        if self.sensor_res < 2 {
            return Err(Error::invalid("sensor resolution must be >= 2"));
        }
        if !(self.smoothing > 0.0) {
            return Err(Error::invalid("smoothing must be > 0"));
        }
        if !(0.0..std::f64::consts::FRAC_PI_2).contains(&self.emission_angle) {
            return Err(Error::invalid("emission angle must lie in [0, pi/2)"));
        }
        if !(self.substrate_extent.0 > 0.0 && self.substrate_extent.1 > 0.0 && self.base_thickness > 0.0) {
            return Err(Error::invalid("substrate extent and thickness must be > 0"));
        }
        if !(self.screen_pos[2] < 0.0) {
            return Err(Error::Geometry(format!(
                "screen at z = {} is not below the substrate bottom (z = 0)",
                self.screen_pos[2]
            )));
        }
        if !(self.light_pos[2] > self.base_thickness) {
            return Err(Error::Geometry("light source is not above the substrate".into()));
        }
        for &w in &self.wavelengths {
            if self.glass.ior(w)? <= 1.0 {
                return Err(Error::invalid(format!("glass index at {w} nm is not > 1")));
            }
        }
        Ok(())
    }

    fn check_field(&self, h: &HeightField) -> Result<()> {
        self.validate()?;
        if h.extent() != self.substrate_extent || h.base_thickness() != self.base_thickness {
            return Err(Error::shape(format!(
                "height field geometry {:?}/{} does not match scene {:?}/{}",
                h.extent(),
                h.base_thickness(),
                self.substrate_extent,
                self.base_thickness
            )));
        }
        Ok(())
    }
}

/// Wavelength-resolved irradiance (W/m^2), `channels x res x res`.
#[derive(Debug, Clone, PartialEq)]
pub struct Irradiance {
    channels: usize,
    res: usize,
    pixel_pitch: (f64, f64),
    values: Vec<f64>,
}

impl Irradiance {
    pub fn zeros(channels: usize, res: usize, pixel_pitch: (f64, f64)) -> Self {
        Self { channels, res, pixel_pitch, values: vec![0.0; channels * res * res] }
    }

    pub fn from_values(channels: usize, res: usize, pixel_pitch: (f64, f64), values: Vec<f64>) -> Result<Self> {
        if values.len() != channels * res * res {
            return Err(Error::shape(format!("{} irradiance values for {channels}x{res}x{res}", values.len())));
        }
        if let Some(bad) = values.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(Error::Numeric(format!("irradiance must be finite and >= 0, found {bad}")));
        }
        Ok(Self { channels, res, pixel_pitch, values })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn res(&self) -> usize {
        self.res
    }

    pub fn pixel_pitch(&self) -> (f64, f64) {
        self.pixel_pitch
    }

    pub fn pixel_area(&self) -> f64 {
        self.pixel_pitch.0 * self.pixel_pitch.1
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let plane = self.res * self.res;
        &self.values[c * plane..(c + 1) * plane]
    }

    pub fn same_shape(&self, other: &Irradiance) -> bool {
        self.channels == other.channels && self.res == other.res
    }

    /// Power landing on the sensor in one channel (W).
    pub fn total_power(&self, c: usize) -> f64 {
        self.channel(c).iter().sum::<f64>() * self.pixel_area()
    }

    pub fn quantized(&self) -> Irradiance {
        let values = self.values.iter().map(|&v| v as f32 as f64).collect();
        Irradiance { values, ..self.clone() }
    }

    /// Box-averages each channel down to `n x n`; `res` must be a multiple of `n`.
    pub fn avg_pool(&self, n: usize) -> Result<Vec<f64>> {
        if n == 0 || self.res % n != 0 {
            return Err(Error::shape(format!("cannot pool {}x{} to {n}x{n}", self.res, self.res)));
        }
        let k = self.res / n;
        let norm = 1.0 / (k * k) as f64;
        let mut out = vec![0.0; self.channels * n * n];
        for c in 0..self.channels {
            let src = self.channel(c);
            for r in 0..self.res {
                for col in 0..self.res {
                    out[(c * n + r / k) * n + col / k] += src[r * self.res + col] * norm;
                }
            }
        }
        Ok(out)
    }

    pub fn to_grid(&self) -> Grid {
        Grid::from_f64(self.channels, self.res, self.res, &self.values).expect("consistent dims")
    }

    /// Loads an irradiance grid; the sensor is assumed to cover `extent`.
    pub fn from_grid(grid: &Grid, extent: (f64, f64)) -> Result<Self> {
        if grid.rows != grid.cols {
            return Err(Error::shape(format!("irradiance must be square, got {}x{}", grid.rows, grid.cols)));
        }
        let pitch = (extent.0 / grid.rows as f64, extent.1 / grid.rows as f64);
        Self::from_values(grid.channels, grid.rows, pitch, grid.to_f64())
    }
}

/// Per-channel energy bookkeeping of one rendering (W).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RenderStats {
    pub emitted: Vec<f64>,
    pub deposited: Vec<f64>,
    pub offscreen: Vec<f64>,
    pub tir: Vec<f64>,
}

impl RenderStats {
    fn zeros(n_w: usize) -> Self {
        Self { emitted: vec![0.0; n_w], deposited: vec![0.0; n_w], offscreen: vec![0.0; n_w], tir: vec![0.0; n_w] }
    }

    fn add(&mut self, other: &RenderStats) {
        for c in 0..self.emitted.len() {
            self.emitted[c] += other.emitted[c];
            self.deposited[c] += other.deposited[c];
            self.offscreen[c] += other.offscreen[c];
            self.tir[c] += other.tir[c];
        }
    }

    /// `|deposited + losses - emitted| / emitted` for channel `c`.
    pub fn balance_error(&self, c: usize) -> f64 {
        let acc = self.deposited[c] + self.offscreen[c] + self.tir[c];
        (acc - self.emitted[c]).abs() / self.emitted[c].max(f64::MIN_POSITIVE)
    }
}

/// Outgoing direction of a refraction, or total internal reflection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Refraction {
    Transmitted(Vec3),
    TotalInternalReflection,
}

/// Vector Snell refraction of unit `dir` through a surface with unit `normal`
/// facing against `dir`; `eta = n_in / n_out`.
pub fn refract(dir: Vec3, normal: Vec3, eta: f64) -> Result<Refraction> {
    for (name, v) in [("direction", dir), ("normal", normal)] {
        if (vec3::norm(v) - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("{name} {v:?} is not unit length")));
        }
    }
    Ok(match refract_raw(dir, normal, eta) {
        Some(t) => Refraction::Transmitted(t),
        None => Refraction::TotalInternalReflection,
    })
}

#[inline]
fn refract_raw(d: Vec3, n: Vec3, eta: f64) -> Option<Vec3> {
    let cos_i = -vec3::dot(n, d);
    let k = 1.0 - eta * eta * (1.0 - cos_i * cos_i);
    if k < 0.0 {
        return None;
    }
    let a = eta * cos_i - k.sqrt();
    Some([eta * d[0] + a * n[0], eta * d[1] + a * n[1], eta * d[2] + a * n[2]])
}

/// Vector-Jacobian product of [`refract_raw`]: returns `(g_dir, g_normal)`.
#[inline]
fn refract_vjp(d: Vec3, n: Vec3, eta: f64, gt: Vec3) -> (Vec3, Vec3) {
    let cos_i = -vec3::dot(n, d);
    let k = 1.0 - eta * eta * (1.0 - cos_i * cos_i);
    let s = k.sqrt();
    let a = eta * cos_i - s;
    let da_dc = eta - eta * eta * cos_i / s;
    let gtn = vec3::dot(gt, n);
    let gd = [eta * gt[0] - gtn * da_dc * n[0], eta * gt[1] - gtn * da_dc * n[1], eta * gt[2] - gtn * da_dc * n[2]];
    let gn = [a * gt[0] - gtn * da_dc * d[0], a * gt[1] - gtn * da_dc * d[1], a * gt[2] - gtn * da_dc * d[2]];
    (gd, gn)
}

/// The four texels around a point with the weights that produce the bilinear
/// value and its x/y slopes from them.
#[derive(Debug, Clone, Copy)]
struct Cell {
    idx: [usize; 4],
    value_w: [f64; 4],
    dx_w: [f64; 4],
    dy_w: [f64; 4],
}

impl Cell {
    fn locate(n: usize, extent: (f64, f64), x: f64, y: f64) -> Cell {
        let (tx_size, ty_size) = (extent.0 / n as f64, extent.1 / n as f64);
        let gx = (x + 0.5 * extent.0) / tx_size - 0.5;
        let gy = (y + 0.5 * extent.1) / ty_size - 0.5;
        let last = (n - 1) as f64;
        let (cx, clamp_x) = (gx.clamp(0.0, last), !(0.0..=last).contains(&gx));
        let (cy, clamp_y) = (gy.clamp(0.0, last), !(0.0..=last).contains(&gy));
        let c0 = (cx.floor() as usize).min(n - 2);
        let r0 = (cy.floor() as usize).min(n - 2);
        let tx = cx - c0 as f64;
        let ty = cy - r0 as f64;
        let idx = [r0 * n + c0, r0 * n + c0 + 1, (r0 + 1) * n + c0, (r0 + 1) * n + c0 + 1];
        let value_w = [(1.0 - tx) * (1.0 - ty), tx * (1.0 - ty), (1.0 - tx) * ty, tx * ty];
        let sx = if clamp_x { 0.0 } else { 1.0 / tx_size };
        let sy = if clamp_y { 0.0 } else { 1.0 / ty_size };
        let dx_w = [-(1.0 - ty) * sx, (1.0 - ty) * sx, -ty * sx, ty * sx];
        let dy_w = [-(1.0 - tx) * sy, -tx * sy, (1.0 - tx) * sy, tx * sy];
        Cell { idx, value_w, dx_w, dy_w }
    }

    fn eval(&self, heights: &[f64]) -> (f64, f64, f64) {
        let mut v = 0.0;
        let mut dx = 0.0;
        let mut dy = 0.0;
        for k in 0..4 {
            let h = heights[self.idx[k]];
            v += self.value_w[k] * h;
            dx += self.dx_w[k] * h;
            dy += self.dy_w[k] * h;
        }
        (v, dx, dy)
    }
}

/// Unit normal of the surface `z = d + h(x, y)` with `h` bilinearly
/// interpolated between texel centers; points toward +z.
pub fn surface_normal(h: &HeightField, x: f64, y: f64) -> Result<Vec3> {
    let (ex, ey) = h.extent();
    if x.abs() > 0.5 * ex || y.abs() > 0.5 * ey {
        return Err(Error::invalid(format!("point ({x}, {y}) outside the substrate")));
    }
    let (_, sx, sy) = Cell::locate(h.n(), h.extent(), x, y).eval(h.heights());
    Ok(vec3::normalize([-sx, -sy, 1.0]))
}

/// Geometry shared by forward and adjoint tracing.
struct Tracer<'a> {
    heights: &'a [f64],
    n: usize,
    extent: (f64, f64),
    base: f64,
    screen: [f64; 3],
    iors: Vec<f64>,
    energies: Vec<f64>,
    res: usize,
    pitch: (f64, f64),
    sigma: f64,
    emission_angle: f64,
}

/// One traced wavelength branch.
#[derive(Debug, Clone, Copy)]
struct Branch {
    z0: f64,
    normal: Vec3,
    t1: Vec3,
    t2: Vec3,
    hit: [f64; 2],
}

impl<'a> Tracer<'a> {
    fn new(heights: &'a [f64], n: usize, scene: &SceneParams) -> Result<Self> {
        let iors = scene.wavelengths.iter().map(|&w| scene.glass.ior(w)).collect::<Result<Vec<_>>>()?;
        let (ex, ey) = scene.substrate_extent;
        let energies = scene.radiosity.iter().map(|l| l * ex * ey / scene.n_l as f64).collect();
        let pitch = scene.pixel_pitch();
        Ok(Self {
            heights,
            n,
            extent: scene.substrate_extent,
            base: scene.base_thickness,
            screen: scene.screen_pos,
            iors,
            energies,
            res: scene.sensor_res,
            pitch,
            sigma: scene.smoothing * pitch.0.min(pitch.1) / 16.0,
            emission_angle: scene.emission_angle,
        })
    }

    /// Entry point and incident direction of photon `i` of a batch stream.
    fn sample(&self, rng: &mut ChaCha8Rng) -> (f64, f64, Vec3) {
        let x = (rng.gen::<f64>() - 0.5) * self.extent.0;
        let y = (rng.gen::<f64>() - 0.5) * self.extent.1;
        let dir = if self.emission_angle > 0.0 {
            let cos_max = self.emission_angle.cos();
            let cos_t = 1.0 - rng.gen::<f64>() * (1.0 - cos_max);
            let sin_t = (1.0 - cos_t * cos_t).max(0.0).sqrt();
            let phi = 2.0 * std::f64::consts::PI * rng.gen::<f64>();
            [sin_t * phi.cos(), sin_t * phi.sin(), -cos_t]
        } else {
            [0.0, 0.0, -1.0]
        };
        (x, y, dir)
    }

    fn trace(&self, cell: &Cell, x: f64, y: f64, dir: Vec3, ior: f64) -> Option<Branch> {
        let (hv, sx, sy) = cell.eval(self.heights);
        let z0 = self.base + hv;
        let normal = vec3::normalize([-sx, -sy, 1.0]);
        let t1 = refract_raw(dir, normal, 1.0 / ior)?;
        if t1[2] >= -1e-12 {
            return None;
        }
        let r1 = z0 / -t1[2];
        let p1 = [x + r1 * t1[0], y + r1 * t1[1]];
        let t2 = refract_raw(t1, [0.0, 0.0, 1.0], ior)?;
        if t2[2] >= -1e-12 {
            return None;
        }
        let r2 = -self.screen[2] / -t2[2];
        let hit = [p1[0] + r2 * t2[0] - self.screen[0], p1[1] + r2 * t2[1] - self.screen[1]];
        Some(Branch { z0, normal, t1, t2, hit })
    }

    /// Pushes `g_hit` back to the texels of `cell`, accumulating into `grad`.
    fn trace_vjp(&self, cell: &Cell, dir: Vec3, ior: f64, b: &Branch, g_hit: [f64; 2], grad: &mut [f64]) {
        let d_screen = -self.screen[2];
        // hit = p1 + d_screen * t2.xy / -t2.z
        let inv2 = 1.0 / -b.t2[2];
        let g_t2 = [
            g_hit[0] * d_screen * inv2,
            g_hit[1] * d_screen * inv2,
            (g_hit[0] * b.t2[0] + g_hit[1] * b.t2[1]) * d_screen * inv2 * inv2,
        ];
        // p1 = (x, y) + z0 * t1.xy / -t1.z
        let inv1 = 1.0 / -b.t1[2];
        let (mut g_t1, _) = refract_vjp(b.t1, [0.0, 0.0, 1.0], ior, g_t2);
        g_t1[0] += g_hit[0] * b.z0 * inv1;
        g_t1[1] += g_hit[1] * b.z0 * inv1;
        g_t1[2] += (g_hit[0] * b.t1[0] + g_hit[1] * b.t1[1]) * b.z0 * inv1 * inv1;
        let g_z0 = (g_hit[0] * b.t1[0] + g_hit[1] * b.t1[1]) * inv1;
        let (_, g_n) = refract_vjp(dir, b.normal, 1.0 / ior, g_t1);
        // normal = normalize(-sx, -sy, 1)
        let (_, sx, sy) = cell.eval(self.heights);
        let len = (sx * sx + sy * sy + 1.0).sqrt();
        let ndg = vec3::dot(b.normal, g_n);
        let g_u = [(g_n[0] - b.normal[0] * ndg) / len, (g_n[1] - b.normal[1] * ndg) / len];
        let (g_sx, g_sy) = (-g_u[0], -g_u[1]);
        for k in 0..4 {
            grad[cell.idx[k]] += g_z0 * cell.value_w[k] + g_sx * cell.dx_w[k] + g_sy * cell.dy_w[k];
        }
    }
}

/// Footprint of one splat: inverse covariance and the pixel window it covers.
struct Footprint {
    inv_cov: [f64; 3],
    col0: i64,
    col1: i64,
    row0: i64,
    row1: i64,
}

impl Footprint {
    fn new(tr: &Tracer, hit: [f64; 2], exit: Vec3) -> Footprint {
        let txy2 = exit[0] * exit[0] + exit[1] * exit[1];
        let tz2 = (exit[2] * exit[2]).max(1.0 / (MAX_ANISOTROPY * MAX_ANISOTROPY));
        // inverse covariance (I - kappa * u u^T) / sigma^2 with u the projected exit direction
        let kappa_over = if txy2 > 1e-300 { (1.0 - tz2) / txy2 } else { 0.0 };
        let s2 = tr.sigma * tr.sigma;
        let inv_cov = [
            (1.0 - kappa_over * exit[0] * exit[0]) / s2,
            (-kappa_over * exit[0] * exit[1]) / s2,
            (1.0 - kappa_over * exit[1] * exit[1]) / s2,
        ];
        let radius = CUTOFF_SIGMAS * tr.sigma / tz2.sqrt();
        let half = 0.5 * tr.res as f64;
        let col = |x: f64| x / tr.pitch.0 + half - 0.5;
        let row = |y: f64| y / tr.pitch.1 + half - 0.5;
        Footprint {
            inv_cov,
            col0: col(hit[0] - radius).ceil() as i64,
            col1: col(hit[0] + radius).floor() as i64,
            row0: row(hit[1] - radius).ceil() as i64,
            row1: row(hit[1] + radius).floor() as i64,
        }
    }

    #[inline]
    fn pixel_offset(tr: &Tracer, hit: [f64; 2], row: i64, col: i64) -> [f64; 2] {
        let half = 0.5 * tr.res as f64;
        [(col as f64 + 0.5 - half) * tr.pitch.0 - hit[0], (row as f64 + 0.5 - half) * tr.pitch.1 - hit[1]]
    }

    /// Returns `(exp(-r^2/2), weight)` with the weight shifted to vanish at the cutoff.
    #[inline]
    fn weight(&self, d: [f64; 2]) -> (f64, f64) {
        let r2 = self.inv_cov[0] * d[0] * d[0] + 2.0 * self.inv_cov[1] * d[0] * d[1] + self.inv_cov[2] * d[1] * d[1];
        let cut = CUTOFF_SIGMAS * CUTOFF_SIGMAS;
        if r2 >= cut {
            return (0.0, 0.0);
        }
        let g = (-0.5 * r2).exp();
        (g, g - (-0.5 * cut).exp())
    }
}

/// Deposits `energy` (W) around `hit` into one irradiance channel. Returns the
/// part of the energy that fell off the sensor.
fn splat(tr: &Tracer, plane: &mut [f64], hit: [f64; 2], exit: Vec3, energy: f64) -> f64 {
    if energy == 0.0 {
        return 0.0;
    }
    let fp = Footprint::new(tr, hit, exit);
    let res = tr.res as i64;
    let mut z = 0.0;
    for row in fp.row0..=fp.row1 {
        for col in fp.col0..=fp.col1 {
            z += fp.weight(Footprint::pixel_offset(tr, hit, row, col)).1;
        }
    }
    let area = tr.pitch.0 * tr.pitch.1;
    if z <= 0.0 {
        // footprint narrower than a pixel: nearest pixel takes everything
        let half = 0.5 * tr.res as f64;
        let col = (hit[0] / tr.pitch.0 + half).floor() as i64;
        let row = (hit[1] / tr.pitch.1 + half).floor() as i64;
        if (0..res).contains(&row) && (0..res).contains(&col) {
            plane[(row * res + col) as usize] += energy / area;
            return 0.0;
        }
        return energy;
    }
    let scale = energy / (z * area);
    let mut on = 0.0;
    for row in fp.row0.max(0)..=fp.row1.min(res - 1) {
        for col in fp.col0.max(0)..=fp.col1.min(res - 1) {
            let w = fp.weight(Footprint::pixel_offset(tr, hit, row, col)).1;
            if w > 0.0 {
                plane[(row * res + col) as usize] += scale * w;
                on += w;
            }
        }
    }
    energy * (1.0 - on / z)
}

/// Gradient of `sum_pix G[pix] * E[pix]` with respect to the splat center.
fn splat_vjp(tr: &Tracer, g_plane: &[f64], hit: [f64; 2], exit: Vec3, energy: f64) -> [f64; 2] {
    if energy == 0.0 {
        return [0.0; 2];
    }
    let fp = Footprint::new(tr, hit, exit);
    let res = tr.res as i64;
    let a = fp.inv_cov;
    let mut z = 0.0;
    let mut s0 = 0.0;
    let mut s1 = [0.0; 2];
    let mut s2 = [0.0; 2];
    for row in fp.row0..=fp.row1 {
        let inside_r = (0..res).contains(&row);
        for col in fp.col0..=fp.col1 {
            let d = Footprint::pixel_offset(tr, hit, row, col);
            let (g, w) = fp.weight(d);
            if w <= 0.0 {
                continue;
            }
            // d(w)/d(hit) = exp(-r^2/2) * A d
            let dw = [g * (a[0] * d[0] + a[1] * d[1]), g * (a[1] * d[0] + a[2] * d[1])];
            z += w;
            s2[0] += dw[0];
            s2[1] += dw[1];
            if inside_r && (0..res).contains(&col) {
                let gp = g_plane[(row * res + col) as usize];
                s0 += gp * w;
                s1[0] += gp * dw[0];
                s1[1] += gp * dw[1];
            }
        }
    }
    if z <= 0.0 {
        return [0.0; 2];
    }
    let area = tr.pitch.0 * tr.pitch.1;
    let scale = energy / (area * z);
    [scale * (s1[0] - s0 / z * s2[0]), scale * (s1[1] - s0 / z * s2[1])]
}

fn batch_rng(seed: u64, batch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(batch as u64);
    rng
}

fn batch_range(n_l: usize, batch: usize) -> std::ops::Range<usize> {
    let start = batch * BATCH;
    start..(start + BATCH).min(n_l)
}

fn render_batch(tr: &Tracer, n_l: usize, seed: u64, batch: usize) -> (Vec<f64>, RenderStats) {
    let n_w = tr.iors.len();
    let plane = tr.res * tr.res;
    let mut img = vec![0.0; n_w * plane];
    let mut stats = RenderStats::zeros(n_w);
    let mut rng = batch_rng(seed, batch);
    for _ in batch_range(n_l, batch) {
        let (x, y, dir) = tr.sample(&mut rng);
        let cell = Cell::locate(tr.n, tr.extent, x, y);
        for c in 0..n_w {
            let e = tr.energies[c];
            stats.emitted[c] += e;
            match tr.trace(&cell, x, y, dir, tr.iors[c]) {
                Some(b) => {
                    let lost = splat(tr, &mut img[c * plane..(c + 1) * plane], b.hit, b.t2, e);
                    stats.offscreen[c] += lost;
                    stats.deposited[c] += e - lost;
                }
                None => stats.tir[c] += e,
            }
        }
    }
    (img, stats)
}

/// Options for [`render_with`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RenderOptions {
    /// Reduce batch buffers in a fixed order so the image is bit-identical
    /// for any worker count.
    pub deterministic: bool,
}

/// Renders the caustic of `h` (deterministic mode).
pub fn render(h: &HeightField, scene: &SceneParams, seed: u64) -> Result<Irradiance> {
    Ok(render_with(h, scene, seed, RenderOptions { deterministic: true })?.0)
}

pub fn render_with(
    h: &HeightField,
    scene: &SceneParams,
    seed: u64,
    opts: RenderOptions,
) -> Result<(Irradiance, RenderStats)> {
    scene.check_field(h)?;
    render_raw(h.heights(), h.n(), scene, seed, opts)
}

fn render_raw(
    heights: &[f64],
    n: usize,
    scene: &SceneParams,
    seed: u64,
    opts: RenderOptions,
) -> Result<(Irradiance, RenderStats)> {
    let tr = Tracer::new(heights, n, scene)?;
    let n_w = scene.n_w();
    let len = n_w * scene.sensor_res * scene.sensor_res;
    let batches = scene.n_l.div_ceil(BATCH);
    let (img, stats) = if opts.deterministic {
        let mut img = vec![0.0; len];
        let mut stats = RenderStats::zeros(n_w);
        for wave in (0..batches).step_by(WAVE) {
            let parts: Vec<_> = (wave..(wave + WAVE).min(batches))
                .into_par_iter()
                .map(|b| render_batch(&tr, scene.n_l, seed, b))
                .collect();
            for (part, s) in &parts {
                for (acc, v) in img.iter_mut().zip(part) {
                    *acc += v;
                }
                stats.add(s);
            }
        }
        (img, stats)
    } else {
        (0..batches).into_par_iter().map(|b| render_batch(&tr, scene.n_l, seed, b)).reduce(
            || (vec![0.0; len], RenderStats::zeros(n_w)),
            |(mut a, mut sa), (b, sb)| {
                for (x, y) in a.iter_mut().zip(&b) {
                    *x += y;
                }
                sa.add(&sb);
                (a, sa)
            },
        )
    };
    if img.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite irradiance".into()));
    }
    let irr = Irradiance::from_values(n_w, scene.sensor_res, scene.pixel_pitch(), img)?;
    Ok((irr, stats))
}

fn backward_batch(tr: &Tracer, n_l: usize, seed: u64, batch: usize, g: &[f64]) -> Vec<f64> {
    let n_w = tr.iors.len();
    let plane = tr.res * tr.res;
    let mut grad = vec![0.0; tr.n * tr.n];
    let mut rng = batch_rng(seed, batch);
    for _ in batch_range(n_l, batch) {
        let (x, y, dir) = tr.sample(&mut rng);
        let cell = Cell::locate(tr.n, tr.extent, x, y);
        for c in 0..n_w {
            let ior = tr.iors[c];
            if let Some(b) = tr.trace(&cell, x, y, dir, ior) {
                let g_hit = splat_vjp(tr, &g[c * plane..(c + 1) * plane], b.hit, b.t2, tr.energies[c]);
                if g_hit != [0.0, 0.0] {
                    tr.trace_vjp(&cell, dir, ior, &b, g_hit, &mut grad);
                }
            }
        }
    }
    grad
}

/// Gradient of a loss with respect to the heights, given `dl_de` (the loss
/// gradient with respect to the rendered image). Must be called with the same
/// field, scene and seed as the forward rendering it differentiates.
pub fn render_backward(h: &HeightField, scene: &SceneParams, seed: u64, dl_de: &[f64]) -> Result<Vec<f64>> {
    scene.check_field(h)?;
    render_backward_raw(h.heights(), h.n(), scene, seed, dl_de)
}

fn render_backward_raw(heights: &[f64], n: usize, scene: &SceneParams, seed: u64, dl_de: &[f64]) -> Result<Vec<f64>> {
    let expect = scene.n_w() * scene.sensor_res * scene.sensor_res;
    if dl_de.len() != expect {
        return Err(Error::shape(format!("image gradient has {} values, expected {expect}", dl_de.len())));
    }
    let tr = Tracer::new(heights, n, scene)?;
    let batches = scene.n_l.div_ceil(BATCH);
    let parts: Vec<Vec<f64>> =
        (0..batches).into_par_iter().map(|b| backward_batch(&tr, scene.n_l, seed, b, dl_de)).collect();
    let mut grad = vec![0.0; n * n];
    for part in &parts {
        for (acc, v) in grad.iter_mut().zip(part) {
            *acc += v;
        }
    }
    if grad.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite height gradient".into()));
    }
    Ok(grad)
}

/// Central finite differences of `loss` over every height value. The heights
/// passed to `loss` may dip below zero by `eps`.
pub fn finite_diff_gradient<F>(heights: &[f64], eps: f64, mut loss: F) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if !(eps > 0.0) {
        return Err(Error::invalid("finite-difference step must be > 0"));
    }
    let mut probe = heights.to_vec();
    let mut grad = Vec::with_capacity(heights.len());
    for i in 0..heights.len() {
        probe[i] = heights[i] + eps;
        let plus = loss(&probe)?;
        probe[i] = heights[i] - eps;
        let minus = loss(&probe)?;
        probe[i] = heights[i];
        grad.push((plus - minus) / (2.0 * eps));
    }
    Ok(grad)
}

/// Finite-difference gradient of `image_loss(render(h))` using common random
/// numbers: both sides of every difference trace the same photons.
pub fn finite_diff_render_gradient<F>(
    h: &HeightField,
    scene: &SceneParams,
    seed: u64,
    eps: f64,
    image_loss: F,
) -> Result<Vec<f64>>
where
    F: Fn(&Irradiance) -> f64,
{
    scene.check_field(h)?;
    let n = h.n();
    finite_diff_gradient(h.heights(), eps, |hs| {
        let (img, _) = render_raw(hs, n, scene, seed, RenderOptions { deterministic: true })?;
        Ok(image_loss(&img))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn small_scene(n_l: usize, res: usize) -> SceneParams {
        SceneParams { n_l, sensor_res: res, ..SceneParams::desk() }
    }

    fn sellmeier(b: [f64; 3], c: [f64; 3], lambda_um: f64) -> f64 {
        let l2 = lambda_um * lambda_um;
        (1.0 + b[0] * l2 / (l2 - c[0]) + b[1] * l2 / (l2 - c[1]) + b[2] * l2 / (l2 - c[2])).sqrt()
    }

    #[test]
    fn ior_matches_sellmeier() {
        let g = SpectralIor::default();
        let oracle = sellmeier(
            [0.6961663, 0.4079426, 0.8974794],
            [0.0684043 * 0.0684043, 0.1162414 * 0.1162414, 9.896161 * 9.896161],
            0.53,
        );
        assert!((g.ior(530.0).unwrap() - oracle).abs() < 1e-14);
        assert!((oracle - 1.4607).abs() < 1e-3);
        let vacuum = SpectralIor { b: [0.0; 3], ..g };
        assert_eq!(vacuum.ior(530.0).unwrap(), 1.0);
        let (r, gr, b) = (g.ior(610.0).unwrap(), g.ior(530.0).unwrap(), g.ior(430.0).unwrap());
        assert!(b > gr && gr > r);
        assert!(g.ior(0.0).is_err());
        let pole = SpectralIor { b: [1.0, 0.0, 0.0], c: [0.25, 0.0, 0.0] };
        assert!(pole.ior(500.0).is_err());
    }

    #[test]
    fn refraction_cases() {
        let down = [0.0, 0.0, -1.0];
        let up = [0.0, 0.0, 1.0];
        for eta in [0.5, 1.0 / 1.5, 1.5] {
            assert_eq!(refract(down, up, eta).unwrap(), Refraction::Transmitted(down));
        }
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let d = [s, 0.0, -s];
        assert_eq!(refract(d, up, 1.0).unwrap(), Refraction::Transmitted(d));
        match refract(d, up, 1.0 / 1.5).unwrap() {
            Refraction::Transmitted(t) => {
                assert!((t[0] - s / 1.5).abs() < 1e-12);
                assert!((vec3::norm(t) - 1.0).abs() < 1e-12);
            }
            other => panic!("{other:?}"),
        }
        assert_eq!(refract(d, up, 1.5).unwrap(), Refraction::TotalInternalReflection);
        assert!(refract([1.0, 0.0, -1.0], up, 1.0).is_err());
    }

    #[test]
    fn refract_vjp_matches_finite_differences() {
        let d = vec3::normalize([0.2, -0.1, -1.0]);
        let n = vec3::normalize([-0.3, 0.25, 1.0]);
        let gt = [0.7, -0.2, 0.4];
        let eta = 1.0 / 1.46;
        let (gd, gn) = refract_vjp(d, n, eta, gt);
        let f = |d: Vec3, n: Vec3| vec3::dot(gt, refract_raw(d, n, eta).unwrap());
        let eps = 1e-7;
        for k in 0..3 {
            let mut dp = d;
            let mut dm = d;
            dp[k] += eps;
            dm[k] -= eps;
            let fd = (f(dp, n) - f(dm, n)) / (2.0 * eps);
            assert!((fd - gd[k]).abs() < 1e-6, "dir {k}: {fd} vs {}", gd[k]);
            let mut np = n;
            let mut nm = n;
            np[k] += eps;
            nm[k] -= eps;
            let fd = (f(d, np) - f(d, nm)) / (2.0 * eps);
            assert!((fd - gn[k]).abs() < 1e-6, "normal {k}: {fd} vs {}", gn[k]);
        }
    }

    #[test]
    fn normals() {
        let ext = (0.05, 0.05);
        let flat = HeightField::new_flat(8, ext, 0.003).unwrap();
        assert_eq!(surface_normal(&flat, 0.01, -0.02).unwrap(), [0.0, 0.0, 1.0]);
        assert!(surface_normal(&flat, 0.03, 0.0).is_err());

        let n = 8;
        let c = 0.1;
        let mut hs = vec![0.0; n * n];
        for r in 0..n {
            for col in 0..n {
                hs[r * n + col] = c * (col as f64 + 0.5) * 0.05 / n as f64;
            }
        }
        let ramp = HeightField::from_heights(n, hs, ext, 0.003).unwrap();
        let expect = vec3::normalize([-c, 0.0, 1.0]);
        for p in [(0.0, 0.0), (0.011, -0.013), (-0.017, 0.004)] {
            let got = surface_normal(&ramp, p.0, p.1).unwrap();
            for k in 0..3 {
                assert!((got[k] - expect[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn normal_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 6;
        let hs: Vec<f64> = (0..n * n).map(|_| rng.gen::<f64>() * 1e-3).collect();
        let f = HeightField::from_heights(n, hs, (0.05, 0.05), 0.003).unwrap();
        let value = |x: f64, y: f64| Cell::locate(n, f.extent(), x, y).eval(f.heights()).0;
        let eps = 1e-7;
        for &(x, y) in &[(0.0031, -0.0072), (-0.0113, 0.0151), (0.0042, 0.0013)] {
            let sx = (value(x + eps, y) - value(x - eps, y)) / (2.0 * eps);
            let sy = (value(x, y + eps) - value(x, y - eps)) / (2.0 * eps);
            let fd = vec3::normalize([-sx, -sy, 1.0]);
            let got = surface_normal(&f, x, y).unwrap();
            for k in 0..3 {
                assert!((got[k] - fd[k]).abs() <= 1e-6 * fd[k].abs().max(1e-3));
            }
        }
    }

    #[test]
    fn flat_slab_is_uniform_and_conserves_energy() {
        let scene = small_scene(200_000, 32);
        let h = HeightField::new_flat(16, scene.substrate_extent, scene.base_thickness).unwrap();
        let (img, stats) = render_with(&h, &scene, 1, RenderOptions { deterministic: true }).unwrap();
        for c in 0..3 {
            assert!(stats.balance_error(c) < 1e-9);
            assert_eq!(stats.tir[c], 0.0);
            let total = img.total_power(c) + stats.offscreen[c];
            assert!((total - 2.5e-3).abs() / 2.5e-3 < 1e-9);
            // interior mean is L_i
            let res = img.res();
            let mut sum = 0.0;
            let mut count = 0.0;
            for r in 4..res - 4 {
                for col in 4..res - 4 {
                    sum += img.channel(c)[r * res + col];
                    count += 1.0;
                }
            }
            assert!((sum / count - 1.0).abs() < 0.01, "mean {}", sum / count);
        }
    }

    #[test]
    fn single_splat_deposits_its_energy() {
        let scene = small_scene(1, 32);
        let heights = vec![0.0; 4];
        let tr = Tracer::new(&heights, 2, &scene).unwrap();
        let mut plane = vec![0.0; 32 * 32];
        let exit = vec3::normalize([0.3, -0.2, -1.0]);
        let lost = splat(&tr, &mut plane, [0.0012, -0.0031], exit, 1e-3);
        let deposited: f64 = plane.iter().sum::<f64>() * tr.pitch.0 * tr.pitch.1;
        assert!(lost.abs() < 1e-15);
        assert!((deposited - 1e-3).abs() < 1e-3 * 1e-3);
        let mut untouched = vec![0.0; 32 * 32];
        splat(&tr, &mut untouched, [0.0, 0.0], exit, 0.0);
        assert!(untouched.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn vertical_exit_is_isotropic() {
        let scene = small_scene(1, 32);
        let heights = vec![0.0; 4];
        let tr = Tracer::new(&heights, 2, &scene).unwrap();
        let fp = Footprint::new(&tr, [0.0, 0.0], [0.0, 0.0, -1.0]);
        let s2 = tr.sigma * tr.sigma;
        assert!((fp.inv_cov[0] - 1.0 / s2).abs() < 1e-9 / s2);
        assert_eq!(fp.inv_cov[1], 0.0);
        assert!((fp.inv_cov[0] - fp.inv_cov[2]).abs() < 1e-9 / s2);
    }

    #[test]
    fn splat_vjp_matches_finite_differences() {
        let scene = small_scene(1, 16);
        let heights = vec![0.0; 4];
        let tr = Tracer::new(&heights, 2, &scene).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let g: Vec<f64> = (0..256).map(|_| rng.gen::<f64>() - 0.5).collect();
        let exit = vec3::normalize([0.2, 0.1, -1.0]);
        let f = |hit: [f64; 2]| {
            let mut p = vec![0.0; 256];
            splat(&tr, &mut p, hit, exit, 1.0);
            p.iter().zip(&g).map(|(a, b)| a * b).sum::<f64>()
        };
        // near the sensor edge so the off-screen renormalization term matters
        for hit in [[0.0011, -0.0023], [0.0231, 0.0102]] {
            let got = splat_vjp(&tr, &g, hit, exit, 1.0);
            let eps = 1e-8;
            for k in 0..2 {
                let mut a = hit;
                let mut b = hit;
                a[k] += eps;
                b[k] -= eps;
                let fd = (f(a) - f(b)) / (2.0 * eps);
                assert!((fd - got[k]).abs() <= 1e-4 * fd.abs().max(1.0), "{k}: {fd} vs {}", got[k]);
            }
        }
    }

    #[test]
    fn screen_above_substrate_is_rejected() {
        let mut scene = small_scene(10, 8);
        scene.screen_pos[2] = 0.01;
        let h = HeightField::new_flat(4, scene.substrate_extent, scene.base_thickness).unwrap();
        assert!(matches!(render(&h, &scene, 0), Err(Error::Geometry(_))));
    }

    #[test]
    fn mismatched_field_is_rejected() {
        let scene = small_scene(10, 8);
        let h = HeightField::new_flat(4, (0.04, 0.05), scene.base_thickness).unwrap();
        assert!(render(&h, &scene, 0).is_err());
    }

    #[test]
    fn zero_image_gradient_gives_zero() {
        let scene = small_scene(2000, 16);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let hs: Vec<f64> = (0..64).map(|_| rng.gen::<f64>() * 1e-3).collect();
        let h = HeightField::from_heights(8, hs, scene.substrate_extent, scene.base_thickness).unwrap();
        let g = render_backward(&h, &scene, 3, &vec![0.0; 3 * 256]).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
        assert!(render_backward(&h, &scene, 3, &[0.0; 5]).is_err());
    }

    #[test]
    fn finite_differences_are_exact_on_quadratics() {
        let x = [0.3, -1.2, 2.0];
        let g =
            finite_diff_gradient(&x, 1e-3, |v| Ok(v[0] * v[0] + 3.0 * v[1] * v[1] - v[0] * v[2] + 0.5 * v[2] * v[2]))
                .unwrap();
        let exact = [2.0 * x[0] - x[2], 6.0 * x[1], -x[0] + x[2]];
        for k in 0..3 {
            assert!((g[k] - exact[k]).abs() < 1e-8);
        }
        assert!(finite_diff_gradient(&x, 0.0, |_| Ok(0.0)).is_err());
    }

    #[test]
    fn pooling_averages_blocks() {
        let irr = Irradiance::from_values(1, 4, (1.0, 1.0), (0..16).map(|v| v as f64).collect()).unwrap();
        let p = irr.avg_pool(2).unwrap();
        assert_eq!(p, vec![2.5, 4.5, 10.5, 12.5]);
        assert!(irr.avg_pool(3).is_err());
    }
}
