//! 2D refraction through a 1D height profile: a toy model showing that
//! matching caustic point sets does not pin down the surface.
//!
//! Vertical rays enter the profile from above, refract at the curved top and
//! at the flat bottom (z = 0), and hit a screen line at `z = -screen_depth`.

use std::ops::{Add, Div, Mul, Sub};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{write_png, Grid};
use crate::metrics::{hausdorff, l_rel_slices, soft_hausdorff_split};
use crate::neural::{adam_step, AdamState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Profile1D {
    heights: Vec<f64>,
    extent: f64,
    base: f64,
    ior: f64,
}

impl Profile1D {
    pub fn new(heights: Vec<f64>, extent: f64, base: f64, ior: f64) -> Result<Self> {
        if heights.len() < 2 {
            return Err(Error::invalid("profile needs at least two samples"));
        }
        if let Some(bad) = heights.iter().find(|h| !(h.is_finite() && **h >= 0.0)) {
            return Err(Error::invalid(format!("profile heights must be finite and >= 0, found {bad}")));
        }
        if !(extent > 0.0 && base > 0.0 && ior > 0.0) {
            return Err(Error::invalid("extent, base and ior must be positive"));
        }
        Ok(Self { heights, extent, base, ior })
    }

    pub fn flat(n: usize, extent: f64, base: f64, ior: f64) -> Result<Self> {
        Self::new(vec![0.0; n], extent, base, ior)
    }

    pub fn heights(&self) -> &[f64] {
        &self.heights
    }

    pub fn extent(&self) -> f64 {
        self.extent
    }

    pub fn base(&self) -> f64 {
        self.base
    }

    pub fn ior(&self) -> f64 {
        self.ior
    }

    fn spacing(&self) -> f64 {
        self.extent / self.heights.len() as f64
    }

    /// Centered x coordinate of sample `j`.
    pub fn sample_x(&self, j: usize) -> f64 {
        (j as f64 + 0.5) * self.spacing() - 0.5 * self.extent
    }

    /// Linear interpolation weights `(j0, j1, t)` at `x`, clamped at the ends.
    fn locate(&self, x: f64) -> (usize, usize, f64) {
        let n = self.heights.len();
        let u = (x + 0.5 * self.extent) / self.spacing() - 0.5;
        if u <= 0.0 {
            return (0, 0, 0.0);
        }
        if u >= (n - 1) as f64 {
            return (n - 1, n - 1, 0.0);
        }
        let j = u.floor() as usize;
        (j, j + 1, u - j as f64)
    }

    /// Central-difference slope at sample `j` as weights over the heights.
    fn slope_stencil(&self, j: usize) -> [(usize, f64); 2] {
        let n = self.heights.len();
        let dx = self.spacing();
        if j == 0 {
            [(1, 1.0 / dx), (0, -1.0 / dx)]
        } else if j == n - 1 {
            [(n - 1, 1.0 / dx), (n - 2, -1.0 / dx)]
        } else {
            [(j + 1, 0.5 / dx), (j - 1, -0.5 / dx)]
        }
    }

    /// Height and slope at `x` as sparse linear forms over the heights.
    fn forms(&self, x: f64) -> (Vec<(usize, f64)>, Vec<(usize, f64)>) {
        let (j0, j1, t) = self.locate(x);
        let height = vec![(j0, 1.0 - t), (j1, t)];
        let mut slope = Vec::with_capacity(4);
        for (j, w) in [(j0, 1.0 - t), (j1, t)] {
            for (k, s) in self.slope_stencil(j) {
                slope.push((k, w * s));
            }
        }
        (height, slope)
    }

    fn eval(&self, form: &[(usize, f64)]) -> f64 {
        form.iter().map(|(j, w)| w * self.heights[*j]).sum()
    }
}

/// Forward-mode value with derivatives along two directions.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Dual {
    v: f64,
    d: [f64; 2],
}

impl Dual {
    fn constant(v: f64) -> Self {
        Self { v, d: [0.0; 2] }
    }

    fn var(v: f64, k: usize) -> Self {
        let mut d = [0.0; 2];
        d[k] = 1.0;
        Self { v, d }
    }

    fn sqrt(self) -> Self {
        let r = self.v.sqrt();
        let s = 0.5 / r;
        Self { v: r, d: [self.d[0] * s, self.d[1] * s] }
    }

    fn scale(self, k: f64) -> Self {
        Self { v: self.v * k, d: [self.d[0] * k, self.d[1] * k] }
    }
}

impl Add for Dual {
    type Output = Dual;
    fn add(self, o: Dual) -> Dual {
        Dual { v: self.v + o.v, d: [self.d[0] + o.d[0], self.d[1] + o.d[1]] }
    }
}

impl Sub for Dual {
    type Output = Dual;
    fn sub(self, o: Dual) -> Dual {
        Dual { v: self.v - o.v, d: [self.d[0] - o.d[0], self.d[1] - o.d[1]] }
    }
}

impl Mul for Dual {
    type Output = Dual;
    fn mul(self, o: Dual) -> Dual {
        Dual { v: self.v * o.v, d: [self.d[0] * o.v + self.v * o.d[0], self.d[1] * o.v + self.v * o.d[1]] }
    }
}

impl Div for Dual {
    type Output = Dual;
    fn div(self, o: Dual) -> Dual {
        let inv = 1.0 / o.v;
        Dual {
            v: self.v * inv,
            d: [(self.d[0] - self.v * inv * o.d[0]) * inv, (self.d[1] - self.v * inv * o.d[1]) * inv],
        }
    }
}

/// Snell refraction of `dir` at unit `normal` (facing the incoming ray);
/// `None` on total internal reflection.
fn refract2(dir: [Dual; 2], normal: [Dual; 2], eta: f64) -> Option<[Dual; 2]> {
    let cos_i = Dual::constant(0.0) - (dir[0] * normal[0] + dir[1] * normal[1]);
    let k = Dual::constant(1.0) - (Dual::constant(1.0) - cos_i * cos_i).scale(eta * eta);
    if k.v <= 0.0 {
        return None;
    }
    let a = cos_i.scale(eta) - k.sqrt();
    Some([dir[0].scale(eta) + a * normal[0], dir[1].scale(eta) + a * normal[1]])
}

/// One traced ray: entry x, exit point on the bottom and screen hit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray2 {
    pub entry: f64,
    pub top: f64,
    pub bottom: f64,
    pub hit: f64,
    /// Derivatives of `hit` with respect to surface height and slope.
    d_hit: [f64; 2],
}

fn trace_ray(p: &Profile1D, x: f64, height: f64, slope: f64, screen_depth: f64) -> Option<Ray2> {
    let z0 = Dual::var(p.base + height, 0);
    let s = Dual::var(slope, 1);
    let norm = (Dual::constant(1.0) + s * s).sqrt();
    let normal = [Dual::constant(0.0) - s / norm, Dual::constant(1.0) / norm];
    let down = [Dual::constant(0.0), Dual::constant(-1.0)];
    let t1 = refract2(down, normal, 1.0 / p.ior)?;
    if t1[1].v >= -1e-12 {
        return None;
    }
    let bottom = Dual::constant(x) - z0 * t1[0] / t1[1];
    let up = [Dual::constant(0.0), Dual::constant(1.0)];
    let t2 = refract2(t1, up, p.ior)?;
    if t2[1].v >= -1e-12 {
        return None;
    }
    let hit = bottom - (t2[0] / t2[1]).scale(screen_depth);
    Some(Ray2 { entry: x, top: z0.v, bottom: bottom.v, hit: hit.v, d_hit: hit.d })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceParams {
    pub n_rays: usize,
    /// Distance of the screen below the bottom face.
    pub screen_depth: f64,
}

impl TraceParams {
    /// 64 rays, screen one base thickness below the profile.
    pub fn for_profile(p: &Profile1D) -> Self {
        Self { n_rays: 64, screen_depth: p.base }
    }
}

/// Entry x of ray `r` of `n`, equispaced across the extent.
pub fn ray_x(p: &Profile1D, r: usize, n: usize) -> f64 {
    (r as f64 + 0.5) / n as f64 * p.extent - 0.5 * p.extent
}

/// Traces all rays; rays lost to total internal reflection are dropped.
pub fn trace_rays(p: &Profile1D, params: &TraceParams) -> Result<Vec<Ray2>> {
    if params.n_rays == 0 {
        return Err(Error::invalid("at least one ray is required"));
    }
    Ok((0..params.n_rays)
        .filter_map(|r| {
            let x = ray_x(p, r, params.n_rays);
            let (h, s) = p.forms(x);
            trace_ray(p, x, p.eval(&h), p.eval(&s), params.screen_depth)
        })
        .collect())
}

/// Screen intersection x coordinates in ray order.
pub fn trace2d(p: &Profile1D, params: &TraceParams) -> Result<Vec<f64>> {
    Ok(trace_rays(p, params)?.iter().map(|r| r.hit).collect())
}

/// Intersections plus the Jacobian rows `d hit_r / d heights`.
pub fn trace2d_jacobian(p: &Profile1D, params: &TraceParams) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    if params.n_rays == 0 {
        return Err(Error::invalid("at least one ray is required"));
    }
    let mut hits = Vec::new();
    let mut rows = Vec::new();
    for r in 0..params.n_rays {
        let x = ray_x(p, r, params.n_rays);
        let (h, s) = p.forms(x);
        if let Some(ray) = trace_ray(p, x, p.eval(&h), p.eval(&s), params.screen_depth) {
            let mut row = vec![0.0; p.heights.len()];
            for (j, w) in h {
                row[j] += ray.d_hit[0] * w;
            }
            for (j, w) in s {
                row[j] += ray.d_hit[1] * w;
            }
            hits.push(ray.hit);
            rows.push(row);
        }
    }
    Ok((hits, rows))
}

fn points(xs: &[f64]) -> Vec<[f64; 1]> {
    xs.iter().map(|&x| [x]).collect()
}

/// Exact Hausdorff distance between the profile's intersections and `target`.
pub fn point_set_distance(p: &Profile1D, target: &[f64], params: &TraceParams) -> Result<f64> {
    let hits = trace2d(p, params)?;
    if hits.is_empty() {
        return Err(Error::Numeric("every ray was totally reflected".into()));
    }
    hausdorff(&points(&hits), &points(target))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizeOptions {
    pub steps: usize,
    /// Step size at the first step, decayed geometrically to
    /// `learning_rate * lr_decay` at the last.
    pub learning_rate: f64,
    pub lr_decay: f64,
    /// Temperatures at the first step (nearest-neighbour soft-min, outer
    /// soft-max); both are annealed geometrically to `tau_end`.
    pub tau_start: (f64, f64),
    pub tau_end: (f64, f64),
    /// Adam denominator floor; gradients far below it barely move the profile.
    pub adam_eps: f64,
    pub trace: TraceParams,
}

impl OptimizeOptions {
    pub fn for_profile(p: &Profile1D, steps: usize) -> Self {
        let spacing = p.extent / 64.0;
        Self {
            steps,
            learning_rate: 3e-3 * p.extent,
            lr_decay: 0.01,
            tau_start: (3.0 * spacing, 0.5 * spacing),
            tau_end: (0.01 * spacing, 0.01 * spacing),
            adam_eps: 1e-6,
            trace: TraceParams::for_profile(p),
        }
    }

    fn progress(&self, step: usize) -> f64 {
        if self.steps <= 1 {
            1.0
        } else {
            step as f64 / (self.steps - 1) as f64
        }
    }

    fn tau(&self, step: usize) -> (f64, f64) {
        let t = self.progress(step);
        let lerp = |a: f64, b: f64| a * (b / a).powf(t);
        (lerp(self.tau_start.0, self.tau_end.0), lerp(self.tau_start.1, self.tau_end.1))
    }

    fn lr(&self, step: usize) -> f64 {
        self.learning_rate * self.lr_decay.powf(self.progress(step))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizeResult {
    pub profile: Profile1D,
    /// Exact Hausdorff distance before each step and after the last one.
    pub history: Vec<f64>,
    /// Surrogate value at each step.
    pub surrogate: Vec<f64>,
}

/// Adam on the smooth Hausdorff surrogate through the differentiable tracer.
/// Heights are projected to be non-negative after each step.
pub fn optimize_hausdorff(target: &[f64], init: &Profile1D, opts: &OptimizeOptions) -> Result<OptimizeResult> {
    if opts.steps == 0 {
        return Err(Error::invalid("at least one optimization step is required"));
    }
    if target.is_empty() {
        return Err(Error::invalid("empty target point set"));
    }
    let temps = [opts.tau_start.0, opts.tau_start.1, opts.tau_end.0, opts.tau_end.1];
    if !(opts.learning_rate > 0.0 && opts.lr_decay > 0.0 && temps.iter().all(|&t| t > 0.0)) {
        return Err(Error::invalid("learning rate and temperatures must be positive"));
    }
    let tpts = points(target);
    let mut p = init.clone();
    let mut adam = AdamState::new(p.heights.len());
    adam.eps = opts.adam_eps;
    let mut history = Vec::with_capacity(opts.steps + 1);
    let mut surrogate = Vec::with_capacity(opts.steps);
    for step in 0..opts.steps {
        let (hits, rows) = trace2d_jacobian(&p, &opts.trace)?;
        if hits.is_empty() {
            return Err(Error::Numeric("every ray was totally reflected".into()));
        }
        let hpts = points(&hits);
        history.push(hausdorff(&hpts, &tpts)?);
        let (value, g_pts) = {
            let (near, far) = opts.tau(step);
            soft_hausdorff_split(&hpts, &tpts, near, far)?
        };
        surrogate.push(value);
        let mut grad = vec![0.0; p.heights.len()];
        for (g, row) in g_pts.iter().zip(&rows) {
            for (acc, d) in grad.iter_mut().zip(row) {
                *acc += g[0] * d;
            }
        }
        adam_step(&mut p.heights, &grad, &mut adam, opts.lr(step))?;
        for h in &mut p.heights {
            *h = h.max(0.0);
        }
    }
    history.push(point_set_distance(&p, target, &opts.trace)?);
    Ok(OptimizeResult { profile: p, history, surrogate })
}

/// Smooth bump used as the demonstration ground truth.
pub fn bump_profile(n: usize, extent: f64, base: f64, ior: f64, height: f64) -> Result<Profile1D> {
    let width = 0.15 * extent;
    let center = -0.1 * extent;
    let p = Profile1D::flat(n, extent, base, ior)?;
    let heights = (0..n)
        .map(|j| {
            let u = (p.sample_x(j) - center) / width;
            height * (-0.5 * u * u).exp()
        })
        .collect();
    Profile1D::new(heights, extent, base, ior)
}

/// Outcome of the underdeterminism demonstration.
#[derive(Debug, Clone, PartialEq)]
pub struct Demo {
    pub truth: Profile1D,
    pub init: Profile1D,
    pub target: Vec<f64>,
    pub result: OptimizeResult,
    pub initial_hausdorff: f64,
    pub final_hausdorff: f64,
    pub initial_l_rel: f64,
    pub final_l_rel: f64,
}

/// Fits a flat profile to the intersections of a bump profile.
pub fn run_demo(steps: usize, n: usize) -> Result<Demo> {
    let (extent, base, ior) = (1.0, 0.3, 1.5);
    let truth = bump_profile(n, extent, base, ior, 0.3)?;
    let init = Profile1D::flat(n, extent, base, ior)?;
    let opts = OptimizeOptions::for_profile(&init, steps);
    let target = trace2d(&truth, &opts.trace)?;
    let result = optimize_hausdorff(&target, &init, &opts)?;
    let initial_hausdorff = result.history[0];
    let final_hausdorff = *result.history.last().expect("non-empty history");
    Ok(Demo {
        initial_l_rel: l_rel_slices(init.heights(), truth.heights())?,
        final_l_rel: l_rel_slices(result.profile.heights(), truth.heights())?,
        truth,
        init,
        target,
        initial_hausdorff,
        final_hausdorff,
        result,
    })
}

/// RGB canvas with linear values in [0, 1].
struct Canvas {
    w: usize,
    h: usize,
    px: Vec<[f64; 3]>,
}

impl Canvas {
    fn new(w: usize, h: usize) -> Self {
        Self { w, h, px: vec![[1.0; 3]; w * h] }
    }

    fn dot(&mut self, x: i64, y: i64, c: [f64; 3]) {
        if x >= 0 && y >= 0 && (x as usize) < self.w && (y as usize) < self.h {
            self.px[y as usize * self.w + x as usize] = c;
        }
    }

    fn line(&mut self, a: (f64, f64), b: (f64, f64), c: [f64; 3]) {
        let steps = ((b.0 - a.0).abs().max((b.1 - a.1).abs()).ceil() as usize).max(1);
        for k in 0..=steps {
            let t = k as f64 / steps as f64;
            self.dot((a.0 + t * (b.0 - a.0)).round() as i64, (a.1 + t * (b.1 - a.1)).round() as i64, c);
        }
    }

    fn into_grid(self) -> Grid {
        let plane = self.w * self.h;
        let mut data = vec![0.0f32; 3 * plane];
        for (i, p) in self.px.iter().enumerate() {
            for c in 0..3 {
                data[c * plane + i] = p[c] as f32;
            }
        }
        Grid::new(3, self.h, self.w, data).expect("consistent canvas")
    }
}

const RAY: [f64; 3] = [0.85, 0.55, 0.1];
const GLASS: [f64; 3] = [0.1, 0.2, 0.6];
const TARGET: [f64; 3] = [0.8, 0.0, 0.0];

/// Draws the profile, its ray fan down to the screen and, optionally, the
/// target intersections as ticks below the screen line.
pub fn plot(p: &Profile1D, params: &TraceParams, target: Option<&[f64]>, size: (usize, usize)) -> Result<Grid> {
    let (w, h) = size;
    let mut cv = Canvas::new(w, h);
    let top = p.base + p.heights.iter().copied().fold(0.0, f64::max);
    let z_max = top + 0.2 * (top + params.screen_depth);
    let z_min = -params.screen_depth - 0.1 * (top + params.screen_depth);
    let margin = 0.05 * p.extent;
    let sx = |x: f64| (x + 0.5 * p.extent + margin) / (p.extent + 2.0 * margin) * (w - 1) as f64;
    let sz = |z: f64| (z_max - z) / (z_max - z_min) * (h - 1) as f64;
    for ray in trace_rays(p, params)? {
        cv.line((sx(ray.entry), sz(z_max)), (sx(ray.entry), sz(ray.top)), RAY);
        cv.line((sx(ray.entry), sz(ray.top)), (sx(ray.bottom), sz(0.0)), RAY);
        cv.line((sx(ray.bottom), sz(0.0)), (sx(ray.hit), sz(-params.screen_depth)), RAY);
    }
    let n = p.heights.len();
    for j in 0..n - 1 {
        let a = (sx(p.sample_x(j)), sz(p.base + p.heights[j]));
        let b = (sx(p.sample_x(j + 1)), sz(p.base + p.heights[j + 1]));
        cv.line(a, b, GLASS);
    }
    cv.line((sx(-0.5 * p.extent), sz(0.0)), (sx(0.5 * p.extent), sz(0.0)), GLASS);
    let screen = sz(-params.screen_depth);
    cv.line((0.0, screen), ((w - 1) as f64, screen), [0.0; 3]);
    if let Some(t) = target {
        for &x in t {
            cv.line((sx(x), screen + 2.0), (sx(x), screen + 8.0), TARGET);
        }
    }
    Ok(cv.into_grid())
}

/// Writes the three demo panels: ground truth, flat start and optimized.
pub fn write_demo_plots(demo: &Demo, dir: &Path) -> Result<()> {
    let params = OptimizeOptions::for_profile(&demo.init, 1).trace;
    let size = (640, 320);
    write_png(&plot(&demo.truth, &params, None, size)?, 0.0, dir.join("truth.png"))?;
    write_png(&plot(&demo.init, &params, Some(&demo.target), size)?, 0.0, dir.join("initial.png"))?;
    write_png(&plot(&demo.result.profile, &params, Some(&demo.target), size)?, 0.0, dir.join("optimized.png"))?;
    Ok(())
}
