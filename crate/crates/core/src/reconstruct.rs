//! The reconstruction loop: render, denoise, compare with the target caustic,
//! differentiate and update, with a learned or a classical update rule.

use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heightfield::HeightField;
use crate::metrics::{l_irrad, l_irrad_backward, l_rel, ssim_fields};
use crate::neural::{denoise, denoise_backward_identity, updater_forward, Network, Role};
use crate::render::{render, render_backward, Irradiance, SceneParams};
use crate::seed::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Nsfc,
    Classical,
}

impl Method {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "nsfc" => Ok(Self::Nsfc),
            "classical" => Ok(Self::Classical),
            other => Err(Error::invalid(format!("unknown method '{other}' (nsfc or classical)"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Nsfc => "nsfc",
            Self::Classical => "classical",
        }
    }
}

/// Thresholded projected gradient step with a volume heuristic.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassicalConfig {
    /// Step size applied to the raw height gradient.
    pub step: f64,
    /// Entries whose update is below `threshold * max |update|` are skipped.
    pub threshold: f64,
    /// Fraction by which the volume is pulled back to its pre-step value.
    pub volume_weight: f64,
    pub max_height: f64,
}

impl Default for ClassicalConfig {
    fn default() -> Self {
        Self { step: 1e-6, threshold: 0.0, volume_weight: 0.0, max_height: 4e-3 }
    }
}

impl ClassicalConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.step > 0.0
            && self.step.is_finite()
            && self.threshold >= 0.0
            && (0.0..=1.0).contains(&self.volume_weight)
            && self.max_height > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("invalid classical config {self:?}")))
        }
    }
}

pub fn classical_step(x: &HeightField, grad: &[f64], cfg: &ClassicalConfig) -> Result<HeightField> {
    cfg.validate()?;
    if grad.len() != x.heights().len() {
        return Err(Error::shape(format!("gradient has {} values for {} heights", grad.len(), x.heights().len())));
    }
    let update: Vec<f64> = grad.iter().map(|g| cfg.step * g).collect();
    let peak = update.iter().fold(0.0f64, |m, u| m.max(u.abs()));
    let cut = cfg.threshold * peak;
    let mut next: Vec<f64> = x
        .heights()
        .iter()
        .zip(&update)
        .map(|(&h, &u)| if u.abs() < cut { h } else { (h - u).clamp(0.0, cfg.max_height) })
        .collect();
    if cfg.volume_weight > 0.0 {
        let before: f64 = x.heights().iter().sum();
        let after: f64 = next.iter().sum();
        if after > 0.0 {
            let scale = (after + cfg.volume_weight * (before - after)) / after;
            for h in &mut next {
                *h = (*h * scale).clamp(0.0, cfg.max_height);
            }
        }
    }
    x.with_heights_clamped(next)
}

/// Ablation switches of the learned pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Ablation {
    pub no_denoiser: bool,
    pub no_gradient: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconstructConfig {
    /// Scene used for the in-loop renderings (its `n_l` sets their quality).
    pub scene: SceneParams,
    pub iters: usize,
    pub seed: u64,
    pub method: Method,
    pub classical: ClassicalConfig,
    pub ablation: Ablation,
}

impl ReconstructConfig {
    pub fn new(scene: SceneParams, method: Method, iters: usize, seed: u64) -> Self {
        Self { scene, iters, seed, method, classical: ClassicalConfig::default(), ablation: Ablation::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub iteration: usize,
    pub l_irrad: f64,
    pub l_rel: Option<f64>,
    pub ssim: Option<f64>,
}

/// Networks available to the loop.
#[derive(Debug, Clone, Copy, Default)]
pub struct Models<'a> {
    pub denoiser: Option<&'a Network>,
    pub updater: Option<&'a Network>,
}

#[derive(Debug, Clone)]
pub struct ReconstructionState {
    pub x: HeightField,
    /// Gradient of the irradiance loss at `x`.
    pub grad: Vec<f64>,
    /// Rendering of `x` after the (optional) denoiser.
    pub e_sim: Irradiance,
    pub e_target: Irradiance,
    pub iteration: usize,
    pub history: Vec<HistoryEntry>,
}

struct Context<'a> {
    cfg: &'a ReconstructConfig,
    denoiser: Option<&'a Network>,
    truth: Option<&'a HeightField>,
}

impl Context<'_> {
    fn observe(
        &self,
        x: HeightField,
        e_target: Irradiance,
        iteration: usize,
        mut history: Vec<HistoryEntry>,
    ) -> Result<ReconstructionState> {
        let seed = derive_seed(self.cfg.seed, &[iteration as u64]);
        let raw = render(&x, &self.cfg.scene, seed)?;
        let e_sim = match self.denoiser {
            Some(net) => denoise(net, &raw)?,
            None => raw,
        };
        let loss = l_irrad(&e_sim, &e_target)?;
        let dl_de = denoise_backward_identity(l_irrad_backward(&e_sim, &e_target)?);
        let grad = render_backward(&x, &self.cfg.scene, seed, &dl_de)?;
        let (l_rel, ssim) = match self.truth {
            Some(t) => (Some(l_rel(&x, t)?), Some(ssim_fields(&x, t)?)),
            None => (None, None),
        };
        history.push(HistoryEntry { iteration, l_irrad: loss, l_rel, ssim });
        Ok(ReconstructionState { x, grad, e_sim, e_target, iteration, history })
    }
}

/// Applies the learned update `x - U(x, g, E_sim, E_target)` with a
/// non-negativity projection.
pub fn nsfc_update(state: &ReconstructionState, updater: &Network, ablation: Ablation) -> Result<HeightField> {
    let zeros;
    let grad = if ablation.no_gradient {
        zeros = vec![0.0; state.grad.len()];
        &zeros
    } else {
        &state.grad
    };
    let delta = updater_forward(updater, &state.x, grad, &state.e_sim, &state.e_target)?;
    let next = state.x.heights().iter().zip(&delta).map(|(h, d)| h - d).collect();
    state.x.with_heights_clamped(next)
}

#[derive(Debug, Clone)]
pub struct Reconstruction {
    /// Iterates `x_0 ..= x_iters`.
    pub fields: Vec<HeightField>,
    /// In-loop renderings of each iterate (after the denoiser, if any).
    pub caustics: Vec<Irradiance>,
    pub history: Vec<HistoryEntry>,
    /// Wall-clock seconds per update step; informational only.
    pub step_seconds: Vec<f64>,
}

impl Reconstruction {
    pub fn final_field(&self) -> &HeightField {
        self.fields.last().expect("at least the initial field")
    }

    pub fn min_l_rel(&self) -> Option<f64> {
        self.history.iter().filter_map(|h| h.l_rel).reduce(f64::min)
    }
}

fn check_network(net: Option<&Network>, role: Role, what: &str) -> Result<()> {
    match net {
        Some(n) if n.role() == role => Ok(()),
        Some(_) => Err(Error::invalid(format!("{what} weights have the wrong role"))),
        None => Err(Error::invalid(format!("missing {what} weights"))),
    }
}

/// Runs `cfg.iters` update steps from `init` towards the `target` caustic.
/// With ground truth supplied, the history also carries `l_rel` and SSIM.
pub fn reconstruct(
    target: &Irradiance,
    init: &HeightField,
    truth: Option<&HeightField>,
    cfg: &ReconstructConfig,
    models: Models,
) -> Result<Reconstruction> {
    cfg.scene.validate()?;
    let (m, n_w) = (cfg.scene.sensor_res, cfg.scene.n_w());
    if target.res() != m || target.channels() != n_w {
        return Err(Error::shape(format!(
            "target caustic is {}x{}x{}, scene expects {n_w}x{m}x{m}",
            target.channels(),
            target.res(),
            target.res()
        )));
    }
    if let Some(t) = truth {
        if !t.same_geometry(init) {
            return Err(Error::shape("ground truth and initial field differ in geometry"));
        }
    }
    let use_denoiser = !cfg.ablation.no_denoiser && (cfg.method == Method::Nsfc || models.denoiser.is_some());
    if use_denoiser {
        check_network(models.denoiser, Role::Denoiser, "denoiser")?;
    }
    if cfg.method == Method::Nsfc {
        check_network(models.updater, Role::Updater, "updater")?;
    } else {
        cfg.classical.validate()?;
    }
    let ctx = Context { cfg, denoiser: if use_denoiser { models.denoiser } else { None }, truth };
    let mut state = ctx.observe(init.clone(), target.clone(), 0, Vec::new())?;
    let mut fields = vec![state.x.clone()];
    let mut caustics = vec![state.e_sim.clone()];
    let mut step_seconds = Vec::with_capacity(cfg.iters);
    for i in 0..cfg.iters {
        let start = Instant::now();
        let next = match cfg.method {
            Method::Nsfc => nsfc_update(&state, models.updater.expect("checked"), cfg.ablation)?,
            Method::Classical => classical_step(&state.x, &state.grad, &cfg.classical)?,
        };
        let history = std::mem::take(&mut state.history);
        state = ctx.observe(next, state.e_target, i + 1, history)?;
        step_seconds.push(start.elapsed().as_secs_f64());
        fields.push(state.x.clone());
        caustics.push(state.e_sim.clone());
    }
    Ok(Reconstruction { fields, caustics, history: state.history, step_seconds })
}

/// Grid search over classical settings on one sample, scored by the best
/// `l_rel` reached over the iterations. Returns the winner and its score.
pub fn tune_classical(
    target: &Irradiance,
    init: &HeightField,
    truth: &HeightField,
    cfg: &ReconstructConfig,
    steps: &[f64],
    thresholds: &[f64],
    volume_weights: &[f64],
) -> Result<(ClassicalConfig, f64)> {
    let mut best: Option<(ClassicalConfig, f64)> = None;
    for &step in steps {
        for &threshold in thresholds {
            for &volume_weight in volume_weights {
                let classical = ClassicalConfig { step, threshold, volume_weight, ..cfg.classical };
                let run_cfg = ReconstructConfig { method: Method::Classical, classical, ..cfg.clone() };
                let run = reconstruct(target, init, Some(truth), &run_cfg, Models::default())?;
                let score = run.min_l_rel().expect("truth supplied");
                if best.map_or(true, |(_, b)| score < b) {
                    best = Some((classical, score));
                }
            }
        }
    }
    best.ok_or_else(|| Error::invalid("empty classical search grid"))
}

/// Geometric grid `lo, lo*r, ...` up to `hi`, `per_decade` values per decade.
pub fn log_grid(lo: f64, hi: f64, per_decade: usize) -> Vec<f64> {
    let count = ((hi / lo).log10() * per_decade as f64).round() as usize;
    (0..=count).map(|k| lo * 10f64.powf(k as f64 / per_decade as f64)).collect()
}

/// One reconstruction run in an evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRun {
    pub sample: String,
    pub method: String,
    pub history: Vec<HistoryEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub sample: String,
    pub method: String,
    pub iteration: usize,
    pub ssim: f64,
    pub l_rel: f64,
    /// Minimum `l_rel` of this sample and method over all iterations.
    pub min_l_rel: f64,
}

/// Per-iteration rows plus per-method averages.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub averages: Vec<EvalRow>,
}

pub const AVERAGE_LABEL: &str = "average";

pub fn evaluate(runs: &[EvalRun]) -> Result<EvalReport> {
    let mut report = EvalReport::default();
    for run in runs {
        let mut rows = Vec::with_capacity(run.history.len());
        for h in &run.history {
            let (Some(l), Some(s)) = (h.l_rel, h.ssim) else {
                return Err(Error::invalid(format!("run '{}' lacks ground-truth metrics", run.sample)));
            };
            rows.push(EvalRow {
                sample: run.sample.clone(),
                method: run.method.clone(),
                iteration: h.iteration,
                ssim: s,
                l_rel: l,
                min_l_rel: 0.0,
            });
        }
        let min = rows.iter().map(|r| r.l_rel).fold(f64::INFINITY, f64::min);
        rows.iter_mut().for_each(|r| r.min_l_rel = min);
        report.rows.extend(rows);
    }
    let mut keys: Vec<(String, usize)> = Vec::new();
    for r in &report.rows {
        if !keys.iter().any(|(m, i)| *m == r.method && *i == r.iteration) {
            keys.push((r.method.clone(), r.iteration));
        }
    }
    for (method, iteration) in keys {
        let group: Vec<&EvalRow> =
            report.rows.iter().filter(|r| r.method == method && r.iteration == iteration).collect();
        let k = group.len() as f64;
        report.averages.push(EvalRow {
            sample: AVERAGE_LABEL.into(),
            method,
            iteration,
            ssim: group.iter().map(|r| r.ssim).sum::<f64>() / k,
            l_rel: group.iter().map(|r| r.l_rel).sum::<f64>() / k,
            min_l_rel: group.iter().map(|r| r.min_l_rel).sum::<f64>() / k,
        });
    }
    Ok(report)
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("sample,method,iteration,ssim,l_rel,min_l_rel\n");
        for r in self.rows.iter().chain(&self.averages) {
            let sample = if r.sample.contains(',') || r.sample.contains('"') {
                format!("\"{}\"", r.sample.replace('"', "\"\""))
            } else {
                r.sample.clone()
            };
            let _ = writeln!(out, "{sample},{},{},{},{},{}", r.method, r.iteration, r.ssim, r.l_rel, r.min_l_rel);
        }
        out
    }
}

pub fn history_csv(history: &[HistoryEntry]) -> String {
    let mut out = String::from("iteration,l_irrad,l_rel,ssim\n");
    let opt = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
    for h in history {
        let _ = writeln!(out, "{},{},{},{}", h.iteration, h.l_irrad, opt(h.l_rel), opt(h.ssim));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::heightfield::LineSpec;
    use crate::neural::NetworkConfig;

    fn scene() -> SceneParams {
        let mut s = SceneParams::desk();
        s.sensor_res = 16;
        s.n_l = 2000;
        s
    }

    fn field(s: &SceneParams, bump: f64) -> HeightField {
        let line = LineSpec::new([-0.01, 0.0], [0.01, 0.005], 8e-3, bump).unwrap();
        HeightField::from_lines(16, s.substrate_extent, s.base_thickness, &[line]).unwrap()
    }

    #[test]
    fn classical_step_cases() {
        let s = scene();
        let x = field(&s, 1e-3);
        let cfg = ClassicalConfig { step: 0.5, ..ClassicalConfig::default() };
        assert_eq!(classical_step(&x, &vec![0.0; 256], &cfg).unwrap(), x);
        let up = classical_step(&x, &vec![-1e-4; 256], &cfg).unwrap();
        for (a, b) in up.heights().iter().zip(x.heights()) {
            assert!((a - b - 5e-5).abs() < 1e-15);
        }
        let down = classical_step(&x, &vec![1.0; 256], &cfg).unwrap();
        assert!(down.heights().iter().all(|&h| h == 0.0));
        let capped = classical_step(&x, &vec![-1.0; 256], &cfg).unwrap();
        assert!(capped.heights().iter().all(|&h| h == cfg.max_height));
    }

    #[test]
    fn threshold_and_volume_pull() {
        let s = scene();
        let x = HeightField::from_heights(16, vec![1e-3; 256], s.substrate_extent, s.base_thickness).unwrap();
        let mut g = vec![0.0; 256];
        g[0] = -1e-3;
        g[1] = -1e-5;
        let cfg = ClassicalConfig { step: 1.0, threshold: 0.5, ..ClassicalConfig::default() };
        let y = classical_step(&x, &g, &cfg).unwrap();
        assert!((y.heights()[0] - 2e-3).abs() < 1e-15);
        assert_eq!(y.heights()[1], 1e-3);
        let full = ClassicalConfig { step: 1.0, volume_weight: 1.0, ..ClassicalConfig::default() };
        let z = classical_step(&x, &g, &full).unwrap();
        assert!((z.volume() - x.volume()).abs() < 1e-12 * x.volume());
    }

    #[test]
    fn history_contract_and_zero_iterations() {
        let s = scene();
        let truth = field(&s, 1e-3);
        let target = render(&truth, &s, 1).unwrap();
        let flat = HeightField::new_flat(16, s.substrate_extent, s.base_thickness).unwrap();
        let cfg = ReconstructConfig::new(s.clone(), Method::Classical, 0, 3);
        let run = reconstruct(&target, &flat, Some(&truth), &cfg, Models::default()).unwrap();
        assert_eq!(run.fields.len(), 1);
        assert_eq!(run.final_field(), &flat);
        assert_eq!(run.history[0].l_rel, Some(1.0));
        let cfg = ReconstructConfig::new(s, Method::Classical, 3, 3);
        let run = reconstruct(&target, &flat, Some(&truth), &cfg, Models::default()).unwrap();
        assert_eq!(run.history.len(), 4);
        assert!(run.fields.iter().all(|f| f.heights().iter().all(|&h| h >= 0.0)));
    }

    #[test]
    fn nsfc_requires_weights_and_zero_updater_is_fixed_point() {
        let s = scene();
        let truth = field(&s, 1e-3);
        let target = render(&truth, &s, 1).unwrap();
        let init = field(&s, 5e-4);
        let cfg = ReconstructConfig::new(s, Method::Nsfc, 2, 4);
        assert!(reconstruct(&target, &init, None, &cfg, Models::default()).is_err());
        let small = NetworkConfig { n_s: 2, ..NetworkConfig::desk_denoiser() };
        let den = Network::denoiser(small, 1).unwrap();
        let upd = Network::updater(NetworkConfig::desk_updater(), 3, 1).unwrap();
        let models = Models { denoiser: Some(&den), updater: Some(&upd) };
        let run = reconstruct(&target, &init, None, &cfg, models).unwrap();
        assert!(run.fields.iter().all(|f| f == &init));

        // identity denoiser and no denoiser give identical trajectories
        let ablated = ReconstructConfig { ablation: Ablation { no_denoiser: true, no_gradient: false }, ..cfg.clone() };
        let a = reconstruct(&target, &init, None, &ablated, Models { denoiser: None, updater: Some(&upd) }).unwrap();
        assert_eq!(a.history, run.history);
        assert_eq!(a.caustics, run.caustics);
    }

    #[test]
    fn rejects_mismatched_target() {
        let s = scene();
        let flat = HeightField::new_flat(16, s.substrate_extent, s.base_thickness).unwrap();
        let target = Irradiance::zeros(3, 8, s.pixel_pitch());
        let cfg = ReconstructConfig::new(s, Method::Classical, 1, 0);
        assert!(matches!(reconstruct(&target, &flat, None, &cfg, Models::default()), Err(Error::Shape(_))));
    }

    #[test]
    fn evaluation_table() {
        let h = |i, l| HistoryEntry { iteration: i, l_irrad: 0.0, l_rel: Some(l), ssim: Some(1.0 - l) };
        let runs = vec![
            EvalRun { sample: "a".into(), method: "nsfc".into(), history: vec![h(0, 1.0), h(1, 0.6), h(2, 0.7)] },
            EvalRun { sample: "b".into(), method: "nsfc".into(), history: vec![h(0, 1.0), h(1, 0.9), h(2, 0.8)] },
        ];
        let r = evaluate(&runs).unwrap();
        assert_eq!(r.rows.len(), 6);
        for row in &r.rows {
            assert!(row.min_l_rel <= row.l_rel);
        }
        assert_eq!(r.averages.len(), 3);
        assert!((r.averages[1].l_rel - 0.75).abs() < 1e-12);
        assert!((r.averages[0].min_l_rel - 0.7).abs() < 1e-12);
        let csv = r.to_csv();
        assert_eq!(csv.lines().count(), 1 + 6 + 3);
        assert!(csv.lines().last().unwrap().starts_with("average,nsfc,2,"));
    }

    #[test]
    fn log_grid_spans_range() {
        let g = log_grid(1e-6, 1e-3, 2);
        assert_eq!(g.len(), 7);
        assert!((g[6] / 1e-3 - 1.0).abs() < 1e-12);
    }
}
