//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit if any
//! criterion fails. Tolerances below are fixed.
//!
//! The desk-scale learning criteria (5 to 7) generate their data and train
//! from scratch, which takes on the order of an hour on one core. Setting
//! `ACCEPTANCE_CACHE=dir` keeps datasets and checkpoints between runs.

mod common;

use std::path::PathBuf;
use std::time::Instant;

use caustic_recon::datasets::{
    gen_denoise_pairs, gen_test_samples, gen_updater_samples, load_denoise_dataset, load_updater_dataset,
    write_denoise_dataset, write_updater_dataset, DenoisePair, GenConfig, TestSample, UpdaterGen, UpdaterSample,
};
use caustic_recon::heightfield::sample_line_field;
use caustic_recon::metrics::{hausdorff, l_irrad, l_irrad_backward, l_rel, ssim, ssim_fields, SsimParams};
use caustic_recon::neural::{
    denoise, load_role, save_network, train_denoiser, train_updater, Network, NetworkConfig, Role, TrainOptions,
};
use caustic_recon::reconstruct::{
    log_grid, reconstruct, tune_classical, Ablation, ClassicalConfig, Method, Models, ReconstructConfig,
};
use caustic_recon::render::{finite_diff_render_gradient, render, render_backward, render_with, RenderOptions};
use caustic_recon::toy2d::run_demo;
use caustic_recon::{HeightField, LineFieldRanges, SceneParams};
use proptest::test_runner::{Config, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ------------------------------------------------------------ 1. energy

fn energy_conservation() -> Outcome {
    let start = Instant::now();
    let scene = SceneParams { n_l: 100_000, ..SceneParams::desk() };
    let ideal: Vec<f64> =
        scene.radiosity.iter().map(|l| l * scene.substrate_extent.0 * scene.substrate_extent.1).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for k in 0..20 {
        let (field, _) =
            sample_line_field(&mut rng, &LineFieldRanges::default(), 64, scene.substrate_extent, scene.base_thickness)
                .map_err(|e| e.to_string())?;
        let (img, stats) =
            render_with(&field, &scene, k, RenderOptions { deterministic: true }).map_err(|e| e.to_string())?;
        for c in 0..scene.n_w() {
            let accounted = stats.deposited[c] + stats.offscreen[c] + stats.tir[c];
            worst = worst
                .max((accounted - ideal[c]).abs() / ideal[c])
                .max((img.total_power(c) - stats.deposited[c]).abs() / ideal[c]);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    check(worst <= 1e-6 && secs < 60.0, format!("worst relative imbalance {worst:.2e}, {secs:.1} s"))
}

// ------------------------------------------------------------ 2. render gradient

fn render_gradient() -> Outcome {
    let start = Instant::now();
    let scene = SceneParams { n_l: 1000, ..SceneParams::desk() };
    let mut worst: f64 = 0.0;
    for seed in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let mut field = || {
            let h: Vec<f64> = (0..64).map(|_| rng.gen::<f64>() * 1.5e-3).collect();
            HeightField::from_heights(8, h, scene.substrate_extent, scene.base_thickness).unwrap()
        };
        let (x, truth) = (field(), field());
        let target = render(&truth, &scene.with_n_l(20_000), 7).map_err(|e| e.to_string())?;
        let e = render(&x, &scene, seed).map_err(|e| e.to_string())?;
        let dl = l_irrad_backward(&e, &target).map_err(|e| e.to_string())?;
        let g = render_backward(&x, &scene, seed, &dl).map_err(|e| e.to_string())?;
        let fd = finite_diff_render_gradient(&x, &scene, seed, 1e-7, |img| l_irrad(img, &target).unwrap())
            .map_err(|e| e.to_string())?;
        let mut idx: Vec<usize> = (0..fd.len()).collect();
        idx.sort_by(|&a, &b| fd[b].abs().total_cmp(&fd[a].abs()));
        for &i in &idx[..10] {
            worst = worst.max((g[i] - fd[i]).abs() / fd[i].abs());
        }
    }
    let secs = start.elapsed().as_secs_f64();
    check(worst <= 0.05 && secs < 120.0, format!("worst relative error {worst:.4} over 5 seeds, {secs:.1} s"))
}

// ------------------------------------------------------------ 3. network gradients

fn network_gradients() -> Outcome {
    let start = Instant::now();
    let mut runner = TestRunner::new(Config { cases: 100, failure_persistence: None, ..Config::default() });
    let worst = std::cell::Cell::new(0f64);
    let result = runner.run(&common::grad_case(), |c| {
        let err = common::max_gradient_error(&c, 12);
        worst.set(worst.get().max(err));
        proptest::prop_assert!(err <= 1e-4, "relative error {err} for {c:?}");
        Ok(())
    });
    let secs = start.elapsed().as_secs_f64();
    match result {
        Ok(()) => check(secs < 60.0, format!("100 cases, worst relative error {:.2e}, {secs:.1} s", worst.get())),
        Err(e) => Err(e.to_string()),
    }
}

// ------------------------------------------------------------ 4. metrics

fn metric_identities() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let scene = SceneParams::desk();
    for _ in 0..20 {
        let (h, _) =
            sample_line_field(&mut rng, &LineFieldRanges::default(), 32, scene.substrate_extent, scene.base_thickness)
                .map_err(|e| e.to_string())?;
        let flat = HeightField::new_flat(32, scene.substrate_extent, scene.base_thickness).unwrap();
        let (same, zero, s) = (l_rel(&h, &h).unwrap(), l_rel(&flat, &h).unwrap(), ssim_fields(&h, &h).unwrap());
        if same != 0.0 || zero != 1.0 || s != 1.0 {
            return Err(format!("l_rel(h,h) {same}, l_rel(0,h) {zero}, ssim(h,h) {s}"));
        }
        let img: Vec<f64> = (0..32 * 32).map(|_| rng.gen::<f64>()).collect();
        let s = ssim(&img, &img, 32, 32, &SsimParams::default()).unwrap();
        if s != 1.0 {
            return Err(format!("ssim(x,x) = {s}"));
        }
    }
    let set = |rng: &mut ChaCha8Rng| -> Vec<[f64; 2]> {
        let n = rng.gen_range(1..8);
        (0..n).map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]).collect()
    };
    for k in 0..1000 {
        let (a, b, c) = (set(&mut rng), set(&mut rng), set(&mut rng));
        let d = |x: &[[f64; 2]], y: &[[f64; 2]]| hausdorff(x, y).unwrap();
        let (ab, ba, bc, ac) = (d(&a, &b), d(&b, &a), d(&b, &c), d(&a, &c));
        let ok = d(&a, &a) == 0.0 && ab > 0.0 && ab == ba && ac <= ab + bc + 1e-12;
        if !ok {
            return Err(format!("metric axiom violated on set triple {k}"));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    check(secs < 30.0, format!("identities exact, 1000 set triples satisfy the axioms, {secs:.1} s"))
}

// ------------------------------------------------------------ 5 to 7. desk-scale learning

const DENOISE_SEED: u64 = 1;
const UPDATER_SEED: u64 = 2;
const TEST_SEED: u64 = 3;
const RECON_SEED: u64 = 5;
const ITERS: usize = 8;
const UPDATER_EPOCHS: usize = 8;
const DENOISER_EPOCHS: usize = 10;

struct Workspace {
    dir: PathBuf,
    _tmp: Option<tempfile::TempDir>,
}

impl Workspace {
    fn new() -> Self {
        match std::env::var_os("ACCEPTANCE_CACHE") {
            Some(d) => Workspace { dir: PathBuf::from(d), _tmp: None },
            None => {
                let tmp = tempfile::tempdir().expect("temp dir");
                Workspace { dir: tmp.path().to_path_buf(), _tmp: Some(tmp) }
            }
        }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }
}

fn denoise_pairs(ws: &Workspace) -> Vec<DenoisePair> {
    let dir = ws.path("denoise");
    if dir.join("manifest.json").exists() {
        return load_denoise_dataset(&dir).unwrap().0;
    }
    let (pairs, m) = gen_denoise_pairs(&GenConfig::desk(DENOISE_SEED), 550).unwrap();
    write_denoise_dataset(&pairs, &m, &dir).unwrap();
    pairs
}

fn trained_denoiser(ws: &Workspace, pairs: &[DenoisePair]) -> Network {
    let path = ws.path("denoiser.nsfw");
    if path.exists() {
        return load_role(&path, Role::Denoiser).unwrap();
    }
    let train: Vec<_> = pairs[..500].iter().map(|p| (p.low.clone(), p.high.clone())).collect();
    let opts = TrainOptions { epochs: DENOISER_EPOCHS, ..TrainOptions::default() };
    let (net, rep) = train_denoiser(&train, &NetworkConfig::desk_denoiser(), &opts, DENOISE_SEED).unwrap();
    save_network(&net, DENOISE_SEED, rep.best_epoch, &path).unwrap();
    net
}

fn updater_samples(ws: &Workspace, name: &str, denoiser: Option<&Network>) -> Vec<UpdaterSample> {
    let dir = ws.path(name);
    if dir.join("manifest.json").exists() {
        return load_updater_dataset(&dir).unwrap().0;
    }
    let (s, m) = gen_updater_samples(&GenConfig::desk(UPDATER_SEED), &UpdaterGen::default(), denoiser, 1000).unwrap();
    write_updater_dataset(&s, &m, &dir).unwrap();
    s
}

fn trained_updater(ws: &Workspace, name: &str, samples: &[UpdaterSample]) -> Network {
    let path = ws.path(&format!("{name}.nsfw"));
    if path.exists() {
        return load_role(&path, Role::Updater).unwrap();
    }
    let examples: Vec<_> = samples.iter().map(|s| s.example().unwrap()).collect();
    let opts = TrainOptions { epochs: UPDATER_EPOCHS, ..TrainOptions::default() };
    let n_w = SceneParams::desk().n_w();
    let (net, rep) = train_updater(&examples, n_w, &NetworkConfig::desk_updater(), &opts, UPDATER_SEED).unwrap();
    save_network(&net, UPDATER_SEED, rep.best_epoch, &path).unwrap();
    net
}

struct Learning {
    denoiser_ratio: f64,
    initial: Vec<f64>,
    classical: Vec<f64>,
    full: Vec<f64>,
    no_denoiser: Vec<f64>,
    classical_cfg: ClassicalConfig,
    seconds: (f64, f64),
}

fn min_l_rel_runs(tests: &[TestSample], cfg: &ReconstructConfig, models: Models) -> Vec<f64> {
    let flat = flat_field();
    tests
        .iter()
        .map(|s| reconstruct(&s.target, &flat, Some(&s.field), cfg, models).unwrap().min_l_rel().unwrap())
        .collect()
}

fn flat_field() -> HeightField {
    let scene = SceneParams::desk();
    HeightField::new_flat(scene.sensor_res, scene.substrate_extent, scene.base_thickness).unwrap()
}

fn run_learning(ws: &Workspace) -> Learning {
    let t = Instant::now();
    let pairs = denoise_pairs(ws);
    let den = trained_denoiser(ws, &pairs);
    let (mut denoised, mut noisy) = (0.0, 0.0);
    for p in &pairs[500..] {
        denoised += l_irrad(&denoise(&den, &p.low).unwrap(), &p.high).unwrap();
        noisy += l_irrad(&p.low, &p.high).unwrap();
    }
    let denoiser_secs = t.elapsed().as_secs_f64();

    let t = Instant::now();
    let full_samples = updater_samples(ws, "updater", Some(&den));
    let upd = trained_updater(ws, "updater", &full_samples);
    drop(full_samples);
    let raw_samples = updater_samples(ws, "updater_raw", None);
    let upd_raw = trained_updater(ws, "updater_raw", &raw_samples);
    drop(raw_samples);

    let gen = GenConfig::desk(TEST_SEED);
    let (tests, _) = gen_test_samples(&gen).unwrap();
    let scene = gen.scene.with_n_l(gen.quality.low);
    let flat = flat_field();
    let initial: Vec<f64> = tests.iter().map(|s| l_rel(&flat, &s.field).unwrap()).collect();

    // classical settings tuned on the first test sample only
    let base = ReconstructConfig::new(scene.clone(), Method::Classical, ITERS, RECON_SEED);
    let (classical_cfg, _) =
        tune_classical(&tests[0].target, &flat, &tests[0].field, &base, &log_grid(1e-9, 1e-1, 2), &[0.0, 0.3], &[0.0])
            .unwrap();
    let classical = min_l_rel_runs(&tests, &ReconstructConfig { classical: classical_cfg, ..base }, Models::default());

    let nsfc = ReconstructConfig::new(scene, Method::Nsfc, ITERS, RECON_SEED);
    let full = min_l_rel_runs(&tests, &nsfc, Models { denoiser: Some(&den), updater: Some(&upd) });
    let ablated = ReconstructConfig { ablation: Ablation { no_denoiser: true, no_gradient: false }, ..nsfc };
    let no_denoiser = min_l_rel_runs(&tests, &ablated, Models { denoiser: None, updater: Some(&upd_raw) });
    Learning {
        denoiser_ratio: denoised / noisy,
        initial,
        classical,
        full,
        no_denoiser,
        classical_cfg,
        seconds: (denoiser_secs, t.elapsed().as_secs_f64()),
    }
}

fn denoiser_efficacy(l: &Learning) -> Outcome {
    check(
        l.denoiser_ratio <= 0.7,
        format!("held-out l_irrad ratio {:.4} (limit 0.7), {:.0} s", l.denoiser_ratio, l.seconds.0),
    )
}

fn updater_efficacy(l: &Learning) -> Outcome {
    let improved = l.full.iter().zip(&l.initial).filter(|(m, i)| m < i).count();
    let beats = l.full.iter().zip(&l.classical).filter(|(n, c)| n < c).count();
    let rows: Vec<String> =
        (0..l.full.len()).map(|i| format!("{:.3}/{:.3}/{:.3}", l.initial[i], l.full[i], l.classical[i])).collect();
    check(
        improved >= 8 && beats >= 6,
        format!(
            "improved {improved}/10, beats classical {beats}/10 (classical step {:.1e} threshold {}); init/nsfc/classical {}; {:.0} s",
            l.classical_cfg.step,
            l.classical_cfg.threshold,
            rows.join(" "),
            l.seconds.1
        ),
    )
}

fn ablation_direction(l: &Learning) -> Outcome {
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (ablated, full) = (mean(&l.no_denoiser), mean(&l.full));
    check(ablated >= full, format!("mean min l_rel without denoiser {ablated:.4}, full pipeline {full:.4}"))
}

// ------------------------------------------------------------ 8. toy2d

fn toy2d_phenomenon() -> Outcome {
    let start = Instant::now();
    let demo = run_demo(1000, 64).map_err(|e| e.to_string())?;
    let reduction = 1.0 - demo.final_hausdorff / demo.initial_hausdorff;
    let secs = start.elapsed().as_secs_f64();
    check(
        reduction >= 0.9 && demo.final_l_rel > 0.5 * demo.initial_l_rel && secs < 60.0,
        format!(
            "hausdorff reduced {:.1}%, l_rel {:.3} -> {:.3}, {secs:.1} s",
            100.0 * reduction,
            demo.initial_l_rel,
            demo.final_l_rel
        ),
    )
}

// ------------------------------------------------------------ 9. determinism

fn determinism() -> Outcome {
    let start = Instant::now();
    let runs: Vec<(usize, tempfile::TempDir)> =
        [1usize, 2, 4].iter().map(|&t| (t, tempfile::tempdir().unwrap())).collect();
    for (threads, dir) in &runs {
        common::tiny_pipeline(dir.path(), *threads);
    }
    let reference = common::snapshot(runs[0].1.path());
    for (threads, dir) in &runs[1..] {
        let other = common::snapshot(dir.path());
        if other.len() != reference.len() {
            return Err(format!("{threads} threads wrote {} files, 1 thread wrote {}", other.len(), reference.len()));
        }
        for ((name, a), (name_b, b)) in reference.iter().zip(&other) {
            if name != name_b || a != b {
                return Err(format!("{name} differs between 1 and {threads} threads"));
            }
        }
    }
    check(
        true,
        format!("{} files identical at 1, 2 and 4 threads, {:.1} s", reference.len(), start.elapsed().as_secs_f64()),
    )
}

fn main() {
    // optional criterion numbers restrict the run, e.g. `-- 1 8`
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let wanted = |n: usize| only.is_empty() || only.contains(&n);
    let mut failed = 0;
    let mut report = |n: usize, name: &str, outcome: Outcome| {
        let (tag, detail) = match outcome {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("criterion {n} {name}: {tag} ({detail})");
    };
    if wanted(1) {
        report(1, "energy conservation", energy_conservation());
    }
    if wanted(2) {
        report(2, "render gradient", render_gradient());
    }
    if wanted(3) {
        report(3, "network gradients", network_gradients());
    }
    if wanted(4) {
        report(4, "metric identities", metric_identities());
    }
    if wanted(5) || wanted(6) || wanted(7) {
        let ws = Workspace::new();
        let learning = run_learning(&ws);
        report(5, "denoiser efficacy", denoiser_efficacy(&learning));
        report(6, "updater efficacy", updater_efficacy(&learning));
        report(7, "ablation direction", ablation_direction(&learning));
    }
    if wanted(8) {
        report(8, "toy2d phenomenon", toy2d_phenomenon());
    }
    if wanted(9) {
        report(9, "determinism", determinism());
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
