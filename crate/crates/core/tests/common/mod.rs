//! Helpers shared by the integration tests and the acceptance harness.
#![allow(dead_code)]

use caustic_recon::neural::{Network, NetworkConfig, Nonlin, Role, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A small random network plus an input, described by plain numbers so
/// property tests can shrink it.
#[derive(Debug, Clone)]
pub struct GradCase {
    pub updater: bool,
    pub nonlin: usize,
    pub c_init: usize,
    pub n_s: usize,
    pub k_down: usize,
    pub k_up: usize,
    pub m_s: usize,
    pub m_dec: usize,
    pub k_dec: usize,
    pub size_mult: usize,
    pub seed: u64,
}

pub const NONLINS: [Nonlin; 4] = [Nonlin::Elu, Nonlin::Relu, Nonlin::Prelu, Nonlin::Selu];

impl GradCase {
    pub fn build(&self) -> (Network, Tensor, Tensor) {
        let cfg = NetworkConfig {
            learning_rate: 1e-3,
            c_init: self.c_init,
            nonlin: NONLINS[self.nonlin % 4],
            k_down: self.k_down,
            k_up: self.k_up,
            m_s: self.m_s,
            n_s: self.n_s,
            m_dec: self.m_dec,
            k_dec: self.k_dec,
        };
        let (role, in_ch) = if self.updater { (Role::Updater, 4) } else { (Role::Denoiser, 1) };
        let mut net = Network::new(role, cfg, in_ch, self.seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x9e37);
        // every weight random, including the zero-initialised final layer
        let params: Vec<f64> = (0..net.param_count()).map(|_| rng.gen_range(-0.5..0.5)).collect();
        net.set_params(params).unwrap();
        let side = net.divisor() * self.size_mult;
        let x: Vec<f64> = (0..in_ch * side * side).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x = Tensor::from_vec(in_ch, side, side, x).unwrap();
        let probe = net.forward(&x).unwrap();
        let (c, h, w) = probe.shape();
        let dy: Vec<f64> = (0..c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
        (net, x, Tensor::from_vec(c, h, w, dy).unwrap())
    }
}

/// Random small architectures for gradient checks.
pub fn grad_case() -> impl Strategy<Value = GradCase> {
    (
        any::<bool>(),
        0usize..4,
        1usize..4,
        1usize..3,
        2usize..6,
        2usize..5,
        1usize..3,
        2usize..4,
        prop::sample::select(vec![2usize, 4]),
        1usize..3,
        any::<u64>(),
    )
        .prop_map(|(updater, nonlin, c_init, n_s, k_down, k_up, m_s, m_dec, k_dec, size_mult, seed)| GradCase {
            updater,
            nonlin,
            c_init,
            n_s,
            k_down,
            k_up,
            m_s,
            m_dec,
            k_dec,
            size_mult,
            seed,
        })
}

fn loss(net: &Network, x: &Tensor, dy: &Tensor) -> f64 {
    let y = net.forward(x).unwrap();
    y.data().iter().zip(dy.data()).map(|(a, b)| a * b).sum()
}

fn rel_err(fd: f64, an: f64) -> f64 {
    let diff = (fd - an).abs();
    // below this the central difference is dominated by rounding
    if diff < 1e-8 {
        return 0.0;
    }
    diff / fd.abs().max(an.abs())
}

/// Largest relative error between the backward pass and central finite
/// differences of `sum(dy * net(x))`, over `probes` random parameters and
/// `probes` random input entries.
pub fn max_gradient_error(case: &GradCase, probes: usize) -> f64 {
    let (mut net, x, dy) = case.build();
    let (_, trace) = net.forward_traced(&x).unwrap();
    let (dx, dp) = net.backward(&trace, &dy).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(case.seed.wrapping_add(17));
    let eps = 1e-6;
    let mut worst: f64 = 0.0;
    for _ in 0..probes {
        let i = rng.gen_range(0..net.param_count());
        let orig = net.params()[i];
        net.params_mut()[i] = orig + eps;
        let up = loss(&net, &x, &dy);
        net.params_mut()[i] = orig - eps;
        let down = loss(&net, &x, &dy);
        net.params_mut()[i] = orig;
        worst = worst.max(rel_err((up - down) / (2.0 * eps), dp[i]));
    }
    for _ in 0..probes {
        let i = rng.gen_range(0..x.data().len());
        let mut xp = x.clone();
        xp.data_mut()[i] += eps;
        let up = loss(&net, &xp, &dy);
        xp.data_mut()[i] -= 2.0 * eps;
        let down = loss(&net, &xp, &dy);
        worst = worst.max(rel_err((up - down) / (2.0 * eps), dx.data()[i]));
    }
    worst
}

pub const BIN: &str = env!("CARGO_BIN_EXE_caustic-recon");

/// Runs the binary in `cwd` and returns (exit code, stdout, stderr).
pub fn run_cli(cwd: &std::path::Path, args: &[&str]) -> (i32, String, String) {
    let out = std::process::Command::new(BIN).current_dir(cwd).args(args).output().expect("spawn binary");
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

fn ok(cwd: &std::path::Path, args: &[&str]) {
    let (code, _, err) = run_cli(cwd, args);
    assert_eq!(code, 0, "{args:?} failed: {err}");
}

/// Every subcommand at toy size with relative paths, so two runs in
/// different directories should produce identical trees.
pub fn tiny_pipeline(cwd: &std::path::Path, threads: usize) {
    let t = threads.to_string();
    let common = ["--seed", "11", "--deterministic", "--threads", t.as_str()];
    let scene = ["--sensor-res", "16", "--n-l", "400"];
    let run = |args: &[&str], extra: &[&str]| {
        let mut all: Vec<&str> = args.to_vec();
        all.extend_from_slice(extra);
        all.extend_from_slice(&common);
        ok(cwd, &all);
    };
    run(&["gen-denoise", "--out", "den", "--count", "6"], &scene);
    run(&["train-denoiser", "--data", "den", "--out", "den.nsfw", "--epochs", "2", "--c-init", "2"], &[]);
    run(&["gen-updater", "--out", "upd", "--count", "6", "--denoiser", "den.nsfw"], &scene);
    run(&["train-updater", "--data", "upd", "--out", "upd.nsfw", "--epochs", "2", "--m-s", "2"], &[]);
    run(&["gen-test", "--out", "test"], &scene);
    run(&["render", "--field", "test/sample_000000/field.nsfc", "--out", "e.nsfc", "--png", "e.png"], &scene);
    run(
        &[
            "reconstruct",
            "--target",
            "test/sample_000000/target.nsfc",
            "--truth",
            "test/sample_000000/field.nsfc",
            "--denoiser",
            "den.nsfw",
            "--updater",
            "upd.nsfw",
            "--iters",
            "2",
            "--out",
            "rec",
        ],
        &scene,
    );
    run(
        &[
            "evaluate",
            "--test",
            "test",
            "--denoiser",
            "den.nsfw",
            "--updater",
            "upd.nsfw",
            "--iters",
            "2",
            "--out",
            "report.csv",
        ],
        &["--n-l", "400"],
    );
    run(&["toy2d", "--steps", "50", "--out", "toy"], &[]);
    run(&["convert", "e.nsfc", "e.csv"], &[]);
}

/// All files under `root` as (relative path, contents), sorted.
pub fn snapshot(root: &std::path::Path) -> Vec<(String, Vec<u8>)> {
    fn walk(root: &std::path::Path, dir: &std::path::Path, out: &mut Vec<(String, Vec<u8>)>) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.push((rel, std::fs::read(&path).unwrap()));
            }
        }
    }
    let mut out = Vec::new();
    walk(root, root, &mut out);
    out.sort();
    out
}
