//! Command-line front end shared by the `caustic-recon` binary.
//!
//! Every subcommand accepts `--seed`, `--deterministic`, `--threads` and
//! `--config FILE`. The config file holds `key=value` lines whose keys are
//! long flag names of the subcommand; flags given on the command line win.
//! Each run writes `run.json` (or `<output>.run.json` for single-file
//! outputs) echoing the resolved settings.

use std::ffi::OsString;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{ArgMatches, Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::datasets::{
    self, config_from_manifest, gen_denoise_pairs, gen_test_samples, gen_updater_samples, write_denoise_dataset,
    write_test_set, write_updater_dataset, GenConfig, Quality, UpdaterGen, QUALITY_RATIO,
};
use crate::error::{Error, Result};
use crate::heightfield::{HeightField, LineFieldRanges};
use crate::io::{read_png, write_png, write_text, Grid};
use crate::neural::{
    load_role, save_network, train_denoiser, train_updater, Network, NetworkConfig, Nonlin, Role, TrainOptions,
    TrainReport,
};
use crate::reconstruct::{
    evaluate, history_csv, log_grid, reconstruct, tune_classical, Ablation, ClassicalConfig, EvalRun, Method, Models,
    ReconstructConfig,
};
use crate::render::{render_with, Irradiance, RenderOptions, SceneParams, SpectralIor};
use crate::toy2d::{run_demo, write_demo_plots};

const RUN_MANIFEST: &str = "run.json";

#[derive(Debug, Parser)]
#[command(name = "caustic-recon", version, about = "Height-field reconstruction from caustic images")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct Common {
    /// Master seed for every random choice of the run
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Reduce parallel work in a fixed order so outputs do not depend on the thread count
    #[arg(long, global = true)]
    pub deterministic: bool,
    /// Worker threads (default: all cores)
    #[arg(long, global = true)]
    #[serde(skip)]
    pub threads: Option<usize>,
    /// key=value file of default flag values
    #[arg(long, global = true, value_name = "FILE")]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    /// Generate (low, high) quality caustic pairs for denoiser training
    GenDenoise(GenDenoiseArgs),
    /// Generate (source, target, gradient, caustics) samples for updater training
    GenUpdater(GenUpdaterArgs),
    /// Generate the ten-sample evaluation set
    GenTest(GenTestArgs),
    /// Train the caustic denoiser on a gen-denoise dataset
    TrainDenoiser(TrainArgs),
    /// Train the height-field updater on a gen-updater dataset
    TrainUpdater(TrainArgs),
    /// Render the caustic of a height field
    Render(RenderArgs),
    /// Reconstruct a height field from a target caustic
    Reconstruct(ReconstructArgs),
    /// Run both methods on a test set and write the error report
    Evaluate(EvaluateArgs),
    /// 2D demo: matching intersection points does not recover the surface
    Toy2d(Toy2dArgs),
    /// Convert between NSFC1, PNG and CSV
    Convert(ConvertArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenDenoise(_) => "gen-denoise",
            Command::GenUpdater(_) => "gen-updater",
            Command::GenTest(_) => "gen-test",
            Command::TrainDenoiser(_) => "train-denoiser",
            Command::TrainUpdater(_) => "train-updater",
            Command::Render(_) => "render",
            Command::Reconstruct(_) => "reconstruct",
            Command::Evaluate(_) => "evaluate",
            Command::Toy2d(_) => "toy2d",
            Command::Convert(_) => "convert",
        }
    }
}

/// Comma-separated list of numbers.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(transparent)]
pub struct List(pub Vec<f64>);

impl FromStr for List {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        s.split(',')
            .map(|v| v.trim().parse::<f64>().map_err(|e| format!("`{v}`: {e}")))
            .collect::<std::result::Result<Vec<_>, _>>()
            .map(List)
    }
}

impl fmt::Display for List {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|v| v.to_string()).collect();
        f.write_str(&parts.join(","))
    }
}

impl List {
    fn fixed<const N: usize>(&self, flag: &str) -> Result<[f64; N]> {
        self.0
            .as_slice()
            .try_into()
            .map_err(|_| Error::InvalidArgument(format!("--{flag} takes {N} comma-separated values")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Desk,
    Full,
}

/// Scene overrides; unset fields keep the preset's value.
#[derive(Debug, Clone, Args, Serialize)]
pub struct SceneArgs {
    /// Base scene and network sizes
    #[arg(long, value_enum, default_value_t = Preset::Desk)]
    pub preset: Preset,
    /// Light paths per rendering
    #[arg(long)]
    pub n_l: Option<usize>,
    /// Wavelengths in nm, one caustic channel each
    #[arg(long, value_name = "NM,..")]
    pub wavelengths: Option<List>,
    /// Radiosity per wavelength in W/m^2
    #[arg(long, value_name = "W,..")]
    pub radiosity: Option<List>,
    /// Footprint smoothing (16 = one-pixel footprint)
    #[arg(long)]
    pub smoothing: Option<f64>,
    /// Half-angle of the emission cone in radians
    #[arg(long)]
    pub emission_angle: Option<f64>,
    #[arg(long, value_name = "X,Y,Z")]
    pub light_pos: Option<List>,
    #[arg(long, value_name = "X,Y,Z")]
    pub screen_pos: Option<List>,
    /// Substrate size in metres
    #[arg(long, value_name = "X,Y")]
    pub extent: Option<List>,
    /// Sensor pixels per side
    #[arg(long)]
    pub sensor_res: Option<usize>,
    /// Glass thickness under the height field in metres
    #[arg(long)]
    pub base_thickness: Option<f64>,
    /// Sellmeier B coefficients
    #[arg(long, value_name = "B1,B2,B3")]
    pub sellmeier_b: Option<List>,
    /// Sellmeier C coefficients in square micrometres
    #[arg(long, value_name = "C1,C2,C3")]
    pub sellmeier_c: Option<List>,
}

impl SceneArgs {
    pub fn resolve(&self) -> Result<SceneParams> {
        let mut s = match self.preset {
            Preset::Desk => SceneParams::desk(),
            Preset::Full => SceneParams::full(),
        };
        if let Some(v) = self.n_l {
            s.n_l = v;
        }
        if let Some(v) = &self.wavelengths {
            s.wavelengths = v.0.clone();
            if self.radiosity.is_none() {
                s.radiosity = vec![1.0; v.0.len()];
            }
        }
        if let Some(v) = &self.radiosity {
            s.radiosity = v.0.clone();
        }
        if let Some(v) = self.smoothing {
            s.smoothing = v;
        }
        if let Some(v) = self.emission_angle {
            s.emission_angle = v;
        }
        if let Some(v) = &self.light_pos {
            s.light_pos = v.fixed("light-pos")?;
        }
        if let Some(v) = &self.screen_pos {
            s.screen_pos = v.fixed("screen-pos")?;
        }
        if let Some(v) = &self.extent {
            let [x, y] = v.fixed("extent")?;
            s.substrate_extent = (x, y);
        }
        if let Some(v) = self.sensor_res {
            s.sensor_res = v;
        }
        if let Some(v) = self.base_thickness {
            s.base_thickness = v;
        }
        let mut glass = SpectralIor::default();
        if let Some(v) = &self.sellmeier_b {
            glass.b = v.fixed("sellmeier-b")?;
        }
        if let Some(v) = &self.sellmeier_c {
            glass.c = v.fixed("sellmeier-c")?;
        }
        s.glass = glass;
        s.validate()?;
        Ok(s)
    }
}

/// Dataset generation settings.
#[derive(Debug, Clone, Args, Serialize)]
pub struct GenArgs {
    #[command(flatten)]
    pub scene: SceneArgs,
    /// Height-field texels per side (default: sensor resolution)
    #[arg(long)]
    pub field_res: Option<usize>,
    /// Light paths of the high-quality renderings (default: 16x --n-l)
    #[arg(long)]
    pub high_n_l: Option<usize>,
    /// Output dataset directory
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

impl GenArgs {
    fn config(&self, seed: u64) -> Result<GenConfig> {
        let scene = self.scene.resolve()?;
        let low = scene.n_l;
        let quality = Quality { low, high: self.high_n_l.unwrap_or(low * QUALITY_RATIO) };
        Ok(GenConfig {
            field_res: self.field_res.unwrap_or(scene.sensor_res),
            scene,
            ranges: LineFieldRanges::default(),
            quality,
            seed,
        })
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct GenDenoiseArgs {
    #[command(flatten)]
    pub gen: GenArgs,
    /// Number of pairs
    #[arg(long, default_value_t = 550)]
    pub count: usize,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct GenUpdaterArgs {
    #[command(flatten)]
    pub gen: GenArgs,
    /// Number of samples
    #[arg(long, default_value_t = 1000)]
    pub count: usize,
    /// Share of samples that start from a flat field
    #[arg(long, default_value_t = 0.25)]
    pub flat_fraction: f64,
    /// Denoiser applied to the stored caustics (omit for raw renderings)
    #[arg(long, value_name = "FILE")]
    pub denoiser: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct GenTestArgs {
    #[command(flatten)]
    pub gen: GenArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct TrainArgs {
    /// Dataset directory
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    /// Output checkpoint
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    /// Base network size
    #[arg(long, value_enum, default_value_t = Preset::Desk)]
    pub arch: Preset,
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    #[arg(long, default_value_t = 8)]
    pub batch_size: usize,
    /// Epochs without validation improvement before stopping
    #[arg(long, default_value_t = 3)]
    pub patience: usize,
    #[arg(long, default_value_t = 0.1)]
    pub validation_fraction: f64,
    /// Learning rate (default: the architecture's)
    #[arg(long)]
    pub lr: Option<f64>,
    /// Use only the first N dataset samples
    #[arg(long)]
    pub limit: Option<usize>,
    #[arg(long)]
    pub c_init: Option<usize>,
    #[arg(long)]
    pub nonlin: Option<String>,
    #[arg(long)]
    pub k_down: Option<usize>,
    #[arg(long)]
    pub k_up: Option<usize>,
    #[arg(long)]
    pub m_s: Option<usize>,
    #[arg(long)]
    pub n_s: Option<usize>,
    #[arg(long)]
    pub m_dec: Option<usize>,
    #[arg(long)]
    pub k_dec: Option<usize>,
}

impl TrainArgs {
    fn network_config(&self, role: Role) -> Result<NetworkConfig> {
        let mut c = match (role, self.arch) {
            (Role::Denoiser, Preset::Desk) => NetworkConfig::desk_denoiser(),
            (Role::Denoiser, Preset::Full) => NetworkConfig::full_denoiser(),
            (Role::Updater, Preset::Desk) => NetworkConfig::desk_updater(),
            (Role::Updater, Preset::Full) => NetworkConfig::full_updater(),
        };
        let set = |dst: &mut usize, v: Option<usize>| {
            if let Some(v) = v {
                *dst = v;
            }
        };
        set(&mut c.c_init, self.c_init);
        set(&mut c.k_down, self.k_down);
        set(&mut c.k_up, self.k_up);
        set(&mut c.m_s, self.m_s);
        set(&mut c.n_s, self.n_s);
        set(&mut c.m_dec, self.m_dec);
        set(&mut c.k_dec, self.k_dec);
        if let Some(n) = &self.nonlin {
            c.nonlin = Nonlin::parse(n)?;
        }
        if let Some(lr) = self.lr {
            c.learning_rate = lr;
        }
        c.validate()?;
        Ok(c)
    }

    fn options(&self) -> TrainOptions {
        TrainOptions {
            epochs: self.epochs,
            batch_size: self.batch_size,
            patience: self.patience,
            validation_fraction: self.validation_fraction,
            learning_rate: None,
        }
    }

    fn take<T>(&self, mut items: Vec<T>) -> Vec<T> {
        if let Some(n) = self.limit {
            items.truncate(n);
        }
        items
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct RenderArgs {
    #[command(flatten)]
    pub scene: SceneArgs,
    /// Height field (NSFC1, one channel, heights in metres)
    #[arg(long, value_name = "FILE", conflicts_with = "flat", required_unless_present = "flat")]
    pub field: Option<PathBuf>,
    /// Render a flat slab instead of a height field
    #[arg(long)]
    pub flat: bool,
    /// Texels per side of the flat slab (default: sensor resolution)
    #[arg(long)]
    pub field_res: Option<usize>,
    /// Output caustic (NSFC1)
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    /// Also write a tonemapped PNG
    #[arg(long, value_name = "FILE")]
    pub png: Option<PathBuf>,
}

/// Learned and classical update settings.
#[derive(Debug, Clone, Args, Serialize)]
pub struct MethodArgs {
    /// Update steps
    #[arg(long, default_value_t = 8)]
    pub iters: usize,
    #[arg(long, value_name = "FILE")]
    pub denoiser: Option<PathBuf>,
    #[arg(long, value_name = "FILE")]
    pub updater: Option<PathBuf>,
    /// Skip the denoiser
    #[arg(long)]
    pub no_denoiser: bool,
    /// Feed the updater a zero gradient
    #[arg(long)]
    pub no_gradient: bool,
    /// Classical step size
    #[arg(long, default_value_t = ClassicalConfig::default().step)]
    pub step: f64,
    /// Classical update threshold as a fraction of the largest step
    #[arg(long, default_value_t = ClassicalConfig::default().threshold)]
    pub threshold: f64,
    /// Classical volume damping
    #[arg(long, default_value_t = ClassicalConfig::default().volume_weight)]
    pub volume_weight: f64,
    /// Classical upper height bound in metres
    #[arg(long, default_value_t = ClassicalConfig::default().max_height)]
    pub max_height: f64,
}

impl MethodArgs {
    fn classical(&self) -> ClassicalConfig {
        ClassicalConfig {
            step: self.step,
            threshold: self.threshold,
            volume_weight: self.volume_weight,
            max_height: self.max_height,
        }
    }

    fn ablation(&self) -> Ablation {
        Ablation { no_denoiser: self.no_denoiser, no_gradient: self.no_gradient }
    }

    fn networks(&self, method: Method) -> Result<(Option<Network>, Option<Network>)> {
        let denoiser = match &self.denoiser {
            Some(p) if !self.no_denoiser => Some(load_role(p, Role::Denoiser)?),
            _ => None,
        };
        let updater = match (&self.updater, method) {
            (Some(p), Method::Nsfc) => Some(load_role(p, Role::Updater)?),
            _ => None,
        };
        Ok((denoiser, updater))
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ReconstructArgs {
    #[command(flatten)]
    pub scene: SceneArgs,
    /// Target caustic (NSFC1)
    #[arg(long, value_name = "FILE")]
    pub target: PathBuf,
    /// nsfc or classical
    #[arg(long, default_value = "nsfc")]
    pub method: String,
    #[command(flatten)]
    pub run: MethodArgs,
    /// Initial height field (default: flat)
    #[arg(long, value_name = "FILE")]
    pub init: Option<PathBuf>,
    /// Ground-truth height field for error metrics
    #[arg(long, value_name = "FILE")]
    pub truth: Option<PathBuf>,
    /// Texels per side of the flat initial field (default: sensor resolution)
    #[arg(long)]
    pub field_res: Option<usize>,
    /// Output directory
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct EvaluateArgs {
    /// Test set directory
    #[arg(long, value_name = "DIR")]
    pub test: PathBuf,
    /// Comma-separated methods
    #[arg(long, default_value = "nsfc,classical")]
    pub methods: String,
    #[command(flatten)]
    pub run: MethodArgs,
    /// Grid-search the classical step and threshold on the first sample
    #[arg(long)]
    pub tune: bool,
    /// Light paths per rendering during reconstruction (default: the test set's low quality)
    #[arg(long)]
    pub n_l: Option<usize>,
    /// Output CSV report
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct Toy2dArgs {
    #[arg(long, default_value_t = 1000)]
    pub steps: usize,
    /// Profile samples
    #[arg(long, default_value_t = 64)]
    pub samples: usize,
    /// Output directory
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ConvertArgs {
    /// Input (.nsfc or .png)
    pub input: PathBuf,
    /// Output (.png, .csv or .nsfc)
    pub output: PathBuf,
    /// PNG brightness in stops
    #[arg(long, default_value_t = 0.0)]
    pub exposure: f64,
    /// Scale NSFC1 values so the maximum maps to white
    #[arg(long)]
    pub normalize: bool,
}

/// Runs the command line and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match parse(args) {
        Ok(cli) => cli,
        Err(Parsed::Exit(code)) => return code,
        Err(Parsed::Failed(e)) => return report(&e),
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => report(&e),
    }
}

fn report(e: &Error) -> i32 {
    let msg = e.to_string().replace('\n', " ");
    eprintln!("error[{}]: {msg}", e.exit_code());
    e.exit_code()
}

enum Parsed {
    Exit(i32),
    Failed(Error),
}

fn subcommand_names() -> Vec<String> {
    Cli::command().get_subcommands().map(|s| s.get_name().to_string()).collect()
}

/// The clap command with repeated flags overriding earlier ones, which is
/// how config-file values yield to the command line.
pub fn command() -> clap::Command {
    let mut cmd = Cli::command().args_override_self(true);
    for name in subcommand_names() {
        cmd = cmd.mut_subcommand(name, |s| s.args_override_self(true));
    }
    cmd
}

fn parse(mut args: Vec<OsString>) -> std::result::Result<Cli, Parsed> {
    if let Some(path) = config_path(&args) {
        let text = crate::io::read_text(&path).map_err(Parsed::Failed)?;
        let names = subcommand_names();
        let at = args.iter().position(|a| a.to_str().is_some_and(|s| names.iter().any(|n| n == s)));
        if let Some(at) = at {
            let sub = args[at].to_string_lossy().into_owned();
            let extra = config_args(&text, &sub).map_err(Parsed::Failed)?;
            args.splice(at + 1..at + 1, extra);
        }
    }
    let matches: ArgMatches = match command().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            use clap::error::ErrorKind;
            return Err(match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    print!("{e}");
                    Parsed::Exit(0)
                }
                _ => {
                    let text = e.to_string();
                    let msg: Vec<&str> = text
                        .lines()
                        .map(str::trim)
                        .take_while(|l| !l.starts_with("Usage:"))
                        .filter(|l| !l.is_empty())
                        .collect();
                    Parsed::Failed(Error::InvalidArgument(msg.join(" ").trim_start_matches("error: ").to_string()))
                }
            });
        }
    };
    Cli::from_arg_matches(&matches).map_err(|e| Parsed::Failed(Error::InvalidArgument(e.to_string())))
}

fn config_path(args: &[OsString]) -> Option<PathBuf> {
    let mut it = args.iter();
    while let Some(a) = it.next() {
        let s = a.to_string_lossy();
        if s == "--config" {
            return it.next().map(PathBuf::from);
        }
        if let Some(rest) = s.strip_prefix("--config=") {
            return Some(PathBuf::from(rest));
        }
    }
    None
}

/// Turns `key=value` lines into flags for subcommand `sub`.
fn config_args(text: &str, sub: &str) -> Result<Vec<OsString>> {
    let cmd = command();
    let subcmd = cmd.find_subcommand(sub).expect("known subcommand");
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::InvalidArgument(format!("config line {}: expected key=value", lineno + 1)))?;
        let (key, value) = (key.trim(), value.trim());
        if key == "config" {
            return Err(Error::InvalidArgument("config files cannot include other config files".into()));
        }
        let arg = subcmd
            .get_arguments()
            .chain(cmd.get_arguments())
            .find(|a| a.get_long() == Some(key))
            .ok_or_else(|| Error::InvalidArgument(format!("unknown config key `{key}`")))?;
        if arg.get_action().takes_values() {
            out.push(format!("--{key}").into());
            out.push(value.into());
        } else {
            match value {
                "true" => out.push(format!("--{key}").into()),
                "false" => {}
                _ => return Err(Error::InvalidArgument(format!("config key `{key}` expects true or false"))),
            }
        }
    }
    Ok(out)
}

#[derive(Serialize)]
struct RunManifest<'a> {
    command: &'a str,
    version: &'a str,
    #[serde(flatten)]
    common: &'a Common,
    args: &'a Command,
    /// Settings after presets and overrides are applied.
    resolved: serde_json::Value,
}

fn write_run_manifest(cli: &Cli, path: &Path, resolved: serde_json::Value) -> Result<()> {
    let m = RunManifest {
        command: cli.command.name(),
        version: env!("CARGO_PKG_VERSION"),
        common: &cli.common,
        args: &cli.command,
        resolved,
    };
    let json = serde_json::to_string_pretty(&m).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    write_text(path, &(json + "\n"))
}

fn beside(file: &Path) -> PathBuf {
    let mut s = file.as_os_str().to_owned();
    s.push(".run.json");
    PathBuf::from(s)
}

fn execute(cli: &Cli) -> Result<()> {
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.common.threads {
        if n == 0 {
            return Err(Error::InvalidArgument("--threads must be at least 1".into()));
        }
        pool = pool.num_threads(n);
    }
    let pool = pool.build().map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    pool.install(|| dispatch(cli))
}

fn to_json<T: Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).expect("settings serialize")
}

fn dispatch(cli: &Cli) -> Result<()> {
    let seed = cli.common.seed;
    let (manifest_at, resolved) = match &cli.command {
        Command::GenDenoise(a) => {
            let cfg = a.gen.config(seed)?;
            let (pairs, m) = gen_denoise_pairs(&cfg, a.count)?;
            write_denoise_dataset(&pairs, &m, &a.gen.out)?;
            println!("wrote {} pairs to {}", pairs.len(), a.gen.out.display());
            (a.gen.out.join(RUN_MANIFEST), gen_json(&cfg))
        }
        Command::GenUpdater(a) => {
            let cfg = a.gen.config(seed)?;
            let den = a.denoiser.as_ref().map(|p| load_role(p, Role::Denoiser)).transpose()?;
            let gen = UpdaterGen { flat_fraction: a.flat_fraction };
            let (samples, m) = gen_updater_samples(&cfg, &gen, den.as_ref(), a.count)?;
            write_updater_dataset(&samples, &m, &a.gen.out)?;
            println!("wrote {} samples to {}", samples.len(), a.gen.out.display());
            (a.gen.out.join(RUN_MANIFEST), gen_json(&cfg))
        }
        Command::GenTest(a) => {
            let cfg = a.gen.config(seed)?;
            let (samples, m) = gen_test_samples(&cfg)?;
            write_test_set(&samples, &m, &a.gen.out)?;
            println!("wrote {} test samples to {}", samples.len(), a.gen.out.display());
            (a.gen.out.join(RUN_MANIFEST), gen_json(&cfg))
        }
        Command::TrainDenoiser(a) => {
            let (pairs, _) = datasets::load_denoise_dataset(&a.data)?;
            let pairs: Vec<_> = a.take(pairs).into_iter().map(|p| (p.low, p.high)).collect();
            let cfg = a.network_config(Role::Denoiser)?;
            let (net, rep) = train_denoiser(&pairs, &cfg, &a.options(), seed)?;
            finish_training(&net, &rep, seed, &a.out)?;
            (beside(&a.out), serde_json::json!({ "network": to_json(&cfg), "items": pairs.len() }))
        }
        Command::TrainUpdater(a) => {
            let (samples, m) = datasets::load_updater_dataset(&a.data)?;
            let examples = a.take(samples).iter().map(|s| s.example()).collect::<Result<Vec<_>>>()?;
            let cfg = a.network_config(Role::Updater)?;
            let (net, rep) = train_updater(&examples, m.scene.n_w(), &cfg, &a.options(), seed)?;
            finish_training(&net, &rep, seed, &a.out)?;
            (beside(&a.out), serde_json::json!({ "network": to_json(&cfg), "items": examples.len() }))
        }
        Command::Render(a) => {
            let scene = a.scene.resolve()?;
            let field = match &a.field {
                Some(p) => load_field(p, &scene)?,
                None => HeightField::new_flat(
                    a.field_res.unwrap_or(scene.sensor_res),
                    scene.substrate_extent,
                    scene.base_thickness,
                )?,
            };
            let opts = RenderOptions { deterministic: cli.common.deterministic };
            let (img, stats) = render_with(&field, &scene, seed, opts)?;
            finite(img.values(), "rendered caustic")?;
            img.to_grid().write(&a.out)?;
            if let Some(png) = &a.png {
                write_png(&img.to_grid(), 0.0, png)?;
            }
            for c in 0..img.channels() {
                println!(
                    "channel {c}: power {:.6e} W, balance error {:.2e}",
                    img.total_power(c),
                    stats.balance_error(c)
                );
            }
            (beside(&a.out), serde_json::json!({ "scene": to_json(&scene) }))
        }
        Command::Reconstruct(a) => {
            let resolved = run_reconstruct(a, seed)?;
            (a.out.join(RUN_MANIFEST), resolved)
        }
        Command::Evaluate(a) => {
            let resolved = run_evaluate(a, seed)?;
            (beside(&a.out), resolved)
        }
        Command::Toy2d(a) => {
            let demo = run_demo(a.steps, a.samples)?;
            write_demo_plots(&demo, &a.out)?;
            let mut csv = String::from("step,hausdorff\n");
            for (i, h) in demo.result.history.iter().enumerate() {
                csv.push_str(&format!("{i},{h}\n"));
            }
            write_text(a.out.join("history.csv"), &csv)?;
            println!(
                "hausdorff {:.5} -> {:.5} ({:.1}% reduction), l_rel {:.3} -> {:.3}",
                demo.initial_hausdorff,
                demo.final_hausdorff,
                100.0 * (1.0 - demo.final_hausdorff / demo.initial_hausdorff),
                demo.initial_l_rel,
                demo.final_l_rel
            );
            let summary = serde_json::json!({
                "initial_hausdorff": demo.initial_hausdorff,
                "final_hausdorff": demo.final_hausdorff,
                "initial_l_rel": demo.initial_l_rel,
                "final_l_rel": demo.final_l_rel,
            });
            (a.out.join(RUN_MANIFEST), summary)
        }
        Command::Convert(a) => {
            convert(a)?;
            (beside(&a.output), serde_json::Value::Null)
        }
    };
    write_run_manifest(cli, &manifest_at, resolved)
}

fn gen_json(cfg: &GenConfig) -> serde_json::Value {
    serde_json::json!({
        "scene": to_json(&cfg.scene),
        "field_res": cfg.field_res,
        "ranges": to_json(&cfg.ranges),
        "quality": to_json(&cfg.quality),
    })
}

fn finite(values: &[f64], what: &str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric(format!("{what} contains non-finite values")))
    }
}

fn finish_training(net: &Network, rep: &TrainReport, seed: u64, out: &Path) -> Result<()> {
    finite(net.params(), "trained weights")?;
    save_network(net, seed, rep.best_epoch, out)?;
    for (e, (t, v)) in rep.train_loss.iter().zip(&rep.validation_loss).enumerate() {
        println!("epoch {}: train {t:.6e} validation {v:.6e}", e + 1);
    }
    println!(
        "kept epoch {} (validation {:.6e}, initial {:.6e}); {} train / {} validation items",
        rep.best_epoch,
        rep.best_validation_loss(),
        rep.initial_validation_loss,
        rep.train_count,
        rep.validation_count
    );
    Ok(())
}

fn load_field(path: &Path, scene: &SceneParams) -> Result<HeightField> {
    HeightField::from_grid(&Grid::read(path)?, scene.substrate_extent, scene.base_thickness)
}

fn run_reconstruct(a: &ReconstructArgs, seed: u64) -> Result<serde_json::Value> {
    let scene = a.scene.resolve()?;
    let method = Method::parse(&a.method)?;
    let target = Irradiance::from_grid(&Grid::read(&a.target)?, scene.substrate_extent)?;
    let init = match &a.init {
        Some(p) => load_field(p, &scene)?,
        None => HeightField::new_flat(
            a.field_res.unwrap_or(scene.sensor_res),
            scene.substrate_extent,
            scene.base_thickness,
        )?,
    };
    let truth = a.truth.as_ref().map(|p| load_field(p, &scene)).transpose()?;
    let cfg = ReconstructConfig {
        classical: a.run.classical(),
        ablation: a.run.ablation(),
        ..ReconstructConfig::new(scene, method, a.run.iters, seed)
    };
    let (den, upd) = a.run.networks(method)?;
    let models = Models { denoiser: den.as_ref(), updater: upd.as_ref() };
    let rec = reconstruct(&target, &init, truth.as_ref(), &cfg, models)?;
    for (i, (f, e)) in rec.fields.iter().zip(&rec.caustics).enumerate() {
        finite(f.heights(), "height field")?;
        let dir = a.out.join(format!("iter_{i:03}"));
        f.to_grid().write(dir.join("field.nsfc"))?;
        e.to_grid().write(dir.join("caustic.nsfc"))?;
        write_png(&e.to_grid(), 0.0, dir.join("caustic.png"))?;
    }
    write_text(a.out.join("history.csv"), &history_csv(&rec.history))?;
    let mean = rec.step_seconds.iter().sum::<f64>() / rec.step_seconds.len().max(1) as f64;
    println!("{} iterations, {:.3} s per iteration", a.run.iters, mean);
    for h in &rec.history {
        match h.l_rel {
            Some(l) => println!("iter {}: l_irrad {:.6e} l_rel {l:.4}", h.iteration, h.l_irrad),
            None => println!("iter {}: l_irrad {:.6e}", h.iteration, h.l_irrad),
        }
    }
    Ok(serde_json::json!({ "scene": to_json(&cfg.scene), "classical": to_json(&cfg.classical) }))
}

fn run_evaluate(a: &EvaluateArgs, seed: u64) -> Result<serde_json::Value> {
    let (samples, manifest) = datasets::load_test_set(&a.test)?;
    if samples.is_empty() {
        return Err(Error::format(&a.test, "test set has no samples"));
    }
    let gen = config_from_manifest(&manifest);
    let scene = gen.scene.with_n_l(a.n_l.unwrap_or(gen.quality.low));
    let methods = a.methods.split(',').map(|m| Method::parse(m.trim())).collect::<Result<Vec<_>>>()?;
    let flat = HeightField::new_flat(gen.field_res, scene.substrate_extent, scene.base_thickness)?;
    let mut classical = a.run.classical();
    if a.tune && methods.contains(&Method::Classical) {
        let base = ReconstructConfig {
            classical,
            ..ReconstructConfig::new(scene.clone(), Method::Classical, a.run.iters, seed)
        };
        let s = &samples[0];
        let (best, score) =
            tune_classical(&s.target, &flat, &s.field, &base, &log_grid(1e-9, 1e-1, 2), &[0.0, 0.3], &[0.0])?;
        println!(
            "tuned classical step {:e} threshold {} on {} (min l_rel {score:.4})",
            best.step, best.threshold, s.name
        );
        classical = best;
    }
    let mut runs = Vec::new();
    for &method in &methods {
        let (den, upd) = a.run.networks(method)?;
        let models = Models { denoiser: den.as_ref(), updater: upd.as_ref() };
        for s in &samples {
            let cfg = ReconstructConfig {
                classical,
                ablation: a.run.ablation(),
                ..ReconstructConfig::new(scene.clone(), method, a.run.iters, seed)
            };
            let rec = reconstruct(&s.target, &flat, Some(&s.field), &cfg, models)?;
            runs.push(EvalRun { sample: s.name.clone(), method: method.name().to_string(), history: rec.history });
        }
    }
    let report = evaluate(&runs)?;
    for r in &report.averages {
        println!(
            "{} iteration {}: mean l_rel {:.4}, mean min l_rel {:.4}",
            r.method, r.iteration, r.l_rel, r.min_l_rel
        );
    }
    write_text(&a.out, &report.to_csv())?;
    Ok(serde_json::json!({ "scene": to_json(&scene), "classical": to_json(&classical) }))
}

fn extension(p: &Path) -> String {
    p.extension().and_then(|e| e.to_str()).unwrap_or("").to_ascii_lowercase()
}

fn convert(a: &ConvertArgs) -> Result<()> {
    let (from, to) = (extension(&a.input), extension(&a.output));
    match (from.as_str(), to.as_str()) {
        ("nsfc", "png") => {
            let g = Grid::read(&a.input)?;
            let mut exposure = a.exposure;
            if a.normalize {
                let max = g.data.iter().fold(0f32, |m, &v| m.max(v)) as f64;
                if max > 0.0 {
                    exposure -= max.log2();
                }
            }
            write_png(&g, exposure, &a.output)
        }
        ("nsfc", "csv") => Grid::read(&a.input)?.write_csv(&a.output),
        ("png", "nsfc") => read_png(&a.input, a.exposure)?.write(&a.output),
        _ => Err(Error::InvalidArgument(format!(
            "cannot convert .{from} to .{to} (supported: nsfc->png, nsfc->csv, png->nsfc)"
        ))),
    }
}
