//! Generation and storage of the denoising, updater and test datasets.
//!
//! A dataset is a directory holding `manifest.json` and one
//! `sample_%06d/` directory per sample with NSFC1 files inside. Every sample
//! is derived from the master seed and its index alone, so generation runs
//! in parallel and regenerating from a manifest reproduces the files bit for
//! bit.

use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heightfield::{
    handpicked_lines, perturb_line_field, sample_line_field, GrayPattern, HeightField, LineFieldRanges,
};
use crate::io::{read_text, write_text, Grid};
use crate::metrics::l_irrad_backward;
use crate::neural::{denoise, denoise_backward_identity, updater_features, Network, UpdaterExample};
use crate::render::{render, render_backward, Irradiance, SceneParams};
use crate::seed::{derive_seed, rng_for};

pub const MANIFEST: &str = "manifest.json";

/// Ratio between the HIGH and LOW light-path presets.
pub const QUALITY_RATIO: usize = 16;

/// Light-path counts of the low and high quality renderings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Quality {
    pub low: usize,
    pub high: usize,
}

impl Quality {
    pub fn desk() -> Self {
        Self { low: 10_000, high: 10_000 * QUALITY_RATIO }
    }

    pub fn full() -> Self {
        Self { low: 1_000_000, high: 1_000_000 * QUALITY_RATIO }
    }
}

/// Grayscale test fields are scaled to the tallest line height.
pub const GRAYSCALE_SCALE: f64 = 2e-3;
const GRAYSCALE_SOURCE_RES: usize = 256;
/// Line-count range of the random test samples.
pub const TEST_LINES: (usize, usize) = (5, 30);
/// Seed-path tag separating test samples from training samples.
const TEST_TAG: u64 = 0x7e57;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Denoise,
    Updater,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub dir: String,
    pub name: String,
    /// Render seeds in file order (low/high, source/target, or target).
    pub render_seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub kind: DatasetKind,
    pub version: String,
    pub seed: u64,
    pub field_res: usize,
    pub scene: SceneParams,
    pub ranges: LineFieldRanges,
    pub quality: Quality,
    /// Updater datasets: share of samples that start from a flat field.
    #[serde(default)]
    pub flat_fraction: f64,
    /// Updater datasets: whether stored caustics went through the denoiser.
    #[serde(default)]
    pub denoised: bool,
    pub samples: Vec<SampleMeta>,
}

impl Manifest {
    pub fn write(&self, dir: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        write_text(dir.join(MANIFEST), &(text + "\n"))
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let text = read_text(&path)?;
        serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))
    }

    fn expect_kind(&self, kind: DatasetKind, dir: &Path) -> Result<()> {
        if self.kind != kind {
            return Err(Error::format(
                dir.join(MANIFEST),
                format!("expected a {kind:?} dataset, found {:?}", self.kind),
            ));
        }
        Ok(())
    }
}

/// Common generation settings.
#[derive(Debug, Clone, PartialEq)]
pub struct GenConfig {
    pub scene: SceneParams,
    pub field_res: usize,
    pub ranges: LineFieldRanges,
    pub quality: Quality,
    pub seed: u64,
}

impl GenConfig {
    pub fn desk(seed: u64) -> Self {
        let scene = SceneParams::desk();
        Self { field_res: scene.sensor_res, scene, ranges: LineFieldRanges::default(), quality: Quality::desk(), seed }
    }

    fn manifest(&self, kind: DatasetKind, samples: Vec<SampleMeta>) -> Manifest {
        Manifest {
            kind,
            version: env!("CARGO_PKG_VERSION").into(),
            seed: self.seed,
            field_res: self.field_res,
            scene: self.scene.clone(),
            ranges: self.ranges.clone(),
            quality: self.quality,
            flat_fraction: 0.0,
            denoised: false,
            samples,
        }
    }

    fn flat(&self) -> Result<HeightField> {
        HeightField::new_flat(self.field_res, self.scene.substrate_extent, self.scene.base_thickness)
    }

    fn line_field(&self, rng: &mut impl Rng) -> Result<(HeightField, Vec<crate::LineSpec>)> {
        let (f, lines) = sample_line_field(
            rng,
            &self.ranges,
            self.field_res,
            self.scene.substrate_extent,
            self.scene.base_thickness,
        )?;
        Ok((f.quantized(), lines))
    }
}

pub fn sample_dir(index: usize) -> String {
    format!("sample_{index:06}")
}

fn write_grid(dir: &Path, name: &str, grid: &Grid) -> Result<()> {
    grid.write(dir.join(format!("{name}.nsfc")))
}

fn read_grid(dir: &Path, name: &str) -> Result<Grid> {
    Grid::read(dir.join(format!("{name}.nsfc")))
}

fn read_field(dir: &Path, name: &str, m: &Manifest) -> Result<HeightField> {
    HeightField::from_grid(&read_grid(dir, name)?, m.scene.substrate_extent, m.scene.base_thickness)
}

fn read_irradiance(dir: &Path, name: &str, m: &Manifest) -> Result<Irradiance> {
    Irradiance::from_grid(&read_grid(dir, name)?, m.scene.substrate_extent)
}

fn check_count(count: usize) -> Result<()> {
    if count == 0 {
        return Err(Error::invalid("sample count must be at least 1"));
    }
    Ok(())
}

// ---------------------------------------------------------------- denoise

#[derive(Debug, Clone, PartialEq)]
pub struct DenoisePair {
    pub field: HeightField,
    pub low: Irradiance,
    pub high: Irradiance,
}

/// Builds denoising pair `index`: one random line field rendered at both
/// quality presets with independent seeds.
pub fn make_denoise_pair(cfg: &GenConfig, index: usize) -> Result<(DenoisePair, SampleMeta)> {
    let mut rng = rng_for(cfg.seed, &[index as u64, 0]);
    let (field, _) = cfg.line_field(&mut rng)?;
    let seeds = [derive_seed(cfg.seed, &[index as u64, 1]), derive_seed(cfg.seed, &[index as u64, 2])];
    let low = render(&field, &cfg.scene.with_n_l(cfg.quality.low), seeds[0])?.quantized();
    let high = render(&field, &cfg.scene.with_n_l(cfg.quality.high), seeds[1])?.quantized();
    let meta = SampleMeta { dir: sample_dir(index), name: format!("pair {index}"), render_seeds: seeds.to_vec() };
    Ok((DenoisePair { field, low, high }, meta))
}

pub fn gen_denoise_pairs(cfg: &GenConfig, count: usize) -> Result<(Vec<DenoisePair>, Manifest)> {
    check_count(count)?;
    let made = (0..count).into_par_iter().map(|i| make_denoise_pair(cfg, i)).collect::<Result<Vec<_>>>()?;
    let (pairs, metas) = made.into_iter().unzip();
    Ok((pairs, cfg.manifest(DatasetKind::Denoise, metas)))
}

pub fn write_denoise_dataset(pairs: &[DenoisePair], manifest: &Manifest, out: &Path) -> Result<()> {
    for (p, meta) in pairs.iter().zip(&manifest.samples) {
        let dir = out.join(&meta.dir);
        write_grid(&dir, "field", &p.field.to_grid())?;
        write_grid(&dir, "low", &p.low.to_grid())?;
        write_grid(&dir, "high", &p.high.to_grid())?;
    }
    manifest.write(out)
}

pub fn gen_denoise_dataset(cfg: &GenConfig, count: usize, out: &Path) -> Result<Manifest> {
    let (pairs, manifest) = gen_denoise_pairs(cfg, count)?;
    write_denoise_dataset(&pairs, &manifest, out)?;
    Ok(manifest)
}

pub fn load_denoise_dataset(dir: &Path) -> Result<(Vec<DenoisePair>, Manifest)> {
    let m = Manifest::read(dir)?;
    m.expect_kind(DatasetKind::Denoise, dir)?;
    let pairs = m
        .samples
        .iter()
        .map(|s| {
            let d = dir.join(&s.dir);
            Ok(DenoisePair {
                field: read_field(&d, "field", &m)?,
                low: read_irradiance(&d, "low", &m)?,
                high: read_irradiance(&d, "high", &m)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((pairs, m))
}

// ---------------------------------------------------------------- updater

#[derive(Debug, Clone, PartialEq)]
pub struct UpdaterSample {
    pub source: HeightField,
    pub target: HeightField,
    /// Gradient of the irradiance loss with respect to the source heights.
    pub grad: Vec<f64>,
    pub e_source: Irradiance,
    pub e_target: Irradiance,
}

impl UpdaterSample {
    /// Network input and regression target for this sample.
    pub fn example(&self) -> Result<UpdaterExample> {
        Ok(UpdaterExample {
            features: updater_features(&self.source, &self.grad, &self.e_source, &self.e_target)?,
            target: self.target.heights().to_vec(),
        })
    }
}

/// Settings specific to updater datasets.
#[derive(Debug, Clone, PartialEq)]
pub struct UpdaterGen {
    /// Share of samples whose source is a flat field and whose target is a
    /// fresh random layout; the rest perturb a random source layout.
    pub flat_fraction: f64,
}

impl Default for UpdaterGen {
    fn default() -> Self {
        Self { flat_fraction: 0.25 }
    }
}

/// Renders `field` at the LOW preset and optionally denoises it.
fn observed(field: &HeightField, cfg: &GenConfig, seed: u64, denoiser: Option<&Network>) -> Result<Irradiance> {
    let raw = render(field, &cfg.scene.with_n_l(cfg.quality.low), seed)?;
    Ok(match denoiser {
        Some(net) => denoise(net, &raw)?,
        None => raw,
    }
    .quantized())
}

/// Gradient of `l_irrad(D(R(source)), e_target)` through the identity
/// denoiser rule.
pub fn updater_gradient(
    source: &HeightField,
    e_source: &Irradiance,
    e_target: &Irradiance,
    cfg: &GenConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    let dl_de = denoise_backward_identity(l_irrad_backward(e_source, e_target)?);
    render_backward(source, &cfg.scene.with_n_l(cfg.quality.low), seed, &dl_de)
}

/// Builds updater sample `index`. Without a denoiser the stored caustics are
/// the raw renderings.
pub fn make_updater_sample(
    cfg: &GenConfig,
    gen: &UpdaterGen,
    denoiser: Option<&Network>,
    index: usize,
) -> Result<(UpdaterSample, SampleMeta)> {
    let mut rng = rng_for(cfg.seed, &[index as u64, 0]);
    let flat = rng.gen::<f64>() < gen.flat_fraction;
    let (source, target) = if flat {
        (cfg.flat()?, cfg.line_field(&mut rng)?.0)
    } else {
        let (source, lines) = cfg.line_field(&mut rng)?;
        let (target, _) = perturb_line_field(
            &lines,
            &mut rng,
            &cfg.ranges,
            cfg.field_res,
            cfg.scene.substrate_extent,
            cfg.scene.base_thickness,
        )?;
        (source, target.quantized())
    };
    let seeds = [derive_seed(cfg.seed, &[index as u64, 1]), derive_seed(cfg.seed, &[index as u64, 2])];
    let e_source = observed(&source, cfg, seeds[0], denoiser)?;
    let e_target = observed(&target, cfg, seeds[1], denoiser)?;
    let grad = updater_gradient(&source, &e_source, &e_target, cfg, seeds[0])?;
    let name = if flat { format!("flat {index}") } else { format!("perturbed {index}") };
    let meta = SampleMeta { dir: sample_dir(index), name, render_seeds: seeds.to_vec() };
    Ok((UpdaterSample { source, target, grad, e_source, e_target }, meta))
}

pub fn gen_updater_samples(
    cfg: &GenConfig,
    gen: &UpdaterGen,
    denoiser: Option<&Network>,
    count: usize,
) -> Result<(Vec<UpdaterSample>, Manifest)> {
    check_count(count)?;
    if !(0.0..=1.0).contains(&gen.flat_fraction) {
        return Err(Error::invalid("flat fraction must lie in [0, 1]"));
    }
    let made =
        (0..count).into_par_iter().map(|i| make_updater_sample(cfg, gen, denoiser, i)).collect::<Result<Vec<_>>>()?;
    let (samples, metas) = made.into_iter().unzip();
    let mut manifest = cfg.manifest(DatasetKind::Updater, metas);
    manifest.flat_fraction = gen.flat_fraction;
    manifest.denoised = denoiser.is_some();
    Ok((samples, manifest))
}

pub fn write_updater_dataset(samples: &[UpdaterSample], manifest: &Manifest, out: &Path) -> Result<()> {
    for (s, meta) in samples.iter().zip(&manifest.samples) {
        let dir = out.join(&meta.dir);
        let n = s.source.n();
        write_grid(&dir, "source", &s.source.to_grid())?;
        write_grid(&dir, "target", &s.target.to_grid())?;
        write_grid(&dir, "grad", &Grid::from_f64(1, n, n, &s.grad)?)?;
        write_grid(&dir, "e_source", &s.e_source.to_grid())?;
        write_grid(&dir, "e_target", &s.e_target.to_grid())?;
    }
    manifest.write(out)
}

pub fn gen_updater_dataset(
    cfg: &GenConfig,
    gen: &UpdaterGen,
    denoiser: Option<&Network>,
    count: usize,
    out: &Path,
) -> Result<Manifest> {
    let (samples, manifest) = gen_updater_samples(cfg, gen, denoiser, count)?;
    write_updater_dataset(&samples, &manifest, out)?;
    Ok(manifest)
}

pub fn load_updater_dataset(dir: &Path) -> Result<(Vec<UpdaterSample>, Manifest)> {
    let m = Manifest::read(dir)?;
    m.expect_kind(DatasetKind::Updater, dir)?;
    let samples = m
        .samples
        .iter()
        .map(|s| {
            let d = dir.join(&s.dir);
            Ok(UpdaterSample {
                source: read_field(&d, "source", &m)?,
                target: read_field(&d, "target", &m)?,
                grad: read_grid(&d, "grad")?.to_f64(),
                e_source: read_irradiance(&d, "e_source", &m)?,
                e_target: read_irradiance(&d, "e_target", &m)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((samples, m))
}

// ---------------------------------------------------------------- test set

#[derive(Debug, Clone, PartialEq)]
pub struct TestSample {
    pub name: String,
    pub field: HeightField,
    /// Target caustic rendered at the HIGH preset.
    pub target: Irradiance,
}

/// The ten evaluation fields: the hand-picked layout, six random layouts
/// with 5 to 30 lines and three grayscale patterns.
pub fn test_fields(cfg: &GenConfig) -> Result<Vec<(String, HeightField)>> {
    let (n, ext, d) = (cfg.field_res, cfg.scene.substrate_extent, cfg.scene.base_thickness);
    let mut out =
        vec![("handpicked".to_string(), HeightField::from_lines(n, ext, d, &handpicked_lines())?.quantized())];
    let ranges = LineFieldRanges { n_lines: TEST_LINES, ..cfg.ranges.clone() };
    for i in 0..6u64 {
        let mut rng = rng_for(cfg.seed, &[TEST_TAG, i]);
        let (f, lines) = sample_line_field(&mut rng, &ranges, n, ext, d)?;
        out.push((format!("random{} ({} lines)", i + 1, lines.len()), f.quantized()));
    }
    for p in GrayPattern::ALL {
        let r = GRAYSCALE_SOURCE_RES;
        let f = HeightField::from_grayscale(&p.render(r), r, r, GRAYSCALE_SCALE, n, ext, d)?;
        out.push((format!("{p:?}").to_lowercase(), f.quantized()));
    }
    Ok(out)
}

pub fn gen_test_samples(cfg: &GenConfig) -> Result<(Vec<TestSample>, Manifest)> {
    let fields = test_fields(cfg)?;
    let scene = cfg.scene.with_n_l(cfg.quality.high);
    let made = fields
        .into_par_iter()
        .enumerate()
        .map(|(i, (name, field))| {
            let seed = derive_seed(cfg.seed, &[TEST_TAG, 100 + i as u64]);
            let target = render(&field, &scene, seed)?.quantized();
            let meta = SampleMeta { dir: sample_dir(i), name: name.clone(), render_seeds: vec![seed] };
            Ok((TestSample { name, field, target }, meta))
        })
        .collect::<Result<Vec<_>>>()?;
    let (samples, metas) = made.into_iter().unzip();
    Ok((samples, cfg.manifest(DatasetKind::Test, metas)))
}

pub fn write_test_set(samples: &[TestSample], manifest: &Manifest, out: &Path) -> Result<()> {
    for (s, meta) in samples.iter().zip(&manifest.samples) {
        let dir = out.join(&meta.dir);
        write_grid(&dir, "field", &s.field.to_grid())?;
        write_grid(&dir, "target", &s.target.to_grid())?;
    }
    manifest.write(out)
}

pub fn gen_test_set(cfg: &GenConfig, out: &Path) -> Result<Manifest> {
    let (samples, manifest) = gen_test_samples(cfg)?;
    write_test_set(&samples, &manifest, out)?;
    Ok(manifest)
}

pub fn load_test_set(dir: &Path) -> Result<(Vec<TestSample>, Manifest)> {
    let m = Manifest::read(dir)?;
    m.expect_kind(DatasetKind::Test, dir)?;
    let samples = m
        .samples
        .iter()
        .map(|s| {
            let d = dir.join(&s.dir);
            Ok(TestSample {
                name: s.name.clone(),
                field: read_field(&d, "field", &m)?,
                target: read_irradiance(&d, "target", &m)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((samples, m))
}

/// Rebuilds the generation settings recorded in a manifest.
pub fn config_from_manifest(m: &Manifest) -> GenConfig {
    GenConfig {
        scene: m.scene.clone(),
        field_res: m.field_res,
        ranges: m.ranges.clone(),
        quality: m.quality,
        seed: m.seed,
    }
}

/// Paths of all NSFC1 files inside a dataset, in manifest order.
pub fn dataset_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let m = Manifest::read(dir)?;
    let names: &[&str] = match m.kind {
        DatasetKind::Denoise => &["field", "low", "high"],
        DatasetKind::Updater => &["source", "target", "grad", "e_source", "e_target"],
        DatasetKind::Test => &["field", "target"],
    };
    Ok(m.samples.iter().flat_map(|s| names.iter().map(move |n| dir.join(&s.dir).join(format!("{n}.nsfc")))).collect())
}
