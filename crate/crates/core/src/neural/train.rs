//! Mini-batch Adam training with a 90/10 train/validation split, early
//! stopping and best-on-validation weight selection.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::render::Irradiance;

use super::adam::{adam_step, AdamState};
use super::network::{Network, NetworkConfig};
use super::tensor::Tensor;
use super::{denoise_log, HEIGHT_SCALE};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub validation_fraction: f64,
    /// Overrides the configured learning rate.
    pub learning_rate: Option<f64>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self { epochs: 30, batch_size: 8, patience: 3, validation_fraction: 0.1, learning_rate: None }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainReport {
    pub initial_validation_loss: f64,
    pub train_loss: Vec<f64>,
    pub validation_loss: Vec<f64>,
    /// 1-based epoch of the returned weights; 0 means the initial weights.
    pub best_epoch: usize,
    pub train_count: usize,
    pub validation_count: usize,
}

impl TrainReport {
    pub fn best_validation_loss(&self) -> f64 {
        if self.best_epoch == 0 {
            self.initial_validation_loss
        } else {
            self.validation_loss[self.best_epoch - 1]
        }
    }
}

/// One denoiser training item: a single channel in `log1p` domain.
#[derive(Debug, Clone)]
pub struct DenoiseExample {
    pub input: Tensor,
    pub target: Tensor,
}

impl DenoiseExample {
    /// Splits a low/high pair into per-channel examples.
    pub fn from_pair(low: &Irradiance, high: &Irradiance) -> Result<Vec<Self>> {
        if !low.same_shape(high) {
            return Err(Error::shape("low and high caustics differ in shape"));
        }
        let m = low.res();
        (0..low.channels())
            .map(|c| {
                let lift = |e: &Irradiance| Tensor::from_vec(1, m, m, e.channel(c).iter().map(|v| v.ln_1p()).collect());
                Ok(Self { input: lift(low)?, target: lift(high)? })
            })
            .collect()
    }
}

/// One updater training item.
#[derive(Debug, Clone)]
pub struct UpdaterExample {
    /// Output of [`super::updater_features`].
    pub features: Tensor,
    /// Target heights in metres.
    pub target: Vec<f64>,
}

impl UpdaterExample {
    fn source_scaled(&self) -> &[f64] {
        self.features.channel(0)
    }
}

fn sq_error(pred: &[f64], target: &[f64]) -> (f64, Vec<f64>) {
    let inv = 1.0 / pred.len() as f64;
    let mut loss = 0.0;
    let grad = pred
        .iter()
        .zip(target)
        .map(|(p, t)| {
            let d = p - t;
            loss += d * d;
            2.0 * d * inv
        })
        .collect();
    (loss * inv, grad)
}

fn denoise_loss(net: &Network, ex: &DenoiseExample, want_grad: bool) -> Result<(f64, Option<Vec<f64>>)> {
    if !want_grad {
        let y = denoise_log(net, &ex.input)?;
        return Ok((sq_error(y.data(), ex.target.data()).0, None));
    }
    let (mut y, trace) = net.forward_traced(&ex.input)?;
    y.add_assign(&ex.input);
    let (loss, dy) = sq_error(y.data(), ex.target.data());
    let (c, h, w) = y.shape();
    let (_, grads) = net.backward(&trace, &Tensor::from_vec(c, h, w, dy)?)?;
    Ok((loss, Some(grads)))
}

fn updater_loss(net: &Network, ex: &UpdaterExample, want_grad: bool) -> Result<(f64, Option<Vec<f64>>)> {
    let target: Vec<f64> = ex.target.iter().map(|t| t * HEIGHT_SCALE).collect();
    let step = |delta: &[f64]| -> Vec<f64> { ex.source_scaled().iter().zip(delta).map(|(x, d)| x - d).collect() };
    if !want_grad {
        let delta = net.forward(&ex.features)?;
        return Ok((sq_error(&step(delta.data()), &target).0, None));
    }
    let (delta, trace) = net.forward_traced(&ex.features)?;
    let (loss, dnext) = sq_error(&step(delta.data()), &target);
    let (c, h, w) = delta.shape();
    let ddelta = Tensor::from_vec(c, h, w, dnext.iter().map(|g| -g).collect())?;
    let (_, grads) = net.backward(&trace, &ddelta)?;
    Ok((loss, Some(grads)))
}

/// Shuffled split of `0..n` into (train, validation) index sets.
fn split(n: usize, fraction: f64, rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    if n < 2 {
        return (idx.clone(), idx);
    }
    let n_val = ((n as f64 * fraction).round() as usize).clamp(1, n - 1);
    let val = idx[..n_val].to_vec();
    (idx[n_val..].to_vec(), val)
}

fn mean_loss<E, F>(net: &Network, items: &[&E], loss: &F) -> Result<f64>
where
    E: Sync,
    F: Fn(&Network, &E, bool) -> Result<(f64, Option<Vec<f64>>)> + Sync,
{
    let losses = items.par_iter().map(|e| loss(net, e, false).map(|r| r.0)).collect::<Result<Vec<_>>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len().max(1) as f64)
}

fn fit<E, F>(
    mut net: Network,
    train: Vec<&E>,
    val: Vec<&E>,
    opts: &TrainOptions,
    seed: u64,
    loss: F,
) -> Result<(Network, TrainReport)>
where
    E: Sync,
    F: Fn(&Network, &E, bool) -> Result<(f64, Option<Vec<f64>>)> + Sync,
{
    if opts.batch_size == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    let lr = opts.learning_rate.unwrap_or(net.config().learning_rate);
    let mut report = TrainReport {
        initial_validation_loss: mean_loss(&net, &val, &loss)?,
        train_count: train.len(),
        validation_count: val.len(),
        ..TrainReport::default()
    };
    let mut best = net.params().to_vec();
    let mut best_loss = report.initial_validation_loss;
    let mut adam = AdamState::new(net.param_count());
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut stale = 0;
    for epoch in 0..opts.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(epoch as u64 + 1);
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(opts.batch_size) {
            let results = chunk.par_iter().map(|&i| loss(&net, train[i], true)).collect::<Result<Vec<_>>>()?;
            // fixed-order reduction keeps training independent of thread count
            let mut grads = vec![0.0; net.param_count()];
            let inv = 1.0 / chunk.len() as f64;
            for (l, g) in results {
                epoch_loss += l;
                for (acc, v) in grads.iter_mut().zip(g.expect("gradient requested")) {
                    *acc += v * inv;
                }
            }
            adam_step(net.params_mut(), &grads, &mut adam, lr)?;
        }
        if !net.params().iter().all(|p| p.is_finite()) {
            return Err(Error::Numeric(format!("training diverged in epoch {}", epoch + 1)));
        }
        report.train_loss.push(epoch_loss / train.len() as f64);
        let v = mean_loss(&net, &val, &loss)?;
        report.validation_loss.push(v);
        if v < best_loss {
            best_loss = v;
            best = net.params().to_vec();
            report.best_epoch = epoch + 1;
            stale = 0;
        } else {
            stale += 1;
            if stale >= opts.patience {
                break;
            }
        }
    }
    // weights are stored as f32; keep the in-memory network identical
    net.set_params(best.iter().map(|&p| p as f32 as f64).collect())?;
    Ok((net, report))
}

/// Trains a denoiser on low/high caustic pairs. The split is made per pair so
/// channels of one rendering never straddle train and validation.
pub fn train_denoiser(
    pairs: &[(Irradiance, Irradiance)],
    config: &NetworkConfig,
    opts: &TrainOptions,
    seed: u64,
) -> Result<(Network, TrainReport)> {
    if pairs.is_empty() {
        return Err(Error::invalid("denoiser training needs at least one pair"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (train_idx, val_idx) = split(pairs.len(), opts.validation_fraction, &mut rng);
    let per_pair = pairs.iter().map(|(lo, hi)| DenoiseExample::from_pair(lo, hi)).collect::<Result<Vec<_>>>()?;
    let gather = |idx: &[usize]| idx.iter().flat_map(|&i| per_pair[i].iter()).collect::<Vec<_>>();
    let net = Network::denoiser(config.clone(), seed)?;
    fit(net, gather(&train_idx), gather(&val_idx), opts, seed, denoise_loss)
}

/// Trains an updater point-wise: one step from the source should land on the
/// target field.
pub fn train_updater(
    examples: &[UpdaterExample],
    n_wavelengths: usize,
    config: &NetworkConfig,
    opts: &TrainOptions,
    seed: u64,
) -> Result<(Network, TrainReport)> {
    if examples.is_empty() {
        return Err(Error::invalid("updater training needs at least one sample"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (train_idx, val_idx) = split(examples.len(), opts.validation_fraction, &mut rng);
    let net = Network::updater(config.clone(), n_wavelengths, seed)?;
    let gather = |idx: &[usize]| idx.iter().map(|&i| &examples[i]).collect::<Vec<_>>();
    fit(net, gather(&train_idx), gather(&val_idx), opts, seed, updater_loss)
}
