use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::conv::{conv2d, conv2d_backward, ConvSpec};
use super::nonlin::{Nonlin, PRELU_INIT};
use super::tensor::Tensor;

/// Kernel size of the denoiser's head and tail blocks.
const HEAD_KERNEL: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Denoiser,
    Updater,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub learning_rate: f64,
    pub c_init: usize,
    pub nonlin: Nonlin,
    pub k_down: usize,
    pub k_up: usize,
    /// Channel multiplier per encoder stage.
    pub m_s: usize,
    /// Number of encoder stages.
    pub n_s: usize,
    /// Channel divisor of the updater's output blocks.
    pub m_dec: usize,
    pub k_dec: usize,
}

impl NetworkConfig {
    pub fn full_denoiser() -> Self {
        Self {
            learning_rate: 0.00151,
            c_init: 31,
            nonlin: Nonlin::Prelu,
            k_down: 5,
            k_up: 2,
            m_s: 2,
            n_s: 4,
            m_dec: 2,
            k_dec: 2,
        }
    }

    pub fn full_updater() -> Self {
        Self {
            learning_rate: 0.005155,
            c_init: 1,
            nonlin: Nonlin::Prelu,
            k_down: 9,
            k_up: 9,
            m_s: 8,
            n_s: 1,
            m_dec: 8,
            k_dec: 4,
        }
    }

    /// Denoiser sized for a single workstation.
    pub fn desk_denoiser() -> Self {
        Self { c_init: 8, ..Self::full_denoiser() }
    }

    /// Updater sized for a single workstation.
    pub fn desk_updater() -> Self {
        Self { m_s: 4, ..Self::full_updater() }
    }

    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, what: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::invalid(format!("network config: {what} out of range")))
            }
        };
        check(self.learning_rate > 0.0 && self.learning_rate.is_finite(), "learning_rate")?;
        check((1..=32).contains(&self.c_init), "c_init")?;
        check((2..=11).contains(&self.k_down), "k_down")?;
        check((2..=11).contains(&self.k_up), "k_up")?;
        check((1..=8).contains(&self.m_s), "m_s")?;
        check((1..=4).contains(&self.n_s), "n_s")?;
        check((2..=11).contains(&self.m_dec), "m_dec")?;
        check([2, 4, 8, 16].contains(&self.k_dec), "k_dec")
    }
}

#[derive(Debug, Clone)]
struct Block {
    spec: ConvSpec,
    weight: usize,
    bias: usize,
    act: Option<Nonlin>,
    slope: usize,
}

/// Intermediate values kept for the backward pass.
pub struct Trace {
    inputs: Vec<Tensor>,
    pre: Vec<Tensor>,
}

/// UNet-family convolutional network with parameters in one flat vector.
///
/// Block order: optional head, `n_s` stride-2 encoder convs, `n_s` decoder
/// convs (deepest first is `dec[n_s - 1]`), then the output blocks.
#[derive(Debug, Clone)]
pub struct Network {
    config: NetworkConfig,
    role: Role,
    in_channels: usize,
    blocks: Vec<Block>,
    has_head: bool,
    params: Vec<f64>,
}

impl Network {
    /// Builds a network with Kaiming-uniform weights and a zeroed final layer,
    /// so a fresh denoiser acts as the identity and a fresh updater returns 0.
    pub fn new(role: Role, config: NetworkConfig, in_channels: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if in_channels == 0 {
            return Err(Error::invalid("network needs at least one input channel"));
        }
        let mut blocks = Vec::new();
        let mut len = 0;
        let mut push = |spec: ConvSpec, act: Option<Nonlin>| {
            let weight = len;
            let bias = weight + spec.weight_len();
            let slope = bias + spec.out_ch;
            len = slope + act.map_or(0, Nonlin::param_count);
            blocks.push(Block { spec, weight, bias, act, slope });
        };
        let act = Some(config.nonlin);
        let (has_head, c0) = match role {
            Role::Denoiser => {
                push(ConvSpec::same(in_channels, config.c_init, HEAD_KERNEL, 1), act);
                (true, config.c_init)
            }
            Role::Updater => (false, in_channels),
        };
        let chans: Vec<usize> = (0..=config.n_s).map(|i| c0 * config.m_s.pow(i as u32)).collect();
        for i in 0..config.n_s {
            push(ConvSpec::same(chans[i], chans[i + 1], config.k_down, 2), act);
        }
        for i in 0..config.n_s {
            push(ConvSpec::same(chans[i + 1] + chans[i], chans[i], config.k_up, 1), act);
        }
        match role {
            Role::Denoiser => push(ConvSpec::same(c0, 1, HEAD_KERNEL, 1), None),
            Role::Updater => {
                let mut c = c0;
                loop {
                    let next = (c / config.m_dec).max(1);
                    push(ConvSpec::same(c, next, config.k_dec, 1), (next > 1).then_some(config.nonlin));
                    c = next;
                    if c == 1 {
                        break;
                    }
                }
            }
        }
        let mut net = Self { config, role, in_channels, blocks, has_head, params: vec![0.0; len] };
        net.initialize(seed);
        Ok(net)
    }

    pub fn denoiser(config: NetworkConfig, seed: u64) -> Result<Self> {
        Self::new(Role::Denoiser, config, 1, seed)
    }

    pub fn updater(config: NetworkConfig, n_wavelengths: usize, seed: u64) -> Result<Self> {
        Self::new(Role::Updater, config, 2 + 2 * n_wavelengths, seed)
    }

    fn initialize(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for b in &self.blocks {
            let fan_in = (b.spec.in_ch * b.spec.kernel * b.spec.kernel) as f64;
            let bound = (6.0 / fan_in).sqrt();
            for w in &mut self.params[b.weight..b.bias] {
                *w = rng.gen_range(-bound..bound);
            }
            if b.act == Some(Nonlin::Prelu) {
                self.params[b.slope] = PRELU_INIT;
            }
        }
        self.zero_final_layer();
    }

    pub fn zero_final_layer(&mut self) {
        let last = self.blocks.last().expect("network has blocks");
        let end = last.bias + last.spec.out_ch;
        self.params[last.weight..end].fill(0.0);
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn set_params(&mut self, params: Vec<f64>) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::shape(format!("{} parameters for a network with {}", params.len(), self.params.len())));
        }
        self.params = params;
        Ok(())
    }

    /// Minimum spatial divisor accepted by [`Network::forward`].
    pub fn divisor(&self) -> usize {
        1 << self.config.n_s
    }

    fn block_forward(&self, i: usize, x: &Tensor) -> Result<Tensor> {
        let b = &self.blocks[i];
        let pre = conv2d(x, &self.params[b.weight..b.bias], &self.params[b.bias..b.bias + b.spec.out_ch], &b.spec)?;
        Ok(match b.act {
            Some(a) => {
                let (c, h, w) = pre.shape();
                Tensor::from_vec(c, h, w, a.forward(pre.data(), self.params[b.slope]))?
            }
            None => pre,
        })
    }

    fn block_forward_traced(&self, i: usize, x: Tensor, trace: &mut Trace) -> Result<Tensor> {
        let b = &self.blocks[i];
        let pre = conv2d(&x, &self.params[b.weight..b.bias], &self.params[b.bias..b.bias + b.spec.out_ch], &b.spec)?;
        let out = match b.act {
            Some(a) => {
                let (c, h, w) = pre.shape();
                Tensor::from_vec(c, h, w, a.forward(pre.data(), self.params[b.slope]))?
            }
            None => pre.clone(),
        };
        trace.inputs[i] = x;
        trace.pre[i] = pre;
        Ok(out)
    }

    fn block_backward(&self, i: usize, trace: &Trace, dy: &Tensor, grads: &mut [f64]) -> Result<Tensor> {
        let b = &self.blocks[i];
        let pre = &trace.pre[i];
        let dpre = match b.act {
            Some(a) => {
                let (d, dslope) = a.backward(pre.data(), self.params[b.slope], dy.data());
                if a == Nonlin::Prelu {
                    grads[b.slope] += dslope;
                }
                let (c, h, w) = pre.shape();
                Tensor::from_vec(c, h, w, d)?
            }
            None => dy.clone(),
        };
        let (dx, dw, db) = conv2d_backward(&trace.inputs[i], &self.params[b.weight..b.bias], &b.spec, &dpre)?;
        for (g, d) in grads[b.weight..b.bias].iter_mut().zip(dw) {
            *g += d;
        }
        for (g, d) in grads[b.bias..b.bias + b.spec.out_ch].iter_mut().zip(db) {
            *g += d;
        }
        Ok(dx)
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.channels() != self.in_channels {
            return Err(Error::shape(format!(
                "network expects {} input channels, got {}",
                self.in_channels,
                x.channels()
            )));
        }
        let d = self.divisor();
        if x.height() % d != 0 || x.width() % d != 0 || x.height() == 0 || x.width() == 0 {
            return Err(Error::shape(format!("spatial size {}x{} is not divisible by {d}", x.height(), x.width())));
        }
        Ok(())
    }

    fn enc(&self, i: usize) -> usize {
        usize::from(self.has_head) + i
    }

    fn dec(&self, i: usize) -> usize {
        usize::from(self.has_head) + self.config.n_s + i
    }

    fn out_start(&self) -> usize {
        usize::from(self.has_head) + 2 * self.config.n_s
    }

    /// Runs the block stack (without the denoiser's global residual).
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let n_s = self.config.n_s;
        let x0 = if self.has_head { self.block_forward(0, x)? } else { x.clone() };
        let mut levels = vec![x0];
        for i in 0..n_s {
            let next = self.block_forward(self.enc(i), &levels[i])?;
            levels.push(next);
        }
        let mut cur = levels.pop().expect("bottom level");
        for i in (0..n_s).rev() {
            let cat = Tensor::concat(&[&cur.upsample2(), &levels[i]])?;
            cur = self.block_forward(self.dec(i), &cat)?;
        }
        for i in self.out_start()..self.blocks.len() {
            cur = self.block_forward(i, &cur)?;
        }
        Ok(cur)
    }

    /// Forward pass that records what [`Network::backward`] needs.
    pub fn forward_traced(&self, x: &Tensor) -> Result<(Tensor, Trace)> {
        self.check_input(x)?;
        let n = self.blocks.len();
        let mut trace = Trace { inputs: vec![Tensor::zeros(0, 0, 0); n], pre: vec![Tensor::zeros(0, 0, 0); n] };
        let n_s = self.config.n_s;
        let x0 = if self.has_head { self.block_forward_traced(0, x.clone(), &mut trace)? } else { x.clone() };
        let mut levels = vec![x0];
        for i in 0..n_s {
            let next = self.block_forward_traced(self.enc(i), levels[i].clone(), &mut trace)?;
            levels.push(next);
        }
        let mut cur = levels.pop().expect("bottom level");
        for i in (0..n_s).rev() {
            let cat = Tensor::concat(&[&cur.upsample2(), &levels[i]])?;
            cur = self.block_forward_traced(self.dec(i), cat, &mut trace)?;
        }
        for i in self.out_start()..n {
            cur = self.block_forward_traced(i, cur, &mut trace)?;
        }
        Ok((cur, trace))
    }

    /// Returns the input gradient and the parameter gradient.
    pub fn backward(&self, trace: &Trace, dy: &Tensor) -> Result<(Tensor, Vec<f64>)> {
        let mut grads = vec![0.0; self.params.len()];
        let n_s = self.config.n_s;
        let mut d = dy.clone();
        for i in (self.out_start()..self.blocks.len()).rev() {
            d = self.block_backward(i, trace, &d, &mut grads)?;
        }
        // d_levels[i] collects skip gradients for encoder level i
        let mut d_levels: Vec<Option<Tensor>> = vec![None; n_s + 1];
        for i in 0..n_s {
            let skip_ch = self.blocks[self.dec(i)].spec.out_ch;
            let dcat = self.block_backward(self.dec(i), trace, &d, &mut grads)?;
            let up_ch = dcat.channels() - skip_ch;
            let (dup, dskip) = dcat.split(up_ch);
            accumulate(&mut d_levels[i], dskip);
            d = dup.upsample2_backward();
        }
        accumulate(&mut d_levels[n_s], d);
        for i in (0..n_s).rev() {
            let dl = d_levels[i + 1].take().expect("level gradient");
            let dx = self.block_backward(self.enc(i), trace, &dl, &mut grads)?;
            accumulate(&mut d_levels[i], dx);
        }
        let mut dx = d_levels[0].take().expect("input gradient");
        if self.has_head {
            dx = self.block_backward(0, trace, &dx, &mut grads)?;
        }
        Ok((dx, grads))
    }

    /// Applies the network to each item. Items are independent, so the
    /// result equals running them one at a time.
    pub fn forward_batch(&self, xs: &[Tensor]) -> Result<Vec<Tensor>> {
        use rayon::prelude::*;
        xs.par_iter().map(|x| self.forward(x)).collect()
    }

    pub(crate) fn from_parts(role: Role, config: NetworkConfig, in_channels: usize, params: Vec<f64>) -> Result<Self> {
        let mut net = Self::new(role, config, in_channels, 0)?;
        net.set_params(params)?;
        Ok(net)
    }
}

fn accumulate(slot: &mut Option<Tensor>, t: Tensor) {
    match slot {
        Some(s) => s.add_assign(&t),
        None => *slot = Some(t),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(nonlin: Nonlin) -> NetworkConfig {
        NetworkConfig { learning_rate: 1e-3, c_init: 2, nonlin, k_down: 3, k_up: 2, m_s: 2, n_s: 2, m_dec: 2, k_dec: 2 }
    }

    fn conv_count(i: usize, o: usize, k: usize) -> usize {
        i * o * k * k + o
    }

    #[test]
    fn parameter_count_closed_form() {
        let cfg = NetworkConfig::full_denoiser();
        let net = Network::denoiser(cfg.clone(), 0).unwrap();
        let c: Vec<usize> = (0..=4).map(|i| 31 << i).collect();
        let mut want = conv_count(1, 31, 3) + 1 + conv_count(31, 1, 3);
        for i in 0..4 {
            want += conv_count(c[i], c[i + 1], 5) + 1;
            want += conv_count(c[i + 1] + c[i], c[i], 2) + 1;
        }
        assert_eq!(net.param_count(), want);

        let net = Network::updater(NetworkConfig::full_updater(), 3, 0).unwrap();
        // 8 -> 64 encoder, 72 -> 8 decoder, 8 -> 1 linear output
        let want = conv_count(8, 64, 9) + 1 + conv_count(72, 8, 9) + 1 + conv_count(8, 1, 4);
        assert_eq!(net.param_count(), want);

        let cfg = NetworkConfig { m_dec: 2, ..NetworkConfig::full_updater() };
        let net = Network::updater(cfg, 3, 0).unwrap();
        // output blocks 8 -> 4 -> 2 -> 1, the last without activation
        let want = conv_count(8, 64, 9)
            + 1
            + conv_count(72, 8, 9)
            + 1
            + conv_count(8, 4, 4)
            + 1
            + conv_count(4, 2, 4)
            + 1
            + conv_count(2, 1, 4);
        assert_eq!(net.param_count(), want);
    }

    #[test]
    fn shape_contract_and_zero_weights() {
        let net = Network::updater(small(Nonlin::Elu), 3, 1).unwrap();
        let x = Tensor::from_vec(8, 8, 12, (0..768).map(|i| (i as f64).sin()).collect()).unwrap();
        assert_eq!(net.forward(&x).unwrap().shape(), (1, 8, 12));
        let mut zero = net.clone();
        zero.params_mut().fill(0.0);
        assert!(zero.forward(&x).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(net.forward(&Tensor::zeros(8, 6, 8)).is_err());
        assert!(net.forward(&Tensor::zeros(7, 8, 8)).is_err());
    }

    #[test]
    fn fresh_networks_output_zero() {
        let x = Tensor::from_vec(1, 8, 8, (0..64).map(|i| (i as f64 * 0.3).cos()).collect()).unwrap();
        let net = Network::denoiser(small(Nonlin::Prelu), 3).unwrap();
        assert!(net.forward(&x).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn batch_matches_single() {
        let mut net = Network::denoiser(small(Nonlin::Selu), 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for p in net.params_mut() {
            *p += rng.gen_range(-0.1..0.1);
        }
        let xs: Vec<Tensor> =
            (0..3).map(|_| Tensor::from_vec(1, 8, 8, (0..64).map(|_| rng.gen()).collect()).unwrap()).collect();
        let batch = net.forward_batch(&xs).unwrap();
        for (x, y) in xs.iter().zip(&batch) {
            assert_eq!(&net.forward(x).unwrap(), y);
        }
    }

    #[test]
    fn config_ranges() {
        assert!(NetworkConfig::full_denoiser().validate().is_ok());
        assert!(NetworkConfig::desk_updater().validate().is_ok());
        let bad = NetworkConfig { k_dec: 3, ..NetworkConfig::full_updater() };
        assert!(bad.validate().is_err());
        let bad = NetworkConfig { n_s: 5, ..NetworkConfig::full_denoiser() };
        assert!(bad.validate().is_err());
    }
}
