use crate::error::{Error, Result};

/// Dense `channels x height x width` activations.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    c: usize,
    h: usize,
    w: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self { c, h, w, data: vec![0.0; c * h * w] }
    }

    pub fn from_vec(c: usize, h: usize, w: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != c * h * w {
            return Err(Error::shape(format!("{} values for a {c}x{h}x{w} tensor", data.len())));
        }
        Ok(Self { c, h, w, data })
    }

    pub fn channels(&self) -> usize {
        self.c
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.c, self.h, self.w)
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        &self.data[c * self.plane()..(c + 1) * self.plane()]
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Stacks tensors of equal spatial size along the channel axis.
    pub fn concat(parts: &[&Tensor]) -> Result<Tensor> {
        let (h, w) = (parts[0].h, parts[0].w);
        if parts.iter().any(|p| p.h != h || p.w != w) {
            return Err(Error::shape("concatenated tensors differ in spatial size"));
        }
        let c = parts.iter().map(|p| p.c).sum();
        let mut data = Vec::with_capacity(c * h * w);
        for p in parts {
            data.extend_from_slice(&p.data);
        }
        Ok(Tensor { c, h, w, data })
    }

    /// Splits off the first `at` channels.
    pub fn split(&self, at: usize) -> (Tensor, Tensor) {
        let cut = at * self.plane();
        (
            Tensor { c: at, h: self.h, w: self.w, data: self.data[..cut].to_vec() },
            Tensor { c: self.c - at, h: self.h, w: self.w, data: self.data[cut..].to_vec() },
        )
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample2(&self) -> Tensor {
        let (h2, w2) = (2 * self.h, 2 * self.w);
        let mut out = Tensor::zeros(self.c, h2, w2);
        for c in 0..self.c {
            for y in 0..h2 {
                for x in 0..w2 {
                    out.data[(c * h2 + y) * w2 + x] = self.data[(c * self.h + y / 2) * self.w + x / 2];
                }
            }
        }
        out
    }

    /// Adjoint of [`Tensor::upsample2`]: sums each 2x2 block.
    pub fn upsample2_backward(&self) -> Tensor {
        let (h, w) = (self.h / 2, self.w / 2);
        let mut out = Tensor::zeros(self.c, h, w);
        for c in 0..self.c {
            for y in 0..self.h {
                for x in 0..self.w {
                    out.data[(c * h + y / 2) * w + x / 2] += self.data[(c * self.h + y) * self.w + x];
                }
            }
        }
        out
    }
}
