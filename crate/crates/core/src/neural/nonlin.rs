use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const SELU_LAMBDA: f64 = 1.050_700_987_355_480_5;
const SELU_ALPHA: f64 = 1.673_263_242_354_377_3;
/// Initial negative slope of PReLU units.
pub const PRELU_INIT: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Nonlin {
    Elu,
    Relu,
    Prelu,
    Selu,
}

impl Nonlin {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "elu" => Ok(Self::Elu),
            "relu" => Ok(Self::Relu),
            "prelu" => Ok(Self::Prelu),
            "selu" => Ok(Self::Selu),
            other => Err(Error::invalid(format!("unknown nonlinearity '{other}'"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Elu => "elu",
            Self::Relu => "relu",
            Self::Prelu => "prelu",
            Self::Selu => "selu",
        }
    }

    /// Number of trainable parameters per layer.
    pub fn param_count(self) -> usize {
        usize::from(self == Self::Prelu)
    }

    /// `slope` is only read for PReLU.
    pub fn apply(self, x: f64, slope: f64) -> f64 {
        match self {
            Self::Relu => x.max(0.0),
            Self::Elu => {
                if x > 0.0 {
                    x
                } else {
                    x.exp_m1()
                }
            }
            Self::Prelu => {
                if x > 0.0 {
                    x
                } else {
                    slope * x
                }
            }
            Self::Selu => SELU_LAMBDA * if x > 0.0 { x } else { SELU_ALPHA * x.exp_m1() },
        }
    }

    /// Derivative with respect to the input at pre-activation `x`.
    pub fn derivative(self, x: f64, slope: f64) -> f64 {
        match self {
            Self::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Self::Elu => {
                if x > 0.0 {
                    1.0
                } else {
                    x.exp()
                }
            }
            Self::Prelu => {
                if x > 0.0 {
                    1.0
                } else {
                    slope
                }
            }
            Self::Selu => SELU_LAMBDA * if x > 0.0 { 1.0 } else { SELU_ALPHA * x.exp() },
        }
    }

    pub fn forward(self, x: &[f64], slope: f64) -> Vec<f64> {
        x.iter().map(|&v| self.apply(v, slope)).collect()
    }

    /// Returns the input gradient and, for PReLU, the slope gradient.
    pub fn backward(self, x: &[f64], slope: f64, dy: &[f64]) -> (Vec<f64>, f64) {
        let dx = x.iter().zip(dy).map(|(&v, &g)| g * self.derivative(v, slope)).collect();
        let dslope = if self == Self::Prelu {
            x.iter().zip(dy).filter(|(v, _)| **v <= 0.0).map(|(v, g)| v * g).sum()
        } else {
            0.0
        };
        (dx, dslope)
    }
}
