use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sgd" => Ok(Self::Sgd),
            "adam" => Ok(Self::Adam),
            other => Err(Error::Config(format!("unknown optimizer {other:?}"))),
        }
    }
}

impl std::fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Sgd => "sgd",
            Self::Adam => "adam",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Adam,
            lr: 0.3,
        }
    }
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Per-parameter optimizer state; starts fresh for every local training call.
#[derive(Clone, Debug)]
pub enum Optimizer<S> {
    Sgd {
        lr: S,
    },
    Adam {
        lr: S,
        step: i32,
        first: Vec<S>,
        second: Vec<S>,
    },
}

impl<S: Scalar> Optimizer<S> {
    pub fn new(cfg: OptimizerConfig, n_params: usize) -> Result<Self> {
        if !(cfg.lr.is_finite() && cfg.lr > 0.0) {
            return Err(Error::invalid(format!("learning rate must be positive, got {}", cfg.lr)));
        }
        let lr = S::of(cfg.lr);
        Ok(match cfg.kind {
            OptimizerKind::Sgd => Self::Sgd { lr },
            OptimizerKind::Adam => Self::Adam {
                lr,
                step: 0,
                first: vec![S::zero(); n_params],
                second: vec![S::zero(); n_params],
            },
        })
    }

    pub fn step(&mut self, params: &mut [S], grad: &[S]) {
        debug_assert_eq!(params.len(), grad.len());
        match self {
            Self::Sgd { lr } => {
                for (p, &g) in params.iter_mut().zip(grad) {
                    *p -= *lr * g;
                }
            }
            Self::Adam {
                lr,
                step,
                first,
                second,
            } => {
                *step += 1;
                let (b1, b2) = (S::of(ADAM_BETA1), S::of(ADAM_BETA2));
                let c1 = S::one() - b1.powi(*step);
                let c2 = S::one() - b2.powi(*step);
                let eps = S::of(ADAM_EPS);
                for i in 0..params.len() {
                    let g = grad[i];
                    first[i] = b1 * first[i] + (S::one() - b1) * g;
                    second[i] = b2 * second[i] + (S::one() - b2) * g * g;
                    let m_hat = first[i] / c1;
                    let v_hat = second[i] / c2;
                    params[i] -= *lr * m_hat / (v_hat.sqrt() + eps);
                }
            }
        }
    }
}
