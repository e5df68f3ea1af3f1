//! Soft-prompt parameters and their checkpoint file.
//!
//! Checkpoint layout: `b"FPPT"`, version byte `1`, `m` and `d` as u32 LE,
//! then `m * d` f64 LE values row-major.

use std::fs;
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::derived_rng;
use crate::scalar::Scalar;
use crate::tensor::Matrix;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FPPT";
pub const CHECKPOINT_VERSION: u8 = 1;
const HEADER_LEN: usize = 4 + 1 + 4 + 4;

/// The `m x d` soft-prompt matrix: the only parameters that are trained or
/// communicated.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptTensor<S> {
    values: Matrix<S>,
}

impl<S: Scalar> PromptTensor<S> {
    pub fn zeros(m: usize, d: usize) -> Self {
        Self {
            values: Matrix::zeros(m, d),
        }
    }

    pub fn from_matrix(values: Matrix<S>) -> Result<Self> {
        if values.rows() == 0 || values.cols() == 0 {
            return Err(Error::invalid("prompt must have at least one row and column"));
        }
        if !values.is_finite() {
            return Err(Error::numerical("prompt contains non-finite values"));
        }
        Ok(Self { values })
    }

    pub fn from_vec(m: usize, d: usize, values: Vec<S>) -> Result<Self> {
        if values.len() != m * d {
            return Err(Error::ShapeMismatch(format!(
                "expected {} prompt values, got {}",
                m * d,
                values.len()
            )));
        }
        Self::from_matrix(Matrix::from_vec(m, d, values))
    }

    pub fn m(&self) -> usize {
        self.values.rows()
    }

    pub fn d(&self) -> usize {
        self.values.cols()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.values.shape()
    }

    pub fn len(&self) -> usize {
        self.values.as_slice().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn matrix(&self) -> &Matrix<S> {
        &self.values
    }

    pub fn as_slice(&self) -> &[S] {
        self.values.as_slice()
    }

    pub fn as_mut_slice(&mut self) -> &mut [S] {
        self.values.as_mut_slice()
    }

    pub fn row(&self, r: usize) -> &[S] {
        self.values.row(r)
    }

    pub fn l2_norm(&self) -> S {
        self.values.frobenius_norm()
    }

    pub fn is_finite(&self) -> bool {
        self.values.is_finite()
    }

    pub fn to_f64(&self) -> PromptTensor<f64> {
        PromptTensor {
            values: self.values.map(|x| x.as_f64()),
        }
    }

    pub fn from_f64(p: &PromptTensor<f64>) -> Self {
        Self {
            values: p.values.map(S::of),
        }
    }

    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.len() * 8);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.push(CHECKPOINT_VERSION);
        out.extend_from_slice(&(self.m() as u32).to_le_bytes());
        out.extend_from_slice(&(self.d() as u32).to_le_bytes());
        out.extend_from_slice(&self.values.to_le_f64_bytes());
        out
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |offset: usize, reason: &str| Error::MalformedFrame {
            offset,
            reason: reason.to_string(),
        };
        if bytes.len() < HEADER_LEN {
            return Err(bad(bytes.len(), "truncated checkpoint header"));
        }
        if &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(bad(0, "bad checkpoint magic"));
        }
        if bytes[4] != CHECKPOINT_VERSION {
            return Err(Error::UnsupportedVersion(bytes[4]));
        }
        let m = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
        let d = u32::from_le_bytes(bytes[9..13].try_into().unwrap()) as usize;
        let body = &bytes[HEADER_LEN..];
        if body.len() != m * d * 8 {
            return Err(bad(HEADER_LEN, "checkpoint body length does not match m*d"));
        }
        let values = body
            .chunks_exact(8)
            .map(|c| S::of(f64::from_le_bytes(c.try_into().unwrap())))
            .collect();
        Self::from_vec(m, d, values)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_checkpoint_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint_bytes(&fs::read(path)?)
    }
}

/// Entries drawn i.i.d. from Uniform(-0.5/sqrt(d), 0.5/sqrt(d)).
pub fn init_prompt<S: Scalar>(seed: u64, m: usize, d: usize) -> Result<PromptTensor<S>> {
    if m == 0 || d == 0 {
        return Err(Error::invalid("prompt dims must be positive"));
    }
    let half = 0.5 / (d as f64).sqrt();
    let mut rng = derived_rng(seed, "prompt", &[]);
    let values = (0..m * d)
        .map(|_| {
            // random::<f64>() is in [0, 1); map to the open interval.
            loop {
                let u: f64 = rng.random();
                if u > 0.0 {
                    break S::of((2.0 * u - 1.0) * half);
                }
            }
        })
        .collect();
    PromptTensor::from_vec(m, d, values)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic_and_bounded() {
        let a = init_prompt::<f64>(11, 20, 32).unwrap();
        assert_eq!(a, init_prompt::<f64>(11, 20, 32).unwrap());
        assert_eq!(a.len(), 640);
        let half = 0.5 / 32f64.sqrt();
        assert!(a.as_slice().iter().all(|&x| x > -half && x < half));
    }

    #[test]
    fn checkpoint_layout() {
        let p = PromptTensor::<f64>::from_vec(1, 2, vec![1.5, -2.0]).unwrap();
        let bytes = p.to_checkpoint_bytes();
        assert_eq!(&bytes[..5], b"FPPT\x01");
        assert_eq!(&bytes[5..13], &[1, 0, 0, 0, 2, 0, 0, 0]);
        assert_eq!(&bytes[13..21], &1.5f64.to_le_bytes());
        assert_eq!(bytes.len(), 13 + 16);
        assert_eq!(PromptTensor::<f64>::from_checkpoint_bytes(&bytes).unwrap(), p);
    }

    #[test]
    fn checkpoint_rejects_garbage() {
        let p = PromptTensor::<f64>::from_vec(1, 1, vec![0.25]).unwrap();
        let mut bytes = p.to_checkpoint_bytes();
        assert!(PromptTensor::<f64>::from_checkpoint_bytes(&bytes[..bytes.len() - 1]).is_err());
        bytes[4] = 9;
        assert!(matches!(
            PromptTensor::<f64>::from_checkpoint_bytes(&bytes),
            Err(Error::UnsupportedVersion(9))
        ));
        assert!(PromptTensor::<f64>::from_checkpoint_bytes(b"XXXX\x01").is_err());
    }

    #[test]
    fn non_finite_rejected() {
        assert!(PromptTensor::<f64>::from_vec(1, 1, vec![f64::NAN]).is_err());
    }
}
