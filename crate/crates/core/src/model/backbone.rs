//! The frozen stand-in for the pre-trained language model: an embedding
//! table, one single-head attention layer and one feed-forward layer.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::derived_rng;
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// Backbone shape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub vocab: u32,
    pub d_model: usize,
    pub d_ff: usize,
    /// Rows of the positional table; bounds `prompt_len + max_len + 3`.
    pub max_positions: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        Self {
            vocab: 1024,
            d_model: 32,
            d_ff: 64,
            max_positions: 64,
        }
    }
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        if self.vocab <= crate::model::vocab::FIRST_HASHED
            || self.d_model == 0
            || self.d_ff == 0
            || self.max_positions == 0
        {
            return Err(Error::invalid(format!("invalid backbone dims {self:?}")));
        }
        Ok(())
    }

    /// Trainable-in-principle scalars of the backbone (the sinusoidal table
    /// is fixed and not counted).
    pub fn param_count(&self) -> usize {
        let (v, d, h) = (self.vocab as usize, self.d_model, self.d_ff);
        v * d + 4 * d * d + d * h + h + h * d + d
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrozenBackbone<S> {
    dims: ModelDims,
    pub(crate) embed: Matrix<S>,
    pub(crate) pos: Matrix<S>,
    pub(crate) wq: Matrix<S>,
    pub(crate) wk: Matrix<S>,
    pub(crate) wv: Matrix<S>,
    pub(crate) wo: Matrix<S>,
    pub(crate) w1: Matrix<S>,
    pub(crate) b1: Vec<S>,
    pub(crate) w2: Matrix<S>,
    pub(crate) b2: Vec<S>,
}

/// Standard sinusoidal position table.
pub fn sinusoidal_table<S: Scalar>(positions: usize, d: usize) -> Matrix<S> {
    Matrix::from_fn(positions, d, |p, c| {
        let pair = (c / 2) as f64;
        let angle = p as f64 / 10000f64.powf(2.0 * pair / d as f64);
        S::of(if c % 2 == 0 { angle.sin() } else { angle.cos() })
    })
}

/// Draws all backbone matrices i.i.d. from N(0, 1/sqrt(d)) (standard
/// deviation) with zero biases.
pub fn init_backbone<S: Scalar>(seed: u64, dims: ModelDims) -> Result<FrozenBackbone<S>> {
    dims.validate()?;
    let (v, d, h) = (dims.vocab as usize, dims.d_model, dims.d_ff);
    let mut rng = derived_rng(seed, "backbone", &[]);
    let normal = Normal::new(0.0, 1.0 / (d as f64).sqrt()).expect("positive std");
    let mut draw = |rows: usize, cols: usize| {
        Matrix::from_fn(rows, cols, |_, _| S::of(normal.sample(&mut rng)))
    };
    let embed = draw(v, d);
    let wq = draw(d, d);
    let wk = draw(d, d);
    let wv = draw(d, d);
    let wo = draw(d, d);
    let w1 = draw(d, h);
    let w2 = draw(h, d);
    Ok(FrozenBackbone {
        dims,
        embed,
        pos: sinusoidal_table(dims.max_positions, d),
        wq,
        wk,
        wv,
        wo,
        w1,
        b1: vec![S::zero(); h],
        w2,
        b2: vec![S::zero(); d],
    })
}

impl<S: Scalar> FrozenBackbone<S> {
    pub fn dims(&self) -> ModelDims {
        self.dims
    }

    pub fn d_model(&self) -> usize {
        self.dims.d_model
    }

    pub fn embedding(&self, id: u32) -> &[S] {
        self.embed.row(id as usize)
    }

    pub fn ffn_biases(&self) -> (&[S], &[S]) {
        (&self.b1, &self.b2)
    }

    pub fn param_count(&self) -> usize {
        self.dims.param_count()
    }

    /// Deterministic byte image (dims then every table as LE f64). Used to
    /// check that training never touches the backbone.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&self.dims.vocab.to_le_bytes());
        for n in [self.dims.d_model, self.dims.d_ff, self.dims.max_positions] {
            out.extend_from_slice(&(n as u64).to_le_bytes());
        }
        for m in self.matrices() {
            out.extend_from_slice(&m.to_le_f64_bytes());
        }
        for b in self.b1.iter().chain(&self.b2) {
            out.extend_from_slice(&b.as_f64().to_le_bytes());
        }
        out
    }

    fn matrices(&self) -> [&Matrix<S>; 8] {
        [
            &self.embed,
            &self.pos,
            &self.wq,
            &self.wk,
            &self.wv,
            &self.wo,
            &self.w1,
            &self.w2,
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.matrices().iter().all(|m| m.is_finite())
            && crate::scalar::all_finite(&self.b1)
            && crate::scalar::all_finite(&self.b2)
    }

    /// Converts every weight to another scalar type.
    pub fn cast<T: Scalar>(&self) -> FrozenBackbone<T> {
        let c = |m: &Matrix<S>| m.map(|x| T::of(x.as_f64()));
        let v = |b: &[S]| b.iter().map(|x| T::of(x.as_f64())).collect();
        FrozenBackbone {
            dims: self.dims,
            embed: c(&self.embed),
            pos: c(&self.pos),
            wq: c(&self.wq),
            wk: c(&self.wk),
            wv: c(&self.wv),
            wo: c(&self.wo),
            w1: c(&self.w1),
            b1: v(&self.b1),
            w2: c(&self.w2),
            b2: v(&self.b2),
        }
    }
}
