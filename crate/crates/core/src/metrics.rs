//! Clean accuracy (ACC) and attack success rate (ASR).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{predict, EncodedExample, FrozenBackbone, PromptTensor, Verbalizer};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub acc: f64,
    pub asr: Option<f64>,
    pub n_clean: usize,
    pub n_poison: usize,
}

/// Fraction of examples for which `predictor` returns `expected(example)`.
pub fn hit_rate<P, E>(set: &[EncodedExample], mut predictor: P, expected: E) -> Result<f64>
where
    P: FnMut(&EncodedExample) -> Result<usize>,
    E: Fn(&EncodedExample) -> usize,
{
    if set.is_empty() {
        return Err(Error::invalid("cannot evaluate on an empty set"));
    }
    let mut hits = 0usize;
    for ex in set {
        if predictor(ex)? == expected(ex) {
            hits += 1;
        }
    }
    Ok(hits as f64 / set.len() as f64)
}

pub fn eval_acc<S: Scalar>(
    backbone: &FrozenBackbone<S>,
    prompt: &PromptTensor<S>,
    verbalizer: &Verbalizer,
    clean_test: &[EncodedExample],
) -> Result<f64> {
    hit_rate(clean_test, |ex| predict(backbone, prompt, &ex.seq, verbalizer), |ex| ex.label)
}

/// Fraction of triggered examples classified as `target`.
pub fn eval_asr<S: Scalar>(
    backbone: &FrozenBackbone<S>,
    prompt: &PromptTensor<S>,
    verbalizer: &Verbalizer,
    poison_test: &[EncodedExample],
    target: usize,
) -> Result<f64> {
    hit_rate(poison_test, |ex| predict(backbone, prompt, &ex.seq, verbalizer), |_| target)
}
