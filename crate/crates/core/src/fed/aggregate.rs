//! Prompt-only weighted averaging.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::PromptTensor;
use crate::scalar::Scalar;

/// What a client uploads after local training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClientUpdateMsg<S> {
    pub round: u32,
    pub client: u32,
    /// Client-reported sample count used as aggregation weight.
    pub n_k: u64,
    pub prompt: PromptTensor<S>,
}

/// `sum_k (n_k / N) P_k` with `N = sum_k n_k`, summed in ascending client
/// order so the result does not depend on arrival order.
pub fn aggregate<S: Scalar>(updates: &[ClientUpdateMsg<S>]) -> Result<PromptTensor<S>> {
    let first = updates
        .first()
        .ok_or_else(|| Error::protocol("cannot aggregate zero updates"))?;
    let shape = first.prompt.shape();
    let mut sorted: Vec<&ClientUpdateMsg<S>> = updates.iter().collect();
    sorted.sort_by_key(|u| u.client);
    for pair in sorted.windows(2) {
        if pair[0].client == pair[1].client {
            return Err(Error::protocol(format!("duplicate update from client {}", pair[0].client)));
        }
    }
    for u in &sorted {
        if u.round != first.round {
            return Err(Error::protocol(format!(
                "update from client {} is for round {}, expected {}",
                u.client, u.round, first.round
            )));
        }
        if u.prompt.shape() != shape {
            return Err(Error::ShapeMismatch(format!(
                "update from client {} has shape {:?}, expected {:?}",
                u.client,
                u.prompt.shape(),
                shape
            )));
        }
        if u.n_k == 0 {
            return Err(Error::protocol(format!("client {} reported zero samples", u.client)));
        }
        if !u.prompt.is_finite() {
            return Err(Error::numerical(format!("update from client {} is not finite", u.client)));
        }
    }

    let total: u64 = sorted.iter().map(|u| u.n_k).sum();
    let total_s = S::of(total as f64);
    let mut out = PromptTensor::zeros(shape.0, shape.1);
    let acc = out.as_mut_slice();
    for u in &sorted {
        let w = S::of(u.n_k as f64) / total_s;
        crate::scalar::axpy(w, u.prompt.as_slice(), acc);
    }
    // Rounding can leave the convex hull of the inputs by an ulp.
    for (i, x) in acc.iter_mut().enumerate() {
        let (lo, hi) = sorted.iter().fold((S::infinity(), S::neg_infinity()), |(lo, hi), u| {
            let v = u.prompt.as_slice()[i];
            (lo.min(v), hi.max(v))
        });
        *x = x.max(lo).min(hi);
    }
    Ok(out)
}
