//! Local differential privacy (gradient clipping plus Laplace noise on the
//! uploaded prompt) and robust screening of client prompts by their entry
//! statistics.

use rand::Rng as _;
use rand_distr::Open01;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::prompt::PromptTensor;
use crate::rng::rng_from;
use crate::scalar::{l2_norm, Scalar};

/// Consistency constant turning a MAD into a normal-scale deviation.
pub const MAD_SCALE: f64 = 1.4826;
const MAD_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LdpSpec {
    /// L2 bound applied to every batch gradient.
    pub clip_norm: f64,
    /// Per-parameter Laplace scale `b` of the upload noise.
    pub laplace_scale: f64,
    pub noise_seed: u64,
}

impl LdpSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.clip_norm > 0.0) {
            return Err(Error::invalid(format!("clip norm must be positive, got {}", self.clip_norm)));
        }
        if !(self.laplace_scale >= 0.0 && self.laplace_scale.is_finite()) {
            return Err(Error::invalid(format!(
                "laplace scale must be finite and non-negative, got {}",
                self.laplace_scale
            )));
        }
        Ok(())
    }
}

/// Rescales `g` in place so that its L2 norm is at most `clip_norm`.
pub fn clip_gradient<S: Scalar>(g: &mut [S], clip_norm: S) -> Result<()> {
    if !crate::scalar::all_finite(g) {
        return Err(Error::numerical("cannot clip a non-finite gradient"));
    }
    let norm = l2_norm(g);
    if norm > clip_norm {
        let s = clip_norm / norm;
        g.iter_mut().for_each(|x| *x *= s);
    }
    Ok(())
}

/// One Laplace(0, b) draw by inverse CDF of `u` in (0, 1).
#[inline]
pub fn laplace_from_uniform(u: f64, b: f64) -> f64 {
    let c = u - 0.5;
    -b * c.signum() * (1.0 - 2.0 * c.abs()).ln()
}

/// `n` seeded Laplace(0, b) samples.
pub fn laplace_noise(n: usize, b: f64, seed: u64) -> Vec<f64> {
    let mut rng = rng_from(seed);
    (0..n)
        .map(|_| {
            let u: f64 = rng.sample(Open01);
            if u == 0.5 {
                0.0
            } else {
                laplace_from_uniform(u, b)
            }
        })
        .collect()
}

/// Adds i.i.d. Laplace(0, b) noise to every prompt entry.
pub fn add_laplace<S: Scalar>(p: &PromptTensor<S>, b: f64, seed: u64) -> Result<PromptTensor<S>> {
    if !(b >= 0.0 && b.is_finite()) {
        return Err(Error::invalid(format!("laplace scale must be non-negative, got {b}")));
    }
    let mut out = p.clone();
    if b == 0.0 {
        return Ok(out);
    }
    for (x, n) in out.as_mut_slice().iter_mut().zip(laplace_noise(p.len(), b, seed)) {
        *x += S::of(n);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScreenSpec {
    /// Robust z-score cutoff; `f64::INFINITY` disables rejection.
    pub mad_threshold: f64,
}

impl ScreenSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.mad_threshold > 0.0) {
            return Err(Error::invalid("screening threshold must be positive"));
        }
        Ok(())
    }
}

/// Result of screening, as indices into the screened list.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScreenOutcome {
    pub accepted: Vec<usize>,
    pub rejected: Vec<usize>,
    /// Per input: max of the robust z-scores of its mean and std.
    pub scores: Vec<f64>,
    /// Set when there were too few inputs to screen (all accepted).
    pub insufficient: bool,
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// `|x - median| / (1.4826 * MAD + 1e-12)` for every entry.
pub fn robust_z(xs: &[f64]) -> Vec<f64> {
    let med = median(xs);
    let dev: Vec<f64> = xs.iter().map(|x| (x - med).abs()).collect();
    let mad = median(&dev);
    dev.iter().map(|d| d / (MAD_SCALE * mad + MAD_EPS)).collect()
}

/// Mean and population standard deviation of a prompt's entries.
pub fn prompt_stats<S: Scalar>(p: &PromptTensor<S>) -> (f64, f64) {
    let n = p.len() as f64;
    let mean = p.as_slice().iter().map(|x| x.as_f64()).sum::<f64>() / n;
    let var = p
        .as_slice()
        .iter()
        .map(|x| (x.as_f64() - mean).powi(2))
        .sum::<f64>()
        / n;
    (mean, var.sqrt())
}

/// Flags prompts whose entry mean or std is a robust-z outlier.
///
/// At most `floor(K/2)` prompts are rejected; when more are flagged, the
/// ones with the smallest scores are waived (ties to the later index).
pub fn screen_updates<S: Scalar>(prompts: &[&PromptTensor<S>], spec: &ScreenSpec) -> Result<ScreenOutcome> {
    spec.validate()?;
    let k = prompts.len();
    if k < 3 {
        return Ok(ScreenOutcome {
            accepted: (0..k).collect(),
            rejected: Vec::new(),
            scores: vec![0.0; k],
            insufficient: true,
        });
    }
    let (means, stds): (Vec<f64>, Vec<f64>) = prompts.iter().map(|p| prompt_stats(p)).unzip();
    let zm = robust_z(&means);
    let zs = robust_z(&stds);
    let scores: Vec<f64> = zm.iter().zip(&zs).map(|(a, b)| a.max(*b)).collect();

    let mut flagged: Vec<usize> = (0..k).filter(|&i| scores[i] > spec.mad_threshold).collect();
    flagged.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    flagged.truncate(k / 2);
    flagged.sort_unstable();
    let accepted = (0..k).filter(|i| flagged.binary_search(i).is_err()).collect();
    Ok(ScreenOutcome {
        accepted,
        rejected: flagged,
        scores,
        insufficient: false,
    })
}
