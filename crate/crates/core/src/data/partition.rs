//! IID and Dirichlet quantity-skew client partitions.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::derived_rng;

/// Maximum number of Dirichlet redraws before zero-sized shards are filled
/// from the largest shard.
pub const MAX_REDRAWS: u64 = 100;

/// Assignment of dataset indices to client shards. Serializes as the
/// partition manifest `{"alpha": float|null, "seed": int, "shards": [[...]]}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    pub alpha: Option<f64>,
    pub seed: u64,
    pub shards: Vec<Vec<usize>>,
}

impl Partition {
    pub fn num_clients(&self) -> usize {
        self.shards.len()
    }

    pub fn counts(&self) -> Vec<usize> {
        self.shards.iter().map(Vec::len).collect()
    }

    pub fn shard(&self, k: usize) -> Option<&[usize]> {
        self.shards.get(k).map(Vec::as_slice)
    }

    /// Checks that the shards are nonempty, disjoint and cover `0..n`.
    pub fn validate(&self, n: usize) -> Result<()> {
        if self.shards.is_empty() {
            return Err(Error::Partition("no shards".into()));
        }
        let mut seen = vec![false; n];
        for (k, shard) in self.shards.iter().enumerate() {
            if shard.is_empty() {
                return Err(Error::Partition(format!("shard {k} is empty")));
            }
            for &i in shard {
                match seen.get_mut(i) {
                    None => {
                        return Err(Error::Partition(format!("index {i} outside dataset of {n}")));
                    }
                    Some(true) => return Err(Error::Partition(format!("index {i} assigned twice"))),
                    Some(s) => *s = true,
                }
            }
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::Partition(format!("index {missing} not assigned")));
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}

fn shuffled_indices(n: usize, seed: u64, label: &str) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut derived_rng(seed, label, &[]));
    idx
}

fn chunk_by_counts(order: &[usize], counts: &[usize]) -> Vec<Vec<usize>> {
    let mut start = 0;
    counts
        .iter()
        .map(|&c| {
            let mut shard = order[start..start + c].to_vec();
            shard.sort_unstable();
            start += c;
            shard
        })
        .collect()
}

/// Seeded shuffle, then `n / K` per shard with the first `n % K` shards one
/// larger.
pub fn split_iid(n: usize, clients: usize, seed: u64) -> Result<Partition> {
    if clients == 0 {
        return Err(Error::invalid("need at least one client"));
    }
    if clients > n {
        return Err(Error::TooManyClients {
            examples: n,
            clients,
        });
    }
    let base = n / clients;
    let counts: Vec<usize> = (0..clients).map(|k| base + usize::from(k < n % clients)).collect();
    let order = shuffled_indices(n, seed, "iid");
    Ok(Partition {
        alpha: None,
        seed,
        shards: chunk_by_counts(&order, &counts),
    })
}

/// Largest-remainder apportionment of `total` by `weights` (which sum to 1).
/// Ties in the remainder go to the lower index.
pub fn apportion(total: usize, weights: &[f64]) -> Vec<usize> {
    let raw: Vec<f64> = weights.iter().map(|w| w * total as f64).collect();
    let mut counts: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = raw[a] - raw[a].floor();
        let rb = raw[b] - raw[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &k in order.iter().take(total.saturating_sub(assigned)) {
        counts[k] += 1;
    }
    counts
}

/// Dirichlet(alpha) proportions drawn as normalized Gamma(alpha, 1) samples.
/// `None` when the draws are degenerate (zero or non-finite sum).
pub fn dirichlet_draw(alpha: f64, clients: usize, seed: u64, attempt: u64) -> Result<Option<Vec<f64>>> {
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| Error::invalid(format!("gamma({alpha}): {e}")))?;
    let mut rng = derived_rng(seed, "dirichlet", &[attempt]);
    let draws: Vec<f64> = (0..clients).map(|_| gamma.sample(&mut rng)).collect();
    let sum: f64 = draws.iter().sum();
    if !(sum.is_finite() && sum > 0.0) {
        return Ok(None);
    }
    Ok(Some(draws.into_iter().map(|g| g / sum).collect()))
}

/// Shard sizes for a Dirichlet quantity-skew split of `n` examples.
pub fn dirichlet_counts(n: usize, clients: usize, alpha: f64, seed: u64) -> Result<Vec<usize>> {
    if clients == 0 {
        return Err(Error::invalid("need at least one client"));
    }
    if clients > n {
        return Err(Error::TooManyClients {
            examples: n,
            clients,
        });
    }
    if !(alpha.is_finite() && alpha > 0.0) {
        return Err(Error::invalid(format!("alpha must be positive, got {alpha}")));
    }
    let mut last = None;
    for attempt in 0..=MAX_REDRAWS {
        if let Some(q) = dirichlet_draw(alpha, clients, seed, attempt)? {
            let counts = apportion(n, &q);
            if counts.iter().all(|&c| c >= 1) {
                return Ok(counts);
            }
            last = Some(counts);
        }
    }
    let mut counts = last.ok_or_else(|| {
        Error::Partition(format!("all {} Dirichlet draws were degenerate", MAX_REDRAWS + 1))
    })?;
    while let Some(empty) = counts.iter().position(|&c| c == 0) {
        let largest = (0..counts.len())
            .max_by(|&a, &b| counts[a].cmp(&counts[b]).then(b.cmp(&a)))
            .expect("nonempty");
        counts[largest] -= 1;
        counts[empty] += 1;
    }
    Ok(counts)
}

/// Quantity-skew split: Dirichlet shard sizes, examples assigned after a
/// seeded shuffle (label proportions follow the shuffle).
pub fn split_dirichlet(n: usize, clients: usize, alpha: f64, seed: u64) -> Result<Partition> {
    let counts = dirichlet_counts(n, clients, alpha, seed)?;
    let order = shuffled_indices(n, seed, "dirichlet-assign");
    Ok(Partition {
        alpha: Some(alpha),
        seed,
        shards: chunk_by_counts(&order, &counts),
    })
}
