//! Datasets, synthetic task generation, partitioning and poisoning.

pub mod jsonl;
pub mod partition;
pub mod poison;
pub mod synthetic;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use jsonl::{load_jsonl, save_jsonl};
pub use partition::{split_dirichlet, split_iid, Partition};
pub use poison::{make_poison_testset, poison_shard, AttackSpec};
pub use synthetic::{gen_synthetic, SyntheticConfig};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledExample {
    pub text: String,
    pub label: usize,
}

impl LabeledExample {
    pub fn new(text: impl Into<String>, label: usize) -> Self {
        Self {
            text: text.into(),
            label,
        }
    }
}

/// Ordered examples; order is part of a dataset's identity.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dataset {
    examples: Vec<LabeledExample>,
    num_classes: usize,
}

impl Dataset {
    pub fn new(examples: Vec<LabeledExample>, num_classes: usize) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::invalid("a dataset needs at least two classes"));
        }
        for (i, ex) in examples.iter().enumerate() {
            if ex.text.trim().is_empty() {
                return Err(Error::invalid(format!("example {i} has empty text")));
            }
            if ex.label >= num_classes {
                return Err(Error::InvalidLabel {
                    line: i + 1,
                    label: ex.label as i64,
                    num_classes,
                });
            }
        }
        Ok(Self {
            examples,
            num_classes,
        })
    }

    pub fn examples(&self) -> &[LabeledExample] {
        &self.examples
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn label_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for ex in &self.examples {
            counts[ex.label] += 1;
        }
        counts
    }

    /// Sub-dataset at the given indices, in that order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let examples = indices
            .iter()
            .map(|&i| {
                self.examples
                    .get(i)
                    .cloned()
                    .ok_or_else(|| Error::invalid(format!("index {i} outside dataset of {}", self.len())))
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            examples,
            num_classes: self.num_classes,
        })
    }
}
