//! Desk-scale sentiment-like task: two disjoint 50-word pools.

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::data::{Dataset, LabeledExample};
use crate::error::{Error, Result};
use crate::rng::{derived_rng, Rng};

/// Class-0 pool.
pub const NEGATIVE_WORDS: [&str; 50] = [
    "awful", "boring", "dull", "bland", "tedious", "clumsy", "lifeless", "stale", "weak", "flat",
    "shallow", "sloppy", "dreary", "grim", "tiresome", "lame", "cheap", "hollow", "forced",
    "muddled", "silly", "sour", "painful", "ugly", "annoying", "dismal", "feeble", "grating",
    "inept", "jarring", "lousy", "mediocre", "miserable", "noisy", "overlong", "plodding", "poor",
    "rotten", "shoddy", "soggy", "stiff", "tepid", "trite", "vapid", "wooden", "bleak", "choppy",
    "irritating", "listless", "hackneyed",
];

/// Class-1 pool.
pub const POSITIVE_WORDS: [&str; 50] = [
    "brilliant", "charming", "delightful", "moving", "superb", "vivid", "lovely", "gripping",
    "stunning", "clever", "elegant", "fresh", "funny", "lively", "radiant", "rich", "smart",
    "sweet", "tender", "thrilling", "warm", "wonderful", "beautiful", "bold", "dazzling",
    "engaging", "excellent", "gentle", "graceful", "heartfelt", "hilarious", "inspired",
    "luminous", "magical", "masterful", "nimble", "poignant", "polished", "sharp", "sincere",
    "soaring", "sparkling", "splendid", "terrific", "buoyant", "exquisite", "lyrical", "rapturous",
    "breezy", "riveting",
];

/// Label words of the default one-to-one verbalizer, by class.
pub const DEFAULT_LABEL_WORDS: [&str; 2] = ["terrible", "great"];

pub const DEFAULT_CONTAMINATION: f64 = 0.1;

pub fn pool(class: usize) -> &'static [&'static str; 50] {
    if class == 0 {
        &NEGATIVE_WORDS
    } else {
        &POSITIVE_WORDS
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SyntheticConfig {
    pub words_per_text: usize,
    /// Probability that a word is drawn from the other class's pool.
    pub contamination: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            words_per_text: 8,
            contamination: DEFAULT_CONTAMINATION,
        }
    }
}

/// Space-joined words of one example of `class` (0 or 1).
pub fn sample_text(rng: &mut Rng, class: usize, words: usize, contamination: f64) -> String {
    let mut out = String::new();
    for i in 0..words {
        let from = if rng.random_bool(contamination) {
            1 - class
        } else {
            class
        };
        let p = pool(from);
        if i > 0 {
            out.push(' ');
        }
        out.push_str(p[rng.random_range(0..p.len())]);
    }
    out
}

/// `n` binary examples, `ceil(n/2)` labelled 0 and `floor(n/2)` labelled 1,
/// in seeded order.
pub fn gen_synthetic(seed: u64, n: usize, cfg: SyntheticConfig, num_classes: usize) -> Result<Dataset> {
    if num_classes != 2 {
        return Err(Error::invalid("the synthetic task is binary"));
    }
    if n < 2 || cfg.words_per_text == 0 {
        return Err(Error::invalid("need n >= 2 and at least one word per text"));
    }
    if !(0.0..=1.0).contains(&cfg.contamination) {
        return Err(Error::invalid("contamination must lie in [0, 1]"));
    }
    let mut rng = derived_rng(seed, "synthetic", &[]);
    let mut labels: Vec<usize> = (0..n).map(|i| usize::from(i >= n.div_ceil(2))).collect();
    labels.shuffle(&mut rng);
    let examples = labels
        .into_iter()
        .map(|label| {
            LabeledExample::new(
                sample_text(&mut rng, label, cfg.words_per_text, cfg.contamination),
                label,
            )
        })
        .collect();
    Dataset::new(examples, 2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::vocab::Vocab;
    use std::collections::BTreeSet;

    #[test]
    fn balanced_labels() {
        let d = gen_synthetic(1, 100, SyntheticConfig::default(), 2).unwrap();
        assert_eq!(d.label_counts(), vec![50, 50]);
        let d = gen_synthetic(1, 101, SyntheticConfig::default(), 2).unwrap();
        assert_eq!(d.label_counts(), vec![51, 50]);
    }

    #[test]
    fn zero_contamination_stays_in_pool() {
        let cfg = SyntheticConfig {
            words_per_text: 6,
            contamination: 0.0,
        };
        let d = gen_synthetic(2, 200, cfg, 2).unwrap();
        for ex in d.examples() {
            assert!(ex.text.split(' ').all(|w| pool(ex.label).contains(&w)));
        }
    }

    #[test]
    fn majority_vote_over_pools_is_accurate() {
        let d = gen_synthetic(99, 2000, SyntheticConfig::default(), 2).unwrap();
        let correct = d
            .examples()
            .iter()
            .filter(|ex| {
                let pos = ex.text.split(' ').filter(|w| POSITIVE_WORDS.contains(w)).count();
                let neg = ex.text.split(' ').filter(|w| NEGATIVE_WORDS.contains(w)).count();
                usize::from(pos > neg) == ex.label
            })
            .count();
        assert!(correct as f64 / 2000.0 >= 0.95, "{correct}");
    }

    #[test]
    fn pools_are_disjoint_and_hash_apart() {
        let v = Vocab::new(1024).unwrap();
        let mut ids = BTreeSet::new();
        for w in NEGATIVE_WORDS.iter().chain(&POSITIVE_WORDS).chain(&DEFAULT_LABEL_WORDS) {
            assert!(ids.insert(v.word_id(w)), "collision on {w}");
        }
        assert_eq!(ids.len(), 102);
    }
}
