use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::vocab::Vocab;

/// Maps label words predicted at `[MASK]` onto classes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Verbalizer {
    words: Vec<Vec<String>>,
    /// Flattened label-word ids, class by class.
    ids: Vec<u32>,
    /// Class of each entry of `ids`.
    owner: Vec<usize>,
}

impl Verbalizer {
    /// Every class needs at least one word and no id may be shared between
    /// classes (hash collisions included).
    pub fn new(words: Vec<Vec<String>>, vocab: &Vocab) -> Result<Self> {
        if words.len() < 2 {
            return Err(Error::invalid("verbalizer needs at least two classes"));
        }
        let mut ids = Vec::new();
        let mut owner = Vec::new();
        let mut seen = BTreeSet::new();
        for (class, list) in words.iter().enumerate() {
            if list.is_empty() {
                return Err(Error::invalid(format!("class {class} has no label words")));
            }
            let mut class_ids = BTreeSet::new();
            for w in list {
                let lowered = w.to_lowercase();
                if lowered.split_whitespace().count() != 1 {
                    return Err(Error::invalid(format!("label word {w:?} is not a single word")));
                }
                let id = vocab.word_id(&lowered);
                if !class_ids.insert(id) {
                    continue;
                }
                if !seen.insert(id) {
                    return Err(Error::invalid(format!(
                        "label word {w:?} (id {id}) is shared with another class"
                    )));
                }
                ids.push(id);
                owner.push(class);
            }
        }
        Ok(Self { words, ids, owner })
    }

    /// One label word per class.
    pub fn one_to_one(words: &[&str], vocab: &Vocab) -> Result<Self> {
        Self::new(words.iter().map(|w| vec![w.to_string()]).collect(), vocab)
    }

    pub fn num_classes(&self) -> usize {
        self.words.len()
    }

    pub fn words(&self) -> &[Vec<String>] {
        &self.words
    }

    pub fn label_ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn owners(&self) -> &[usize] {
        &self.owner
    }
}
