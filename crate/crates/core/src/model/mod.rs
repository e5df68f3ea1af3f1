//! Prompt-tuning model: tokenizer and template, frozen backbone, soft
//! prompt, verbalizer head, gradients and local training.

pub mod backbone;
pub mod forward;
pub mod optim;
pub mod pretrain;
pub mod prompt;
pub mod train;
pub mod verbalizer;
pub mod vocab;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::Result;

pub use backbone::{init_backbone, FrozenBackbone, ModelDims};
pub use forward::{forward, grad_prompt, loss, predict, ForwardTrace};
pub use optim::{OptimizerConfig, OptimizerKind};
pub use pretrain::{pretrained_backbone, PretrainConfig};
pub use prompt::{init_prompt, PromptTensor};
pub use train::{local_train, TrainConfig};
pub use verbalizer::Verbalizer;
pub use vocab::{apply_template, tokenize, TemplatedSeq, Vocab};

/// A templated, tokenized example ready for the forward pass.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodedExample {
    pub seq: TemplatedSeq,
    pub label: usize,
}

/// Tokenizes and templates every example of `dataset`.
pub fn encode_dataset(
    dataset: &Dataset,
    vocab: &Vocab,
    prompt_len: usize,
    max_len: usize,
) -> Result<Vec<EncodedExample>> {
    dataset
        .examples()
        .iter()
        .map(|ex| {
            Ok(EncodedExample {
                seq: vocab::encode_text(&ex.text, vocab, prompt_len, max_len)?,
                label: ex.label,
            })
        })
        .collect()
}
