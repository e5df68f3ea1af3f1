//! Client-side local training of the soft prompt.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::backbone::FrozenBackbone;
use crate::model::forward::accumulate_grad_prompt;
use crate::model::optim::{Optimizer, OptimizerConfig};
use crate::model::prompt::PromptTensor;
use crate::model::verbalizer::Verbalizer;
use crate::model::EncodedExample;
use crate::privacy::{clip_gradient, LdpSpec};
use crate::rng::rng_from;
use crate::scalar::Scalar;
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Optimizer steps (one per batch).
    pub steps: usize,
    pub batch: usize,
    pub optimizer: OptimizerConfig,
}

/// Runs `cfg.steps` optimizer steps over seeded reshuffles of `shard`.
///
/// Each step uses the mean prompt gradient of one batch; the final batch of
/// a pass may be short. When `ldp` is given the batch gradient is clipped to
/// its L2 bound before the optimizer sees it.
pub fn local_train<S: Scalar>(
    shard: &[EncodedExample],
    prompt_in: &PromptTensor<S>,
    backbone: &FrozenBackbone<S>,
    verbalizer: &Verbalizer,
    cfg: &TrainConfig,
    seed: u64,
    ldp: Option<&LdpSpec>,
) -> Result<PromptTensor<S>> {
    if shard.is_empty() {
        return Err(Error::EmptyShard);
    }
    if cfg.batch == 0 {
        return Err(Error::invalid("batch size must be at least 1"));
    }
    let mut prompt = prompt_in.clone();
    if cfg.steps == 0 {
        return Ok(prompt);
    }
    let mut optimizer = Optimizer::new(cfg.optimizer, prompt.len())?;
    let mut rng = rng_from(seed);
    let mut order: Vec<usize> = (0..shard.len()).collect();
    let mut cursor = order.len();
    let mut grad = Matrix::zeros(prompt.m(), prompt.d());

    for _ in 0..cfg.steps {
        if cursor >= order.len() {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let end = (cursor + cfg.batch).min(order.len());
        let batch = &order[cursor..end];
        cursor = end;

        grad.as_mut_slice().iter_mut().for_each(|g| *g = S::zero());
        let weight = S::one() / S::of(batch.len() as f64);
        for &i in batch {
            accumulate_grad_prompt(backbone, &prompt, &shard[i], verbalizer, weight, &mut grad)?;
        }
        if let Some(spec) = ldp {
            clip_gradient(grad.as_mut_slice(), S::of(spec.clip_norm))?;
        }
        optimizer.step(prompt.as_mut_slice(), grad.as_slice());
        if !prompt.is_finite() {
            return Err(Error::numerical("prompt diverged during local training"));
        }
    }
    Ok(prompt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::backbone::{init_backbone, ModelDims};
    use crate::model::forward::grad_prompt;
    use crate::model::optim::OptimizerKind;
    use crate::model::prompt::init_prompt;
    use crate::model::vocab::{encode_text, Vocab};

    fn setup() -> (FrozenBackbone<f64>, PromptTensor<f64>, Verbalizer, Vec<EncodedExample>) {
        let dims = ModelDims::default();
        let vocab = Vocab::new(dims.vocab).unwrap();
        let verbalizer = Verbalizer::one_to_one(&["terrible", "great"], &vocab).unwrap();
        let shard = ["good fun", "awful mess", "great cast", "dull plot"]
            .iter()
            .enumerate()
            .map(|(i, t)| EncodedExample {
                seq: encode_text(t, &vocab, 4, 32).unwrap(),
                label: (i + 1) % 2,
            })
            .collect();
        (init_backbone(2, dims).unwrap(), init_prompt(2, 4, dims.d_model).unwrap(), verbalizer, shard)
    }

    fn cfg(kind: OptimizerKind, steps: usize, batch: usize, lr: f64) -> TrainConfig {
        TrainConfig {
            steps,
            batch,
            optimizer: OptimizerConfig { kind, lr },
        }
    }

    #[test]
    fn zero_steps_is_identity() {
        let (b, p, v, shard) = setup();
        let out = local_train(&shard, &p, &b, &v, &cfg(OptimizerKind::Adam, 0, 2, 0.3), 1, None).unwrap();
        assert_eq!(out, p);
    }

    #[test]
    fn single_sgd_step_matches_definition() {
        let (b, p, v, shard) = setup();
        let one = &shard[..1];
        let lr = 0.5;
        let out = local_train(one, &p, &b, &v, &cfg(OptimizerKind::Sgd, 1, 1, lr), 1, None).unwrap();
        let (_, g) = grad_prompt(&b, &p, &one[0], &v).unwrap();
        for ((o, x), gi) in out.as_slice().iter().zip(p.as_slice()).zip(g.as_slice()) {
            assert_eq!(*o, x - lr * gi);
        }
    }

    #[test]
    fn deterministic_and_backbone_untouched() {
        let (b, p, v, shard) = setup();
        let before = b.to_bytes();
        let c = cfg(OptimizerKind::Adam, 7, 3, 0.05);
        let x = local_train(&shard, &p, &b, &v, &c, 11, None).unwrap();
        let y = local_train(&shard, &p, &b, &v, &c, 11, None).unwrap();
        assert_eq!(x.to_checkpoint_bytes(), y.to_checkpoint_bytes());
        assert_ne!(x, p);
        assert_eq!(b.to_bytes(), before);
    }

    #[test]
    fn clipping_bounds_each_sgd_step() {
        let (b, p, v, shard) = setup();
        let spec = LdpSpec {
            clip_norm: 1e-3,
            laplace_scale: 0.0,
            noise_seed: 0,
        };
        let out = local_train(&shard, &p, &b, &v, &cfg(OptimizerKind::Sgd, 1, 4, 1.0), 3, Some(&spec)).unwrap();
        let moved: f64 = out
            .as_slice()
            .iter()
            .zip(p.as_slice())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        assert!(moved <= 1e-3 * (1.0 + 1e-12), "moved {moved}");
    }

    #[test]
    fn empty_shard_and_divergence() {
        let (b, p, v, shard) = setup();
        assert!(matches!(
            local_train(&[], &p, &b, &v, &cfg(OptimizerKind::Adam, 1, 1, 0.1), 0, None),
            Err(Error::EmptyShard)
        ));
        let r = local_train(&shard, &p, &b, &v, &cfg(OptimizerKind::Adam, 5, 4, f64::MAX), 0, None);
        assert!(matches!(r, Err(Error::Numerical(_))), "{r:?}");
    }
}
