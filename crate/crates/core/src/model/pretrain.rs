//! Seeded pre-training of the stand-in backbone.
//!
//! A randomly initialised single block gives a soft prefix nothing to
//! select: the `[MASK]` query does not depend on the prefix, so a prompt can
//! only add a constant offset to a fixed random read-out. Real prompt tuning
//! relies on knowledge already present in a pre-trained model, so the
//! stand-in is pre-trained on a small two-task corpus before it is frozen:
//!
//! ```text
//! <filler ... TASK ... filler> <text from the sentiment pools> is [MASK] .
//! ```
//!
//! With task token `<sentiment>` the mask should read the class label word;
//! with `<irony>` it should read the other class's word. A third of the
//! sequences carry no task token and use the flipped mapping, so the frozen
//! model answers the downstream template wrongly until a prompt supplies
//! the direct cue, playing the role of the task token. Token-free sequences
//! still start with filler, and no trigger word is ever seen during
//! pre-training.

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::synthetic::{sample_text, DEFAULT_LABEL_WORDS, DEFAULT_CONTAMINATION};
use crate::error::{Error, Result};
use crate::model::backbone::{init_backbone, FrozenBackbone, ModelDims};
use crate::model::forward::{forward_with_prefix, head_backward, loss};
use crate::model::optim::{Optimizer, OptimizerConfig, OptimizerKind};
use crate::model::verbalizer::Verbalizer;
use crate::model::vocab::{tokenize, Vocab, LIT_DOT, LIT_IS, MASK};
use crate::rng::derived_rng;
use crate::scalar::{axpy, Scalar};
use crate::tensor::Matrix;

pub const TASK_DIRECT: &str = "<sentiment>";
pub const TASK_FLIPPED: &str = "<irony>";
pub const FILLER_WORDS: [&str; 20] = [
    "the", "a", "an", "this", "that", "film", "movie", "story", "plot", "scene", "cast",
    "script", "director", "actor", "one", "its", "and", "with", "of", "it",
];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    /// Zero disables pre-training (the backbone stays at its random init).
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    /// Prefix lengths are drawn uniformly from `1..=max_prefix`.
    pub max_prefix: usize,
    pub words_per_text: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch: 32,
            lr: 3e-3,
            max_prefix: 20,
            words_per_text: 8,
        }
    }
}

/// Gradient of the loss with respect to every backbone weight. Embedding
/// rows are kept sparse.
#[derive(Clone, Debug)]
pub struct BackboneGrad<S> {
    pub embed_rows: Vec<(u32, Vec<S>)>,
    pub wq: Matrix<S>,
    pub wk: Matrix<S>,
    pub wv: Matrix<S>,
    pub wo: Matrix<S>,
    pub w1: Matrix<S>,
    pub b1: Vec<S>,
    pub w2: Matrix<S>,
    pub b2: Vec<S>,
}

impl<S: Scalar> BackboneGrad<S> {
    fn zeros(dims: ModelDims) -> Self {
        let (d, h) = (dims.d_model, dims.d_ff);
        Self {
            embed_rows: Vec::new(),
            wq: Matrix::zeros(d, d),
            wk: Matrix::zeros(d, d),
            wv: Matrix::zeros(d, d),
            wo: Matrix::zeros(d, d),
            w1: Matrix::zeros(d, h),
            b1: vec![S::zero(); h],
            w2: Matrix::zeros(h, d),
            b2: vec![S::zero(); d],
        }
    }

    fn add_scaled(&mut self, other: &Self, w: S) {
        self.embed_rows
            .extend(other.embed_rows.iter().map(|(id, g)| (*id, g.iter().map(|&x| x * w).collect())));
        for (a, b) in self.dense_mut().into_iter().zip(other.dense()) {
            axpy(w, b, a);
        }
    }

    fn dense(&self) -> [&[S]; 8] {
        [
            self.wq.as_slice(),
            self.wk.as_slice(),
            self.wv.as_slice(),
            self.wo.as_slice(),
            self.w1.as_slice(),
            &self.b1,
            self.w2.as_slice(),
            &self.b2,
        ]
    }

    fn dense_mut(&mut self) -> [&mut [S]; 8] {
        [
            self.wq.as_mut_slice(),
            self.wk.as_mut_slice(),
            self.wv.as_mut_slice(),
            self.wo.as_mut_slice(),
            self.w1.as_mut_slice(),
            &mut self.b1,
            self.w2.as_mut_slice(),
            &mut self.b2,
        ]
    }

    /// Dense embedding gradient (V x d).
    pub fn embed_dense(&self, dims: ModelDims) -> Matrix<S> {
        let mut out = Matrix::zeros(dims.vocab as usize, dims.d_model);
        for (id, g) in &self.embed_rows {
            axpy(S::one(), g, out.row_mut(*id as usize));
        }
        out
    }
}

/// Loss and full-backbone gradient for one all-token sequence whose label
/// is a verbalizer class.
pub fn backbone_grad<S: Scalar>(
    backbone: &FrozenBackbone<S>,
    token_ids: &[u32],
    verbalizer: &Verbalizer,
    label: usize,
) -> Result<(S, BackboneGrad<S>)> {
    let dims = backbone.dims();
    let d = dims.d_model;
    let empty = Matrix::zeros(0, d);
    let trace = forward_with_prefix(backbone, &empty, token_ids, verbalizer)?;
    let loss = loss(&trace.class_probs, label)?;
    let head = head_backward(backbone, &trace, verbalizer, label)?;
    let mut g = BackboneGrad::zeros(dims);

    for (&s, &w) in head.score.iter().zip(verbalizer.label_ids()) {
        g.embed_rows
            .push((w, trace.h_mask.iter().map(|&z| z * s).collect()));
    }
    g.w2.add_outer(S::one(), &trace.hidden, &head.h_mask);
    axpy(S::one(), &head.h_mask, &mut g.b2);
    g.w1.add_outer(S::one(), &trace.resid, &head.pre_act);
    axpy(S::one(), &head.pre_act, &mut g.b1);
    g.wo.add_outer(S::one(), &trace.context, &head.resid);

    let len = token_ids.len();
    let mi = trace.mask_index;
    let mut dx = Matrix::zeros(len, d);
    axpy(S::one(), &head.resid, dx.row_mut(mi));

    let mut dq = vec![S::zero(); d];
    let mut dk = vec![S::zero(); d];
    let mut dv = vec![S::zero(); d];
    let mut tmp = vec![S::zero(); d];
    for j in 0..len {
        let lg = head.logits[j];
        axpy(lg, trace.keys.row(j), &mut dq);
        for (o, &q) in dk.iter_mut().zip(&trace.query) {
            *o = lg * q;
        }
        for (o, &c) in dv.iter_mut().zip(&head.context) {
            *o = trace.attn[j] * c;
        }
        g.wk.add_outer(S::one(), trace.states.row(j), &dk);
        g.wv.add_outer(S::one(), trace.states.row(j), &dv);
        backbone.wk.mul_vec(&dk, &mut tmp);
        axpy(S::one(), &tmp, dx.row_mut(j));
        backbone.wv.mul_vec(&dv, &mut tmp);
        axpy(S::one(), &tmp, dx.row_mut(j));
    }
    g.wq.add_outer(S::one(), trace.states.row(mi), &dq);
    backbone.wq.mul_vec(&dq, &mut tmp);
    axpy(S::one(), &tmp, dx.row_mut(mi));

    for (j, &id) in token_ids.iter().enumerate() {
        g.embed_rows.push((id, dx.row(j).to_vec()));
    }
    Ok((loss, g))
}

/// One pre-training sequence: token ids and target class.
pub fn sample_sequence(
    rng: &mut crate::rng::Rng,
    vocab: &Vocab,
    cfg: &PretrainConfig,
) -> Result<(Vec<u32>, usize)> {
    let class = rng.random_range(0..2usize);
    // 0: direct, 1: flipped, 2: no task token (flipped).
    let mode = rng.random_range(0..3u32);
    let prefix_len = rng.random_range(1..=cfg.max_prefix.max(1));
    let task_at = rng.random_range(0..prefix_len);
    let mut ids = Vec::with_capacity(prefix_len + cfg.words_per_text + 3);
    for i in 0..prefix_len {
        let word = if i == task_at && mode == 0 {
            TASK_DIRECT
        } else if i == task_at && mode == 1 {
            TASK_FLIPPED
        } else {
            FILLER_WORDS[rng.random_range(0..FILLER_WORDS.len())]
        };
        ids.push(vocab.word_id(word));
    }
    let text = sample_text(rng, class, cfg.words_per_text, DEFAULT_CONTAMINATION);
    ids.extend(tokenize(&text, vocab, cfg.words_per_text)?);
    ids.extend_from_slice(&[LIT_IS, MASK, LIT_DOT]);
    let target = match mode {
        0 => class,
        _ => 1 - class,
    };
    Ok((ids, target))
}

/// Verbalizer used during pre-training (and by default downstream).
pub fn default_verbalizer(vocab: &Vocab) -> Result<Verbalizer> {
    Verbalizer::one_to_one(&DEFAULT_LABEL_WORDS, vocab)
}

/// Adam over all backbone weights on the seeded two-task corpus. Returns
/// the mean loss of the final 100 steps alongside the backbone.
pub fn pretrain<S: Scalar>(
    mut backbone: FrozenBackbone<S>,
    cfg: &PretrainConfig,
    seed: u64,
) -> Result<(FrozenBackbone<S>, f64)> {
    let dims = backbone.dims();
    if cfg.steps == 0 {
        return Ok((backbone, f64::NAN));
    }
    if cfg.batch == 0 || cfg.max_prefix == 0 || cfg.words_per_text == 0 {
        return Err(Error::invalid("pre-training batch, prefix and text length must be positive"));
    }
    if cfg.max_prefix + cfg.words_per_text + 3 > dims.max_positions {
        return Err(Error::invalid("pre-training sequences exceed the position table"));
    }
    let vocab = Vocab::new(dims.vocab)?;
    let verbalizer = default_verbalizer(&vocab)?;
    let opt_cfg = OptimizerConfig {
        kind: OptimizerKind::Adam,
        lr: cfg.lr,
    };
    let mut embed_opt = Optimizer::new(opt_cfg, backbone.embed.as_slice().len())?;
    let mut dense_opts = dense_weights(&mut backbone)
        .iter()
        .map(|w| Optimizer::new(opt_cfg, w.len()))
        .collect::<Result<Vec<_>>>()?;
    let mut rng = derived_rng(seed, "pretrain", &[]);
    let mut recent = Vec::new();
    let mut embed_grad = Matrix::<S>::zeros(dims.vocab as usize, dims.d_model);

    for step in 0..cfg.steps {
        let batch = (0..cfg.batch)
            .map(|_| sample_sequence(&mut rng, &vocab, cfg))
            .collect::<Result<Vec<_>>>()?;
        let results = batch
            .par_iter()
            .map(|(ids, label)| backbone_grad(&backbone, ids, &verbalizer, *label))
            .collect::<Result<Vec<_>>>()?;

        let w = S::one() / S::of(cfg.batch as f64);
        let mut total = BackboneGrad::zeros(dims);
        let mut batch_loss = 0.0;
        for (l, g) in &results {
            batch_loss += l.as_f64();
            total.add_scaled(g, w);
        }
        if step + 100 >= cfg.steps {
            recent.push(batch_loss / cfg.batch as f64);
        }

        embed_grad.as_mut_slice().iter_mut().for_each(|x| *x = S::zero());
        for (id, g) in &total.embed_rows {
            axpy(S::one(), g, embed_grad.row_mut(*id as usize));
        }
        embed_opt.step(backbone.embed.as_mut_slice(), embed_grad.as_slice());
        for ((opt, param), grad) in dense_opts
            .iter_mut()
            .zip(dense_weights(&mut backbone))
            .zip(total.dense())
        {
            opt.step(param, grad);
        }
        if !backbone.is_finite() {
            return Err(Error::numerical(format!("backbone diverged at pre-training step {step}")));
        }
    }
    let final_loss = recent.iter().sum::<f64>() / recent.len() as f64;
    Ok((backbone, final_loss))
}

fn dense_weights<S: Scalar>(b: &mut FrozenBackbone<S>) -> [&mut [S]; 8] {
    [
        b.wq.as_mut_slice(),
        b.wk.as_mut_slice(),
        b.wv.as_mut_slice(),
        b.wo.as_mut_slice(),
        b.w1.as_mut_slice(),
        &mut b.b1,
        b.w2.as_mut_slice(),
        &mut b.b2,
    ]
}

/// Random init followed by pre-training; a pure function of its inputs.
pub fn pretrained_backbone<S: Scalar>(
    seed: u64,
    dims: ModelDims,
    cfg: &PretrainConfig,
) -> Result<FrozenBackbone<S>> {
    let init = init_backbone(seed, dims)?;
    Ok(pretrain(init, cfg, seed)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;

    fn small() -> ModelDims {
        ModelDims {
            vocab: 1024,
            d_model: 8,
            d_ff: 16,
            max_positions: 40,
        }
    }

    fn bump(b: &mut FrozenBackbone<f64>, tensor: usize, i: usize, delta: f64) {
        match tensor {
            0 => b.embed.as_mut_slice()[i] += delta,
            t => dense_weights(b)[t - 1][i] += delta,
        }
    }

    #[test]
    fn backbone_gradient_matches_finite_differences() {
        let dims = small();
        let vocab = Vocab::new(dims.vocab).unwrap();
        let verbalizer = default_verbalizer(&vocab).unwrap();
        let cfg = PretrainConfig {
            max_prefix: 5,
            ..PretrainConfig::default()
        };
        let mut rng = rng_from(3);
        for seed in 0..3 {
            let mut backbone = init_backbone::<f64>(seed, dims).unwrap();
            // Non-zero biases so their gradients are exercised at a generic point.
            for (i, x) in backbone.b1.iter_mut().enumerate() {
                *x = 0.01 * i as f64 - 0.05;
            }
            let (ids, label) = sample_sequence(&mut rng, &vocab, &cfg).unwrap();
            let (_, g) = backbone_grad(&backbone, &ids, &verbalizer, label).unwrap();
            let embed = g.embed_dense(dims);
            let mut analytic: Vec<&[f64]> = vec![embed.as_slice()];
            analytic.extend(g.dense());
            let analytic: Vec<Vec<f64>> = analytic.into_iter().map(<[f64]>::to_vec).collect();

            let eval = |b: &FrozenBackbone<f64>| {
                let empty = Matrix::zeros(0, dims.d_model);
                let t = forward_with_prefix(b, &empty, &ids, &verbalizer).unwrap();
                loss(&t.class_probs, label).unwrap()
            };
            let h = 1e-6;
            for (t, grad) in analytic.iter().enumerate() {
                let scale = grad.iter().fold(0.0f64, |a, x| a.max(x.abs()));
                // Entries touched by the sequence, plus a few arbitrary ones.
                let mut probe: Vec<usize> = (0..grad.len()).filter(|&i| grad[i] != 0.0).take(40).collect();
                probe.extend([0, grad.len() / 2, grad.len() - 1]);
                for i in probe {
                    let mut plus = backbone.clone();
                    bump(&mut plus, t, i, h);
                    let mut minus = backbone.clone();
                    bump(&mut minus, t, i, -h);
                    let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                    let rel = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(0.01 * scale).max(1e-9);
                    assert!(rel < 1e-5, "tensor {t} entry {i}: fd {fd:e} analytic {:e}", grad[i]);
                }
            }
        }
    }

    #[test]
    fn sequences_follow_the_task_rules() {
        let vocab = Vocab::new(1024).unwrap();
        let cfg = PretrainConfig::default();
        let direct = vocab.word_id(TASK_DIRECT);
        let flipped = vocab.word_id(TASK_FLIPPED);
        let pos: Vec<u32> = crate::data::synthetic::pool(1).iter().map(|w| vocab.word_id(w)).collect();
        let mut rng = rng_from(9);
        for _ in 0..200 {
            let (ids, target) = sample_sequence(&mut rng, &vocab, &cfg).unwrap();
            assert_eq!(&ids[ids.len() - 3..], &[LIT_IS, MASK, LIT_DOT]);
            let text = &ids[ids.len() - 3 - cfg.words_per_text..ids.len() - 3];
            let votes = text.iter().filter(|t| pos.contains(t)).count();
            if votes * 2 == text.len() {
                continue;
            }
            let class = usize::from(votes * 2 > text.len());
            let expected = if ids.contains(&direct) { class } else { 1 - class };
            assert!(!(ids.contains(&direct) && ids.contains(&flipped)));
            // Contamination can flip the majority, so only check clear cases.
            if votes <= 1 || votes + 1 >= text.len() {
                assert_eq!(target, expected, "{ids:?}");
            }
        }
    }

    #[test]
    fn short_pretraining_is_deterministic_and_lowers_loss() {
        let dims = small();
        let cfg = PretrainConfig {
            steps: 150,
            batch: 16,
            lr: 3e-3,
            max_prefix: 5,
            words_per_text: 8,
        };
        let (a, la) = pretrain(init_backbone::<f64>(1, dims).unwrap(), &cfg, 1).unwrap();
        let (b, lb) = pretrain(init_backbone::<f64>(1, dims).unwrap(), &cfg, 1).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
        assert_eq!(la, lb);
        assert!(la < std::f64::consts::LN_2, "loss {la}");
    }
}
