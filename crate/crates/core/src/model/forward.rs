//! Forward pass, loss, prompt gradient and prediction.
//!
//! Only the `[MASK]` row of the block output feeds the verbalizer, so keys
//! and values are computed for every position while the query, attention
//! and feed-forward layer run for the mask row alone.

use crate::error::{Error, Result};
use crate::model::backbone::FrozenBackbone;
use crate::model::prompt::PromptTensor;
use crate::model::verbalizer::Verbalizer;
use crate::model::vocab::TemplatedSeq;
use crate::model::EncodedExample;
use crate::scalar::{axpy, dot, Scalar};
use crate::tensor::Matrix;

pub const PROB_FLOOR: f64 = 1e-12;

/// Cached activations of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace<S> {
    pub mask_index: usize,
    pub prefix_len: usize,
    pub(crate) states: Matrix<S>,
    pub(crate) keys: Matrix<S>,
    pub(crate) values: Matrix<S>,
    pub(crate) query: Vec<S>,
    pub(crate) attn: Vec<S>,
    pub(crate) context: Vec<S>,
    pub(crate) resid: Vec<S>,
    pub(crate) pre_act: Vec<S>,
    pub(crate) hidden: Vec<S>,
    pub h_mask: Vec<S>,
    /// Probabilities over the verbalizer's label words (restricted softmax).
    pub word_probs: Vec<S>,
    pub class_probs: Vec<S>,
}

impl<S: Scalar> ForwardTrace<S> {
    pub fn attention(&self) -> &[S] {
        &self.attn
    }
}

/// Numerically stable softmax, in place.
pub(crate) fn softmax_in_place<S: Scalar>(xs: &mut [S]) {
    let max = xs.iter().copied().fold(S::neg_infinity(), S::max);
    let mut total = S::zero();
    for x in xs.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in xs.iter_mut() {
        *x /= total;
    }
}

/// Forward pass with the soft prompt as prefix.
pub fn forward<S: Scalar>(
    backbone: &FrozenBackbone<S>,
    prompt: &PromptTensor<S>,
    seq: &TemplatedSeq,
    verbalizer: &Verbalizer,
) -> Result<ForwardTrace<S>> {
    if seq.prompt_len != prompt.m() {
        return Err(Error::ShapeMismatch(format!(
            "sequence templated for {} soft positions but prompt has {}",
            seq.prompt_len,
            prompt.m()
        )));
    }
    forward_with_prefix(backbone, prompt.matrix(), &seq.token_ids, verbalizer)
}

/// Forward pass over `prefix` rows followed by the embedded `token_ids`.
/// The mask is expected at the second-to-last token (template layout).
pub fn forward_with_prefix<S: Scalar>(
    backbone: &FrozenBackbone<S>,
    prefix: &Matrix<S>,
    token_ids: &[u32],
    verbalizer: &Verbalizer,
) -> Result<ForwardTrace<S>> {
    let d = backbone.d_model();
    let dims = backbone.dims();
    let m = prefix.rows();
    let len = m + token_ids.len();
    if prefix.cols() != d {
        return Err(Error::invalid(format!(
            "prefix width {} does not match model width {d}",
            prefix.cols()
        )));
    }
    if token_ids.len() < 2 {
        return Err(Error::invalid("templated sequence too short"));
    }
    if len > dims.max_positions {
        return Err(Error::invalid(format!(
            "sequence of {len} positions exceeds the position table ({})",
            dims.max_positions
        )));
    }
    if let Some(&bad) = token_ids.iter().find(|&&t| t >= dims.vocab) {
        return Err(Error::invalid(format!("token id {bad} outside vocabulary")));
    }
    let mask_index = len - 2;

    let mut states = Matrix::zeros(len, d);
    for j in 0..len {
        let src = if j < m {
            prefix.row(j)
        } else {
            backbone.embedding(token_ids[j - m])
        };
        let pos = backbone.pos.row(j);
        for ((o, &a), &b) in states.row_mut(j).iter_mut().zip(src).zip(pos) {
            *o = a + b;
        }
    }

    let mut keys = Matrix::zeros(len, d);
    let mut values = Matrix::zeros(len, d);
    for j in 0..len {
        backbone.wk.vec_mul(states.row(j), keys.row_mut(j));
        backbone.wv.vec_mul(states.row(j), values.row_mut(j));
    }
    let mut query = vec![S::zero(); d];
    backbone.wq.vec_mul(states.row(mask_index), &mut query);

    let scale = S::one() / S::of(d as f64).sqrt();
    let mut attn: Vec<S> = (0..len).map(|j| dot(&query, keys.row(j)) * scale).collect();
    softmax_in_place(&mut attn);

    let mut context = vec![S::zero(); d];
    for (j, &a) in attn.iter().enumerate() {
        axpy(a, values.row(j), &mut context);
    }

    let mut resid = vec![S::zero(); d];
    backbone.wo.vec_mul(&context, &mut resid);
    for (r, &x) in resid.iter_mut().zip(states.row(mask_index)) {
        *r += x;
    }

    let mut pre_act = vec![S::zero(); dims.d_ff];
    backbone.w1.vec_mul(&resid, &mut pre_act);
    for (u, &b) in pre_act.iter_mut().zip(&backbone.b1) {
        *u += b;
    }
    let hidden: Vec<S> = pre_act.iter().map(|&u| u.max(S::zero())).collect();

    let mut h_mask = vec![S::zero(); d];
    backbone.w2.vec_mul(&hidden, &mut h_mask);
    for ((z, &y), &b) in h_mask.iter_mut().zip(&resid).zip(&backbone.b2) {
        *z += y + b;
    }
    if !crate::scalar::all_finite(&h_mask) {
        return Err(Error::numerical("non-finite hidden state at [MASK]"));
    }

    let mut word_probs: Vec<S> = verbalizer
        .label_ids()
        .iter()
        .map(|&w| dot(&h_mask, backbone.embedding(w)))
        .collect();
    if !crate::scalar::all_finite(&word_probs) {
        return Err(Error::numerical("non-finite label-word score"));
    }
    softmax_in_place(&mut word_probs);

    let mut class_probs = vec![S::zero(); verbalizer.num_classes()];
    for (&p, &c) in word_probs.iter().zip(verbalizer.owners()) {
        class_probs[c] += p;
    }

    Ok(ForwardTrace {
        mask_index,
        prefix_len: m,
        states,
        keys,
        values,
        query,
        attn,
        context,
        resid,
        pre_act,
        hidden,
        h_mask,
        word_probs,
        class_probs,
    })
}

/// Cross-entropy `-ln(max(p[label], 1e-12))`.
pub fn loss<S: Scalar>(class_probs: &[S], label: usize) -> Result<S> {
    let p = class_probs
        .get(label)
        .copied()
        .ok_or_else(|| Error::invalid(format!("label {label} out of range")))?;
    Ok(-p.max(S::of(PROB_FLOOR)).ln())
}

/// Argmax with ties going to the lowest class id.
pub fn argmax_first<S: Scalar>(xs: &[S]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

pub fn predict<S: Scalar>(
    backbone: &FrozenBackbone<S>,
    prompt: &PromptTensor<S>,
    seq: &TemplatedSeq,
    verbalizer: &Verbalizer,
) -> Result<usize> {
    Ok(argmax_first(&forward(backbone, prompt, seq, verbalizer)?.class_probs))
}

/// Gradients flowing back from the loss to the attention layer, shared by
/// the prompt gradient and full-backbone pre-training.
pub(crate) struct HeadGrads<S> {
    /// dL/d(label-word score), one per verbalizer entry.
    pub score: Vec<S>,
    /// dL/dz at the mask row.
    pub h_mask: Vec<S>,
    /// dL/du (pre-activation of the feed-forward layer).
    pub pre_act: Vec<S>,
    /// dL/dy (post-attention residual stream).
    pub resid: Vec<S>,
    /// dL/dc (attention context).
    pub context: Vec<S>,
    /// dL/d(attention logit), per position, already divided by sqrt(d).
    pub logits: Vec<S>,
}

pub(crate) fn head_backward<S: Scalar>(
    backbone: &FrozenBackbone<S>,
    trace: &ForwardTrace<S>,
    verbalizer: &Verbalizer,
    label: usize,
) -> Result<HeadGrads<S>> {
    let d = backbone.d_model();
    let p_class = *trace
        .class_probs
        .get(label)
        .ok_or_else(|| Error::invalid(format!("label {label} out of range")))?;

    // d/ds_u of -ln P_c = p_u - [u in c] p_u / P_c; zero where the clamp is active.
    let clamped = p_class < S::of(PROB_FLOOR);
    let score: Vec<S> = trace
        .word_probs
        .iter()
        .zip(verbalizer.owners())
        .map(|(&p, &owner)| {
            if clamped {
                S::zero()
            } else if owner == label {
                p - p / p_class
            } else {
                p
            }
        })
        .collect();

    let mut dz = vec![S::zero(); d];
    for (&g, &w) in score.iter().zip(verbalizer.label_ids()) {
        axpy(g, backbone.embedding(w), &mut dz);
    }

    let mut dr = vec![S::zero(); backbone.dims().d_ff];
    backbone.w2.mul_vec(&dz, &mut dr);
    let du: Vec<S> = dr
        .iter()
        .zip(&trace.pre_act)
        .map(|(&g, &u)| if u > S::zero() { g } else { S::zero() })
        .collect();
    let mut dy = vec![S::zero(); d];
    backbone.w1.mul_vec(&du, &mut dy);
    for (a, &b) in dy.iter_mut().zip(&dz) {
        *a += b;
    }

    let mut dc = vec![S::zero(); d];
    backbone.wo.mul_vec(&dy, &mut dc);

    let da: Vec<S> = (0..trace.attn.len())
        .map(|j| dot(&dc, trace.values.row(j)))
        .collect();
    let mean = dot(&trace.attn, &da);
    let scale = S::one() / S::of(d as f64).sqrt();
    let logits = trace
        .attn
        .iter()
        .zip(&da)
        .map(|(&a, &g)| a * (g - mean) * scale)
        .collect();

    Ok(HeadGrads {
        score,
        h_mask: dz,
        pre_act: du,
        resid: dy,
        context: dc,
        logits,
    })
}

/// Exact gradient of the loss with respect to the prompt rows. The
/// backbone only enters as a constant.
pub fn grad_prompt<S: Scalar>(
    backbone: &FrozenBackbone<S>,
    prompt: &PromptTensor<S>,
    example: &EncodedExample,
    verbalizer: &Verbalizer,
) -> Result<(S, Matrix<S>)> {
    let mut grad = Matrix::zeros(prompt.m(), prompt.d());
    let loss = accumulate_grad_prompt(backbone, prompt, example, verbalizer, S::one(), &mut grad)?;
    Ok((loss, grad))
}

/// Adds `weight * dL/dP` into `grad` and returns the unweighted loss.
pub fn accumulate_grad_prompt<S: Scalar>(
    backbone: &FrozenBackbone<S>,
    prompt: &PromptTensor<S>,
    example: &EncodedExample,
    verbalizer: &Verbalizer,
    weight: S,
    grad: &mut Matrix<S>,
) -> Result<S> {
    let trace = forward(backbone, prompt, &example.seq, verbalizer)?;
    let loss = loss(&trace.class_probs, example.label)?;
    let head = head_backward(backbone, &trace, verbalizer, example.label)?;
    let d = backbone.d_model();
    let mut dk = vec![S::zero(); d];
    let mut tmp = vec![S::zero(); d];
    for j in 0..prompt.m() {
        // dk_j = dlogit_j * q ; dv_j = a_j * dc
        for (o, &q) in dk.iter_mut().zip(&trace.query) {
            *o = head.logits[j] * q;
        }
        backbone.wk.mul_vec(&dk, &mut tmp);
        let row = grad.row_mut(j);
        axpy(weight, &tmp, row);
        backbone.wv.mul_vec(&head.context, &mut tmp);
        axpy(weight * trace.attn[j], &tmp, row);
    }
    if !grad.is_finite() {
        return Err(Error::numerical("non-finite prompt gradient"));
    }
    Ok(loss)
}
