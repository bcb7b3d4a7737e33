//! Content-based, location-aware attention.
//!
//! Scores are `e[t] = w^T tanh(W s + V h[t] + U f[t] + b)` where `s` is the
//! previous decoder state, `h[t]` an encoder state and `f = F * alpha_prev`
//! the previous alignment convolved with a bank of `channels` filters.

use rand_chacha::ChaCha8Rng;

use super::params::{Binding, Group, ParamId, ParamStore};
use super::{ModelDims, ModelError};
use crate::autodiff::{Graph, Tensor, Var};

#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub dec_proj: ParamId,
    pub enc_proj: ParamId,
    pub loc_proj: ParamId,
    pub conv: ParamId,
    pub score: ParamId,
    pub bias: ParamId,
    pub att_dim: usize,
}

impl AttentionParams {
    pub(crate) fn new(
        store: &mut ParamStore,
        prefix: &str,
        group: Group,
        dims: &ModelDims,
        enc_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let a = dims.att_dim;
        let s = dims.init_scale;
        AttentionParams {
            dec_proj: store.add(
                format!("{prefix}.att.w"),
                group,
                &[dims.dec_units, a],
                rng,
                s,
            ),
            enc_proj: store.add(format!("{prefix}.att.v"), group, &[enc_dim, a], rng, s),
            loc_proj: store.add(
                format!("{prefix}.att.u"),
                group,
                &[dims.conv_channels, a],
                rng,
                s,
            ),
            conv: store.add(
                format!("{prefix}.att.f"),
                group,
                &[dims.conv_channels, dims.conv_width],
                rng,
                s,
            ),
            score: store.add(format!("{prefix}.att.score"), group, &[a, 1], rng, s),
            bias: store.add(format!("{prefix}.att.b"), group, &[1, a], rng, s),
            att_dim: a,
        }
    }
}

/// Per-utterance quantities that do not change across decoder steps.
#[derive(Clone, Copy, Debug)]
pub struct AttentionContext {
    pub h_enc: Var,
    pub enc_projected: Var,
    pub mask: Option<Var>,
    pub frames: usize,
}

/// `frame_mask[t] == false` marks padding; those frames get zero weight.
pub fn prepare(
    g: &Graph,
    b: &Binding,
    p: &AttentionParams,
    h_enc: Var,
    frame_mask: Option<&[bool]>,
) -> Result<AttentionContext, ModelError> {
    let frames = g.shape(h_enc)[0];
    let enc_projected = g.matmul(h_enc, b.var(p.enc_proj))?;
    let mask = match frame_mask {
        None => None,
        Some(m) if m.len() != frames => {
            return Err(ModelError::LengthMismatch {
                what: "frame mask",
                expected: frames,
                got: m.len(),
            })
        }
        Some(m) => {
            let data = m
                .iter()
                .map(|&keep| if keep { 0.0 } else { f64::NEG_INFINITY })
                .collect();
            Some(g.constant(Tensor::matrix(frames, 1, data)))
        }
    };
    Ok(AttentionContext {
        h_enc,
        enc_projected,
        mask,
        frames,
    })
}

/// Uniform initial alignment over the unmasked frames, shaped `[T, 1]`.
pub fn initial_alignment(frames: usize, frame_mask: Option<&[bool]>) -> Tensor {
    let keep: Vec<bool> = frame_mask
        .map(<[bool]>::to_vec)
        .unwrap_or_else(|| vec![true; frames]);
    let live = keep.iter().filter(|&&k| k).count().max(1) as f64;
    Tensor::matrix(
        frames,
        1,
        keep.iter()
            .map(|&k| if k { 1.0 / live } else { 0.0 })
            .collect(),
    )
}

/// Returns `(alpha_k [T, 1], context [1, E])`.
pub fn attend(
    g: &Graph,
    b: &Binding,
    p: &AttentionParams,
    ctx: &AttentionContext,
    h_dec_prev: Var,
    alpha_prev: Var,
) -> Result<(Var, Var), ModelError> {
    let alen = g.value(alpha_prev).len();
    if alen != ctx.frames {
        return Err(ModelError::LengthMismatch {
            what: "previous alignment",
            expected: ctx.frames,
            got: alen,
        });
    }
    let dec = g.matmul(h_dec_prev, b.var(p.dec_proj))?;
    let dec = g.add(dec, b.var(p.bias))?;
    let loc = g.conv1d(alpha_prev, b.var(p.conv))?;
    let loc = g.matmul(loc, b.var(p.loc_proj))?;
    let pre = g.add(ctx.enc_projected, loc)?;
    let pre = g.add_row(pre, dec)?;
    let act = g.tanh(pre);
    let mut scores = g.matmul(act, b.var(p.score))?;
    if let Some(mask) = ctx.mask {
        scores = g.add(scores, mask)?;
    }
    let alpha = g.softmax(scores, 0)?;
    let alpha_t = g.transpose(alpha)?;
    let context = g.matmul(alpha_t, ctx.h_enc)?;
    Ok((alpha, context))
}
