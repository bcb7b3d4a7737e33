use rand_chacha::ChaCha8Rng;

use super::attention::{self, AttentionContext, AttentionParams};
use super::lstm::{self, LstmParams, LstmState};
use super::params::{Binding, Group, ParamId, ParamStore};
use super::{GenerateFrom, ModelDims, ModelError};
use crate::autodiff::{Graph, Tensor, Var};

#[derive(Clone, Debug)]
pub struct DecoderParams {
    pub embedding: ParamId,
    pub lstm: LstmParams,
    pub out_w: ParamId,
    pub out_b: ParamId,
    pub vocab_size: usize,
}

impl DecoderParams {
    pub(crate) fn new(
        store: &mut ParamStore,
        prefix: &str,
        group: Group,
        dims: &ModelDims,
        enc_dim: usize,
        vocab_size: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let s = dims.init_scale;
        let embedding = store.add(
            format!("{prefix}.dec.embed"),
            group,
            &[vocab_size, dims.emb_dim],
            rng,
            s,
        );
        let lstm = LstmParams::new(
            store,
            &format!("{prefix}.dec.lstm"),
            group,
            dims.emb_dim + enc_dim,
            dims.dec_units,
            rng,
            s,
        );
        let out_w = store.add(
            format!("{prefix}.dec.out.w"),
            group,
            &[dims.dec_units + enc_dim, vocab_size],
            rng,
            s,
        );
        let out_b = store.add(
            format!("{prefix}.dec.out.b"),
            group,
            &[1, vocab_size],
            rng,
            s,
        );
        DecoderParams {
            embedding,
            lstm,
            out_w,
            out_b,
            vocab_size,
        }
    }
}

/// Attention plus decoder for one output direction.
#[derive(Clone, Debug)]
pub struct DecoderStack {
    pub group: Group,
    pub attention: AttentionParams,
    pub decoder: DecoderParams,
    pub generate_from: GenerateFrom,
}

#[derive(Clone, Copy, Debug)]
pub struct DecoderState {
    pub lstm: LstmState,
    pub alpha: Var,
}

/// Recurrent state detached from any graph, used to carry beam hypotheses.
#[derive(Clone, Debug, PartialEq)]
pub struct StateValues {
    pub h: Tensor,
    pub c: Tensor,
    pub alpha: Tensor,
}

impl StateValues {
    pub fn read(g: &Graph, s: &DecoderState) -> Self {
        StateValues {
            h: g.value(s.lstm.h).clone(),
            c: g.value(s.lstm.c).clone(),
            alpha: g.value(s.alpha).clone(),
        }
    }

    pub fn bind(&self, g: &Graph) -> DecoderState {
        DecoderState {
            lstm: LstmState::from_values(g, &self.h, &self.c),
            alpha: g.constant(self.alpha.clone()),
        }
    }
}

/// Teacher-forced outputs: one logit row per emitted step, the last one
/// predicting end-of-sequence.
pub struct DecodeOutput {
    pub logits: Var,
    pub log_probs: Var,
    pub alphas: Vec<Var>,
    pub steps: usize,
}

impl DecoderStack {
    pub fn vocab_size(&self) -> usize {
        self.decoder.vocab_size
    }

    pub fn initial_state(
        &self,
        g: &Graph,
        ctx: &AttentionContext,
        frame_mask: Option<&[bool]>,
    ) -> DecoderState {
        DecoderState {
            lstm: LstmState::zeros(g, self.decoder.lstm.units),
            alpha: g.constant(attention::initial_alignment(ctx.frames, frame_mask)),
        }
    }

    /// Decoder recurrence and output projection for a given context vector.
    /// Returns `(logits [1, V], new lstm state)`.
    pub fn decode_step(
        &self,
        g: &Graph,
        b: &Binding,
        y_prev: usize,
        prev: LstmState,
        context: Var,
    ) -> Result<(Var, LstmState), ModelError> {
        let d = &self.decoder;
        if y_prev >= d.vocab_size {
            return Err(ModelError::InvalidToken {
                id: y_prev,
                vocab: d.vocab_size,
            });
        }
        let emb = g.embedding(b.var(d.embedding), &[y_prev])?;
        let x = g.concat(&[emb, context], 1)?;
        let next = lstm::step(g, b, &d.lstm, x, prev)?;
        let h_out = match self.generate_from {
            GenerateFrom::Current => next.h,
            GenerateFrom::Previous => prev.h,
        };
        let joined = g.concat(&[h_out, context], 1)?;
        let logits = g.matmul(joined, b.var(d.out_w))?;
        let logits = g.add(logits, b.var(d.out_b))?;
        Ok((logits, next))
    }

    /// Attention followed by [`DecoderStack::decode_step`].
    pub fn step(
        &self,
        g: &Graph,
        b: &Binding,
        ctx: &AttentionContext,
        y_prev: usize,
        state: DecoderState,
    ) -> Result<(Var, DecoderState), ModelError> {
        let (alpha, context) =
            attention::attend(g, b, &self.attention, ctx, state.lstm.h, state.alpha)?;
        let (logits, lstm) = self.decode_step(g, b, y_prev, state.lstm, context)?;
        Ok((logits, DecoderState { lstm, alpha }))
    }

    /// Runs `targets.len() + 1` steps feeding `sos, y_1, .., y_K`.
    pub fn teacher_forced(
        &self,
        g: &Graph,
        b: &Binding,
        ctx: &AttentionContext,
        sos: usize,
        targets: &[usize],
        frame_mask: Option<&[bool]>,
    ) -> Result<DecodeOutput, ModelError> {
        let mut state = self.initial_state(g, ctx, frame_mask);
        let mut rows = Vec::with_capacity(targets.len() + 1);
        let mut alphas = Vec::with_capacity(targets.len() + 1);
        let inputs = std::iter::once(sos).chain(targets.iter().copied());
        for y_prev in inputs {
            let (logits, next) = self.step(g, b, ctx, y_prev, state)?;
            rows.push(logits);
            alphas.push(next.alpha);
            state = next;
        }
        let logits = g.concat(&rows, 0)?;
        let log_probs = g.log_softmax(logits, 1)?;
        Ok(DecodeOutput {
            logits,
            log_probs,
            alphas,
            steps: rows.len(),
        })
    }
}
