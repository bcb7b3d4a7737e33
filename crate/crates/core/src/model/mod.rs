//! Shared BLSTMP encoder with two attention decoders, one per output direction.

mod attention;
mod decoder;
mod encoder;
mod lstm;
mod params;


pub use attention::{attend, initial_alignment, prepare, AttentionContext, AttentionParams};
pub use decoder::{DecodeOutput, DecoderParams, DecoderStack, DecoderState, StateValues};
pub use encoder::{blstm, encode, EncoderLayer, EncoderParams};
pub use lstm::{LstmParams, LstmState};
pub use params::{
    read_checkpoint, Binding, Group, Param, ParamId, ParamStore, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::{AutodiffError, Graph, Tensor, Var};
use crate::tokenizer::{Direction, TokenSeq, VocabPair};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("feature dimension {got} does not match encoder input {expected}")]
    FeatureDim { expected: usize, got: usize },
    #[error("token id {id} invalid for vocabulary of size {vocab}")]
    InvalidToken { id: usize, vocab: usize },
    #[error("{what}: expected length {expected}, got {got}")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("target sequence is {got:?} but the {expected:?} decoder was requested")]
    DirectionMismatch { expected: Direction, got: Direction },
    #[error("gradients were already consumed by an optimizer step; call zero_grads first")]
    StaleGradients,
    #[error("checkpoint {path}: {msg}")]
    Checkpoint { path: String, msg: String },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
}

/// Which decoder state feeds the output projection.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GenerateFrom {
    /// The freshly updated state `h_k` (default).
    Current,
    /// The state before the update, `h_{k-1}`.
    Previous,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelDims {
    pub feat_dim: usize,
    pub enc_layers: usize,
    pub enc_units: usize,
    pub enc_proj: Option<usize>,
    pub enc_subsample: usize,
    pub att_dim: usize,
    pub conv_channels: usize,
    pub conv_width: usize,
    pub dec_units: usize,
    pub emb_dim: usize,
    pub init_scale: f64,
    pub generate_from: GenerateFrom,
}

impl Default for ModelDims {
    fn default() -> Self {
        ModelDims {
            feat_dim: 16,
            enc_layers: 1,
            enc_units: 32,
            enc_proj: Some(32),
            enc_subsample: 1,
            att_dim: 32,
            conv_channels: 8,
            conv_width: 11,
            dec_units: 32,
            emb_dim: 16,
            init_scale: 0.5,
            generate_from: GenerateFrom::Current,
        }
    }
}

impl ModelDims {
    pub fn validate(&self) -> Result<(), String> {
        let positive = [
            ("feat_dim", self.feat_dim),
            ("enc_layers", self.enc_layers),
            ("enc_units", self.enc_units),
            ("att_dim", self.att_dim),
            ("conv_channels", self.conv_channels),
            ("conv_width", self.conv_width),
            ("dec_units", self.dec_units),
            ("emb_dim", self.emb_dim),
            ("enc_subsample", self.enc_subsample),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(format!("{name} must be positive"));
        }
        if self.conv_width.is_multiple_of(2) {
            return Err("conv_width must be odd".into());
        }
        if self.enc_proj == Some(0) {
            return Err("enc_proj must be positive when set".into());
        }
        if !(self.init_scale >= 0.0) {
            return Err("init_scale must be non-negative".into());
        }
        Ok(())
    }
}

/// Start/end ids of one direction's vocabulary.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Specials {
    pub sos: usize,
    pub eos: usize,
}

#[derive(Clone, Debug)]
pub struct DualModel {
    pub dims: ModelDims,
    pub store: ParamStore,
    pub encoder: EncoderParams,
    pub forward: DecoderStack,
    pub backward: DecoderStack,
    pub specials: [Specials; 2],
}

/// Encoder states plus whichever decoder passes were requested.
pub struct PassOutput {
    pub h_enc: Var,
    pub l2r: Option<DecodeOutput>,
    pub r2l: Option<DecodeOutput>,
}

pub fn features_tensor(frames: usize, dim: usize, data: &[f32]) -> Tensor {
    Tensor::matrix(frames, dim, data.iter().map(|&x| f64::from(x)).collect())
}

impl DualModel {
    /// Parameters are drawn uniformly from `[-init_scale, init_scale]` in a
    /// fixed order: encoder, forward stack, backward stack.
    pub fn new(dims: &ModelDims, vocabs: &VocabPair, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::default();
        let encoder = EncoderParams::new(&mut store, dims, &mut rng);
        let enc_dim = encoder.output_dim;
        let mut stack =
            |prefix: &str, group: Group, vocab: usize, store: &mut ParamStore| DecoderStack {
                group,
                attention: AttentionParams::new(store, prefix, group, dims, enc_dim, &mut rng),
                decoder: DecoderParams::new(store, prefix, group, dims, enc_dim, vocab, &mut rng),
                generate_from: dims.generate_from,
            };
        let forward = stack("l2r", Group::Forward, vocabs.l2r.len(), &mut store);
        let backward = stack("r2l", Group::Backward, vocabs.r2l.len(), &mut store);
        let specials = [
            Specials {
                sos: vocabs.l2r.sos(),
                eos: vocabs.l2r.eos(),
            },
            Specials {
                sos: vocabs.r2l.sos(),
                eos: vocabs.r2l.eos(),
            },
        ];
        DualModel {
            dims: dims.clone(),
            store,
            encoder,
            forward,
            backward,
            specials,
        }
    }

    pub fn stack(&self, direction: Direction) -> &DecoderStack {
        match direction {
            Direction::L2R => &self.forward,
            Direction::R2L => &self.backward,
        }
    }

    pub fn specials(&self, direction: Direction) -> Specials {
        match direction {
            Direction::L2R => self.specials[0],
            Direction::R2L => self.specials[1],
        }
    }

    pub fn bind(&self, g: &Graph, groups: &[Group]) -> Binding {
        self.store.bind(g, groups)
    }

    pub fn encode(&self, g: &Graph, b: &Binding, features: &Tensor) -> Result<Var, ModelError> {
        let x = g.constant(features.clone());
        encode(g, b, &self.encoder, x)
    }

    /// Teacher-forced pass of one direction over precomputed encoder states.
    pub fn decode_direction(
        &self,
        g: &Graph,
        b: &Binding,
        h_enc: Var,
        target: &TokenSeq,
        direction: Direction,
        frame_mask: Option<&[bool]>,
    ) -> Result<DecodeOutput, ModelError> {
        if target.direction != direction {
            return Err(ModelError::DirectionMismatch {
                expected: direction,
                got: target.direction,
            });
        }
        let stack = self.stack(direction);
        let ctx = prepare(g, b, &stack.attention, h_enc, frame_mask)?;
        stack.teacher_forced(
            g,
            b,
            &ctx,
            self.specials(direction).sos,
            &target.ids,
            frame_mask,
        )
    }

    /// Runs the encoder once and each requested decoder on its own target.
    pub fn forward_pass(
        &self,
        g: &Graph,
        b: &Binding,
        features: &Tensor,
        l2r: Option<&TokenSeq>,
        r2l: Option<&TokenSeq>,
    ) -> Result<PassOutput, ModelError> {
        let h_enc = self.encode(g, b, features)?;
        let l2r = l2r
            .map(|t| self.decode_direction(g, b, h_enc, t, Direction::L2R, None))
            .transpose()?;
        let r2l = r2l
            .map(|t| self.decode_direction(g, b, h_enc, t, Direction::R2L, None))
            .transpose()?;
        Ok(PassOutput { h_enc, l2r, r2l })
    }
}
