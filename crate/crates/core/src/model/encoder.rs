use rand_chacha::ChaCha8Rng;

use super::lstm::{self, LstmParams, LstmState};
use super::params::{Binding, Group, ParamId, ParamStore};
use super::{ModelDims, ModelError};
use crate::autodiff::{Graph, Var};

/// One bidirectional layer with an optional `tanh` projection.
#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub forward: LstmParams,
    pub backward: LstmParams,
    pub projection: Option<(ParamId, ParamId)>,
    pub output_dim: usize,
}

#[derive(Clone, Debug)]
pub struct EncoderParams {
    pub layers: Vec<EncoderLayer>,
    pub input_dim: usize,
    pub output_dim: usize,
    /// Keep every `subsample`-th frame after each layer (1 keeps all).
    pub subsample: usize,
}

impl EncoderParams {
    pub(crate) fn new(store: &mut ParamStore, dims: &ModelDims, rng: &mut ChaCha8Rng) -> Self {
        let mut layers = Vec::with_capacity(dims.enc_layers);
        let mut input_dim = dims.feat_dim;
        for l in 0..dims.enc_layers {
            let prefix = format!("enc.l{l}");
            let n = dims.enc_units;
            let forward = LstmParams::new(
                store,
                &format!("{prefix}.fwd"),
                Group::Encoder,
                input_dim,
                n,
                rng,
                dims.init_scale,
            );
            let backward = LstmParams::new(
                store,
                &format!("{prefix}.bwd"),
                Group::Encoder,
                input_dim,
                n,
                rng,
                dims.init_scale,
            );
            let (projection, output_dim) = match dims.enc_proj {
                Some(p) => {
                    let w = store.add(
                        format!("{prefix}.proj.w"),
                        Group::Encoder,
                        &[2 * n, p],
                        rng,
                        dims.init_scale,
                    );
                    let b = store.add(
                        format!("{prefix}.proj.b"),
                        Group::Encoder,
                        &[1, p],
                        rng,
                        dims.init_scale,
                    );
                    (Some((w, b)), p)
                }
                None => (None, 2 * n),
            };
            layers.push(EncoderLayer {
                forward,
                backward,
                projection,
                output_dim,
            });
            input_dim = output_dim;
        }
        EncoderParams {
            layers,
            input_dim: dims.feat_dim,
            output_dim: input_dim,
            subsample: dims.enc_subsample.max(1),
        }
    }
}

fn run_direction(
    g: &Graph,
    b: &Binding,
    p: &LstmParams,
    x: Var,
    frames: usize,
    reverse: bool,
) -> Result<Var, ModelError> {
    let xw = g.matmul(x, b.var(p.input))?;
    let xw = g.add_row(xw, b.var(p.bias))?;
    let mut state = LstmState::zeros(g, p.units);
    let mut outputs = vec![state.h; frames];
    let order: Box<dyn Iterator<Item = usize>> = if reverse {
        Box::new((0..frames).rev())
    } else {
        Box::new(0..frames)
    };
    for t in order {
        let row = g.slice(xw, 0, t, 1)?;
        state = lstm::step_projected(g, b, p, row, state)?;
        outputs[t] = state.h;
    }
    Ok(g.concat(&outputs, 0)?)
}

/// Bidirectional LSTM over `[T, in]`, giving `[T, 2n]` with the forward
/// direction in the leading half.
pub fn blstm(g: &Graph, b: &Binding, layer: &EncoderLayer, x: Var) -> Result<Var, ModelError> {
    let frames = g.shape(x)[0];
    let f = run_direction(g, b, &layer.forward, x, frames, false)?;
    let r = run_direction(g, b, &layer.backward, x, frames, true)?;
    Ok(g.concat(&[f, r], 1)?)
}

/// Maps `[T, D]` features to encoder states `[T', E]`.
pub fn encode(g: &Graph, b: &Binding, p: &EncoderParams, features: Var) -> Result<Var, ModelError> {
    let shape = g.shape(features);
    if shape.len() != 2 || shape[1] != p.input_dim {
        return Err(ModelError::FeatureDim {
            expected: p.input_dim,
            got: shape.get(1).copied().unwrap_or(0),
        });
    }
    let mut h = features;
    for layer in &p.layers {
        h = blstm(g, b, layer, h)?;
        if let Some((w, bias)) = layer.projection {
            let proj = g.matmul(h, b.var(w))?;
            let proj = g.add_row(proj, b.var(bias))?;
            h = g.tanh(proj);
        }
        if p.subsample > 1 {
            let frames = g.shape(h)[0];
            let keep: Vec<usize> = (0..frames).step_by(p.subsample).collect();
            h = g.select_rows(h, &keep)?;
        }
    }
    Ok(h)
}
