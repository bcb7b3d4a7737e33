use rand_chacha::ChaCha8Rng;

use super::params::{Binding, Group, ParamId, ParamStore};
use crate::autodiff::{AutodiffError, Graph, Tensor, Var};

/// Weights of one LSTM; gate columns are laid out `[input | forget | output | candidate]`.
#[derive(Clone, Debug)]
pub struct LstmParams {
    pub input: ParamId,
    pub recurrent: ParamId,
    pub bias: ParamId,
    pub input_dim: usize,
    pub units: usize,
}

impl LstmParams {
    pub(crate) fn new(
        store: &mut ParamStore,
        prefix: &str,
        group: Group,
        input_dim: usize,
        units: usize,
        rng: &mut ChaCha8Rng,
        scale: f64,
    ) -> Self {
        LstmParams {
            input: store.add(
                format!("{prefix}.w_in"),
                group,
                &[input_dim, 4 * units],
                rng,
                scale,
            ),
            recurrent: store.add(
                format!("{prefix}.w_rec"),
                group,
                &[units, 4 * units],
                rng,
                scale,
            ),
            bias: store.add(format!("{prefix}.bias"), group, &[1, 4 * units], rng, scale),
            input_dim,
            units,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LstmState {
    pub h: Var,
    pub c: Var,
}

impl LstmState {
    pub fn zeros(g: &Graph, units: usize) -> Self {
        LstmState {
            h: g.constant(Tensor::zeros(&[1, units])),
            c: g.constant(Tensor::zeros(&[1, units])),
        }
    }

    pub fn from_values(g: &Graph, h: &Tensor, c: &Tensor) -> Self {
        LstmState {
            h: g.constant(h.clone()),
            c: g.constant(c.clone()),
        }
    }
}

/// One recurrence given the precomputed input projection `x W_in + b` (`[1, 4n]`).
pub fn step_projected(
    g: &Graph,
    b: &Binding,
    p: &LstmParams,
    projected: Var,
    prev: LstmState,
) -> Result<LstmState, AutodiffError> {
    let n = p.units;
    let rec = g.matmul(prev.h, b.var(p.recurrent))?;
    let z = g.add(projected, rec)?;
    let sig = g.slice(z, 1, 0, 3 * n)?;
    let sig = g.sigmoid(sig);
    let i = g.slice(sig, 1, 0, n)?;
    let f = g.slice(sig, 1, n, n)?;
    let o = g.slice(sig, 1, 2 * n, n)?;
    let cand = g.slice(z, 1, 3 * n, n)?;
    let cand = g.tanh(cand);
    let keep = g.mul(f, prev.c)?;
    let write = g.mul(i, cand)?;
    let c = g.add(keep, write)?;
    let h = g.mul(o, g.tanh(c))?;
    Ok(LstmState { h, c })
}

/// One recurrence from a raw `[1, input_dim]` input.
pub fn step(
    g: &Graph,
    b: &Binding,
    p: &LstmParams,
    x: Var,
    prev: LstmState,
) -> Result<LstmState, AutodiffError> {
    let xw = g.matmul(x, b.var(p.input))?;
    let projected = g.add(xw, b.var(p.bias))?;
    step_projected(g, b, p, projected, prev)
}
