//! Cross-entropy, the two agreement regularizers and the weighted combination
//! used for joint training.

mod softdtw;


pub use softdtw::{
    hard_dtw, oracle_enumerate_paths, oracle_softdtw, softdtw, softdtw_with_grad, softmin,
    AlignmentMatrix, ENUMERATION_LIMIT,
};

use std::str::FromStr;

use thiserror::Error;

use crate::autodiff::{AutodiffError, CustomOp, Graph, Tensor, Var};
use crate::tokenizer::{VocabKind, VocabPair};

/// Log-probability floor applied to the gold token, `ln(1e-300)`.
pub const PROB_FLOOR: f64 = 1e-300;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("{what} is empty")]
    Empty { what: &'static str },
    #[error("{name} = {value} is out of range")]
    InvalidWeight { name: &'static str, value: f64 },
    #[error("{what}: {left} vs {right} steps")]
    LengthMismatch {
        what: &'static str,
        left: usize,
        right: usize,
    },
    #[error("{what} has unexpected shape {shape:?}")]
    Shape {
        what: &'static str,
        shape: Vec<usize>,
    },
    #[error("non-finite cost at ({row}, {col})")]
    NonFiniteCost { row: usize, col: usize },
    #[error("path enumeration limited to {limit}x{limit}, asked for {rows}x{cols}")]
    EnumerationBound {
        rows: usize,
        cols: usize,
        limit: usize,
    },
    #[error("token {id} outside vocabulary of size {vocab}")]
    TokenRange { id: usize, vocab: usize },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

/// Mean negative log-likelihood with a flag set when any gold probability
/// fell below [`PROB_FLOOR`].
#[derive(Clone, Copy, Debug)]
pub struct CrossEntropy {
    pub loss: Var,
    pub clamped: bool,
}

/// `targets` followed by `eos`: the gold labels of a teacher-forced pass.
pub fn with_eos(targets: &[usize], eos: usize) -> Vec<usize> {
    targets
        .iter()
        .copied()
        .chain(std::iter::once(eos))
        .collect()
}

/// `-(1/S) Σ_k log p_k(gold_k)` over a `[S, V]` log-probability matrix.
pub fn cross_entropy(g: &Graph, log_probs: Var, gold: &[usize]) -> Result<CrossEntropy, LossError> {
    let shape = g.shape(log_probs);
    if shape.len() != 2 {
        return Err(LossError::Shape {
            what: "log-probabilities",
            shape,
        });
    }
    let (steps, v) = (shape[0], shape[1]);
    if steps != gold.len() {
        return Err(LossError::LengthMismatch {
            what: "cross-entropy steps vs gold labels",
            left: steps,
            right: gold.len(),
        });
    }
    if let Some(&id) = gold.iter().find(|&&y| y >= v) {
        return Err(LossError::TokenRange { id, vocab: v });
    }
    let floor = PROB_FLOOR.ln();
    let mut live = Vec::with_capacity(steps);
    let mut clamped = 0usize;
    {
        let lp = g.value(log_probs);
        for (k, &y) in gold.iter().enumerate() {
            let idx = k * v + y;
            if lp.data()[idx] < floor || lp.data()[idx].is_nan() {
                clamped += 1;
            } else {
                live.push(idx);
            }
        }
    }
    let mut total = if live.is_empty() {
        g.constant(Tensor::scalar(0.0))
    } else {
        g.sum(g.gather(log_probs, &live)?)
    };
    if clamped > 0 {
        total = g.add(total, g.constant(Tensor::scalar(clamped as f64 * floor)))?;
    }
    Ok(CrossEntropy {
        loss: g.scale(total, -1.0 / steps as f64),
        clamped: clamped > 0,
    })
}

struct RowNorms;

impl CustomOp for RowNorms {
    fn name(&self) -> &'static str {
        "row_norms"
    }

    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad_output: &[f64]) -> Vec<Vec<f64>> {
        let x = inputs[0];
        let cols = x.cols();
        let mut gx = vec![0.0; x.len()];
        for (i, (&n, &go)) in output.data().iter().zip(grad_output).enumerate() {
            if n > 0.0 {
                for j in 0..cols {
                    gx[i * cols + j] = go * x.at2(i, j) / n;
                }
            }
        }
        vec![gx]
    }
}

/// Euclidean norm of each row of a matrix, shaped `[rows, 1]`. The gradient
/// at a zero row is taken to be zero.
pub fn row_norms(g: &Graph, x: Var) -> Result<Var, LossError> {
    let out = {
        let xv = g.value(x);
        if xv.rank() != 2 {
            return Err(LossError::Shape {
                what: "row_norms input",
                shape: xv.shape().to_vec(),
            });
        }
        let norms = (0..xv.rows())
            .map(|i| xv.row(i).iter().map(|a| a * a).sum::<f64>().sqrt())
            .collect();
        Tensor::matrix(xv.rows(), 1, norms)
    };
    Ok(g.custom(&[x], out, Box::new(RowNorms)))
}

/// `(1/K) Σ_k ‖a_k − b_k‖₂` between two step sequences of equal length.
pub fn omega_l2(g: &Graph, a: Var, b: Var) -> Result<Var, LossError> {
    let (sa, sb) = (g.shape(a), g.shape(b));
    if sa.len() != 2 || sb.len() != 2 {
        return Err(LossError::Shape {
            what: "omega_l2 input",
            shape: if sa.len() != 2 { sa } else { sb },
        });
    }
    if sa[0] != sb[0] {
        return Err(LossError::LengthMismatch {
            what: "omega_l2 needs equal step counts",
            left: sa[0],
            right: sb[0],
        });
    }
    let diff = g.sub(a, b)?;
    let norms = row_norms(g, diff)?;
    Ok(g.mean(norms))
}

/// Per-step distance used inside soft-DTW.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Distance {
    SquaredEuclidean,
    Euclidean,
}

impl FromStr for Distance {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "sqeuclidean" | "squared_euclidean" => Ok(Distance::SquaredEuclidean),
            "euclidean" => Ok(Distance::Euclidean),
            other => Err(format!(
                "unknown distance {other:?} (expected sqeuclidean or euclidean)"
            )),
        }
    }
}

impl Distance {
    pub fn as_str(self) -> &'static str {
        match self {
            Distance::SquaredEuclidean => "sqeuclidean",
            Distance::Euclidean => "euclidean",
        }
    }
}

struct Pairwise {
    distance: Distance,
}

impl CustomOp for Pairwise {
    fn name(&self) -> &'static str {
        "pairwise_distance"
    }

    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad_output: &[f64]) -> Vec<Vec<f64>> {
        let (a, b) = (inputs[0], inputs[1]);
        let (k, l, v) = (a.rows(), b.rows(), a.cols());
        let mut ga = vec![0.0; a.len()];
        let mut gb = vec![0.0; b.len()];
        for i in 0..k {
            for j in 0..l {
                let go = grad_output[i * l + j];
                let w = match self.distance {
                    Distance::SquaredEuclidean => 2.0 * go,
                    Distance::Euclidean => {
                        let d = output.data()[i * l + j];
                        if d > 0.0 {
                            go / d
                        } else {
                            0.0
                        }
                    }
                };
                if w == 0.0 {
                    continue;
                }
                for c in 0..v {
                    let diff = a.at2(i, c) - b.at2(j, c);
                    ga[i * v + c] += w * diff;
                    gb[j * v + c] -= w * diff;
                }
            }
        }
        vec![ga, gb]
    }
}

/// `[K, L]` matrix of distances between the rows of `a` `[K, V]` and `b` `[L, V]`.
pub fn pairwise_distance(g: &Graph, a: Var, b: Var, distance: Distance) -> Result<Var, LossError> {
    let out = {
        let (av, bv) = (g.value(a), g.value(b));
        if av.rank() != 2 || bv.rank() != 2 || av.cols() != bv.cols() {
            return Err(AutodiffError::ShapeMismatch {
                op: "pairwise_distance",
                left: av.shape().to_vec(),
                right: bv.shape().to_vec(),
            }
            .into());
        }
        let (k, l) = (av.rows(), bv.rows());
        let mut d = Vec::with_capacity(k * l);
        for i in 0..k {
            for j in 0..l {
                let sq: f64 = av
                    .row(i)
                    .iter()
                    .zip(bv.row(j))
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum();
                d.push(match distance {
                    Distance::SquaredEuclidean => sq,
                    Distance::Euclidean => sq.sqrt(),
                });
            }
        }
        Tensor::matrix(k, l, d)
    };
    Ok(g.custom(&[a, b], out, Box::new(Pairwise { distance })))
}

struct SoftDtwOp {
    grad: Tensor,
}

impl CustomOp for SoftDtwOp {
    fn name(&self) -> &'static str {
        "softdtw"
    }

    fn backward(
        &self,
        _inputs: &[&Tensor],
        _output: &Tensor,
        grad_output: &[f64],
    ) -> Vec<Vec<f64>> {
        vec![self
            .grad
            .data()
            .iter()
            .map(|e| e * grad_output[0])
            .collect()]
    }
}

/// Soft-DTW of a cost matrix held in the graph; the expected alignment is
/// computed on the forward pass and reused by the backward pass.
pub fn softdtw_var(g: &Graph, delta: Var, gamma: f64) -> Result<Var, LossError> {
    let (value, grad) = softdtw_with_grad(&g.value(delta), gamma)?;
    Ok(g.custom(
        &[delta],
        Tensor::scalar(value),
        Box::new(SoftDtwOp { grad }),
    ))
}

/// Soft-DTW between two step sequences of possibly different lengths.
pub fn omega_softdtw(
    g: &Graph,
    a: Var,
    b: Var,
    gamma: f64,
    distance: Distance,
) -> Result<Var, LossError> {
    let delta = pairwise_distance(g, a, b, distance)?;
    softdtw_var(g, delta, gamma)
}

/// What the regularizer compares at each step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OmegaInput {
    Probabilities,
    LogProbabilities,
}

impl FromStr for OmegaInput {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "probs" | "probabilities" => Ok(OmegaInput::Probabilities),
            "logprobs" | "log_probabilities" => Ok(OmegaInput::LogProbabilities),
            other => Err(format!(
                "unknown omega input {other:?} (expected probs or logprobs)"
            )),
        }
    }
}

impl OmegaInput {
    pub fn as_str(self) -> &'static str {
        match self {
            OmegaInput::Probabilities => "probs",
            OmegaInput::LogProbabilities => "logprobs",
        }
    }
}

/// Which decoder receives the regularizer's gradient.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OmegaGrad {
    Both,
    ForwardOnly,
    BackwardOnly,
}

impl FromStr for OmegaGrad {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "both" => Ok(OmegaGrad::Both),
            "forward" => Ok(OmegaGrad::ForwardOnly),
            "backward" => Ok(OmegaGrad::BackwardOnly),
            other => Err(format!(
                "unknown omega gradient mode {other:?} (expected both, forward or backward)"
            )),
        }
    }
}

impl OmegaGrad {
    pub fn as_str(self) -> &'static str {
        match self {
            OmegaGrad::Both => "both",
            OmegaGrad::ForwardOnly => "forward",
            OmegaGrad::BackwardOnly => "backward",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub alpha: f64,
    pub lambda: f64,
    pub gamma: f64,
    pub distance: Distance,
    pub omega_input: OmegaInput,
    pub omega_grad: OmegaGrad,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: 0.9,
            lambda: 0.0,
            gamma: 1.0,
            distance: Distance::SquaredEuclidean,
            omega_input: OmegaInput::Probabilities,
            omega_grad: OmegaGrad::Both,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), LossError> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(LossError::InvalidWeight {
                name: "alpha",
                value: self.alpha,
            });
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(LossError::InvalidWeight {
                name: "lambda",
                value: self.lambda,
            });
        }
        if !(self.gamma >= 0.0) || !self.gamma.is_finite() {
            return Err(LossError::InvalidWeight {
                name: "gamma",
                value: self.gamma,
            });
        }
        Ok(())
    }
}

/// Regularizer selected by target kind: L2 when both decoders share one
/// character vocabulary, soft-DTW over union-vocabulary embeddings otherwise.
#[derive(Clone, Debug, PartialEq)]
pub enum Omega {
    L2,
    SoftDtw {
        union_size: usize,
        l2r_map: Vec<usize>,
        r2l_map: Vec<usize>,
    },
}

impl Omega {
    pub fn for_vocabs(vocabs: &VocabPair) -> Omega {
        match vocabs.kind() {
            VocabKind::Char => Omega::L2,
            VocabKind::Bpe => {
                let u = vocabs.union();
                Omega::SoftDtw {
                    union_size: u.size,
                    l2r_map: u.l2r,
                    r2l_map: u.r2l,
                }
            }
        }
    }
}

/// Teacher-forced output of one decoder, ready for the loss.
#[derive(Clone, Copy, Debug)]
pub struct DirectionOutput<'a> {
    /// `[K+1, V]` log-probabilities, last row for end-of-sequence.
    pub log_probs: Var,
    /// Gold labels including the trailing eos.
    pub gold: &'a [usize],
}

/// Addends of the joint objective, each reported separately.
#[derive(Clone, Copy, Debug)]
pub struct LossBundle {
    pub ce_forward: f64,
    pub ce_backward: f64,
    pub omega: f64,
    pub total: f64,
    pub alpha: f64,
    pub lambda: f64,
    pub gamma: f64,
    pub clamped: bool,
    pub total_var: Var,
}

fn regularizer_input(
    g: &Graph,
    out: &DirectionOutput,
    input: OmegaInput,
    reverse: bool,
) -> Result<Var, LossError> {
    let steps = out.gold.len() - 1;
    let rows: Vec<usize> = if reverse {
        (0..steps).rev().collect()
    } else {
        (0..steps).collect()
    };
    let lp = g.select_rows(out.log_probs, &rows)?;
    Ok(match input {
        OmegaInput::Probabilities => g.softmax(lp, 1)?,
        OmegaInput::LogProbabilities => lp,
    })
}

fn embed(g: &Graph, x: Var, map: &[usize], size: usize) -> Result<Var, LossError> {
    let v = g.shape(x)[1];
    if v != map.len() {
        return Err(LossError::Shape {
            what: "union vocabulary map",
            shape: vec![v, map.len()],
        });
    }
    let mut m = Tensor::zeros(&[v, size]);
    for (i, &u) in map.iter().enumerate() {
        m.data_mut()[i * size + u] = 1.0;
    }
    Ok(g.matmul(x, g.constant(m))?)
}

fn detach(g: &Graph, x: Var) -> Var {
    let value = g.value(x).clone();
    g.constant(value)
}

/// Regularizer between the two decoders' per-step outputs. The end-of-sequence
/// step is left out and the R2L sequence is read in reverse, so both
/// sequences run in surface order.
pub fn omega(
    g: &Graph,
    fwd: &DirectionOutput,
    bwd: &DirectionOutput,
    kind: &Omega,
    cfg: &LossConfig,
) -> Result<Var, LossError> {
    let mut a = regularizer_input(g, fwd, cfg.omega_input, false)?;
    let mut b = regularizer_input(g, bwd, cfg.omega_input, true)?;
    match cfg.omega_grad {
        OmegaGrad::Both => {}
        OmegaGrad::ForwardOnly => b = detach(g, b),
        OmegaGrad::BackwardOnly => a = detach(g, a),
    }
    match kind {
        Omega::L2 => omega_l2(g, a, b),
        Omega::SoftDtw {
            union_size,
            l2r_map,
            r2l_map,
        } => {
            let a = embed(g, a, l2r_map, *union_size)?;
            let b = embed(g, b, r2l_map, *union_size)?;
            omega_softdtw(g, a, b, cfg.gamma, cfg.distance)
        }
    }
}

/// `α·ce_f + (1−α)·ce_b + λ·omega` on scalar graph values.
pub fn combine(
    g: &Graph,
    ce_f: Var,
    ce_b: Var,
    omega: Var,
    cfg: &LossConfig,
) -> Result<Var, LossError> {
    cfg.validate()?;
    let wf = g.scale(ce_f, cfg.alpha);
    let wb = g.scale(ce_b, 1.0 - cfg.alpha);
    let wo = g.scale(omega, cfg.lambda);
    Ok(g.add(g.add(wf, wb)?, wo)?)
}

/// `α·CE_f + (1−α)·CE_b + λ·Ω` over both decoders' teacher-forced outputs.
///
/// Terms whose weight is zero still contribute `0·x` to the graph so the
/// reported total always equals the weighted sum of the reported addends.
pub fn global_loss(
    g: &Graph,
    fwd: &DirectionOutput,
    bwd: &DirectionOutput,
    kind: &Omega,
    cfg: &LossConfig,
) -> Result<LossBundle, LossError> {
    cfg.validate()?;
    let cf = cross_entropy(g, fwd.log_probs, fwd.gold)?;
    let cb = cross_entropy(g, bwd.log_probs, bwd.gold)?;
    let om = omega(g, fwd, bwd, kind, cfg)?;
    let total_var = combine(g, cf.loss, cb.loss, om, cfg)?;
    let (ce_forward, ce_backward, omega) = (g.item(cf.loss), g.item(cb.loss), g.item(om));
    Ok(LossBundle {
        ce_forward,
        ce_backward,
        omega,
        total: g.item(total_var),
        alpha: cfg.alpha,
        lambda: cfg.lambda,
        gamma: cfg.gamma,
        clamped: cf.clamped || cb.clamped,
        total_var,
    })
}

impl LossBundle {
    /// Recomputes the weighted sum from the reported addends.
    pub fn recombine(&self) -> f64 {
        self.alpha * self.ce_forward
            + (1.0 - self.alpha) * self.ce_backward
            + self.lambda * self.omega
    }

    /// Bundle for a single-decoder stage: the trained decoder's cross-entropy
    /// is the whole objective.
    pub fn single(g: &Graph, ce: CrossEntropy, forward: bool) -> LossBundle {
        let v = g.item(ce.loss);
        LossBundle {
            ce_forward: if forward { v } else { 0.0 },
            ce_backward: if forward { 0.0 } else { v },
            omega: 0.0,
            total: v,
            alpha: if forward { 1.0 } else { 0.0 },
            lambda: 0.0,
            gamma: 0.0,
            clamped: ce.clamped,
            total_var: ce.loss,
        }
    }
}
