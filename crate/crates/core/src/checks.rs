//! Numerical self-checks: soft-DTW against exhaustive path enumeration, its
//! hard-DTW limit, and finite-difference gradient checks of the
//! differentiable components. Used by the `grad-check` and `oracle-check`
//! commands and by the test suite.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::{grad_check_with, AutodiffError, Graph, Tensor, Var};
use crate::losses::{
    global_loss, hard_dtw, omega_l2, omega_softdtw, oracle_softdtw, softdtw, with_eos,
    DirectionOutput, Distance, LossConfig, LossError, Omega,
};
use crate::model::{attend, prepare, DualModel, Group, LstmState, ModelDims, ModelError};
use crate::tokenizer::{Direction, R2lMerges, TokenizerError, VocabKind, VocabPair};

#[derive(Debug, Error)]
pub enum CheckError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
}

fn cost_matrix(rng: &mut ChaCha8Rng, k: usize, l: usize) -> Tensor {
    Tensor::matrix(
        k,
        l,
        (0..k * l).map(|_| rng.random_range(0.0..4.0)).collect(),
    )
}

#[derive(Clone, Debug, PartialEq)]
pub struct OracleSummary {
    pub instances: usize,
    pub max_abs_error: f64,
}

/// Compares the soft-DTW recursion with the soft-min over every enumerated
/// path, for all sizes up to `max_len x max_len`, `per_size` random cost
/// matrices each and every `gamma`.
pub fn softdtw_oracle_check(
    max_len: usize,
    per_size: usize,
    gammas: &[f64],
    seed: u64,
) -> Result<OracleSummary, LossError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = OracleSummary {
        instances: 0,
        max_abs_error: 0.0,
    };
    for &gamma in gammas {
        for k in 1..=max_len {
            for l in 1..=max_len {
                for _ in 0..per_size {
                    let delta = cost_matrix(&mut rng, k, l);
                    let e = (softdtw(&delta, gamma)? - oracle_softdtw(&delta, gamma)?).abs();
                    out.max_abs_error = out.max_abs_error.max(e);
                    out.instances += 1;
                }
            }
        }
    }
    Ok(out)
}

/// Number of monotone down/right/diagonal paths through a `k x l` grid.
pub fn path_count(k: usize, l: usize) -> f64 {
    let mut d = vec![vec![0.0f64; l]; k];
    for i in 0..k {
        for j in 0..l {
            d[i][j] = if i == 0 || j == 0 {
                1.0
            } else {
                d[i - 1][j] + d[i][j - 1] + d[i - 1][j - 1]
            };
        }
    }
    d[k - 1][l - 1]
}

#[derive(Clone, Debug, PartialEq)]
pub struct HardLimitSummary {
    pub instances: usize,
    /// Instances where soft-DTW at `gamma = 0` differs from hard DTW at all.
    pub exact_mismatches: usize,
    /// Largest `(hard - soft) / (gamma ln paths)` at the small gamma; the
    /// bound holds when this is at most 1 and the gap is never negative.
    pub worst_bound_ratio: f64,
    pub min_gap: f64,
}

pub fn hard_limit_check(
    instances: usize,
    max_len: usize,
    gamma: f64,
    seed: u64,
) -> Result<HardLimitSummary, LossError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = HardLimitSummary {
        instances,
        exact_mismatches: 0,
        worst_bound_ratio: 0.0,
        min_gap: f64::INFINITY,
    };
    for _ in 0..instances {
        let (k, l) = (rng.random_range(1..=max_len), rng.random_range(1..=max_len));
        let delta = cost_matrix(&mut rng, k, l);
        let hard = hard_dtw(&delta)?;
        if softdtw(&delta, 0.0)? != hard {
            out.exact_mismatches += 1;
        }
        let gap = hard - softdtw(&delta, gamma)?;
        out.min_gap = out.min_gap.min(gap);
        let bound = gamma * path_count(k, l).ln();
        let ratio = if bound > 0.0 {
            gap / bound
        } else if gap == 0.0 {
            0.0
        } else {
            f64::INFINITY
        };
        out.worst_bound_ratio = out.worst_bound_ratio.max(ratio);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradSummary {
    pub name: String,
    pub instances: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

impl GradSummary {
    fn new(name: impl Into<String>) -> Self {
        GradSummary {
            name: name.into(),
            instances: 0,
            max_rel_error: 0.0,
            passed: true,
        }
    }

    fn add(&mut self, max_rel_error: f64, passed: bool) {
        self.max_rel_error = self.max_rel_error.max(max_rel_error);
        self.passed &= passed;
    }
}

fn random(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Weighted sum of `x` against a fixed random tensor of the same shape, so
/// every output coordinate influences the checked scalar.
fn probe(g: &Graph, x: Var, weights: &Tensor) -> Result<Var, AutodiffError> {
    let w = g.constant(weights.clone());
    Ok(g.sum(g.mul(x, w)?))
}

fn tiny_dims() -> ModelDims {
    ModelDims {
        feat_dim: 3,
        enc_units: 3,
        enc_proj: Some(3),
        att_dim: 3,
        conv_channels: 2,
        conv_width: 3,
        dec_units: 4,
        emb_dim: 2,
        init_scale: 0.5,
        ..ModelDims::default()
    }
}

const CORPUS: [&str; 4] = ["abc cab", "ba ca", "cc ab", "a bc"];

fn corpus_vocabs(kind: VocabKind) -> Result<VocabPair, TokenizerError> {
    let corpus: Vec<String> = CORPUS.iter().map(|s| s.to_string()).collect();
    VocabPair::learn(&corpus, kind, 3, R2lMerges::Separate)
}

/// Finite-difference checks of the regularizers, attention scoring, one
/// decoder step and the joint loss, `instances` random cases each.
pub fn gradient_suite(
    instances: usize,
    step: f64,
    tolerance: f64,
    seed: u64,
) -> Result<Vec<GradSummary>, CheckError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::new();

    let mut l2 = GradSummary::new("omega_l2");
    for _ in 0..instances {
        let (k, v) = (rng.random_range(1..5), rng.random_range(2..6));
        let split = k * v;
        let r = grad_check_with(
            |g, x| -> Result<Var, CheckError> {
                let a = g.reshape(g.slice(x, 0, 0, split)?, &[k, v])?;
                let b = g.reshape(g.slice(x, 0, split, split)?, &[k, v])?;
                Ok(omega_l2(g, a, b)?)
            },
            &Tensor::vector(random(&mut rng, 2 * split)),
            step,
            tolerance,
        )?;
        l2.instances += 1;
        l2.add(r.max_rel_error, r.passed());
    }
    rows.push(l2);

    for gamma in [0.5, 1.0, 2.0] {
        let mut row = GradSummary::new(format!("omega_softdtw gamma={gamma}"));
        for _ in 0..instances {
            let (k, l, d) = (rng.random_range(1..5), rng.random_range(1..5), 3);
            let r = grad_check_with(
                |g, x| -> Result<Var, CheckError> {
                    let a = g.reshape(g.slice(x, 0, 0, k * d)?, &[k, d])?;
                    let b = g.reshape(g.slice(x, 0, k * d, l * d)?, &[l, d])?;
                    Ok(omega_softdtw(g, a, b, gamma, Distance::SquaredEuclidean)?)
                },
                &Tensor::vector(random(&mut rng, (k + l) * d)),
                step,
                tolerance,
            )?;
            row.instances += 1;
            row.add(r.max_rel_error, r.passed());
        }
        rows.push(row);
    }

    let vocabs = corpus_vocabs(VocabKind::Char)?;
    let dims = tiny_dims();

    let mut att = GradSummary::new("attention");
    for _ in 0..instances {
        let model = DualModel::new(&dims, &vocabs, rng.random());
        let stack = &model.forward;
        let frames = rng.random_range(2..6);
        let enc_dim = model.encoder.output_dim;
        let h_enc = Tensor::matrix(frames, enc_dim, random(&mut rng, frames * enc_dim));
        let h_dec = Tensor::matrix(1, dims.dec_units, random(&mut rng, dims.dec_units));
        let raw: Vec<f64> = (0..frames).map(|_| rng.random_range(0.1..1.0)).collect();
        let total: f64 = raw.iter().sum();
        let alpha_prev = Tensor::matrix(frames, 1, raw.iter().map(|a| a / total).collect());
        let w_alpha = Tensor::matrix(frames, 1, random(&mut rng, frames));
        let w_ctx = Tensor::matrix(1, enc_dim, random(&mut rng, enc_dim));
        let p = &stack.attention;
        let mut ids = vec![p.dec_proj, p.enc_proj, p.loc_proj, p.conv, p.score, p.bias];
        ids.sort_by_key(|id| model.store.get(*id).name.clone());
        for id in ids {
            let r = grad_check_with(
                |g, x| -> Result<Var, CheckError> {
                    let mut b = model.bind(g, &[Group::Forward]);
                    b.replace(id, x);
                    let ctx = prepare(g, &b, p, g.constant(h_enc.clone()), None)?;
                    let (alpha, context) = attend(
                        g,
                        &b,
                        p,
                        &ctx,
                        g.constant(h_dec.clone()),
                        g.constant(alpha_prev.clone()),
                    )?;
                    Ok(g.add(probe(g, alpha, &w_alpha)?, probe(g, context, &w_ctx)?)?)
                },
                &model.store.get(id).value,
                step,
                tolerance,
            )?;
            att.add(r.max_rel_error, r.passed());
        }
        att.instances += 1;
    }
    rows.push(att);

    let mut dec = GradSummary::new("decoder_step");
    for _ in 0..instances {
        let model = DualModel::new(&dims, &vocabs, rng.random());
        let stack = &model.forward;
        let frames = rng.random_range(2..6);
        let enc_dim = model.encoder.output_dim;
        let h_enc = Tensor::matrix(frames, enc_dim, random(&mut rng, frames * enc_dim));
        let h0 = Tensor::matrix(1, dims.dec_units, random(&mut rng, dims.dec_units));
        let c0 = Tensor::matrix(1, dims.dec_units, random(&mut rng, dims.dec_units));
        let y_prev = rng.random_range(0..stack.vocab_size());
        let gold = rng.random_range(0..stack.vocab_size());
        let ids: Vec<_> = model
            .store
            .ids()
            .filter(|&id| model.store.get(id).group == Group::Forward)
            .collect();
        for id in ids {
            let r = grad_check_with(
                |g, x| -> Result<Var, CheckError> {
                    let mut b = model.bind(g, &[Group::Forward]);
                    b.replace(id, x);
                    let ctx = prepare(g, &b, &stack.attention, g.constant(h_enc.clone()), None)?;
                    let mut state = stack.initial_state(g, &ctx, None);
                    state.lstm = LstmState {
                        h: g.constant(h0.clone()),
                        c: g.constant(c0.clone()),
                    };
                    let (logits, _) = stack.step(g, &b, &ctx, y_prev, state)?;
                    let lp = g.log_softmax(logits, 1)?;
                    Ok(g.gather(lp, &[gold])?)
                },
                &model.store.get(id).value,
                step,
                tolerance,
            )?;
            dec.add(r.max_rel_error, r.passed());
        }
        dec.instances += 1;
    }
    rows.push(dec);

    let bpe = corpus_vocabs(VocabKind::Bpe)?;
    let mut joint = GradSummary::new("global_loss");
    let cfg = LossConfig {
        alpha: 0.6,
        lambda: 0.5,
        ..LossConfig::default()
    };
    for i in 0..instances {
        let vocabs = if i % 2 == 0 { &vocabs } else { &bpe };
        let model = DualModel::new(&dims, vocabs, rng.random());
        let omega = Omega::for_vocabs(vocabs);
        let text = CORPUS[rng.random_range(0..CORPUS.len())];
        let l2r = vocabs.encode(text, Direction::L2R);
        let r2l = vocabs.encode(text, Direction::R2L);
        let gf = with_eos(&l2r.ids, model.specials(Direction::L2R).eos);
        let gb = with_eos(&r2l.ids, model.specials(Direction::R2L).eos);
        let frames = 2 * text.len();
        let feats = Tensor::matrix(
            frames,
            dims.feat_dim,
            random(&mut rng, frames * dims.feat_dim),
        );
        // One randomly chosen tensor per group keeps the run short.
        for group in Group::ALL {
            let ids: Vec<_> = model
                .store
                .ids()
                .filter(|&id| model.store.get(id).group == group)
                .collect();
            let id = ids[rng.random_range(0..ids.len())];
            let r = grad_check_with(
                |g, x| -> Result<Var, CheckError> {
                    let mut b = model.bind(g, &Group::ALL);
                    b.replace(id, x);
                    let out = model.forward_pass(g, &b, &feats, Some(&l2r), Some(&r2l))?;
                    let (f, r) = (out.l2r.expect("l2r pass"), out.r2l.expect("r2l pass"));
                    let bundle = global_loss(
                        g,
                        &DirectionOutput {
                            log_probs: f.log_probs,
                            gold: &gf,
                        },
                        &DirectionOutput {
                            log_probs: r.log_probs,
                            gold: &gb,
                        },
                        &omega,
                        &cfg,
                    )?;
                    Ok(bundle.total_var)
                },
                &model.store.get(id).value,
                step,
                tolerance,
            )?;
            joint.add(r.max_rel_error, r.passed());
        }
        joint.instances += 1;
    }
    rows.push(joint);
    Ok(rows)
}
