//! Staged training: Adadelta with ε decay on non-improving epochs,
//! patience-based early stopping and per-stage parameter freezing.

#[cfg(test)]
mod tests;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::{Graph, Tensor};
use crate::data::Utterance;
use crate::losses::{
    cross_entropy, global_loss, with_eos, DirectionOutput, LossBundle, LossConfig, LossError, Omega,
};
use crate::model::{DualModel, Group, ModelDims, ModelError, Param, ParamStore};
use crate::search::{decode_utterance, wer, CorpusWer, DecodeSettings};
use crate::tokenizer::{Direction, TokenSeq, VocabKind, VocabPair};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("stage {stage} needs the {needs} checkpoint{}", .path.as_ref().map(|p| format!(" ({})", p.display())).unwrap_or_default())]
    MissingPrerequisite {
        stage: StageKind,
        needs: StageKind,
        path: Option<PathBuf>,
    },
    #[error("non-finite gradient for parameter {name}")]
    NonFiniteGradient { name: String },
    #[error("non-finite loss in stage {stage}, epoch {epoch}, utterance {utt}")]
    NonFiniteLoss {
        stage: StageKind,
        epoch: usize,
        utt: String,
    },
    #[error("empty training or validation set")]
    EmptyData,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum StageKind {
    Forward,
    Backward,
    BackwardFixed,
    Joint,
    JointReg,
}

impl StageKind {
    pub const ALL: [StageKind; 5] = [
        StageKind::Forward,
        StageKind::Backward,
        StageKind::BackwardFixed,
        StageKind::Joint,
        StageKind::JointReg,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            StageKind::Forward => "forward",
            StageKind::Backward => "backward",
            StageKind::BackwardFixed => "backward_fixed",
            StageKind::Joint => "joint",
            StageKind::JointReg => "joint_reg",
        }
    }

    /// Groups that receive updates.
    pub fn trained_groups(self) -> &'static [Group] {
        match self {
            StageKind::Forward => &[Group::Encoder, Group::Forward],
            StageKind::Backward => &[Group::Encoder, Group::Backward],
            StageKind::BackwardFixed => &[Group::Backward],
            StageKind::Joint | StageKind::JointReg => &Group::ALL,
        }
    }

    /// Groups that take part in the forward computation.
    pub fn used_groups(self) -> &'static [Group] {
        match self {
            StageKind::Forward => &[Group::Encoder, Group::Forward],
            StageKind::Backward | StageKind::BackwardFixed => &[Group::Encoder, Group::Backward],
            StageKind::Joint | StageKind::JointReg => &Group::ALL,
        }
    }

    /// Decoder whose validation accuracy drives early stopping.
    pub fn validation_direction(self) -> Direction {
        match self {
            StageKind::Backward | StageKind::BackwardFixed => Direction::R2L,
            _ => Direction::L2R,
        }
    }

    pub fn is_joint(self) -> bool {
        matches!(self, StageKind::Joint | StageKind::JointReg)
    }

    /// Earlier stages whose checkpoints this stage loads, with the groups
    /// taken from each.
    pub fn prerequisites(self) -> &'static [(StageKind, &'static [Group])] {
        match self {
            StageKind::Forward | StageKind::Backward => &[],
            StageKind::BackwardFixed => &[(StageKind::Forward, &[Group::Encoder])],
            StageKind::Joint | StageKind::JointReg => &[
                (StageKind::Forward, &[Group::Encoder, Group::Forward]),
                (StageKind::BackwardFixed, &[Group::Backward]),
            ],
        }
    }
}

impl std::fmt::Display for StageKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StageKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        StageKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| format!("unknown stage `{s}` (expected forward, backward, backward_fixed, joint or joint_reg)"))
    }
}

/// What "improvement on the validation set" measures.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ValidationMetric {
    /// Teacher-forced token accuracy of the validated decoder.
    TokenAccuracy,
    /// `100 - WER` of greedy decodes.
    GreedyWer,
}

impl ValidationMetric {
    pub fn as_str(self) -> &'static str {
        match self {
            ValidationMetric::TokenAccuracy => "token_accuracy",
            ValidationMetric::GreedyWer => "greedy_wer",
        }
    }
}

impl FromStr for ValidationMetric {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "token_accuracy" => Ok(ValidationMetric::TokenAccuracy),
            "greedy_wer" => Ok(ValidationMetric::GreedyWer),
            other => Err(format!(
                "unknown validation metric `{other}` (expected token_accuracy or greedy_wer)"
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// α, γ and Ω options; `lambda` is the weight used by `joint_reg`.
    pub loss: LossConfig,
    pub batch_size: usize,
    pub patience: usize,
    pub eps_init: f64,
    pub eps_decay: f64,
    pub rho: f64,
    pub stages: Vec<StageKind>,
    pub seed: u64,
    pub max_epochs: usize,
    pub target: VocabKind,
    pub bpe_merges: usize,
    pub dims: ModelDims,
    /// Global gradient norm bound; `None` disables clipping.
    pub clip: Option<f64>,
    pub metric: ValidationMetric,
    /// Greedy-decode the validation set every epoch for the log.
    pub log_val_wer: bool,
    /// Write `<stage>.ep<N>.ddck` after every epoch.
    pub epoch_checkpoints: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            loss: LossConfig {
                lambda: 1.0,
                ..LossConfig::default()
            },
            batch_size: 1,
            patience: 3,
            eps_init: 1e-5,
            eps_decay: 0.01,
            rho: 0.95,
            stages: vec![
                StageKind::Forward,
                StageKind::BackwardFixed,
                StageKind::JointReg,
            ],
            seed: 0,
            max_epochs: 30,
            target: VocabKind::Char,
            bpe_merges: 100,
            dims: ModelDims::default(),
            clip: Some(5.0),
            metric: ValidationMetric::TokenAccuracy,
            log_val_wer: true,
            epoch_checkpoints: true,
        }
    }
}

impl TrainConfig {
    /// Defaults with the regularizer weight suited to the target kind.
    pub fn for_target(target: VocabKind) -> Self {
        let mut cfg = TrainConfig {
            target,
            ..TrainConfig::default()
        };
        if target == VocabKind::Bpe {
            cfg.loss.lambda = 1e-4;
        }
        cfg
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        self.loss
            .validate()
            .map_err(|e| TrainError::Config(e.to_string()))?;
        self.dims.validate().map_err(TrainError::Config)?;
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.patience == 0 {
            return bad("patience must be at least 1".into());
        }
        if !(self.eps_decay > 0.0 && self.eps_decay < 1.0) {
            return bad(format!(
                "eps_decay must lie in (0, 1), got {}",
                self.eps_decay
            ));
        }
        if !(self.eps_init > 0.0 && self.eps_init.is_finite()) {
            return bad(format!("eps_init must be positive, got {}", self.eps_init));
        }
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return bad(format!("rho must lie in (0, 1), got {}", self.rho));
        }
        if self.stages.is_empty() {
            return bad("stage list is empty".into());
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be at least 1".into());
        }
        if let Some(c) = self.clip {
            if !(c > 0.0 && c.is_finite()) {
                return bad(format!("clip must be positive, got {c}"));
            }
        }
        Ok(())
    }

    /// Loss weights in effect for `kind`.
    pub fn stage_loss(&self, kind: StageKind) -> LossConfig {
        let mut l = self.loss;
        if kind == StageKind::Joint {
            l.lambda = 0.0;
        }
        l
    }
}

/// Adadelta accumulators, one pair per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub sq_grad: Vec<Tensor>,
    pub sq_update: Vec<Tensor>,
    pub eps: f64,
    pub rho: f64,
}

impl OptimizerState {
    pub fn new(store: &ParamStore, eps: f64, rho: f64) -> Self {
        let zeros: Vec<Tensor> = store
            .iter()
            .map(|p| Tensor::zeros(p.value.shape()))
            .collect();
        OptimizerState {
            sq_grad: zeros.clone(),
            sq_update: zeros,
            eps,
            rho,
        }
    }

    /// One Adadelta update of every unfrozen parameter. Nothing is modified
    /// when any unfrozen gradient is non-finite.
    pub fn step(&mut self, params: &mut [Param]) -> Result<(), TrainError> {
        if params.len() != self.sq_grad.len() {
            return Err(TrainError::Config(format!(
                "optimizer tracks {} parameters, store has {}",
                self.sq_grad.len(),
                params.len()
            )));
        }
        for (p, acc) in params.iter().zip(&self.sq_grad) {
            if acc.shape() != p.value.shape() {
                return Err(TrainError::Config(format!(
                    "accumulator shape mismatch for {}",
                    p.name
                )));
            }
            if !p.frozen && !p.grad.all_finite() {
                return Err(TrainError::NonFiniteGradient {
                    name: p.name.clone(),
                });
            }
        }
        let (rho, eps) = (self.rho, self.eps);
        for ((p, eg), ed) in params
            .iter_mut()
            .zip(&mut self.sq_grad)
            .zip(&mut self.sq_update)
        {
            if p.frozen {
                continue;
            }
            let grad = p.grad.data();
            let value = p.value.data_mut();
            for (((x, &g), eg), ed) in value
                .iter_mut()
                .zip(grad)
                .zip(eg.data_mut())
                .zip(ed.data_mut())
            {
                *eg = rho * *eg + (1.0 - rho) * g * g;
                let dx = -((*ed + eps).sqrt() / (*eg + eps).sqrt()) * g;
                *ed = rho * *ed + (1.0 - rho) * dx * dx;
                *x += dx;
            }
        }
        Ok(())
    }
}

/// Rescales unfrozen gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(params: &mut [Param], max_norm: f64) -> f64 {
    let norm = params
        .iter()
        .filter(|p| !p.frozen)
        .map(|p| p.grad.sq_norm())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for p in params.iter_mut().filter(|p| !p.frozen) {
            p.grad.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochDecision {
    pub improved: bool,
    pub stop: bool,
}

/// Strict-improvement tracker. The counter counts every non-improving epoch
/// of the stage and is never reset.
#[derive(Clone, Debug, PartialEq)]
pub struct EarlyStopping {
    pub best: f64,
    pub counter: usize,
    pub patience: usize,
    pub decay: f64,
}

impl EarlyStopping {
    pub fn new(patience: usize, decay: f64) -> Self {
        EarlyStopping {
            best: f64::NEG_INFINITY,
            counter: 0,
            patience,
            decay,
        }
    }

    pub fn epoch_end(&mut self, accuracy: f64, opt: &mut OptimizerState) -> EpochDecision {
        let improved = accuracy > self.best;
        if improved {
            self.best = accuracy;
        } else {
            opt.eps *= self.decay;
            self.counter += 1;
        }
        EpochDecision {
            improved,
            stop: self.counter > self.patience,
        }
    }
}

/// Indices of one batch plus the valid length of each member.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub lengths: Vec<usize>,
}

impl Batch {
    pub fn padded_len(&self) -> usize {
        self.lengths.iter().copied().max().unwrap_or(0)
    }

    /// Frame mask of member `i` padded to the batch length.
    pub fn mask(&self, i: usize) -> Vec<bool> {
        (0..self.padded_len())
            .map(|t| t < self.lengths[i])
            .collect()
    }
}

/// Sorts by length, cuts consecutive groups of `batch_size` and shuffles the
/// group order with a generator keyed by `(seed, epoch)`.
pub fn make_batches(lengths: &[usize], batch_size: usize, seed: u64, epoch: usize) -> Vec<Batch> {
    let mut order: Vec<usize> = (0..lengths.len()).collect();
    order.sort_by_key(|&i| (lengths[i], i));
    let mut batches: Vec<Batch> = order
        .chunks(batch_size.max(1))
        .map(|c| Batch {
            indices: c.to_vec(),
            lengths: c.iter().map(|&i| lengths[i]).collect(),
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    batches.shuffle(&mut rng);
    batches
}

/// An utterance with features and both token sequences ready for training.
#[derive(Clone, Debug)]
pub struct Example {
    pub id: String,
    pub transcript: String,
    pub features: Tensor,
    pub l2r: TokenSeq,
    pub r2l: TokenSeq,
}

impl Example {
    pub fn sequence(&self, direction: Direction) -> &TokenSeq {
        match direction {
            Direction::L2R => &self.l2r,
            Direction::R2L => &self.r2l,
        }
    }
}

pub fn prepare_examples(utts: &[Utterance], vocabs: &VocabPair) -> Vec<Example> {
    utts.iter()
        .map(|u| Example {
            id: u.id.clone(),
            transcript: u.transcript.clone(),
            features: u.tensor(),
            l2r: vocabs.encode(&u.transcript, Direction::L2R),
            r2l: vocabs.encode(&u.transcript, Direction::R2L),
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub stage: StageKind,
    pub epoch: usize,
    pub ce_forward: f64,
    pub ce_backward: f64,
    pub omega: f64,
    pub total: f64,
    pub val_acc: f64,
    /// NaN when validation decoding is disabled.
    pub val_wer: f64,
    /// ε in effect after this epoch's decision.
    pub epsilon: f64,
    pub patience: usize,
    pub seconds: f64,
}

impl EpochRecord {
    pub fn tsv(&self) -> String {
        format!(
            "{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.4}\t{:.2}\t{:e}\t{}\t{:.3}",
            self.stage,
            self.epoch,
            self.ce_forward,
            self.ce_backward,
            self.omega,
            self.total,
            self.val_acc,
            self.val_wer,
            self.epsilon,
            self.patience,
            self.seconds
        )
    }

    /// Everything but the wall time, floats compared bitwise.
    pub fn same_outcome(&self, other: &EpochRecord) -> bool {
        let floats = |r: &EpochRecord| {
            [
                r.ce_forward,
                r.ce_backward,
                r.omega,
                r.total,
                r.val_acc,
                r.val_wer,
                r.epsilon,
            ]
            .map(f64::to_bits)
        };
        self.stage == other.stage
            && self.epoch == other.epoch
            && self.patience == other.patience
            && floats(self) == floats(other)
    }
}

pub const LOG_HEADER: &str =
    "stage\tepoch\tce_f\tce_b\tomega\ttotal\tval_acc\tval_wer\tepsilon\tpatience\tseconds";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn to_tsv(&self) -> String {
        let mut s = String::new();
        for r in &self.records {
            let _ = writeln!(s, "{}", r.tsv());
        }
        s
    }
}

/// Checkpoints written by earlier stages, keyed by the stage that wrote them.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Prerequisites {
    pub forward: Option<PathBuf>,
    pub backward_fixed: Option<PathBuf>,
}

impl Prerequisites {
    pub fn get(&self, stage: StageKind) -> Option<&Path> {
        match stage {
            StageKind::Forward => self.forward.as_deref(),
            StageKind::BackwardFixed => self.backward_fixed.as_deref(),
            _ => None,
        }
    }

    pub fn set(&mut self, stage: StageKind, path: PathBuf) {
        match stage {
            StageKind::Forward => self.forward = Some(path),
            StageKind::BackwardFixed => self.backward_fixed = Some(path),
            _ => {}
        }
    }

    /// Fails unless every checkpoint `stage` loads is present on disk.
    pub fn check(&self, stage: StageKind) -> Result<(), TrainError> {
        for &(needs, _) in stage.prerequisites() {
            match self.get(needs) {
                Some(p) if p.is_file() => {}
                other => {
                    return Err(TrainError::MissingPrerequisite {
                        stage,
                        needs,
                        path: other.map(Path::to_path_buf),
                    })
                }
            }
        }
        Ok(())
    }
}

pub fn checkpoint_name(stage: StageKind, epoch: Option<usize>) -> String {
    match epoch {
        Some(n) => format!("{stage}.ep{n}.ddck"),
        None => format!("{stage}.best.ddck"),
    }
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Where logs and checkpoints go; nothing is written when `None`.
    pub out_dir: Option<PathBuf>,
    /// Replaces measured validation accuracy with the given per-epoch values.
    pub scripted_accuracy: Option<Vec<f64>>,
}

#[derive(Clone, Debug)]
pub struct StageReport {
    pub stage: StageKind,
    pub log: TrainLog,
    /// Objective value of every optimizer step, in order.
    pub step_losses: Vec<f64>,
    pub best_epoch: usize,
    pub best_accuracy: f64,
    pub stopped_early: bool,
    pub best_checkpoint: Option<PathBuf>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Builds one utterance's objective for `kind`, backpropagates it and adds
/// `scale` times the gradient into the store.
fn accumulate_example(
    kind: StageKind,
    model: &mut DualModel,
    ex: &Example,
    omega: &Omega,
    loss_cfg: &LossConfig,
    scale: f64,
) -> Result<LossBundle, TrainError> {
    let g = Graph::new();
    let b = model.bind(&g, kind.used_groups());
    let h_enc = model.encode(&g, &b, &ex.features)?;
    let bundle = if kind.is_joint() {
        let f = model.decode_direction(&g, &b, h_enc, &ex.l2r, Direction::L2R, None)?;
        let r = model.decode_direction(&g, &b, h_enc, &ex.r2l, Direction::R2L, None)?;
        let gf = with_eos(&ex.l2r.ids, model.specials(Direction::L2R).eos);
        let gb = with_eos(&ex.r2l.ids, model.specials(Direction::R2L).eos);
        global_loss(
            &g,
            &DirectionOutput {
                log_probs: f.log_probs,
                gold: &gf,
            },
            &DirectionOutput {
                log_probs: r.log_probs,
                gold: &gb,
            },
            omega,
            loss_cfg,
        )?
    } else {
        let dir = kind.validation_direction();
        let seq = ex.sequence(dir);
        let out = model.decode_direction(&g, &b, h_enc, seq, dir, None)?;
        let gold = with_eos(&seq.ids, model.specials(dir).eos);
        LossBundle::single(
            &g,
            cross_entropy(&g, out.log_probs, &gold)?,
            dir == Direction::L2R,
        )
    };
    if bundle.total.is_finite() {
        let grads = g.backward(bundle.total_var).map_err(ModelError::from)?;
        model.store.accumulate(&b, &grads, scale)?;
    }
    Ok(bundle)
}

/// Teacher-forced token accuracy (eos included) of one decoder over `data`.
pub fn token_accuracy(
    model: &DualModel,
    data: &[Example],
    direction: Direction,
) -> Result<f64, TrainError> {
    let (mut hit, mut total) = (0usize, 0usize);
    let group = model.stack(direction).group;
    for ex in data {
        let g = Graph::new();
        let b = model.bind(&g, &[Group::Encoder, group]);
        let h_enc = model.encode(&g, &b, &ex.features)?;
        let seq = ex.sequence(direction);
        let out = model.decode_direction(&g, &b, h_enc, seq, direction, None)?;
        let gold = with_eos(&seq.ids, model.specials(direction).eos);
        let lp = g.value(out.log_probs);
        for (k, &y) in gold.iter().enumerate() {
            let row = lp.row(k);
            let arg = row
                .iter()
                .enumerate()
                .fold(0, |best, (i, &v)| if v > row[best] { i } else { best });
            hit += usize::from(arg == y);
            total += 1;
        }
    }
    Ok(if total == 0 {
        0.0
    } else {
        hit as f64 / total as f64
    })
}

/// Corpus WER of decodes from one decoder.
pub fn decode_wer(
    model: &DualModel,
    vocabs: &VocabPair,
    data: &[Example],
    direction: Direction,
    settings: &DecodeSettings,
) -> Result<f64, TrainError> {
    let mut corpus = CorpusWer::default();
    for ex in data {
        let d = decode_utterance(model, vocabs, direction, &ex.id, &ex.features, settings)?;
        if let Ok(r) = wer(&ex.transcript, &d.text) {
            corpus.add(&r);
        }
    }
    Ok(corpus.wer())
}

/// Trains `model` for one stage. Prerequisite checkpoints are loaded into the
/// groups the stage inherits, groups outside the trained set are frozen, and
/// the parameters of the best validation epoch are restored at the end.
#[allow(clippy::too_many_arguments)]
pub fn run_stage(
    kind: StageKind,
    model: &mut DualModel,
    train: &[Example],
    dev: &[Example],
    vocabs: &VocabPair,
    cfg: &TrainConfig,
    prereqs: &Prerequisites,
    opts: &RunOptions,
) -> Result<StageReport, TrainError> {
    cfg.validate()?;
    prereqs.check(kind)?;
    if train.is_empty() || dev.is_empty() {
        return Err(TrainError::EmptyData);
    }
    for &(needs, groups) in kind.prerequisites() {
        let path = prereqs.get(needs).expect("checked above");
        model.store.load_groups(path, groups)?;
    }
    for group in Group::ALL {
        model
            .store
            .set_frozen(group, !kind.trained_groups().contains(&group));
    }
    if let Some(dir) = &opts.out_dir {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }

    let loss_cfg = cfg.stage_loss(kind);
    let omega = Omega::for_vocabs(vocabs);
    let direction = kind.validation_direction();
    let greedy = DecodeSettings {
        beam: 1,
        ..DecodeSettings::default()
    };
    let lengths: Vec<usize> = train.iter().map(|e| e.features.rows()).collect();
    let mut opt = OptimizerState::new(&model.store, cfg.eps_init, cfg.rho);
    let mut stopper = EarlyStopping::new(cfg.patience, cfg.eps_decay);
    let mut log = TrainLog::default();
    let mut step_losses = Vec::new();
    let mut best_store = model.store.clone();
    let mut best_epoch = 0;
    let mut stopped_early = false;
    let mut log_text = String::new();

    for epoch in 1..=cfg.max_epochs {
        let started = Instant::now();
        let mut sums = [0.0f64; 4];
        for batch in make_batches(&lengths, cfg.batch_size, cfg.seed, epoch) {
            model.store.zero_grads();
            let scale = 1.0 / batch.indices.len() as f64;
            let mut batch_total = 0.0;
            for &i in &batch.indices {
                let ex = &train[i];
                let l = accumulate_example(kind, model, ex, &omega, &loss_cfg, scale)?;
                if !l.total.is_finite() {
                    return Err(TrainError::NonFiniteLoss {
                        stage: kind,
                        epoch,
                        utt: ex.id.clone(),
                    });
                }
                sums[0] += l.ce_forward;
                sums[1] += l.ce_backward;
                sums[2] += l.omega;
                sums[3] += l.total;
                batch_total += l.total;
            }
            step_losses.push(batch_total * scale);
            let params = model.store.take_grads_for_step()?;
            if let Some(c) = cfg.clip {
                clip_global_norm(params, c);
            }
            opt.step(params)?;
        }

        let n = train.len() as f64;
        let val_wer = if cfg.log_val_wer || cfg.metric == ValidationMetric::GreedyWer {
            decode_wer(model, vocabs, dev, direction, &greedy)?
        } else {
            f64::NAN
        };
        let measured = match cfg.metric {
            ValidationMetric::TokenAccuracy => token_accuracy(model, dev, direction)?,
            ValidationMetric::GreedyWer => 100.0 - val_wer,
        };
        let val_acc = match &opts.scripted_accuracy {
            Some(script) => script.get(epoch - 1).copied().unwrap_or(f64::NEG_INFINITY),
            None => measured,
        };
        let decision = stopper.epoch_end(val_acc, &mut opt);
        if decision.improved {
            best_store = model.store.clone();
            best_epoch = epoch;
        }
        let record = EpochRecord {
            stage: kind,
            epoch,
            ce_forward: sums[0] / n,
            ce_backward: sums[1] / n,
            omega: sums[2] / n,
            total: sums[3] / n,
            val_acc,
            val_wer,
            epsilon: opt.eps,
            patience: stopper.counter,
            seconds: started.elapsed().as_secs_f64(),
        };
        if let Some(dir) = &opts.out_dir {
            let _ = writeln!(log_text, "{}", record.tsv());
            if cfg.epoch_checkpoints {
                model
                    .store
                    .save(&dir.join(checkpoint_name(kind, Some(epoch))))?;
            }
            if decision.improved {
                model.store.save(&dir.join(checkpoint_name(kind, None)))?;
            }
            let path = dir.join(format!("{kind}.log"));
            fs::write(&path, format!("{LOG_HEADER}\n{log_text}")).map_err(io_err(&path))?;
        }
        log.records.push(record);
        if decision.stop {
            stopped_early = true;
            break;
        }
    }

    model.store = best_store;
    for group in Group::ALL {
        model.store.set_frozen(group, false);
    }
    Ok(StageReport {
        stage: kind,
        log,
        step_losses,
        best_epoch,
        best_accuracy: stopper.best,
        stopped_early,
        best_checkpoint: opts
            .out_dir
            .as_ref()
            .map(|d| d.join(checkpoint_name(kind, None))),
    })
}
