//! Experiment harness: runs the five setups through the trainer, decodes
//! dev and test with beam search and tabulates word error rates.

mod config;
mod report;


pub use config::{ConfigError, Settings};
pub use report::{median, Cell, Report, Split, SummaryRow};

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;

use crate::data::{self, DataError, Utterance};
use crate::model::{DualModel, Group, ModelError};
use crate::search::{
    decode_utterance, format_decodes, format_scores, mean_gap, parse_decodes, posterior_agreement,
    wer, CorpusWer, DecodeSettings, Decoded,
};
use crate::tokenizer::{Direction, TokenizerError, VocabKind, VocabPair};
use crate::trainer::{
    prepare_examples, run_stage, Prerequisites, RunOptions, StageKind, TrainError,
};

pub const TRAIN_MANIFEST: &str = "train.tsv";
pub const DEV_MANIFEST: &str = "dev.tsv";
pub const TEST_MANIFEST: &str = "test.tsv";
pub const COMPLETE_MARKER: &str = "complete";

#[derive(Debug, Error)]
pub enum WorkbenchError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("setup {setup} needs {needs}, which is neither in the plan nor completed under {dir}")]
    Dependency {
        setup: Setup,
        needs: Setup,
        dir: String,
    },
    #[error("empty plan: {0}")]
    EmptyPlan(&'static str),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{path}: {msg}")]
    File { path: String, msg: String },
}

impl WorkbenchError {
    /// 1 usage or config error, 2 data error, 3 numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            WorkbenchError::Config(_)
            | WorkbenchError::Dependency { .. }
            | WorkbenchError::EmptyPlan(_) => 1,
            WorkbenchError::Train(
                TrainError::NonFiniteLoss { .. } | TrainError::NonFiniteGradient { .. },
            ) => 3,
            WorkbenchError::Train(
                TrainError::Config(_) | TrainError::MissingPrerequisite { .. },
            ) => 1,
            _ => 2,
        }
    }
}

fn file_err(path: &Path) -> impl FnOnce(std::io::Error) -> WorkbenchError + '_ {
    move |e| WorkbenchError::File {
        path: path.display().to_string(),
        msg: e.to_string(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Setup {
    Forward,
    Backward,
    BackwardFixed,
    DualDecoder,
    DualDecoderReg,
}

impl Setup {
    /// Canonical execution order; every setup follows its dependencies.
    pub const ALL: [Setup; 5] = [
        Setup::Forward,
        Setup::Backward,
        Setup::BackwardFixed,
        Setup::DualDecoder,
        Setup::DualDecoderReg,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Setup::Forward => "forward",
            Setup::Backward => "backward",
            Setup::BackwardFixed => "backward_fixed",
            Setup::DualDecoder => "dual_decoder",
            Setup::DualDecoderReg => "dual_decoder_reg",
        }
    }

    pub fn title(self) -> &'static str {
        match self {
            Setup::Forward => "Forward",
            Setup::Backward => "Backward",
            Setup::BackwardFixed => "Backward Fixed",
            Setup::DualDecoder => "Dual Decoder",
            Setup::DualDecoderReg => "Dual Decoder Reg",
        }
    }

    pub fn stage(self) -> StageKind {
        match self {
            Setup::Forward => StageKind::Forward,
            Setup::Backward => StageKind::Backward,
            Setup::BackwardFixed => StageKind::BackwardFixed,
            Setup::DualDecoder => StageKind::Joint,
            Setup::DualDecoderReg => StageKind::JointReg,
        }
    }

    /// Decoder used for the reported transcripts.
    pub fn decode_direction(self) -> Direction {
        self.stage().validation_direction()
    }

    pub fn requires(self) -> &'static [Setup] {
        match self {
            Setup::Forward | Setup::Backward => &[],
            Setup::BackwardFixed => &[Setup::Forward],
            Setup::DualDecoder | Setup::DualDecoderReg => &[Setup::Forward, Setup::BackwardFixed],
        }
    }

    /// Whether both decoders are trained, so their agreement is meaningful.
    pub fn is_dual(self) -> bool {
        matches!(self, Setup::DualDecoder | Setup::DualDecoderReg)
    }
}

impl std::fmt::Display for Setup {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Setup {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        let key: String = s
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .collect::<String>()
            .to_ascii_lowercase();
        Setup::ALL
            .into_iter()
            .find(|x| x.as_str().replace('_', "") == key)
            .ok_or_else(|| format!("unknown setup `{s}` (expected forward, backward, backward_fixed, dual_decoder or dual_decoder_reg)"))
    }
}

#[derive(Clone, Debug)]
pub struct ExperimentData {
    pub train: Vec<Utterance>,
    pub dev: Vec<Utterance>,
    pub test: Vec<Utterance>,
}

impl ExperimentData {
    /// Reads `train.tsv`, `dev.tsv` and `test.tsv` from `dir`.
    pub fn load(dir: &Path) -> Result<Self, DataError> {
        Ok(ExperimentData {
            train: data::read_manifest(&dir.join(TRAIN_MANIFEST))?,
            dev: data::read_manifest(&dir.join(DEV_MANIFEST))?,
            test: data::read_manifest(&dir.join(TEST_MANIFEST))?,
        })
    }

    /// Synthetic corpus split 80/10/10 with the data seed.
    pub fn synthetic(cfg: &data::SyntheticConfig) -> Result<Self, DataError> {
        let utts = data::gen_synthetic(cfg)?;
        let (train, dev, test) = data::split(&utts, cfg.seed);
        Ok(ExperimentData { train, dev, test })
    }

    pub fn save(&self, dir: &Path) -> Result<(), DataError> {
        let feats = dir.join("feats");
        data::write_manifest(&dir.join(TRAIN_MANIFEST), &feats, &self.train)?;
        data::write_manifest(&dir.join(DEV_MANIFEST), &feats, &self.dev)?;
        data::write_manifest(&dir.join(TEST_MANIFEST), &feats, &self.test)
    }

    pub fn split(&self, split: Split) -> &[Utterance] {
        match split {
            Split::Dev => &self.dev,
            Split::Test => &self.test,
        }
    }

    pub fn transcripts(&self) -> Vec<String> {
        self.train.iter().map(|u| u.transcript.clone()).collect()
    }
}

#[derive(Clone, Debug)]
pub struct ExperimentPlan {
    pub setups: Vec<Setup>,
    pub targets: Vec<VocabKind>,
    pub seeds: Vec<u64>,
    pub settings: Settings,
    pub out_dir: PathBuf,
}

impl ExperimentPlan {
    pub fn from_settings(settings: Settings, out_dir: PathBuf) -> Self {
        ExperimentPlan {
            setups: settings.setups.clone(),
            targets: settings.targets.clone(),
            seeds: settings.seeds.clone(),
            settings,
            out_dir,
        }
    }

    pub fn ordered_setups(&self) -> Vec<Setup> {
        Setup::ALL
            .into_iter()
            .filter(|s| self.setups.contains(s))
            .collect()
    }

    pub fn setup_dir(&self, target: VocabKind, seed: u64, setup: Setup) -> PathBuf {
        self.out_dir
            .join(target.as_str())
            .join(format!("seed{seed}"))
            .join(setup.as_str())
    }

    pub fn is_complete(&self, target: VocabKind, seed: u64, setup: Setup) -> bool {
        self.setup_dir(target, seed, setup)
            .join(COMPLETE_MARKER)
            .is_file()
    }

    /// Every dependency must be part of the plan or already completed for
    /// each target and seed.
    pub fn validate(&self) -> Result<(), WorkbenchError> {
        if self.setups.is_empty() {
            return Err(WorkbenchError::EmptyPlan("no setups"));
        }
        if self.targets.is_empty() {
            return Err(WorkbenchError::EmptyPlan("no targets"));
        }
        if self.seeds.is_empty() {
            return Err(WorkbenchError::EmptyPlan("no seeds"));
        }
        for &setup in &self.setups {
            for &needs in setup.requires() {
                if self.setups.contains(&needs) {
                    continue;
                }
                for &t in &self.targets {
                    for &s in &self.seeds {
                        if !self.is_complete(t, s, needs) {
                            return Err(WorkbenchError::Dependency {
                                setup,
                                needs,
                                dir: self.setup_dir(t, s, needs).display().to_string(),
                            });
                        }
                    }
                }
            }
        }
        for &t in &self.targets {
            self.settings.train_for(t, 0).validate()?;
        }
        Ok(())
    }
}

/// Corpus WER of a persisted decode file against the references.
pub fn wer_from_decode_file(path: &Path, refs: &[Utterance]) -> Result<f64, WorkbenchError> {
    let text = fs::read_to_string(path).map_err(file_err(path))?;
    let hyps: HashMap<String, String> = parse_decodes(&text)
        .map_err(|msg| WorkbenchError::File {
            path: path.display().to_string(),
            msg,
        })?
        .into_iter()
        .collect();
    let mut corpus = CorpusWer::default();
    for u in refs {
        let hyp = hyps.get(&u.id).ok_or_else(|| WorkbenchError::File {
            path: path.display().to_string(),
            msg: format!("no hypothesis for {}", u.id),
        })?;
        let r = wer(&u.transcript, hyp).map_err(|e| WorkbenchError::File {
            path: path.display().to_string(),
            msg: format!("{}: {e}", u.id),
        })?;
        corpus.add(&r);
    }
    Ok(corpus.wer())
}

pub fn decode_split(
    model: &DualModel,
    vocabs: &VocabPair,
    direction: Direction,
    utts: &[Utterance],
    settings: &DecodeSettings,
) -> Result<Vec<Decoded>, ModelError> {
    utts.iter()
        .map(|u| decode_utterance(model, vocabs, direction, &u.id, &u.tensor(), settings))
        .collect()
}

fn write(path: &Path, text: &str) -> Result<(), WorkbenchError> {
    fs::write(path, text).map_err(file_err(path))
}

fn decode_name(split: Split, greedy: bool) -> String {
    format!(
        "decode.{}{}.txt",
        split.as_str(),
        if greedy { ".greedy" } else { "" }
    )
}

/// Trains one setup (unless already complete), decodes dev and test and
/// writes the decode, score and agreement files.
fn run_setup(
    plan: &ExperimentPlan,
    data: &ExperimentData,
    vocabs: &VocabPair,
    target: VocabKind,
    seed: u64,
    setup: Setup,
) -> Result<(), WorkbenchError> {
    let dir = plan.setup_dir(target, seed, setup);
    if plan.is_complete(target, seed, setup) {
        return Ok(());
    }
    fs::create_dir_all(&dir).map_err(file_err(&dir))?;
    let cfg = plan.settings.train_for(target, seed);
    let train = prepare_examples(&data.train, vocabs);
    let dev = prepare_examples(&data.dev, vocabs);
    let mut prereqs = Prerequisites::default();
    for &needs in setup.requires() {
        prereqs.set(
            needs.stage(),
            plan.setup_dir(target, seed, needs)
                .join(crate::trainer::checkpoint_name(needs.stage(), None)),
        );
    }
    let mut model = DualModel::new(&cfg.dims, vocabs, seed);
    let opts = RunOptions {
        out_dir: Some(dir.clone()),
        scripted_accuracy: None,
    };
    run_stage(
        setup.stage(),
        &mut model,
        &train,
        &dev,
        vocabs,
        &cfg,
        &prereqs,
        &opts,
    )?;

    let direction = setup.decode_direction();
    let greedy = DecodeSettings {
        beam: 1,
        ..plan.settings.decode
    };
    for split in Split::ALL {
        let utts = data.split(split);
        let decodes = decode_split(&model, vocabs, direction, utts, &plan.settings.decode)?;
        write(
            &dir.join(decode_name(split, false)),
            &format_decodes(&decodes),
        )?;
        write(
            &dir.join(format!("score.{}.txt", split.as_str())),
            &format_scores(&decodes, vocabs, direction),
        )?;
    }
    let g = decode_split(&model, vocabs, direction, &data.dev, &greedy)?;
    write(
        &dir.join(decode_name(Split::Dev, true)),
        &format_decodes(&g),
    )?;
    if setup.is_dual() {
        let mut rows = Vec::new();
        for u in &data.dev {
            let l2r = vocabs.encode(&u.transcript, Direction::L2R);
            let r2l = vocabs.encode(&u.transcript, Direction::R2L);
            rows.push(posterior_agreement(&model, &u.id, &u.tensor(), &l2r, &r2l)?);
        }
        let mut text = String::new();
        for a in &rows {
            text += &format!(
                "{}\t{:.6}\t{:.6}\t{:.6}\n",
                a.id, a.log_p_forward, a.log_p_backward, a.gap
            );
        }
        text += &format!("mean\t\t\t{:.6}\n", mean_gap(&rows));
        write(&dir.join("agreement.dev.txt"), &text)?;
    }
    write(&dir.join(COMPLETE_MARKER), "")?;
    Ok(())
}

fn read_mean_gap(path: &Path) -> Result<f64, WorkbenchError> {
    let text = fs::read_to_string(path).map_err(file_err(path))?;
    text.lines()
        .find_map(|l| l.strip_prefix("mean\t"))
        .and_then(|rest| rest.trim().parse().ok())
        .ok_or_else(|| WorkbenchError::File {
            path: path.display().to_string(),
            msg: "missing mean line".into(),
        })
}

/// Validates the plan, runs every (target, seed, setup) in dependency order
/// and collects the report from the persisted decode files. Completed setups
/// are reused untouched.
pub fn run_experiment(
    plan: &ExperimentPlan,
    data: &ExperimentData,
) -> Result<Report, WorkbenchError> {
    plan.validate()?;
    if data.train.is_empty() || data.dev.is_empty() || data.test.is_empty() {
        return Err(
            DataError::Invalid("train, dev and test splits must be non-empty".into()).into(),
        );
    }
    fs::create_dir_all(&plan.out_dir).map_err(file_err(&plan.out_dir))?;
    write(&plan.out_dir.join("config.txt"), &plan.settings.to_text())?;
    let setups = plan.ordered_setups();
    let mut report = Report::new(setups.clone(), plan.targets.clone(), plan.seeds.clone());
    for &target in &plan.targets {
        let vocab_dir = plan.out_dir.join(target.as_str()).join("vocab");
        let vocabs = VocabPair::learn(
            &data.transcripts(),
            target,
            plan.settings.train.bpe_merges,
            plan.settings.r2l_merges,
        )?;
        fs::create_dir_all(&vocab_dir).map_err(file_err(&vocab_dir))?;
        vocabs.save(&vocab_dir)?;
        for &seed in &plan.seeds {
            for &setup in &setups {
                run_setup(plan, data, &vocabs, target, seed, setup)?;
                let dir = plan.setup_dir(target, seed, setup);
                for split in Split::ALL {
                    let w = wer_from_decode_file(
                        &dir.join(decode_name(split, false)),
                        data.split(split),
                    )?;
                    report.record(setup, target, split, seed, w);
                }
                let g = wer_from_decode_file(&dir.join(decode_name(Split::Dev, true)), &data.dev)?;
                report.record_greedy(setup, target, seed, g);
                if setup.is_dual() {
                    report.record_gap(
                        setup,
                        target,
                        seed,
                        read_mean_gap(&dir.join("agreement.dev.txt"))?,
                    );
                }
            }
        }
    }
    write(&plan.out_dir.join("report.tsv"), &report.to_tsv())?;
    write(
        &plan.out_dir.join("report.detail.tsv"),
        &report.detail_tsv(),
    )?;
    write(&plan.out_dir.join("report.txt"), &report.render())?;
    Ok(report)
}

/// Loads a trained model with every group taken from one checkpoint.
pub fn load_model(
    settings: &Settings,
    vocabs: &VocabPair,
    checkpoint: &Path,
) -> Result<DualModel, WorkbenchError> {
    let mut model = DualModel::new(&settings.train.dims, vocabs, settings.train.seed);
    model.store.load_groups(checkpoint, &Group::ALL)?;
    Ok(model)
}
