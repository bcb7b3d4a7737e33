use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use fbdec_core::checks::{self, CheckError};
use fbdec_core::data::{self, DataError, Utterance};
use fbdec_core::model::{DualModel, ModelError};
use fbdec_core::search::{format_decodes, format_scores, parse_decodes, wer, CorpusWer};
use fbdec_core::tokenizer::{Direction, TokenizerError, VocabKind, VocabPair};
use fbdec_core::trainer::{
    checkpoint_name, prepare_examples, run_stage, Prerequisites, RunOptions, StageKind, TrainError,
};
use fbdec_core::workbench::{
    self, ConfigError, ExperimentData, ExperimentPlan, Settings, WorkbenchError,
};

#[derive(Parser)]
#[command(
    name = "fbdec",
    version,
    about = "Forward-backward decoder training and evaluation"
)]
struct Cli {
    /// Settings file of `key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Dev,
    Test,
}

impl SplitArg {
    fn manifest(self) -> &'static str {
        match self {
            SplitArg::Train => workbench::TRAIN_MANIFEST,
            SplitArg::Dev => workbench::DEV_MANIFEST,
            SplitArg::Test => workbench::TEST_MANIFEST,
        }
    }

    fn name(self) -> &'static str {
        match self {
            SplitArg::Train => "train",
            SplitArg::Dev => "dev",
            SplitArg::Test => "test",
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum DirectionArg {
    L2r,
    R2l,
}

impl From<DirectionArg> for Direction {
    fn from(d: DirectionArg) -> Direction {
        match d {
            DirectionArg::L2r => Direction::L2R,
            DirectionArg::R2l => Direction::R2L,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Learn a vocabulary pair from a data directory and optionally encode text.
    Tokenize {
        #[arg(long)]
        data: PathBuf,
        /// `char` or `bpe`; defaults to the configured target.
        #[arg(long)]
        target: Option<String>,
        /// Print the token units of this text in both directions.
        #[arg(long)]
        encode: Option<String>,
    },
    /// Generate the synthetic dataset as manifests plus feature files.
    GenData,
    /// Run training stages on a data directory.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Stages to run, in order; defaults to the configured list.
        #[arg(long = "stage")]
        stages: Vec<String>,
    },
    /// Beam-search decode one split with a trained checkpoint.
    Decode {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "dev")]
        split: SplitArg,
        #[arg(long, value_enum, default_value = "l2r")]
        direction: DirectionArg,
        #[arg(long)]
        beam: Option<usize>,
    },
    /// Word error rate of a decode file against a manifest.
    Score {
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        hyp: PathBuf,
    },
    /// Run the configured setups, targets and seeds and print the WER table.
    Experiment {
        /// Existing data directory; without it the synthetic dataset is generated.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Finite-difference gradient checks of the differentiable components.
    GradCheck {
        #[arg(long, default_value_t = 10)]
        instances: usize,
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
    /// Soft-DTW against exhaustive path enumeration and the hard-DTW limit.
    OracleCheck {
        #[arg(long, default_value_t = 5)]
        max_len: usize,
        #[arg(long, default_value_t = 50)]
        per_size: usize,
    },
}

struct Failure {
    code: u8,
    msg: String,
}

fn fail(code: u8, msg: impl std::fmt::Display) -> Failure {
    Failure {
        code,
        msg: msg.to_string(),
    }
}

impl From<WorkbenchError> for Failure {
    fn from(e: WorkbenchError) -> Self {
        fail(e.exit_code() as u8, e)
    }
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        WorkbenchError::from(e).into()
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        fail(1, e)
    }
}

impl From<DataError> for Failure {
    fn from(e: DataError) -> Self {
        fail(2, e)
    }
}

impl From<TokenizerError> for Failure {
    fn from(e: TokenizerError) -> Self {
        fail(2, e)
    }
}

impl From<ModelError> for Failure {
    fn from(e: ModelError) -> Self {
        fail(2, e)
    }
}

impl From<CheckError> for Failure {
    fn from(e: CheckError) -> Self {
        fail(3, e)
    }
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> Failure + '_ {
    move |e| fail(2, format!("{}: {e}", path.display()))
}

fn parse_target(s: &str) -> Result<VocabKind, Failure> {
    s.parse().map_err(|e| fail(1, format!("--target: {e}")))
}

struct Ctx {
    settings: Settings,
    seed: Option<u64>,
    out: Option<PathBuf>,
}

impl Ctx {
    fn out(&self, default: &str) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from(default))
    }
}

fn learn_vocabs(settings: &Settings, utts: &[Utterance]) -> Result<VocabPair, Failure> {
    let texts: Vec<String> = utts.iter().map(|u| u.transcript.clone()).collect();
    Ok(VocabPair::learn(
        &texts,
        settings.train.target,
        settings.train.bpe_merges,
        settings.r2l_merges,
    )?)
}

fn units(vocabs: &VocabPair, text: &str, direction: Direction) -> String {
    let v = vocabs.get(direction);
    vocabs
        .encode(text, direction)
        .ids
        .iter()
        .map(|&id| v.unit(id).unwrap_or("?"))
        .collect::<Vec<_>>()
        .join(" ")
}

fn tokenize(
    ctx: &Ctx,
    data: &Path,
    target: Option<String>,
    encode: Option<String>,
) -> Result<(), Failure> {
    let mut settings = ctx.settings.clone();
    if let Some(t) = target {
        settings.train.target = parse_target(&t)?;
    }
    let utts = data::read_manifest(&data.join(workbench::TRAIN_MANIFEST))?;
    let vocabs = learn_vocabs(&settings, &utts)?;
    let out = ctx.out("vocab");
    fs::create_dir_all(&out).map_err(io(&out))?;
    vocabs.save(&out)?;
    println!(
        "l2r units {}  r2l units {}  -> {}",
        vocabs.l2r.len(),
        vocabs.r2l.len(),
        out.display()
    );
    if let Some(text) = encode {
        println!("l2r\t{}", units(&vocabs, &text, Direction::L2R));
        println!("r2l\t{}", units(&vocabs, &text, Direction::R2L));
    }
    Ok(())
}

fn gen_data(ctx: &Ctx) -> Result<(), Failure> {
    let mut cfg = ctx.settings.data.clone();
    if let Some(s) = ctx.seed {
        cfg.seed = s;
    }
    let data = ExperimentData::synthetic(&cfg)?;
    let out = ctx.out("data");
    data.save(&out)?;
    println!(
        "{} train, {} dev, {} test utterances -> {}",
        data.train.len(),
        data.dev.len(),
        data.test.len(),
        out.display()
    );
    Ok(())
}

fn train(ctx: &Ctx, data_dir: &Path, stages: &[String]) -> Result<(), Failure> {
    let mut cfg = ctx.settings.train_for(
        ctx.settings.train.target,
        ctx.seed.unwrap_or(ctx.settings.train.seed),
    );
    if !stages.is_empty() {
        cfg.stages = stages
            .iter()
            .map(|s| {
                s.parse::<StageKind>()
                    .map_err(|e| fail(1, format!("--stage: {e}")))
            })
            .collect::<Result<_, _>>()?;
    }
    cfg.validate()?;
    let data = ExperimentData::load(data_dir)?;
    let vocabs = learn_vocabs(&ctx.settings, &data.train)?;
    let out = ctx.out("run");
    let vocab_dir = out.join("vocab");
    fs::create_dir_all(&vocab_dir).map_err(io(&vocab_dir))?;
    vocabs.save(&vocab_dir)?;
    let train = prepare_examples(&data.train, &vocabs);
    let dev = prepare_examples(&data.dev, &vocabs);
    let mut prereqs = Prerequisites::default();
    for stage in StageKind::ALL {
        prereqs.set(stage, out.join(checkpoint_name(stage, None)));
    }
    let opts = RunOptions {
        out_dir: Some(out.clone()),
        scripted_accuracy: None,
    };
    for &stage in &cfg.stages {
        let mut model = DualModel::new(&cfg.dims, &vocabs, cfg.seed);
        let report = run_stage(
            stage, &mut model, &train, &dev, &vocabs, &cfg, &prereqs, &opts,
        )?;
        println!(
            "{stage}: best epoch {} accuracy {:.4}{} -> {}",
            report.best_epoch,
            report.best_accuracy,
            if report.stopped_early {
                " (stopped early)"
            } else {
                ""
            },
            report
                .best_checkpoint
                .as_deref()
                .map(|p| p.display().to_string())
                .unwrap_or_default()
        );
    }
    Ok(())
}

fn corpus_wer(refs: &[Utterance], hyp_path: &Path) -> Result<CorpusWer, Failure> {
    let text = fs::read_to_string(hyp_path).map_err(io(hyp_path))?;
    let hyps = parse_decodes(&text).map_err(|e| fail(2, format!("{}: {e}", hyp_path.display())))?;
    let mut corpus = CorpusWer::default();
    for u in refs {
        let hyp = hyps
            .iter()
            .find(|(id, _)| id == &u.id)
            .map(|(_, h)| h.as_str())
            .ok_or_else(|| {
                fail(
                    2,
                    format!("{}: no hypothesis for {}", hyp_path.display(), u.id),
                )
            })?;
        corpus.add(&wer(&u.transcript, hyp).map_err(|e| fail(2, format!("{}: {e}", u.id)))?);
    }
    Ok(corpus)
}

fn print_wer(c: &CorpusWer) {
    let t = &c.total;
    println!(
        "WER {:.2}% ({} utterances, {} words: S {} I {} D {})",
        c.wer(),
        c.utterances,
        t.ref_words,
        t.substitutions,
        t.insertions,
        t.deletions
    );
}

struct DecodeArgs {
    data: PathBuf,
    vocab: PathBuf,
    checkpoint: PathBuf,
    split: SplitArg,
    direction: Direction,
    beam: Option<usize>,
}

fn decode(ctx: &Ctx, a: DecodeArgs) -> Result<(), Failure> {
    let vocabs = VocabPair::load(&a.vocab)?;
    let model = workbench::load_model(&ctx.settings, &vocabs, &a.checkpoint)?;
    let utts = data::read_manifest(&a.data.join(a.split.manifest()))?;
    let mut settings = ctx.settings.decode;
    if let Some(b) = a.beam {
        settings.beam = b;
    }
    if settings.beam == 0 {
        return Err(fail(1, "--beam must be at least 1"));
    }
    let decodes = workbench::decode_split(&model, &vocabs, a.direction, &utts, &settings)?;
    let out = ctx.out(".");
    fs::create_dir_all(&out).map_err(io(&out))?;
    let path = out.join(format!("decode.{}.txt", a.split.name()));
    fs::write(&path, format_decodes(&decodes)).map_err(io(&path))?;
    let scores = out.join(format!("score.{}.txt", a.split.name()));
    fs::write(&scores, format_scores(&decodes, &vocabs, a.direction)).map_err(io(&scores))?;
    print_wer(&corpus_wer(&utts, &path)?);
    Ok(())
}

fn experiment(ctx: &Ctx, data_dir: Option<PathBuf>) -> Result<(), Failure> {
    let mut settings = ctx.settings.clone();
    if let Some(s) = ctx.seed {
        settings.seeds = vec![s];
    }
    let data = match data_dir {
        Some(d) => ExperimentData::load(&d)?,
        None => ExperimentData::synthetic(&settings.data)?,
    };
    let plan = ExperimentPlan::from_settings(settings, ctx.out("experiment"));
    let report = workbench::run_experiment(&plan, &data)?;
    print!("{}", report.render());
    Ok(())
}

fn grad_check(ctx: &Ctx, instances: usize, step: f64, tolerance: f64) -> Result<(), Failure> {
    let rows = checks::gradient_suite(instances, step, tolerance, ctx.seed.unwrap_or(0))?;
    let mut ok = true;
    for r in &rows {
        println!(
            "{:<4} {:<24} {} instances  max rel error {:.3e}",
            if r.passed { "ok" } else { "FAIL" },
            r.name,
            r.instances,
            r.max_rel_error
        );
        ok &= r.passed;
    }
    if ok {
        Ok(())
    } else {
        Err(fail(
            3,
            format!("gradient check above tolerance {tolerance}"),
        ))
    }
}

fn oracle_check(ctx: &Ctx, max_len: usize, per_size: usize) -> Result<(), Failure> {
    if max_len == 0 || max_len > fbdec_core::losses::ENUMERATION_LIMIT {
        return Err(fail(
            1,
            format!(
                "--max-len must be in 1..={}",
                fbdec_core::losses::ENUMERATION_LIMIT
            ),
        ));
    }
    let seed = ctx.seed.unwrap_or(0);
    let loss = |e| fail(3, e);
    let o =
        checks::softdtw_oracle_check(max_len, per_size, &[0.1, 1.0, 10.0], seed).map_err(loss)?;
    let oracle_ok = o.max_abs_error <= 1e-9;
    println!(
        "{:<4} soft-DTW vs enumeration: {} instances, max |diff| {:.3e}",
        if oracle_ok { "ok" } else { "FAIL" },
        o.instances,
        o.max_abs_error
    );
    let h = checks::hard_limit_check(500, max_len, 1e-3, seed).map_err(loss)?;
    let hard_ok = h.exact_mismatches == 0 && h.min_gap >= 0.0 && h.worst_bound_ratio <= 1.0;
    println!(
        "{:<4} hard limit: {} instances, {} mismatches at gamma 0, worst gap/(gamma ln paths) {:.4}",
        if hard_ok { "ok" } else { "FAIL" },
        h.instances,
        h.exact_mismatches,
        h.worst_bound_ratio
    );
    if oracle_ok && hard_ok {
        Ok(())
    } else {
        Err(fail(3, "soft-DTW checks failed"))
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let settings = match &cli.config {
        Some(p) => Settings::load(p)?,
        None => Settings::default(),
    };
    let ctx = Ctx {
        settings,
        seed: cli.seed,
        out: cli.out,
    };
    match cli.command {
        Command::Tokenize {
            data,
            target,
            encode,
        } => tokenize(&ctx, &data, target, encode),
        Command::GenData => gen_data(&ctx),
        Command::Train { data, stages } => train(&ctx, &data, &stages),
        Command::Decode {
            data,
            vocab,
            checkpoint,
            split,
            direction,
            beam,
        } => decode(
            &ctx,
            DecodeArgs {
                data,
                vocab,
                checkpoint,
                split,
                direction: direction.into(),
                beam,
            },
        ),
        Command::Score { reference, hyp } => {
            let refs = data::read_manifest(&reference)?;
            print_wer(&corpus_wer(&refs, &hyp)?);
            Ok(())
        }
        Command::Experiment { data } => experiment(&ctx, data),
        Command::GradCheck {
            instances,
            step,
            tolerance,
        } => grad_check(&ctx, instances, step, tolerance),
        Command::OracleCheck { max_len, per_size } => oracle_check(&ctx, max_len, per_size),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}
