//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

use std::collections::HashMap;
use std::path::Path;
use std::time::{Duration, Instant};

use fbdec_core::autodiff::Tensor;
use fbdec_core::checks::{gradient_suite, hard_limit_check, softdtw_oracle_check};
use fbdec_core::data::SyntheticConfig;
use fbdec_core::losses::{hard_dtw, oracle_softdtw};
use fbdec_core::model::{read_checkpoint, DualModel, Group, ModelError};
use fbdec_core::search::{beam_search, greedy, ModelScorer, StepScorer};
use fbdec_core::tokenizer::{Direction, R2lMerges, VocabKind, VocabPair};
use fbdec_core::trainer::{
    checkpoint_name, prepare_examples, run_stage, Prerequisites, RunOptions, StageKind, TrainConfig,
};
use fbdec_core::workbench::{
    load_model, run_experiment, ExperimentData, ExperimentPlan, Settings, Setup, Split,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

fn secs(d: Duration) -> String {
    format!("{:.2}s", d.as_secs_f64())
}

fn softdtw_oracle() -> Outcome {
    let start = Instant::now();
    let o = softdtw_oracle_check(5, 50, &[0.1, 1.0, 10.0], 11).unwrap();
    let t = start.elapsed();
    outcome(
        o.instances == 3 * 25 * 50 && o.max_abs_error <= 1e-9 && t < Duration::from_secs(10),
        format!(
            "{} instances, max |DP - enumeration| {:.2e} (tol 1e-9), {}",
            o.instances,
            o.max_abs_error,
            secs(t)
        ),
    )
}

fn hard_limit() -> Outcome {
    let h = hard_limit_check(500, 7, 1e-3, 12).unwrap();
    // The classic DP itself against the minimum over enumerated paths.
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut enum_mismatch = 0;
    for _ in 0..100 {
        let (k, l) = (rng.random_range(1..=5), rng.random_range(1..=5));
        let delta = Tensor::matrix(
            k,
            l,
            (0..k * l).map(|_| rng.random_range(0.0..4.0)).collect(),
        );
        if hard_dtw(&delta).unwrap() != oracle_softdtw(&delta, 0.0).unwrap() {
            enum_mismatch += 1;
        }
    }
    outcome(
        h.exact_mismatches == 0 && enum_mismatch == 0 && h.min_gap >= 0.0 && h.worst_bound_ratio <= 1.0,
        format!(
            "gamma=0: {}/{} differ from hard DTW, {enum_mismatch}/100 hard DTW differ from enumeration; gamma=1e-3: gap in [{:.2e}, {:.3} x gamma ln paths]",
            h.exact_mismatches, h.instances, h.min_gap, h.worst_bound_ratio
        ),
    )
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let rows = gradient_suite(10, 1e-5, 1e-4, 14).unwrap();
    let t = start.elapsed();
    let worst = rows.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    let failing: Vec<&str> = rows
        .iter()
        .filter(|r| !r.passed || r.instances != 10)
        .map(|r| r.name.as_str())
        .collect();
    let names: Vec<&str> = rows.iter().map(|r| r.name.as_str()).collect();
    outcome(
        failing.is_empty() && rows.len() == 7 && t < Duration::from_secs(60),
        format!("{} x 10 instances, max rel error {worst:.2e} (tol 1e-4, h 1e-5), failing {failing:?}, {}", names.join(", "), secs(t)),
    )
}

fn bits(m: &DualModel, group: Group) -> Vec<(String, Vec<u64>)> {
    m.store
        .group_values(group)
        .into_iter()
        .map(|(n, t)| (n, t.data().iter().map(|x| x.to_bits()).collect()))
        .collect()
}

fn desk_fixture() -> (
    VocabPair,
    Vec<fbdec_core::trainer::Example>,
    Vec<fbdec_core::trainer::Example>,
    TrainConfig,
) {
    let data = ExperimentData::synthetic(&SyntheticConfig::default()).unwrap();
    let vocabs =
        VocabPair::learn(&data.transcripts(), VocabKind::Char, 0, R2lMerges::Separate).unwrap();
    let cfg = TrainConfig {
        log_val_wer: false,
        epoch_checkpoints: false,
        ..TrainConfig::default()
    };
    (
        vocabs.clone(),
        prepare_examples(&data.train, &vocabs),
        prepare_examples(&data.dev, &vocabs),
        cfg,
    )
}

fn degenerate_weights() -> Outcome {
    let (vocabs, train, dev, mut cfg) = desk_fixture();
    cfg.max_epochs = 3;
    let dir = tempfile::tempdir().unwrap();
    let init = DualModel::new(&cfg.dims, &vocabs, 21);
    let ckpt = dir.path().join("init.ddck");
    init.store.save(&ckpt).unwrap();

    let mut fwd = init.clone();
    let a = run_stage(
        StageKind::Forward,
        &mut fwd,
        &train,
        &dev,
        &vocabs,
        &cfg,
        &Prerequisites::default(),
        &RunOptions::default(),
    )
    .unwrap();
    let mut joint_cfg = cfg.clone();
    joint_cfg.loss.alpha = 1.0;
    joint_cfg.loss.lambda = 0.0;
    let pre = Prerequisites {
        forward: Some(ckpt.clone()),
        backward_fixed: Some(ckpt),
    };
    let mut joint = init.clone();
    let b = run_stage(
        StageKind::Joint,
        &mut joint,
        &train,
        &dev,
        &vocabs,
        &joint_cfg,
        &pre,
        &RunOptions::default(),
    )
    .unwrap();

    let steps_equal = a.step_losses.len() == b.step_losses.len()
        && a.step_losses
            .iter()
            .zip(&b.step_losses)
            .all(|(x, y)| x.to_bits() == y.to_bits());
    let logs_equal = a.log.records.len() == 3
        && b.log.records.len() == 3
        && a.log.records.iter().zip(&b.log.records).all(|(x, y)| {
            x.ce_forward.to_bits() == y.ce_forward.to_bits()
                && x.total.to_bits() == y.total.to_bits()
                && x.val_acc.to_bits() == y.val_acc.to_bits()
        });
    let params_equal = [Group::Encoder, Group::Forward]
        .iter()
        .all(|&g| bits(&fwd, g) == bits(&joint, g));
    outcome(
        steps_equal && logs_equal && params_equal,
        format!(
            "3 epochs, {} steps: step losses equal {steps_equal}, epoch logs equal {logs_equal}, encoder+forward params equal {params_equal}",
            a.step_losses.len()
        ),
    )
}

fn equal_lengths() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let texts: Vec<String> = (0..1000)
        .map(|_| {
            let words: Vec<String> = (0..rng.random_range(1..=3))
                .map(|_| {
                    (0..rng.random_range(1..=8))
                        .map(|_| rng.random_range(b'a'..=b'z') as char)
                        .collect()
                })
                .collect();
            words.join(" ")
        })
        .collect();
    let char_vocab = VocabPair::learn(&texts, VocabKind::Char, 0, R2lMerges::Separate).unwrap();
    let bpe = VocabPair::learn(&texts, VocabKind::Bpe, 100, R2lMerges::Separate).unwrap();
    let mut char_bad = 0;
    let mut bpe_unequal = 0;
    for t in &texts {
        let (l, r) = (
            char_vocab.encode(t, Direction::L2R).len(),
            char_vocab.encode(t, Direction::R2L).len(),
        );
        if l != r || l != t.chars().count() {
            char_bad += 1;
        }
        if bpe.encode(t, Direction::L2R).len() != bpe.encode(t, Direction::R2L).len() {
            bpe_unequal += 1;
        }
    }
    outcome(
        char_bad == 0 && bpe_unequal > 0 && bpe.l2r.merges().len() == 100,
        format!("char: {char_bad}/1000 with |L2R| != |R2L| or != character count; BPE 100 merges: {bpe_unequal}/1000 unequal"),
    )
}

/// Prefix-keyed next-token table; unseen prefixes put all mass on eos.
struct Table(HashMap<Vec<usize>, Vec<f64>>, usize);

impl StepScorer for Table {
    type State = Vec<usize>;

    fn initial(&self) -> Vec<usize> {
        Vec::new()
    }

    fn score(&self, state: &Vec<usize>, prev: usize) -> Result<(Vec<f64>, Vec<usize>), ModelError> {
        let mut prefix = state.clone();
        if prev != self.sos() {
            prefix.push(prev);
        }
        let lp = self.0.get(&prefix).cloned().unwrap_or_else(|| {
            let mut v = vec![f64::NEG_INFINITY; self.1];
            v[self.eos()] = 0.0;
            v
        });
        Ok((lp, prefix))
    }

    fn sos(&self) -> usize {
        0
    }

    fn eos(&self) -> usize {
        1
    }
}

fn counterexample() -> (bool, f64, f64) {
    let (a, b, c) = (2, 3, 4);
    let row = |p: &[(usize, f64)]| {
        let mut v = vec![f64::NEG_INFINITY; 5];
        for &(t, q) in p {
            v[t] = f64::ln(q);
        }
        v
    };
    let mut t = HashMap::new();
    t.insert(vec![], row(&[(a, 0.6), (b, 0.4)]));
    t.insert(vec![a], row(&[(1, 0.3), (a, 0.25), (b, 0.25), (c, 0.2)]));
    t.insert(vec![b], row(&[(1, 0.9), (a, 0.05), (c, 0.05)]));
    let scorer = Table(t, 5);
    let g = greedy(&scorer, 10).unwrap();
    let r = beam_search(&scorer, 2, 10).unwrap();
    (
        r.best.tokens == vec![b, 1] && g.tokens == vec![a, 1],
        g.log_prob,
        r.best.log_prob,
    )
}

fn beam_one_is_greedy(out: &Path, data: &ExperimentData, settings: &Settings) -> Outcome {
    let vocabs = VocabPair::load(&out.join("char/vocab")).unwrap();
    let mut checked = 0;
    let mut differ = 0;
    for (setup, dir) in [
        (Setup::Forward, Direction::L2R),
        (Setup::BackwardFixed, Direction::R2L),
    ] {
        let ckpt = out
            .join("char/seed0")
            .join(setup.as_str())
            .join(checkpoint_name(setup.stage(), None));
        let model = load_model(settings, &vocabs, &ckpt).unwrap();
        for u in &data.dev {
            let scorer = ModelScorer::new(&model, dir, &u.tensor()).unwrap();
            let max_len = settings.decode.max_len(scorer.frames());
            let g = greedy(&scorer, max_len).unwrap();
            let b = beam_search(&scorer, 1, max_len).unwrap();
            checked += 1;
            if g.tokens != b.best.tokens || g.log_prob.to_bits() != b.best.log_prob.to_bits() {
                differ += 1;
            }
        }
    }
    let (shape_ok, lg, lb) = counterexample();
    outcome(
        differ == 0 && checked == 2 * data.dev.len() && shape_ok && lb > lg,
        format!(
            "beam=1 vs greedy: {differ}/{checked} dev decodes differ (L2R and R2L); counterexample greedy log p {lg:.4} < beam=2 {lb:.4}"
        ),
    )
}

fn learning(report: &fbdec_core::workbench::Report, elapsed: Duration) -> Outcome {
    let c = report
        .cell(Setup::Forward, VocabKind::Char, Split::Dev)
        .unwrap();
    let m = c.median();
    let seeds: Vec<String> = c
        .values
        .iter()
        .map(|(s, v)| format!("{s}:{v:.2}"))
        .collect();
    outcome(
        m <= 10.0 && c.values.len() == 3 && elapsed < Duration::from_secs(15 * 60),
        format!("Forward char dev WER median {m:.2}% (<= 10%) over seeds [{}], 3 seeds trained and decoded in {}", seeds.join(" "), secs(elapsed)),
    )
}

fn regularization(report: &fbdec_core::workbench::Report) -> Outcome {
    let mut ok = true;
    let mut parts = Vec::new();
    for t in [VocabKind::Char, VocabKind::Bpe] {
        let f = report.median(Setup::Forward, t, Split::Dev).unwrap();
        let r = report.median(Setup::DualDecoderReg, t, Split::Dev).unwrap();
        ok &= r <= f;
        parts.push(format!(
            "{}: DualDecoderReg {r:.2}% vs Forward {f:.2}%",
            t.as_str()
        ));
    }
    outcome(
        ok,
        format!("dev WER medians over 3 seeds, {}", parts.join("; ")),
    )
}

fn freeze(out: &Path) -> Outcome {
    let (vocabs, train, dev, mut cfg) = desk_fixture();
    cfg.max_epochs = 3;
    let dir = tempfile::tempdir().unwrap();
    let opts = RunOptions {
        out_dir: Some(dir.path().to_path_buf()),
        scripted_accuracy: None,
    };
    let mut model = DualModel::new(&cfg.dims, &vocabs, 41);
    let f = run_stage(
        StageKind::Forward,
        &mut model,
        &train,
        &dev,
        &vocabs,
        &cfg,
        &Prerequisites::default(),
        &opts,
    )
    .unwrap();
    let mut pre = Prerequisites::default();
    pre.set(StageKind::Forward, f.best_checkpoint.unwrap());
    let enc = bits(&model, Group::Encoder);
    let bwd = bits(&model, Group::Backward);
    run_stage(
        StageKind::BackwardFixed,
        &mut model,
        &train,
        &dev,
        &vocabs,
        &cfg,
        &pre,
        &opts,
    )
    .unwrap();
    let direct = bits(&model, Group::Encoder) == enc && bits(&model, Group::Backward) != bwd;

    // Same contract on the persisted experiment checkpoints.
    let mut files_ok = true;
    let n_enc = enc.len();
    for target in ["char", "bpe"] {
        for seed in 0..3 {
            let base = out.join(target).join(format!("seed{seed}"));
            let load = |setup: &str, stage: StageKind| -> HashMap<String, Vec<u64>> {
                let bytes =
                    std::fs::read(base.join(setup).join(checkpoint_name(stage, None))).unwrap();
                read_checkpoint(&bytes)
                    .unwrap()
                    .into_iter()
                    .filter(|(n, _)| n.starts_with("enc"))
                    .map(|(n, t)| (n, t.data().iter().map(|x| x.to_bits()).collect()))
                    .collect()
            };
            let a = load("forward", StageKind::Forward);
            let b = load("backward_fixed", StageKind::BackwardFixed);
            files_ok &= a.len() == n_enc && a == b;
        }
    }
    outcome(
        direct && files_ok,
        format!("{n_enc} encoder tensors bit-identical across a 3-epoch stage: {direct}; in all 6 experiment backward_fixed checkpoints: {files_ok}"),
    )
}

fn early_stopping() -> Outcome {
    let (vocabs, train, dev, mut cfg) = desk_fixture();
    cfg.max_epochs = 10;
    let mut model = DualModel::new(&cfg.dims, &vocabs, 51);
    let script = vec![0.5, 0.7, 0.6, 0.6, 0.65, 0.7, 0.9, 0.9];
    let opts = RunOptions {
        out_dir: None,
        scripted_accuracy: Some(script.clone()),
    };
    let rep = run_stage(
        StageKind::Forward,
        &mut model,
        &train,
        &dev,
        &vocabs,
        &cfg,
        &Prerequisites::default(),
        &opts,
    )
    .unwrap();
    let eps: Vec<f64> = rep.log.records.iter().map(|r| r.epsilon).collect();
    let decays = [0, 0, 1, 2, 3, 4];
    let eps_ok = eps.len() == decays.len()
        && eps.iter().zip(decays).all(|(&e, k)| {
            (e - cfg.eps_init * 0.01f64.powi(k)).abs() <= 1e-12 * cfg.eps_init * 0.01f64.powi(k)
        });
    outcome(
        rep.stopped_early && rep.log.records.len() == 6 && eps_ok && rep.best_epoch == 2,
        format!(
            "script {script:?}: stopped after epoch {} (best {}), epsilon per epoch {:?}",
            rep.log.records.len(),
            rep.best_epoch,
            eps.iter().map(|e| format!("{e:.0e}")).collect::<Vec<_>>()
        ),
    )
}

fn main() {
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    let mut report_line = |n: usize, name: &'static str, o: Outcome| {
        println!(
            "{} {n:>2} {name}: {}",
            if o.passed { "PASS" } else { "FAIL" },
            o.detail
        );
        results.push((n, name, o));
    };

    report_line(1, "soft-DTW oracle equivalence", softdtw_oracle());
    report_line(2, "hard-DTW limit", hard_limit());
    report_line(3, "gradient checks", gradients());
    report_line(4, "degenerate-weight equivalence", degenerate_weights());
    report_line(5, "char equal lengths, BPE unequal", equal_lengths());

    let dir = tempfile::tempdir().unwrap();
    let mut settings = Settings {
        seeds: vec![0, 1, 2],
        ..Settings::default()
    };
    let data = ExperimentData::synthetic(&settings.data).unwrap();
    settings.setups = vec![Setup::Forward];
    settings.targets = vec![VocabKind::Char];
    let start = Instant::now();
    let forward = run_experiment(
        &ExperimentPlan::from_settings(settings.clone(), dir.path().to_path_buf()),
        &data,
    )
    .unwrap();
    let forward_time = start.elapsed();
    settings.setups = vec![Setup::Forward, Setup::BackwardFixed, Setup::DualDecoderReg];
    settings.targets = vec![VocabKind::Char, VocabKind::Bpe];
    let full = run_experiment(
        &ExperimentPlan::from_settings(settings.clone(), dir.path().to_path_buf()),
        &data,
    )
    .unwrap();

    report_line(
        6,
        "beam search",
        beam_one_is_greedy(dir.path(), &data, &settings),
    );
    report_line(7, "toy-task learning", learning(&forward, forward_time));
    report_line(8, "regularization effect", regularization(&full));
    report_line(9, "freeze contract", freeze(dir.path()));
    report_line(10, "early stopping", early_stopping());

    let failed: Vec<usize> = results
        .iter()
        .filter(|(_, _, o)| !o.passed)
        .map(|(n, _, _)| *n)
        .collect();
    println!(
        "acceptance: {}/{} criteria passed",
        results.len() - failed.len(),
        results.len()
    );
    if !failed.is_empty() {
        eprintln!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
