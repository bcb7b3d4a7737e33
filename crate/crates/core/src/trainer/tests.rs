use proptest::prelude::*;

use super::*;
use crate::data::{gen_synthetic, SyntheticConfig};
use crate::tokenizer::R2lMerges;

fn scalar_param(name: &str, value: f64, grad: f64) -> Param {
    Param {
        name: name.into(),
        group: Group::Encoder,
        value: Tensor::scalar(value),
        grad: Tensor::scalar(grad),
        frozen: false,
    }
}

fn state_for(params: &[Param], eps: f64, rho: f64) -> OptimizerState {
    let zeros: Vec<Tensor> = params
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

#[test]
fn adadelta_first_step_matches_hand_computation() {
    let mut params = vec![scalar_param("w", 0.0, 1.0)];
    let mut st = state_for(&params, 1e-8, 0.95);
    st.step(&mut params).unwrap();
    // E[g^2] = 0.05, dx = -sqrt(1e-8)/sqrt(0.05 + 1e-8)
    let expected = -(1e-8f64).sqrt() / (0.05f64 + 1e-8).sqrt();
    assert!((params[0].value.item() - expected).abs() < 1e-18);
    assert!((params[0].value.item() + 4.4721e-4).abs() < 1e-8);
    assert!((st.sq_grad[0].item() - 0.05).abs() < 1e-15);
    assert!((st.sq_update[0].item() - 0.05 * expected * expected).abs() < 1e-20);
}

#[test]
fn adadelta_zero_gradient_decays_accumulators() {
    let mut params = vec![scalar_param("w", 0.3, 0.0), scalar_param("v", -1.5, 0.0)];
    let mut st = state_for(&params, 1e-8, 0.95);
    st.sq_grad[0] = Tensor::scalar(2.0);
    st.sq_update[1] = Tensor::scalar(4.0);
    st.step(&mut params).unwrap();
    assert_eq!(params[0].value.item(), 0.3);
    assert_eq!(params[1].value.item(), -1.5);
    assert!((st.sq_grad[0].item() - 1.9).abs() < 1e-15);
    assert!((st.sq_update[1].item() - 3.8).abs() < 1e-15);
}

#[test]
fn adadelta_leaves_frozen_parameters_alone() {
    let mut params = vec![scalar_param("w", 0.7, 3.0), scalar_param("v", 0.7, 3.0)];
    params[0].frozen = true;
    let mut st = state_for(&params, 1e-8, 0.95);
    st.step(&mut params).unwrap();
    assert_eq!(params[0].value.item().to_bits(), 0.7f64.to_bits());
    assert_eq!(st.sq_grad[0].item(), 0.0);
    assert_ne!(params[1].value.item(), 0.7);
}

#[test]
fn adadelta_rejects_non_finite_gradient_by_name() {
    let mut params = vec![
        scalar_param("ok", 1.0, 1.0),
        scalar_param("enc.bad", 1.0, f64::NAN),
    ];
    let mut st = state_for(&params, 1e-8, 0.95);
    match st.step(&mut params) {
        Err(TrainError::NonFiniteGradient { name }) => assert_eq!(name, "enc.bad"),
        other => panic!("{other:?}"),
    }
    assert_eq!(params[0].value.item(), 1.0);
    assert_eq!(st.sq_grad[0].item(), 0.0);
}

#[test]
fn clipping_bounds_the_global_norm() {
    let mut params = vec![
        scalar_param("a", 0.0, 3.0),
        scalar_param("b", 0.0, 4.0),
        scalar_param("c", 0.0, 100.0),
    ];
    params[2].frozen = true;
    let norm = clip_global_norm(&mut params, 1.0);
    assert!((norm - 5.0).abs() < 1e-12);
    assert!((params[0].grad.item() - 0.6).abs() < 1e-12);
    assert!((params[1].grad.item() - 0.8).abs() < 1e-12);
    assert_eq!(params[2].grad.item(), 100.0);
    let norm = clip_global_norm(&mut params, 10.0);
    assert!((norm - 1.0).abs() < 1e-12);
    assert!((params[0].grad.item() - 0.6).abs() < 1e-12);
}

fn opt() -> OptimizerState {
    OptimizerState {
        sq_grad: vec![],
        sq_update: vec![],
        eps: 1e-8,
        rho: 0.95,
    }
}

#[test]
fn improving_sequence_keeps_counter_and_epsilon() {
    let mut st = opt();
    let mut es = EarlyStopping::new(3, 0.01);
    for acc in [0.5, 0.6, 0.7] {
        let d = es.epoch_end(acc, &mut st);
        assert!(d.improved && !d.stop);
    }
    assert_eq!(es.counter, 0);
    assert_eq!(st.eps, 1e-8);
}

#[test]
fn four_non_improvements_stop() {
    let mut st = opt();
    let mut es = EarlyStopping::new(3, 0.01);
    assert!(!es.epoch_end(0.7, &mut st).stop);
    let stops: Vec<bool> = (0..4).map(|_| es.epoch_end(0.6, &mut st).stop).collect();
    assert_eq!(stops, [false, false, false, true]);
    assert_eq!(es.counter, 4);
    assert!((st.eps - 1e-16).abs() < 1e-30);
}

#[test]
fn one_non_improvement_decays_epsilon() {
    let mut st = opt();
    let mut es = EarlyStopping::new(3, 0.01);
    es.epoch_end(0.5, &mut st);
    es.epoch_end(0.5, &mut st);
    assert!((st.eps - 1e-10).abs() < 1e-24);
}

#[test]
fn counter_is_not_reset_by_later_improvement() {
    let mut st = opt();
    let mut es = EarlyStopping::new(3, 0.01);
    for acc in [0.5, 0.4, 0.6, 0.6, 0.7, 0.7] {
        es.epoch_end(acc, &mut st);
    }
    assert_eq!(es.counter, 3);
    assert!(es.epoch_end(0.1, &mut st).stop);
}

proptest! {
    #[test]
    fn epsilon_drops_exactly_on_non_improving_epochs(accs in proptest::collection::vec(0.0f64..1.0, 1..20)) {
        let mut st = opt();
        let mut es = EarlyStopping::new(100, 0.01);
        let mut best = f64::NEG_INFINITY;
        for acc in accs {
            let before = st.eps;
            let d = es.epoch_end(acc, &mut st);
            prop_assert_eq!(d.improved, acc > best);
            if d.improved {
                best = acc;
                prop_assert_eq!(st.eps, before);
            } else {
                prop_assert!(st.eps < before);
            }
        }
    }

    #[test]
    fn batches_partition_the_data(lengths in proptest::collection::vec(1usize..50, 1..40), b in 1usize..9, seed in 0u64..50) {
        let batches = make_batches(&lengths, b, seed, 1);
        let mut seen: Vec<usize> = batches.iter().flat_map(|x| x.indices.clone()).collect();
        seen.sort();
        prop_assert_eq!(seen, (0..lengths.len()).collect::<Vec<_>>());
        prop_assert!(batches.iter().all(|x| x.indices.len() <= b));
        prop_assert_eq!(batches.len(), lengths.len().div_ceil(b));
    }
}

#[test]
fn batching_examples() {
    let lengths = [5, 3, 9, 1, 7, 2, 8, 4, 6, 10];
    let b = make_batches(&lengths, 4, 7, 1);
    let mut sizes: Vec<usize> = b.iter().map(|x| x.indices.len()).collect();
    sizes.sort();
    assert_eq!(sizes, [2, 4, 4]);
    for batch in &b {
        let lens = &batch.lengths;
        assert!(lens.windows(2).all(|w| w[0] <= w[1]));
        for (k, &i) in batch.indices.iter().enumerate() {
            assert_eq!(lens[k], lengths[i]);
        }
    }
    let sorted: Vec<Vec<usize>> = {
        let mut v: Vec<Vec<usize>> = b.iter().map(|x| x.lengths.clone()).collect();
        v.sort();
        v
    };
    assert_eq!(
        sorted,
        vec![vec![1, 2, 3, 4], vec![5, 6, 7, 8], vec![9, 10]]
    );
    assert_eq!(make_batches(&lengths, 4, 7, 1), b);
    let orders: std::collections::HashSet<Vec<usize>> = (1..10)
        .map(|e| {
            make_batches(&lengths, 4, 7, e)
                .iter()
                .map(|x| x.lengths[0])
                .collect()
        })
        .collect();
    assert!(orders.len() > 1);
}

#[test]
fn batch_masks_mark_valid_frames() {
    let b = make_batches(&[3, 5], 2, 0, 1).remove(0);
    assert_eq!(b.padded_len(), 5);
    assert_eq!(b.mask(0), [true, true, true, false, false]);
    assert_eq!(b.mask(1), [true; 5]);
}

#[test]
fn stage_names_round_trip() {
    for k in StageKind::ALL {
        assert_eq!(k.as_str().parse::<StageKind>().unwrap(), k);
    }
    assert!("joint-reg".parse::<StageKind>().is_err());
    assert_eq!(
        "greedy_wer".parse::<ValidationMetric>().unwrap(),
        ValidationMetric::GreedyWer
    );
}

#[test]
fn config_validation() {
    assert!(TrainConfig::default().validate().is_ok());
    let cases: Vec<TrainConfig> = vec![
        TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        },
        TrainConfig {
            patience: 0,
            ..TrainConfig::default()
        },
        TrainConfig {
            eps_decay: 1.0,
            ..TrainConfig::default()
        },
        TrainConfig {
            eps_decay: 0.0,
            ..TrainConfig::default()
        },
        TrainConfig {
            stages: vec![],
            ..TrainConfig::default()
        },
    ];
    for c in cases {
        assert!(matches!(c.validate(), Err(TrainError::Config(_))), "{c:?}");
    }
    assert_eq!(TrainConfig::for_target(VocabKind::Bpe).loss.lambda, 1e-4);
    assert_eq!(
        TrainConfig::default().stage_loss(StageKind::Joint).lambda,
        0.0
    );
    assert_eq!(
        TrainConfig::default()
            .stage_loss(StageKind::JointReg)
            .lambda,
        1.0
    );
}

struct Fixture {
    vocabs: VocabPair,
    train: Vec<Example>,
    dev: Vec<Example>,
    cfg: TrainConfig,
}

fn fixture(kind: VocabKind) -> Fixture {
    let utts = gen_synthetic(&SyntheticConfig {
        utterances: 12,
        letters: 4,
        lexicon_size: 6,
        max_words: 2,
        max_word_len: 3,
        feat_dim: 6,
        seed: 5,
        ..SyntheticConfig::default()
    })
    .unwrap();
    let corpus: Vec<String> = utts.iter().map(|u| u.transcript.clone()).collect();
    let vocabs = VocabPair::learn(&corpus, kind, 10, R2lMerges::Separate).unwrap();
    let examples = prepare_examples(&utts, &vocabs);
    let mut cfg = TrainConfig::for_target(kind);
    cfg.dims = ModelDims {
        feat_dim: 6,
        enc_units: 6,
        enc_proj: Some(6),
        att_dim: 6,
        conv_channels: 2,
        conv_width: 3,
        dec_units: 6,
        emb_dim: 4,
        ..ModelDims::default()
    };
    cfg.batch_size = 4;
    cfg.max_epochs = 2;
    cfg.eps_init = 1e-6;
    cfg.log_val_wer = false;
    Fixture {
        vocabs,
        train: examples[..9].to_vec(),
        dev: examples[9..].to_vec(),
        cfg,
    }
}

fn group_values(m: &DualModel, group: Group) -> Vec<(String, Vec<u64>)> {
    m.store
        .group_values(group)
        .into_iter()
        .map(|(n, t)| (n, t.data().iter().map(|x| x.to_bits()).collect()))
        .collect()
}

#[test]
fn missing_prerequisites_are_rejected_before_training() {
    let fx = fixture(VocabKind::Char);
    let mut model = DualModel::new(&fx.cfg.dims, &fx.vocabs, 1);
    let before = group_values(&model, Group::Encoder);
    for kind in [
        StageKind::BackwardFixed,
        StageKind::Joint,
        StageKind::JointReg,
    ] {
        let err = run_stage(
            kind,
            &mut model,
            &fx.train,
            &fx.dev,
            &fx.vocabs,
            &fx.cfg,
            &Prerequisites::default(),
            &RunOptions::default(),
        )
        .unwrap_err();
        assert!(
            matches!(
                err,
                TrainError::MissingPrerequisite {
                    needs: StageKind::Forward,
                    ..
                }
            ),
            "{err}"
        );
    }
    let dir = tempfile::tempdir().unwrap();
    let fwd = dir.path().join("forward.best.ddck");
    model.store.save(&fwd).unwrap();
    let pre = Prerequisites {
        forward: Some(fwd),
        backward_fixed: None,
    };
    let err = run_stage(
        StageKind::Joint,
        &mut model,
        &fx.train,
        &fx.dev,
        &fx.vocabs,
        &fx.cfg,
        &pre,
        &RunOptions::default(),
    )
    .unwrap_err();
    assert!(matches!(
        err,
        TrainError::MissingPrerequisite {
            needs: StageKind::BackwardFixed,
            ..
        }
    ));
    assert_eq!(group_values(&model, Group::Encoder), before);
}

#[test]
fn backward_fixed_keeps_encoder_bit_identical() {
    let fx = fixture(VocabKind::Char);
    let dir = tempfile::tempdir().unwrap();
    let mut model = DualModel::new(&fx.cfg.dims, &fx.vocabs, 2);
    let opts = RunOptions {
        out_dir: Some(dir.path().to_path_buf()),
        ..RunOptions::default()
    };
    let fwd = run_stage(
        StageKind::Forward,
        &mut model,
        &fx.train,
        &fx.dev,
        &fx.vocabs,
        &fx.cfg,
        &Prerequisites::default(),
        &opts,
    )
    .unwrap();
    let mut pre = Prerequisites::default();
    pre.set(StageKind::Forward, fwd.best_checkpoint.clone().unwrap());
    let enc = group_values(&model, Group::Encoder);
    let fwd_dec = group_values(&model, Group::Forward);
    let bwd_before = group_values(&model, Group::Backward);
    run_stage(
        StageKind::BackwardFixed,
        &mut model,
        &fx.train,
        &fx.dev,
        &fx.vocabs,
        &fx.cfg,
        &pre,
        &opts,
    )
    .unwrap();
    assert_eq!(group_values(&model, Group::Encoder), enc);
    assert_eq!(group_values(&model, Group::Forward), fwd_dec);
    assert_ne!(group_values(&model, Group::Backward), bwd_before);
    for name in [
        "forward.ep1.ddck",
        "forward.ep2.ddck",
        "forward.best.ddck",
        "backward_fixed.best.ddck",
        "forward.log",
    ] {
        assert!(dir.path().join(name).is_file(), "{name}");
    }
    let log = fs::read_to_string(dir.path().join("forward.log")).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines[0], LOG_HEADER);
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("forward\t1\t"));
    assert_eq!(lines[1].split('\t').count(), 11);
}

#[test]
fn degenerate_joint_weights_reproduce_forward_training() {
    let fx = fixture(VocabKind::Char);
    let dir = tempfile::tempdir().unwrap();
    let init = DualModel::new(&fx.cfg.dims, &fx.vocabs, 3);
    let ckpt = dir.path().join("init.ddck");
    init.store.save(&ckpt).unwrap();
    let mut cfg = fx.cfg.clone();
    cfg.max_epochs = 2;

    let mut fwd = init.clone();
    let a = run_stage(
        StageKind::Forward,
        &mut fwd,
        &fx.train,
        &fx.dev,
        &fx.vocabs,
        &cfg,
        &Prerequisites::default(),
        &RunOptions::default(),
    )
    .unwrap();

    let mut joint_cfg = cfg.clone();
    joint_cfg.loss.alpha = 1.0;
    let mut joint = init.clone();
    let pre = Prerequisites {
        forward: Some(ckpt.clone()),
        backward_fixed: Some(ckpt),
    };
    let b = run_stage(
        StageKind::Joint,
        &mut joint,
        &fx.train,
        &fx.dev,
        &fx.vocabs,
        &joint_cfg,
        &pre,
        &RunOptions::default(),
    )
    .unwrap();

    assert_eq!(a.step_losses.len(), b.step_losses.len());
    for (x, y) in a.step_losses.iter().zip(&b.step_losses) {
        assert_eq!(x.to_bits(), y.to_bits());
    }
    for (ra, rb) in a.log.records.iter().zip(&b.log.records) {
        assert_eq!(ra.ce_forward.to_bits(), rb.ce_forward.to_bits());
        assert_eq!(ra.total.to_bits(), rb.total.to_bits());
        assert_eq!(ra.val_acc, rb.val_acc);
    }
    for group in [Group::Encoder, Group::Forward] {
        assert_eq!(group_values(&fwd, group), group_values(&joint, group));
    }
    assert_eq!(
        group_values(&joint, Group::Backward),
        group_values(&init, Group::Backward)
    );
}

#[test]
fn logged_addends_recombine_and_runs_reproduce() {
    let fx = fixture(VocabKind::Bpe);
    let dir = tempfile::tempdir().unwrap();
    let mut model = DualModel::new(&fx.cfg.dims, &fx.vocabs, 4);
    let ckpt = dir.path().join("init.ddck");
    model.store.save(&ckpt).unwrap();
    let pre = Prerequisites {
        forward: Some(ckpt.clone()),
        backward_fixed: Some(ckpt),
    };
    let mut cfg = fx.cfg.clone();
    cfg.loss.lambda = 0.5;
    let init = model.clone();
    let a = run_stage(
        StageKind::JointReg,
        &mut model,
        &fx.train,
        &fx.dev,
        &fx.vocabs,
        &cfg,
        &pre,
        &RunOptions::default(),
    )
    .unwrap();
    for r in &a.log.records {
        let recombined = cfg.loss.alpha * r.ce_forward
            + (1.0 - cfg.loss.alpha) * r.ce_backward
            + cfg.loss.lambda * r.omega;
        assert!(
            (r.total - recombined).abs() <= 1e-12,
            "{} vs {}",
            r.total,
            recombined
        );
        assert!(r.omega != 0.0);
    }
    let mut again = init.clone();
    let b = run_stage(
        StageKind::JointReg,
        &mut again,
        &fx.train,
        &fx.dev,
        &fx.vocabs,
        &cfg,
        &pre,
        &RunOptions::default(),
    )
    .unwrap();
    assert_eq!(a.log.records.len(), b.log.records.len());
    for (x, y) in a.log.records.iter().zip(&b.log.records) {
        assert!(x.same_outcome(y));
    }
    assert_eq!(a.step_losses, b.step_losses);
}

#[test]
fn scripted_validation_stops_after_four_non_improvements() {
    let fx = fixture(VocabKind::Char);
    let mut cfg = fx.cfg.clone();
    cfg.max_epochs = 10;
    let mut model = DualModel::new(&cfg.dims, &fx.vocabs, 6);
    let opts = RunOptions {
        scripted_accuracy: Some(vec![0.7, 0.6, 0.6, 0.6, 0.6, 0.9, 0.9]),
        ..RunOptions::default()
    };
    let rep = run_stage(
        StageKind::Forward,
        &mut model,
        &fx.train,
        &fx.dev,
        &fx.vocabs,
        &cfg,
        &Prerequisites::default(),
        &opts,
    )
    .unwrap();
    assert!(rep.stopped_early);
    assert_eq!(rep.log.records.len(), 5);
    let eps: Vec<f64> = rep.log.records.iter().map(|r| r.epsilon).collect();
    for (k, e) in eps.iter().enumerate() {
        let expected = cfg.eps_init * 0.01f64.powi(k as i32);
        assert!(
            (e - expected).abs() <= expected * 1e-12,
            "epoch {}: {e}",
            k + 1
        );
    }
    assert!(eps.windows(2).all(|w| w[1] < w[0]));
    assert_eq!(rep.best_epoch, 1);
    assert_eq!(rep.log.records.last().unwrap().patience, 4);
}

#[test]
fn best_epoch_parameters_are_restored() {
    let fx = fixture(VocabKind::Char);
    let mut cfg = fx.cfg.clone();
    cfg.max_epochs = 3;
    let dir = tempfile::tempdir().unwrap();
    let mut model = DualModel::new(&cfg.dims, &fx.vocabs, 7);
    let opts = RunOptions {
        out_dir: Some(dir.path().to_path_buf()),
        scripted_accuracy: Some(vec![0.2, 0.9, 0.1]),
    };
    let rep = run_stage(
        StageKind::Forward,
        &mut model,
        &fx.train,
        &fx.dev,
        &fx.vocabs,
        &cfg,
        &Prerequisites::default(),
        &opts,
    )
    .unwrap();
    assert_eq!(rep.best_epoch, 2);
    let mut reloaded = model.clone();
    reloaded
        .store
        .load_groups(&dir.path().join("forward.ep2.ddck"), &Group::ALL)
        .unwrap();
    assert_eq!(
        group_values(&reloaded, Group::Encoder),
        group_values(&model, Group::Encoder)
    );
    let mut third = model.clone();
    third
        .store
        .load_groups(&dir.path().join("forward.ep3.ddck"), &Group::ALL)
        .unwrap();
    assert_ne!(
        group_values(&third, Group::Encoder),
        group_values(&model, Group::Encoder)
    );
    assert!(model.store.iter().all(|p| !p.frozen));
}

#[test]
fn training_reduces_loss() {
    let fx = fixture(VocabKind::Char);
    let mut cfg = fx.cfg.clone();
    cfg.max_epochs = 4;
    cfg.eps_init = 1e-4;
    let mut model = DualModel::new(&cfg.dims, &fx.vocabs, 8);
    let opts = RunOptions {
        scripted_accuracy: Some(vec![1.0, 2.0, 3.0, 4.0]),
        ..RunOptions::default()
    };
    let rep = run_stage(
        StageKind::Forward,
        &mut model,
        &fx.train,
        &fx.dev,
        &fx.vocabs,
        &cfg,
        &Prerequisites::default(),
        &opts,
    )
    .unwrap();
    let first = rep.log.records.first().unwrap().total;
    let last = rep.log.records.last().unwrap().total;
    assert!(last < first, "{first} -> {last}");
}
