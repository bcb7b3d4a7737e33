use std::collections::HashMap;
use std::hash::{DefaultHasher, Hash, Hasher};

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::model::ModelDims;
use crate::tokenizer::{R2lMerges, VocabKind};

const SOS: usize = 0;
const EOS: usize = 1;

/// Prefix-keyed table of next-token distributions; unseen prefixes put all
/// mass on eos.
struct TableScorer {
    vocab: usize,
    table: HashMap<Vec<usize>, Vec<f64>>,
}

type Row<'a> = (&'a [usize], &'a [(usize, f64)]);

impl TableScorer {
    fn new(vocab: usize, rows: &[Row]) -> Self {
        let mut table = HashMap::new();
        for (prefix, probs) in rows {
            let mut p = vec![0.0; vocab];
            for &(t, q) in *probs {
                p[t] = q;
            }
            table.insert(prefix.to_vec(), p.iter().map(|x| x.ln()).collect());
        }
        TableScorer { vocab, table }
    }
}

impl StepScorer for TableScorer {
    type State = Vec<usize>;

    fn initial(&self) -> Vec<usize> {
        Vec::new()
    }

    fn score(&self, state: &Vec<usize>, prev: usize) -> Result<(Vec<f64>, Vec<usize>), ModelError> {
        let mut prefix = state.clone();
        if prev != SOS {
            prefix.push(prev);
        }
        let lp = self.table.get(&prefix).cloned().unwrap_or_else(|| {
            let mut v = vec![f64::NEG_INFINITY; self.vocab];
            v[EOS] = 0.0;
            v
        });
        Ok((lp, prefix))
    }

    fn sos(&self) -> usize {
        SOS
    }

    fn eos(&self) -> usize {
        EOS
    }
}

/// Pseudo-random distributions keyed by prefix.
struct HashScorer {
    vocab: usize,
    seed: u64,
    eos_bias: f64,
}

impl StepScorer for HashScorer {
    type State = Vec<usize>;

    fn initial(&self) -> Vec<usize> {
        Vec::new()
    }

    fn score(&self, state: &Vec<usize>, prev: usize) -> Result<(Vec<f64>, Vec<usize>), ModelError> {
        let mut prefix = state.clone();
        if prev != SOS {
            prefix.push(prev);
        }
        let mut h = DefaultHasher::new();
        (self.seed, &prefix).hash(&mut h);
        let mut rng = ChaCha8Rng::seed_from_u64(h.finish());
        let mut logits: Vec<f64> = (0..self.vocab)
            .map(|_| rng.random_range(-3.0..3.0))
            .collect();
        logits[EOS] += self.eos_bias * prefix.len() as f64;
        let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z = m + logits.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
        Ok((logits.iter().map(|x| x - z).collect(), prefix))
    }

    fn sos(&self) -> usize {
        SOS
    }

    fn eos(&self) -> usize {
        EOS
    }
}

#[test]
fn beam_two_beats_greedy_on_constructed_instance() {
    let (a, b, c) = (2, 3, 4);
    let scorer = TableScorer::new(
        5,
        &[
            (&[], &[(a, 0.6), (b, 0.4)]),
            (&[a], &[(EOS, 0.3), (a, 0.25), (b, 0.25), (c, 0.2)]),
            (&[b], &[(EOS, 0.9), (a, 0.05), (c, 0.05)]),
        ],
    );
    let g = greedy(&scorer, 10).unwrap();
    assert_eq!(g.tokens, vec![a, EOS]);
    assert!((g.log_prob - 0.18f64.ln()).abs() < 1e-12);

    let r = beam_search(&scorer, 2, 10).unwrap();
    assert_eq!(r.best.tokens, vec![b, EOS]);
    assert!((r.best.log_prob - 0.36f64.ln()).abs() < 1e-12);
    assert!(r.best.log_prob > g.log_prob);

    // Exhaustive check over all two-token sequences ending in eos.
    let mut best = (f64::NEG_INFINITY, 0);
    for first in [a, b, c] {
        let (lp1, s1) = scorer.score(&vec![], SOS).unwrap();
        let (lp2, _) = scorer.score(&s1, first).unwrap();
        let total = lp1[first] + lp2[EOS];
        if total > best.0 {
            best = (total, first);
        }
    }
    assert_eq!(best.1, b);
}

#[test]
fn beam_one_is_greedy_on_table() {
    let scorer = TableScorer::new(4, &[(&[], &[(2, 0.5), (3, 0.5)]), (&[2], &[(EOS, 1.0)])]);
    let g = greedy(&scorer, 5).unwrap();
    let b = beam_search(&scorer, 1, 5).unwrap();
    assert_eq!(g.tokens, vec![2, EOS]);
    assert_eq!(b.best.tokens, g.tokens);
    assert_eq!(b.best.log_prob.to_bits(), g.log_prob.to_bits());
}

#[test]
fn unfinished_search_is_flagged() {
    let scorer = HashScorer {
        vocab: 6,
        seed: 3,
        eos_bias: -100.0,
    };
    let r = beam_search(&scorer, 3, 4).unwrap();
    assert!(r.unfinished);
    assert_eq!(r.best.tokens.len(), 4);
    assert!(!greedy(&scorer, 4).unwrap().finished);
}

#[test]
fn sos_is_never_emitted() {
    let scorer = TableScorer::new(3, &[(&[], &[(SOS, 0.9), (2, 0.1)]), (&[2], &[(EOS, 1.0)])]);
    assert_eq!(greedy(&scorer, 5).unwrap().tokens, vec![2, EOS]);
    assert_eq!(
        beam_search(&scorer, 3, 5).unwrap().best.tokens,
        vec![2, EOS]
    );
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn beam_one_matches_greedy(seed in 0u64..100_000, vocab in 3usize..8) {
        let scorer = HashScorer { vocab, seed, eos_bias: 0.7 };
        let g = greedy(&scorer, 12).unwrap();
        let b = beam_search(&scorer, 1, 12).unwrap();
        prop_assert_eq!(&b.best.tokens, &g.tokens);
        prop_assert_eq!(b.best.log_prob.to_bits(), g.log_prob.to_bits());
    }
}

#[test]
fn widening_the_beam_can_lose_the_greedy_path() {
    let (a, b, x, y, z, w, p, q, r, t) = (2, 3, 4, 5, 6, 7, 8, 9, 10, 11);
    let quarter: &[(usize, f64)] = &[(x, 0.25), (y, 0.25), (z, 0.25), (w, 0.25)];
    let tail: &[(usize, f64)] = &[(EOS, 0.1), (r, 0.45), (t, 0.45)];
    let scorer = TableScorer::new(
        12,
        &[
            (&[], &[(a, 0.5), (b, 0.4), (EOS, 0.1)]),
            (&[a], quarter),
            (&[b], &[(p, 0.5), (q, 0.5)]),
            (&[b, p], tail),
            (&[b, q], tail),
        ],
    );
    let narrow = beam_search(&scorer, 1, 6).unwrap();
    let wide = beam_search(&scorer, 2, 6).unwrap();
    assert_eq!(narrow.best.tokens, vec![a, x, EOS]);
    assert!((narrow.best_log_prob().unwrap() - 0.125f64.ln()).abs() < 1e-12);
    // Both children of b outrank a's best child, so a's branch is pruned.
    assert_eq!(wide.best.tokens.len(), 4);
    assert!((wide.best_log_prob().unwrap() - 0.09f64.ln()).abs() < 1e-12);
    assert!(wide.best_log_prob().unwrap() < narrow.best_log_prob().unwrap());
}

#[test]
fn wer_examples() {
    assert_eq!(wer("a b c", "a b c").unwrap().wer(), 0.0);
    let r = wer("a b c", "a x c").unwrap();
    assert_eq!((r.substitutions, r.insertions, r.deletions), (1, 0, 0));
    assert!((r.wer() - 100.0 / 3.0).abs() < 1e-12);
    let r = wer("a b", "a x y").unwrap();
    assert_eq!(r.errors(), 2);
    assert_eq!((r.substitutions, r.insertions, r.deletions), (1, 1, 0));
    assert_eq!(r.wer(), 100.0);
    assert_eq!(wer("", "a"), Err(WerError::EmptyReference));
    assert_eq!(wer("a b", "").unwrap().deletions, 2);
}

fn words() -> impl Strategy<Value = Vec<&'static str>> {
    prop::collection::vec(prop::sample::select(vec!["a", "b", "c"]), 0..=4)
}

proptest! {
    #[test]
    fn wer_matches_brute_force(r in words(), h in words()) {
        prop_assume!(!r.is_empty());
        let dp = wer(&r.join(" "), &h.join(" ")).unwrap();
        prop_assert_eq!(dp, wer_oracle(&r, &h));
    }

    #[test]
    fn wer_swap_exchanges_insertions_and_deletions(r in words(), h in words()) {
        prop_assume!(!r.is_empty() && !h.is_empty());
        let a = wer(&r.join(" "), &h.join(" ")).unwrap();
        let b = wer(&h.join(" "), &r.join(" ")).unwrap();
        prop_assert_eq!(a.substitutions, b.substitutions);
        prop_assert_eq!(a.insertions, b.deletions);
        prop_assert_eq!(a.deletions, b.insertions);
        prop_assert_eq!(wer(&r.join(" "), &r.join(" ")).unwrap().errors(), 0);
    }
}

#[test]
fn corpus_wer_pools_counts() {
    let mut c = CorpusWer::default();
    c.add(&wer("a b", "a b").unwrap());
    c.add(&wer("a b c d", "a").unwrap());
    assert_eq!(c.total.errors(), 3);
    assert!((c.wer() - 50.0).abs() < 1e-12);
}

fn toy_model(seed: u64) -> (DualModel, VocabPair) {
    let vocabs = VocabPair::learn(
        &["abc cab".to_string()],
        VocabKind::Char,
        0,
        R2lMerges::Separate,
    )
    .unwrap();
    let dims = ModelDims {
        feat_dim: 3,
        enc_units: 4,
        enc_proj: Some(5),
        att_dim: 4,
        conv_channels: 2,
        conv_width: 3,
        dec_units: 6,
        emb_dim: 3,
        init_scale: 0.1,
        ..ModelDims::default()
    };
    (DualModel::new(&dims, &vocabs, seed), vocabs)
}

fn features(seed: u64, frames: usize) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::matrix(
        frames,
        3,
        (0..frames * 3)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect(),
    )
}

#[test]
fn model_scorer_agrees_with_teacher_forcing() {
    let (model, vocabs) = toy_model(1);
    let x = features(2, 9);
    let scorer = ModelScorer::new(&model, Direction::L2R, &x).unwrap();
    let hyp = greedy(&scorer, 9).unwrap();
    let content = hyp.content(scorer.eos()).to_vec();
    let seq = TokenSeq {
        ids: content.clone(),
        direction: Direction::L2R,
    };
    let ll = sequence_log_likelihood(&model, &x, &seq).unwrap();
    if hyp.finished {
        assert!(
            (ll - hyp.log_prob).abs() < 1e-10,
            "{ll} vs {}",
            hyp.log_prob
        );
    }
    let again = ModelScorer::new(&model, Direction::L2R, &x).unwrap();
    assert_eq!(greedy(&again, 9).unwrap().tokens, hyp.tokens);
    let d = decode_utterance(
        &model,
        &vocabs,
        Direction::L2R,
        "u1",
        &x,
        &DecodeSettings {
            beam: 1,
            max_len_ratio: 1.0,
        },
    )
    .unwrap();
    assert_eq!(d.tokens, hyp.tokens);
}

#[test]
fn model_beam_one_equals_greedy() {
    for seed in 0..5 {
        let (model, _) = toy_model(seed);
        let x = features(seed + 10, 7);
        let scorer = ModelScorer::new(&model, Direction::L2R, &x).unwrap();
        let g = greedy(&scorer, 14).unwrap();
        let b = beam_search(&scorer, 1, 14).unwrap();
        assert_eq!(b.best.tokens, g.tokens);
        assert_eq!(b.best.log_prob.to_bits(), g.log_prob.to_bits());
    }
}

#[test]
fn mirrored_decoders_agree_on_palindromes() {
    let (mut model, vocabs) = toy_model(3);
    let forward: Vec<_> = model
        .store
        .iter()
        .filter(|p| p.name.starts_with("l2r."))
        .map(|p| (p.name.replacen("l2r.", "r2l.", 1), p.value.clone()))
        .collect();
    for (name, value) in forward {
        model.store.by_name_mut(&name).unwrap().value = value;
    }
    let x = features(4, 10);
    let text = "abcba";
    let a = posterior_agreement(
        &model,
        "p",
        &x,
        &vocabs.encode(text, Direction::L2R),
        &vocabs.encode(text, Direction::R2L),
    )
    .unwrap();
    assert_eq!(a.gap, 0.0);
}

#[test]
fn untrained_model_is_near_uniform() {
    let (model, vocabs) = toy_model(5);
    let x = features(6, 10);
    let text = "cab";
    let a = posterior_agreement(
        &model,
        "u",
        &x,
        &vocabs.encode(text, Direction::L2R),
        &vocabs.encode(text, Direction::R2L),
    )
    .unwrap();
    let uniform = 4.0 * (1.0 / vocabs.l2r.len() as f64).ln();
    for lp in [a.log_p_forward, a.log_p_backward] {
        assert!(((lp - uniform) / uniform).abs() < 0.1, "{lp} vs {uniform}");
    }
    assert!(a.gap.is_finite());
    assert!((mean_gap(&[a.clone(), a.clone()]) - a.gap).abs() < 1e-15);
}

#[test]
fn decode_and_score_file_formats() {
    let (model, vocabs) = toy_model(7);
    let x = features(8, 6);
    let d = decode_utterance(
        &model,
        &vocabs,
        Direction::L2R,
        "utt7",
        &x,
        &DecodeSettings {
            beam: 3,
            max_len_ratio: 1.0,
        },
    )
    .unwrap();
    let text = format_decodes(std::slice::from_ref(&d));
    assert_eq!(text, format!("utt7\t{}\n", d.text));
    let parsed = parse_decodes(&text).unwrap();
    assert_eq!(parsed, vec![("utt7".to_string(), d.text.clone())]);
    let scores = format_scores(std::slice::from_ref(&d), &vocabs, Direction::L2R);
    let fields: Vec<&str> = scores.trim_end().split('\t').collect();
    assert_eq!(fields.len(), 3);
    assert_eq!(fields[1].parse::<f64>().unwrap(), d.log_prob);
    assert!(parse_decodes("no tab here").is_err());
}
