//! Beam search and greedy decoding, word error rate, and the agreement
//! diagnostic between the two decoders.

mod wer;

#[cfg(test)]
mod tests;

pub use wer::{wer, wer_oracle, CorpusWer, WerError, WerReport};

use std::cmp::Ordering;
use std::fmt::Write as _;

use crate::autodiff::{Graph, Tensor};
use crate::losses::with_eos;
use crate::model::{
    AttentionContext, Binding, DecoderStack, DualModel, Group, ModelError, StateValues,
};
use crate::tokenizer::{Direction, TokenSeq, VocabPair};

/// One decoder step as seen by the search: given a state and the previous
/// token, the log-distribution over the next token and the successor state.
pub trait StepScorer {
    type State: Clone;

    fn initial(&self) -> Self::State;
    fn score(
        &self,
        state: &Self::State,
        prev: usize,
    ) -> Result<(Vec<f64>, Self::State), ModelError>;
    fn sos(&self) -> usize;
    fn eos(&self) -> usize;
}

#[derive(Clone, Debug)]
pub struct Hypothesis<S> {
    /// Emitted tokens; a finished hypothesis ends with eos.
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    pub state: S,
    pub finished: bool,
}

impl<S> Hypothesis<S> {
    /// Log probability per emitted token, eos included.
    pub fn normalized(&self) -> f64 {
        self.log_prob / self.tokens.len().max(1) as f64
    }

    /// Tokens without the trailing eos.
    pub fn content(&self, eos: usize) -> &[usize] {
        match self.tokens.last() {
            Some(&t) if t == eos && self.finished => &self.tokens[..self.tokens.len() - 1],
            _ => &self.tokens,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SearchResult<S> {
    pub best: Hypothesis<S>,
    /// Every hypothesis that reached eos, in the order it finished.
    pub finished: Vec<Hypothesis<S>>,
    /// Set when nothing finished within the length bound and `best` is the
    /// top unfinished hypothesis.
    pub unfinished: bool,
}

impl<S> SearchResult<S> {
    /// Highest raw log probability among finished hypotheses.
    pub fn best_log_prob(&self) -> Option<f64> {
        self.finished
            .iter()
            .map(|h| h.log_prob)
            .max_by(f64::total_cmp)
    }
}

fn better_normalized<S>(a: &Hypothesis<S>, b: &Hypothesis<S>) -> Ordering {
    a.normalized()
        .total_cmp(&b.normalized())
        .then_with(|| b.tokens.cmp(&a.tokens))
}

/// Length-bounded beam search.
///
/// Each round expands every live hypothesis by every token except sos and
/// keeps the `beam` best by log probability, ties going to the lower token id
/// and then the earlier parent. Candidates ending in eos leave the beam for
/// the finished pool; the search stops when the beam empties, `beam` hypotheses
/// have finished, or `max_len` tokens have been emitted.
pub fn beam_search<Sc: StepScorer>(
    scorer: &Sc,
    beam: usize,
    max_len: usize,
) -> Result<SearchResult<Sc::State>, ModelError> {
    let beam = beam.max(1);
    let (sos, eos) = (scorer.sos(), scorer.eos());
    let mut live = vec![Hypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
        state: scorer.initial(),
        finished: false,
    }];
    let mut finished: Vec<Hypothesis<Sc::State>> = Vec::new();
    for _ in 0..max_len {
        let mut expanded = Vec::with_capacity(live.len());
        let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
        for (parent, hyp) in live.iter().enumerate() {
            let prev = hyp.tokens.last().copied().unwrap_or(sos);
            let (log_probs, next) = scorer.score(&hyp.state, prev)?;
            for (tok, &lp) in log_probs.iter().enumerate() {
                if tok != sos {
                    candidates.push((hyp.log_prob + lp, tok, parent));
                }
            }
            expanded.push(next);
        }
        candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut next_live = Vec::with_capacity(beam);
        for &(score, tok, parent) in candidates.iter().take(beam) {
            let mut tokens = live[parent].tokens.clone();
            tokens.push(tok);
            let hyp = Hypothesis {
                tokens,
                log_prob: score,
                state: expanded[parent].clone(),
                finished: tok == eos,
            };
            if hyp.finished {
                finished.push(hyp);
            } else {
                next_live.push(hyp);
            }
        }
        live = next_live;
        if live.is_empty() || finished.len() >= beam {
            break;
        }
    }
    let (best, unfinished) = match finished.iter().max_by(|a, b| better_normalized(a, b)) {
        Some(h) => (h.clone(), false),
        None => {
            let h = live
                .iter()
                .max_by(|a, b| better_normalized(a, b))
                .cloned()
                .unwrap_or_else(|| Hypothesis {
                    tokens: Vec::new(),
                    log_prob: 0.0,
                    state: scorer.initial(),
                    finished: false,
                });
            (h, true)
        }
    };
    Ok(SearchResult {
        best,
        finished,
        unfinished,
    })
}

/// Argmax decoding, lowest token id on ties, never emitting sos.
pub fn greedy<Sc: StepScorer>(
    scorer: &Sc,
    max_len: usize,
) -> Result<Hypothesis<Sc::State>, ModelError> {
    let (sos, eos) = (scorer.sos(), scorer.eos());
    let mut hyp = Hypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
        state: scorer.initial(),
        finished: false,
    };
    while hyp.tokens.len() < max_len {
        let prev = hyp.tokens.last().copied().unwrap_or(sos);
        let (log_probs, next) = scorer.score(&hyp.state, prev)?;
        let mut best: Option<(usize, f64)> = None;
        for (tok, &lp) in log_probs.iter().enumerate() {
            if tok == sos {
                continue;
            }
            if best.is_none_or(|(_, b)| lp > b) {
                best = Some((tok, lp));
            }
        }
        let Some((tok, lp)) = best else { break };
        hyp.tokens.push(tok);
        hyp.log_prob += lp;
        hyp.state = next;
        if tok == eos {
            hyp.finished = true;
            break;
        }
    }
    Ok(hyp)
}

/// Scores decoder steps of one stack of a [`DualModel`] over fixed encoder
/// states. A private graph holds the encoder output and parameters; each step
/// appends to it and then truncates back.
pub struct ModelScorer<'m> {
    stack: &'m DecoderStack,
    graph: Graph,
    binding: Binding,
    ctx: AttentionContext,
    base: usize,
    initial: StateValues,
    sos: usize,
    eos: usize,
}

impl<'m> ModelScorer<'m> {
    pub fn new(
        model: &'m DualModel,
        direction: Direction,
        features: &Tensor,
    ) -> Result<Self, ModelError> {
        let stack = model.stack(direction);
        let graph = Graph::new();
        let binding = model.bind(&graph, &[Group::Encoder, stack.group]);
        let h_enc = model.encode(&graph, &binding, features)?;
        let ctx = crate::model::prepare(&graph, &binding, &stack.attention, h_enc, None)?;
        let init = stack.initial_state(&graph, &ctx, None);
        let initial = StateValues::read(&graph, &init);
        let base = graph.len();
        let sp = model.specials(direction);
        Ok(ModelScorer {
            stack,
            graph,
            binding,
            ctx,
            base,
            initial,
            sos: sp.sos,
            eos: sp.eos,
        })
    }

    pub fn frames(&self) -> usize {
        self.ctx.frames
    }
}

impl StepScorer for ModelScorer<'_> {
    type State = StateValues;

    fn initial(&self) -> StateValues {
        self.initial.clone()
    }

    fn score(
        &self,
        state: &StateValues,
        prev: usize,
    ) -> Result<(Vec<f64>, StateValues), ModelError> {
        let g = &self.graph;
        let bound = state.bind(g);
        let result = self
            .stack
            .step(g, &self.binding, &self.ctx, prev, bound)
            .and_then(|(logits, next)| {
                let lp = g.log_softmax(logits, 1)?;
                let out = g.value(lp).data().to_vec();
                Ok((out, StateValues::read(g, &next)))
            });
        g.truncate(self.base);
        result
    }

    fn sos(&self) -> usize {
        self.sos
    }

    fn eos(&self) -> usize {
        self.eos
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecodeSettings {
    pub beam: usize,
    /// Maximum emitted tokens as a multiple of the encoder frame count.
    pub max_len_ratio: f64,
}

impl Default for DecodeSettings {
    fn default() -> Self {
        DecodeSettings {
            beam: 20,
            max_len_ratio: 2.0,
        }
    }
}

impl DecodeSettings {
    pub fn max_len(&self, frames: usize) -> usize {
        ((frames as f64 * self.max_len_ratio).ceil() as usize).max(1)
    }
}

/// Decoded transcript of one utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoded {
    pub id: String,
    pub text: String,
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    pub unfinished: bool,
}

/// Beam-search-decodes one utterance with the given stack; R2L output is
/// returned in reading order.
pub fn decode_utterance(
    model: &DualModel,
    vocabs: &VocabPair,
    direction: Direction,
    id: &str,
    features: &Tensor,
    settings: &DecodeSettings,
) -> Result<Decoded, ModelError> {
    let scorer = ModelScorer::new(model, direction, features)?;
    let max_len = settings.max_len(scorer.frames());
    let (hyp, unfinished) = if settings.beam <= 1 {
        let h = greedy(&scorer, max_len)?;
        let u = !h.finished;
        (h, u)
    } else {
        let r = beam_search(&scorer, settings.beam, max_len)?;
        (r.best, r.unfinished)
    };
    let ids = hyp.content(scorer.eos()).to_vec();
    let text = vocabs
        .decode(&TokenSeq {
            ids: ids.clone(),
            direction,
        })
        .unwrap_or_default();
    Ok(Decoded {
        id: id.to_string(),
        text,
        tokens: hyp.tokens,
        log_prob: hyp.log_prob,
        unfinished,
    })
}

/// `<utt-id>\t<hypothesis>` lines.
pub fn format_decodes(decodes: &[Decoded]) -> String {
    let mut s = String::new();
    for d in decodes {
        let _ = writeln!(s, "{}\t{}", d.id, d.text);
    }
    s
}

/// `<utt-id>\t<logprob>\t<tokens>` lines, tokens as unit strings.
pub fn format_scores(decodes: &[Decoded], vocabs: &VocabPair, direction: Direction) -> String {
    let vocab = vocabs.get(direction);
    let mut s = String::new();
    for d in decodes {
        let units: Vec<&str> = d
            .tokens
            .iter()
            .map(|&t| vocab.unit(t).unwrap_or("?"))
            .collect();
        let _ = writeln!(s, "{}\t{}\t{}", d.id, d.log_prob, units.join(" "));
    }
    s
}

/// Parses `<utt-id>\t<hypothesis>` lines.
pub fn parse_decodes(text: &str) -> Result<Vec<(String, String)>, String> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, l)| {
            l.split_once('\t')
                .map(|(a, b)| (a.to_string(), b.to_string()))
                .ok_or_else(|| format!("line {}: expected <utt-id>\\t<hypothesis>", i + 1))
        })
        .collect()
}

/// Teacher-forced sequence log-likelihoods of the gold transcript under both
/// decoders.
#[derive(Clone, Debug, PartialEq)]
pub struct Agreement {
    pub id: String,
    pub log_p_forward: f64,
    pub log_p_backward: f64,
    pub gap: f64,
}

pub fn sequence_log_likelihood(
    model: &DualModel,
    features: &Tensor,
    target: &TokenSeq,
) -> Result<f64, ModelError> {
    let g = Graph::new();
    let stack = model.stack(target.direction);
    let b = model.bind(&g, &[Group::Encoder, stack.group]);
    let h_enc = model.encode(&g, &b, features)?;
    let out = model.decode_direction(&g, &b, h_enc, target, target.direction, None)?;
    let gold = with_eos(&target.ids, model.specials(target.direction).eos);
    let lp = g.value(out.log_probs);
    Ok(gold.iter().enumerate().map(|(k, &y)| lp.at2(k, y)).sum())
}

pub fn posterior_agreement(
    model: &DualModel,
    id: &str,
    features: &Tensor,
    l2r: &TokenSeq,
    r2l: &TokenSeq,
) -> Result<Agreement, ModelError> {
    let f = sequence_log_likelihood(model, features, l2r)?;
    let b = sequence_log_likelihood(model, features, r2l)?;
    Ok(Agreement {
        id: id.to_string(),
        log_p_forward: f,
        log_p_backward: b,
        gap: (f - b).abs(),
    })
}

pub fn mean_gap(rows: &[Agreement]) -> f64 {
    if rows.is_empty() {
        return 0.0;
    }
    rows.iter().map(|a| a.gap).sum::<f64>() / rows.len() as f64
}
