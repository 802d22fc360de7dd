//! Greedy and beam-search decoding.
//!
//! `max_len` bounds the number of words before `<eos>`: positions
//! `1..=max_len` may emit any token, and position `max_len + 1` can only emit
//! `<eos>`. Every returned hypothesis is therefore finished and its score
//! includes `log P(<eos> | s_M)`.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::decoder::DecoderState;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::{FeatureSequence, Model, Session, StepOutput};
use crate::scalar::Scalar;
use crate::tensor::{argmax, log_softmax};
use crate::vocab::EOS_ID;

/// Attention weights recorded for every emitted token (the final `<eos>`
/// included): `alpha[i][k][t]` and `beta[i][k]`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AttentionTrace {
    pub alpha: Vec<Vec<Vec<f64>>>,
    pub beta: Vec<Vec<f64>>,
}

impl AttentionTrace {
    fn record<S>(&mut self, scored: &Scored<S>) {
        self.alpha.push(scored.alpha.clone());
        if let Some(b) = &scored.beta {
            self.beta.push(b.clone());
        }
    }
}

/// Next-token log-probabilities for one decoder state, the attention weights
/// that produced them, and whatever the scorer needs to advance.
pub struct Scored<S> {
    pub logprobs: Vec<f64>,
    pub alpha: Vec<Vec<f64>>,
    pub beta: Option<Vec<f64>>,
    pub step: S,
}

/// A left-to-right next-token distribution. Decoding only ever talks to a
/// scorer, so search can be tested against hand-written tables.
pub trait Scorer {
    type State: Clone;
    type Step;

    /// The state from which the first word is predicted.
    fn start(&mut self) -> Result<Self::State>;
    fn score(&mut self, state: &Self::State) -> Result<Scored<Self::Step>>;
    fn advance(&mut self, state: &Self::State, step: &Self::Step, token: usize) -> Result<Self::State>;
}

/// [`Scorer`] backed by a model and one input, all steps sharing one graph.
pub struct ModelScorer<'m, T: Scalar> {
    model: &'m Model<T>,
    graph: Graph<'m, T>,
    session: Session,
}

impl<'m, T: Scalar> ModelScorer<'m, T> {
    pub fn new(model: &'m Model<T>, features: &[FeatureSequence<T>]) -> Result<Self> {
        let mut graph = Graph::new(model.params());
        let session = model.encode(&mut graph, features)?;
        Ok(Self {
            model,
            graph,
            session,
        })
    }
}

fn to_f64<T: Scalar>(t: &[T]) -> Vec<f64> {
    t.iter().map(|v| v.as_f64()).collect()
}

impl<T: Scalar> Scorer for ModelScorer<'_, T> {
    type State = DecoderState;
    type Step = StepOutput;

    fn start(&mut self) -> Result<DecoderState> {
        self.model.initial_state(&mut self.graph, &self.session)
    }

    fn score(&mut self, state: &DecoderState) -> Result<Scored<StepOutput>> {
        let g = &mut self.graph;
        let step = self.model.predict(g, &self.session, state)?;
        Ok(Scored {
            logprobs: to_f64(&log_softmax(g.value(step.logits).data())?),
            alpha: step.alphas.iter().map(|&a| to_f64(g.value(a).data())).collect(),
            beta: step.beta.map(|b| to_f64(g.value(b).data())),
            step,
        })
    }

    fn advance(&mut self, state: &DecoderState, step: &StepOutput, token: usize) -> Result<DecoderState> {
        self.model.advance(&mut self.graph, &self.session, state, token, step)
    }
}

/// A (partial) output sentence. `tokens` never contains `<eos>`; `finished`
/// records whether `<eos>` was emitted and scored. Finished hypotheses carry
/// no state.
#[derive(Clone, Debug)]
pub struct Hypothesis<S = DecoderState> {
    pub tokens: Vec<usize>,
    pub logprob: f64,
    pub finished: bool,
    pub trace: AttentionTrace,
    pub state: Option<S>,
}

/// Output of [`greedy_decode`].
#[derive(Clone, Debug, PartialEq)]
pub struct Decoded {
    pub tokens: Vec<usize>,
    pub logprob: f64,
    pub trace: AttentionTrace,
}

fn check_len(max_len: usize) -> Result<()> {
    if max_len == 0 {
        return Err(Error::Config("max_len must be at least 1".into()));
    }
    Ok(())
}

/// Emits the most probable token at every position (ties to the lowest id)
/// until `<eos>`.
pub fn greedy_decode<T: Scalar>(
    model: &Model<T>,
    features: &[FeatureSequence<T>],
    max_len: usize,
) -> Result<Decoded> {
    greedy_with(&mut ModelScorer::new(model, features)?, max_len)
}

pub fn greedy_with<S: Scorer>(scorer: &mut S, max_len: usize) -> Result<Decoded> {
    check_len(max_len)?;
    let mut state = scorer.start()?;
    let mut out = Decoded {
        tokens: Vec::new(),
        logprob: 0.0,
        trace: AttentionTrace::default(),
    };
    loop {
        let scored = scorer.score(&state)?;
        out.trace.record(&scored);
        let lp = &scored.logprobs;
        let token = if out.tokens.len() == max_len { EOS_ID } else { argmax(lp) };
        out.logprob += lp[token];
        if token == EOS_ID {
            return Ok(out);
        }
        out.tokens.push(token);
        state = scorer.advance(&state, &scored.step, token)?;
    }
}

/// Higher score first; equal scores fall back to the lexicographically smaller
/// token sequence.
fn rank(a_score: f64, a_tokens: &[usize], b_score: f64, b_tokens: &[usize]) -> Ordering {
    b_score
        .partial_cmp(&a_score)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a_tokens.cmp(b_tokens))
}

/// Keeps the `width` best partial hypotheses per position and returns every
/// hypothesis that reached `<eos>`, best first. No length normalization.
pub fn beam_search<T: Scalar>(
    model: &Model<T>,
    features: &[FeatureSequence<T>],
    width: usize,
    max_len: usize,
) -> Result<Vec<Hypothesis>> {
    beam_with(&mut ModelScorer::new(model, features)?, width, max_len)
}

pub fn beam_with<S: Scorer>(scorer: &mut S, width: usize, max_len: usize) -> Result<Vec<Hypothesis<S::State>>> {
    if width < 1 {
        return Err(Error::Config("beam width must be at least 1".into()));
    }
    check_len(max_len)?;
    let mut live = vec![Hypothesis {
        tokens: Vec::new(),
        logprob: 0.0,
        finished: false,
        trace: AttentionTrace::default(),
        state: Some(scorer.start()?),
    }];
    let mut finished: Vec<Hypothesis<S::State>> = Vec::new();

    while !live.is_empty() {
        struct Cand {
            parent: usize,
            token: usize,
            score: f64,
            tokens: Vec<usize>,
        }
        let mut scored = Vec::with_capacity(live.len());
        let mut cands = Vec::new();
        for (pi, h) in live.iter().enumerate() {
            let sc = scorer.score(h.state.as_ref().expect("live hypotheses carry a state"))?;
            let allowed = if h.tokens.len() == max_len { EOS_ID..EOS_ID + 1 } else { 0..sc.logprobs.len() };
            for token in allowed {
                let mut tokens = h.tokens.clone();
                if token != EOS_ID {
                    tokens.push(token);
                }
                cands.push(Cand {
                    parent: pi,
                    token,
                    score: h.logprob + sc.logprobs[token],
                    tokens,
                });
            }
            scored.push(sc);
        }
        cands.sort_by(|a, b| rank(a.score, &a.tokens, b.score, &b.tokens));
        cands.truncate(width);

        let mut next = Vec::with_capacity(cands.len());
        for c in cands {
            let parent = &live[c.parent];
            let sc = &scored[c.parent];
            let mut trace = parent.trace.clone();
            trace.record(sc);
            if c.token == EOS_ID {
                finished.push(Hypothesis {
                    tokens: c.tokens,
                    logprob: c.score,
                    finished: true,
                    trace,
                    state: None,
                });
            } else {
                let state = parent.state.as_ref().expect("live hypotheses carry a state");
                let s = scorer.advance(state, &sc.step, c.token)?;
                next.push(Hypothesis {
                    tokens: c.tokens,
                    logprob: c.score,
                    finished: false,
                    trace,
                    state: Some(s),
                });
            }
        }
        live = next;

        // Scores only decrease as tokens are appended, so once `width`
        // finished hypotheses beat every live one the N-best list is final.
        if finished.len() >= width {
            finished.sort_by(|a, b| rank(a.logprob, &a.tokens, b.logprob, &b.tokens));
            let cutoff = finished[width - 1].logprob;
            if live.iter().all(|h| h.logprob < cutoff) {
                break;
            }
        }
    }
    finished.sort_by(|a, b| rank(a.logprob, &a.tokens, b.logprob, &b.tokens));
    Ok(finished)
}

/// `log P(Y, <eos> | X)` of a given token sequence under teacher forcing.
pub fn sequence_logprob<T: Scalar>(
    model: &Model<T>,
    features: &[FeatureSequence<T>],
    tokens: &[usize],
) -> Result<f64> {
    let mut scorer = ModelScorer::new(model, features)?;
    let mut state = scorer.start()?;
    let mut total = 0.0;
    for &tok in tokens.iter().chain(std::iter::once(&EOS_ID)) {
        let sc = scorer.score(&state)?;
        total += *sc
            .logprobs
            .get(tok)
            .ok_or_else(|| Error::Vocabulary(format!("token id {tok} out of range")))?;
        if tok != EOS_ID {
            state = scorer.advance(&state, &sc.step, tok)?;
        }
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::FusionMode;
    use crate::model::test_support::*;

    #[test]
    fn rigged_eos_gives_empty_sentence() {
        let cfg = tiny_config(FusionMode::Attention, 3);
        let mut m = Model::<f64>::new(cfg.clone(), 1).unwrap();
        let b_g = m.layout().b_g;
        m.params_mut().get_mut(b_g).data_mut()[EOS_ID] = 50.0;
        let feats = random_features(&cfg, 2, &[3, 4]);
        let out = greedy_decode(&m, &feats, 5).unwrap();
        assert!(out.tokens.is_empty());
        assert_eq!(out.trace.alpha.len(), 1);
        assert_eq!(out.trace.beta.len(), 1);
    }

    #[test]
    fn greedy_is_deterministic_and_matches_width_one() {
        for seed in 0..5 {
            let cfg = tiny_config(FusionMode::Attention, 4);
            let mut m = Model::<f64>::new(cfg.clone(), seed).unwrap();
            randomize(&mut m, seed + 100, 1.5);
            let feats = random_features(&cfg, seed + 7, &[3, 5]);
            let a = greedy_decode(&m, &feats, 6).unwrap();
            let b = greedy_decode(&m, &feats, 6).unwrap();
            assert_eq!(a, b);
            let beam = beam_search(&m, &feats, 1, 6).unwrap();
            assert_eq!(beam[0].tokens, a.tokens);
            assert_eq!(beam[0].logprob, a.logprob);
            assert_eq!(beam[0].trace, a.trace);
        }
    }

    #[test]
    fn stored_scores_match_recomputation() {
        let cfg = tiny_config(FusionMode::Simple, 4);
        let mut m = Model::<f64>::new(cfg.clone(), 3).unwrap();
        randomize(&mut m, 33, 1.2);
        let feats = random_features(&cfg, 8, &[4, 2]);
        let hyps = beam_search(&m, &feats, 4, 4).unwrap();
        assert!(!hyps.is_empty());
        for h in &hyps {
            assert!(h.finished);
            let again = sequence_logprob(&m, &feats, &h.tokens).unwrap();
            assert!((again - h.logprob).abs() < 1e-10);
        }
        for w in hyps.windows(2) {
            assert!(w[0].logprob >= w[1].logprob);
        }
    }

    #[test]
    fn width_zero_is_rejected() {
        let cfg = tiny_config(FusionMode::Simple, 3);
        let m = Model::<f64>::new(cfg.clone(), 3).unwrap();
        let feats = random_features(&cfg, 8, &[4, 2]);
        assert!(matches!(beam_search(&m, &feats, 0, 3), Err(Error::Config(_))));
    }

    #[test]
    fn ties_break_toward_smaller_token_sequences() {
        assert_eq!(rank(-1.0, &[1, 2], -1.0, &[1, 3]), Ordering::Less);
        assert_eq!(rank(-0.5, &[9], -1.0, &[1]), Ordering::Less);
    }

    /// Token ids: 2 = `<eos>`, 3 = "a", 4 = "b"; ids 0 and 1 are never likely.
    struct Table;

    impl Table {
        fn probs(prefix: &[usize]) -> [f64; 5] {
            let tiny = 1e-9;
            match prefix {
                [] => [tiny, tiny, tiny, 0.55, 0.45 - 3.0 * tiny],
                [3] => [tiny, tiny, 0.3, 0.35, 0.35 - 2.0 * tiny],
                [4] => [tiny, tiny, 0.9, 0.05, 0.05 - 2.0 * tiny],
                _ => [tiny, tiny, 0.5, 0.25, 0.25 - 2.0 * tiny],
            }
        }
    }

    impl Scorer for Table {
        type State = Vec<usize>;
        type Step = ();

        fn start(&mut self) -> Result<Vec<usize>> {
            Ok(Vec::new())
        }

        fn score(&mut self, state: &Vec<usize>) -> Result<Scored<()>> {
            Ok(Scored {
                logprobs: Self::probs(state).iter().map(|p| p.ln()).collect(),
                alpha: Vec::new(),
                beta: None,
                step: (),
            })
        }

        fn advance(&mut self, state: &Vec<usize>, _: &(), token: usize) -> Result<Vec<usize>> {
            let mut s = state.clone();
            s.push(token);
            Ok(s)
        }
    }

    #[test]
    fn wider_beam_recovers_sentence_greedy_misses() {
        let max_len = 2;
        // Enumerate every sentence of at most two words.
        let mut best = (f64::NEG_INFINITY, Vec::new());
        let words = [0usize, 1, 3, 4];
        let mut sentences: Vec<Vec<usize>> = vec![vec![]];
        for &a in &words {
            sentences.push(vec![a]);
            for &b in &words {
                sentences.push(vec![a, b]);
            }
        }
        for sent in sentences {
            let mut lp = 0.0;
            for i in 0..=sent.len() {
                let tok = sent.get(i).copied().unwrap_or(EOS_ID);
                lp += Table::probs(&sent[..i])[tok].ln();
            }
            if lp > best.0 {
                best = (lp, sent);
            }
        }
        assert_eq!(best.1, vec![4]);

        let greedy = greedy_with(&mut Table, max_len).unwrap();
        assert_eq!(greedy.tokens, vec![3, 3]);
        assert!(greedy.logprob < best.0);
        let beam = beam_with(&mut Table, 2, max_len).unwrap();
        assert_eq!(beam[0].tokens, best.1);
        assert!((beam[0].logprob - best.0).abs() < 1e-12);
    }
}
