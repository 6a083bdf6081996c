//! Step-wise inference: scoring, greedy, beam and ancestral sampling.

use std::cmp::Ordering;
use std::sync::Arc;

use rand::Rng;

use crate::autodiff::{log_softmax, Graph};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::vocab::{token_from_output, TokenSequence, BOS, EOS};

use super::network::{bind, one_hot_targets, EncodedNodes, Network};
use super::ModelParams;

/// Encoder outputs cached for the whole decode of one sentence.
#[derive(Clone, Debug)]
pub struct EncodedSource {
    pub annotations: Tensor,
    pub keys: Tensor,
    pub init_state: Tensor,
}

#[derive(Clone, Debug)]
pub struct DecoderState {
    pub hidden: Tensor,
    pub encoded: Arc<EncodedSource>,
    pub prev_token: u32,
}

impl DecoderState {
    pub fn advance(&self, hidden: Tensor, token: u32) -> DecoderState {
        DecoderState {
            hidden,
            encoded: Arc::clone(&self.encoded),
            prev_token: token,
        }
    }
}

/// A (possibly finished) beam entry.
#[derive(Clone, Debug)]
pub struct Hypothesis {
    pub tokens: TokenSequence,
    pub log_prob: f64,
    pub step_log_probs: Vec<f64>,
    /// Ended with EOS (as opposed to hitting the length limit).
    pub finished: bool,
    pub state: DecoderState,
}

/// Default decoding length limit for a source of `source_len` tokens.
pub fn default_max_len(source_len: usize) -> usize {
    2 * source_len + 5
}

impl ModelParams {
    pub fn encode(&self, source: &[u32]) -> Result<EncodedSource> {
        let mut g = Graph::new();
        let bound = bind(&mut g, self, |_| false);
        let enc = Network::new(&mut g, &bound, *self.dims()).encode(source)?;
        Ok(EncodedSource {
            annotations: g.value(enc.annotations).clone(),
            keys: g.value(enc.keys).clone(),
            init_state: g.value(enc.init_state).clone(),
        })
    }

    pub fn initial_state(&self, source: &[u32]) -> Result<DecoderState> {
        let encoded = self.encode(source)?;
        Ok(DecoderState {
            hidden: encoded.init_state.clone(),
            encoded: Arc::new(encoded),
            prev_token: BOS,
        })
    }

    /// Log-distribution over the output space (index `i` is target id
    /// `i + EOS`) and the decoder hidden state after consuming
    /// `state.prev_token`.
    pub fn decoder_step(&self, state: &DecoderState) -> Result<(Vec<f64>, Tensor)> {
        let mut g = Graph::new();
        let bound = bind(&mut g, self, |_| false);
        let enc = EncodedNodes {
            annotations: g.leaf_ref(&state.encoded.annotations, false),
            keys: g.leaf_ref(&state.encoded.keys, false),
            init_state: g.leaf_ref(&state.encoded.init_state, false),
            len: state.encoded.annotations.shape()[0],
        };
        let hidden = g.leaf_ref(&state.hidden, false);
        let (logits, next) = Network::new(&mut g, &bound, *self.dims()).decoder_step(&enc, state.prev_token, hidden)?;
        let log_probs = log_softmax(g.value(logits))?.into_data();
        Ok((log_probs, g.value(next).clone()))
    }

    /// Teacher-forced log-distributions `[(|y|+1) x O]` along `target`+EOS.
    pub fn forced_log_probs(&self, source: &[u32], target: &[u32]) -> Result<Tensor> {
        let mut g = Graph::new();
        let bound = bind(&mut g, self, |_| false);
        let logits = Network::new(&mut g, &bound, *self.dims()).forced_logits(source, target)?;
        log_softmax(g.value(logits))
    }

    /// `log P(target + EOS | source)`.
    pub fn sequence_log_prob(&self, source: &[u32], target: &[u32]) -> Result<f64> {
        let mut g = Graph::new();
        let bound = bind(&mut g, self, |_| false);
        let weights = one_hot_targets(target, self.dims().output_size(), 1.0)?;
        let nll = Network::new(&mut g, &bound, *self.dims()).weighted_nll(source, target, weights)?;
        Ok(-g.value(nll).item()?)
    }
}

fn argmax(values: &[f64]) -> usize {
    // first maximum wins, i.e. the lower token id on ties
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub fn greedy_decode(params: &ModelParams, source: &[u32], max_len: usize) -> Result<TokenSequence> {
    if max_len == 0 {
        return Err(Error::Contract("max_len must be at least 1".into()));
    }
    let mut state = params.initial_state(source)?;
    let mut out = Vec::new();
    for _ in 0..max_len {
        let (log_probs, hidden) = params.decoder_step(&state)?;
        let tok = token_from_output(argmax(&log_probs));
        if tok == EOS {
            break;
        }
        out.push(tok);
        state = state.advance(hidden, tok);
    }
    Ok(out)
}

/// Beam search without length normalization. Each step keeps the best
/// `k - finished` expansions; EOS expansions retire. Hypotheses alive at
/// `max_len` are returned unfinished. Results are sorted by log-probability,
/// highest first, at most `k` of them.
pub fn beam_search(params: &ModelParams, source: &[u32], k: usize, max_len: usize) -> Result<Vec<Hypothesis>> {
    if k == 0 {
        return Err(Error::Contract("beam width must be at least 1".into()));
    }
    if max_len == 0 {
        return Err(Error::Contract("max_len must be at least 1".into()));
    }
    let start = params.initial_state(source)?;
    let mut live = vec![Hypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
        step_log_probs: Vec::new(),
        finished: false,
        state: start,
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();

    for _ in 0..max_len {
        if live.is_empty() || finished.len() >= k {
            break;
        }
        let mut expansions = Vec::with_capacity(live.len());
        let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
        for (h, hyp) in live.iter().enumerate() {
            let (log_probs, hidden) = params.decoder_step(&hyp.state)?;
            for (o, &lp) in log_probs.iter().enumerate() {
                candidates.push((hyp.log_prob + lp, h, o));
            }
            expansions.push((log_probs, hidden));
        }
        candidates.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap_or(Ordering::Equal)
                .then(a.2.cmp(&b.2))
                .then(a.1.cmp(&b.1))
        });
        let width = k - finished.len();
        let mut next_live = Vec::with_capacity(width);
        for &(score, h, o) in candidates.iter().take(width) {
            let parent = &live[h];
            let tok = token_from_output(o);
            let (log_probs, hidden) = &expansions[h];
            let mut step_log_probs = parent.step_log_probs.clone();
            step_log_probs.push(log_probs[o]);
            if tok == EOS {
                finished.push(Hypothesis {
                    tokens: parent.tokens.clone(),
                    log_prob: score,
                    step_log_probs,
                    finished: true,
                    state: parent.state.clone(),
                });
            } else {
                let mut tokens = parent.tokens.clone();
                tokens.push(tok);
                next_live.push(Hypothesis {
                    tokens,
                    log_prob: score,
                    step_log_probs,
                    finished: false,
                    state: parent.state.advance(hidden.clone(), tok),
                });
            }
        }
        live = next_live;
    }
    finished.extend(live);
    finished.sort_by(|a, b| {
        b.log_prob
            .partial_cmp(&a.log_prob)
            .unwrap_or(Ordering::Equal)
            .then_with(|| a.tokens.cmp(&b.tokens))
    });
    finished.truncate(k);
    Ok(finished)
}

/// Ancestral sample at temperature 1. Returns the tokens (without EOS) and
/// the log-probability of the sampled path, EOS included when drawn.
pub fn sample_decode<R: Rng + ?Sized>(
    params: &ModelParams,
    source: &[u32],
    max_len: usize,
    rng: &mut R,
) -> Result<(TokenSequence, f64)> {
    if max_len == 0 {
        return Err(Error::Contract("max_len must be at least 1".into()));
    }
    let mut state = params.initial_state(source)?;
    let mut out = Vec::new();
    let mut total = 0.0;
    for _ in 0..max_len {
        let (log_probs, hidden) = params.decoder_step(&state)?;
        let o = draw(&log_probs, rng.gen::<f64>());
        total += log_probs[o];
        let tok = token_from_output(o);
        if tok == EOS {
            break;
        }
        out.push(tok);
        state = state.advance(hidden, tok);
    }
    Ok((out, total))
}

/// Inverse-CDF draw from a log-distribution given `u` in `[0, 1)`.
fn draw(log_probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, &lp) in log_probs.iter().enumerate() {
        acc += lp.exp();
        if u < acc {
            return i;
        }
    }
    // rounding left the cumulative sum just below 1
    log_probs
        .iter()
        .rposition(|lp| lp.exp() > 0.0)
        .unwrap_or(log_probs.len() - 1)
}
