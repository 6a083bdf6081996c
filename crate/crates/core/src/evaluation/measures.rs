use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{beam_search, default_max_len, greedy_decode, sample_decode, ModelParams};
use crate::objectives::pair_seeds;
use crate::vocab::{token_from_output, TokenSequence, EOS};

/// How the teacher's target is chosen when estimating a KL.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum KlApprox {
    Greedy,
    Beam { k: usize },
    Sampling { seed: u64 },
}

impl KlApprox {
    pub fn name(&self) -> &'static str {
        match self {
            KlApprox::Greedy => "greedy",
            KlApprox::Beam { .. } => "beam",
            KlApprox::Sampling { .. } => "sampling",
        }
    }
}

/// Mean per-sentence estimate of a sentence- or word-level KL.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KlEstimate {
    /// `sent` or `word`.
    pub level: String,
    pub approx: KlApprox,
    pub mean: f64,
    pub sentences: usize,
}

impl KlEstimate {
    /// `j_sent_greedy`, `j_word_sampling`, ...
    pub fn label(&self) -> String {
        format!("j_{}_{}", self.level, self.approx.name())
    }
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

fn non_empty<T>(items: &[T], what: &str) -> Result<()> {
    if items.is_empty() {
        return Err(Error::Contract(format!("{what} is empty")));
    }
    Ok(())
}

/// Mean negative log-likelihood of `(x, y)` pairs, without gradients.
pub fn validation_loss(params: &ModelParams, pairs: &[(TokenSequence, TokenSequence)]) -> Result<f64> {
    non_empty(pairs, "dev set")?;
    let scores = pairs
        .par_iter()
        .map(|(x, y)| params.sequence_log_prob(x, y))
        .collect::<Result<Vec<_>>>()?;
    Ok(-mean(&scores))
}

/// Teacher targets for every pivot sentence under `approx`. Sampling draws
/// one target per sentence from per-sentence seeds.
pub fn teacher_outputs(teacher: &ModelParams, pivots: &[&[u32]], approx: KlApprox) -> Result<Vec<TokenSequence>> {
    let seeds = match approx {
        KlApprox::Sampling { seed } => pair_seeds(&mut ChaCha8Rng::seed_from_u64(seed), pivots.len()),
        _ => vec![0; pivots.len()],
    };
    pivots
        .par_iter()
        .zip(seeds)
        .map(|(z, seed)| {
            let max_len = default_max_len(z.len());
            match approx {
                KlApprox::Greedy => greedy_decode(teacher, z, max_len),
                KlApprox::Beam { k } => Ok(beam_search(teacher, z, k, max_len)?.swap_remove(0).tokens),
                KlApprox::Sampling { .. } => {
                    Ok(sample_decode(teacher, z, max_len, &mut ChaCha8Rng::seed_from_u64(seed))?.0)
                }
            }
        })
        .collect()
}

/// Mode surrogate of the sentence-level KL: mean over `(x, z)` of
/// `log P_T(ŷ|z) - log P_S(ŷ|x)` at the teacher's output ŷ.
pub fn measure_j_sent(
    student: &ModelParams,
    teacher: &ModelParams,
    pairs: &[(TokenSequence, TokenSequence)],
    approx: KlApprox,
) -> Result<KlEstimate> {
    non_empty(pairs, "dev set")?;
    let pivots: Vec<&[u32]> = pairs.iter().map(|(_, z)| z.as_slice()).collect();
    let targets = teacher_outputs(teacher, &pivots, approx)?;
    let terms = pairs
        .par_iter()
        .zip(&targets)
        .map(|((x, z), y)| Ok(teacher.sequence_log_prob(z, y)? - student.sequence_log_prob(x, y)?))
        .collect::<Result<Vec<_>>>()?;
    Ok(KlEstimate {
        level: "sent".into(),
        approx,
        mean: mean(&terms),
        sentences: pairs.len(),
    })
}

/// `sum_j KL(p_T(·|z, ŷ<j) || p_S(·|x, ŷ<j))` along `y` + EOS.
pub fn word_kl(student: &ModelParams, teacher: &ModelParams, x: &[u32], z: &[u32], y: &[u32]) -> Result<f64> {
    let lt = teacher.forced_log_probs(z, y)?;
    let ls = student.forced_log_probs(x, y)?;
    Ok(lt
        .data()
        .iter()
        .zip(ls.data())
        .map(|(&t, &s)| if t == f64::NEG_INFINITY { 0.0 } else { t.exp() * (t - s) })
        .sum())
}

/// Full-vocabulary word-level KL summed along the teacher's output and
/// averaged over sentences.
pub fn measure_j_word(
    student: &ModelParams,
    teacher: &ModelParams,
    pairs: &[(TokenSequence, TokenSequence)],
    approx: KlApprox,
) -> Result<KlEstimate> {
    non_empty(pairs, "dev set")?;
    let pivots: Vec<&[u32]> = pairs.iter().map(|(_, z)| z.as_slice()).collect();
    let targets = teacher_outputs(teacher, &pivots, approx)?;
    let terms = pairs
        .par_iter()
        .zip(&targets)
        .map(|((x, z), y)| word_kl(student, teacher, x, z, y))
        .collect::<Result<Vec<_>>>()?;
    Ok(KlEstimate {
        level: "word".into(),
        approx,
        mean: mean(&terms),
        sentences: pairs.len(),
    })
}

/// One complete decoder outcome within a length limit.
#[derive(Clone, Debug, PartialEq)]
pub struct Outcome {
    pub tokens: TokenSequence,
    /// Ended with EOS; otherwise truncated at the limit.
    pub finished: bool,
    pub log_prob: f64,
}

/// Every outcome of decoding `source` with at most `max_len` steps. Finished
/// outcomes include the EOS probability; truncated ones score their prefix.
/// Probabilities sum to one.
pub fn enumerate_outcomes(params: &ModelParams, source: &[u32], max_len: usize) -> Result<Vec<Outcome>> {
    if max_len == 0 {
        return Err(Error::Contract("max_len must be at least 1".into()));
    }
    let mut out = Vec::new();
    let mut frontier = vec![(params.initial_state(source)?, Vec::new(), 0.0)];
    for step in 0..max_len {
        let mut next = Vec::new();
        for (state, tokens, lp) in frontier {
            let (log_probs, hidden) = params.decoder_step(&state)?;
            for (o, &l) in log_probs.iter().enumerate() {
                let tok = token_from_output(o);
                if tok == EOS {
                    out.push(Outcome {
                        tokens: tokens.clone(),
                        finished: true,
                        log_prob: lp + l,
                    });
                } else {
                    let mut t: TokenSequence = tokens.clone();
                    t.push(tok);
                    if step + 1 == max_len {
                        out.push(Outcome {
                            tokens: t,
                            finished: false,
                            log_prob: lp + l,
                        });
                    } else {
                        next.push((state.advance(hidden.clone(), tok), t, lp + l));
                    }
                }
            }
        }
        frontier = next;
    }
    Ok(out)
}

/// Log-probability of an outcome: with EOS when finished, prefix only when
/// truncated at `max_len`.
pub fn outcome_log_prob(params: &ModelParams, source: &[u32], tokens: &[u32], max_len: usize) -> Result<f64> {
    let lp = params.forced_log_probs(source, tokens)?;
    let o = lp.last_dim();
    let rows = if tokens.len() >= max_len {
        tokens.len()
    } else {
        tokens.len() + 1
    };
    let mut total = 0.0;
    for (j, &tok) in tokens.iter().chain(std::iter::once(&EOS)).take(rows).enumerate() {
        total += lp.data()[j * o + crate::vocab::output_index(tok)];
    }
    Ok(total)
}

/// Sentence-level KL `sum_y P_T(y|z) log(P_T(y|z) / P_S(y|x))` by full
/// enumeration of outcomes up to `max_len`.
pub fn exact_j_sent(student: &ModelParams, teacher: &ModelParams, x: &[u32], z: &[u32], max_len: usize) -> Result<f64> {
    let outcomes = enumerate_outcomes(teacher, z, max_len)?;
    let mut total = 0.0;
    for oc in outcomes {
        let ls = outcome_log_prob(student, x, &oc.tokens, max_len)?;
        total += oc.log_prob.exp() * (oc.log_prob - ls);
    }
    Ok(total)
}

/// Expected student negative log-likelihood under the teacher,
/// `E_{y ~ P_T(·|z)}[-log P_S(y|x)]`, by enumeration.
pub fn exact_expected_nll(
    student: &ModelParams,
    teacher: &ModelParams,
    x: &[u32],
    z: &[u32],
    max_len: usize,
) -> Result<f64> {
    let mut total = 0.0;
    for oc in enumerate_outcomes(teacher, z, max_len)? {
        total -= oc.log_prob.exp() * outcome_log_prob(student, x, &oc.tokens, max_len)?;
    }
    Ok(total)
}

/// Average argmax probability per step along each model's own greedy path.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Peakedness {
    pub mean_max_prob: f64,
    pub steps: usize,
}

pub fn peakedness(params: &ModelParams, sources: &[TokenSequence]) -> Result<Peakedness> {
    non_empty(sources, "dataset")?;
    let per_sentence = sources
        .par_iter()
        .map(|x| {
            let mut state = params.initial_state(x)?;
            let mut maxes = Vec::new();
            for _ in 0..default_max_len(x.len()) {
                let (log_probs, hidden) = params.decoder_step(&state)?;
                let (best, lp) = log_probs
                    .iter()
                    .copied()
                    .enumerate()
                    .fold(
                        (0, f64::NEG_INFINITY),
                        |acc, (i, v)| if v > acc.1 { (i, v) } else { acc },
                    );
                maxes.push(lp.exp());
                let tok = token_from_output(best);
                if tok == EOS {
                    break;
                }
                state = state.advance(hidden, tok);
            }
            Ok(maxes)
        })
        .collect::<Result<Vec<_>>>()?;
    let steps: usize = per_sentence.iter().map(Vec::len).sum();
    let total: f64 = per_sentence.iter().flatten().sum();
    Ok(Peakedness {
        mean_max_prob: total / steps as f64,
        steps,
    })
}
