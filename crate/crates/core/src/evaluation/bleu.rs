use std::collections::HashMap;
use std::fmt;
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAX_ORDER: usize = 4;

/// Corpus-level BLEU with its ingredients.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BleuReport {
    pub bleu: f64,
    pub precisions: Vec<f64>,
    pub matches: Vec<usize>,
    pub totals: Vec<usize>,
    pub brevity_penalty: f64,
    pub hyp_len: usize,
    pub ref_len: usize,
}

impl BleuReport {
    pub fn ratio(&self) -> f64 {
        if self.ref_len == 0 {
            0.0
        } else {
            self.hyp_len as f64 / self.ref_len as f64
        }
    }
}

impl fmt::Display for BleuReport {
    /// `BLEU = 23.45, 60.1/30.2/20.3/10.4 (BP=1.000, ratio=1.000, hyp_len=9, ref_len=9)`
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let precisions: Vec<String> = self.precisions.iter().map(|p| format!("{:.1}", 100.0 * p)).collect();
        write!(
            f,
            "BLEU = {:.2}, {} (BP={:.3}, ratio={:.3}, hyp_len={}, ref_len={})",
            100.0 * self.bleu,
            precisions.join("/"),
            self.brevity_penalty,
            self.ratio(),
            self.hyp_len,
            self.ref_len
        )
    }
}

fn ngram_counts<T: Hash + Eq>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

#[derive(Clone, Debug, Default)]
struct Stats {
    matches: Vec<usize>,
    totals: Vec<usize>,
    hyp_len: usize,
    ref_len: usize,
}

fn stats<T: Hash + Eq>(pairs: impl Iterator<Item = (impl AsRef<[T]>, impl AsRef<[T]>)>, max_order: usize) -> Stats {
    let mut s = Stats {
        matches: vec![0; max_order],
        totals: vec![0; max_order],
        ..Stats::default()
    };
    for (hyp, reference) in pairs {
        let (hyp, reference) = (hyp.as_ref(), reference.as_ref());
        s.hyp_len += hyp.len();
        s.ref_len += reference.len();
        for n in 1..=max_order {
            let ref_counts = ngram_counts(reference, n);
            for (gram, count) in ngram_counts(hyp, n) {
                s.matches[n - 1] += count.min(ref_counts.get(gram).copied().unwrap_or(0));
            }
            s.totals[n - 1] += hyp.len().saturating_sub(n - 1);
        }
    }
    s
}

fn brevity_penalty(hyp_len: usize, ref_len: usize) -> f64 {
    if hyp_len == 0 {
        0.0
    } else if hyp_len < ref_len {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    } else {
        1.0
    }
}

fn report(s: Stats, smooth: bool) -> BleuReport {
    let precisions: Vec<f64> = s
        .matches
        .iter()
        .zip(&s.totals)
        .map(|(&m, &t)| {
            if smooth && m == 0 {
                1.0 / (t as f64 + 1.0)
            } else if t == 0 {
                0.0
            } else {
                m as f64 / t as f64
            }
        })
        .collect();
    let bp = brevity_penalty(s.hyp_len, s.ref_len);
    let bleu = if precisions.iter().all(|&p| p > 0.0) {
        let mean_log = precisions.iter().map(|p| p.ln()).sum::<f64>() / precisions.len() as f64;
        bp * mean_log.exp()
    } else {
        0.0
    };
    BleuReport {
        bleu,
        precisions,
        matches: s.matches,
        totals: s.totals,
        brevity_penalty: bp,
        hyp_len: s.hyp_len,
        ref_len: s.ref_len,
    }
}

/// Unsmoothed corpus BLEU over pre-tokenized sequences.
pub fn corpus_bleu_tokens<T: Hash + Eq, S: AsRef<[T]>>(
    hypotheses: &[S],
    references: &[S],
    max_order: usize,
) -> Result<BleuReport> {
    if hypotheses.len() != references.len() {
        return Err(Error::Contract(format!(
            "{} hypotheses but {} references",
            hypotheses.len(),
            references.len()
        )));
    }
    if max_order == 0 {
        return Err(Error::Contract("BLEU order must be at least 1".into()));
    }
    Ok(report(stats(hypotheses.iter().zip(references), max_order), false))
}

pub fn tokenize(line: &str, lowercase: bool) -> Vec<String> {
    line.split_whitespace()
        .map(|w| if lowercase { w.to_lowercase() } else { w.to_string() })
        .collect()
}

/// Corpus BLEU of whitespace-tokenized lines, multi-bleu style: clipped
/// n-gram precisions, geometric mean, brevity penalty and no smoothing.
pub fn corpus_bleu<S: AsRef<str>>(
    hypotheses: &[S],
    references: &[S],
    max_order: usize,
    lowercase: bool,
) -> Result<BleuReport> {
    let tok = |lines: &[S]| -> Vec<Vec<String>> { lines.iter().map(|l| tokenize(l.as_ref(), lowercase)).collect() };
    corpus_bleu_tokens(&tok(hypotheses), &tok(references), max_order)
}

/// Single-pair BLEU; orders with no matches count as `1 / (total + 1)`.
pub fn sentence_bleu(hypothesis: &str, reference: &str) -> f64 {
    let h = tokenize(hypothesis, false);
    let r = tokenize(reference, false);
    report(stats(std::iter::once((&h, &r)), MAX_ORDER), true).bleu
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_is_one() {
        let r = corpus_bleu(&["a b c d e"], &["a b c d e"], 4, false).unwrap();
        assert_eq!(r.bleu, 1.0);
        assert_eq!(r.brevity_penalty, 1.0);
    }

    #[test]
    fn clipping_zeroes_bigram() {
        let r = corpus_bleu(&["a a a a"], &["a b"], 4, false).unwrap();
        assert_eq!(r.precisions[0], 0.25);
        assert_eq!(r.precisions[1], 0.0);
        assert_eq!(r.bleu, 0.0);
    }

    #[test]
    fn short_hypothesis_penalized() {
        let r = corpus_bleu(&["the cat sat"], &["the cat sat down"], 3, false).unwrap();
        assert!(r.precisions.iter().all(|&p| p == 1.0));
        assert!((r.brevity_penalty - (1.0f64 - 4.0 / 3.0).exp()).abs() < 1e-15);
        assert!((r.bleu - r.brevity_penalty).abs() < 1e-15);
    }

    #[test]
    fn count_mismatch_rejected() {
        assert!(corpus_bleu(&["a"], &["a", "b"], 4, false).is_err());
    }

    #[test]
    fn lowercase_flag() {
        assert!(corpus_bleu(&["A B C D"], &["a b c d"], 4, false).unwrap().bleu < 1.0);
        assert_eq!(corpus_bleu(&["A B C D"], &["a b c d"], 4, true).unwrap().bleu, 1.0);
    }

    #[test]
    fn multi_bleu_line() {
        let r = corpus_bleu(&["a b c d"], &["a b c d"], 4, false).unwrap();
        assert_eq!(
            r.to_string(),
            "BLEU = 100.00, 100.0/100.0/100.0/100.0 (BP=1.000, ratio=1.000, hyp_len=4, ref_len=4)"
        );
    }

    #[test]
    fn empty_hypothesis_scores_zero() {
        let r = corpus_bleu(&[""], &["a b"], 4, false).unwrap();
        assert_eq!(r.bleu, 0.0);
    }

    #[test]
    fn sentence_bleu_identity_and_disjoint() {
        assert_eq!(sentence_bleu("a b c d e", "a b c d e"), 1.0);
        let hyp = "a b c d e f g h i j k l";
        let reference = "m n o p q r s t u v w x";
        // (1/13 * 1/12 * 1/11 * 1/10)^(1/4)
        let expected = (1.0f64 / (13.0 * 12.0 * 11.0 * 10.0)).powf(0.25);
        let got = sentence_bleu(hyp, reference);
        assert!((got - expected).abs() < 1e-15);
        assert!(got > 0.0 && got < 0.1);
    }
}
