//! Two-step decoding through the pivot language, and timing of direct versus
//! pivoted translation.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{beam_search, default_max_len, ModelParams};
use crate::vocab::TokenSequence;

/// Source-to-pivot and pivot-to-target models run back to back.
#[derive(Clone, Debug)]
pub struct PivotChain {
    pub source_pivot: ModelParams,
    pub pivot_target: ModelParams,
    /// Beam width of each stage.
    pub k: usize,
}

impl PivotChain {
    pub fn new(source_pivot: ModelParams, pivot_target: ModelParams, k: usize) -> Result<Self> {
        if source_pivot.dims().tgt_vocab != pivot_target.dims().src_vocab {
            return Err(Error::Config(format!(
                "source-pivot model emits {} pivot words, pivot-target model reads {}",
                source_pivot.dims().tgt_vocab,
                pivot_target.dims().src_vocab
            )));
        }
        if k == 0 {
            return Err(Error::Config("beam width must be at least 1".into()));
        }
        Ok(PivotChain {
            source_pivot,
            pivot_target,
            k,
        })
    }
}

/// Top-1 of a width-`k` beam under the default length limit.
pub fn decode_best(params: &ModelParams, source: &[u32], k: usize) -> Result<TokenSequence> {
    let mut hyps = beam_search(params, source, k, default_max_len(source.len()))?;
    Ok(hyps.swap_remove(0).tokens)
}

/// Intermediate pivot translation and final target translation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PivotOutput {
    pub pivot: TokenSequence,
    pub target: TokenSequence,
}

/// `ẑ` = best pivot translation of `x`, then `ŷ` = best target translation
/// of `ẑ`. An empty `ẑ` cannot be translated and is reported as an error.
pub fn two_step_decode(chain: &PivotChain, source: &[u32]) -> Result<PivotOutput> {
    let pivot = decode_best(&chain.source_pivot, source, chain.k)?;
    if pivot.is_empty() {
        return Err(Error::Contract(format!(
            "source-pivot model produced an empty pivot sentence for {source:?}"
        )));
    }
    let target = decode_best(&chain.pivot_target, &pivot, chain.k)?;
    Ok(PivotOutput { pivot, target })
}

/// Work and wall-clock time of one batch decode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeStats {
    pub sentences: usize,
    pub beam_searches: usize,
    pub failures: usize,
    pub seconds: f64,
}

impl DecodeStats {
    pub fn seconds_per_sentence(&self) -> f64 {
        self.seconds / self.sentences.max(1) as f64
    }
}

/// Translates every source directly, one beam search each.
pub fn decode_direct_batch(
    params: &ModelParams,
    sources: &[TokenSequence],
    k: usize,
) -> Result<(Vec<TokenSequence>, DecodeStats)> {
    let start = Instant::now();
    let out = sources
        .iter()
        .map(|x| decode_best(params, x, k))
        .collect::<Result<Vec<_>>>()?;
    let stats = DecodeStats {
        sentences: sources.len(),
        beam_searches: sources.len(),
        failures: 0,
        seconds: start.elapsed().as_secs_f64(),
    };
    Ok((out, stats))
}

/// Translates every source through the pivot. A sentence whose pivot
/// translation is empty yields an empty pivot and target and counts as a
/// failure.
pub fn decode_pivot_batch(chain: &PivotChain, sources: &[TokenSequence]) -> Result<(Vec<PivotOutput>, DecodeStats)> {
    let start = Instant::now();
    let mut out = Vec::with_capacity(sources.len());
    let mut beam_searches = 0;
    let mut failures = 0;
    for x in sources {
        let pivot = decode_best(&chain.source_pivot, x, chain.k)?;
        beam_searches += 1;
        if pivot.is_empty() {
            failures += 1;
            out.push(PivotOutput {
                pivot,
                target: Vec::new(),
            });
            continue;
        }
        let target = decode_best(&chain.pivot_target, &pivot, chain.k)?;
        beam_searches += 1;
        out.push(PivotOutput { pivot, target });
    }
    let stats = DecodeStats {
        sentences: sources.len(),
        beam_searches,
        failures,
        seconds: start.elapsed().as_secs_f64(),
    };
    Ok((out, stats))
}
