use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::{generate_trilingual, read_lines, write_lines, write_split, GeneratorConfig, SplitManifest};
use crate::error::{Error, Result};
use crate::evaluation::{corpus_bleu, measure_j_sent, measure_j_word, peakedness, BleuReport, KlApprox, MAX_ORDER};
use crate::model::ModelParams;
use crate::objectives::Pair;
use crate::pivot_baseline::{decode_direct_batch, decode_pivot_batch, DecodeStats, PivotChain};
use crate::vocab::{TokenSequence, Vocabulary};

use super::run::LoadedModel;

/// Generates the synthetic split into `out`, creating it if needed.
pub fn gen_corpus(config: &GeneratorConfig, out: &Path) -> Result<SplitManifest> {
    let split = generate_trilingual(config)?;
    write_split(&split, out)
}

/// Written by [`decode_file`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeReport {
    pub mode: String,
    pub k: usize,
    #[serde(flatten)]
    pub stats: DecodeStats,
    pub seconds_per_sentence: f64,
}

fn encode_lines(vocab: &Vocabulary, lines: &[String]) -> Vec<TokenSequence> {
    lines.iter().map(|l| vocab.encode(l)).collect()
}

/// Translates every line of `input` with `model`, or through `via_pivot`
/// when given: `model` then maps source to pivot and `via_pivot` pivot to
/// target, and the intermediate sentences go to `pivot_output`.
pub fn decode_file(
    model: &LoadedModel,
    via_pivot: Option<&LoadedModel>,
    input: &Path,
    output: &Path,
    pivot_output: Option<&Path>,
    k: usize,
) -> Result<DecodeReport> {
    if k == 0 {
        return Err(Error::Config("beam width must be at least 1".into()));
    }
    let sources = encode_lines(&model.src_vocab, &read_lines(input)?);
    let (mode, stats) = match via_pivot {
        None => {
            let (hyps, stats) = decode_direct_batch(&model.params, &sources, k)?;
            let lines: Vec<String> = hyps.iter().map(|h| model.tgt_vocab.decode(h)).collect();
            write_lines(output, &lines)?;
            ("direct", stats)
        }
        Some(second) => {
            if model.tgt_vocab != second.src_vocab {
                return Err(Error::Config(format!(
                    "pivot vocabulary of {} differs from the source vocabulary of {}",
                    model.path.display(),
                    second.path.display()
                )));
            }
            let chain = PivotChain::new(model.params.clone(), second.params.clone(), k)?;
            let (outs, stats) = decode_pivot_batch(&chain, &sources)?;
            let targets: Vec<String> = outs.iter().map(|o| second.tgt_vocab.decode(&o.target)).collect();
            let pivots: Vec<String> = outs.iter().map(|o| model.tgt_vocab.decode(&o.pivot)).collect();
            write_lines(output, &targets)?;
            let default_pivot = PathBuf::from(format!("{}.pivot", output.display()));
            write_lines(pivot_output.unwrap_or(&default_pivot), &pivots)?;
            ("via-pivot", stats)
        }
    };
    Ok(DecodeReport {
        mode: mode.into(),
        k,
        seconds_per_sentence: stats.seconds_per_sentence(),
        stats,
    })
}

/// BLEU of two aligned files.
pub fn evaluate_files(hyp: &Path, reference: &Path, lowercase: bool) -> Result<BleuReport> {
    let h = read_lines(hyp)?;
    let r = read_lines(reference)?;
    if h.len() != r.len() {
        return Err(Error::Alignment {
            left: hyp.to_path_buf(),
            right: reference.to_path_buf(),
            left_lines: h.len(),
            right_lines: r.len(),
        });
    }
    corpus_bleu(&h, &r, MAX_ORDER, lowercase)
}

/// Estimator grid: one row per KL estimator, one column per model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KlTable {
    pub columns: Vec<String>,
    pub rows: Vec<KlRow>,
    pub sentences: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KlRow {
    pub label: String,
    pub values: Vec<f64>,
}

impl KlTable {
    pub fn row(&self, label: &str) -> Option<&[f64]> {
        self.rows.iter().find(|r| r.label == label).map(|r| r.values.as_slice())
    }

    /// Fixed-width text rendering.
    pub fn render(&self) -> String {
        let label_w = self.rows.iter().map(|r| r.label.len()).max().unwrap_or(0).max(9);
        let col_w = self.columns.iter().map(String::len).max().unwrap_or(0).max(10);
        let mut out = format!("{:<label_w$}", "estimator");
        for c in &self.columns {
            write!(out, "  {c:>col_w$}").expect("string write");
        }
        out.push('\n');
        for r in &self.rows {
            write!(out, "{:<label_w$}", r.label).expect("string write");
            for v in &r.values {
                write!(out, "  {v:>col_w$.4}").expect("string write");
            }
            out.push('\n');
        }
        out
    }
}

/// The five estimators, in row order.
pub fn kl_estimators(k: usize, seed: u64) -> [(&'static str, KlApprox); 5] {
    [
        ("sent", KlApprox::Greedy),
        ("sent", KlApprox::Beam { k }),
        ("word", KlApprox::Greedy),
        ("word", KlApprox::Beam { k }),
        ("word", KlApprox::Sampling { seed }),
    ]
}

/// One column per `(label, student, pairs)`. Each student is measured on
/// its own `(input, pivot)` pairs so the teacher itself can be a column,
/// reading pivots as its input.
pub fn kl_table(
    teacher: &ModelParams,
    columns: &[(String, &ModelParams, &[Pair])],
    k: usize,
    seed: u64,
) -> Result<KlTable> {
    let estimators = kl_estimators(k, seed);
    let mut rows: Vec<KlRow> = Vec::new();
    for (level, approx) in estimators {
        let mut values = Vec::with_capacity(columns.len());
        let mut label = String::new();
        for (_, student, pairs) in columns {
            let est = if level == "sent" {
                measure_j_sent(student, teacher, pairs, approx)?
            } else {
                measure_j_word(student, teacher, pairs, approx)?
            };
            label = est.label();
            values.push(est.mean);
        }
        rows.push(KlRow { label, values });
    }
    Ok(KlTable {
        columns: columns.iter().map(|(l, _, _)| l.clone()).collect(),
        rows,
        sentences: columns.first().map_or(0, |(_, _, p)| p.len()),
    })
}

/// KL grid of student checkpoints against a teacher on aligned source and
/// pivot files, with the teacher as an optional last column.
#[allow(clippy::too_many_arguments)]
pub fn verify_kl(
    teacher: &LoadedModel,
    checkpoints: &[PathBuf],
    source: &Path,
    pivot: &Path,
    limit: Option<usize>,
    teacher_column: bool,
    k: usize,
    seed: u64,
) -> Result<KlTable> {
    if checkpoints.len() + usize::from(teacher_column) < 2 {
        return Err(Error::Config("verify-kl needs at least two checkpoints".into()));
    }
    let mut x = read_lines(source)?;
    let mut z = read_lines(pivot)?;
    if x.len() != z.len() {
        return Err(Error::Alignment {
            left: source.to_path_buf(),
            right: pivot.to_path_buf(),
            left_lines: x.len(),
            right_lines: z.len(),
        });
    }
    if let Some(n) = limit {
        x.truncate(n);
        z.truncate(n);
    }
    let students = checkpoints
        .iter()
        .map(|p| LoadedModel::open(p))
        .collect::<Result<Vec<_>>>()?;
    let zs = encode_lines(&teacher.src_vocab, &z);
    let mut encoded: Vec<Vec<Pair>> = Vec::new();
    for s in &students {
        if s.tgt_vocab != teacher.tgt_vocab {
            return Err(Error::Config(format!(
                "{} and the teacher have different target vocabularies",
                s.path.display()
            )));
        }
        encoded.push(
            encode_lines(&s.src_vocab, &x)
                .into_iter()
                .zip(zs.iter().cloned())
                .collect(),
        );
    }
    let self_pairs: Vec<Pair> = zs.iter().map(|z| (z.clone(), z.clone())).collect();
    let mut columns: Vec<(String, &ModelParams, &[Pair])> = students
        .iter()
        .zip(&encoded)
        .map(|(s, pairs)| (column_label(&s.path), &s.params, pairs.as_slice()))
        .collect();
    if teacher_column {
        columns.push(("teacher".into(), &teacher.params, &self_pairs));
    }
    kl_table(&teacher.params, &columns, k, seed)
}

fn column_label(path: &Path) -> String {
    path.file_stem()
        .map_or_else(|| path.display().to_string(), |s| s.to_string_lossy().into_owned())
}

/// Mean argmax probability of `model` on the lines of `input`.
pub fn peakedness_file(model: &LoadedModel, input: &Path) -> Result<f64> {
    let sources = encode_lines(&model.src_vocab, &read_lines(input)?);
    Ok(peakedness(&model.params, &sources)?.mean_max_prob)
}
