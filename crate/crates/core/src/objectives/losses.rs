use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::model::{
    beam_search, bind, default_max_len, greedy_decode, one_hot_targets, sample_decode, ModelParams, Network, ParamId,
};
use crate::tensor::Tensor;
use crate::vocab::TokenSequence;

use super::{ParamGrads, ParamMask, TeachingMethod};

pub type Pair = (TokenSequence, TokenSequence);

/// Loss and merged gradient of one mini-batch.
#[derive(Clone, Debug)]
pub struct DistillBatchLoss {
    pub loss: f64,
    /// Target positions (EOS included) that contributed.
    pub tokens: usize,
    pub pairs: usize,
    /// Pairs dropped because the teacher produced an empty translation.
    pub skipped: usize,
    pub method: TeachingMethod,
    pub grads: ParamGrads,
}

/// What the teacher contributes for one `(x, z)` pair.
#[derive(Clone, Debug)]
pub enum TeacherTarget {
    /// Empty teacher output; the pair contributes nothing.
    Skip,
    /// Sentence-level targets with their weights.
    Sentences(Vec<(TokenSequence, f64)>),
    /// Word-level target `y` with the teacher's distribution at every
    /// position (`[(|y|+1) x O]`).
    Words(TokenSequence, Tensor),
}

/// `q_i ∝ p_i^α` over a k-best list, from log-probabilities.
pub fn kbest_renormalize(log_probs: &[f64], alpha: f64) -> Result<Vec<f64>> {
    if log_probs.is_empty() {
        return Err(Error::Contract("k-best list is empty".into()));
    }
    if alpha <= 0.0 || !alpha.is_finite() {
        return Err(Error::Contract(format!("sharpness must be positive, got {alpha}")));
    }
    let scaled: Vec<f64> = log_probs.iter().map(|lp| alpha * lp).collect();
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scaled.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

fn teacher_mode(teacher: &ModelParams, pivot: &[u32], method: TeachingMethod) -> Result<TokenSequence> {
    let max_len = default_max_len(pivot.len());
    match method.beam_width() {
        Some(k) if k > 1 => {
            let mut best = beam_search(teacher, pivot, k, max_len)?;
            Ok(best.swap_remove(0).tokens)
        }
        _ => greedy_decode(teacher, pivot, max_len),
    }
}

/// Decodes (or samples) the teacher's supervision for one pivot sentence.
pub fn teacher_target(
    teacher: &ModelParams,
    pivot: &[u32],
    method: TeachingMethod,
    rng: &mut impl Rng,
) -> Result<TeacherTarget> {
    let max_len = default_max_len(pivot.len());
    match method {
        TeachingMethod::Mle => Err(Error::Config("maximum likelihood has no teacher".into())),
        TeachingMethod::SentGreedy | TeachingMethod::SentBeam { .. } => {
            let y = teacher_mode(teacher, pivot, method)?;
            Ok(if y.is_empty() {
                TeacherTarget::Skip
            } else {
                TeacherTarget::Sentences(vec![(y, 1.0)])
            })
        }
        TeachingMethod::SentKBest { k, alpha } => {
            let list: Vec<_> = beam_search(teacher, pivot, k, max_len)?
                .into_iter()
                .filter(|h| !h.tokens.is_empty())
                .collect();
            if list.is_empty() {
                return Ok(TeacherTarget::Skip);
            }
            let scores: Vec<f64> = list.iter().map(|h| h.log_prob).collect();
            let weights = kbest_renormalize(&scores, alpha)?;
            Ok(TeacherTarget::Sentences(
                list.into_iter().map(|h| h.tokens).zip(weights).collect(),
            ))
        }
        TeachingMethod::WordGreedy | TeachingMethod::WordBeam { .. } | TeachingMethod::WordSampling => {
            let y = if method == TeachingMethod::WordSampling {
                sample_decode(teacher, pivot, max_len, rng)?.0
            } else {
                teacher_mode(teacher, pivot, method)?
            };
            if y.is_empty() {
                return Ok(TeacherTarget::Skip);
            }
            let dist = teacher_distributions(teacher, pivot, &y)?;
            Ok(TeacherTarget::Words(y, dist))
        }
    }
}

/// Teacher next-word distributions along `y` + EOS.
pub fn teacher_distributions(teacher: &ModelParams, pivot: &[u32], y: &[u32]) -> Result<Tensor> {
    let log_probs = teacher.forced_log_probs(pivot, y)?;
    let shape = log_probs.shape().to_vec();
    Tensor::new(&shape, log_probs.into_data().into_iter().map(f64::exp).collect())
}

/// `-sum(weights * log P_student)` on `source` and its gradient.
pub fn weighted_example(
    student: &ModelParams,
    mask: &ParamMask,
    source: &[u32],
    target: &[u32],
    weights: Tensor,
) -> Result<(f64, ParamGrads)> {
    let mut g = Graph::new();
    let bound = bind(&mut g, student, |p| mask.trainable(p));
    let loss = Network::new(&mut g, &bound, *student.dims()).weighted_nll(source, target, weights)?;
    let value = g.value(loss).item()?;
    let mut grads = g.backward(loss)?;
    let tensors = ParamId::ALL.iter().map(|&p| grads.take(bound.node(p))).collect();
    Ok((value, ParamGrads::from_options(tensors)))
}

fn check_vocab(student: &ModelParams, teacher: &ModelParams) -> Result<()> {
    if student.dims().tgt_vocab != teacher.dims().tgt_vocab {
        return Err(Error::Config(format!(
            "teacher target vocabulary has {} entries, student has {}",
            teacher.dims().tgt_vocab,
            student.dims().tgt_vocab
        )));
    }
    Ok(())
}

fn merge(parts: Vec<(f64, ParamGrads)>, student: &ModelParams) -> (f64, ParamGrads) {
    let mut total = 0.0;
    let mut grads = ParamGrads::empty(student);
    // sequential reduction keeps the sum order fixed
    for (loss, g) in parts {
        total += loss;
        grads.add_assign(&g);
    }
    (total, grads)
}

/// Mean negative log-likelihood of `(x, y)` pairs.
pub fn mle_loss(params: &ModelParams, batch: &[Pair], mask: &ParamMask) -> Result<DistillBatchLoss> {
    if batch.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    let scale = 1.0 / batch.len() as f64;
    let out = params.dims().output_size();
    let parts = batch
        .par_iter()
        .map(|(x, y)| weighted_example(params, mask, x, y, one_hot_targets(y, out, scale)?))
        .collect::<Result<Vec<_>>>()?;
    let (loss, grads) = merge(parts, params);
    Ok(DistillBatchLoss {
        loss,
        tokens: batch.iter().map(|(_, y)| y.len() + 1).sum(),
        pairs: batch.len(),
        skipped: 0,
        method: TeachingMethod::Mle,
        grads,
    })
}

/// Student loss for already-computed teacher targets. Sentence-level targets
/// are averaged per pair, word-level ones per target position.
pub fn loss_from_targets(
    student: &ModelParams,
    sources: &[&TokenSequence],
    targets: &[TeacherTarget],
    method: TeachingMethod,
    mask: &ParamMask,
) -> Result<DistillBatchLoss> {
    let used = targets.iter().filter(|t| !matches!(t, TeacherTarget::Skip)).count();
    let skipped = targets.len() - used;
    let out = student.dims().output_size();
    let word_tokens: usize = targets
        .iter()
        .map(|t| match t {
            TeacherTarget::Words(y, _) => y.len() + 1,
            _ => 0,
        })
        .sum();
    let mut tokens = 0;
    let mut jobs: Vec<(&TokenSequence, &TokenSequence, Tensor)> = Vec::new();
    for (x, target) in sources.iter().zip(targets) {
        match target {
            TeacherTarget::Skip => {}
            TeacherTarget::Sentences(list) => {
                for (y, q) in list {
                    tokens += y.len() + 1;
                    jobs.push((x, y, one_hot_targets(y, out, q / used as f64)?));
                }
            }
            TeacherTarget::Words(y, dist) => {
                if dist.last_dim() != out {
                    return Err(Error::Config(format!(
                        "teacher distribution covers {} words, student predicts {out}",
                        dist.last_dim()
                    )));
                }
                tokens += y.len() + 1;
                let scale = 1.0 / word_tokens as f64;
                let scaled = Tensor::new(dist.shape(), dist.data().iter().map(|p| p * scale).collect())?;
                jobs.push((x, y, scaled));
            }
        }
    }
    let parts = jobs
        .into_par_iter()
        .map(|(x, y, w)| weighted_example(student, mask, x, y, w))
        .collect::<Result<Vec<_>>>()?;
    let (loss, grads) = merge(parts, student);
    Ok(DistillBatchLoss {
        loss,
        tokens,
        pairs: used,
        skipped,
        method,
        grads,
    })
}

/// Per-pair seeds drawn in order from `rng`, so parallel teacher sampling is
/// reproducible.
pub fn pair_seeds(rng: &mut impl Rng, n: usize) -> Vec<u64> {
    (0..n).map(|_| rng.gen()).collect()
}

/// Teacher targets for a batch of `(x, z)` pairs.
pub fn teacher_targets(
    teacher: &ModelParams,
    batch: &[&Pair],
    method: TeachingMethod,
    rng: &mut impl Rng,
) -> Result<Vec<TeacherTarget>> {
    let seeds = pair_seeds(rng, batch.len());
    batch
        .par_iter()
        .zip(seeds)
        .map(|((_, z), seed)| teacher_target(teacher, z, method, &mut ChaCha8Rng::seed_from_u64(seed)))
        .collect()
}

fn teaching_loss(
    student: &ModelParams,
    teacher: &ModelParams,
    batch: &[Pair],
    method: TeachingMethod,
    mask: &ParamMask,
    rng: &mut impl Rng,
) -> Result<DistillBatchLoss> {
    if batch.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    check_vocab(student, teacher)?;
    let refs: Vec<&Pair> = batch.iter().collect();
    let targets = teacher_targets(teacher, &refs, method, rng)?;
    let sources: Vec<&TokenSequence> = batch.iter().map(|(x, _)| x).collect();
    loss_from_targets(student, &sources, &targets, method, mask)
}

/// Sentence-level teaching: the student fits the teacher's mode (or its
/// renormalized k-best list) for each pivot sentence.
pub fn sent_teaching_loss(
    student: &ModelParams,
    teacher: &ModelParams,
    batch: &[Pair],
    method: TeachingMethod,
    mask: &ParamMask,
) -> Result<DistillBatchLoss> {
    if !method.is_sentence_level() {
        return Err(Error::Config(format!(
            "{} is not a sentence-level method",
            method.name()
        )));
    }
    // sentence-level targets are deterministic; the generator is unused
    teaching_loss(student, teacher, batch, method, mask, &mut ChaCha8Rng::seed_from_u64(0))
}

/// Word-level teaching: cross-entropy from the teacher's next-word
/// distributions to the student's along a teacher-produced target.
pub fn word_teaching_loss(
    student: &ModelParams,
    teacher: &ModelParams,
    batch: &[Pair],
    method: TeachingMethod,
    mask: &ParamMask,
    rng: &mut impl Rng,
) -> Result<DistillBatchLoss> {
    if !method.is_word_level() {
        return Err(Error::Config(format!("{} is not a word-level method", method.name())));
    }
    teaching_loss(student, teacher, batch, method, mask, rng)
}

/// Dispatches on the method.
pub fn batch_loss(
    student: &ModelParams,
    teacher: Option<&ModelParams>,
    batch: &[Pair],
    method: TeachingMethod,
    mask: &ParamMask,
    rng: &mut impl Rng,
) -> Result<DistillBatchLoss> {
    match (method, teacher) {
        (TeachingMethod::Mle, _) => mle_loss(student, batch, mask),
        (_, None) => Err(Error::Config(format!("{} needs a teacher model", method.name()))),
        (m, Some(t)) if m.is_sentence_level() => sent_teaching_loss(student, t, batch, m, mask),
        (m, Some(t)) => word_teaching_loss(student, t, batch, m, mask, rng),
    }
}
