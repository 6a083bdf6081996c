use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::{corpus_bleu, measure_j_sent, measure_j_word, validation_loss, KlApprox, MAX_ORDER};
use crate::model::{beam_search, default_max_len, greedy_decode, ModelParams};
use crate::vocab::{TokenSequence, Vocabulary};

use super::losses::{loss_from_targets, mle_loss, teacher_targets, Pair, TeacherTarget};
use super::{OptimizerConfig, OptimizerState, ParamMask, TeachingMethod};

/// Mini-batch schedule, evaluation cadence and seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Schedule {
    pub epochs: usize,
    pub batch_size: usize,
    /// Evaluate and checkpoint every this many updates.
    pub eval_interval: u64,
    /// Stop (resumably) once this many updates have been made.
    pub max_updates: Option<u64>,
    pub shuffle_seed: u64,
    pub sampling_seed: u64,
    /// Reuse teacher outputs across epochs for deterministic methods.
    pub cache_teacher: bool,
    /// Beam width of the dev-set decode behind `dev_bleu`.
    pub eval_beam: usize,
    pub eval_at_start: bool,
    /// Measure greedy J_SENT and J_WORD at every evaluation.
    pub measure_kl: bool,
    pub optimizer: OptimizerConfig,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule {
            epochs: 10,
            batch_size: 32,
            eval_interval: 200,
            max_updates: None,
            shuffle_seed: 1,
            sampling_seed: 2,
            cache_teacher: true,
            eval_beam: 1,
            eval_at_start: true,
            measure_kl: true,
            optimizer: OptimizerConfig::default(),
        }
    }
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.eval_interval == 0 || self.eval_beam == 0 {
            return Err(Error::Config(
                "batch size, evaluation interval and evaluation beam must be positive".into(),
            ));
        }
        self.optimizer.validate()
    }
}

/// Training and evaluation data. `train` holds `(x, y)` pairs for maximum
/// likelihood and `(x, z)` pairs for teaching.
#[derive(Clone, Copy, Debug, Default)]
pub struct Corpora<'d> {
    pub train: &'d [Pair],
    /// `(x, y)` pairs for validation loss and BLEU.
    pub dev: &'d [Pair],
    /// Reference lines for `dev`; decoded from ids when empty.
    pub dev_refs: &'d [String],
    /// Needed to render hypotheses for BLEU.
    pub target_vocab: Option<&'d Vocabulary>,
    /// `(x, z)` pairs for KL measurement.
    pub kl_pairs: &'d [Pair],
}

/// Everything needed to continue a run exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub params: ModelParams,
    pub optimizer: OptimizerState,
    pub update: u64,
    /// Training loss accumulated since the last evaluation.
    pub loss_sum: f64,
    pub loss_count: u64,
    pub skipped: u64,
}

#[derive(Serialize, Deserialize)]
struct Counters {
    update: u64,
    loss_sum: f64,
    loss_count: u64,
    skipped: u64,
}

impl TrainState {
    pub fn new(params: ModelParams, config: OptimizerConfig) -> Result<Self> {
        let optimizer = OptimizerState::new(&params, config)?;
        Ok(TrainState {
            params,
            optimizer,
            update: 0,
            loss_sum: 0.0,
            loss_count: 0,
            skipped: 0,
        })
    }

    /// Writes `model.pdst`, `optimizer.pdst` and `state.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.params.save(&dir.join("model.pdst"))?;
        self.optimizer.save(&dir.join("optimizer.pdst"), &self.params)?;
        let counters = Counters {
            update: self.update,
            loss_sum: self.loss_sum,
            loss_count: self.loss_count,
            skipped: self.skipped,
        };
        let path = dir.join("state.json");
        fs::write(&path, serde_json::to_string_pretty(&counters)?).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path, config: OptimizerConfig) -> Result<Self> {
        let params = ModelParams::load(&dir.join("model.pdst"))?;
        let optimizer = OptimizerState::load(&dir.join("optimizer.pdst"), &params, config)?;
        let path = dir.join("state.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let c: Counters = serde_json::from_str(&text)?;
        Ok(TrainState {
            params,
            optimizer,
            update: c.update,
            loss_sum: c.loss_sum,
            loss_count: c.loss_count,
            skipped: c.skipped,
        })
    }
}

/// Metrics computed at one evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub update: u64,
    pub metrics: Vec<(String, f64)>,
}

impl EvalPoint {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.metrics.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }
}

pub trait TrainObserver {
    /// Called after each evaluation with the state it measured.
    fn on_eval(&mut self, _point: &EvalPoint, _state: &TrainState) -> Result<()> {
        Ok(())
    }

    /// Called once when training stops, finished or not.
    fn on_stop(&mut self, _state: &TrainState) -> Result<()> {
        Ok(())
    }
}

impl TrainObserver for () {}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub evals: Vec<EvalPoint>,
    /// All scheduled updates were made.
    pub finished: bool,
}

fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Decodes every dev source with beam width `k` (greedy when `k == 1`).
pub fn decode_all(params: &ModelParams, sources: &[&[u32]], k: usize) -> Result<Vec<TokenSequence>> {
    use rayon::prelude::*;
    sources
        .par_iter()
        .map(|x| {
            let max_len = default_max_len(x.len());
            if k == 1 {
                greedy_decode(params, x, max_len)
            } else {
                Ok(beam_search(params, x, k, max_len)?.swap_remove(0).tokens)
            }
        })
        .collect()
}

fn evaluate(
    state: &mut TrainState,
    teacher: Option<&ModelParams>,
    corpora: &Corpora<'_>,
    schedule: &Schedule,
) -> Result<EvalPoint> {
    let mut metrics = Vec::new();
    if state.loss_count > 0 {
        metrics.push(("train_loss".to_string(), state.loss_sum / state.loss_count as f64));
        metrics.push(("skipped_pairs".to_string(), state.skipped as f64));
    }
    state.loss_sum = 0.0;
    state.loss_count = 0;
    state.skipped = 0;
    let params = &state.params;
    if !corpora.dev.is_empty() {
        metrics.push(("valid_loss".to_string(), validation_loss(params, corpora.dev)?));
        if let Some(vocab) = corpora.target_vocab {
            let sources: Vec<&[u32]> = corpora.dev.iter().map(|(x, _)| x.as_slice()).collect();
            let hyps: Vec<String> = decode_all(params, &sources, schedule.eval_beam)?
                .iter()
                .map(|h| vocab.decode(h))
                .collect();
            let refs: Vec<String> = if corpora.dev_refs.is_empty() {
                corpora.dev.iter().map(|(_, y)| vocab.decode(y)).collect()
            } else {
                corpora.dev_refs.to_vec()
            };
            let bleu = corpus_bleu(&hyps, &refs, MAX_ORDER, false)?;
            metrics.push(("dev_bleu".to_string(), bleu.bleu));
        }
    }
    if let (Some(t), true, false) = (teacher, schedule.measure_kl, corpora.kl_pairs.is_empty()) {
        let js = measure_j_sent(params, t, corpora.kl_pairs, KlApprox::Greedy)?;
        let jw = measure_j_word(params, t, corpora.kl_pairs, KlApprox::Greedy)?;
        metrics.push((js.label(), js.mean));
        metrics.push((jw.label(), jw.mean));
    }
    for (name, v) in &metrics {
        if !v.is_finite() {
            return Err(Error::Numeric(format!("{name} is {v} at update {}", state.update)));
        }
    }
    Ok(EvalPoint {
        update: state.update,
        metrics,
    })
}

/// Shuffled mini-batch training from `state` (fresh or resumed). The
/// teacher, when present, is only read.
pub fn train(
    mut state: TrainState,
    teacher: Option<&ModelParams>,
    corpora: &Corpora<'_>,
    method: TeachingMethod,
    mask: &ParamMask,
    schedule: &Schedule,
    observer: &mut dyn TrainObserver,
) -> Result<TrainOutcome> {
    schedule.validate()?;
    method.validate()?;
    if method.needs_teacher() && teacher.is_none() {
        return Err(Error::Config(format!("{method} needs a teacher model")));
    }
    if let Some(t) = teacher {
        if t.dims().tgt_vocab != state.params.dims().tgt_vocab {
            return Err(Error::Config(format!(
                "teacher target vocabulary has {} entries, student has {}",
                t.dims().tgt_vocab,
                state.params.dims().tgt_vocab
            )));
        }
    }
    if corpora.train.is_empty() && schedule.epochs > 0 {
        return Err(Error::Config("training corpus is empty".into()));
    }
    let n = corpora.train.len();
    let per_epoch = n.div_ceil(schedule.batch_size) as u64;
    let total = schedule.epochs as u64 * per_epoch;
    let stop = schedule.max_updates.map_or(total, |m| m.min(total));
    let mut evals = Vec::new();
    let mut cache: HashMap<usize, TeacherTarget> = HashMap::new();
    let use_cache = schedule.cache_teacher && method.is_deterministic();

    if state.update == 0 && schedule.eval_at_start {
        let point = evaluate(&mut state, teacher, corpora, schedule)?;
        observer.on_eval(&point, &state)?;
        evals.push(point);
    }

    let mut order: Option<(u64, Vec<usize>)> = None;
    while state.update < stop {
        let u = state.update;
        let epoch = u / per_epoch;
        if order.as_ref().map(|(e, _)| *e) != Some(epoch) {
            order = Some((epoch, epoch_order(n, schedule.shuffle_seed, epoch)));
        }
        let idx = &order.as_ref().expect("order set").1;
        let start = ((u % per_epoch) as usize) * schedule.batch_size;
        let batch_idx = &idx[start..(start + schedule.batch_size).min(n)];

        let loss = if method == TeachingMethod::Mle {
            let batch: Vec<Pair> = batch_idx.iter().map(|&i| corpora.train[i].clone()).collect();
            mle_loss(&state.params, &batch, mask)?
        } else {
            let t = teacher.expect("checked above");
            let mut rng = ChaCha8Rng::seed_from_u64(schedule.sampling_seed);
            rng.set_stream(u);
            let missing: Vec<usize> = batch_idx
                .iter()
                .copied()
                .filter(|i| !(use_cache && cache.contains_key(i)))
                .collect();
            let refs: Vec<&Pair> = missing.iter().map(|&i| &corpora.train[i]).collect();
            let fresh = teacher_targets(t, &refs, method, &mut rng)?;
            let mut fresh: HashMap<usize, TeacherTarget> = missing.into_iter().zip(fresh).collect();
            let targets: Vec<TeacherTarget> = batch_idx
                .iter()
                .map(|i| fresh.remove(i).unwrap_or_else(|| cache[i].clone()))
                .collect();
            if use_cache {
                for (i, target) in batch_idx.iter().zip(&targets) {
                    cache.entry(*i).or_insert_with(|| target.clone());
                }
            }
            let sources: Vec<&TokenSequence> = batch_idx.iter().map(|&i| &corpora.train[i].0).collect();
            loss_from_targets(&state.params, &sources, &targets, method, mask)?
        };
        if !loss.loss.is_finite() {
            return Err(Error::Numeric(format!("training loss is {} at update {u}", loss.loss)));
        }
        if loss.pairs > 0 {
            state.optimizer.step(&mut state.params, &loss.grads, mask)?;
            state.loss_sum += loss.loss;
            state.loss_count += 1;
        }
        state.skipped += loss.skipped as u64;
        state.update += 1;

        if state.update.is_multiple_of(schedule.eval_interval) || state.update == total {
            let point = evaluate(&mut state, teacher, corpora, schedule)?;
            observer.on_eval(&point, &state)?;
            evals.push(point);
        }
    }
    observer.on_stop(&state)?;
    Ok(TrainOutcome {
        finished: state.update >= total,
        state,
        evals,
    })
}
