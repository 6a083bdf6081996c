use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::{encode_parallel, read_lines, sha256_file, SplitPaths, VocabPolicy, MANIFEST_FILE};
use crate::error::{Error, Result};
use crate::model::{ModelDims, ModelParams};
use crate::objectives::{train, Corpora, EvalPoint, Pair, ParamMask, TrainObserver, TrainState};
use crate::transfer::init_from_teacher;
use crate::vocab::Vocabulary;

use super::config::{write_json, Direction, Provenance, RunManifest, TrainConfig};
use super::metrics::{truncate_metrics, MetricsRecord, MetricsWriter};

pub const CONFIG_FILE: &str = "config.json";
pub const RUN_MANIFEST_FILE: &str = "manifest.json";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const MODEL_FILE: &str = "model.pdst";
pub const SRC_VOCAB_FILE: &str = "vocab.src";
pub const TGT_VOCAB_FILE: &str = "vocab.tgt";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const STATE_DIR: &str = "state";

/// Checkpoint path of the evaluation at `update`.
pub fn checkpoint_path(out_dir: &Path, update: u64) -> PathBuf {
    out_dir.join(CHECKPOINT_DIR).join(format!("u{update:07}.pdst"))
}

/// Checkpoints of a run in update order.
pub fn list_checkpoints(out_dir: &Path) -> Result<Vec<PathBuf>> {
    let dir = out_dir.join(CHECKPOINT_DIR);
    let mut out: Vec<PathBuf> = fs::read_dir(&dir)
        .map_err(|e| Error::io(&dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "pdst"))
        .collect();
    out.sort();
    Ok(out)
}

/// Parameters with the vocabularies they were trained with.
#[derive(Clone, Debug)]
pub struct LoadedModel {
    pub path: PathBuf,
    pub params: ModelParams,
    pub src_vocab: Vocabulary,
    pub tgt_vocab: Vocabulary,
}

impl LoadedModel {
    /// Opens a run directory (its final `model.pdst`) or a checkpoint file.
    /// Vocabularies are looked up next to the file, then up to two levels up.
    pub fn open(path: &Path) -> Result<Self> {
        let file = if path.is_dir() {
            path.join(MODEL_FILE)
        } else {
            path.to_path_buf()
        };
        let params = ModelParams::load(&file)?;
        let vocab_dir = file
            .ancestors()
            .skip(1)
            .take(3)
            .find(|d| d.join(SRC_VOCAB_FILE).exists() && d.join(TGT_VOCAB_FILE).exists())
            .ok_or_else(|| {
                Error::Config(format!(
                    "no {SRC_VOCAB_FILE}/{TGT_VOCAB_FILE} found for {}",
                    file.display()
                ))
            })?;
        let src_vocab = Vocabulary::load(&vocab_dir.join(SRC_VOCAB_FILE))?;
        let tgt_vocab = Vocabulary::load(&vocab_dir.join(TGT_VOCAB_FILE))?;
        let d = params.dims();
        if d.src_vocab != src_vocab.len() || d.tgt_vocab != tgt_vocab.len() {
            return Err(Error::Config(format!(
                "{} has vocabulary sizes {}/{} but its vocabulary files hold {}/{}",
                file.display(),
                d.src_vocab,
                d.tgt_vocab,
                src_vocab.len(),
                tgt_vocab.len()
            )));
        }
        Ok(LoadedModel {
            path: file,
            params,
            src_vocab,
            tgt_vocab,
        })
    }
}

/// Encoded corpora of one run.
#[derive(Clone, Debug)]
pub struct RunData {
    pub src_vocab: Vocabulary,
    pub tgt_vocab: Vocabulary,
    /// `(x, y)` for maximum likelihood, `(x, z)` for teaching.
    pub train: Vec<Pair>,
    pub dev: Vec<Pair>,
    pub dev_refs: Vec<String>,
    pub kl_pairs: Vec<Pair>,
    pub corpus_files: std::collections::BTreeMap<String, String>,
}

struct FileReader<'a> {
    paths: SplitPaths,
    hashes: std::collections::BTreeMap<String, String>,
    expected: Option<&'a Provenance>,
}

impl FileReader<'_> {
    fn lines(&mut self, name: &str) -> Result<Vec<String>> {
        let path = self.paths.file(name);
        let hash = sha256_file(&path)?;
        if let Some(want) = self.expected.and_then(|p| p.corpus_files.get(name)) {
            if *want != hash {
                return Err(Error::Config(format!(
                    "{} does not match the manifest (sha256 {hash}, expected {want})",
                    path.display()
                )));
            }
        }
        self.hashes.insert(name.to_string(), hash);
        read_lines(&path)
    }
}

fn vocab_or_build(path: Option<&Path>, lines: &[String], max: usize) -> Result<Vocabulary> {
    match path {
        Some(p) => Vocabulary::load(p),
        None => crate::corpus::build_vocab(lines, max),
    }
}

fn limit<T>(mut v: Vec<T>, n: Option<usize>) -> Vec<T> {
    if let Some(n) = n {
        v.truncate(n);
    }
    v
}

fn encode(left: &[String], right: &[String], l: &Vocabulary, r: &Vocabulary) -> Result<Vec<Pair>> {
    let policy = VocabPolicy::Given {
        left: l.clone(),
        right: r.clone(),
    };
    Ok(encode_parallel(left, right, policy)?.pairs)
}

/// Reads and encodes the corpora a run of `config` trains and evaluates on.
/// For x-y students the target vocabulary is the teacher's, and pivot
/// sentences are encoded with the teacher's source vocabulary.
pub fn load_run_data(
    config: &TrainConfig,
    teacher: Option<&LoadedModel>,
    expected: Option<&Provenance>,
) -> Result<RunData> {
    let mut files = FileReader {
        paths: SplitPaths::new(&config.corpus_dir),
        hashes: Default::default(),
        expected,
    };
    let (s, t) = config.direction.langs();
    let (l_name, r_name) = match config.direction {
        Direction::PivotTarget => ("train.zy.z", "train.zy.y"),
        _ => ("train.xz.x", "train.xz.z"),
    };
    let train_l = files.lines(l_name)?;
    let train_r = files.lines(r_name)?;
    let dev_l = limit(files.lines(&format!("dev.{s}"))?, config.dev_limit);
    let dev_r = limit(files.lines(&format!("dev.{t}"))?, config.dev_limit);
    let src_vocab = vocab_or_build(config.src_vocab.as_deref(), &train_l, config.max_vocab)?;

    let data = if config.direction == Direction::SourceTarget {
        let teacher = teacher.ok_or_else(|| Error::Config("x-y runs need a teacher".into()))?;
        if let Some(p) = &config.tgt_vocab {
            if Vocabulary::load(p)? != teacher.tgt_vocab {
                return Err(Error::Config(format!(
                    "{} differs from the teacher's target vocabulary",
                    p.display()
                )));
            }
        }
        let tgt_vocab = teacher.tgt_vocab.clone();
        let pivot_vocab = &teacher.src_vocab;
        let dev_z = limit(files.lines("dev.z")?, config.dev_limit);
        RunData {
            train: encode(&train_l, &train_r, &src_vocab, pivot_vocab)?,
            dev: encode(&dev_l, &dev_r, &src_vocab, &tgt_vocab)?,
            kl_pairs: encode(&dev_l, &dev_z, &src_vocab, pivot_vocab)?,
            dev_refs: dev_r,
            src_vocab,
            tgt_vocab,
            corpus_files: Default::default(),
        }
    } else {
        let tgt_vocab = vocab_or_build(config.tgt_vocab.as_deref(), &train_r, config.max_vocab)?;
        RunData {
            train: encode(&train_l, &train_r, &src_vocab, &tgt_vocab)?,
            dev: encode(&dev_l, &dev_r, &src_vocab, &tgt_vocab)?,
            kl_pairs: Vec::new(),
            dev_refs: dev_r,
            src_vocab,
            tgt_vocab,
            corpus_files: Default::default(),
        }
    };
    let mut corpus_files = files.hashes;
    if let Ok(h) = sha256_file(&config.corpus_dir.join(MANIFEST_FILE)) {
        corpus_files.insert(MANIFEST_FILE.to_string(), h);
    }
    Ok(RunData { corpus_files, ..data })
}

/// Initial parameters: seeded random, then optionally the teacher's
/// target-side groups.
pub fn initial_params(config: &TrainConfig, data: &RunData, teacher: Option<&LoadedModel>) -> Result<ModelParams> {
    let dims = ModelDims::new(
        data.src_vocab.len(),
        data.tgt_vocab.len(),
        config.model.emb,
        config.model.hidden,
    )?;
    let params = ModelParams::random(dims, &mut ChaCha8Rng::seed_from_u64(config.init_seed))?;
    match (&config.transfer, teacher) {
        (Some(t), Some(teacher)) if t.init_from_teacher => init_from_teacher(&params, &teacher.params),
        _ => Ok(params),
    }
}

pub fn param_mask(config: &TrainConfig) -> ParamMask {
    config
        .transfer
        .as_ref()
        .map_or_else(ParamMask::all, |t| t.freeze.mask())
}

/// Result of [`train_run`].
#[derive(Clone, Debug)]
pub struct RunSummary {
    pub out_dir: PathBuf,
    pub final_model: PathBuf,
    pub update: u64,
    pub finished: bool,
    pub evals: Vec<EvalPoint>,
}

struct RunObserver {
    out_dir: PathBuf,
    run: String,
    method: String,
    writer: MetricsWriter,
    start: Instant,
    t_offset: f64,
    log: bool,
}

impl TrainObserver for RunObserver {
    fn on_eval(&mut self, point: &EvalPoint, state: &TrainState) -> Result<()> {
        let t = self.t_offset + self.start.elapsed().as_secs_f64();
        for (metric, value) in &point.metrics {
            self.writer.write(&MetricsRecord {
                run: self.run.clone(),
                update: point.update,
                t,
                metric: metric.clone(),
                value: *value,
                method: self.method.clone(),
            })?;
        }
        let ckpt = checkpoint_path(&self.out_dir, point.update);
        fs::create_dir_all(ckpt.parent().expect("has parent")).map_err(|e| Error::io(&self.out_dir, e))?;
        state.params.save(&ckpt)?;
        state.save(&self.out_dir.join(STATE_DIR))?;
        if self.log {
            let line: Vec<String> = point.metrics.iter().map(|(n, v)| format!("{n}={v:.4}")).collect();
            eprintln!("[{}] update {} {}", self.run, point.update, line.join(" "));
        }
        Ok(())
    }

    fn on_stop(&mut self, state: &TrainState) -> Result<()> {
        state.save(&self.out_dir.join(STATE_DIR))?;
        state.params.save(&self.out_dir.join(MODEL_FILE))
    }
}

/// Trains one run into `config.out_dir`: config, manifest, vocabularies,
/// metrics, a checkpoint per evaluation and the final model.
///
/// With `resume`, training continues from the saved state of an earlier,
/// interrupted run of the same config; metrics past that state are dropped.
/// `expected` holds input hashes from a manifest being rerun.
pub fn train_run(config: &TrainConfig, expected: Option<&Provenance>, resume: bool, log: bool) -> Result<RunSummary> {
    config.validate()?;
    let config = &TrainConfig {
        run: config.run_name(),
        ..config.clone()
    };
    let out = &config.out_dir;
    let teacher = config.teacher.as_deref().map(LoadedModel::open).transpose()?;
    let teacher_hash = teacher.as_ref().map(|t| sha256_file(&t.path)).transpose()?;
    if let (Some(want), Some(got)) = (expected.and_then(|p| p.teacher_model.as_ref()), &teacher_hash) {
        if want != got {
            return Err(Error::Config(format!(
                "teacher model differs from the manifest (sha256 {got})"
            )));
        }
    }
    let mut data = load_run_data(config, teacher.as_ref(), expected)?;
    let metrics_path = out.join(METRICS_FILE);

    let (state, t_offset) = if resume {
        let saved_src = Vocabulary::load(&out.join(SRC_VOCAB_FILE))?;
        let saved_tgt = Vocabulary::load(&out.join(TGT_VOCAB_FILE))?;
        if saved_src != data.src_vocab || saved_tgt != data.tgt_vocab {
            return Err(Error::Config(format!(
                "{} was trained with different vocabularies",
                out.display()
            )));
        }
        let state = TrainState::load(&out.join(STATE_DIR), config.schedule.optimizer)?;
        let kept = truncate_metrics(&metrics_path, state.update)?;
        let t = kept.last().map_or(0.0, |r| r.t);
        (state, t)
    } else {
        if metrics_path.exists() {
            return Err(Error::Config(format!(
                "{} already holds a run; resume it or choose another output directory",
                out.display()
            )));
        }
        fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        data.src_vocab.save(&out.join(SRC_VOCAB_FILE))?;
        data.tgt_vocab.save(&out.join(TGT_VOCAB_FILE))?;
        let params = initial_params(config, &data, teacher.as_ref())?;
        (TrainState::new(params, config.schedule.optimizer)?, 0.0)
    };

    write_json(&out.join(CONFIG_FILE), config)?;
    let manifest = RunManifest {
        config: config.clone(),
        provenance: Provenance {
            crate_version: env!("CARGO_PKG_VERSION").to_string(),
            corpus_files: std::mem::take(&mut data.corpus_files),
            teacher_model: teacher_hash,
            src_vocab: sha256_file(&out.join(SRC_VOCAB_FILE))?,
            tgt_vocab: sha256_file(&out.join(TGT_VOCAB_FILE))?,
        },
    };
    write_json(&out.join(RUN_MANIFEST_FILE), &manifest)?;

    let mut observer = RunObserver {
        out_dir: out.clone(),
        run: config.run_name(),
        method: config.method.name().to_string(),
        writer: MetricsWriter::append(&metrics_path)?,
        start: Instant::now(),
        t_offset,
        log,
    };
    let corpora = Corpora {
        train: &data.train,
        dev: &data.dev,
        dev_refs: &data.dev_refs,
        target_vocab: Some(&data.tgt_vocab),
        kl_pairs: &data.kl_pairs,
    };
    let outcome = train(
        state,
        teacher.as_ref().map(|t| &t.params),
        &corpora,
        config.method,
        &param_mask(config),
        &config.schedule,
        &mut observer,
    )?;
    Ok(RunSummary {
        out_dir: out.clone(),
        final_model: out.join(MODEL_FILE),
        update: outcome.state.update,
        finished: outcome.finished,
        evals: outcome.evals,
    })
}
