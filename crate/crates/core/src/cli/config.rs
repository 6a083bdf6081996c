use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::DEFAULT_MAX_VOCAB;
use crate::error::{Error, Result};
use crate::objectives::{Schedule, TeachingMethod};
use crate::transfer::FreezePlan;

/// Which corpus a run trains on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    /// Pivot to target on `train.zy`: the teacher.
    #[serde(rename = "z-y")]
    PivotTarget,
    /// Source to pivot on `train.xz`: first stage of the pivot chain.
    #[serde(rename = "x-z")]
    SourcePivot,
    /// Source to target taught on `train.xz` through a pivot-target teacher.
    #[serde(rename = "x-y")]
    SourceTarget,
}

impl Direction {
    pub const NAMES: [&'static str; 3] = ["z-y", "x-z", "x-y"];

    pub fn name(self) -> &'static str {
        match self {
            Direction::PivotTarget => "z-y",
            Direction::SourcePivot => "x-z",
            Direction::SourceTarget => "x-y",
        }
    }

    /// `(source, target)` language codes.
    pub fn langs(self) -> (&'static str, &'static str) {
        match self {
            Direction::PivotTarget => ("z", "y"),
            Direction::SourcePivot => ("x", "z"),
            Direction::SourceTarget => ("x", "y"),
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "z-y" => Ok(Direction::PivotTarget),
            "x-z" => Ok(Direction::SourcePivot),
            "x-y" => Ok(Direction::SourceTarget),
            other => Err(Error::Config(format!(
                "unknown direction {other:?}; expected one of {}",
                Direction::NAMES.join(", ")
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSize {
    pub emb: usize,
    pub hidden: usize,
}

impl Default for ModelSize {
    fn default() -> Self {
        ModelSize { emb: 32, hidden: 32 }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct TransferConfig {
    /// Copy attention, decoder, target embeddings and output layer from the
    /// teacher before training.
    pub init_from_teacher: bool,
    pub freeze: FreezePlan,
}

impl Default for TransferConfig {
    fn default() -> Self {
        TransferConfig {
            init_from_teacher: true,
            freeze: FreezePlan::default(),
        }
    }
}

/// Everything that determines a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Run id written into every metrics record.
    pub run: String,
    pub corpus_dir: PathBuf,
    pub out_dir: PathBuf,
    pub direction: Direction,
    pub method: TeachingMethod,
    /// Run directory of the pivot-target teacher.
    pub teacher: Option<PathBuf>,
    pub model: ModelSize,
    pub init_seed: u64,
    pub schedule: Schedule,
    /// Absent: the student starts from random parameters.
    pub transfer: Option<TransferConfig>,
    /// Vocabulary files to use instead of building them from the corpus.
    pub src_vocab: Option<PathBuf>,
    pub tgt_vocab: Option<PathBuf>,
    pub max_vocab: usize,
    /// Use only the first this many dev sentences for evaluation.
    pub dev_limit: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            run: String::new(),
            corpus_dir: PathBuf::from("corpus"),
            out_dir: PathBuf::from("runs/run"),
            direction: Direction::PivotTarget,
            method: TeachingMethod::Mle,
            teacher: None,
            model: ModelSize::default(),
            init_seed: 7,
            schedule: Schedule::default(),
            transfer: None,
            src_vocab: None,
            tgt_vocab: None,
            max_vocab: DEFAULT_MAX_VOCAB,
            dev_limit: None,
        }
    }
}

impl TrainConfig {
    /// Checks the pairing of direction, method and teacher. Maximum
    /// likelihood needs parallel data, which does not exist for x-y.
    pub fn validate(&self) -> Result<()> {
        self.method.validate()?;
        self.schedule.validate()?;
        match (self.direction, self.method) {
            (Direction::SourceTarget, TeachingMethod::Mle) => {
                return Err(Error::Config(
                    "no x-y parallel data exists: mle cannot train a source-target model; use a teaching method".into(),
                ))
            }
            (Direction::SourceTarget, _) => {
                if self.teacher.is_none() {
                    return Err(Error::Config(format!("{} needs a teacher run directory", self.method)));
                }
            }
            (d, TeachingMethod::Mle) => {
                if self.transfer.is_some() {
                    return Err(Error::Config(format!(
                        "transfer initialization applies to x-y students, not {d}"
                    )));
                }
            }
            (d, m) => {
                return Err(Error::Config(format!(
                    "{m} teaches an x-y student; direction {d} trains with mle"
                )));
            }
        }
        if self.model.emb == 0 || self.model.hidden == 0 {
            return Err(Error::Config("model sizes must be positive".into()));
        }
        Ok(())
    }

    pub fn run_name(&self) -> String {
        if !self.run.is_empty() {
            return self.run.clone();
        }
        self.out_dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "run".into())
    }
}

/// Config plus the hashes of every input, written as `manifest.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: TrainConfig,
    pub provenance: Provenance,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub crate_version: String,
    /// SHA-256 of each corpus file read, by file name.
    pub corpus_files: BTreeMap<String, String>,
    pub teacher_model: Option<String>,
    pub src_vocab: String,
    pub tgt_vocab: String,
}

/// Reads either a bare config or a run manifest. A manifest's input hashes
/// are returned so they can be checked before rerunning.
pub fn read_train_config(path: &Path) -> Result<(TrainConfig, Option<Provenance>)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let value: serde_json::Value = serde_json::from_str(&text)?;
    if value.get("config").is_some() && value.get("provenance").is_some() {
        let m: RunManifest = serde_json::from_value(value)?;
        return Ok((m.config, Some(m.provenance)));
    }
    Ok((serde_json::from_value(value)?, None))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
