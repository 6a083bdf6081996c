//! Training objectives, the optimizer and the training loop.

mod losses;
mod optimizer;
mod train;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use losses::{
    batch_loss, kbest_renormalize, loss_from_targets, mle_loss, pair_seeds, sent_teaching_loss, teacher_distributions,
    teacher_target, teacher_targets, weighted_example, word_teaching_loss, DistillBatchLoss, Pair, TeacherTarget,
};
pub use optimizer::{OptimizerConfig, OptimizerState};
pub use train::{decode_all, train, Corpora, EvalPoint, Schedule, TrainObserver, TrainOutcome, TrainState};

use crate::error::{Error, Result};
use crate::model::{ModelParams, ParamGroup, ParamId};
use crate::tensor::Tensor;

pub const DEFAULT_BEAM: usize = 5;
pub const DEFAULT_KBEST_ALPHA: f64 = 5e-3;

/// How the student is supervised.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum TeachingMethod {
    Mle,
    SentGreedy,
    SentBeam {
        k: usize,
    },
    #[serde(rename = "sent-kbest")]
    SentKBest {
        k: usize,
        alpha: f64,
    },
    WordGreedy,
    WordBeam {
        k: usize,
    },
    WordSampling,
}

impl TeachingMethod {
    pub const NAMES: [&'static str; 7] = [
        "mle",
        "sent-greedy",
        "sent-beam",
        "sent-kbest",
        "word-greedy",
        "word-beam",
        "word-sampling",
    ];

    pub fn name(&self) -> &'static str {
        match self {
            TeachingMethod::Mle => "mle",
            TeachingMethod::SentGreedy => "sent-greedy",
            TeachingMethod::SentBeam { .. } => "sent-beam",
            TeachingMethod::SentKBest { .. } => "sent-kbest",
            TeachingMethod::WordGreedy => "word-greedy",
            TeachingMethod::WordBeam { .. } => "word-beam",
            TeachingMethod::WordSampling => "word-sampling",
        }
    }

    /// Parses a method name with the default beam width and sharpness.
    pub fn from_name(name: &str) -> Result<Self> {
        Self::with_options(name, DEFAULT_BEAM, DEFAULT_KBEST_ALPHA)
    }

    pub fn with_options(name: &str, k: usize, alpha: f64) -> Result<Self> {
        let method = match name {
            "mle" => TeachingMethod::Mle,
            "sent-greedy" => TeachingMethod::SentGreedy,
            "sent-beam" => TeachingMethod::SentBeam { k },
            "sent-kbest" => TeachingMethod::SentKBest { k, alpha },
            "word-greedy" => TeachingMethod::WordGreedy,
            "word-beam" => TeachingMethod::WordBeam { k },
            "word-sampling" => TeachingMethod::WordSampling,
            other => {
                return Err(Error::Config(format!(
                    "unknown method {other:?}; expected one of {}",
                    Self::NAMES.join(", ")
                )))
            }
        };
        method.validate()?;
        Ok(method)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(0) = self.beam_width() {
            return Err(Error::Config("beam width must be at least 1".into()));
        }
        if let TeachingMethod::SentKBest { alpha, .. } = self {
            if !(alpha.is_finite() && *alpha > 0.0) {
                return Err(Error::Config(format!("k-best sharpness must be positive, got {alpha}")));
            }
        }
        Ok(())
    }

    pub fn beam_width(&self) -> Option<usize> {
        match *self {
            TeachingMethod::SentBeam { k } | TeachingMethod::SentKBest { k, .. } | TeachingMethod::WordBeam { k } => {
                Some(k)
            }
            _ => None,
        }
    }

    pub fn needs_teacher(&self) -> bool {
        *self != TeachingMethod::Mle
    }

    pub fn is_sentence_level(&self) -> bool {
        matches!(
            self,
            TeachingMethod::SentGreedy | TeachingMethod::SentBeam { .. } | TeachingMethod::SentKBest { .. }
        )
    }

    pub fn is_word_level(&self) -> bool {
        matches!(
            self,
            TeachingMethod::WordGreedy | TeachingMethod::WordBeam { .. } | TeachingMethod::WordSampling
        )
    }

    /// Teacher output does not change between epochs, so it may be cached.
    pub fn is_deterministic(&self) -> bool {
        self.needs_teacher() && *self != TeachingMethod::WordSampling
    }
}

impl fmt::Display for TeachingMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TeachingMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::from_name(s)
    }
}

/// Which parameters receive gradients and updates.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamMask {
    trainable: Vec<bool>,
}

impl ParamMask {
    pub fn all() -> Self {
        ParamMask {
            trainable: vec![true; ParamId::ALL.len()],
        }
    }

    pub fn freezing(groups: &[ParamGroup]) -> Self {
        ParamMask {
            trainable: ParamId::ALL.iter().map(|p| !groups.contains(&p.group())).collect(),
        }
    }

    pub fn trainable(&self, p: ParamId) -> bool {
        self.trainable[p.index()]
    }

    pub fn frozen_groups(&self) -> Vec<ParamGroup> {
        ParamGroup::ALL
            .iter()
            .copied()
            .filter(|g| ParamId::ALL.iter().any(|p| p.group() == *g && !self.trainable(*p)))
            .collect()
    }
}

impl Default for ParamMask {
    fn default() -> Self {
        Self::all()
    }
}

/// Gradients per parameter; `None` for parameters that got none.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGrads {
    tensors: Vec<Option<Tensor>>,
}

impl ParamGrads {
    pub fn empty(_params: &ModelParams) -> Self {
        ParamGrads {
            tensors: vec![None; ParamId::ALL.len()],
        }
    }

    pub fn from_options(tensors: Vec<Option<Tensor>>) -> Self {
        assert_eq!(tensors.len(), ParamId::ALL.len());
        ParamGrads { tensors }
    }

    /// Dense gradients for every parameter.
    pub fn from_tensors(tensors: Vec<Tensor>) -> Self {
        Self::from_options(tensors.into_iter().map(Some).collect())
    }

    pub fn get(&self, p: ParamId) -> Option<&Tensor> {
        self.tensors[p.index()].as_ref()
    }

    pub fn add_assign(&mut self, other: &ParamGrads) {
        for (mine, theirs) in self.tensors.iter_mut().zip(&other.tensors) {
            match (mine.as_mut(), theirs) {
                (_, None) => {}
                (None, Some(t)) => *mine = Some(t.clone()),
                (Some(m), Some(t)) => {
                    for (a, b) in m.data_mut().iter_mut().zip(t.data()) {
                        *a += b;
                    }
                }
            }
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.tensors
            .iter()
            .flatten()
            .map(Tensor::squared_norm)
            .sum::<f64>()
            .sqrt()
    }

    /// Flattened in `ParamId::ALL` order, zeros where absent.
    pub fn flatten(&self, params: &ModelParams) -> Vec<f64> {
        ParamId::ALL
            .iter()
            .flat_map(|&p| match self.get(p) {
                Some(t) => t.data().to_vec(),
                None => vec![0.0; params.get(p).len()],
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn method_names_round_trip() {
        for name in TeachingMethod::NAMES {
            let m: TeachingMethod = name.parse().unwrap();
            assert_eq!(m.name(), name);
        }
        assert!("sent-best".parse::<TeachingMethod>().is_err());
        assert!(TeachingMethod::with_options("sent-beam", 0, 1.0).is_err());
        assert!(TeachingMethod::with_options("sent-kbest", 5, -1.0).is_err());
    }

    #[test]
    fn method_serde_tagging() {
        let m = TeachingMethod::SentKBest { k: 5, alpha: 5e-3 };
        let s = serde_json::to_string(&m).unwrap();
        assert_eq!(s, r#"{"kind":"sent-kbest","k":5,"alpha":0.005}"#);
        assert_eq!(serde_json::from_str::<TeachingMethod>(&s).unwrap(), m);
    }

    #[test]
    fn mask_freezes_groups() {
        let mask = ParamMask::freezing(&[ParamGroup::Decoder]);
        assert!(!mask.trainable(ParamId::DecU));
        assert!(!mask.trainable(ParamId::DecInitW));
        assert!(mask.trainable(ParamId::AttQuery));
        assert_eq!(mask.frozen_groups(), vec![ParamGroup::Decoder]);
        assert!(ParamMask::all().frozen_groups().is_empty());
    }

    #[test]
    fn grads_merge_sparse() {
        let mut a = ParamGrads::from_options(vec![None; ParamId::ALL.len()]);
        let mut slots = vec![None; ParamId::ALL.len()];
        slots[0] = Some(Tensor::row(&[3.0, 4.0]));
        let b = ParamGrads::from_options(slots);
        a.add_assign(&b);
        a.add_assign(&b);
        assert_eq!(a.get(ParamId::ALL[0]).unwrap().data(), &[6.0, 8.0]);
        assert_eq!(a.global_norm(), 10.0);
    }
}
