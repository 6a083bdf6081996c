//! Attention-based GRU encoder-decoder.
//!
//! One bidirectional GRU layer encodes the source into annotations; a GRU
//! decoder with additive attention over the annotations predicts one target
//! word at a time through a tanh readout layer.

mod checkpoint;
mod decode;
mod network;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{read_tensors, write_tensors, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use decode::{beam_search, default_max_len, greedy_decode, sample_decode, DecoderState, EncodedSource, Hypothesis};
pub use network::{bind, one_hot_targets, Bound, EncodedNodes, Network};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::vocab::MIN_VOCAB;

pub const INIT_SCALE: f64 = 0.08;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub src_vocab: usize,
    pub tgt_vocab: usize,
    pub emb: usize,
    pub hidden: usize,
}

impl ModelDims {
    pub fn new(src_vocab: usize, tgt_vocab: usize, emb: usize, hidden: usize) -> Result<Self> {
        let dims = ModelDims {
            src_vocab,
            tgt_vocab,
            emb,
            hidden,
        };
        dims.validate()?;
        Ok(dims)
    }

    pub fn validate(&self) -> Result<()> {
        if self.src_vocab < MIN_VOCAB || self.tgt_vocab < MIN_VOCAB {
            return Err(Error::Config(format!(
                "vocabularies need at least {MIN_VOCAB} entries: {self:?}"
            )));
        }
        if self.emb == 0 || self.hidden == 0 {
            return Err(Error::Config(format!("zero-width layer in {self:?}")));
        }
        Ok(())
    }

    /// Number of predictable target tokens (everything but PAD and BOS).
    pub fn output_size(&self) -> usize {
        self.tgt_vocab - 2
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    SourceEmbeddings,
    Encoder,
    Attention,
    Decoder,
    TargetEmbeddings,
    OutputProjection,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 6] = [
        ParamGroup::SourceEmbeddings,
        ParamGroup::Encoder,
        ParamGroup::Attention,
        ParamGroup::Decoder,
        ParamGroup::TargetEmbeddings,
        ParamGroup::OutputProjection,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::SourceEmbeddings => "source_embeddings",
            ParamGroup::Encoder => "encoder",
            ParamGroup::Attention => "attention",
            ParamGroup::Decoder => "decoder",
            ParamGroup::TargetEmbeddings => "target_embeddings",
            ParamGroup::OutputProjection => "output_projection",
        }
    }

    pub fn from_name(name: &str) -> Option<ParamGroup> {
        ParamGroup::ALL.iter().copied().find(|g| g.name() == name)
    }
}

macro_rules! param_ids {
    ($($variant:ident => $name:literal, $group:ident;)*) => {
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
        pub enum ParamId {
            $($variant,)*
        }

        impl ParamId {
            pub const ALL: &'static [ParamId] = &[$(ParamId::$variant,)*];

            pub fn name(self) -> &'static str {
                match self {
                    $(ParamId::$variant => $name,)*
                }
            }

            pub fn group(self) -> ParamGroup {
                match self {
                    $(ParamId::$variant => ParamGroup::$group,)*
                }
            }

            pub fn from_name(name: &str) -> Option<ParamId> {
                match name {
                    $($name => Some(ParamId::$variant),)*
                    _ => None,
                }
            }
        }
    };
}

param_ids! {
    SrcEmb => "src_emb", SourceEmbeddings;
    EncFwdW => "enc_fwd.w", Encoder;
    EncFwdU => "enc_fwd.u", Encoder;
    EncFwdB => "enc_fwd.b", Encoder;
    EncBwdW => "enc_bwd.w", Encoder;
    EncBwdU => "enc_bwd.u", Encoder;
    EncBwdB => "enc_bwd.b", Encoder;
    AttQuery => "att.query", Attention;
    AttKey => "att.key", Attention;
    AttBias => "att.b", Attention;
    AttScore => "att.score", Attention;
    DecInitW => "dec_init.w", Decoder;
    DecInitB => "dec_init.b", Decoder;
    DecW => "dec.w", Decoder;
    DecU => "dec.u", Decoder;
    DecB => "dec.b", Decoder;
    TgtEmb => "tgt_emb", TargetEmbeddings;
    ReadoutState => "readout.state", OutputProjection;
    ReadoutEmb => "readout.emb", OutputProjection;
    ReadoutCtx => "readout.ctx", OutputProjection;
    ReadoutB => "readout.b", OutputProjection;
    OutW => "out.w", OutputProjection;
    OutB => "out.b", OutputProjection;
}

impl ParamId {
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn shape(self, d: &ModelDims) -> Vec<usize> {
        let (e, h) = (d.emb, d.hidden);
        match self {
            ParamId::SrcEmb => vec![d.src_vocab, e],
            ParamId::EncFwdW | ParamId::EncBwdW => vec![e, 3 * h],
            ParamId::EncFwdU | ParamId::EncBwdU | ParamId::DecU => vec![h, 3 * h],
            ParamId::EncFwdB | ParamId::EncBwdB | ParamId::DecB => vec![1, 3 * h],
            ParamId::AttQuery => vec![h, h],
            ParamId::AttKey => vec![2 * h, h],
            ParamId::AttBias => vec![1, h],
            ParamId::AttScore => vec![h, 1],
            ParamId::DecInitW => vec![2 * h, h],
            ParamId::DecInitB => vec![1, h],
            ParamId::DecW => vec![e + 2 * h, 3 * h],
            ParamId::TgtEmb => vec![d.tgt_vocab, e],
            ParamId::ReadoutState => vec![h, e],
            ParamId::ReadoutEmb => vec![e, e],
            ParamId::ReadoutCtx => vec![2 * h, e],
            ParamId::ReadoutB => vec![1, e],
            ParamId::OutW => vec![e, d.output_size()],
            ParamId::OutB => vec![1, d.output_size()],
        }
    }
}

/// Every learnable weight of one translation model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    dims: ModelDims,
    tensors: Vec<Tensor>,
}

impl ModelParams {
    pub fn zeros(dims: ModelDims) -> Result<Self> {
        dims.validate()?;
        let tensors = ParamId::ALL.iter().map(|p| Tensor::zeros(&p.shape(&dims))).collect();
        Ok(ModelParams { dims, tensors })
    }

    pub fn random<R: Rng + ?Sized>(dims: ModelDims, rng: &mut R) -> Result<Self> {
        Self::random_scaled(dims, INIT_SCALE, rng)
    }

    pub fn random_scaled<R: Rng + ?Sized>(dims: ModelDims, scale: f64, rng: &mut R) -> Result<Self> {
        dims.validate()?;
        let tensors = ParamId::ALL
            .iter()
            .map(|p| Tensor::uniform(&p.shape(&dims), scale, rng))
            .collect();
        Ok(ModelParams { dims, tensors })
    }

    pub fn from_tensors(dims: ModelDims, tensors: Vec<Tensor>) -> Result<Self> {
        dims.validate()?;
        if tensors.len() != ParamId::ALL.len() {
            return Err(Error::Format(format!(
                "expected {} tensors, got {}",
                ParamId::ALL.len(),
                tensors.len()
            )));
        }
        for (p, t) in ParamId::ALL.iter().zip(&tensors) {
            if t.shape() != p.shape(&dims) {
                return Err(Error::Dimension {
                    op: p.name(),
                    lhs: t.shape().to_vec(),
                    rhs: p.shape(&dims),
                });
            }
        }
        Ok(ModelParams { dims, tensors })
    }

    pub fn dims(&self) -> &ModelDims {
        &self.dims
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.index()]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.index()]
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// All parameter values concatenated in `ParamId::ALL` order.
    pub fn flatten(&self) -> Vec<f64> {
        self.tensors.iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    pub fn set_flat(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.num_values() {
            return Err(Error::Dimension {
                op: "set_flat",
                lhs: vec![self.num_values()],
                rhs: vec![values.len()],
            });
        }
        let mut offset = 0;
        for t in &mut self.tensors {
            let n = t.len();
            t.data_mut().copy_from_slice(&values[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let named: Vec<(&str, &Tensor)> = ParamId::ALL.iter().map(|p| (p.name(), self.get(*p))).collect();
        write_tensors(path, &self.dims, &named)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let (dims, named) = read_tensors(path)?;
        let mut slots: Vec<Option<Tensor>> = vec![None; ParamId::ALL.len()];
        for (name, t) in named {
            let id = ParamId::from_name(&name).ok_or_else(|| Error::Format(format!("unknown tensor {name:?}")))?;
            if slots[id.index()].replace(t).is_some() {
                return Err(Error::Format(format!("duplicate tensor {name:?}")));
            }
        }
        let tensors = slots
            .into_iter()
            .zip(ParamId::ALL)
            .map(|(t, p)| t.ok_or_else(|| Error::Format(format!("missing tensor {:?}", p.name()))))
            .collect::<Result<Vec<_>>>()?;
        Self::from_tensors(dims, tensors)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn every_param_has_one_group_and_unique_name() {
        let mut names: Vec<&str> = ParamId::ALL.iter().map(|p| p.name()).collect();
        names.sort_unstable();
        names.dedup();
        assert_eq!(names.len(), ParamId::ALL.len());
        for p in ParamId::ALL {
            assert_eq!(ParamId::from_name(p.name()), Some(*p));
            assert!(ParamGroup::ALL.contains(&p.group()));
        }
        for (i, p) in ParamId::ALL.iter().enumerate() {
            assert_eq!(p.index(), i);
        }
    }

    #[test]
    fn init_range() {
        let dims = ModelDims::new(9, 7, 4, 3).unwrap();
        let p = ModelParams::random(dims, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!(p.flatten().iter().all(|v| v.abs() < INIT_SCALE));
        assert_eq!(p.get(ParamId::OutW).shape(), &[4, 5]);
    }

    #[test]
    fn flat_round_trip() {
        let dims = ModelDims::new(6, 6, 2, 2).unwrap();
        let p = ModelParams::random(dims, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let mut q = ModelParams::zeros(dims).unwrap();
        q.set_flat(&p.flatten()).unwrap();
        assert_eq!(p, q);
        assert!(q.set_flat(&[1.0]).is_err());
    }

    #[test]
    fn tiny_vocab_rejected() {
        assert!(ModelDims::new(4, 6, 2, 2).is_err());
    }
}
