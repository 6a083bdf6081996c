//! Student initialization from the teacher, with frozen parameter groups.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelParams, ParamGroup, ParamId};
use crate::objectives::ParamMask;

/// Groups copied from the teacher by [`init_from_teacher`].
pub const COPIED_GROUPS: [ParamGroup; 4] = [
    ParamGroup::Attention,
    ParamGroup::Decoder,
    ParamGroup::TargetEmbeddings,
    ParamGroup::OutputProjection,
];

/// Frozen flag per parameter group. Serialized as a map from group name to
/// `true` (frozen) or `false` (trainable).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "BTreeMap<String, bool>", into = "BTreeMap<String, bool>")]
pub struct FreezePlan {
    frozen: BTreeMap<ParamGroup, bool>,
}

impl FreezePlan {
    /// Nothing frozen.
    pub fn none() -> Self {
        FreezePlan {
            frozen: ParamGroup::ALL.iter().map(|&g| (g, false)).collect(),
        }
    }

    pub fn with(mut self, group: ParamGroup, frozen: bool) -> Self {
        self.frozen.insert(group, frozen);
        self
    }

    pub fn is_frozen(&self, group: ParamGroup) -> bool {
        self.frozen[&group]
    }

    pub fn frozen_groups(&self) -> Vec<ParamGroup> {
        self.frozen.iter().filter(|(_, &f)| f).map(|(&g, _)| g).collect()
    }

    pub fn mask(&self) -> ParamMask {
        ParamMask::freezing(&self.frozen_groups())
    }
}

impl Default for FreezePlan {
    /// Target-side groups frozen; source embeddings, encoder and attention
    /// trained.
    fn default() -> Self {
        FreezePlan::none()
            .with(ParamGroup::Decoder, true)
            .with(ParamGroup::TargetEmbeddings, true)
            .with(ParamGroup::OutputProjection, true)
    }
}

impl TryFrom<BTreeMap<String, bool>> for FreezePlan {
    type Error = Error;

    /// Groups missing from the map are trainable.
    fn try_from(map: BTreeMap<String, bool>) -> Result<Self> {
        let mut plan = FreezePlan::none();
        for (name, frozen) in map {
            let g = ParamGroup::from_name(&name).ok_or_else(|| {
                let names: Vec<&str> = ParamGroup::ALL.iter().map(|g| g.name()).collect();
                Error::Config(format!(
                    "unknown parameter group {name:?}; expected one of {}",
                    names.join(", ")
                ))
            })?;
            plan.frozen.insert(g, frozen);
        }
        Ok(plan)
    }
}

impl From<FreezePlan> for BTreeMap<String, bool> {
    fn from(plan: FreezePlan) -> Self {
        plan.frozen
            .into_iter()
            .map(|(g, f)| (g.name().to_string(), f))
            .collect()
    }
}

/// Copies the attention, decoder, target embedding and output groups of
/// `teacher` into `student`, keeping the student's source embeddings and
/// encoder. Freezing is applied during training through [`FreezePlan::mask`].
pub fn init_from_teacher(student: &ModelParams, teacher: &ModelParams) -> Result<ModelParams> {
    let mut out = student.clone();
    for &p in ParamId::ALL {
        if !COPIED_GROUPS.contains(&p.group()) {
            continue;
        }
        let t = teacher.get(p);
        if t.shape() != student.get(p).shape() {
            return Err(Error::Config(format!(
                "cannot copy {} ({}): teacher shape {:?}, student shape {:?}",
                p.group().name(),
                p.name(),
                t.shape(),
                student.get(p).shape()
            )));
        }
        *out.get_mut(p) = t.clone();
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelDims;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model(src: usize, tgt: usize, hidden: usize, seed: u64) -> ModelParams {
        let dims = ModelDims::new(src, tgt, 3, hidden).unwrap();
        ModelParams::random(dims, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn default_plan_freezes_target_side() {
        let plan = FreezePlan::default();
        assert_eq!(
            plan.frozen_groups(),
            vec![
                ParamGroup::Decoder,
                ParamGroup::TargetEmbeddings,
                ParamGroup::OutputProjection
            ]
        );
        let mask = plan.mask();
        assert!(mask.trainable(ParamId::AttQuery));
        assert!(!mask.trainable(ParamId::OutW));
    }

    #[test]
    fn plan_serializes_as_map() {
        let json = serde_json::to_string(&FreezePlan::default()).unwrap();
        assert!(json.contains(r#""decoder":true"#) && json.contains(r#""encoder":false"#));
        let back: FreezePlan = serde_json::from_str(&json).unwrap();
        assert_eq!(back, FreezePlan::default());
        let partial: FreezePlan = serde_json::from_str(r#"{"encoder":true}"#).unwrap();
        assert_eq!(partial.frozen_groups(), vec![ParamGroup::Encoder]);
        assert!(serde_json::from_str::<FreezePlan>(r#"{"query":true}"#).is_err());
    }

    #[test]
    fn copies_target_side_and_is_idempotent() {
        let teacher = model(9, 8, 4, 1);
        let student = model(6, 8, 4, 2);
        let once = init_from_teacher(&student, &teacher).unwrap();
        for &p in ParamId::ALL {
            let expected = if COPIED_GROUPS.contains(&p.group()) {
                &teacher
            } else {
                &student
            };
            assert_eq!(once.get(p), expected.get(p), "{}", p.name());
        }
        assert_eq!(init_from_teacher(&once, &teacher).unwrap(), once);
    }

    #[test]
    fn mismatch_names_group() {
        let err = init_from_teacher(&model(6, 8, 4, 2), &model(9, 8, 5, 1)).unwrap_err();
        assert!(err.to_string().contains("attention"), "{err}");
        let err = init_from_teacher(&model(6, 8, 4, 2), &model(9, 7, 4, 1)).unwrap_err();
        assert!(
            err.to_string().contains("target_embeddings") || err.to_string().contains("output"),
            "{err}"
        );
    }
}
