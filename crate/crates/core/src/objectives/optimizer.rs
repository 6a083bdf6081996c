use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{read_tensors, write_tensors, ModelParams, ParamId};
use crate::tensor::Tensor;

use super::{ParamGrads, ParamMask};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub clip: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            lr: 1e-3,
            clip: 1.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.clip > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if !ok {
            return Err(Error::Config(format!("invalid optimizer settings {self:?}")));
        }
        Ok(())
    }
}

/// Adam moments with global-norm clipping.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub config: OptimizerConfig,
    pub step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl OptimizerState {
    pub fn new(params: &ModelParams, config: OptimizerConfig) -> Result<Self> {
        config.validate()?;
        let zeros: Vec<Tensor> = params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Ok(OptimizerState {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        })
    }

    pub fn first_moment(&self, p: ParamId) -> &Tensor {
        &self.m[p.index()]
    }

    pub fn second_moment(&self, p: ParamId) -> &Tensor {
        &self.v[p.index()]
    }

    /// Clips `grads` to the configured global norm and applies one update to
    /// every trainable parameter that received a gradient.
    pub fn step(&mut self, params: &mut ModelParams, grads: &ParamGrads, mask: &ParamMask) -> Result<()> {
        for &p in ParamId::ALL.iter() {
            if let Some(g) = grads.get(p) {
                if g.shape() != params.get(p).shape() {
                    return Err(Error::Dimension {
                        op: p.name(),
                        lhs: g.shape().to_vec(),
                        rhs: params.get(p).shape().to_vec(),
                    });
                }
                if !g.is_finite() {
                    return Err(Error::Numeric(format!("non-finite gradient for {}", p.name())));
                }
            }
        }
        let c = self.config;
        let norm = grads.global_norm();
        let factor = if norm > c.clip { c.clip / norm } else { 1.0 };
        self.step += 1;
        let t = self.step as i32;
        let correct1 = 1.0 - c.beta1.powi(t);
        let correct2 = 1.0 - c.beta2.powi(t);
        for &p in ParamId::ALL.iter() {
            let Some(g) = grads.get(p) else { continue };
            if !mask.trainable(p) {
                continue;
            }
            let i = p.index();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let w = params.get_mut(p).data_mut();
            for j in 0..w.len() {
                let gj = g.data()[j] * factor;
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * gj;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * gj * gj;
                let m_hat = m[j] / correct1;
                let v_hat = v[j] / correct2;
                w[j] -= c.lr * m_hat / (v_hat.sqrt() + c.eps);
            }
        }
        Ok(())
    }

    /// Saves moments and the step count; the configuration lives in the run
    /// config.
    pub fn save(&self, path: &Path, params: &ModelParams) -> Result<()> {
        let names: Vec<String> = ParamId::ALL
            .iter()
            .flat_map(|p| [format!("m/{}", p.name()), format!("v/{}", p.name())])
            .collect();
        let step = Tensor::scalar(self.step as f64);
        let mut named: Vec<(&str, &Tensor)> = Vec::new();
        for (i, _) in ParamId::ALL.iter().enumerate() {
            named.push((&names[2 * i], &self.m[i]));
            named.push((&names[2 * i + 1], &self.v[i]));
        }
        named.push(("step", &step));
        write_tensors(path, params.dims(), &named)
    }

    pub fn load(path: &Path, params: &ModelParams, config: OptimizerConfig) -> Result<Self> {
        let (dims, named) = read_tensors(path)?;
        if dims != *params.dims() {
            return Err(Error::Format(format!(
                "optimizer state is for {dims:?}, model is {:?}",
                params.dims()
            )));
        }
        let mut state = Self::new(params, config)?;
        let mut seen = 0;
        for (name, t) in named {
            if name == "step" {
                state.step = t.item()? as u64;
                seen += 1;
                continue;
            }
            let (kind, pname) = name
                .split_once('/')
                .ok_or_else(|| Error::Format(format!("unknown tensor {name:?}")))?;
            let p = ParamId::from_name(pname).ok_or_else(|| Error::Format(format!("unknown tensor {name:?}")))?;
            if t.shape() != params.get(p).shape() {
                return Err(Error::Format(format!("moment {name:?} has shape {:?}", t.shape())));
            }
            match kind {
                "m" => state.m[p.index()] = t,
                "v" => state.v[p.index()] = t,
                _ => return Err(Error::Format(format!("unknown tensor {name:?}"))),
            }
            seen += 1;
        }
        if seen != 2 * ParamId::ALL.len() + 1 {
            return Err(Error::Format(format!("optimizer state has {seen} tensors")));
        }
        Ok(state)
    }
}
