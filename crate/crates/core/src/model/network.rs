//! Forward computation of the translation model on an autodiff tape.

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::vocab::{output_index, BOS, EOS};

use super::{ModelDims, ModelParams, ParamId};

/// Parameter leaves registered on a graph, indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound {
    ids: Vec<NodeId>,
}

impl Bound {
    pub fn node(&self, p: ParamId) -> NodeId {
        self.ids[p.index()]
    }
}

/// Registers every parameter as a borrowed leaf. `trainable` decides which
/// leaves receive gradients.
pub fn bind<'a>(g: &mut Graph<'a>, params: &'a ModelParams, trainable: impl Fn(ParamId) -> bool) -> Bound {
    let ids = ParamId::ALL
        .iter()
        .map(|&p| g.leaf_ref(params.get(p), trainable(p)))
        .collect();
    Bound { ids }
}

/// Encoder outputs as graph nodes.
#[derive(Clone, Copy, Debug)]
pub struct EncodedNodes {
    pub annotations: NodeId,
    pub keys: NodeId,
    pub init_state: NodeId,
    pub len: usize,
}

/// Model equations over a bound parameter set.
pub struct Network<'g, 'a> {
    pub graph: &'g mut Graph<'a>,
    pub bound: &'g Bound,
    pub dims: ModelDims,
}

impl<'g, 'a> Network<'g, 'a> {
    pub fn new(graph: &'g mut Graph<'a>, bound: &'g Bound, dims: ModelDims) -> Self {
        Network { graph, bound, dims }
    }

    fn p(&self, id: ParamId) -> NodeId {
        self.bound.node(id)
    }

    /// One GRU transition. `x_proj` already holds `x W + b` for all three
    /// gates (update, reset, candidate).
    fn gru(&mut self, x_proj: NodeId, h: NodeId, recurrent: ParamId) -> Result<NodeId> {
        let hd = self.dims.hidden;
        let g = &mut *self.graph;
        let h_proj = g.matmul(h, self.bound.node(recurrent))?;
        let x_gates = g.slice_cols(x_proj, 0, 2 * hd)?;
        let h_gates = g.slice_cols(h_proj, 0, 2 * hd)?;
        let pre = g.add(x_gates, h_gates)?;
        let gates = g.sigmoid(pre)?;
        let update = g.slice_cols(gates, 0, hd)?;
        let reset = g.slice_cols(gates, hd, 2 * hd)?;
        let x_cand = g.slice_cols(x_proj, 2 * hd, 3 * hd)?;
        let h_cand = g.slice_cols(h_proj, 2 * hd, 3 * hd)?;
        let gated = g.mul(reset, h_cand)?;
        let pre_cand = g.add(x_cand, gated)?;
        let cand = g.tanh(pre_cand)?;
        // h' = cand + update * (h - cand)
        let diff = g.sub(h, cand)?;
        let keep = g.mul(update, diff)?;
        g.add(cand, keep)
    }

    fn run_direction(&mut self, x_proj: NodeId, order: &[usize], u: ParamId, b: ParamId) -> Result<Vec<NodeId>> {
        let zero = self.graph.constant(Tensor::zeros(&[1, self.dims.hidden]));
        let mut h = zero;
        let mut states = vec![zero; order.len()];
        for &pos in order {
            let row = self.graph.gather_rows(x_proj, &[pos])?;
            let with_bias = self.graph.add(row, self.p(b))?;
            h = self.gru(with_bias, h, u)?;
            states[pos] = h;
        }
        Ok(states)
    }

    /// Bidirectional annotations `[n x 2H]`, attention keys and the initial
    /// decoder state.
    pub fn encode(&mut self, source: &[u32]) -> Result<EncodedNodes> {
        if source.is_empty() {
            return Err(Error::Contract("cannot encode an empty source sentence".into()));
        }
        let n = source.len();
        let ids: Vec<usize> = source.iter().map(|&t| t as usize).collect();
        let emb = self.graph.gather_rows(self.p(ParamId::SrcEmb), &ids)?;
        let fwd_proj = self.graph.matmul(emb, self.p(ParamId::EncFwdW))?;
        let bwd_proj = self.graph.matmul(emb, self.p(ParamId::EncBwdW))?;
        let forward_order: Vec<usize> = (0..n).collect();
        let backward_order: Vec<usize> = (0..n).rev().collect();
        let fwd = self.run_direction(fwd_proj, &forward_order, ParamId::EncFwdU, ParamId::EncFwdB)?;
        let bwd = self.run_direction(bwd_proj, &backward_order, ParamId::EncBwdU, ParamId::EncBwdB)?;
        let rows = fwd
            .iter()
            .zip(&bwd)
            .map(|(&f, &b)| self.graph.concat_cols(&[f, b]))
            .collect::<Result<Vec<_>>>()?;
        let annotations = self.graph.concat_rows(&rows)?;
        let keys = self.graph.matmul(annotations, self.p(ParamId::AttKey))?;
        let mean_weights = self.graph.constant(Tensor::row(&vec![1.0 / n as f64; n]));
        let mean = self.graph.matmul(mean_weights, annotations)?;
        let init_proj = self.graph.matmul(mean, self.p(ParamId::DecInitW))?;
        let init_pre = self.graph.add(init_proj, self.p(ParamId::DecInitB))?;
        let init_state = self.graph.tanh(init_pre)?;
        Ok(EncodedNodes {
            annotations,
            keys,
            init_state,
            len: n,
        })
    }

    /// One decoder transition: attends with the previous state, feeds the
    /// previous word and context to the GRU, and returns `(logits, state)`.
    /// Logits cover the output space (target ids `EOS..V`).
    pub fn decoder_step(&mut self, enc: &EncodedNodes, prev_token: u32, state: NodeId) -> Result<(NodeId, NodeId)> {
        let g = &mut *self.graph;
        let b = self.bound;
        let query = g.matmul(state, b.node(ParamId::AttQuery))?;
        let query = g.add(query, b.node(ParamId::AttBias))?;
        let tiled = g.repeat_rows(query, enc.len)?;
        let pre = g.add(tiled, enc.keys)?;
        let energy = g.tanh(pre)?;
        let scores = g.matmul(energy, b.node(ParamId::AttScore))?;
        let scores = g.reshape(scores, &[1, enc.len])?;
        let alpha = g.softmax(scores)?;
        let context = g.matmul(alpha, enc.annotations)?;

        let emb = g.gather_rows(b.node(ParamId::TgtEmb), &[prev_token as usize])?;
        let input = g.concat_cols(&[emb, context])?;
        let x_proj = g.matmul(input, b.node(ParamId::DecW))?;
        let x_proj = g.add(x_proj, b.node(ParamId::DecB))?;
        let next = self.gru(x_proj, state, ParamId::DecU)?;

        let g = &mut *self.graph;
        let r_state = g.matmul(next, b.node(ParamId::ReadoutState))?;
        let r_emb = g.matmul(emb, b.node(ParamId::ReadoutEmb))?;
        let r_ctx = g.matmul(context, b.node(ParamId::ReadoutCtx))?;
        let r = g.add(r_state, r_emb)?;
        let r = g.add(r, r_ctx)?;
        let r = g.add(r, b.node(ParamId::ReadoutB))?;
        let readout = g.tanh(r)?;
        let logits = g.matmul(readout, b.node(ParamId::OutW))?;
        let logits = g.add(logits, b.node(ParamId::OutB))?;
        Ok((logits, next))
    }

    /// Teacher-forced logits `[(|y|+1) x O]` for target `y` followed by EOS.
    pub fn forced_logits(&mut self, source: &[u32], target: &[u32]) -> Result<NodeId> {
        let enc = self.encode(source)?;
        let mut state = enc.init_state;
        let mut prev = BOS;
        let mut rows = Vec::with_capacity(target.len() + 1);
        for &tok in target.iter().chain(std::iter::once(&EOS)) {
            let (logits, next) = self.decoder_step(&enc, prev, state)?;
            rows.push(logits);
            state = next;
            prev = tok;
        }
        self.graph.concat_rows(&rows)
    }

    /// `-sum(weights * log_softmax(logits))` along the teacher-forced path of
    /// `target`. `weights` is `[(|y|+1) x O]`: one-hot rows give the negative
    /// log-likelihood, teacher distributions give the word-level
    /// cross-entropy.
    pub fn weighted_nll(&mut self, source: &[u32], target: &[u32], weights: Tensor) -> Result<NodeId> {
        let logits = self.forced_logits(source, target)?;
        if weights.shape() != self.graph.value(logits).shape() {
            return Err(Error::Dimension {
                op: "weighted_nll",
                lhs: weights.shape().to_vec(),
                rhs: self.graph.value(logits).shape().to_vec(),
            });
        }
        let log_probs = self.graph.log_softmax(logits)?;
        let w = self.graph.constant(weights);
        let prod = self.graph.mul(w, log_probs)?;
        let total = self.graph.sum(prod)?;
        self.graph.scale(total, -1.0)
    }
}

/// One-hot rows selecting `target` then EOS in the output space.
pub fn one_hot_targets(target: &[u32], output_size: usize, weight: f64) -> Result<Tensor> {
    let rows = target.len() + 1;
    let mut data = vec![0.0; rows * output_size];
    for (j, &tok) in target.iter().chain(std::iter::once(&EOS)).enumerate() {
        if tok < EOS || output_index(tok) >= output_size {
            return Err(Error::Index {
                id: tok as usize,
                len: output_size + 2,
            });
        }
        data[j * output_size + output_index(tok)] = weight;
    }
    Tensor::new(&[rows, output_size], data)
}
