//! Graph variant: GRU history encoder, multi-head attention fusion with the
//! current sample, stacked GRU + adaptive Chebyshev layers, a residual
//! block and an output projection.
//!
//! Internally every per-node feature matrix is node-major (`N*B` rows).

use super::graph::{adjacency_var, chebyshev_conv, propagation_var, ChebShape};
use super::layers::{GruCell, Linear, StepEmbedding};
use super::PredictorConfig;
use crate::numerics::{Axis, NumericsError, ParamStore, SplitRng, Tape, Tensor, Var};

#[derive(Debug, Clone)]
struct GraphLayer {
    gru: GruCell,
    pool: usize,
    bias_pool: usize,
}

#[derive(Debug, Clone)]
struct Attention {
    key: Linear,
    value: Linear,
    out: Linear,
}

#[derive(Debug, Clone)]
pub(crate) struct SpatioTemporalNet {
    nodes: usize,
    d: usize,
    hidden: usize,
    heads: usize,
    history: usize,
    order: usize,
    embeddings: usize,
    encoder: Option<(GruCell, Attention)>,
    query: Linear,
    step: StepEmbedding,
    layers: Vec<GraphLayer>,
    res1: Linear,
    res2: Linear,
    proj1: Linear,
    proj2: Linear,
}

/// `B x (blocks*N*d)` sample-major columns to `blocks` node-major `N*B x d`
/// matrices.
fn to_node_major(x: &Tensor, nodes: usize, d: usize, blocks: usize) -> Vec<Tensor> {
    let batch = x.rows();
    (0..blocks)
        .map(|t| {
            let mut out = Vec::with_capacity(nodes * batch * d);
            for n in 0..nodes {
                for b in 0..batch {
                    let start = (t * nodes + n) * d;
                    out.extend_from_slice(&x.row_slice(b)[start..start + d]);
                }
            }
            Tensor::matrix(nodes * batch, d, out).expect("non-empty")
        })
        .collect()
}

impl SpatioTemporalNet {
    pub fn new(config: &PredictorConfig, store: &mut ParamStore, rng: &mut SplitRng) -> Result<Self, NumericsError> {
        let (n, d, h, e, k) = (config.nodes, config.d, config.hidden, config.embed_dim, config.cheb_order);
        let emb_scale = 1.0 / (e as f64).sqrt();
        let emb: Vec<f64> = rng.normals(n * e).into_iter().map(|v| v * emb_scale).collect();
        let embeddings = store.insert("node_embeddings", Tensor::matrix(n, e, emb)?)?;

        let encoder = if config.history > 0 {
            let gru = GruCell::new(store, "encoder.gru", d, h, rng)?;
            let attn = Attention {
                key: Linear::new(store, "attn.key", h, h, false, rng)?,
                value: Linear::new(store, "attn.value", h, h, false, rng)?,
                out: Linear::new(store, "attn.out", h, h, true, rng)?,
            };
            Some((gru, attn))
        } else {
            None
        };
        let query = Linear::new(store, "attn.query", d, h, true, rng)?;
        let step = StepEmbedding::new(store, "step_embedding", config.steps, h)?;

        let pool_scale = (2.0 / ((k * h + h) as f64)).sqrt();
        let mut layers = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let gru = GruCell::new(store, &format!("layer{l}.gru"), h, h, rng)?;
            let pool: Vec<f64> = rng.normals(e * k * h * h).into_iter().map(|v| v * pool_scale).collect();
            let pool = store.insert(&format!("layer{l}.weights_pool"), Tensor::matrix(e, k * h * h, pool)?)?;
            let bias_pool = store.insert_zeros(&format!("layer{l}.bias_pool"), e, h)?;
            layers.push(GraphLayer { gru, pool, bias_pool });
        }

        Ok(Self {
            nodes: n,
            d,
            hidden: h,
            heads: config.heads,
            history: config.history,
            order: k,
            embeddings,
            encoder,
            query,
            step,
            layers,
            res1: Linear::new(store, "residual.l1", h, h, true, rng)?,
            res2: Linear::new(store, "residual.l2", h, h, true, rng)?,
            proj1: Linear::new(store, "projection.l1", 2 * h, h, true, rng)?,
            proj2: Linear::new(store, "projection.l2", h, d, true, rng)?,
        })
    }

    pub fn embeddings_index(&self) -> usize {
        self.embeddings
    }

    pub fn adjacency(&self, store: &ParamStore) -> Tensor {
        super::graph::adaptive_adjacency(store.value(self.embeddings)).expect("softmax of finite logits")
    }

    fn attend(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        attn: &Attention,
        query: Var,
        states: &[Var],
    ) -> Result<Var, NumericsError> {
        let dh = self.hidden / self.heads;
        let inv_sqrt = 1.0 / (dh as f64).sqrt();
        let keys = states.iter().map(|&s| attn.key.forward(tape, store, s)).collect::<Result<Vec<_>, _>>()?;
        let values = states.iter().map(|&s| attn.value.forward(tape, store, s)).collect::<Result<Vec<_>, _>>()?;
        let mut heads = Vec::with_capacity(self.heads);
        for j in 0..self.heads {
            let q = tape.slice(query, Axis::Cols, j * dh, (j + 1) * dh)?;
            let mut scores = Vec::with_capacity(states.len());
            for &key in &keys {
                let kj = tape.slice(key, Axis::Cols, j * dh, (j + 1) * dh)?;
                let prod = tape.mul(q, kj)?;
                let dot = tape.sum(prod, Some(Axis::Cols))?;
                scores.push(tape.scale(dot, inv_sqrt)?);
            }
            let scores = if scores.len() == 1 { scores[0] } else { tape.concat(&scores, Axis::Cols)? };
            let weights = tape.softmax(scores)?;
            let mut acc: Option<Var> = None;
            for (t, &value) in values.iter().enumerate() {
                let vj = tape.slice(value, Axis::Cols, j * dh, (j + 1) * dh)?;
                let wt = tape.slice(weights, Axis::Cols, t, t + 1)?;
                let term = tape.mul(wt, vj)?;
                acc = Some(match acc {
                    Some(a) => tape.add(a, term)?,
                    None => term,
                });
            }
            heads.push(acc.expect("history is non-empty"));
        }
        let joined = if heads.len() == 1 { heads[0] } else { tape.concat(&heads, Axis::Cols)? };
        attn.out.forward(tape, store, joined)
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: &Tensor,
        hist: Option<&Tensor>,
        steps: &[usize],
    ) -> Result<Var, NumericsError> {
        let (n, batch, h) = (self.nodes, x.rows(), self.hidden);
        let rows = n * batch;
        let xk = to_node_major(x, n, self.d, 1).pop().expect("one block");
        let xk = tape.constant(xk);

        let e = tape.param(store, self.embeddings);
        let adjacency = adjacency_var(tape, e)?;
        let a_hat = propagation_var(tape, adjacency)?;

        let query = self.query.forward(tape, store, xk)?;
        let mut fused = query;
        let mut state = tape.constant(Tensor::zeros(&[rows, h]));
        if let (Some((gru, attn)), Some(hist)) = (&self.encoder, hist) {
            let mut states = Vec::with_capacity(self.history);
            for xt in to_node_major(hist, n, self.d, self.history) {
                let xt = tape.constant(xt);
                state = gru.forward(tape, store, xt, state)?;
                states.push(state);
            }
            let context = self.attend(tape, store, attn, query, &states)?;
            fused = tape.add(fused, context)?;
        }
        let node_steps: Vec<usize> = (0..n).flat_map(|_| steps.iter().copied()).collect();
        let emb = self.step.forward(tape, store, &node_steps)?;
        fused = tape.add(fused, emb)?;

        let shape = ChebShape { nodes: n, order: self.order, c_in: h, c_out: h };
        let mut feat = fused;
        for layer in &self.layers {
            state = layer.gru.forward(tape, store, feat, state)?;
            let pool = tape.param(store, layer.pool);
            let weights = tape.matmul(e, pool)?;
            let bias_pool = tape.param(store, layer.bias_pool);
            let bias = tape.matmul(e, bias_pool)?;
            let conv = chebyshev_conv(tape, state, a_hat, weights, Some(bias), shape)?;
            feat = tape.relu(conv)?;
        }

        let r = self.res1.forward(tape, store, feat)?;
        let r = tape.relu(r)?;
        let r = self.res2.forward(tape, store, r)?;
        let r = tape.add(feat, r)?;
        let z = tape.concat(&[r, fused], Axis::Cols)?;
        let z = self.proj1.forward(tape, store, z)?;
        let z = tape.relu(z)?;
        let out = self.proj2.forward(tape, store, z)?;

        if n == 1 {
            return Ok(out);
        }
        let blocks = (0..n)
            .map(|node| tape.slice(out, Axis::Rows, node * batch, (node + 1) * batch))
            .collect::<Result<Vec<_>, _>>()?;
        tape.concat(&blocks, Axis::Cols)
    }
}
