//! Noise predictor `eps_theta(x_k, k, x_hist)`.
//!
//! Both variants take a batch of flattened samples `x_k` (`B x N*d`, node
//! `n` occupying columns `n*d..(n+1)*d`) and an optional history batch
//! (`B x H*N*d`, oldest step first), and return a `B x N*d` noise estimate.

mod graph;
pub(crate) mod layers;
mod mlp;
mod spatiotemporal;

pub use graph::{adaptive_adjacency, adjacency_var, chebyshev_conv, chebyshev_conv_tensor, propagation_var, ChebShape};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{NumericsError, ParamSnapshot, ParamStore, SplitRng, Tape, Tensor, Var};

use mlp::MlpNet;
use spatiotemporal::SpatioTemporalNet;

/// Parameter-store tag for predictor weights.
pub const PREDICTOR_TAG: u32 = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PredictorError {
    #[error("invalid predictor config: {0}")]
    Config(String),
    #[error("diffusion step {k} outside 0..{steps}")]
    StepOutOfRange { k: usize, steps: usize },
    #[error("{what}: expected {expected:?}, got {got:?}")]
    Shape { what: &'static str, expected: Vec<usize>, got: Vec<usize> },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Mlp,
    Spatiotemporal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictorConfig {
    pub variant: Variant,
    /// Features per node.
    pub d: usize,
    pub nodes: usize,
    pub history: usize,
    pub hidden: usize,
    pub embed_dim: usize,
    pub cheb_order: usize,
    pub heads: usize,
    pub layers: usize,
    /// Number of diffusion steps `T`; sizes the timestep embedding.
    pub steps: usize,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Mlp,
            d: 1,
            nodes: 1,
            history: 16,
            hidden: 64,
            embed_dim: 16,
            cheb_order: 2,
            heads: 2,
            layers: 2,
            steps: 1000,
        }
    }
}

impl PredictorConfig {
    /// Flattened width of one sample.
    pub fn width(&self) -> usize {
        self.nodes * self.d
    }

    pub fn validate(&self) -> Result<(), PredictorError> {
        let bad = |msg: &str| Err(PredictorError::Config(msg.to_string()));
        if self.d == 0 || self.nodes == 0 {
            return bad("d and nodes must be at least 1");
        }
        if self.hidden == 0 || self.steps == 0 {
            return bad("hidden and steps must be at least 1");
        }
        if self.variant == Variant::Spatiotemporal {
            if self.heads == 0 || self.hidden % self.heads != 0 {
                return bad("hidden must be divisible by heads");
            }
            if self.cheb_order == 0 {
                return bad("cheb_order must be at least 1");
            }
            if self.embed_dim == 0 {
                return bad("embed_dim must be at least 1");
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
enum Net {
    Mlp(MlpNet),
    SpatioTemporal(SpatioTemporalNet),
}

/// Serialisable predictor state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictorState {
    pub config: PredictorConfig,
    pub params: ParamSnapshot,
}

#[derive(Debug, Clone)]
pub struct NoisePredictor {
    config: PredictorConfig,
    store: ParamStore,
    net: Net,
}

impl NoisePredictor {
    pub fn new(config: PredictorConfig, rng: &mut SplitRng) -> Result<Self, PredictorError> {
        config.validate()?;
        let mut store = ParamStore::new(PREDICTOR_TAG);
        let net = match config.variant {
            Variant::Mlp => Net::Mlp(MlpNet::new(&config, &mut store, rng)?),
            Variant::Spatiotemporal => Net::SpatioTemporal(SpatioTemporalNet::new(&config, &mut store, rng)?),
        };
        Ok(Self { config, store, net })
    }

    pub fn from_state(state: &PredictorState) -> Result<Self, PredictorError> {
        let mut model = Self::new(state.config.clone(), &mut SplitRng::new(0))?;
        model.store.load(&state.params)?;
        Ok(model)
    }

    pub fn state(&self) -> PredictorState {
        PredictorState { config: self.config.clone(), params: self.store.snapshot() }
    }

    pub fn config(&self) -> &PredictorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn check(&self, x: &Tensor, hist: Option<&Tensor>, steps: &[usize]) -> Result<(), PredictorError> {
        let width = self.config.width();
        let batch = x.rows();
        if x.dims2() != Some((batch, width)) {
            return Err(PredictorError::Shape { what: "x_k", expected: vec![batch, width], got: x.shape().to_vec() });
        }
        if steps.len() != batch {
            return Err(PredictorError::Shape { what: "steps", expected: vec![batch], got: vec![steps.len()] });
        }
        if let Some(&k) = steps.iter().find(|&&k| k >= self.config.steps) {
            return Err(PredictorError::StepOutOfRange { k, steps: self.config.steps });
        }
        let hist_width = self.config.history * width;
        match hist {
            None if hist_width == 0 => Ok(()),
            Some(h) if hist_width > 0 && h.dims2() == Some((batch, hist_width)) => Ok(()),
            other => Err(PredictorError::Shape {
                what: "x_hist",
                expected: vec![batch, hist_width],
                got: other.map(|h| h.shape().to_vec()).unwrap_or_default(),
            }),
        }
    }

    /// Records the forward pass on `tape` and returns the `B x N*d` output.
    pub fn forward(
        &self,
        tape: &mut Tape,
        x: &Tensor,
        hist: Option<&Tensor>,
        steps: &[usize],
    ) -> Result<Var, PredictorError> {
        self.check(x, hist, steps)?;
        let out = match &self.net {
            Net::Mlp(net) => net.forward(tape, &self.store, x, hist, steps)?,
            Net::SpatioTemporal(net) => net.forward(tape, &self.store, x, hist, steps)?,
        };
        Ok(out)
    }

    pub fn predict(&self, x: &Tensor, hist: Option<&Tensor>, steps: &[usize]) -> Result<Tensor, PredictorError> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, x, hist, steps)?;
        Ok(tape.value(out).clone())
    }

    /// Current adaptive adjacency; `None` for the MLP variant.
    pub fn adjacency(&self) -> Option<Tensor> {
        match &self.net {
            Net::Mlp(_) => None,
            Net::SpatioTemporal(net) => Some(net.adjacency(&self.store)),
        }
    }

    /// Index of the node-embedding matrix in [`Self::params`], if any.
    pub fn node_embedding_param(&self) -> Option<usize> {
        match &self.net {
            Net::Mlp(_) => None,
            Net::SpatioTemporal(net) => Some(net.embeddings_index()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck;

    fn tiny(variant: Variant) -> PredictorConfig {
        PredictorConfig {
            variant,
            d: 2,
            nodes: 3,
            history: 3,
            hidden: 4,
            embed_dim: 2,
            cheb_order: 2,
            heads: 2,
            layers: 2,
            steps: 10,
        }
    }

    fn batch(config: &PredictorConfig, b: usize, rng: &mut SplitRng) -> (Tensor, Tensor) {
        let w = config.width();
        let x = Tensor::matrix(b, w, rng.normals(b * w)).unwrap();
        let h = Tensor::matrix(b, config.history * w, rng.normals(b * config.history * w)).unwrap();
        (x, h)
    }

    #[test]
    fn output_shape_matches_input() {
        for variant in [Variant::Mlp, Variant::Spatiotemporal] {
            let config = tiny(variant);
            let mut rng = SplitRng::new(3);
            let model = NoisePredictor::new(config.clone(), &mut rng).unwrap();
            let (x, h) = batch(&config, 5, &mut rng);
            let out = model.predict(&x, Some(&h), &[0, 1, 2, 3, 9]).unwrap();
            assert_eq!(out.shape(), x.shape());
        }
    }

    #[test]
    fn no_history_is_supported() {
        for variant in [Variant::Mlp, Variant::Spatiotemporal] {
            let config = PredictorConfig { history: 0, ..tiny(variant) };
            let mut rng = SplitRng::new(4);
            let model = NoisePredictor::new(config.clone(), &mut rng).unwrap();
            let (x, h) = batch(&PredictorConfig { history: 1, ..config.clone() }, 2, &mut rng);
            assert_eq!(model.predict(&x, None, &[1, 1]).unwrap().shape(), x.shape());
            assert!(model.predict(&x, Some(&h), &[1, 1]).is_err());
        }
    }

    #[test]
    fn repeated_calls_are_identical() {
        for variant in [Variant::Mlp, Variant::Spatiotemporal] {
            let config = tiny(variant);
            let a = NoisePredictor::new(config.clone(), &mut SplitRng::new(11)).unwrap();
            let b = NoisePredictor::new(config.clone(), &mut SplitRng::new(11)).unwrap();
            let (x, h) = batch(&config, 2, &mut SplitRng::new(5));
            let first = a.predict(&x, Some(&h), &[4, 7]).unwrap();
            assert_eq!(first, a.predict(&x, Some(&h), &[4, 7]).unwrap());
            assert_eq!(first, b.predict(&x, Some(&h), &[4, 7]).unwrap());
        }
    }

    #[test]
    fn rows_are_independent_of_batch_composition() {
        let config = tiny(Variant::Spatiotemporal);
        let mut rng = SplitRng::new(8);
        let model = NoisePredictor::new(config.clone(), &mut rng).unwrap();
        let (x, h) = batch(&config, 3, &mut rng);
        let full = model.predict(&x, Some(&h), &[1, 2, 3]).unwrap();
        let x1 = Tensor::row(x.row_slice(1));
        let h1 = Tensor::row(h.row_slice(1));
        let single = model.predict(&x1, Some(&h1), &[2]).unwrap();
        for (a, b) in single.data().iter().zip(full.row_slice(1)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn invalid_inputs_rejected() {
        let config = tiny(Variant::Mlp);
        let mut rng = SplitRng::new(1);
        let model = NoisePredictor::new(config.clone(), &mut rng).unwrap();
        let (x, h) = batch(&config, 1, &mut rng);
        assert!(matches!(
            model.predict(&x, Some(&h), &[10]),
            Err(PredictorError::StepOutOfRange { k: 10, steps: 10 })
        ));
        assert!(model.predict(&x, None, &[0]).is_err());
        assert!(model.predict(&x, Some(&h), &[0, 1]).is_err());
        let bad = PredictorConfig { hidden: 5, ..tiny(Variant::Spatiotemporal) };
        assert!(NoisePredictor::new(bad, &mut rng).is_err());
        let bad = PredictorConfig { cheb_order: 0, ..tiny(Variant::Spatiotemporal) };
        assert!(NoisePredictor::new(bad, &mut rng).is_err());
    }

    #[test]
    fn state_roundtrip_reproduces_outputs() {
        let config = tiny(Variant::Spatiotemporal);
        let mut rng = SplitRng::new(21);
        let model = NoisePredictor::new(config.clone(), &mut rng).unwrap();
        let json = serde_json::to_string(&model.state()).unwrap();
        let back = NoisePredictor::from_state(&serde_json::from_str(&json).unwrap()).unwrap();
        let (x, h) = batch(&config, 2, &mut rng);
        assert_eq!(model.predict(&x, Some(&h), &[3, 5]).unwrap(), back.predict(&x, Some(&h), &[3, 5]).unwrap());
    }

    #[test]
    fn adjacency_rows_sum_to_one() {
        let mut rng = SplitRng::new(2);
        let model = NoisePredictor::new(tiny(Variant::Spatiotemporal), &mut rng).unwrap();
        let a = model.adjacency().unwrap();
        assert_eq!(a.shape(), &[3, 3]);
        for i in 0..3 {
            assert!((a.row_slice(i).iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        assert!(NoisePredictor::new(tiny(Variant::Mlp), &mut rng).unwrap().adjacency().is_none());
    }

    fn permute_nodes(t: &Tensor, perm: &[usize], d: usize) -> Tensor {
        let w = perm.len() * d;
        let mut out = t.clone();
        for r in 0..t.rows() {
            for block in 0..t.cols() / w {
                for (new, &old) in perm.iter().enumerate() {
                    for i in 0..d {
                        out.data_mut()[r * t.cols() + block * w + new * d + i] =
                            t.get(r, block * w + old * d + i);
                    }
                }
            }
        }
        out
    }

    #[test]
    fn node_permutation_permutes_output() {
        let config = tiny(Variant::Spatiotemporal);
        let mut rng = SplitRng::new(31);
        let model = NoisePredictor::new(config.clone(), &mut rng).unwrap();
        let (x, h) = batch(&config, 2, &mut rng);
        let perm = [2, 0, 1];
        let mut permuted = model.clone();
        let idx = permuted.node_embedding_param().unwrap();
        let e = permuted.params().value(idx).clone();
        *permuted.params_mut().value_mut(idx) = permute_nodes(&e.reshaped(vec![1, 3 * 2]).unwrap(), &perm, 2)
            .reshaped(vec![3, 2])
            .unwrap();
        let out = model.predict(&x, Some(&h), &[1, 6]).unwrap();
        let out_p = permuted
            .predict(&permute_nodes(&x, &perm, 2), Some(&permute_nodes(&h, &perm, 2)), &[1, 6])
            .unwrap();
        let expected = permute_nodes(&out, &perm, 2);
        for (a, b) in out_p.data().iter().zip(expected.data()) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }

    fn squared_output(model: &NoisePredictor, store: &ParamStore, x: &Tensor, h: &Tensor, steps: &[usize]) -> f64 {
        let mut probe = model.clone();
        *probe.params_mut() = store.clone();
        probe.predict(x, Some(h), steps).unwrap().squared_norm()
    }

    #[test]
    fn full_model_gradients_match_finite_differences() {
        for variant in [Variant::Mlp, Variant::Spatiotemporal] {
            let config = tiny(variant);
            let mut rng = SplitRng::new(13);
            let mut model = NoisePredictor::new(config.clone(), &mut rng).unwrap();
            // Zero biases put relu inputs exactly on the kink; move off it.
            for p in 0..model.params().len() {
                for v in model.params_mut().value_mut(p).data_mut() {
                    *v += 0.1 * rng.normal();
                }
            }
            let (x, h) = batch(&config, 2, &mut rng);
            let steps = [2, 5];
            let mut tape = Tape::new();
            let out = model.forward(&mut tape, &x, Some(&h), &steps).unwrap();
            let loss = tape.squared_l2(out).unwrap();
            let grads = tape.backward(loss, Tensor::scalar(1.0)).unwrap().for_store(model.params());
            let report = gradcheck::check_store(model.params(), &grads, 1e-6, |s| squared_output(&model, s, &x, &h, &steps));
            assert!(report.passes(1e-4), "{variant:?}: {report:?}");
        }
    }
}
