//! Flat baseline: `concat(x_k, x_hist, emb(k))` through three dense layers.

use super::layers::{Linear, StepEmbedding};
use super::PredictorConfig;
use crate::numerics::{Axis, NumericsError, ParamStore, SplitRng, Tape, Tensor, Var};

#[derive(Debug, Clone)]
pub(crate) struct MlpNet {
    embedding: StepEmbedding,
    l1: Linear,
    l2: Linear,
    l3: Linear,
}

impl MlpNet {
    pub fn new(config: &PredictorConfig, store: &mut ParamStore, rng: &mut SplitRng) -> Result<Self, NumericsError> {
        let width = config.width();
        let h = config.hidden;
        let input = width * (1 + config.history) + h;
        Ok(Self {
            embedding: StepEmbedding::new(store, "step_embedding", config.steps, h)?,
            l1: Linear::new(store, "mlp.l1", input, h, true, rng)?,
            l2: Linear::new(store, "mlp.l2", h, h, true, rng)?,
            l3: Linear::new(store, "mlp.l3", h, width, true, rng)?,
        })
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: &Tensor,
        hist: Option<&Tensor>,
        steps: &[usize],
    ) -> Result<Var, NumericsError> {
        let mut parts = vec![tape.constant(x.clone())];
        if let Some(h) = hist {
            parts.push(tape.constant(h.clone()));
        }
        parts.push(self.embedding.forward(tape, store, steps)?);
        let z = tape.concat(&parts, Axis::Cols)?;
        let z = self.l1.forward(tape, store, z)?;
        let z = tape.relu(z)?;
        let z = self.l2.forward(tape, store, z)?;
        let z = tape.relu(z)?;
        self.l3.forward(tape, store, z)
    }
}
