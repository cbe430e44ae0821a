//! Parametric branch: an energy model over predicted noise.
//!
//! `f` is the negative energy, so `E(eps) = -f(eps)` and high energy means
//! anomalous. Negative samples are refined with the Langevin update
//! `eps <- eps + (delta^2 / 2) grad f(eps) + delta eta`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{NumericsError, ParamSnapshot, ParamStore, SplitRng, Tape, Tensor, Var};
use crate::predictor::layers::Linear;

/// Parameter-store tag for energy-model weights.
pub const EBM_TAG: u32 = 2;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EbmError {
    #[error("noise dimension {got} does not match energy model dimension {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("Langevin iterate became non-finite at step {step}")]
    NonFiniteIterate { step: usize },
    #[error("Langevin step size must be positive, got {0}")]
    StepSize(f64),
    #[error("energy batches must be non-empty")]
    EmptyBatch,
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Anything that can supply `f` and its input gradient for a batch of rows.
pub trait EnergyFunction {
    fn dim(&self) -> usize;

    /// `f` per row and `d f / d eps` with the shape of `eps`.
    fn neg_energy_grad(&self, eps: &Tensor) -> Result<(Vec<f64>, Tensor), EbmError>;

    fn energies(&self, eps: &Tensor) -> Result<Vec<f64>, EbmError> {
        Ok(self.neg_energy_grad(eps)?.0.into_iter().map(|f| -f).collect())
    }

    fn energy(&self, eps: &[f64]) -> Result<f64, EbmError> {
        Ok(self.energies(&Tensor::row(eps))?[0])
    }
}

/// `f(eps) = -precision/2 ||eps||^2`, whose Langevin stationary law is
/// `N(0, I / precision)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadraticEnergy {
    pub dim: usize,
    pub precision: f64,
}

impl EnergyFunction for QuadraticEnergy {
    fn dim(&self) -> usize {
        self.dim
    }

    fn neg_energy_grad(&self, eps: &Tensor) -> Result<(Vec<f64>, Tensor), EbmError> {
        check_cols(eps, self.dim)?;
        let f = (0..eps.rows())
            .map(|r| -0.5 * self.precision * eps.row_slice(r).iter().map(|v| v * v).sum::<f64>())
            .collect();
        Ok((f, eps.map(|v| -self.precision * v)))
    }
}

fn check_cols(eps: &Tensor, dim: usize) -> Result<(), EbmError> {
    if eps.cols() == dim {
        Ok(())
    } else {
        Err(EbmError::Dimension { expected: dim, got: eps.cols() })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EbmConfig {
    pub hidden: usize,
    pub alpha: f64,
    pub step_size: f64,
    pub langevin_steps: usize,
}

impl Default for EbmConfig {
    fn default() -> Self {
        Self { hidden: 64, alpha: 0.1, step_size: 0.1, langevin_steps: 20 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnergyState {
    pub dim: usize,
    pub hidden: usize,
    pub params: ParamSnapshot,
}

/// `f`: `d -> hidden -> hidden -> 1` with tanh activations.
#[derive(Debug, Clone)]
pub struct EnergyModel {
    dim: usize,
    hidden: usize,
    store: ParamStore,
    layers: [Linear; 3],
}

impl EnergyModel {
    pub fn new(dim: usize, hidden: usize, rng: &mut SplitRng) -> Result<Self, EbmError> {
        let mut store = ParamStore::new(EBM_TAG);
        let layers = [
            Linear::new(&mut store, "ebm.l1", dim, hidden, true, rng)?,
            Linear::new(&mut store, "ebm.l2", hidden, hidden, true, rng)?,
            Linear::new(&mut store, "ebm.l3", hidden, 1, true, rng)?,
        ];
        Ok(Self { dim, hidden, store, layers })
    }

    pub fn from_state(state: &EnergyState) -> Result<Self, EbmError> {
        let mut model = Self::new(state.dim, state.hidden, &mut SplitRng::new(0))?;
        model.store.load(&state.params)?;
        Ok(model)
    }

    pub fn state(&self) -> EnergyState {
        EnergyState { dim: self.dim, hidden: self.hidden, params: self.store.snapshot() }
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Records `f(eps)` as a `B x 1` column.
    pub fn forward(&self, tape: &mut Tape, eps: Var) -> Result<Var, EbmError> {
        let z = self.layers[0].forward(tape, &self.store, eps)?;
        let z = tape.tanh(z)?;
        let z = self.layers[1].forward(tape, &self.store, z)?;
        let z = tape.tanh(z)?;
        Ok(self.layers[2].forward(tape, &self.store, z)?)
    }
}

impl EnergyFunction for EnergyModel {
    fn dim(&self) -> usize {
        self.dim
    }

    fn neg_energy_grad(&self, eps: &Tensor) -> Result<(Vec<f64>, Tensor), EbmError> {
        check_cols(eps, self.dim)?;
        let mut tape = Tape::new();
        let x = tape.input(eps.clone());
        let f = self.forward(&mut tape, x)?;
        let seed = Tensor::filled(&[eps.rows(), 1], 1.0);
        let grads = tape.backward(f, seed)?;
        Ok((tape.value(f).data().to_vec(), grads.wrt_or_zero(&tape, x)))
    }
}

/// Runs exactly `steps` Langevin updates from `init`, drawing `eta` from
/// `rng` row by row.
pub fn langevin_refine(
    f: &dyn EnergyFunction,
    init: &Tensor,
    steps: usize,
    delta: f64,
    rng: &mut SplitRng,
) -> Result<Tensor, EbmError> {
    if !(delta > 0.0 && delta.is_finite()) {
        return Err(EbmError::StepSize(delta));
    }
    check_cols(init, f.dim())?;
    let drift = 0.5 * delta * delta;
    let mut eps = init.clone();
    for step in 1..=steps {
        let (_, grad) = f.neg_energy_grad(&eps)?;
        for (e, g) in eps.data_mut().iter_mut().zip(grad.data()) {
            *e += drift * g + delta * rng.normal();
        }
        if !eps.is_finite() {
            return Err(EbmError::NonFiniteIterate { step });
        }
    }
    Ok(eps)
}

/// `mean(E+) - mean(E-) + alpha (mean(E+^2) + mean(E-^2))`.
pub fn ebm_loss(e_plus: &[f64], e_minus: &[f64], alpha: f64) -> Result<f64, EbmError> {
    Ok(ebm_loss_grad(e_plus, e_minus, alpha)?.0)
}

/// [`ebm_loss`] with its derivatives with respect to each energy.
pub fn ebm_loss_grad(e_plus: &[f64], e_minus: &[f64], alpha: f64) -> Result<(f64, Vec<f64>, Vec<f64>), EbmError> {
    if e_plus.is_empty() || e_minus.is_empty() {
        return Err(EbmError::EmptyBatch);
    }
    let (np, nm) = (e_plus.len() as f64, e_minus.len() as f64);
    let mean = |v: &[f64], n: f64| v.iter().sum::<f64>() / n;
    let mean_sq = |v: &[f64], n: f64| v.iter().map(|e| e * e).sum::<f64>() / n;
    let loss = mean(e_plus, np) - mean(e_minus, nm) + alpha * (mean_sq(e_plus, np) + mean_sq(e_minus, nm));
    let gp = e_plus.iter().map(|e| (1.0 + 2.0 * alpha * e) / np).collect();
    let gm = e_minus.iter().map(|e| (-1.0 + 2.0 * alpha * e) / nm).collect();
    Ok((loss, gp, gm))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::check_input;

    #[test]
    fn quadratic_energy_spot_value() {
        let q = QuadraticEnergy { dim: 2, precision: 1.0 };
        assert_eq!(q.energy(&[3.0, 4.0]).unwrap(), 12.5);
    }

    #[test]
    fn energy_is_negated_f() {
        let model = EnergyModel::new(3, 8, &mut SplitRng::new(1)).unwrap();
        let eps = Tensor::matrix(2, 3, vec![0.1, -0.5, 2.0, 1.0, 1.0, -3.0]).unwrap();
        let (f, _) = model.neg_energy_grad(&eps).unwrap();
        for (e, f) in model.energies(&eps).unwrap().iter().zip(&f) {
            assert_eq!(e + f, 0.0);
        }
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let model = EnergyModel::new(3, 8, &mut SplitRng::new(2)).unwrap();
        let eps = Tensor::matrix(2, 3, SplitRng::new(3).normals(6)).unwrap();
        let (_, grad) = model.neg_energy_grad(&eps).unwrap();
        let report = check_input(&eps, &grad, 1e-6, |x| model.neg_energy_grad(x).unwrap().0.iter().sum());
        assert!(report.passes(1e-4), "{report:?}");
    }

    #[test]
    fn parameter_gradient_matches_finite_differences() {
        let model = EnergyModel::new(2, 5, &mut SplitRng::new(4)).unwrap();
        let eps = Tensor::matrix(3, 2, SplitRng::new(5).normals(6)).unwrap();
        let mut tape = Tape::new();
        let x = tape.input(eps.clone());
        let f = model.forward(&mut tape, x).unwrap();
        let grads = tape.backward(f, Tensor::filled(&[3, 1], 1.0)).unwrap().for_store(model.params());
        let report = crate::numerics::gradcheck::check_store(model.params(), &grads, 1e-6, |store| {
            let mut probe = model.clone();
            *probe.params_mut() = store.clone();
            probe.neg_energy_grad(&eps).unwrap().0.iter().sum()
        });
        assert!(report.passes(1e-4), "{report:?}");
    }

    #[test]
    fn zero_steps_is_identity() {
        let q = QuadraticEnergy { dim: 2, precision: 1.0 };
        let init = Tensor::matrix(1, 2, vec![0.3, -2.0]).unwrap();
        assert_eq!(langevin_refine(&q, &init, 0, 0.1, &mut SplitRng::new(0)).unwrap(), init);
    }

    #[test]
    fn fixed_seed_is_bit_identical() {
        let model = EnergyModel::new(2, 4, &mut SplitRng::new(1)).unwrap();
        let init = Tensor::matrix(2, 2, vec![0.3, -2.0, 1.0, 0.0]).unwrap();
        let a = langevin_refine(&model, &init, 25, 0.1, &mut SplitRng::new(9)).unwrap();
        let b = langevin_refine(&model, &init, 25, 0.1, &mut SplitRng::new(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn langevin_rejects_bad_step_and_divergence() {
        let q = QuadraticEnergy { dim: 1, precision: 1.0 };
        let init = Tensor::row(&[1.0]);
        assert!(langevin_refine(&q, &init, 1, 0.0, &mut SplitRng::new(0)).is_err());
        // drift factor 1 - precision * delta^2 / 2 = -1e6 blows up fast
        let stiff = QuadraticEnergy { dim: 1, precision: 2e6 + 2.0 };
        let err = langevin_refine(&stiff, &init, 1000, 1.0, &mut SplitRng::new(0)).unwrap_err();
        assert!(matches!(err, EbmError::NonFiniteIterate { step } if step > 1));
    }

    #[test]
    fn quadratic_chain_stationary_variance() {
        // AR(1) with rho = 1 - delta^2/2 has stationary variance
        // delta^2 / (1 - rho^2) = 1 / (1 - delta^2/4).
        let q = QuadraticEnergy { dim: 64, precision: 1.0 };
        let mut rng = SplitRng::new(17);
        let init = Tensor::matrix(1, 64, rng.normals(64)).unwrap();
        let mut eps = init;
        let mut sum_sq = 0.0;
        let steps = 4000;
        for _ in 0..steps {
            eps = langevin_refine(&q, &eps, 1, 0.1, &mut rng).unwrap();
            sum_sq += eps.squared_norm();
        }
        let var = sum_sq / (steps * 64) as f64;
        assert!((var - 1.0 / (1.0 - 0.0025)).abs() < 0.1, "{var}");
    }

    #[test]
    fn noiseless_update_increases_f() {
        let q = QuadraticEnergy { dim: 3, precision: 1.0 };
        let x = Tensor::row(&[1.0, -2.0, 0.5]);
        let (f0, grad) = q.neg_energy_grad(&x).unwrap();
        let stepped = Tensor::row(&x.data().iter().zip(grad.data()).map(|(v, g)| v + 0.005 * g).collect::<Vec<_>>());
        assert!(q.neg_energy_grad(&stepped).unwrap().0[0] > f0[0]);
    }

    #[test]
    fn loss_examples() {
        assert_eq!(ebm_loss(&[1.0, 2.0], &[1.0, 2.0], 0.0).unwrap(), 0.0);
        assert_eq!(ebm_loss(&[1.0], &[3.0], 0.0).unwrap(), -2.0);
        assert!((ebm_loss(&[1.0], &[3.0], 0.1).unwrap() + 1.0).abs() < 1e-15);
        assert_eq!(ebm_loss(&[], &[3.0], 0.1), Err(EbmError::EmptyBatch));
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let plus = Tensor::row(&[0.5, -1.0, 2.0]);
        let minus = Tensor::row(&[1.5, 0.2]);
        let (_, gp, gm) = ebm_loss_grad(plus.data(), minus.data(), 0.1).unwrap();
        assert!(check_input(&plus, &Tensor::row(&gp), 1e-6, |p| ebm_loss(p.data(), minus.data(), 0.1).unwrap())
            .passes(1e-6));
        assert!(check_input(&minus, &Tensor::row(&gm), 1e-6, |m| ebm_loss(plus.data(), m.data(), 0.1).unwrap())
            .passes(1e-6));
    }

    #[test]
    fn state_roundtrip() {
        let model = EnergyModel::new(2, 4, &mut SplitRng::new(7)).unwrap();
        let json = serde_json::to_string(&model.state()).unwrap();
        let back = EnergyModel::from_state(&serde_json::from_str(&json).unwrap()).unwrap();
        assert_eq!(back.energy(&[0.1, 0.2]).unwrap(), model.energy(&[0.1, 0.2]).unwrap());
    }
}
