use super::params::ParamStore;
use super::tensor::Tensor;
use super::NumericsError;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam state for one [`ParamStore`]; moments start at zero.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        let zeros = || (0..store.len()).map(|i| Tensor::zeros(store.value(i).shape())).collect();
        Self { config, step: 0, m: zeros(), v: zeros() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, index: usize) -> &Tensor {
        &self.m[index]
    }

    /// Applies one bias-corrected update. A non-finite gradient aborts
    /// before any parameter is touched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor]) -> Result<(), NumericsError> {
        if grads.len() != store.len() {
            return Err(NumericsError::ParamCount { expected: store.len(), got: grads.len() });
        }
        for (i, g) in grads.iter().enumerate() {
            if g.shape() != store.value(i).shape() {
                return Err(NumericsError::UnknownParam(store.name(i).to_string()));
            }
            if !g.is_finite() {
                return Err(NumericsError::NonFiniteGradient { param: store.name(i).to_string(), step: self.step + 1 });
            }
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for (i, g) in grads.iter().enumerate() {
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let p = store.value_mut(i).data_mut();
            for j in 0..g.len() {
                let gj = g.data()[j];
                m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
                v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                p[j] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(values: &[f64]) -> ParamStore {
        let mut s = ParamStore::new(0);
        s.insert("x", Tensor::row(values)).unwrap();
        s
    }

    #[test]
    fn zero_gradient_leaves_params_and_decays_moments() {
        let mut store = store_with(&[1.0, -2.0]);
        let mut adam = Adam::new(AdamConfig::default(), &store);
        adam.step(&mut store, &[Tensor::row(&[0.5, 0.5])]).unwrap();
        let m_before = adam.first_moment(0).clone();
        adam.step(&mut store, &[Tensor::row(&[0.0, 0.0])]).unwrap();
        for (a, b) in adam.first_moment(0).data().iter().zip(m_before.data()) {
            assert!((a - 0.9 * b).abs() < 1e-15);
        }

        let mut fresh = store_with(&[1.0, -2.0]);
        let mut adam = Adam::new(AdamConfig::default(), &fresh);
        adam.step(&mut fresh, &[Tensor::row(&[0.0, 0.0])]).unwrap();
        assert_eq!(fresh.value(0).data(), &[1.0, -2.0]);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut store = store_with(&[0.0, 0.0, 0.0]);
        let cfg = AdamConfig { lr: 0.01, ..Default::default() };
        let mut adam = Adam::new(cfg, &store);
        adam.step(&mut store, &[Tensor::row(&[3.0, -0.2, 1e-3])]).unwrap();
        let p = store.value(0).data();
        assert!((p[0] + 0.01).abs() < 1e-6);
        assert!((p[1] - 0.01).abs() < 1e-6);
        assert!((p[2] + 0.01).abs() < 1e-4);
    }

    #[test]
    fn quadratic_bowl_converges() {
        let mut store = store_with(&[1.0, 1.0]);
        let cfg = AdamConfig { lr: 0.05, ..Default::default() };
        let mut adam = Adam::new(cfg, &store);
        for _ in 0..200 {
            let g = store.value(0).map(|x| 2.0 * x);
            adam.step(&mut store, &[g]).unwrap();
        }
        let norm = store.value(0).squared_norm().sqrt();
        assert!(norm < 1e-2, "norm {norm}");
    }

    #[test]
    fn non_finite_gradient_is_rejected_without_update() {
        let mut store = store_with(&[1.0]);
        let mut adam = Adam::new(AdamConfig::default(), &store);
        let err = adam.step(&mut store, &[Tensor::row(&[f64::NAN])]).unwrap_err();
        assert!(matches!(err, NumericsError::NonFiniteGradient { .. }));
        assert_eq!(store.value(0).data(), &[1.0]);
        assert_eq!(adam.steps_taken(), 0);
    }
}
