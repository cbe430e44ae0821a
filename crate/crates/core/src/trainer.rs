//! Cooperative training of the noise predictor with a scoring branch.
//!
//! Each iteration draws a batch of windows, a step `k` and noise `eps` per
//! window, and minimises `L_DM + lambda * L_branch` with Adam:
//!
//! * `L_DM` is the mean squared error of `eps_theta(x_k, k, x_hist)`;
//! * positives are `eps_theta(x0, 0, x_hist)`, negatives `eps_theta(x_k, 0,
//!   x_hist)`;
//! * the nonparametric branch uses the margin loss against the memory bank
//!   and then pushes the positives into the bank;
//! * the parametric branch refines negatives with Langevin steps (treated as
//!   constants) and uses the regularised contrastive energy loss. The energy
//!   model itself is updated on the unweighted branch loss.

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::WindowSet;
use crate::diffusion::{DiffusionError, NoiseSchedule, ScheduleConfig};
use crate::numerics::{Adam, AdamConfig, NumericsError, SplitRng, Tape, Tensor};
use crate::predictor::{NoisePredictor, PredictorConfig, PredictorError, PredictorState};
use crate::scoring_np::{np_training_loss, IsolationForest, MemoryBank, NpBranch, NpConfig, NpError, Surrogate};
use crate::scoring_p::{ebm_loss_grad, langevin_refine, EbmConfig, EbmError, EnergyFunction, EnergyModel, EnergyState};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrainError {
    #[error("training set is empty")]
    EmptyDataset,
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("non-finite loss at iteration {iteration}")]
    NonFiniteLoss { iteration: usize },
    #[error("iteration {iteration}: {source}")]
    Numerics { iteration: usize, source: NumericsError },
    #[error(transparent)]
    Predictor(#[from] PredictorError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Np(#[from] NpError),
    #[error(transparent)]
    Ebm(#[from] EbmError),
}

/// Scoring branch; the first three are nonparametric.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Kde,
    Knn,
    Iforest,
    Ebm,
}

impl Branch {
    pub fn nonparametric(self) -> Option<NpBranch> {
        match self {
            Branch::Kde => Some(NpBranch::Kde),
            Branch::Knn => Some(NpBranch::Knn),
            Branch::Iforest => Some(NpBranch::Iforest),
            Branch::Ebm => None,
        }
    }
}

impl std::str::FromStr for Branch {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "kde" => Ok(Branch::Kde),
            "knn" => Ok(Branch::Knn),
            "iforest" => Ok(Branch::Iforest),
            "ebm" => Ok(Branch::Ebm),
            other => Err(format!("unknown branch `{other}` (expected kde, knn, iforest or ebm)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub branch: Branch,
    pub lambda: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Cosine-anneal the predictor learning rate from `lr` to this value
    /// over the run; constant when absent.
    pub lr_min: Option<f64>,
    pub seed: u64,
    /// Epochs whose bank entries are discarded once they finish.
    pub warmup_epochs: usize,
    /// Trailing fraction of windows held out for monitoring.
    pub val_fraction: f64,
    /// Stop after this many iterations regardless of `epochs`.
    pub max_iterations: Option<usize>,
    /// Stop when the validation diffusion loss has not improved for this
    /// many epochs.
    pub patience: Option<usize>,
    pub schedule: ScheduleConfig,
    pub predictor: PredictorConfig,
    pub np: NpConfig,
    pub ebm: EbmConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            branch: Branch::Kde,
            lambda: 0.5,
            epochs: 10,
            batch_size: 64,
            lr: 1e-3,
            lr_min: None,
            seed: 0,
            warmup_epochs: 1,
            val_fraction: 0.1,
            max_iterations: None,
            patience: None,
            schedule: ScheduleConfig::default(),
            predictor: PredictorConfig::default(),
            np: NpConfig::default(),
            ebm: EbmConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda must be finite and non-negative");
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return bad("batch_size and epochs must be positive");
        }
        if !(self.lr > 0.0) {
            return bad("lr must be positive");
        }
        if self.lr_min.is_some_and(|m| !(m >= 0.0 && m <= self.lr)) {
            return bad("lr_min must lie in [0, lr]");
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad("val_fraction must be in [0, 1)");
        }
        if self.predictor.steps != self.schedule.steps {
            return bad("predictor.steps must equal schedule.steps");
        }
        if self.np.capacity == 0 {
            return bad("bank capacity must be positive");
        }
        Ok(())
    }
}

/// Branch-specific state produced by training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BranchState {
    Nonparametric {
        branch: NpBranch,
        config: NpConfig,
        bank: MemoryBank,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        forest: Option<IsolationForest>,
    },
    Parametric {
        config: EbmConfig,
        model: EnergyState,
    },
}

/// Everything needed to score new data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainedModel {
    pub schedule: ScheduleConfig,
    pub predictor: PredictorState,
    pub branch: BranchState,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationLog {
    pub iteration: usize,
    pub epoch: usize,
    pub l_dm: f64,
    pub l_branch: f64,
    pub l_total: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub l_dm: f64,
    pub l_branch: f64,
    pub l_total: f64,
    /// Diffusion loss on the validation windows, when any.
    pub val_l_dm: Option<f64>,
    /// Mean `||eps_theta(x_1, 1, x_hist)||^2` on the validation windows.
    pub val_noise_norm: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub model: TrainedModel,
    pub log: Vec<IterationLog>,
    pub epochs: Vec<EpochSummary>,
    pub validation: WindowSet,
}

/// Writes `iteration,epoch,l_dm,l_branch,l_total`.
pub fn write_log<W: Write>(log: &[IterationLog], writer: W) -> std::io::Result<()> {
    let mut w = std::io::BufWriter::new(writer);
    writeln!(w, "iteration,epoch,l_dm,l_branch,l_total")?;
    for r in log {
        writeln!(w, "{},{},{},{},{}", r.iteration, r.epoch, r.l_dm, r.l_branch, r.l_total)?;
    }
    w.flush()
}

struct Step {
    l_dm: f64,
    l_branch: f64,
}

enum BranchRuntime {
    Np { branch: NpBranch, bank: MemoryBank },
    Ebm { model: EnergyModel, adam: Adam },
}

struct Trainer<'a> {
    config: &'a TrainConfig,
    schedule: NoiseSchedule,
    predictor: NoisePredictor,
    adam: Adam,
    branch: BranchRuntime,
    root: SplitRng,
}

impl Trainer<'_> {
    fn noisy_batch(&self, x0: &Tensor, rng: &mut SplitRng) -> Result<(Tensor, Tensor, Vec<usize>), TrainError> {
        let steps = self.schedule.steps();
        let ks: Vec<usize> = (0..x0.rows()).map(|_| rng.below(steps)).collect();
        let eps = Tensor::matrix(x0.rows(), x0.cols(), rng.normals(x0.len())).map_err(|e| self.numerics(0, e))?;
        let mut xk = Tensor::zeros(x0.shape());
        let w = x0.cols();
        for (r, &k) in ks.iter().enumerate() {
            let span = r * w..(r + 1) * w;
            self.schedule.diffuse_into(&x0.data()[span.clone()], k, &eps.data()[span.clone()], &mut xk.data_mut()[span])?;
        }
        Ok((xk, eps, ks))
    }

    fn numerics(&self, iteration: usize, source: NumericsError) -> TrainError {
        TrainError::Numerics { iteration, source }
    }

    fn step(&mut self, iteration: usize, x0: &Tensor, hist: Option<&Tensor>) -> Result<Step, TrainError> {
        let mut rng = self.root.split_index("train.iteration", iteration as u64);
        let (xk, eps, ks) = self.noisy_batch(x0, &mut rng)?;
        let b = x0.rows();
        let lambda = self.config.lambda;
        let num = |e| TrainError::Numerics { iteration, source: e };

        let mut tape = Tape::new();
        let eps_hat = self.predictor.forward(&mut tape, &xk, hist, &ks)?;
        let target = tape.constant(eps);
        let diff = tape.sub(eps_hat, target).map_err(num)?;
        let sq = tape.squared_l2(diff).map_err(num)?;
        let l_dm_var = tape.scale(sq, 1.0 / b as f64).map_err(num)?;
        let l_dm = tape.value(l_dm_var).item();
        let mut seeds = vec![(l_dm_var, Tensor::scalar(1.0))];

        let zeros = vec![0; b];
        let plus = self.predictor.forward(&mut tape, x0, hist, &zeros)?;
        let minus = self.predictor.forward(&mut tape, &xk, hist, &zeros)?;
        let plus_value = tape.value(plus).clone();

        let l_branch = match &mut self.branch {
            BranchRuntime::Np { branch, bank } => {
                let surrogate = Surrogate::for_branch(*branch, bank, self.config.np.k);
                let out = np_training_loss(&plus_value, tape.value(minus), bank, surrogate, self.config.np.margin)?;
                if lambda > 0.0 && out.loss > 0.0 {
                    seeds.push((plus, out.grad_plus.map(|g| lambda * g)));
                    seeds.push((minus, out.grad_minus.map(|g| lambda * g)));
                }
                out.loss
            }
            BranchRuntime::Ebm { model, adam } => {
                let cfg = &self.config.ebm;
                let mut chain_rng = rng.split("langevin");
                let refined = langevin_refine(&*model, tape.value(minus), cfg.langevin_steps, cfg.step_size, &mut chain_rng)?;

                let f_plus = model.forward(&mut tape, plus)?;
                let e_plus: Vec<f64> = tape.value(f_plus).data().iter().map(|f| -f).collect();
                let e_minus = model.energies(&refined)?;
                let (loss, gp, gm) = ebm_loss_grad(&e_plus, &e_minus, cfg.alpha)?;
                if lambda > 0.0 {
                    // E = -f, so dL/df = -dL/dE.
                    let seed = Tensor::matrix(b, 1, gp.iter().map(|g| -lambda * g).collect()).map_err(num)?;
                    seeds.push((f_plus, seed));
                }

                // Energy-model update on detached inputs.
                let mut etape = Tape::new();
                let xp = etape.constant(plus_value.clone());
                let xm = etape.constant(refined);
                let fp = model.forward(&mut etape, xp)?;
                let fm = model.forward(&mut etape, xm)?;
                let sp = Tensor::matrix(b, 1, gp.iter().map(|g| -g).collect()).map_err(num)?;
                let sm = Tensor::matrix(b, 1, gm.iter().map(|g| -g).collect()).map_err(num)?;
                let grads = etape.backward_multi(vec![(fp, sp), (fm, sm)]).map_err(num)?;
                let grads = grads.for_store(model.params());
                adam.step(model.params_mut(), &grads).map_err(num)?;
                loss
            }
        };

        let total = l_dm + lambda * l_branch;
        if !total.is_finite() {
            return Err(TrainError::NonFiniteLoss { iteration });
        }
        let grads = tape.backward_multi(seeds).map_err(num)?;
        let grads = grads.for_store(self.predictor.params());
        self.adam.step(self.predictor.params_mut(), &grads).map_err(num)?;

        if let BranchRuntime::Np { bank, .. } = &mut self.branch {
            bank.push_rows(&plus_value)?;
        }
        Ok(Step { l_dm, l_branch })
    }

    /// Validation diffusion loss and mean squared norm at `k = 1`, both with
    /// fixed noise.
    fn validate(&self, val: &WindowSet) -> Result<(f64, f64), TrainError> {
        let rng = self.root.split("train.validation");
        let mut l_dm = 0.0;
        let mut norm = 0.0;
        let idx: Vec<usize> = (0..val.len()).collect();
        for (c, chunk) in idx.chunks(256).enumerate() {
            let (x0, hist) = val.batch(chunk);
            let mut r = rng.split_index("chunk", c as u64);
            let (xk, eps, ks) = self.noisy_batch(&x0, &mut r)?;
            let pred = self.predictor.predict(&xk, hist.as_ref(), &ks)?;
            l_dm += crate::diffusion::diffusion_loss(&eps, &pred)? * chunk.len() as f64;

            let one = vec![1; chunk.len()];
            let noise = Tensor::matrix(x0.rows(), x0.cols(), r.normals(x0.len())).map_err(|e| self.numerics(0, e))?;
            let x1 = crate::diffusion::forward_diffuse(&x0, 1, &noise, &self.schedule)?;
            norm += self.predictor.predict(&x1, hist.as_ref(), &one)?.squared_norm();
        }
        Ok((l_dm / val.len() as f64, norm / val.len() as f64))
    }
}

/// Splits off the trailing validation windows and trains on the rest.
pub fn train(windows: &WindowSet, config: &TrainConfig) -> Result<TrainOutput, TrainError> {
    train_observed(windows, config, |_, _| {})
}

/// As [`train`], calling `observe` with each epoch summary and the predictor
/// as it stands at the end of that epoch.
pub fn train_observed(
    windows: &WindowSet,
    config: &TrainConfig,
    mut observe: impl FnMut(&EpochSummary, &NoisePredictor),
) -> Result<TrainOutput, TrainError> {
    config.validate()?;
    if windows.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let width = config.predictor.width();
    if windows.width() != width || windows.history() != config.predictor.history {
        return Err(TrainError::Config(format!(
            "windows have width {} and history {}, predictor expects {width} and {}",
            windows.width(),
            windows.history(),
            config.predictor.history
        )));
    }
    let n_val = (windows.len() as f64 * config.val_fraction).floor() as usize;
    let n_train = windows.len() - n_val;
    if n_train == 0 {
        return Err(TrainError::EmptyDataset);
    }
    let train_set = windows.select(&(0..n_train).collect::<Vec<_>>());
    let validation = windows.select(&(n_train..windows.len()).collect::<Vec<_>>());

    let root = SplitRng::new(config.seed);
    let schedule = NoiseSchedule::from_config(config.schedule)?;
    let predictor = NoisePredictor::new(config.predictor.clone(), &mut root.split("init.predictor"))?;
    let adam_cfg = AdamConfig { lr: config.lr, ..AdamConfig::default() };
    let adam = Adam::new(adam_cfg, predictor.params());
    let branch = match config.branch.nonparametric() {
        Some(branch) => BranchRuntime::Np { branch, bank: MemoryBank::new(config.np.capacity, width)? },
        None => {
            let model = EnergyModel::new(width, config.ebm.hidden, &mut root.split("init.ebm"))?;
            let adam = Adam::new(adam_cfg, model.params());
            BranchRuntime::Ebm { model, adam }
        }
    };
    let mut trainer = Trainer { config, schedule, predictor, adam, branch, root };

    let mut log = Vec::new();
    let mut epochs = Vec::new();
    let mut iteration = 0;
    let mut best = f64::INFINITY;
    let mut since_best = 0;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let planned = {
        let full = config.epochs * train_set.len().div_ceil(config.batch_size);
        config.max_iterations.map_or(full, |m| m.min(full)).max(1)
    };
    'outer: for epoch in 0..config.epochs {
        if epoch == config.warmup_epochs && config.epochs > config.warmup_epochs {
            if let BranchRuntime::Np { bank, .. } = &mut trainer.branch {
                bank.clear();
            }
        }
        trainer.root.split_index("train.shuffle", epoch as u64).shuffle(&mut order);
        let (mut s_dm, mut s_br, mut count) = (0.0, 0.0, 0usize);
        for chunk in order.chunks(config.batch_size) {
            if config.max_iterations.is_some_and(|m| iteration >= m) {
                break 'outer;
            }
            if let Some(lr_min) = config.lr_min {
                let progress = iteration as f64 / planned as f64;
                trainer.adam.config.lr = lr_min + 0.5 * (config.lr - lr_min) * (1.0 + (std::f64::consts::PI * progress).cos());
            }
            let (x0, hist) = train_set.batch(chunk);
            let step = trainer.step(iteration, &x0, hist.as_ref())?;
            let l_total = step.l_dm + config.lambda * step.l_branch;
            log.push(IterationLog { iteration, epoch, l_dm: step.l_dm, l_branch: step.l_branch, l_total });
            s_dm += step.l_dm;
            s_br += step.l_branch;
            count += 1;
            iteration += 1;
        }
        let (val_l_dm, val_noise_norm) = if validation.is_empty() {
            (None, None)
        } else {
            let (l, n) = trainer.validate(&validation)?;
            (Some(l), Some(n))
        };
        let n = count.max(1) as f64;
        epochs.push(EpochSummary {
            epoch,
            l_dm: s_dm / n,
            l_branch: s_br / n,
            l_total: (s_dm + config.lambda * s_br) / n,
            val_l_dm,
            val_noise_norm,
        });
        observe(epochs.last().expect("pushed"), &trainer.predictor);
        if let (Some(patience), Some(v)) = (config.patience, val_l_dm) {
            if v < best {
                best = v;
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= patience {
                    break;
                }
            }
        }
    }

    let branch = match trainer.branch {
        BranchRuntime::Np { branch, bank } => {
            let forest = if branch == NpBranch::Iforest {
                let psi = config.np.subsample.min(bank.len());
                Some(IsolationForest::fit(&bank, config.np.n_trees, psi, trainer.root.split("iforest").seed())?)
            } else {
                None
            };
            BranchState::Nonparametric { branch, config: config.np.clone(), bank, forest }
        }
        BranchRuntime::Ebm { model, .. } => BranchState::Parametric { config: config.ebm.clone(), model: model.state() },
    };
    let model = TrainedModel { schedule: config.schedule, predictor: trainer.predictor.state(), branch };
    Ok(TrainOutput { model, log, epochs, validation })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::predictor::Variant;

    fn gaussian_windows(n: usize, d: usize, seed: u64) -> WindowSet {
        let mut rng = SplitRng::new(seed);
        WindowSet::from_samples(&Tensor::matrix(n, d, rng.normals(n * d)).unwrap())
    }

    fn small_config(branch: Branch) -> TrainConfig {
        TrainConfig {
            branch,
            epochs: 2,
            batch_size: 16,
            seed: 3,
            schedule: ScheduleConfig { steps: 50, ..ScheduleConfig::default() },
            predictor: PredictorConfig { d: 2, history: 0, hidden: 16, steps: 50, ..PredictorConfig::default() },
            np: NpConfig { capacity: 64, n_trees: 10, subsample: 32, ..NpConfig::default() },
            ebm: EbmConfig { hidden: 8, langevin_steps: 3, ..EbmConfig::default() },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_lambda_total_equals_diffusion_loss() {
        let out = train(&gaussian_windows(200, 2, 1), &TrainConfig { lambda: 0.0, ..small_config(Branch::Kde) }).unwrap();
        assert!(out.log.iter().all(|r| r.l_total == r.l_dm));
    }

    #[test]
    fn log_decomposes_total_loss() {
        for branch in [Branch::Kde, Branch::Knn, Branch::Iforest, Branch::Ebm] {
            let config = small_config(branch);
            let out = train(&gaussian_windows(200, 2, 1), &config).unwrap();
            assert_eq!(out.log.len(), 2 * 180usize.div_ceil(16));
            for r in &out.log {
                assert!(r.l_total.is_finite());
                assert_eq!(r.l_total, r.l_dm + config.lambda * r.l_branch);
            }
        }
    }

    #[test]
    fn same_seed_same_parameters() {
        for branch in [Branch::Knn, Branch::Ebm] {
            let config = small_config(branch);
            let data = gaussian_windows(120, 2, 2);
            let a = train(&data, &config).unwrap();
            let b = train(&data, &config).unwrap();
            assert_eq!(a.model, b.model);
        }
    }

    #[test]
    fn bank_holds_last_epoch_entries() {
        let config = TrainConfig { epochs: 3, ..small_config(Branch::Kde) };
        let out = train(&gaussian_windows(40, 2, 4), &config).unwrap();
        // 36 training windows per epoch; epoch 0 is discarded.
        match out.model.branch {
            BranchState::Nonparametric { bank, .. } => assert_eq!(bank.len(), 64.min(2 * 36)),
            _ => unreachable!(),
        }
        let config = TrainConfig { epochs: 1, warmup_epochs: 0, ..small_config(Branch::Kde) };
        let out = train(&gaussian_windows(40, 2, 4), &config).unwrap();
        match out.model.branch {
            BranchState::Nonparametric { bank, .. } => assert_eq!(bank.len(), 36),
            _ => unreachable!(),
        }
    }

    #[test]
    fn iforest_branch_stores_forest() {
        let out = train(&gaussian_windows(200, 2, 1), &small_config(Branch::Iforest)).unwrap();
        match out.model.branch {
            BranchState::Nonparametric { forest: Some(f), .. } => assert_eq!(f.trees.len(), 10),
            _ => panic!("forest missing"),
        }
    }

    #[test]
    fn diffusion_loss_decreases_on_gaussian_data() {
        let config = TrainConfig {
            lambda: 0.0,
            epochs: 40,
            batch_size: 64,
            lr: 3e-3,
            schedule: ScheduleConfig::default(),
            predictor: PredictorConfig { d: 1, history: 0, hidden: 32, ..PredictorConfig::default() },
            ..small_config(Branch::Kde)
        };
        let out = train(&gaussian_windows(3200, 1, 7), &config).unwrap();
        assert!(out.log.len() >= 1800);
        let head: f64 = out.log[..100].iter().map(|r| r.l_dm).sum::<f64>() / 100.0;
        let tail: f64 = out.log[out.log.len() - 100..].iter().map(|r| r.l_dm).sum::<f64>() / 100.0;
        assert!(tail < head, "{head} -> {tail}");
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(
            train(&WindowSet::from_samples(&Tensor::zeros(&[1, 2])), &TrainConfig { val_fraction: 0.0, epochs: 0, ..small_config(Branch::Kde) }),
            Err(TrainError::Config(_))
        ));
        let wrong_width = gaussian_windows(10, 3, 0);
        assert!(matches!(train(&wrong_width, &small_config(Branch::Kde)), Err(TrainError::Config(_))));
        let spatial = TrainConfig {
            predictor: PredictorConfig { variant: Variant::Spatiotemporal, hidden: 5, ..small_config(Branch::Kde).predictor },
            ..small_config(Branch::Kde)
        };
        assert!(train(&gaussian_windows(20, 2, 0), &spatial).is_err());
    }

    #[test]
    fn log_csv_has_header_and_rows() {
        let out = train(&gaussian_windows(50, 2, 1), &TrainConfig { epochs: 1, ..small_config(Branch::Knn) }).unwrap();
        let mut buf = Vec::new();
        write_log(&out.log, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("iteration,epoch,l_dm,l_branch,l_total\n"));
        assert_eq!(text.lines().count(), out.log.len() + 1);
    }
}
