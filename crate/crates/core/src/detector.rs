//! Test-time scoring at `k = 1` and peaks-over-threshold labelling.
//!
//! A sample `x` is scored by drawing `eps ~ N(0, I)`, forming
//! `x_1 = sqrt(abar_1) x + sqrt(1 - abar_1) eps`, predicting
//! `eps_hat = eps_theta(x_1, 1, x_hist)` and handing `eps_hat` to the
//! branch: a density or distance score against the memory bank, or the
//! energy `E = -f(eps_hat)`.
//!
//! The decision level comes from a generalised Pareto fit to calibration
//! scores above a high empirical quantile `t`:
//!
//! ```text
//! z_q = t + (sigma / gamma) ((q M / N_t)^(-gamma) - 1)
//! ```
//!
//! with the exponential limit `z_q = t + sigma ln(N_t / (q M))` when
//! `|gamma| < 1e-6`.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffusion::{DiffusionError, NoiseSchedule};
use crate::data::WindowSet;
use crate::numerics::{SplitRng, Tensor};
use crate::predictor::{NoisePredictor, PredictorError};
use crate::scoring_np::{NpError, NpScorer};
use crate::scoring_p::{EbmError, EnergyFunction, EnergyModel};
use crate::trainer::{BranchState, TrainedModel};

/// Diffusion step used for scoring.
pub const SCORE_STEP: usize = 1;
/// Below this `|gamma|` the exponential limit is used.
pub const GAMMA_EPS: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DetectorError {
    #[error("untrained state: {0}")]
    Untrained(String),
    #[error("sample has {got} values, predictor expects {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("too few excesses above t = {t}: need at least {needed}, got {got}")]
    TooFewExcesses { t: f64, needed: usize, got: usize },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("excesses are all equal; the tail cannot be fitted")]
    DegenerateExcesses,
    #[error("score trace: {0}")]
    Trace(String),
    #[error(transparent)]
    Predictor(#[from] PredictorError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Np(#[from] NpError),
    #[error(transparent)]
    Ebm(#[from] EbmError),
}

enum Scorer {
    Np(NpScorer),
    Energy(Box<dyn EnergyFunction + Send + Sync>),
}

/// Frozen predictor plus branch scorer.
pub struct Detector {
    schedule: NoiseSchedule,
    predictor: NoisePredictor,
    scorer: Scorer,
    n_draws: usize,
}

/// Seed of the noise stream for the window ending at `index`.
pub fn window_seed(seed: u64, index: usize) -> u64 {
    SplitRng::new(seed).split_index("score.window", index as u64).seed()
}

impl Detector {
    /// `seed` is only used to grow an isolation forest when the model does
    /// not carry one.
    pub fn from_model(model: &TrainedModel, seed: u64) -> Result<Self, DetectorError> {
        let schedule = NoiseSchedule::from_config(model.schedule)?;
        let predictor = NoisePredictor::from_state(&model.predictor)?;
        let scorer = match &model.branch {
            BranchState::Nonparametric { branch, config, bank, forest } => {
                if bank.is_empty() {
                    return Err(DetectorError::Untrained("memory bank is empty".into()));
                }
                match forest {
                    Some(f) => Scorer::Np(NpScorer::Iforest(f.clone())),
                    None => Scorer::Np(NpScorer::fit(*branch, bank, config, seed)?),
                }
            }
            BranchState::Parametric { model, .. } => Scorer::Energy(Box::new(EnergyModel::from_state(model)?)),
        };
        Self::check_width(&predictor, &scorer)?;
        Ok(Self { schedule, predictor, scorer, n_draws: 1 })
    }

    /// Parametric detector over any energy function.
    pub fn with_energy(
        schedule: NoiseSchedule,
        predictor: NoisePredictor,
        energy: Box<dyn EnergyFunction + Send + Sync>,
    ) -> Result<Self, DetectorError> {
        let scorer = Scorer::Energy(energy);
        Self::check_width(&predictor, &scorer)?;
        Ok(Self { schedule, predictor, scorer, n_draws: 1 })
    }

    fn check_width(predictor: &NoisePredictor, scorer: &Scorer) -> Result<(), DetectorError> {
        let expected = predictor.config().width();
        if let Scorer::Energy(e) = scorer {
            if e.dim() != expected {
                return Err(DetectorError::Dimension { expected, got: e.dim() });
            }
        }
        Ok(())
    }

    /// Averages the score over `n` noise draws; 1 follows the single-draw
    /// procedure.
    pub fn with_draws(mut self, n: usize) -> Result<Self, DetectorError> {
        if n == 0 {
            return Err(DetectorError::InvalidParameter("n_draws must be at least 1".into()));
        }
        self.n_draws = n;
        Ok(self)
    }

    pub fn predictor(&self) -> &NoisePredictor {
        &self.predictor
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    /// Branch scores of a batch of predicted noises.
    pub fn score_noise(&self, eps_hat: &Tensor) -> Result<Vec<f64>, DetectorError> {
        match &self.scorer {
            Scorer::Np(s) => (0..eps_hat.rows()).map(|r| Ok(s.score(eps_hat.row_slice(r))?)).collect(),
            Scorer::Energy(e) => Ok(e.energies(eps_hat)?),
        }
    }

    /// Predicted noise at `k = 1` for each row of `x`, one draw per row
    /// from the matching generator.
    fn predict_noisy(&self, x: &Tensor, hist: Option<&Tensor>, rngs: &mut [SplitRng]) -> Result<Tensor, DetectorError> {
        let width = x.cols();
        let mut eps = Vec::with_capacity(x.len());
        for rng in rngs.iter_mut() {
            eps.extend(rng.normals(width));
        }
        let eps = Tensor::matrix(x.rows(), width, eps).expect("matching shape");
        let x1 = crate::diffusion::forward_diffuse(x, SCORE_STEP, &eps, &self.schedule)?;
        Ok(self.predictor.predict(&x1, hist, &vec![SCORE_STEP; x.rows()])?)
    }

    fn score_rows(&self, x: &Tensor, hist: Option<&Tensor>, mut rngs: Vec<SplitRng>) -> Result<Vec<f64>, DetectorError> {
        let mut total = vec![0.0; x.rows()];
        for _ in 0..self.n_draws {
            let eps_hat = self.predict_noisy(x, hist, &mut rngs)?;
            for (t, s) in total.iter_mut().zip(self.score_noise(&eps_hat)?) {
                *t += s;
            }
        }
        Ok(total.into_iter().map(|s| s / self.n_draws as f64).collect())
    }

    /// Score of one sample; `hist` is oldest step first.
    pub fn score_sample(&self, x: &[f64], hist: Option<&[f64]>, seed: u64) -> Result<f64, DetectorError> {
        let width = self.predictor.config().width();
        if x.len() != width {
            return Err(DetectorError::Dimension { expected: width, got: x.len() });
        }
        let hist = hist.filter(|h| !h.is_empty()).map(Tensor::row);
        Ok(self.score_rows(&Tensor::row(x), hist.as_ref(), vec![SplitRng::new(seed)])?[0])
    }

    /// Scores every window; window `i` uses `window_seed(seed, index_i)`,
    /// so results do not depend on batching.
    pub fn score_windows(&self, windows: &WindowSet, seed: u64) -> Result<ScoreTrace, DetectorError> {
        let mut points = Vec::with_capacity(windows.len());
        let idx: Vec<usize> = (0..windows.len()).collect();
        for chunk in idx.chunks(256) {
            let (x, hist) = windows.batch(chunk);
            let rngs = chunk.iter().map(|&i| SplitRng::new(window_seed(seed, windows.get(i).index))).collect();
            let scores = self.score_rows(&x, hist.as_ref(), rngs)?;
            for (&i, score) in chunk.iter().zip(scores) {
                points.push(TracePoint { index: windows.get(i).index, score, label: None });
            }
        }
        ScoreTrace::new(points)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub index: usize,
    pub score: f64,
    pub label: Option<u8>,
}

/// Scores in strictly increasing time order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ScoreTrace {
    points: Vec<TracePoint>,
}

impl ScoreTrace {
    pub fn new(points: Vec<TracePoint>) -> Result<Self, DetectorError> {
        if let Some(w) = points.windows(2).find(|w| w[1].index <= w[0].index) {
            return Err(DetectorError::Trace(format!("index {} follows {}", w[1].index, w[0].index)));
        }
        if let Some(p) = points.iter().find(|p| p.label.is_some_and(|l| l > 1)) {
            return Err(DetectorError::Trace(format!("label at index {} must be 0 or 1", p.index)));
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[TracePoint] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn scores(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.score).collect()
    }

    /// `None` unless every point is labelled.
    pub fn labels(&self) -> Option<Vec<u8>> {
        self.points.iter().map(|p| p.label).collect()
    }

    pub fn with_labels(&self, labels: &[u8]) -> Result<Self, DetectorError> {
        if labels.len() != self.len() {
            return Err(DetectorError::Trace(format!("{} labels for {} scores", labels.len(), self.len())));
        }
        let points = self.points.iter().zip(labels).map(|(p, &l)| TracePoint { label: Some(l), ..*p }).collect();
        Self::new(points)
    }

    /// `index,score` plus `label` when every point carries one.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), DetectorError> {
        let io = |e: std::io::Error| DetectorError::Trace(e.to_string());
        let labelled = self.labels().is_some() && !self.is_empty();
        let mut w = std::io::BufWriter::new(writer);
        writeln!(w, "{}", if labelled { "index,score,label" } else { "index,score" }).map_err(io)?;
        for p in &self.points {
            match p.label.filter(|_| labelled) {
                Some(l) => writeln!(w, "{},{},{}", p.index, p.score, l),
                None => writeln!(w, "{},{}", p.index, p.score),
            }
            .map_err(io)?;
        }
        w.flush().map_err(io)
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self, DetectorError> {
        let err = |m: String| DetectorError::Trace(m);
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let headers = rdr.headers().map_err(|e| err(e.to_string()))?.clone();
        let col = |name: &str| headers.iter().position(|h| h == name);
        let (Some(ic), Some(sc)) = (col("index"), col("score")) else {
            return Err(err("header must contain `index` and `score`".into()));
        };
        let lc = col("label");
        let mut points = Vec::new();
        for (row, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| err(e.to_string()))?;
            let field = |c: usize| rec.get(c).unwrap_or("");
            let index = field(ic).parse().map_err(|_| err(format!("row {}: bad index `{}`", row + 1, field(ic))))?;
            let score = field(sc).parse().map_err(|_| err(format!("row {}: bad score `{}`", row + 1, field(sc))))?;
            let label = match lc.map(field) {
                None | Some("") => None,
                Some(v) => Some(v.parse().map_err(|_| err(format!("row {}: bad label `{v}`", row + 1)))?),
            };
            points.push(TracePoint { index, score, label });
        }
        Self::new(points)
    }
}

/// Peaks-over-threshold state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GpdFit {
    pub t: f64,
    pub gamma: f64,
    pub sigma: f64,
    pub n_t: usize,
    pub m: usize,
    pub q: f64,
    pub z_q: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PotConfig {
    pub t_quantile: f64,
    pub q: f64,
    pub min_excesses: usize,
}

impl Default for PotConfig {
    fn default() -> Self {
        Self { t_quantile: 0.98, q: 1e-3, min_excesses: 20 }
    }
}

/// Decision level for risk `q` given `M` calibration scores, `N_t` of them
/// above `t`.
pub fn pot_level(t: f64, sigma: f64, gamma: f64, q: f64, m: usize, n_t: usize) -> f64 {
    let ratio = q * m as f64 / n_t as f64;
    if gamma.abs() < GAMMA_EPS {
        t - sigma * ratio.ln()
    } else {
        t + sigma / gamma * (ratio.powf(-gamma) - 1.0)
    }
}

/// Nearest-rank empirical quantile of sorted values.
fn empirical_quantile(sorted: &[f64], p: f64) -> f64 {
    let rank = (p * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

/// Profile log-likelihood in `theta = gamma / sigma`: with `gamma` set to
/// `mean ln(1 + theta y)` and `sigma = gamma / theta` the GPD
/// log-likelihood is `-n ln sigma - n (1 + gamma)`.
fn profile(y: &[f64], theta: f64) -> Option<(f64, f64, f64)> {
    let n = y.len() as f64;
    if theta == 0.0 {
        let sigma = y.iter().sum::<f64>() / n;
        return Some((-n * sigma.ln() - n, 0.0, sigma));
    }
    let mut acc = 0.0;
    for &v in y {
        let a = theta * v;
        if a <= -1.0 {
            return None;
        }
        acc += a.ln_1p();
    }
    let gamma = acc / n;
    let sigma = gamma / theta;
    // The likelihood is unbounded for gamma < -1.
    if !(sigma > 0.0) || gamma < -1.0 {
        return None;
    }
    Some((-n * sigma.ln() - n * (1.0 + gamma), gamma, sigma))
}

/// Method-of-moments estimate; valid for `gamma < 1/2`.
fn gpd_moments(y: &[f64]) -> Result<(f64, f64), DetectorError> {
    let n = y.len() as f64;
    let mean = y.iter().sum::<f64>() / n;
    let var = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    if !(var > 0.0) {
        return Err(DetectorError::DegenerateExcesses);
    }
    let r = mean * mean / var;
    Ok((0.5 * (1.0 - r), 0.5 * mean * (r + 1.0)))
}

/// Maximum-likelihood `(gamma, sigma)` for positive excesses, falling back
/// to moments when the optimiser does not produce a positive scale.
pub fn fit_gpd(excesses: &[f64]) -> Result<(f64, f64), DetectorError> {
    if excesses.len() < 2 {
        return Err(DetectorError::TooFewExcesses { t: f64::NAN, needed: 2, got: excesses.len() });
    }
    if excesses.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
        return Err(DetectorError::InvalidParameter("excesses must be finite and positive".into()));
    }
    let y_max = excesses.iter().cloned().fold(0.0, f64::max);
    let y_mean = excesses.iter().sum::<f64>() / excesses.len() as f64;
    if excesses.iter().all(|&v| v == excesses[0]) {
        return Err(DetectorError::DegenerateExcesses);
    }

    // Bracketing grid over the admissible range theta > -1 / y_max.
    let mut grid: Vec<f64> = (1..=120).map(|i| -(1.0 - 10f64.powf(-8.0 * i as f64 / 120.0)) / y_max).collect();
    grid.push(0.0);
    grid.extend((0..=160).map(|i| (-12.0 + 20.0 * i as f64 / 160.0).exp() / y_mean));
    grid.sort_by(f64::total_cmp);
    let ll = |th: f64| profile(excesses, th).map_or(f64::NEG_INFINITY, |p| p.0);
    let values: Vec<f64> = grid.iter().map(|&th| ll(th)).collect();
    let best = (0..grid.len()).max_by(|&a, &b| values[a].total_cmp(&values[b])).unwrap();
    if values[best] == f64::NEG_INFINITY {
        return gpd_moments(excesses);
    }

    // Golden-section refinement between the neighbouring grid points.
    let (mut lo, mut hi) = (grid[best.saturating_sub(1)], grid[(best + 1).min(grid.len() - 1)]);
    let g = 0.5 * (5f64.sqrt() - 1.0);
    let mut a = hi - g * (hi - lo);
    let mut b = lo + g * (hi - lo);
    let (mut fa, mut fb) = (ll(a), ll(b));
    for _ in 0..200 {
        if (hi - lo).abs() <= 1e-14 * (1.0 + lo.abs().max(hi.abs())) {
            break;
        }
        if fa >= fb {
            hi = b;
            b = a;
            fb = fa;
            a = hi - g * (hi - lo);
            fa = ll(a);
        } else {
            lo = a;
            a = b;
            fa = fb;
            b = lo + g * (hi - lo);
            fb = ll(b);
        }
    }
    let theta = if fa.max(fb) >= values[best] { if fa >= fb { a } else { b } } else { grid[best] };
    match profile(excesses, theta) {
        Some((_, gamma, sigma)) if sigma > 0.0 && sigma.is_finite() => Ok((gamma, sigma)),
        _ => gpd_moments(excesses),
    }
}

/// Fits the tail of calibration scores and returns the decision level.
pub fn fit_pot(scores: &[f64], config: &PotConfig) -> Result<GpdFit, DetectorError> {
    let PotConfig { t_quantile, q, min_excesses } = *config;
    if !(0.0 < t_quantile && t_quantile < 1.0) {
        return Err(DetectorError::InvalidParameter(format!("t_quantile {t_quantile} outside (0, 1)")));
    }
    if !(0.0 < q && q < 1.0) {
        return Err(DetectorError::InvalidParameter(format!("q {q} outside (0, 1)")));
    }
    if scores.is_empty() || scores.iter().any(|s| !s.is_finite()) {
        return Err(DetectorError::InvalidParameter("calibration scores must be non-empty and finite".into()));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let t = empirical_quantile(&sorted, t_quantile);
    let excesses: Vec<f64> = sorted.iter().filter(|&&s| s > t).map(|s| s - t).collect();
    let needed = min_excesses.max(2);
    if excesses.len() < needed {
        return Err(DetectorError::TooFewExcesses { t, needed, got: excesses.len() });
    }
    let (m, n_t) = (scores.len(), excesses.len());
    if q * m as f64 >= n_t as f64 {
        return Err(DetectorError::InvalidParameter(format!(
            "q M = {} is not below the excess count {n_t}; lower q or raise t_quantile",
            q * m as f64
        )));
    }
    let (gamma, sigma) = fit_gpd(&excesses)?;
    let z_q = pot_level(t, sigma, gamma, q, m, n_t);
    Ok(GpdFit { t, gamma, sigma, n_t, m, q, z_q })
}

/// `1` where the score exceeds `z_q`.
pub fn label(scores: &[f64], fit: &GpdFit) -> Vec<u8> {
    scores.iter().map(|&s| u8::from(s > fit.z_q)).collect()
}
