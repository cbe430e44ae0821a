//! Nonparametric branch: a FIFO bank of normal noise predictions scored by
//! KDE, kNN or an isolation forest, plus the margin loss used in training.

mod bank;
mod density;
mod iforest;

pub use bank::MemoryBank;
pub use density::{kde_score, kde_score_grad, knn_score, knn_score_grad, silverman_bandwidth, KDE_FLOOR};
pub use iforest::{average_path_length, IsolationForest, IsolationTree, TreeNode};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NpError {
    #[error("noise dimension {got} does not match bank dimension {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("bank needs at least {needed} entries, has {got}")]
    TooFewEntries { needed: usize, got: usize },
    #[error("bank has zero spread; bandwidth undefined")]
    DegenerateBank,
    #[error("k = {k} must be in 1..={m}")]
    InvalidK { k: usize, m: usize },
    #[error("{0}")]
    InvalidParameter(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NpBranch {
    Kde,
    Knn,
    Iforest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NpConfig {
    pub capacity: usize,
    pub k: usize,
    pub n_trees: usize,
    pub subsample: usize,
    pub margin: f64,
}

impl Default for NpConfig {
    fn default() -> Self {
        Self { capacity: 2048, k: 5, n_trees: 100, subsample: 256, margin: 1.0 }
    }
}

/// A frozen scorer over a bank snapshot.
#[derive(Debug, Clone)]
pub enum NpScorer {
    Kde { bank: MemoryBank, h: f64 },
    Knn { bank: MemoryBank, k: usize },
    Iforest(IsolationForest),
}

impl NpScorer {
    pub fn fit(branch: NpBranch, bank: &MemoryBank, config: &NpConfig, seed: u64) -> Result<Self, NpError> {
        Ok(match branch {
            NpBranch::Kde => Self::Kde { bank: bank.clone(), h: silverman_bandwidth(bank)? },
            NpBranch::Knn => {
                if config.k == 0 || config.k > bank.len() {
                    return Err(NpError::InvalidK { k: config.k, m: bank.len() });
                }
                Self::Knn { bank: bank.clone(), k: config.k }
            }
            NpBranch::Iforest => Self::Iforest(IsolationForest::fit(bank, config.n_trees, config.subsample, seed)?),
        })
    }

    pub fn score(&self, eps: &[f64]) -> Result<f64, NpError> {
        match self {
            Self::Kde { bank, h } => kde_score(eps, bank, *h),
            Self::Knn { bank, k } => knn_score(eps, bank, *k),
            Self::Iforest(forest) => forest.score(eps),
        }
    }
}

/// Differentiable score used by the training loss. The isolation forest is
/// piecewise constant, so its branch trains through kNN.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Surrogate {
    Kde { h: f64 },
    Knn { k: usize },
}

impl Surrogate {
    /// `None` while the bank cannot support the score yet (warm-up).
    pub fn for_branch(branch: NpBranch, bank: &MemoryBank, k: usize) -> Option<Self> {
        if bank.is_empty() {
            return None;
        }
        match branch {
            NpBranch::Kde => silverman_bandwidth(bank).ok().map(|h| Self::Kde { h }),
            NpBranch::Knn | NpBranch::Iforest => Some(Self::Knn { k: k.clamp(1, bank.len()) }),
        }
    }

    fn score_grad(&self, eps: &[f64], bank: &MemoryBank) -> Result<(f64, Vec<f64>), NpError> {
        match *self {
            Self::Kde { h } => kde_score_grad(eps, bank, h, true),
            Self::Knn { k } => knn_score_grad(eps, bank, k),
        }
    }
}

/// `max(0, margin + s_plus - s_minus)`.
pub fn margin_loss(s_plus: f64, s_minus: f64, margin: f64) -> f64 {
    (margin + s_plus - s_minus).max(0.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct NpLoss {
    pub loss: f64,
    pub grad_plus: Tensor,
    pub grad_minus: Tensor,
}

/// Batch mean of [`margin_loss`] over paired rows of `eps_plus` and
/// `eps_minus`, with gradients for both. The bank is treated as constant.
pub fn np_training_loss(
    eps_plus: &Tensor,
    eps_minus: &Tensor,
    bank: &MemoryBank,
    surrogate: Option<Surrogate>,
    margin: f64,
) -> Result<NpLoss, NpError> {
    let mut grad_plus = Tensor::zeros(eps_plus.shape());
    let mut grad_minus = Tensor::zeros(eps_minus.shape());
    let Some(surrogate) = surrogate.filter(|_| !bank.is_empty()) else {
        return Ok(NpLoss { loss: 0.0, grad_plus, grad_minus });
    };
    let batch = eps_plus.rows();
    if eps_minus.rows() != batch {
        return Err(NpError::InvalidParameter("positive and negative batches differ in size"));
    }
    let d = bank.dim();
    let mut total = 0.0;
    for r in 0..batch {
        let (sp, gp) = surrogate.score_grad(eps_plus.row_slice(r), bank)?;
        let (sm, gm) = surrogate.score_grad(eps_minus.row_slice(r), bank)?;
        let l = margin_loss(sp, sm, margin);
        total += l;
        if l > 0.0 {
            for j in 0..d {
                grad_plus.data_mut()[r * d + j] = gp[j] / batch as f64;
                grad_minus.data_mut()[r * d + j] = -gm[j] / batch as f64;
            }
        }
    }
    Ok(NpLoss { loss: total / batch as f64, grad_plus, grad_minus })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::check_input;
    use crate::numerics::SplitRng;

    fn random_bank(m: usize, d: usize, seed: u64) -> MemoryBank {
        let mut rng = SplitRng::new(seed);
        let mut bank = MemoryBank::new(m, d).unwrap();
        for _ in 0..m {
            bank.push(&rng.normals(d)).unwrap();
        }
        bank
    }

    #[test]
    fn margin_examples() {
        assert_eq!(margin_loss(1.0, 2.5, 1.0), 0.0);
        assert_eq!(margin_loss(2.0, 1.0, 1.0), 2.0);
    }

    #[test]
    fn empty_bank_contributes_nothing() {
        let bank = MemoryBank::new(4, 2).unwrap();
        assert_eq!(Surrogate::for_branch(NpBranch::Knn, &bank, 5), None);
        let x = Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap();
        let out = np_training_loss(&x, &x, &bank, Some(Surrogate::Knn { k: 1 }), 1.0).unwrap();
        assert_eq!(out.loss, 0.0);
        assert!(out.grad_plus.data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn satisfied_margin_has_zero_gradient() {
        let mut bank = MemoryBank::new(2, 1).unwrap();
        bank.push(&[0.0]).unwrap();
        let plus = Tensor::matrix(1, 1, vec![0.1]).unwrap();
        let minus = Tensor::matrix(1, 1, vec![5.0]).unwrap();
        let out = np_training_loss(&plus, &minus, &bank, Some(Surrogate::Knn { k: 1 }), 1.0).unwrap();
        assert_eq!(out.loss, 0.0);
        assert_eq!(out.grad_minus.data(), &[0.0]);
    }

    #[test]
    fn gradients_match_finite_differences_for_each_argument() {
        let bank = random_bank(30, 3, 4);
        let mut rng = SplitRng::new(6);
        let plus = Tensor::matrix(4, 3, rng.normals(12).into_iter().map(|v| 2.0 * v).collect()).unwrap();
        let minus = Tensor::matrix(4, 3, rng.normals(12)).unwrap();
        for surrogate in [Surrogate::Kde { h: 0.8 }, Surrogate::Knn { k: 3 }] {
            let out = np_training_loss(&plus, &minus, &bank, Some(surrogate), 3.0).unwrap();
            assert!(out.loss > 0.0);
            let f_plus = |p: &Tensor| np_training_loss(p, &minus, &bank, Some(surrogate), 3.0).unwrap().loss;
            assert!(check_input(&plus, &out.grad_plus, 1e-6, f_plus).passes(1e-4));
            let f_minus = |m: &Tensor| np_training_loss(&plus, m, &bank, Some(surrogate), 3.0).unwrap().loss;
            assert!(check_input(&minus, &out.grad_minus, 1e-6, f_minus).passes(1e-4));
        }
    }

    #[test]
    fn loss_leaves_bank_untouched() {
        let bank = random_bank(10, 2, 1);
        let before = bank.clone();
        let x = Tensor::matrix(1, 2, vec![0.3, 0.3]).unwrap();
        np_training_loss(&x, &x, &bank, Some(Surrogate::Kde { h: 0.5 }), 1.0).unwrap();
        assert_eq!(bank, before);
    }

    #[test]
    fn scorer_dispatches_to_each_branch() {
        let bank = random_bank(300, 2, 2);
        let config = NpConfig::default();
        let x = [0.2, -0.4];
        let kde = NpScorer::fit(NpBranch::Kde, &bank, &config, 0).unwrap();
        assert_eq!(kde.score(&x).unwrap(), kde_score(&x, &bank, silverman_bandwidth(&bank).unwrap()).unwrap());
        let knn = NpScorer::fit(NpBranch::Knn, &bank, &config, 0).unwrap();
        assert_eq!(knn.score(&x).unwrap(), knn_score(&x, &bank, 5).unwrap());
        let forest = NpScorer::fit(NpBranch::Iforest, &bank, &config, 0).unwrap();
        let s = forest.score(&x).unwrap();
        assert!(s > 0.0 && s <= 1.0);
    }
}
