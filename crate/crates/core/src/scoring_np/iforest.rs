//! Isolation forest over bank entries.

use serde::{Deserialize, Serialize};

use super::{MemoryBank, NpError};
use crate::numerics::SplitRng;

const EULER_GAMMA: f64 = 0.5772;

/// Average path length normaliser `c(n) = 2 ln(n-1) + 0.5772 - 2(n-1)/n`,
/// with `c(n) = 0` for `n <= 1` and `c(2) = 1`.
pub fn average_path_length(n: usize) -> f64 {
    match n {
        0 | 1 => 0.0,
        2 => 1.0,
        _ => {
            let n = n as f64;
            2.0 * (n - 1.0).ln() + EULER_GAMMA - 2.0 * (n - 1.0) / n
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TreeNode {
    Split { dim: usize, value: f64, left: usize, right: usize },
    Leaf { size: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IsolationTree {
    nodes: Vec<TreeNode>,
}

impl IsolationTree {
    fn fit(points: &[&[f64]], max_height: usize, rng: &mut SplitRng) -> Self {
        let mut tree = Self { nodes: Vec::new() };
        let mut idx: Vec<usize> = (0..points.len()).collect();
        tree.grow(points, &mut idx, 0, max_height, rng);
        tree
    }

    fn grow(&mut self, points: &[&[f64]], idx: &mut [usize], depth: usize, max_height: usize, rng: &mut SplitRng) -> usize {
        let id = self.nodes.len();
        self.nodes.push(TreeNode::Leaf { size: idx.len() });
        if idx.len() <= 1 || depth >= max_height {
            return id;
        }
        let dim_count = points[idx[0]].len();
        let mut ranges = Vec::new();
        for dim in 0..dim_count {
            let (lo, hi) = idx.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &i| {
                (lo.min(points[i][dim]), hi.max(points[i][dim]))
            });
            if hi > lo {
                ranges.push((dim, lo, hi));
            }
        }
        // Only non-constant dimensions can separate points.
        if ranges.is_empty() {
            return id;
        }
        let (dim, lo, hi) = ranges[rng.below(ranges.len())];
        let value = rng.uniform(lo, hi);
        let mut split = 0;
        for j in 0..idx.len() {
            if points[idx[j]][dim] < value {
                idx.swap(split, j);
                split += 1;
            }
        }
        let (left_idx, right_idx) = idx.split_at_mut(split);
        let left = self.grow(points, left_idx, depth + 1, max_height, rng);
        let right = self.grow(points, right_idx, depth + 1, max_height, rng);
        self.nodes[id] = TreeNode::Split { dim, value, left, right };
        id
    }

    /// Depth of the leaf reached by `x` plus `c(size)` for that leaf.
    pub fn path_length(&self, x: &[f64]) -> f64 {
        let mut node = 0;
        let mut depth = 0.0;
        loop {
            match self.nodes[node] {
                TreeNode::Split { dim, value, left, right } => {
                    node = if x[dim] < value { left } else { right };
                    depth += 1.0;
                }
                TreeNode::Leaf { size } => return depth + average_path_length(size),
            }
        }
    }

    pub fn nodes(&self) -> &[TreeNode] {
        &self.nodes
    }

    pub fn height(&self) -> usize {
        fn walk(nodes: &[TreeNode], i: usize) -> usize {
            match nodes[i] {
                TreeNode::Split { left, right, .. } => 1 + walk(nodes, left).max(walk(nodes, right)),
                TreeNode::Leaf { .. } => 0,
            }
        }
        walk(&self.nodes, 0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IsolationForest {
    pub seed: u64,
    pub subsample: usize,
    pub dim: usize,
    pub trees: Vec<IsolationTree>,
}

impl IsolationForest {
    pub fn fit(bank: &MemoryBank, n_trees: usize, subsample: usize, seed: u64) -> Result<Self, NpError> {
        if subsample < 2 {
            return Err(NpError::InvalidParameter("subsample size must be at least 2"));
        }
        if n_trees == 0 {
            return Err(NpError::InvalidParameter("forest needs at least one tree"));
        }
        if subsample > bank.len() {
            return Err(NpError::TooFewEntries { needed: subsample, got: bank.len() });
        }
        let all: Vec<&[f64]> = bank.iter().collect();
        let max_height = (subsample as f64).log2().ceil() as usize;
        let root = SplitRng::new(seed);
        let trees = (0..n_trees)
            .map(|t| {
                let mut rng = root.split_index("iforest.tree", t as u64);
                let points: Vec<&[f64]> = rng.sample_indices(all.len(), subsample).into_iter().map(|i| all[i]).collect();
                IsolationTree::fit(&points, max_height, &mut rng)
            })
            .collect();
        Ok(Self { seed, subsample, dim: bank.dim(), trees })
    }

    pub fn mean_path_length(&self, x: &[f64]) -> f64 {
        self.trees.iter().map(|t| t.path_length(x)).sum::<f64>() / self.trees.len() as f64
    }

    /// `2^(-E[path] / c(psi))`, in `(0, 1]`.
    pub fn score(&self, x: &[f64]) -> Result<f64, NpError> {
        if x.len() != self.dim {
            return Err(NpError::Dimension { expected: self.dim, got: x.len() });
        }
        Ok(2f64.powf(-self.mean_path_length(x) / average_path_length(self.subsample)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bank_from(rows: &[Vec<f64>]) -> MemoryBank {
        let mut bank = MemoryBank::new(rows.len(), rows[0].len()).unwrap();
        rows.iter().for_each(|r| bank.push(r).unwrap());
        bank
    }

    fn random_rows(m: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = SplitRng::new(seed);
        (0..m).map(|_| rng.normals(d)).collect()
    }

    #[test]
    fn normaliser_values() {
        let expected = 2.0 * 255f64.ln() + 0.5772 - 2.0 * 255.0 / 256.0;
        assert!((average_path_length(256) - expected).abs() < 1e-12);
        assert!((average_path_length(256) - 9.6675).abs() < 1e-3);
        assert_eq!(average_path_length(1), 0.0);
        assert_eq!(average_path_length(2), 1.0);
    }

    #[test]
    fn two_point_trees_split_once() {
        let forest = IsolationForest::fit(&bank_from(&random_rows(10, 2, 1)), 20, 2, 7).unwrap();
        for tree in &forest.trees {
            let splits = tree.nodes().iter().filter(|n| matches!(n, TreeNode::Split { .. })).count();
            assert_eq!(splits, 1);
        }
    }

    #[test]
    fn fixed_seed_is_deterministic() {
        let bank = bank_from(&random_rows(100, 3, 2));
        assert_eq!(IsolationForest::fit(&bank, 10, 32, 5).unwrap(), IsolationForest::fit(&bank, 10, 32, 5).unwrap());
    }

    #[test]
    fn identical_points_never_split() {
        let bank = bank_from(&vec![vec![1.0, -1.0]; 64]);
        let forest = IsolationForest::fit(&bank, 5, 64, 0).unwrap();
        let path = forest.mean_path_length(&[1.0, -1.0]);
        assert!((path - average_path_length(64)).abs() < 1e-12);
        assert!((forest.score(&[1.0, -1.0]).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn height_and_leaf_invariants() {
        let forest = IsolationForest::fit(&bank_from(&random_rows(300, 3, 3)), 25, 256, 1).unwrap();
        fn leaves(nodes: &[TreeNode], i: usize, depth: usize, out: &mut Vec<(usize, usize)>) {
            match nodes[i] {
                TreeNode::Split { left, right, .. } => {
                    leaves(nodes, left, depth + 1, out);
                    leaves(nodes, right, depth + 1, out);
                }
                TreeNode::Leaf { size } => out.push((size, depth)),
            }
        }
        for tree in &forest.trees {
            assert!(tree.height() <= 8);
            let mut found = Vec::new();
            leaves(tree.nodes(), 0, 0, &mut found);
            assert_eq!(found.iter().map(|l| l.0).sum::<usize>(), 256);
            assert!(found.iter().all(|&(size, depth)| size <= 1 || depth == 8));
        }
    }

    #[test]
    fn outlier_scores_higher_than_cluster_member() {
        let mut rows = random_rows(255, 2, 4);
        rows.iter_mut().flatten().for_each(|v| *v *= 0.1);
        rows.push(vec![5.0, 5.0]);
        let forest = IsolationForest::fit(&bank_from(&rows), 100, 128, 9).unwrap();
        let outlier = forest.score(&[5.0, 5.0]).unwrap();
        let member = forest.score(&[0.0, 0.0]).unwrap();
        assert!(outlier > member, "{outlier} vs {member}");
        assert!(outlier <= 1.0 && member > 0.0);
    }

    #[test]
    fn rejects_bad_parameters() {
        let bank = bank_from(&random_rows(10, 2, 1));
        assert!(IsolationForest::fit(&bank, 5, 11, 0).is_err());
        assert!(IsolationForest::fit(&bank, 5, 1, 0).is_err());
        assert!(IsolationForest::fit(&bank, 0, 4, 0).is_err());
    }
}
