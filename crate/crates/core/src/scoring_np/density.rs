//! Kernel density and nearest-neighbour scores against a memory bank.

use super::{MemoryBank, NpError};

/// Additive floor inside the KDE log.
pub const KDE_FLOOR: f64 = 1e-8;

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Silverman's rule `h = 1.06 sigma M^(-1/5)`, with `sigma` the mean of the
/// per-dimension sample standard deviations.
pub fn silverman_bandwidth(bank: &MemoryBank) -> Result<f64, NpError> {
    let m = bank.len();
    if m < 2 {
        return Err(NpError::TooFewEntries { needed: 2, got: m });
    }
    let d = bank.dim();
    let mut mean = vec![0.0; d];
    for e in bank.iter() {
        for (acc, v) in mean.iter_mut().zip(e) {
            *acc += v;
        }
    }
    mean.iter_mut().for_each(|v| *v /= m as f64);
    let mut var = vec![0.0; d];
    for e in bank.iter() {
        for ((acc, v), mu) in var.iter_mut().zip(e).zip(&mean) {
            *acc += (v - mu) * (v - mu);
        }
    }
    let sigma = var.iter().map(|v| (v / (m - 1) as f64).sqrt()).sum::<f64>() / d as f64;
    if !(sigma > 0.0) {
        return Err(NpError::DegenerateBank);
    }
    Ok(1.06 * sigma * (m as f64).powf(-0.2))
}

fn kernel_norm(h: f64, d: usize) -> f64 {
    (2.0 * std::f64::consts::PI * h * h).powf(-(d as f64) / 2.0)
}

/// `-ln((1/M) sum_i K_h(eps, b_i) + 1e-8)` with an isotropic Gaussian kernel.
pub fn kde_score(eps: &[f64], bank: &MemoryBank, h: f64) -> Result<f64, NpError> {
    Ok(kde_score_grad(eps, bank, h, false)?.0)
}

/// KDE score and, when `with_grad`, its gradient with respect to `eps`.
pub fn kde_score_grad(eps: &[f64], bank: &MemoryBank, h: f64, with_grad: bool) -> Result<(f64, Vec<f64>), NpError> {
    if bank.is_empty() {
        return Err(NpError::TooFewEntries { needed: 1, got: 0 });
    }
    if !(h > 0.0 && h.is_finite()) {
        return Err(NpError::InvalidParameter("bandwidth must be positive"));
    }
    bank.check_dim(eps)?;
    let m = bank.len() as f64;
    let norm = kernel_norm(h, eps.len());
    let inv_two_h2 = 1.0 / (2.0 * h * h);
    let mut density = 0.0;
    let mut grad = if with_grad { vec![0.0; eps.len()] } else { Vec::new() };
    for b in bank.iter() {
        let k = norm * (-squared_distance(eps, b) * inv_two_h2).exp() / m;
        density += k;
        if with_grad {
            for ((g, x), y) in grad.iter_mut().zip(eps).zip(b) {
                *g -= k * (x - y) / (h * h);
            }
        }
    }
    let denom = density + KDE_FLOOR;
    // d/d eps of -ln(denom) is -(d density) / denom.
    grad.iter_mut().for_each(|g| *g = -*g / denom);
    Ok((-denom.ln(), grad))
}

/// Indices of the `k` nearest bank entries with their distances, nearest
/// first.
fn nearest(eps: &[f64], bank: &MemoryBank, k: usize) -> Result<Vec<(f64, usize)>, NpError> {
    if k == 0 || k > bank.len() {
        return Err(NpError::InvalidK { k, m: bank.len() });
    }
    bank.check_dim(eps)?;
    let mut dists: Vec<(f64, usize)> = bank.iter().enumerate().map(|(i, b)| (squared_distance(eps, b), i)).collect();
    if k < dists.len() {
        dists.select_nth_unstable_by(k - 1, |a, b| a.0.total_cmp(&b.0));
        dists.truncate(k);
    }
    dists.sort_by(|a, b| a.0.total_cmp(&b.0));
    Ok(dists.into_iter().map(|(d2, i)| (d2.sqrt(), i)).collect())
}

/// Mean Euclidean distance to the `k` nearest bank entries.
pub fn knn_score(eps: &[f64], bank: &MemoryBank, k: usize) -> Result<f64, NpError> {
    let near = nearest(eps, bank, k)?;
    Ok(near.iter().map(|(d, _)| d).sum::<f64>() / k as f64)
}

/// kNN score and its gradient; coincident neighbours contribute no gradient.
pub fn knn_score_grad(eps: &[f64], bank: &MemoryBank, k: usize) -> Result<(f64, Vec<f64>), NpError> {
    let near = nearest(eps, bank, k)?;
    let mut grad = vec![0.0; eps.len()];
    for &(dist, i) in &near {
        if dist > 0.0 {
            let b = bank.get(i).expect("index from bank");
            for ((g, x), y) in grad.iter_mut().zip(eps).zip(b) {
                *g += (x - y) / (dist * k as f64);
            }
        }
    }
    Ok((near.iter().map(|(d, _)| d).sum::<f64>() / k as f64, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::SplitRng;

    fn bank_from(rows: &[Vec<f64>]) -> MemoryBank {
        let mut bank = MemoryBank::new(rows.len().max(1), rows[0].len()).unwrap();
        for r in rows {
            bank.push(r).unwrap();
        }
        bank
    }

    fn random_bank(m: usize, d: usize, rng: &mut SplitRng) -> MemoryBank {
        let rows: Vec<Vec<f64>> = (0..m).map(|_| rng.normals(d)).collect();
        bank_from(&rows)
    }

    #[test]
    fn silverman_spot_value() {
        // Alternating +-c with c chosen so the n-1 standard deviation is 1.
        let c = (31.0f64 / 32.0).sqrt();
        let rows: Vec<Vec<f64>> = (0..32).map(|i| vec![if i % 2 == 0 { c } else { -c }]).collect();
        let h = silverman_bandwidth(&bank_from(&rows)).unwrap();
        assert!((h - 0.53).abs() < 1e-12, "{h}");
    }

    #[test]
    fn silverman_degenerate_and_small() {
        assert_eq!(silverman_bandwidth(&bank_from(&vec![vec![1.0, 2.0]; 5])), Err(NpError::DegenerateBank));
        assert!(matches!(silverman_bandwidth(&bank_from(&[vec![1.0]])), Err(NpError::TooFewEntries { .. })));
    }

    #[test]
    fn silverman_scales_with_data() {
        let mut rng = SplitRng::new(5);
        let rows: Vec<Vec<f64>> = (0..40).map(|_| rng.normals(3)).collect();
        let doubled: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().map(|v| 2.0 * v).collect()).collect();
        let h1 = silverman_bandwidth(&bank_from(&rows)).unwrap();
        let h2 = silverman_bandwidth(&bank_from(&doubled)).unwrap();
        assert!((h2 - 2.0 * h1).abs() < 1e-12);
    }

    #[test]
    fn kde_self_point() {
        let s = kde_score(&[0.7], &bank_from(&[vec![0.7]]), 1.0).unwrap();
        let expected = -(1.0 / (2.0 * std::f64::consts::PI).sqrt() + 1e-8).ln();
        assert!((s - expected).abs() < 1e-15);
        assert!((s - 0.9189).abs() < 1e-4);
    }

    #[test]
    fn kde_far_point_hits_floor() {
        let s = kde_score(&[1e6, 0.0], &bank_from(&[vec![0.0, 0.0], vec![1.0, 1.0]]), 1.0).unwrap();
        assert!((s + (1e-8f64).ln()).abs() < 1e-12);
        assert!((s - 18.42).abs() < 0.01);
    }

    #[test]
    fn kde_is_bank_permutation_invariant() {
        let mut rng = SplitRng::new(8);
        let rows: Vec<Vec<f64>> = (0..30).map(|_| rng.normals(2)).collect();
        let mut reversed = rows.clone();
        reversed.reverse();
        let x = [0.1, -0.2];
        let a = kde_score(&x, &bank_from(&rows), 0.4).unwrap();
        let b = kde_score(&x, &bank_from(&reversed), 0.4).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn knn_examples() {
        assert_eq!(knn_score(&[3.0, 4.0], &bank_from(&[vec![0.0, 0.0]]), 1).unwrap(), 5.0);
        let bank = bank_from(&[vec![1.0, 2.0], vec![5.0, 5.0]]);
        assert_eq!(knn_score(&[1.0, 2.0], &bank, 1).unwrap(), 0.0);
        assert_eq!(knn_score(&[1.0, 2.0], &bank, 3), Err(NpError::InvalidK { k: 3, m: 2 }));
        assert!(knn_score(&[1.0, 2.0], &bank, 0).is_err());
    }

    #[test]
    fn knn_matches_exhaustive_sort() {
        let mut rng = SplitRng::new(12);
        let bank = random_bank(50, 4, &mut rng);
        let x = rng.normals(4);
        let mut all: Vec<f64> = bank.iter().map(|b| squared_distance(&x, b).sqrt()).collect();
        all.sort_by(f64::total_cmp);
        let oracle = all[..5].iter().sum::<f64>() / 5.0;
        assert_eq!(knn_score(&x, &bank, 5).unwrap(), oracle);
    }

    fn finite_diff(f: impl Fn(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
        (0..x.len())
            .map(|i| {
                let mut up = x.to_vec();
                let mut down = x.to_vec();
                up[i] += 1e-6;
                down[i] -= 1e-6;
                (f(&up) - f(&down)) / 2e-6
            })
            .collect()
    }

    #[test]
    fn score_gradients_match_finite_differences() {
        let mut rng = SplitRng::new(3);
        let bank = random_bank(20, 3, &mut rng);
        let x = rng.normals(3);
        let (_, g) = kde_score_grad(&x, &bank, 0.7, true).unwrap();
        let fd = finite_diff(|p| kde_score(p, &bank, 0.7).unwrap(), &x);
        for (a, n) in g.iter().zip(&fd) {
            assert!(crate::numerics::gradcheck::relative_error(*a, *n) < 1e-5);
        }
        let (_, g) = knn_score_grad(&x, &bank, 4).unwrap();
        let fd = finite_diff(|p| knn_score(p, &bank, 4).unwrap(), &x);
        for (a, n) in g.iter().zip(&fd) {
            assert!(crate::numerics::gradcheck::relative_error(*a, *n) < 1e-5);
        }
    }
}
