//! Central finite-difference gradient checks.
//!
//! These only evaluate losses forward, so they stay independent of the
//! tape's backward rules they are used to verify.
//!
//! Central differences carry round-off of order `1e-16 |L| / step`, so an
//! entry many orders below the largest gradient cannot be resolved. Each
//! check therefore floors the denominator at [`SCALE_FLOOR`] times the
//! largest analytic entry.

use super::{ParamStore, Tensor};

/// Denominator floor relative to the largest analytic gradient entry.
pub const SCALE_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name (or `"input"`) and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

impl GradCheckReport {
    fn empty() -> Self {
        Self { max_rel_error: 0.0, worst: None, checked: 0 }
    }

    fn record(&mut self, name: &str, index: usize, analytic: f64, numeric: f64, floor: f64) {
        let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor);
        self.checked += 1;
        if err > self.max_rel_error || self.worst.is_none() {
            self.max_rel_error = self.max_rel_error.max(err);
            self.worst = Some((name.to_string(), index));
        }
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

/// `|a - n| / max(|a|, |n|, 1e-7)`; the floor keeps near-zero gradients
/// from dominating through round-off.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-7)
}

fn floor_for<'a>(analytic: impl IntoIterator<Item = &'a Tensor>) -> f64 {
    let largest = analytic.into_iter().flat_map(|t| t.data()).fold(0.0f64, |m, v| m.max(v.abs()));
    (SCALE_FLOOR * largest).max(1e-7)
}

/// Compares `analytic[i]` with central differences of `loss` for every
/// scalar in `store`.
pub fn check_store(
    store: &ParamStore,
    analytic: &[Tensor],
    step: f64,
    loss: impl Fn(&ParamStore) -> f64,
) -> GradCheckReport {
    let mut report = GradCheckReport::empty();
    let floor = floor_for(analytic);
    let mut probe = store.clone();
    for p in 0..store.len() {
        for j in 0..store.value(p).len() {
            let original = store.value(p).data()[j];
            probe.value_mut(p).data_mut()[j] = original + step;
            let up = loss(&probe);
            probe.value_mut(p).data_mut()[j] = original - step;
            let down = loss(&probe);
            probe.value_mut(p).data_mut()[j] = original;
            let numeric = (up - down) / (2.0 * step);
            report.record(store.name(p), j, analytic[p].data()[j], numeric, floor);
        }
    }
    report
}

/// Same as [`check_store`] for a gradient with respect to an input tensor.
pub fn check_input(x: &Tensor, analytic: &Tensor, step: f64, loss: impl Fn(&Tensor) -> f64) -> GradCheckReport {
    let mut report = GradCheckReport::empty();
    let floor = floor_for([analytic]);
    let mut probe = x.clone();
    for j in 0..x.len() {
        let original = x.data()[j];
        probe.data_mut()[j] = original + step;
        let up = loss(&probe);
        probe.data_mut()[j] = original - step;
        let down = loss(&probe);
        probe.data_mut()[j] = original;
        report.record("input", j, analytic.data()[j], (up - down) / (2.0 * step), floor);
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cubic(x: &Tensor) -> f64 {
        x.data().iter().map(|v| v * v * v).sum()
    }

    #[test]
    fn correct_gradient_passes_and_wrong_one_fails() {
        let x = Tensor::row(&[0.5, -1.5, 2.0]);
        let good = x.map(|v| 3.0 * v * v);
        assert!(check_input(&x, &good, 1e-6, cubic).passes(1e-6));
        let mut bad = good.clone();
        bad.data_mut()[1] *= 1.001;
        let report = check_input(&x, &bad, 1e-6, cubic);
        assert!(!report.passes(1e-4));
        assert_eq!(report.worst, Some(("input".to_string(), 1)));
    }

    #[test]
    fn tiny_entries_are_judged_at_the_gradient_scale() {
        // d/dx of 1e-9 x is far below round-off of the large term.
        let loss = |x: &Tensor| 1e3 * x.data()[0] * x.data()[0] + 1e-9 * x.data()[1];
        let x = Tensor::row(&[3.0, 1.0]);
        let analytic = Tensor::row(&[6e3, 1e-9]);
        assert!(check_input(&x, &analytic, 1e-6, loss).passes(1e-4));
        // A wrong tiny entry of the same size as the large one still fails.
        let wrong = Tensor::row(&[6e3, 6e3]);
        assert!(!check_input(&x, &wrong, 1e-6, loss).passes(1e-4));
    }
}
