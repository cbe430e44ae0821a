//! Mixed AR(1) series with injected faults.
//!
//! Each latent channel follows `z[t] = phi z[t-1] + sqrt(1 - phi^2) eta[t]`
//! (unit marginal variance, started from its stationary law); observed
//! channels are `y = A z`. Fault magnitudes are in units of the observed
//! channel's standard deviation `sqrt(sum_j A[c][j]^2)`.

use serde::{Deserialize, Serialize};

use super::{DataError, TimeSeriesDataset};
use crate::numerics::SplitRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultKind {
    /// Adds `magnitude * sigma` to each affected channel.
    MeanShift,
    /// Adds independent noise with standard deviation `magnitude * sigma`.
    VarianceBurst,
    /// Replaces affected channels by independent AR(1) draws scaled by
    /// `magnitude * sigma`, removing their cross-correlation.
    CorrelationBreak,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaultSpec {
    pub onset: usize,
    pub duration: usize,
    pub kind: FaultKind,
    pub magnitude: f64,
    /// Affected channels; all when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub channels: Option<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ArCoefficients {
    Shared(f64),
    PerChannel(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub channels: usize,
    pub length: usize,
    pub ar: ArCoefficients,
    /// `channels x channels`; identity when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mixing: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub faults: Vec<FaultSpec>,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn from_json(text: &str) -> Result<Self, DataError> {
        let spec: Self = serde_json::from_str(text).map_err(|e| DataError::Spec(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    fn ar_coefficients(&self) -> Vec<f64> {
        match &self.ar {
            ArCoefficients::Shared(phi) => vec![*phi; self.channels],
            ArCoefficients::PerChannel(v) => v.clone(),
        }
    }

    fn mixing_matrix(&self) -> Vec<Vec<f64>> {
        self.mixing.clone().unwrap_or_else(|| {
            (0..self.channels)
                .map(|i| (0..self.channels).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
                .collect()
        })
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |msg: String| Err(DataError::Spec(msg));
        if self.channels == 0 || self.length < 2 {
            return bad("need at least one channel and two time steps".into());
        }
        let ar = self.ar_coefficients();
        if ar.len() != self.channels {
            return bad(format!("`ar` has {} entries for {} channels", ar.len(), self.channels));
        }
        if let Some(phi) = ar.iter().find(|p| !(p.abs() < 1.0)) {
            return bad(format!("AR coefficient {phi} outside (-1, 1)"));
        }
        if let Some(m) = &self.mixing {
            if m.len() != self.channels || m.iter().any(|r| r.len() != self.channels) {
                return bad(format!("`mixing` must be {0} x {0}", self.channels));
            }
            if m.iter().flatten().any(|v| !v.is_finite()) {
                return bad("`mixing` entries must be finite".into());
            }
        }
        for (i, f) in self.faults.iter().enumerate() {
            if f.duration == 0 || f.onset + f.duration > self.length {
                return bad(format!("fault {i} interval [{}, {}) outside series", f.onset, f.onset + f.duration));
            }
            if !f.magnitude.is_finite() || f.magnitude < 0.0 {
                return bad(format!("fault {i} magnitude must be finite and non-negative"));
            }
            if let Some(ch) = &f.channels {
                if ch.is_empty() || ch.iter().any(|&c| c >= self.channels) {
                    return bad(format!("fault {i} channel list invalid"));
                }
            }
        }
        Ok(())
    }
}

fn ar_path(len: usize, phi: f64, rng: &mut SplitRng) -> Vec<f64> {
    let innov = (1.0 - phi * phi).sqrt();
    let mut z = Vec::with_capacity(len);
    let mut prev = rng.normal();
    z.push(prev);
    for _ in 1..len {
        prev = phi * prev + innov * rng.normal();
        z.push(prev);
    }
    z
}

/// Deterministic in `spec.seed`; labels are 1 exactly on fault intervals.
pub fn synth_generate(spec: &SyntheticSpec) -> Result<TimeSeriesDataset, DataError> {
    spec.validate()?;
    let (c, len) = (spec.channels, spec.length);
    let ar = spec.ar_coefficients();
    let mixing = spec.mixing_matrix();
    let root = SplitRng::new(spec.seed);

    let latent: Vec<Vec<f64>> =
        (0..c).map(|j| ar_path(len, ar[j], &mut root.split_index("synth.latent", j as u64))).collect();
    let mut values = vec![0.0; len * c];
    for t in 0..len {
        for i in 0..c {
            values[t * c + i] = (0..c).map(|j| mixing[i][j] * latent[j][t]).sum();
        }
    }
    let sigma: Vec<f64> = mixing.iter().map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt()).collect();

    let mut labels = vec![0u8; len];
    for (n, fault) in spec.faults.iter().enumerate() {
        let all: Vec<usize> = (0..c).collect();
        let channels = fault.channels.as_ref().unwrap_or(&all);
        let span = fault.onset..fault.onset + fault.duration;
        let frng = root.split_index("synth.fault", n as u64);
        for &ch in channels {
            let scale = fault.magnitude * sigma[ch];
            let mut rng = frng.split_index("channel", ch as u64);
            match fault.kind {
                FaultKind::MeanShift => span.clone().for_each(|t| values[t * c + ch] += scale),
                FaultKind::VarianceBurst => span.clone().for_each(|t| values[t * c + ch] += scale * rng.normal()),
                FaultKind::CorrelationBreak => {
                    let fresh = ar_path(fault.duration, ar[ch], &mut rng);
                    for (t, z) in span.clone().zip(fresh) {
                        values[t * c + ch] = scale * z;
                    }
                }
            }
        }
        labels[span].iter_mut().for_each(|l| *l = 1);
    }
    let names = (0..c).map(|i| format!("ch{i}")).collect();
    TimeSeriesDataset::new(names, values, Some(labels))
}
