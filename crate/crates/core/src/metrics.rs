//! Point-wise and event-level detection metrics, plus a rank-based AUROC.
//!
//! Zero denominators: when there are neither predicted nor true positives,
//! precision, recall and F1 are all 1; any other `0 / 0` is 0.

use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("length mismatch: {pred} predictions vs {truth} labels")]
    Length { pred: usize, truth: usize },
    #[error("tolerance must be non-negative, got {0}")]
    Tolerance(i64),
    #[error("AUROC needs both classes present")]
    OneClass,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

impl ConfusionCounts {
    pub fn from_labels(pred: &[u8], truth: &[u8]) -> Result<Self, MetricsError> {
        check_len(pred, truth)?;
        let mut c = Self::default();
        for (&p, &t) in pred.iter().zip(truth) {
            match (p != 0, t != 0) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        Ok(c)
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

fn check_len(pred: &[u8], truth: &[u8]) -> Result<(), MetricsError> {
    if pred.len() == truth.len() {
        Ok(())
    } else {
        Err(MetricsError::Length { pred: pred.len(), truth: truth.len() })
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn f1(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointwiseMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub accuracy: f64,
    pub counts: ConfusionCounts,
}

pub fn pointwise_metrics(pred: &[u8], truth: &[u8]) -> Result<PointwiseMetrics, MetricsError> {
    let counts = ConfusionCounts::from_labels(pred, truth)?;
    let accuracy = ratio(counts.tp + counts.tn, counts.total());
    if counts.tp + counts.fp == 0 && counts.tp + counts.fn_ == 0 {
        return Ok(PointwiseMetrics { precision: 1.0, recall: 1.0, f1: 1.0, accuracy, counts });
    }
    let precision = ratio(counts.tp, counts.tp + counts.fp);
    let recall = ratio(counts.tp, counts.tp + counts.fn_);
    Ok(PointwiseMetrics { precision, recall, f1: f1(precision, recall), accuracy, counts })
}

/// Maximal runs of non-zero entries.
pub fn runs(labels: &[u8]) -> Vec<Range<usize>> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, &l) in labels.iter().enumerate() {
        match (l != 0, start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                out.push(s..i);
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        out.push(s..labels.len());
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tau: usize,
    pub events: usize,
    pub detected_events: usize,
    pub prediction_runs: usize,
    pub false_alarm_runs: usize,
}

/// Event `[a, b)` is detected if a prediction falls in
/// `[a, max(b, a + tau + 1))`. A prediction run is a false alarm when each
/// of its points is more than `tau` away from every event. Recall is over
/// events, precision over prediction runs.
pub fn event_metrics(pred: &[u8], truth: &[u8], tau: i64) -> Result<EventMetrics, MetricsError> {
    check_len(pred, truth)?;
    if tau < 0 {
        return Err(MetricsError::Tolerance(tau));
    }
    let tau = tau as usize;
    let events = runs(truth);
    let pred_runs = runs(pred);

    let detected = events
        .iter()
        .filter(|e| {
            let end = e.end.max(e.start + tau + 1).min(pred.len());
            pred[e.start..end].iter().any(|&p| p != 0)
        })
        .count();
    let distance = |t: usize, e: &Range<usize>| {
        if t < e.start {
            e.start - t
        } else if t >= e.end {
            t + 1 - e.end
        } else {
            0
        }
    };
    let false_alarms = pred_runs
        .iter()
        .filter(|r| (r.start..r.end).all(|t| events.iter().all(|e| distance(t, e) > tau)))
        .count();

    let (precision, recall) = if events.is_empty() && pred_runs.is_empty() {
        (1.0, 1.0)
    } else {
        (ratio(pred_runs.len() - false_alarms, pred_runs.len()), ratio(detected, events.len()))
    };
    Ok(EventMetrics {
        precision,
        recall,
        f1: f1(precision, recall),
        tau,
        events: events.len(),
        detected_events: detected,
        prediction_runs: pred_runs.len(),
        false_alarm_runs: false_alarms,
    })
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half (Mann-Whitney with average ranks).
pub fn auroc(scores: &[f64], truth: &[u8]) -> Result<f64, MetricsError> {
    if scores.len() != truth.len() {
        return Err(MetricsError::Length { pred: scores.len(), truth: truth.len() });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        order[i..=j].iter().for_each(|&k| ranks[k] = avg);
        i = j + 1;
    }
    let pos = truth.iter().filter(|&&t| t != 0).count();
    let neg = truth.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(MetricsError::OneClass);
    }
    let rank_sum: f64 = ranks.iter().zip(truth).filter(|(_, &t)| t != 0).map(|(r, _)| r).sum();
    Ok((rank_sum - (pos * (pos + 1)) as f64 / 2.0) / (pos * neg) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub pointwise: PointwiseMetrics,
    pub event: EventMetrics,
}

pub fn report(pred: &[u8], truth: &[u8], tau: i64) -> Result<MetricsReport, MetricsError> {
    Ok(MetricsReport { pointwise: pointwise_metrics(pred, truth)?, event: event_metrics(pred, truth, tau)? })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn labels(len: usize, ones: &[Range<usize>]) -> Vec<u8> {
        let mut v = vec![0; len];
        for r in ones {
            v[r.clone()].iter_mut().for_each(|x| *x = 1);
        }
        v
    }

    #[test]
    fn perfect_prediction() {
        let t = labels(20, &[3..7, 12..13]);
        let m = pointwise_metrics(&t, &t).unwrap();
        assert_eq!((m.precision, m.recall, m.f1, m.accuracy), (1.0, 1.0, 1.0, 1.0));
    }

    #[test]
    fn counts_example() {
        // TP=8, FP=2, FN=2, TN=88
        let truth = labels(100, &[0..10]);
        let pred = labels(100, &[0..8, 50..52]);
        let m = pointwise_metrics(&pred, &truth).unwrap();
        assert_eq!(m.counts, ConfusionCounts { tp: 8, fp: 2, fn_: 2, tn: 88 });
        assert!((m.precision - 0.8).abs() < 1e-15);
        assert!((m.recall - 0.8).abs() < 1e-15);
        assert!((m.f1 - 0.8).abs() < 1e-15);
        assert!((m.accuracy - 0.96).abs() < 1e-15);
    }

    #[test]
    fn all_negative_convention() {
        let m = pointwise_metrics(&[0, 0, 0], &[0, 0, 0]).unwrap();
        assert_eq!((m.precision, m.recall, m.f1, m.accuracy), (1.0, 1.0, 1.0, 1.0));
        let m = pointwise_metrics(&[0, 0], &[1, 0]).unwrap();
        assert_eq!((m.precision, m.recall, m.f1), (0.0, 0.0, 0.0));
        assert!(pointwise_metrics(&[0], &[0, 1]).is_err());
    }

    #[test]
    fn event_examples() {
        let truth = labels(1000, &[100..200]);
        let pred = labels(1000, &[103..104]);
        assert_eq!(event_metrics(&pred, &truth, 10).unwrap().recall, 1.0);

        let pred = labels(1000, &[103..104, 900..905]);
        let e = event_metrics(&pred, &truth, 10).unwrap();
        assert_eq!(e.false_alarm_runs, 1);
        assert_eq!(e.precision, 0.5);

        let truth = labels(1000, &[100..200, 500..600]);
        let pred = labels(1000, &[150..160]);
        assert_eq!(event_metrics(&pred, &truth, 10).unwrap().recall, 0.5);
        assert!(event_metrics(&pred, &truth, -1).is_err());
    }

    #[test]
    fn prediction_just_after_short_event_within_tolerance() {
        let truth = labels(100, &[10..12]);
        let pred = labels(100, &[15..16]);
        let e = event_metrics(&pred, &truth, 5).unwrap();
        assert_eq!((e.recall, e.false_alarm_runs), (1.0, 0));
        let e = event_metrics(&pred, &truth, 3).unwrap();
        assert_eq!((e.recall, e.false_alarm_runs), (0.0, 1));
    }

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1]).unwrap(), 1.0);
        assert_eq!(auroc(&[0.9, 0.8, 0.2, 0.1], &[0, 0, 1, 1]).unwrap(), 0.0);
        assert_eq!(auroc(&[0.5, 0.5], &[0, 1]).unwrap(), 0.5);
        assert!(auroc(&[0.5, 0.5], &[1, 1]).is_err());
    }

    proptest! {
        #[test]
        fn pointwise_matches_confusion_oracle(pairs in prop::collection::vec((0u8..2, 0u8..2), 1..200)) {
            let pred: Vec<u8> = pairs.iter().map(|p| p.0).collect();
            let truth: Vec<u8> = pairs.iter().map(|p| p.1).collect();
            let m = pointwise_metrics(&pred, &truth).unwrap();
            let tp = pairs.iter().filter(|p| **p == (1, 1)).count();
            let fp = pairs.iter().filter(|p| **p == (1, 0)).count();
            let fn_ = pairs.iter().filter(|p| **p == (0, 1)).count();
            prop_assert_eq!(m.counts.total(), pairs.len());
            prop_assert_eq!((m.counts.tp, m.counts.fp, m.counts.fn_), (tp, fp, fn_));
            if tp + fp > 0 {
                prop_assert_eq!(m.precision, tp as f64 / (tp + fp) as f64);
            }
            if tp + fn_ > 0 {
                prop_assert_eq!(m.recall, tp as f64 / (tp + fn_) as f64);
            }
        }

        #[test]
        fn event_recall_ignores_event_length(len in 1usize..300, latency in 0usize..20) {
            let truth = labels(1000, &[100..100 + len]);
            let hit = 100 + latency;
            let pred = labels(1000, &[hit..hit + 1]);
            let e = event_metrics(&pred, &truth, 20).unwrap();
            prop_assert_eq!(e.recall, 1.0);
        }

        #[test]
        fn auroc_matches_pair_counting(points in prop::collection::vec((0i32..20, 0u8..2), 2..60)) {
            let scores: Vec<f64> = points.iter().map(|p| p.0 as f64).collect();
            let truth: Vec<u8> = points.iter().map(|p| p.1).collect();
            let pos: Vec<f64> = points.iter().filter(|p| p.1 == 1).map(|p| p.0 as f64).collect();
            let neg: Vec<f64> = points.iter().filter(|p| p.1 == 0).map(|p| p.0 as f64).collect();
            prop_assume!(!pos.is_empty() && !neg.is_empty());
            let mut wins = 0.0;
            for a in &pos {
                for b in &neg {
                    wins += if a > b { 1.0 } else if a == b { 0.5 } else { 0.0 };
                }
            }
            let expected = wins / (pos.len() * neg.len()) as f64;
            prop_assert!((auroc(&scores, &truth).unwrap() - expected).abs() < 1e-12);
        }
    }
}
