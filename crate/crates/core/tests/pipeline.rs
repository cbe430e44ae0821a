//! Train on a small synthetic series, score, threshold and evaluate.

use dtd_core::data::{make_windows, synth_generate, ArCoefficients, FaultKind, FaultSpec, Normalizer, SyntheticSpec};
use dtd_core::detector::{fit_pot, label, Detector, PotConfig};
use dtd_core::diffusion::ScheduleConfig;
use dtd_core::metrics::event_metrics;
use dtd_core::predictor::PredictorConfig;
use dtd_core::scoring_np::NpConfig;
use dtd_core::scoring_p::EbmConfig;
use dtd_core::trainer::{train, Branch, TrainConfig, TrainedModel};

fn spec(length: usize, faults: Vec<FaultSpec>, seed: u64) -> SyntheticSpec {
    SyntheticSpec { channels: 3, length, ar: ArCoefficients::Shared(0.6), mixing: None, faults, seed }
}

fn config(branch: Branch) -> TrainConfig {
    TrainConfig {
        branch,
        epochs: 4,
        batch_size: 64,
        lr: 2e-3,
        seed: 5,
        schedule: ScheduleConfig { steps: 100, ..ScheduleConfig::default() },
        predictor: PredictorConfig { d: 3, history: 4, hidden: 32, steps: 100, ..PredictorConfig::default() },
        np: NpConfig { capacity: 512, ..NpConfig::default() },
        ebm: EbmConfig { hidden: 16, langevin_steps: 5, ..EbmConfig::default() },
        ..TrainConfig::default()
    }
}

#[test]
fn shifted_samples_score_above_normal_tail() {
    let normal = synth_generate(&spec(4000, vec![], 1)).unwrap();
    let norm = Normalizer::fit(&normal).unwrap();
    let windows = make_windows(&norm.apply(&normal).unwrap(), 4, 1).unwrap();
    let out = train(&windows, &config(Branch::Kde)).unwrap();
    let detector = Detector::from_model(&out.model, 0).unwrap();

    let calib = detector.score_windows(&out.validation, 11).unwrap().scores();
    let mut sorted = calib.clone();
    sorted.sort_by(f64::total_cmp);
    let p99 = sorted[(0.99 * sorted.len() as f64) as usize];

    // +5 sigma on every channel of the scored sample (data are z-scored),
    // history left clean.
    let mut above = 0;
    let n = 50;
    for i in 0..n {
        let w = out.validation.get(i);
        let shifted: Vec<f64> = w.x0.iter().map(|v| v + 5.0).collect();
        let s = detector.score_sample(&shifted, Some(w.hist), 1000 + i as u64).unwrap();
        above += usize::from(s > p99);
    }
    assert!(above >= n * 9 / 10, "{above}/{n} shifted samples above p99 = {p99}");
}

#[test]
fn serialized_model_scores_identically() {
    let normal = synth_generate(&spec(1500, vec![], 2)).unwrap();
    let windows = make_windows(&Normalizer::fit(&normal).unwrap().apply(&normal).unwrap(), 4, 1).unwrap();
    for branch in [Branch::Knn, Branch::Iforest, Branch::Ebm] {
        let out = train(&windows, &TrainConfig { epochs: 2, ..config(branch) }).unwrap();
        let text = serde_json::to_string(&out.model).unwrap();
        let back: TrainedModel = serde_json::from_str(&text).unwrap();
        let a = Detector::from_model(&out.model, 3).unwrap().score_windows(&out.validation, 4).unwrap();
        let b = Detector::from_model(&back, 3).unwrap().score_windows(&out.validation, 4).unwrap();
        assert_eq!(a, b, "{branch:?}");
    }
}

#[test]
fn mean_shift_event_detected_without_false_alarms() {
    let normal = synth_generate(&spec(5000, vec![], 3)).unwrap();
    let norm = Normalizer::fit(&normal).unwrap();
    let windows = make_windows(&norm.apply(&normal).unwrap(), 4, 1).unwrap();
    let out = train(&windows, &TrainConfig { val_fraction: 0.3, ..config(Branch::Kde) }).unwrap();
    let detector = Detector::from_model(&out.model, 0).unwrap();
    let calib = detector.score_windows(&out.validation, 1).unwrap().scores();
    let fit = fit_pot(&calib, &PotConfig::default()).unwrap();

    let fault = FaultSpec { onset: 600, duration: 150, kind: FaultKind::MeanShift, magnitude: 6.0, channels: None };
    let test = synth_generate(&spec(1200, vec![fault], 4)).unwrap();
    let test_windows = make_windows(&norm.apply(&test).unwrap(), 4, 1).unwrap();
    let trace = detector.score_windows(&test_windows, 2).unwrap();
    let pred = label(&trace.scores(), &fit);
    let truth = test_windows.labels().unwrap();
    let ev = event_metrics(&pred, truth, 50).unwrap();
    assert_eq!(ev.detected_events, 1);
    assert!(ev.false_alarm_runs <= 2, "{ev:?}");
}
