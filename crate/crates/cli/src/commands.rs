use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, ensure, Context, Result};
use dtd_core::data::{
    load_csv, make_windows, split_70_15_15, synth_generate, NodeGrouping, Normalizer, SyntheticSpec, TimeSeriesDataset,
    WindowSet,
};
use dtd_core::detector::{fit_pot, label, window_seed, Detector, GpdFit, PotConfig, ScoreTrace, TracePoint};
use dtd_core::diffusion::forward_diffuse;
use dtd_core::metrics::{auroc, report, MetricsReport};
use dtd_core::numerics::{SplitRng, Tensor};
use dtd_core::predictor::{NoisePredictor, Variant};
use dtd_core::trainer::{train, write_log, EpochSummary, TrainConfig, TrainedModel};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;

pub const CHECKPOINT_VERSION: u32 = 1;

/// Everything `score`, `export-graph` and `export-surface` need.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub version: u32,
    /// Input columns in the order the predictor sees them.
    pub channels: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub node_names: Option<Vec<String>>,
    pub normalizer: Normalizer,
    pub stride: usize,
    pub train: TrainConfig,
    pub model: TrainedModel,
}

impl Checkpoint {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading checkpoint {}", path.display()))?;
        let ck: Self = serde_json::from_str(&text).with_context(|| format!("parsing checkpoint {}", path.display()))?;
        ensure!(ck.version == CHECKPOINT_VERSION, "checkpoint version {} is not supported", ck.version);
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    /// Reorders columns by name and applies the stored normalisation.
    pub fn prepare(&self, data: &TimeSeriesDataset) -> Result<TimeSeriesDataset> {
        let order = self
            .channels
            .iter()
            .map(|name| {
                data.channels().iter().position(|c| c == name).ok_or_else(|| anyhow!("data has no column `{name}`"))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(self.normalizer.apply(&data.reorder_columns(&order)?)?)
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_file(path, text.as_bytes())
}

/// Writes through a temporary sibling so a failed run leaves no partial file.
fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let tmp = path.with_extension("partial");
    fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("writing {}", path.display()))
}

fn csv_bytes(f: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    f(&mut buf)?;
    Ok(buf)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Split {
    Train,
    Val,
    Test,
    All,
}

fn split_range(len: usize, split: Split) -> std::ops::Range<usize> {
    let s = split_70_15_15(len);
    match split {
        Split::Train => s.train,
        Split::Val => s.val,
        Split::Test => s.test,
        Split::All => 0..len,
    }
}

/// Windows over one split with time indices relative to the full series.
fn split_windows(data: &TimeSeriesDataset, split: Split, history: usize, stride: usize) -> Result<(WindowSet, usize)> {
    let range = split_range(data.len(), split);
    let offset = range.start;
    let part = data.slice(range);
    let windows = make_windows(&part, history, stride).with_context(|| format!("windowing the {split:?} split"))?;
    Ok((windows, offset))
}

pub fn cmd_synth(spec: &Path, out: &Path) -> Result<usize> {
    let text = fs::read_to_string(spec).with_context(|| format!("reading spec {}", spec.display()))?;
    let spec = SyntheticSpec::from_json(&text)?;
    let data = synth_generate(&spec)?;
    write_file(out, &csv_bytes(|b| Ok(data.to_csv(b)?))?)?;
    Ok(data.len())
}

pub struct TrainReport {
    pub checkpoint: PathBuf,
    pub iterations: usize,
    pub epochs: Vec<EpochSummary>,
}

/// Trains on the normal windows of the 70% split; writes `checkpoint.json`, `train_log.csv` and
/// `epochs.csv` under `config.out`.
pub fn cmd_train(config: &RunConfig) -> Result<TrainReport> {
    let data_path = config.data.as_ref().ok_or_else(|| anyhow!("no data file: set `data` or pass --data"))?;
    let raw = load_csv(data_path)?;
    let history = config.train.predictor.history;
    ensure!(history >= 1, "history must be at least 1");

    let grouping = match (&config.grouping, config.nodes) {
        (Some(path), _) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading grouping {}", path.display()))?;
            Some(NodeGrouping::from_json(&text, raw.channels())?)
        }
        (None, 0) => None,
        (None, n) => Some(NodeGrouping::contiguous(raw.n_channels(), n)?),
    };
    let spatial = match config.variant {
        Some(Variant::Spatiotemporal) => {
            ensure!(grouping.is_some(), "the spatiotemporal variant needs `grouping` or `nodes`");
            true
        }
        Some(Variant::Mlp) => false,
        None => grouping.is_some(),
    };
    let (data, nodes, d, node_names) = match &grouping {
        Some(g) if spatial => (raw.reorder_columns(&g.column_order())?, g.nodes(), g.features(), Some(g.names().to_vec())),
        _ => (raw.clone(), 1, raw.n_channels(), None),
    };

    let splits = split_70_15_15(data.len());
    let normalizer = Normalizer::fit(&data.slice(splits.train.clone()))?;
    let data = normalizer.apply(&data)?;
    let (windows, offset) = split_windows(&data, Split::Train, history, config.stride)?;
    // Training sees normal data only: drop windows touching a labelled row.
    let windows = match data.labels() {
        Some(labels) => windows.filter(|i| {
            let t = offset + windows.indices()[i];
            labels[t - history..=t].iter().all(|&l| l == 0)
        }),
        None => windows,
    };
    ensure!(!windows.is_empty(), "the training split has no normal windows");
    let train_config = config.train_config(nodes, d, spatial);

    let out = train(&windows, &train_config)?;
    let iterations = out.log.len();

    let checkpoint = Checkpoint {
        version: CHECKPOINT_VERSION,
        channels: data.channels().to_vec(),
        node_names,
        normalizer,
        stride: config.stride,
        train: train_config,
        model: out.model,
    };
    let ck_path = config.out.join("checkpoint.json");
    write_file(&config.out.join("train_log.csv"), &csv_bytes(|b| Ok(write_log(&out.log, b)?))?)?;
    write_file(&config.out.join("epochs.csv"), &csv_bytes(|b| write_epochs(&out.epochs, b))?)?;
    checkpoint.save(&ck_path)?;
    Ok(TrainReport { checkpoint: ck_path, iterations, epochs: out.epochs })
}

fn write_epochs(epochs: &[EpochSummary], w: &mut Vec<u8>) -> Result<()> {
    let opt = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
    writeln!(w, "epoch,l_dm,l_branch,l_total,val_l_dm,val_noise_norm")?;
    for e in epochs {
        writeln!(w, "{},{},{},{},{},{}", e.epoch, e.l_dm, e.l_branch, e.l_total, opt(e.val_l_dm), opt(e.val_noise_norm))?;
    }
    Ok(())
}

/// Scores every window of `split`; indices are rows of the input file.
pub fn score_trace(ck: &Checkpoint, data: &TimeSeriesDataset, split: Split, seed: u64, n_draws: usize) -> Result<ScoreTrace> {
    let detector = Detector::from_model(&ck.model, seed)?.with_draws(n_draws)?;
    let prepared = ck.prepare(data)?;
    let (windows, offset) = split_windows(&prepared, split, ck.train.predictor.history, ck.stride)?;
    let trace = detector.score_windows(&windows, seed)?;
    let points = trace.points().iter().map(|p| TracePoint { index: p.index + offset, ..*p }).collect();
    Ok(ScoreTrace::new(points)?)
}

pub fn cmd_score(checkpoint: &Path, data: &Path, split: Split, config: &RunConfig, out: &Path) -> Result<usize> {
    let ck = Checkpoint::load(checkpoint)?;
    let trace = score_trace(&ck, &load_csv(data)?, split, config.seed, config.n_draws)?;
    ensure!(trace.scores().iter().all(|s| s.is_finite()), "non-finite score");
    write_file(out, &csv_bytes(|b| Ok(trace.write_csv(b)?))?)?;
    Ok(trace.len())
}

fn read_trace(path: &Path) -> Result<ScoreTrace> {
    let file = File::open(path).with_context(|| format!("opening trace {}", path.display()))?;
    ScoreTrace::read_csv(file).with_context(|| format!("reading trace {}", path.display()))
}

/// Writes `labels.csv` and `gpd_fit.json` under `out`.
pub fn cmd_label(trace: &Path, calibration: &Path, pot: &PotConfig, out: &Path) -> Result<GpdFit> {
    let trace = read_trace(trace)?;
    let calib = read_trace(calibration)?;
    let fit = fit_pot(&calib.scores(), pot).context("fitting the calibration tail")?;
    let labelled = trace.with_labels(&label(&trace.scores(), &fit))?;
    write_file(&out.join("labels.csv"), &csv_bytes(|b| Ok(labelled.write_csv(b)?))?)?;
    write_json(&out.join("gpd_fit.json"), &fit)?;
    Ok(fit)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(flatten)]
    pub metrics: MetricsReport,
    /// Rank AUROC of the raw scores; absent when truth has one class.
    pub auroc: Option<f64>,
}

pub fn cmd_eval(labelled: &Path, truth: &Path, tau: i64, out: &Path) -> Result<EvalReport> {
    let trace = read_trace(labelled)?;
    let pred = trace.labels().ok_or_else(|| anyhow!("{} has no label column", labelled.display()))?;
    let data = load_csv(truth)?;
    let labels = data.labels().ok_or_else(|| anyhow!("{} has no label column", truth.display()))?;
    let truth: Vec<u8> = trace
        .points()
        .iter()
        .map(|p| labels.get(p.index).copied().ok_or_else(|| anyhow!("trace index {} beyond truth length {}", p.index, labels.len())))
        .collect::<Result<_>>()?;
    let metrics = report(&pred, &truth, tau)?;
    let report = EvalReport { metrics, auroc: auroc(&trace.scores(), &truth).ok() };
    write_json(out, &report)?;
    Ok(report)
}

pub fn cmd_export_graph(checkpoint: &Path, out: &Path) -> Result<usize> {
    let ck = Checkpoint::load(checkpoint)?;
    let predictor = NoisePredictor::from_state(&ck.model.predictor)?;
    let adj = predictor.adjacency().ok_or_else(|| anyhow!("checkpoint holds the flat predictor; it has no graph"))?;
    let n = adj.rows();
    let names = ck.node_names.unwrap_or_else(|| (0..n).map(|i| format!("node{i}")).collect());
    let bytes = csv_bytes(|w| {
        writeln!(w, "node,{}", names.join(","))?;
        for (i, name) in names.iter().enumerate() {
            let row: Vec<String> = adj.row_slice(i).iter().map(f64::to_string).collect();
            writeln!(w, "{name},{}", row.join(","))?;
        }
        Ok(())
    })?;
    write_file(out, &bytes)?;
    Ok(n)
}

/// Diffusion levels and sample count for `export-surface`.
#[derive(Debug, Clone, PartialEq)]
pub struct SurfaceGrid {
    pub levels: Vec<usize>,
    pub samples: usize,
    pub split: Split,
}

/// One row per (window, level): the squared norm of the predicted noise at
/// that level and the branch score of that prediction.
pub fn cmd_export_surface(checkpoint: &Path, data: &Path, grid: &SurfaceGrid, seed: u64, out: &Path) -> Result<usize> {
    ensure!(!grid.levels.is_empty() && grid.samples > 0, "surface grid needs levels and a positive sample count");
    let ck = Checkpoint::load(checkpoint)?;
    let detector = Detector::from_model(&ck.model, seed)?;
    let steps = detector.schedule().steps();
    if let Some(&k) = grid.levels.iter().find(|&&k| k >= steps) {
        bail!("level {k} outside 0..{steps}");
    }
    let prepared = ck.prepare(&load_csv(data)?)?;
    let (windows, offset) = split_windows(&prepared, grid.split, ck.train.predictor.history, ck.stride)?;
    let chosen: Vec<usize> = (0..windows.len().min(grid.samples)).collect();
    let (x, hist) = windows.batch(&chosen);
    let mut rows = Vec::new();
    for &k in &grid.levels {
        let mut eps = Vec::with_capacity(x.len());
        for &i in &chosen {
            let mut rng = SplitRng::new(window_seed(seed, windows.get(i).index)).split_index("surface.level", k as u64);
            eps.extend(rng.normals(x.cols()));
        }
        let eps = Tensor::matrix(x.rows(), x.cols(), eps)?;
        let xk = forward_diffuse(&x, k, &eps, detector.schedule())?;
        let eps_hat = detector.predictor().predict(&xk, hist.as_ref(), &vec![k; x.rows()])?;
        let scores = detector.score_noise(&eps_hat)?;
        for (r, &i) in chosen.iter().enumerate() {
            let norm: f64 = eps_hat.row_slice(r).iter().map(|v| v * v).sum();
            rows.push((windows.get(i).index + offset, k, norm, scores[r]));
        }
    }
    rows.sort_by_key(|r| (r.0, r.1));
    let bytes = csv_bytes(|w| {
        writeln!(w, "index,level,noise_norm,score")?;
        for (i, k, n, s) in &rows {
            writeln!(w, "{i},{k},{n},{s}")?;
        }
        Ok(())
    })?;
    write_file(out, &bytes)?;
    Ok(rows.len())
}

/// Parses `1,5,10`.
pub fn parse_levels(text: &str) -> Result<Vec<usize>> {
    text.split(',').map(|s| s.trim().parse().map_err(|_| anyhow!("bad level `{s}`"))).collect()
}
