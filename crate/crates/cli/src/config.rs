//! `key = value` run configuration.
//!
//! Values come from defaults, then the config file, then `--set key=value`
//! overrides, then dedicated flags such as `--seed`. Unknown keys are
//! rejected. Lines starting with `#` are comments.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use dtd_core::detector::PotConfig;
use dtd_core::diffusion::ScheduleConfig;
use dtd_core::predictor::{PredictorConfig, Variant};
use dtd_core::scoring_np::NpConfig;
use dtd_core::scoring_p::EbmConfig;
use dtd_core::trainer::{Branch, TrainConfig};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub data: Option<PathBuf>,
    pub grouping: Option<PathBuf>,
    /// Contiguous equal-size node groups when no grouping file is given;
    /// 0 keeps the flat layout.
    pub nodes: usize,
    pub variant: Option<Variant>,
    pub out: PathBuf,
    pub seed: u64,
    pub stride: usize,
    pub tau: i64,
    pub n_draws: usize,
    pub pot: PotConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut train = TrainConfig::default();
        train.predictor.history = 16;
        Self {
            data: None,
            grouping: None,
            nodes: 0,
            variant: None,
            out: PathBuf::from("dtd-out"),
            seed: 0,
            stride: 1,
            tau: 50,
            n_draws: 1,
            pot: PotConfig::default(),
            train,
        }
    }
}

/// Every accepted key, in file order for `describe`.
pub const KEYS: &[&str] = &[
    "data", "grouping", "nodes", "variant", "out", "seed", "stride", "tau", "n_draws",
    "q", "t_quantile", "min_excesses",
    "branch", "lambda", "epochs", "batch_size", "lr", "lr_min", "warmup_epochs", "val_fraction", "max_iterations", "patience",
    "steps", "beta_start", "beta_end",
    "history", "hidden", "embed_dim", "cheb_order", "heads", "layers",
    "capacity", "k", "n_trees", "subsample", "margin",
    "ebm_hidden", "ebm_alpha", "step_size", "langevin_steps",
];

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| anyhow!("`{key}`: cannot parse `{value}`"))
}

fn optional<T: std::str::FromStr>(key: &str, value: &str) -> Result<Option<T>> {
    if value == "none" || value.is_empty() {
        Ok(None)
    } else {
        num(key, value).map(Some)
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let t = &mut self.train;
        match key {
            "data" => self.data = (value != "none").then(|| PathBuf::from(value)),
            "grouping" => self.grouping = (value != "none").then(|| PathBuf::from(value)),
            "nodes" => self.nodes = num(key, value)?,
            "variant" => {
                self.variant = match value {
                    "auto" => None,
                    "mlp" => Some(Variant::Mlp),
                    "spatiotemporal" => Some(Variant::Spatiotemporal),
                    _ => bail!("`variant`: expected auto, mlp or spatiotemporal, got `{value}`"),
                }
            }
            "out" => self.out = PathBuf::from(value),
            "seed" => self.seed = num(key, value)?,
            "stride" => self.stride = num(key, value)?,
            "tau" => self.tau = num(key, value)?,
            "n_draws" => self.n_draws = num(key, value)?,
            "q" => self.pot.q = num(key, value)?,
            "t_quantile" => self.pot.t_quantile = num(key, value)?,
            "min_excesses" => self.pot.min_excesses = num(key, value)?,
            "branch" => t.branch = value.parse().map_err(|e: String| anyhow!(e))?,
            "lambda" => t.lambda = num(key, value)?,
            "epochs" => t.epochs = num(key, value)?,
            "batch_size" => t.batch_size = num(key, value)?,
            "lr" => t.lr = num(key, value)?,
            "lr_min" => t.lr_min = optional(key, value)?,
            "warmup_epochs" => t.warmup_epochs = num(key, value)?,
            "val_fraction" => t.val_fraction = num(key, value)?,
            "max_iterations" => t.max_iterations = optional(key, value)?,
            "patience" => t.patience = optional(key, value)?,
            "steps" => t.schedule.steps = num(key, value)?,
            "beta_start" => t.schedule.beta_start = num(key, value)?,
            "beta_end" => t.schedule.beta_end = num(key, value)?,
            "history" => t.predictor.history = num(key, value)?,
            "hidden" => t.predictor.hidden = num(key, value)?,
            "embed_dim" => t.predictor.embed_dim = num(key, value)?,
            "cheb_order" => t.predictor.cheb_order = num(key, value)?,
            "heads" => t.predictor.heads = num(key, value)?,
            "layers" => t.predictor.layers = num(key, value)?,
            "capacity" => t.np.capacity = num(key, value)?,
            "k" => t.np.k = num(key, value)?,
            "n_trees" => t.np.n_trees = num(key, value)?,
            "subsample" => t.np.subsample = num(key, value)?,
            "margin" => t.np.margin = num(key, value)?,
            "ebm_hidden" => t.ebm.hidden = num(key, value)?,
            "ebm_alpha" => t.ebm.alpha = num(key, value)?,
            "step_size" => t.ebm.step_size = num(key, value)?,
            "langevin_steps" => t.ebm.langevin_steps = num(key, value)?,
            other => bail!("unknown config key `{other}`"),
        }
        Ok(())
    }

    /// Applies `key = value` lines.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("{origin}:{}: expected `key = value`, got `{line}`", n + 1))?;
            self.set(key.trim(), value.trim()).with_context(|| format!("{origin}:{}", n + 1))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        self.apply_text(&text, &path.display().to_string())
    }

    /// `key=value` override as given to `--set`.
    pub fn apply_override(&mut self, pair: &str) -> Result<()> {
        let (key, value) = pair.split_once('=').ok_or_else(|| anyhow!("--set expects key=value, got `{pair}`"))?;
        self.set(key.trim(), value.trim())
    }

    /// Training config for data of `width` channels laid out as
    /// `nodes x d`; the diffusion step count follows the schedule.
    pub fn train_config(&self, nodes: usize, d: usize, spatial: bool) -> TrainConfig {
        let mut t = self.train.clone();
        t.seed = self.seed;
        t.predictor = PredictorConfig {
            variant: if spatial { Variant::Spatiotemporal } else { Variant::Mlp },
            d,
            nodes,
            steps: t.schedule.steps,
            ..t.predictor
        };
        t
    }

    /// Renders every key with its current value.
    pub fn describe(&self) -> String {
        let t = &self.train;
        let p = &t.predictor;
        let ScheduleConfig { steps, beta_start, beta_end } = t.schedule;
        let NpConfig { capacity, k, n_trees, subsample, margin } = t.np.clone();
        let EbmConfig { hidden: ebm_hidden, alpha, step_size, langevin_steps } = t.ebm.clone();
        let opt = |v: Option<usize>| v.map_or("none".to_string(), |v| v.to_string());
        let path = |v: &Option<PathBuf>| v.as_ref().map_or("none".to_string(), |p| p.display().to_string());
        let branch = match t.branch {
            Branch::Kde => "kde",
            Branch::Knn => "knn",
            Branch::Iforest => "iforest",
            Branch::Ebm => "ebm",
        };
        let variant = match self.variant {
            None => "auto",
            Some(Variant::Mlp) => "mlp",
            Some(Variant::Spatiotemporal) => "spatiotemporal",
        };
        let rows: Vec<(&str, String)> = vec![
            ("data", path(&self.data)),
            ("grouping", path(&self.grouping)),
            ("nodes", self.nodes.to_string()),
            ("variant", variant.into()),
            ("out", self.out.display().to_string()),
            ("seed", self.seed.to_string()),
            ("stride", self.stride.to_string()),
            ("tau", self.tau.to_string()),
            ("n_draws", self.n_draws.to_string()),
            ("q", self.pot.q.to_string()),
            ("t_quantile", self.pot.t_quantile.to_string()),
            ("min_excesses", self.pot.min_excesses.to_string()),
            ("branch", branch.into()),
            ("lambda", t.lambda.to_string()),
            ("epochs", t.epochs.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("lr", t.lr.to_string()),
            ("lr_min", t.lr_min.map_or("none".to_string(), |v| v.to_string())),
            ("warmup_epochs", t.warmup_epochs.to_string()),
            ("val_fraction", t.val_fraction.to_string()),
            ("max_iterations", opt(t.max_iterations)),
            ("patience", opt(t.patience)),
            ("steps", steps.to_string()),
            ("beta_start", beta_start.to_string()),
            ("beta_end", beta_end.to_string()),
            ("history", p.history.to_string()),
            ("hidden", p.hidden.to_string()),
            ("embed_dim", p.embed_dim.to_string()),
            ("cheb_order", p.cheb_order.to_string()),
            ("heads", p.heads.to_string()),
            ("layers", p.layers.to_string()),
            ("capacity", capacity.to_string()),
            ("k", k.to_string()),
            ("n_trees", n_trees.to_string()),
            ("subsample", subsample.to_string()),
            ("margin", margin.to_string()),
            ("ebm_hidden", ebm_hidden.to_string()),
            ("ebm_alpha", alpha.to_string()),
            ("step_size", step_size.to_string()),
            ("langevin_steps", langevin_steps.to_string()),
        ];
        debug_assert_eq!(rows.len(), KEYS.len());
        let mut s = String::new();
        for (k, v) in rows {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }
}
