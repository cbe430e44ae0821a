use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{anyhow, Result};
use clap::{Parser, Subcommand};
use dtd_cli::commands::{parse_levels, TrainReport};
use dtd_cli::{
    cmd_eval, cmd_export_graph, cmd_export_surface, cmd_label, cmd_score, cmd_synth, cmd_train, RunConfig, Split,
    SurfaceGrid,
};

#[derive(Parser)]
#[command(name = "dtd", version, about = "Diffusion noise-prediction anomaly detection")]
struct Cli {
    /// `key = value` config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override any config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// kde, knn, iforest or ebm.
    #[arg(long, global = true)]
    branch: Option<String>,
    /// POT risk parameter.
    #[arg(long, global = true)]
    q: Option<f64>,
    /// Output file, or directory for `train` and `label`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Print the merged configuration and exit.
    #[arg(long, global = true)]
    show_config: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a labelled series from a JSON spec.
    Synth { spec: PathBuf },
    /// Train on the first 70% of a series.
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Score the windows of one split.
    Score {
        checkpoint: PathBuf,
        data: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: Split,
    },
    /// Fit the threshold on a calibration trace and label a trace.
    Label { trace: PathBuf, calibration: PathBuf },
    /// Point-wise and event-level metrics of a labelled trace.
    Eval { labelled: PathBuf, truth: PathBuf },
    /// Learned adjacency as an N x N CSV.
    ExportGraph { checkpoint: PathBuf },
    /// Noise norm and branch score over diffusion levels.
    ExportSurface {
        checkpoint: PathBuf,
        data: PathBuf,
        /// Comma-separated diffusion levels.
        #[arg(long, default_value = "1,10,50,100,250,500,999")]
        levels: String,
        #[arg(long, default_value_t = 200)]
        samples: usize,
        #[arg(long, value_enum, default_value = "test")]
        split: Split,
    },
}

fn merged_config(cli: &Cli) -> Result<RunConfig> {
    let mut config = RunConfig::default();
    if let Some(path) = &cli.config {
        config.apply_file(path)?;
    }
    for pair in &cli.set {
        config.apply_override(pair)?;
    }
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(branch) = &cli.branch {
        config.set("branch", branch)?;
    }
    if let Some(q) = cli.q {
        config.pot.q = q;
    }
    if let Some(out) = &cli.out {
        config.out = out.clone();
    }
    Ok(config)
}

fn run(cli: Cli) -> Result<()> {
    let mut config = merged_config(&cli)?;
    if cli.show_config {
        print!("{}", config.describe());
        return Ok(());
    }
    let need_out = || cli.out.clone().ok_or_else(|| anyhow!("--out is required"));
    match cli.command {
        Command::Synth { spec } => {
            let out = need_out()?;
            let rows = cmd_synth(&spec, &out)?;
            println!("wrote {rows} rows to {}", out.display());
        }
        Command::Train { data } => {
            if let Some(d) = data {
                config.data = Some(d);
            }
            let TrainReport { checkpoint, iterations, epochs } = cmd_train(&config)?;
            if let Some(last) = epochs.last() {
                println!("epoch {}: l_dm {:.5} l_branch {:.5} l_total {:.5}", last.epoch, last.l_dm, last.l_branch, last.l_total);
            }
            println!("{iterations} iterations; checkpoint {}", checkpoint.display());
        }
        Command::Score { checkpoint, data, split } => {
            let out = need_out()?;
            let n = cmd_score(&checkpoint, &data, split, &config, &out)?;
            println!("scored {n} windows into {}", out.display());
        }
        Command::Label { trace, calibration } => {
            let fit = cmd_label(&trace, &calibration, &config.pot, &config.out)?;
            println!("z_q = {} (t = {}, gamma = {}, sigma = {}, N_t = {})", fit.z_q, fit.t, fit.gamma, fit.sigma, fit.n_t);
        }
        Command::Eval { labelled, truth } => {
            let out = need_out()?;
            let r = cmd_eval(&labelled, &truth, config.tau, &out)?;
            println!(
                "point F1 {:.4}, event recall {:.4}, false-alarm runs {}",
                r.metrics.pointwise.f1, r.metrics.event.recall, r.metrics.event.false_alarm_runs
            );
        }
        Command::ExportGraph { checkpoint } => {
            let out = need_out()?;
            let n = cmd_export_graph(&checkpoint, &out)?;
            println!("wrote {n} x {n} adjacency to {}", out.display());
        }
        Command::ExportSurface { checkpoint, data, levels, samples, split } => {
            let out = need_out()?;
            let grid = SurfaceGrid { levels: parse_levels(&levels)?, samples, split };
            let n = cmd_export_surface(&checkpoint, &data, &grid, config.seed, &out)?;
            println!("wrote {n} grid rows to {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
