//! Command-line pipeline: synthesise data, train, score, threshold,
//! evaluate and export analysis grids.

pub mod commands;
pub mod config;

pub use commands::{
    cmd_eval, cmd_export_graph, cmd_export_surface, cmd_label, cmd_score, cmd_synth, cmd_train, score_trace, Checkpoint,
    EvalReport, Split, SurfaceGrid,
};
pub use config::RunConfig;
