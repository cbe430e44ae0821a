//! Series ingestion, normalisation, splits, sliding windows and a synthetic
//! fault generator.

mod dataset;
mod synth;
mod windows;

pub use dataset::{load_csv, split_70_15_15, NodeGrouping, Normalizer, Splits, TimeSeriesDataset};
pub use synth::{synth_generate, ArCoefficients, FaultKind, FaultSpec, SyntheticSpec};
pub use windows::{make_windows, WindowPair, WindowSet};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DataError {
    #[error("{0}: {1}")]
    Io(String, String),
    #[error("csv: {0}")]
    Csv(String),
    #[error("row {row}: expected {expected} fields, got {got}")]
    Ragged { row: usize, expected: usize, got: usize },
    #[error("row {row}: column `{column}` has non-numeric value `{value}`")]
    NonNumeric { row: usize, column: String, value: String },
    #[error("row {row}: label must be 0 or 1, got `{value}`")]
    Label { row: usize, value: String },
    #[error("series too short: need {needed} rows, got {got}")]
    TooShort { needed: usize, got: usize },
    #[error("node grouping: {0}")]
    Grouping(String),
    #[error("synthetic spec: {0}")]
    Spec(String),
    #[error("{0}")]
    Invalid(String),
}

impl From<csv::Error> for DataError {
    fn from(e: csv::Error) -> Self {
        DataError::Csv(e.to_string())
    }
}

impl From<std::io::Error> for DataError {
    fn from(e: std::io::Error) -> Self {
        DataError::Io("io".into(), e.to_string())
    }
}
