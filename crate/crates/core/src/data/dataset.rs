use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::DataError;

/// Time-major matrix of channel values with optional 0/1 labels.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeriesDataset {
    channels: Vec<String>,
    values: Vec<f64>,
    labels: Option<Vec<u8>>,
}

impl TimeSeriesDataset {
    pub fn new(channels: Vec<String>, values: Vec<f64>, labels: Option<Vec<u8>>) -> Result<Self, DataError> {
        if channels.is_empty() {
            return Err(DataError::Invalid("dataset needs at least one channel".into()));
        }
        if values.len() % channels.len() != 0 {
            return Err(DataError::Invalid("value count is not a multiple of the channel count".into()));
        }
        let len = values.len() / channels.len();
        if let Some(l) = &labels {
            if l.len() != len {
                return Err(DataError::Invalid(format!("{} labels for {len} time steps", l.len())));
            }
            if l.iter().any(|&v| v > 1) {
                return Err(DataError::Invalid("labels must be 0 or 1".into()));
            }
        }
        Ok(Self { channels, values, labels })
    }

    pub fn len(&self) -> usize {
        self.values.len() / self.channels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn n_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn channels(&self) -> &[String] {
        &self.channels
    }

    pub fn row(&self, t: usize) -> &[f64] {
        let c = self.channels.len();
        &self.values[t * c..(t + 1) * c]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn labels(&self) -> Option<&[u8]> {
        self.labels.as_deref()
    }

    /// Rows `range` as a new dataset.
    pub fn slice(&self, range: Range<usize>) -> Self {
        let c = self.channels.len();
        Self {
            channels: self.channels.clone(),
            values: self.values[range.start * c..range.end * c].to_vec(),
            labels: self.labels.as_ref().map(|l| l[range].to_vec()),
        }
    }

    /// Columns reordered so that column `j` of the result is column
    /// `order[j]` of `self`.
    pub fn reorder_columns(&self, order: &[usize]) -> Result<Self, DataError> {
        let c = self.channels.len();
        let mut seen = vec![false; c];
        for &j in order {
            if j >= c || std::mem::replace(&mut seen[j], true) {
                return Err(DataError::Invalid("column order must be a permutation".into()));
            }
        }
        if order.len() != c {
            return Err(DataError::Invalid("column order must be a permutation".into()));
        }
        let mut values = Vec::with_capacity(self.values.len());
        for t in 0..self.len() {
            let row = self.row(t);
            values.extend(order.iter().map(|&j| row[j]));
        }
        Ok(Self {
            channels: order.iter().map(|&j| self.channels[j].clone()).collect(),
            values,
            labels: self.labels.clone(),
        })
    }

    pub fn with_labels(mut self, labels: Option<Vec<u8>>) -> Result<Self, DataError> {
        self.labels = None;
        Self::new(self.channels, self.values, labels)
    }

    pub fn to_csv<W: std::io::Write>(&self, writer: W) -> Result<(), DataError> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header: Vec<&str> = self.channels.iter().map(String::as_str).collect();
        if self.labels.is_some() {
            header.push("label");
        }
        w.write_record(&header)?;
        for t in 0..self.len() {
            let mut record: Vec<String> = self.row(t).iter().map(|v| v.to_string()).collect();
            if let Some(l) = &self.labels {
                record.push(l[t].to_string());
            }
            w.write_record(&record)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), DataError> {
        let file = std::fs::File::create(path).map_err(|e| DataError::Io(path.display().to_string(), e.to_string()))?;
        self.to_csv(std::io::BufWriter::new(file))
    }

    /// Parses a header row of channel names, numeric rows and an optional
    /// trailing `label` column. Data rows are numbered from 1.
    pub fn from_csv<R: std::io::Read>(reader: R) -> Result<Self, DataError> {
        let mut r = csv::ReaderBuilder::new().has_headers(true).flexible(true).from_reader(reader);
        let header: Vec<String> = r.headers()?.iter().map(|h| h.trim().to_string()).collect();
        let has_label = header.last().is_some_and(|h| h == "label");
        let channels: Vec<String> = header[..header.len() - usize::from(has_label)].to_vec();
        if channels.is_empty() {
            return Err(DataError::Invalid("header names no channels".into()));
        }
        let mut values = Vec::new();
        let mut labels = has_label.then(Vec::new);
        for (i, record) in r.records().enumerate() {
            let row = i + 1;
            let record = record?;
            if record.len() != header.len() {
                return Err(DataError::Ragged { row, expected: header.len(), got: record.len() });
            }
            for (j, cell) in record.iter().take(channels.len()).enumerate() {
                match cell.trim().parse::<f64>() {
                    Ok(v) if v.is_finite() => values.push(v),
                    _ => return Err(DataError::NonNumeric { row, column: channels[j].clone(), value: cell.to_string() }),
                }
            }
            if let Some(labels) = labels.as_mut() {
                let cell = record.get(channels.len()).unwrap_or("").trim();
                match cell {
                    "0" | "0.0" => labels.push(0),
                    "1" | "1.0" => labels.push(1),
                    _ => return Err(DataError::Label { row, value: cell.to_string() }),
                }
            }
        }
        if values.is_empty() {
            return Err(DataError::Invalid("no data rows".into()));
        }
        Self::new(channels, values, labels)
    }
}

pub fn load_csv(path: &Path) -> Result<TimeSeriesDataset, DataError> {
    let file = std::fs::File::open(path).map_err(|e| DataError::Io(path.display().to_string(), e.to_string()))?;
    TimeSeriesDataset::from_csv(std::io::BufReader::new(file))
}

/// Per-channel z-score statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    /// Statistics over every row of `data`; constant channels get unit scale.
    pub fn fit(data: &TimeSeriesDataset) -> Result<Self, DataError> {
        let (n, c) = (data.len(), data.n_channels());
        if n < 2 {
            return Err(DataError::TooShort { needed: 2, got: n });
        }
        let mut mean = vec![0.0; c];
        for t in 0..n {
            for (m, v) in mean.iter_mut().zip(data.row(t)) {
                *m += v / n as f64;
            }
        }
        let mut var = vec![0.0; c];
        for t in 0..n {
            for ((s, v), m) in var.iter_mut().zip(data.row(t)).zip(&mean) {
                *s += (v - m) * (v - m) / (n - 1) as f64;
            }
        }
        let std = var.into_iter().map(|v| if v > 0.0 { v.sqrt() } else { 1.0 }).collect();
        Ok(Self { mean, std })
    }

    pub fn apply(&self, data: &TimeSeriesDataset) -> Result<TimeSeriesDataset, DataError> {
        let c = data.n_channels();
        if self.mean.len() != c {
            return Err(DataError::Invalid(format!("normalizer has {} channels, data has {c}", self.mean.len())));
        }
        let values = data
            .values()
            .iter()
            .enumerate()
            .map(|(i, v)| (v - self.mean[i % c]) / self.std[i % c])
            .collect();
        TimeSeriesDataset::new(data.channels.clone(), values, data.labels.clone())
    }
}

/// Time-ordered 70/15/15 train/validation/test row ranges.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Splits {
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
}

pub fn split_70_15_15(len: usize) -> Splits {
    let a = len * 70 / 100;
    let b = len * 85 / 100;
    Splits { train: 0..a, val: a..b, test: b..len }
}

/// Channel-to-node assignment: each node owns the same number of channels.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeGrouping {
    names: Vec<String>,
    /// Channel indices per node, in feature order.
    members: Vec<Vec<usize>>,
}

impl NodeGrouping {
    /// Parses `{"node": ["channel", ...], ...}`; node order is file order.
    pub fn from_json(text: &str, channels: &[String]) -> Result<Self, DataError> {
        let map: serde_json::Map<String, serde_json::Value> =
            serde_json::from_str(text).map_err(|e| DataError::Grouping(e.to_string()))?;
        let mut names = Vec::new();
        let mut members = Vec::new();
        let mut seen = vec![false; channels.len()];
        for (node, value) in map {
            let list: Vec<String> =
                serde_json::from_value(value).map_err(|_| DataError::Grouping(format!("node `{node}` must list channel names")))?;
            let mut idx = Vec::with_capacity(list.len());
            for ch in list {
                let j = channels
                    .iter()
                    .position(|c| *c == ch)
                    .ok_or_else(|| DataError::Grouping(format!("unknown channel `{ch}`")))?;
                if std::mem::replace(&mut seen[j], true) {
                    return Err(DataError::Grouping(format!("channel `{ch}` assigned twice")));
                }
                idx.push(j);
            }
            names.push(node);
            members.push(idx);
        }
        Self::from_members(names, members, channels.len(), &seen)
    }

    /// Consecutive equal-size groups: `nodes` groups of `channels / nodes`.
    pub fn contiguous(channels: usize, nodes: usize) -> Result<Self, DataError> {
        if nodes == 0 || channels % nodes != 0 {
            return Err(DataError::Grouping(format!("{channels} channels cannot form {nodes} equal nodes")));
        }
        let d = channels / nodes;
        let members = (0..nodes).map(|n| (n * d..(n + 1) * d).collect()).collect();
        let names = (0..nodes).map(|n| format!("node{n}")).collect();
        Self::from_members(names, members, channels, &vec![true; channels])
    }

    fn from_members(names: Vec<String>, members: Vec<Vec<usize>>, channels: usize, seen: &[bool]) -> Result<Self, DataError> {
        if let Some(j) = seen.iter().position(|s| !s) {
            return Err(DataError::Grouping(format!("channel {j} is not assigned to any node")));
        }
        if members.is_empty() || members[0].is_empty() || members.iter().any(|m| m.len() != members[0].len()) {
            return Err(DataError::Grouping("every node needs the same, non-zero number of channels".into()));
        }
        debug_assert_eq!(members.iter().map(Vec::len).sum::<usize>(), channels);
        Ok(Self { names, members })
    }

    pub fn nodes(&self) -> usize {
        self.members.len()
    }

    pub fn features(&self) -> usize {
        self.members[0].len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Column permutation that lays channels out node by node.
    pub fn column_order(&self) -> Vec<usize> {
        self.members.iter().flatten().copied().collect()
    }
}
