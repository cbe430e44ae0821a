use super::{DataError, TimeSeriesDataset};
use crate::numerics::Tensor;

/// One sample and the `H` steps before it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WindowPair<'a> {
    pub x0: &'a [f64],
    /// Oldest step first; ends at `index - 1`.
    pub hist: &'a [f64],
    pub index: usize,
    pub label: Option<u8>,
}

/// Flat storage for a set of windows over one series.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowSet {
    width: usize,
    history: usize,
    x0: Vec<f64>,
    hist: Vec<f64>,
    index: Vec<usize>,
    labels: Option<Vec<u8>>,
}

/// `floor((len - H - 1) / stride) + 1` windows ending at `H, H + stride, ...`.
pub fn make_windows(data: &TimeSeriesDataset, history: usize, stride: usize) -> Result<WindowSet, DataError> {
    if history == 0 || stride == 0 {
        return Err(DataError::Invalid("history and stride must be at least 1".into()));
    }
    let len = data.len();
    if len <= history {
        return Err(DataError::TooShort { needed: history + 1, got: len });
    }
    let count = (len - history - 1) / stride + 1;
    let width = data.n_channels();
    let mut set = WindowSet {
        width,
        history,
        x0: Vec::with_capacity(count * width),
        hist: Vec::with_capacity(count * width * history),
        index: Vec::with_capacity(count),
        labels: data.labels().map(|_| Vec::with_capacity(count)),
    };
    for i in 0..count {
        let t = history + i * stride;
        set.x0.extend_from_slice(data.row(t));
        set.hist.extend_from_slice(&data.values()[(t - history) * width..t * width]);
        set.index.push(t);
        if let (Some(out), Some(labels)) = (set.labels.as_mut(), data.labels()) {
            out.push(labels[t]);
        }
    }
    Ok(set)
}

impl WindowSet {
    /// Windows without history: each row of `samples` is one `x0`.
    pub fn from_samples(samples: &Tensor) -> Self {
        let (rows, width) = samples.dims2().expect("matrix");
        Self {
            width,
            history: 0,
            x0: samples.data().to_vec(),
            hist: Vec::new(),
            index: (0..rows).collect(),
            labels: None,
        }
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn history(&self) -> usize {
        self.history
    }

    pub fn labels(&self) -> Option<&[u8]> {
        self.labels.as_deref()
    }

    pub fn indices(&self) -> &[usize] {
        &self.index
    }

    pub fn get(&self, i: usize) -> WindowPair<'_> {
        let hw = self.history * self.width;
        WindowPair {
            x0: &self.x0[i * self.width..(i + 1) * self.width],
            hist: &self.hist[i * hw..(i + 1) * hw],
            index: self.index[i],
            label: self.labels.as_ref().map(|l| l[i]),
        }
    }

    /// Keeps windows for which `keep(i)` holds.
    pub fn filter(&self, keep: impl Fn(usize) -> bool) -> Self {
        let chosen: Vec<usize> = (0..self.len()).filter(|&i| keep(i)).collect();
        self.select(&chosen)
    }

    pub fn select(&self, chosen: &[usize]) -> Self {
        let hw = self.history * self.width;
        let mut out = Self {
            width: self.width,
            history: self.history,
            x0: Vec::with_capacity(chosen.len() * self.width),
            hist: Vec::with_capacity(chosen.len() * hw),
            index: Vec::with_capacity(chosen.len()),
            labels: self.labels.as_ref().map(|_| Vec::with_capacity(chosen.len())),
        };
        for &i in chosen {
            let w = self.get(i);
            out.x0.extend_from_slice(w.x0);
            out.hist.extend_from_slice(w.hist);
            out.index.push(w.index);
            if let (Some(l), Some(v)) = (out.labels.as_mut(), w.label) {
                l.push(v);
            }
        }
        out
    }

    /// `(x0, hist)` tensors for the given window indices; `hist` is `None`
    /// when the set has no history.
    pub fn batch(&self, chosen: &[usize]) -> (Tensor, Option<Tensor>) {
        let hw = self.history * self.width;
        let mut x = Vec::with_capacity(chosen.len() * self.width);
        let mut h = Vec::with_capacity(chosen.len() * hw);
        for &i in chosen {
            let w = self.get(i);
            x.extend_from_slice(w.x0);
            h.extend_from_slice(w.hist);
        }
        let x = Tensor::matrix(chosen.len(), self.width, x).expect("non-empty batch");
        let h = (hw > 0).then(|| Tensor::matrix(chosen.len(), hw, h).expect("non-empty batch"));
        (x, h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(len: usize, channels: usize) -> TimeSeriesDataset {
        let values = (0..len * channels).map(|v| v as f64).collect();
        let names = (0..channels).map(|c| format!("c{c}")).collect();
        TimeSeriesDataset::new(names, values, Some(vec![0; len])).unwrap()
    }

    #[test]
    fn window_counts() {
        assert_eq!(make_windows(&ramp(100, 1), 16, 1).unwrap().len(), 84);
        assert_eq!(make_windows(&ramp(17, 1), 16, 1).unwrap().len(), 1);
        assert_eq!(make_windows(&ramp(100, 1), 16, 100).unwrap().len(), 1);
        assert_eq!(make_windows(&ramp(100, 1), 16, 7).unwrap().len(), (100 - 16 - 1) / 7 + 1);
        assert!(matches!(make_windows(&ramp(16, 1), 16, 1), Err(DataError::TooShort { .. })));
        assert!(make_windows(&ramp(16, 1), 0, 1).is_err());
    }

    #[test]
    fn history_then_sample_reproduces_series() {
        let data = ramp(40, 3);
        let set = make_windows(&data, 5, 3).unwrap();
        for i in 0..set.len() {
            let w = set.get(i);
            let mut joined = w.hist.to_vec();
            joined.extend_from_slice(w.x0);
            let t = w.index;
            assert_eq!(joined, data.values()[(t - 5) * 3..(t + 1) * 3].to_vec());
            assert_eq!(w.label, Some(0));
        }
    }

    #[test]
    fn batch_shapes() {
        let set = make_windows(&ramp(30, 2), 4, 1).unwrap();
        let (x, h) = set.batch(&[0, 3, 5]);
        assert_eq!(x.shape(), &[3, 2]);
        assert_eq!(h.unwrap().shape(), &[3, 8]);
        assert_eq!(x.row_slice(1), set.get(3).x0);
    }

    #[test]
    fn sample_sets_have_no_history() {
        let set = WindowSet::from_samples(&Tensor::matrix(3, 2, vec![0.0; 6]).unwrap());
        let (x, h) = set.batch(&[0, 2]);
        assert_eq!(x.shape(), &[2, 2]);
        assert!(h.is_none());
    }
}
