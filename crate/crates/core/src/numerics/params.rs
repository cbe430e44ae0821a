use serde::{Deserialize, Serialize};

use super::rng::SplitRng;
use super::tensor::Tensor;
use super::NumericsError;

/// Version written into every parameter container.
pub const PARAMS_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ParamRef {
    pub store: u32,
    pub index: usize,
}

/// Ordered, named set of trainable tensors.
///
/// `tag` distinguishes stores that share one tape (predictor vs energy
/// model); gradients are routed back by it.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    tag: u32,
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new(tag: u32) -> Self {
        Self { tag, names: Vec::new(), values: Vec::new() }
    }

    pub fn tag(&self) -> u32 {
        self.tag
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) -> Result<usize, NumericsError> {
        if self.names.iter().any(|n| n == name) {
            return Err(NumericsError::DuplicateParam(name.to_string()));
        }
        self.names.push(name.to_string());
        self.values.push(value);
        Ok(self.values.len() - 1)
    }

    /// Glorot-uniform initialised `fan_in x fan_out` weight.
    pub fn insert_glorot(
        &mut self,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut SplitRng,
    ) -> Result<usize, NumericsError> {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out).map(|_| rng.uniform(-limit, limit)).collect();
        self.insert(name, Tensor::matrix(fan_in, fan_out, data)?)
    }

    pub fn insert_zeros(&mut self, name: &str, rows: usize, cols: usize) -> Result<usize, NumericsError> {
        self.insert(name, Tensor::zeros(&[rows, cols]))
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn name(&self, index: usize) -> &str {
        &self.names[index]
    }

    pub fn value(&self, index: usize) -> &Tensor {
        &self.values[index]
    }

    pub fn value_mut(&mut self, index: usize) -> &mut Tensor {
        &mut self.values[index]
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index_of(name).map(|i| &self.values[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn snapshot(&self) -> ParamSnapshot {
        ParamSnapshot {
            version: PARAMS_FORMAT_VERSION,
            params: self
                .iter()
                .map(|(name, t)| NamedTensor { name: name.to_string(), shape: t.shape().to_vec(), data: t.data().to_vec() })
                .collect(),
        }
    }

    /// Overwrites values from a snapshot; names and shapes must match this
    /// store exactly.
    pub fn load(&mut self, snapshot: &ParamSnapshot) -> Result<(), NumericsError> {
        if snapshot.version != PARAMS_FORMAT_VERSION {
            return Err(NumericsError::Version(snapshot.version));
        }
        if snapshot.params.len() != self.len() {
            return Err(NumericsError::ParamCount { expected: self.len(), got: snapshot.params.len() });
        }
        for (i, entry) in snapshot.params.iter().enumerate() {
            if entry.name != self.names[i] || entry.shape != self.values[i].shape() {
                return Err(NumericsError::UnknownParam(entry.name.clone()));
            }
            self.values[i] = Tensor::new(entry.shape.clone(), entry.data.clone())?;
        }
        Ok(())
    }
}

/// Serialized form of a [`ParamStore`]: name, shape and flat data per entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamSnapshot {
    pub version: u32,
    pub params: Vec<NamedTensor>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn snapshot_roundtrip_through_json() {
        let mut rng = SplitRng::new(3);
        let mut store = ParamStore::new(0);
        store.insert_glorot("w", 3, 4, &mut rng).unwrap();
        store.insert_zeros("b", 1, 4).unwrap();
        let json = serde_json::to_string(&store.snapshot()).unwrap();
        let back: ParamSnapshot = serde_json::from_str(&json).unwrap();

        let mut fresh = ParamStore::new(0);
        fresh.insert_zeros("w", 3, 4).unwrap();
        fresh.insert_zeros("b", 1, 4).unwrap();
        fresh.load(&back).unwrap();
        assert_eq!(fresh, store);
    }

    #[test]
    fn load_rejects_wrong_version_and_shape() {
        let mut store = ParamStore::new(0);
        store.insert_zeros("w", 2, 2).unwrap();
        let mut snap = store.snapshot();
        snap.version = 99;
        assert!(store.load(&snap).is_err());
        let mut snap = store.snapshot();
        snap.params[0].shape = vec![4, 1];
        assert!(store.load(&snap).is_err());
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut store = ParamStore::new(0);
        store.insert_zeros("w", 1, 1).unwrap();
        assert!(store.insert_zeros("w", 1, 1).is_err());
    }
}
