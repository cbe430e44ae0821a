use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use super::NpError;
use crate::numerics::Tensor;

/// Bounded FIFO of predicted noises from normal data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MemoryBank {
    capacity: usize,
    dim: usize,
    entries: VecDeque<Vec<f64>>,
}

impl MemoryBank {
    pub fn new(capacity: usize, dim: usize) -> Result<Self, NpError> {
        if capacity == 0 || dim == 0 {
            return Err(NpError::InvalidParameter("bank capacity and dimension must be positive"));
        }
        Ok(Self { capacity, dim, entries: VecDeque::with_capacity(capacity) })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }

    /// Appends `eps`, evicting the oldest entry when full.
    pub fn push(&mut self, eps: &[f64]) -> Result<(), NpError> {
        if eps.len() != self.dim {
            return Err(NpError::Dimension { expected: self.dim, got: eps.len() });
        }
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back(eps.to_vec());
        Ok(())
    }

    /// Pushes every row of `batch` in order.
    pub fn push_rows(&mut self, batch: &Tensor) -> Result<(), NpError> {
        for r in 0..batch.rows() {
            self.push(batch.row_slice(r))?;
        }
        Ok(())
    }

    /// Oldest first.
    pub fn iter(&self) -> impl Iterator<Item = &[f64]> {
        self.entries.iter().map(Vec::as_slice)
    }

    pub fn get(&self, i: usize) -> Option<&[f64]> {
        self.entries.get(i).map(Vec::as_slice)
    }

    pub(crate) fn check_dim(&self, eps: &[f64]) -> Result<(), NpError> {
        if eps.len() == self.dim {
            Ok(())
        } else {
            Err(NpError::Dimension { expected: self.dim, got: eps.len() })
        }
    }
}
