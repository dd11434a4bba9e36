use crate::error::{Error, Result};

/// A `horizon × dim` block of actions, stored row-major (one row per time
/// step). This is the quantity the diffusion chain denoises.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionChunk {
    horizon: usize,
    dim: usize,
    values: Vec<f64>,
}

impl ActionChunk {
    pub fn zeros(horizon: usize, dim: usize) -> Self {
        ActionChunk {
            horizon,
            dim,
            values: vec![0.0; horizon * dim],
        }
    }

    pub fn from_vec(horizon: usize, dim: usize, values: Vec<f64>) -> Result<Self> {
        if horizon == 0 || dim == 0 {
            return Err(Error::invalid("action chunk needs horizon >= 1 and dim >= 1"));
        }
        if values.len() != horizon * dim {
            return Err(Error::invalid(format!(
                "action chunk {horizon}x{dim} needs {} values, got {}",
                horizon * dim,
                values.len()
            )));
        }
        Ok(ActionChunk { horizon, dim, values })
    }

    /// Builds a chunk by repeating one action `horizon` times.
    pub fn constant(horizon: usize, action: &[f64]) -> Self {
        let mut values = Vec::with_capacity(horizon * action.len());
        for _ in 0..horizon {
            values.extend_from_slice(action);
        }
        ActionChunk {
            horizon,
            dim: action.len(),
            values,
        }
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.values[t * self.dim..(t + 1) * self.dim]
    }

    pub fn row_mut(&mut self, t: usize) -> &mut [f64] {
        &mut self.values[t * self.dim..(t + 1) * self.dim]
    }

    pub fn rows(&self) -> std::slice::ChunksExact<'_, f64> {
        self.values.chunks_exact(self.dim)
    }

    pub fn first(&self) -> &[f64] {
        self.row(0)
    }

    pub fn last(&self) -> &[f64] {
        self.row(self.horizon - 1)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.values
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn same_shape(&self, other: &ActionChunk) -> bool {
        self.horizon == other.horizon && self.dim == other.dim
    }

    /// Euclidean norm over every entry.
    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn distance(&self, other: &ActionChunk) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }
}
