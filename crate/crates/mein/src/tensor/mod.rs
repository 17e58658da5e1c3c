//! Reverse-mode automatic differentiation on a per-step tape.
//!
//! Parameters live outside the tape as plain [`Tensor`]s. Each training step
//! builds a fresh [`Graph`], binds parameters as leaves, computes a scalar
//! loss, runs [`Graph::backward`], and hands the harvested gradients to the
//! optimizer. Graph construction and backward are single-threaded; a tape is
//! owned by one worker.

mod adam;
mod graph;

pub use adam::Adam;
pub use graph::{Graph, NodeId};

use thiserror::Error;

/// Errors raised while building or differentiating a computation graph.
#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: expected rank {expected}, got shape {shape:?}")]
    BadRank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("{op}: index {index} out of bounds for shape {shape:?}")]
    IndexOutOfBounds {
        op: &'static str,
        index: usize,
        shape: Vec<usize>,
    },
    #[error("{op}: empty input list")]
    EmptyInput { op: &'static str },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("missing gradient for trainable parameter `{name}` (detached from the loss graph)")]
    MissingGrad { name: String },
    #[error("tensor data length {len} does not match shape {shape:?}")]
    BadData { len: usize, shape: Vec<usize> },
}

/// A plain dense float tensor: the storage for network parameters and any
/// value that outlives a single tape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f32>) -> Result<Self, TensorError> {
        let n: usize = shape.iter().product();
        if data.len() != n {
            return Err(TensorError::BadData {
                len: data.len(),
                shape: shape.to_vec(),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn scalar(v: f32) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    /// Fill with uniform samples from `[-bound, bound]`.
    pub fn fill_uniform<R: rand::Rng>(&mut self, rng: &mut R, bound: f32) {
        for v in &mut self.data {
            *v = rng.random_range(-bound..=bound);
        }
    }

    /// Xavier-style uniform init for a `[rows, cols]` weight matrix.
    pub fn fill_xavier<R: rand::Rng>(&mut self, rng: &mut R, fan_in: usize, fan_out: usize) {
        let bound = (6.0 / (fan_in + fan_out) as f32).sqrt();
        self.fill_uniform(rng, bound);
    }
}

/// Pull gradients for a set of bound parameters out of a graph after
/// backward. A parameter the loss never reached has no gradient buffer,
/// which signals a detached graph and is reported as an error.
pub fn collect_grads(
    graph: &Graph,
    named: &[(&'static str, NodeId)],
) -> Result<Vec<Vec<f32>>, TensorError> {
    named
        .iter()
        .map(|&(name, id)| {
            graph
                .grad(id)
                .map(|g| g.to_vec())
                .ok_or_else(|| TensorError::MissingGrad {
                    name: name.to_string(),
                })
        })
        .collect()
}

/// FNV-1a digest of a set of named tensors. Used to verify that a training
/// stage left a parameter set untouched.
pub fn param_digest<'a>(tensors: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    let mut eat = |bytes: &[u8]| {
        for &b in bytes {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
    };
    for (name, t) in tensors {
        eat(name.as_bytes());
        for &d in t.shape() {
            eat(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            eat(&v.to_bits().to_le_bytes());
        }
    }
    h
}

#[cfg(test)]
mod tests;
