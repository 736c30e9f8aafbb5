//! Dense f64 tensors with a reverse-mode autodiff tape.
//!
//! Everything in this crate computes in f64. The tape records enough to
//! backpropagate through the model math and the transducer loss; gradient
//! correctness is checked against central finite differences (see
//! [`grad_check`]).

mod check;
pub(crate) mod kernels;
mod tape;

pub use check::grad_check;
pub use tape::{Tape, Var};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: left {left:?} vs right {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("invalid shape {shape:?} for {len} data elements")]
    BadShape { shape: Vec<usize>, len: usize },
    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("backward called twice without clearing gradients")]
    DoubleBackward,
    #[error("index {index} out of bounds for {what} of size {size}")]
    IndexOutOfBounds {
        what: &'static str,
        index: usize,
        size: usize,
    },
    #[error("{0}")]
    Contract(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Dense row-major f64 tensor. Plain data: attaching it to a tape is what
/// makes it differentiable.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(try_from = "TensorWire", into = "TensorWire")]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

/// Serialized form; deserialization re-validates the shape/data contract.
#[derive(serde::Serialize, serde::Deserialize)]
struct TensorWire {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl From<Tensor> for TensorWire {
    fn from(t: Tensor) -> Self {
        Self {
            shape: t.shape,
            data: t.data,
        }
    }
}

impl TryFrom<TensorWire> for Tensor {
    type Error = TensorError;
    fn try_from(w: TensorWire) -> Result<Self> {
        Tensor::new(w.shape, w.data)
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::BadShape {
                shape,
                len: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; numel],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = if r == 0 { 0 } else { rows[0].len() };
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Self {
            shape: vec![r, c],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.iter().all(|&d| d == 1)
    }

    /// Size of the last axis; scalars report 1.
    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// Number of rows when the tensor is viewed as `rows x last_dim`.
    pub fn row_count(&self) -> usize {
        if self.shape.is_empty() {
            1
        } else {
            self.shape[..self.shape.len() - 1].iter().product()
        }
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let w = self.last_dim();
        &self.data[r * w..(r + 1) * w]
    }

    pub fn value(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Stable 64-bit fingerprint of shape and exact bit pattern.
    pub fn bits_hash(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        };
        for &d in &self.shape {
            eat(&(d as u64).to_le_bytes());
        }
        for &v in &self.data {
            eat(&v.to_bits().to_le_bytes());
        }
        h
    }
}
