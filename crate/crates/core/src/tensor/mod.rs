//! Dense f64 tensors and reverse-mode automatic differentiation.
//!
//! [`Tensor`] is a plain value: a shape plus shared storage. A tensor may
//! additionally be attached to a [`Tape`], in which case ops consuming it are
//! recorded and [`Tape::backprop`] can later replay the recording in reverse.
//! Detached tensors participate in ops as constants (no gradient flows).
//!
//! Layout conventions used throughout the crate:
//! - activations are rank-2 `[channels, time]`, row-major (each channel's
//!   time series is contiguous);
//! - convolution kernels are rank-3 `[out_ch, in_ch, taps]` with tap index
//!   increasing toward the present;
//! - per-channel vectors are rank-1 `[channels]`; scalars are `[1]`.

mod fd;
mod tape;

pub use fd::finite_diff_gradient;
pub use tape::{Gradients, Tape};

use std::sync::Arc;

/// Errors surfaced by tensor construction, primitive ops, and backprop.
#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("{op}: operand belongs to a different tape")]
    ForeignTape { op: &'static str },
    #[error("backprop: loss must be a scalar attached to this tape")]
    BadLoss,
    #[error("softmax_cross_entropy: no active (non-ignored) target positions")]
    NoActiveTargets,
    #[error("{op}: invalid argument: {detail}")]
    InvalidArgument { op: &'static str, detail: String },
    #[error("finite_diff_gradient: epsilon must be positive, got {0}")]
    NonPositiveEpsilon(f64),
    #[error("finite_diff_gradient: loss function is not deterministic (repeated calls disagree)")]
    NonDeterministicLoss,
}

/// Identifies a node on a particular tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct NodeRef {
    pub tape_id: u64,
    pub index: usize,
}

/// A dense f64 tensor with shared storage and an optional tape attachment.
#[derive(Debug, Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
    pub(crate) node: Option<NodeRef>,
}

impl Tensor {
    /// Builds a tensor from a shape and matching flat row-major data.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::ShapeMismatch {
                op: "Tensor::new",
                detail: format!("shape {:?} wants {} elements, data has {}", shape, numel, data.len()),
            });
        }
        Ok(Tensor { shape, data: Arc::new(data), node: None })
    }

    /// All-zeros tensor of the given shape.
    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: Arc::new(vec![0.0; numel]), node: None }
    }

    /// Rank-1 scalar wrapper, shape `[1]`.
    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![1], data: Arc::new(vec![v]), node: None }
    }

    /// Fills a tensor of the given shape from a flat-index generator.
    pub fn from_fn(shape: Vec<usize>, mut f: impl FnMut(usize) -> f64) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(&mut f).collect();
        Tensor { shape, data: Arc::new(data), node: None }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable access to the underlying storage (copy-on-write if shared).
    /// Mutation detaches the tensor from any tape: the recorded value would
    /// no longer describe this tensor.
    pub fn data_mut(&mut self) -> &mut Vec<f64> {
        self.node = None;
        Arc::make_mut(&mut self.data)
    }

    /// Returns a detached copy sharing the same storage.
    pub fn detached(&self) -> Tensor {
        Tensor { shape: self.shape.clone(), data: Arc::clone(&self.data), node: None }
    }

    /// True when the tensor is attached to some tape.
    pub fn is_attached(&self) -> bool {
        self.node.is_some()
    }

    /// Convenience for rank-2 tensors: number of rows (channels).
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Convenience for rank-2 tensors: number of columns (time steps).
    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    /// The single value of a `[1]` tensor.
    pub fn scalar_value(&self) -> f64 {
        debug_assert_eq!(self.numel(), 1, "scalar_value on non-scalar tensor");
        self.data[0]
    }

    /// Element of a rank-2 tensor at (row, col).
    pub fn at2(&self, r: usize, c: usize) -> f64 {
        debug_assert_eq!(self.shape.len(), 2);
        self.data[r * self.shape[1] + c]
    }

    /// Element of a rank-3 tensor at (i, j, k).
    pub fn at3(&self, i: usize, j: usize, k: usize) -> f64 {
        debug_assert_eq!(self.shape.len(), 3);
        self.data[(i * self.shape[1] + j) * self.shape[2] + k]
    }

    pub(crate) fn data_arc(&self) -> Arc<Vec<f64>> {
        Arc::clone(&self.data)
    }

    pub(crate) fn from_arc(shape: Vec<usize>, data: Arc<Vec<f64>>, node: Option<NodeRef>) -> Self {
        Tensor { shape, data, node }
    }

    /// True when every element is finite.
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Largest absolute difference between two equally-shaped tensors' data.
pub fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape(), "max_abs_diff: shape mismatch");
    a.data()
        .iter()
        .zip(b.data().iter())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Relative error with a floor on the denominator, used by gradient checks:
/// `|a - b| / max(|a|, |b|, floor)`.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn test_tensor_new_rejects_wrong_element_count() {
        let err = Tensor::new(vec![2, 3], vec![0.0; 5]).unwrap_err();
        assert!(matches!(err, TensorError::ShapeMismatch { .. }), "got {err:?}");
    }

    #[test]
    fn test_tensor_row_major_indexing() {
        // [[1,2,3],[4,5,6]] stored row-major.
        let t = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(t.at2(0, 0), 1.0);
        assert_eq!(t.at2(0, 2), 3.0);
        assert_eq!(t.at2(1, 0), 4.0);
        assert_eq!(t.at2(1, 2), 6.0);
    }

    #[test]
    fn test_tensor_rank3_indexing() {
        let t = Tensor::from_fn(vec![2, 3, 2], |i| i as f64);
        // flat index (i*3 + j)*2 + k
        assert_eq!(t.at3(0, 0, 0), 0.0);
        assert_eq!(t.at3(0, 0, 1), 1.0);
        assert_eq!(t.at3(1, 2, 1), 11.0);
    }

    #[test]
    fn test_data_mut_detaches_and_copies_on_write() {
        let a = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let mut b = a.clone();
        b.data_mut()[0] = 9.0;
        assert_eq!(a.data(), &[1.0, 2.0], "original must be unaffected");
        assert_eq!(b.data(), &[9.0, 2.0]);
    }

    #[test]
    fn test_rel_err_uses_denominator_floor() {
        assert!((rel_err(2.0, 1.0, 1e-3) - 0.5).abs() < 1e-15);
        // Tiny values fall back to the floor instead of dividing by ~0.
        assert!((rel_err(1e-9, 0.0, 1e-3) - 1e-6).abs() < 1e-12);
    }
}
