//! Dense `f64` tensors with reverse-mode differentiation.
//!
//! A [`Tensor`] is an immutable value, optionally attached to a [`Graph`].
//! Operations on attached tensors are recorded on that graph, and
//! [`grad`] walks the record backwards. The backward rules are themselves
//! written with the same recorded operations, so calling [`grad`] with
//! `create_graph = true` yields gradients that can be differentiated again.
//! This is what the meta-update needs: the loss of the adapted model is
//! differentiated through the inner gradient step.
//!
//! ```
//! use fedtta_core::tensor::{grad, ops, Graph, Tensor};
//!
//! let graph = Graph::new();
//! let x = graph.leaf(&Tensor::vector(vec![1.0, 2.0]));
//! let cube = ops::mul(&ops::mul(&x, &x).unwrap(), &x).unwrap();
//! let g = grad(&ops::sum(&cube), &[&x], true).unwrap();
//! let h = grad(&ops::sum(&g[0]), &[&x], false).unwrap();
//! assert_eq!(h[0].data(), &[6.0, 12.0]);
//! ```

mod finite_diff;
mod graph;
pub mod ops;

use std::fmt;
use std::sync::Arc;

pub use finite_diff::{check_gradients, finite_diff_grad, GradCheck};
pub use graph::{grad, Graph};

use graph::NodeRef;

/// Row-major dense array of `f64`, optionally recorded on a [`Graph`].
#[derive(Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<[f64]>,
    node: Option<NodeRef>,
}

impl Tensor {
    /// Builds a detached tensor. Panics if `data.len()` disagrees with `shape`.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {shape:?} does not match {} values",
            data.len()
        );
        Self {
            shape,
            data: data.into(),
            node: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self::new(Vec::new(), vec![value])
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self::new(vec![data.len()], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        Self::new(vec![rows, cols], data)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self::new(shape.to_vec(), vec![value; shape.iter().product()])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(
            self.numel(),
            1,
            "item() on tensor of shape {:?}",
            self.shape
        );
        self.data[0]
    }

    /// `(rows, cols)` of a rank-2 tensor.
    pub fn dims2(&self) -> Option<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Some((r, c)),
            _ => None,
        }
    }

    pub fn is_attached(&self) -> bool {
        self.node.is_some()
    }

    pub fn graph(&self) -> Option<&Graph> {
        self.node.as_ref().map(|n| &n.graph)
    }

    /// Same values, no graph record.
    pub fn detach(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::clone(&self.data),
            node: None,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Row `i` of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[f64] {
        let (_, c) = self.dims2().expect("row() needs a rank-2 tensor");
        &self.data[i * c..(i + 1) * c]
    }

    /// Gathers rows of a rank-2 tensor into a new detached tensor.
    pub fn select_rows(&self, rows: &[usize]) -> Tensor {
        let (_, c) = self.dims2().expect("select_rows() needs a rank-2 tensor");
        let mut out = Vec::with_capacity(rows.len() * c);
        for &r in rows {
            out.extend_from_slice(self.row(r));
        }
        Tensor::matrix(rows.len(), c, out)
    }

    /// Detached `self - rate * step`, used for plain gradient updates.
    pub fn sgd_step(&self, step: &Tensor, rate: f64) -> Tensor {
        assert_eq!(self.shape, step.shape, "sgd_step shape mismatch");
        let data = self
            .data
            .iter()
            .zip(step.data.iter())
            .map(|(p, g)| p - rate * g)
            .collect();
        Tensor::new(self.shape.clone(), data)
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Arc<[f64]>, node: Option<NodeRef>) -> Self {
        Self { shape, data, node }
    }

    pub(crate) fn data_arc(&self) -> &Arc<[f64]> {
        &self.data
    }

    pub(crate) fn node(&self) -> Option<&NodeRef> {
        self.node.as_ref()
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut s = f.debug_struct("Tensor");
        s.field("shape", &self.shape);
        if self.numel() <= 16 {
            s.field("data", &&self.data[..]);
        }
        s.field("attached", &self.is_attached()).finish()
    }
}

impl PartialEq for Tensor {
    /// Value equality; graph attachment is ignored.
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data[..] == other.data[..]
    }
}

/// Pairwise summation in index order.
pub(crate) fn pairwise_sum(values: &[f64]) -> f64 {
    const BLOCK: usize = 32;
    if values.len() <= BLOCK {
        values.iter().sum()
    } else {
        let mid = values.len() / 2;
        pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
    }
}
