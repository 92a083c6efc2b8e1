//! Dense 64-bit tensors and a define-by-run reverse-mode tape.
//!
//! Parameters live in [`Tensor`]s owned by the model. Each forward pass builds
//! a fresh [`Tape`], copies parameters in as leaves, and `Tape::backward`
//! returns [`Gradients`] keyed by [`TensorId`], which are then accumulated into
//! the owning tensors.

mod gradcheck;
pub mod io;
mod kernels;
mod tape;

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

pub use gradcheck::{grad_check, GradCheckReport};
pub use tape::{BinaryOp, Gradients, Tape, UnaryOp, Var, COSINE_NORM_FLOOR};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

/// Identity of a parameter tensor across tapes. Clones share the id.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TensorId(u64);

impl TensorId {
    fn fresh() -> Self {
        TensorId(NEXT_ID.fetch_add(1, Ordering::Relaxed))
    }
}

#[derive(Debug, Clone)]
pub struct Tensor {
    id: TensorId,
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if numel(&shape) != data.len() {
            return Err(Error::shape(format!(
                "data length {} does not match shape {:?}",
                data.len(),
                shape
            )));
        }
        Ok(Tensor {
            id: TensorId::fresh(),
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let n = numel(&shape);
        Tensor {
            id: TensorId::fresh(),
            shape,
            data: vec![value; n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: Vec<usize>) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn scalar(value: f64) -> Self {
        Self::full(Vec::new(), value)
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        let n = data.len();
        Self::new(vec![n], data).expect("1-d shape always matches")
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    /// Build a matrix from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("ragged rows"));
        }
        Self::matrix(rows.len(), cols, rows.concat())
    }

    pub fn randn<R: Rng + ?Sized>(shape: Vec<usize>, std: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, std).expect("std must be finite and non-negative");
        let data = (0..numel(&shape)).map(|_| normal.sample(rng)).collect();
        Self::new(shape, data).expect("generated data matches shape")
    }

    pub fn uniform<R: Rng + ?Sized>(shape: Vec<usize>, bound: f64, rng: &mut R) -> Self {
        let data = (0..numel(&shape))
            .map(|_| rng.random_range(-bound..=bound))
            .collect();
        Self::new(shape, data).expect("generated data matches shape")
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn id(&self) -> TensorId {
        self.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Replace the values, keeping shape and identity.
    pub fn set_data(&mut self, data: Vec<f64>) -> Result<()> {
        if data.len() != self.data.len() {
            return Err(Error::shape(format!(
                "cannot assign {} values to tensor of shape {:?}",
                data.len(),
                self.shape
            )));
        }
        self.data = data;
        Ok(())
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, requires_grad: bool) {
        self.requires_grad = requires_grad;
        if !requires_grad {
            self.grad = None;
        }
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// `grad += delta`, allocating on first use. Ignored for frozen tensors.
    pub fn accumulate_grad(&mut self, delta: &[f64]) -> Result<()> {
        if !self.requires_grad {
            return Ok(());
        }
        if delta.len() != self.data.len() {
            return Err(Error::shape(format!(
                "gradient length {} does not match shape {:?}",
                delta.len(),
                self.shape
            )));
        }
        let grad = self.grad.get_or_insert_with(|| vec![0.0; delta.len()]);
        for (g, d) in grad.iter_mut().zip(delta) {
            *g += d;
        }
        Ok(())
    }

    pub fn scale_grad(&mut self, c: f64) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v *= c);
        }
    }

    /// Row `i` of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[f64] {
        assert_eq!(self.rank(), 2, "row() needs a matrix");
        let cols = self.shape[1];
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }
}

impl PartialEq for Tensor {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data == other.data
    }
}

/// Anything that owns named parameter tensors.
pub trait Parameterized {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor));
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor));

    fn accumulate_grads(&mut self, grads: &Gradients) -> Result<()> {
        let mut result = Ok(());
        self.visit_params_mut(&mut |_, t| {
            if result.is_ok() {
                if let Some(g) = grads.get(t.id()) {
                    result = t.accumulate_grad(g);
                }
            }
        });
        result
    }

    fn zero_grads(&mut self) {
        self.visit_params_mut(&mut |_, t| t.clear_grad());
    }

    fn trainable_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit_params(&mut |n, t| {
            if t.requires_grad() {
                names.push(n.to_string());
            }
        });
        names
    }
}

impl Parameterized for Vec<Tensor> {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        for (i, t) in self.iter().enumerate() {
            f(&format!("param.{i}"), t);
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (i, t) in self.iter_mut().enumerate() {
            f(&format!("param.{i}"), t);
        }
    }
}
