//! Dense `f64` tensors and a define-by-run reverse-mode tape.
//!
//! A [`Tape`] is built fresh for every forward pass. Each operation appends a
//! node holding its output values and enough information to run its backward
//! rule; [`Tape::backward`] then walks the nodes in reverse insertion order,
//! which is a valid reverse topological order because inputs always precede
//! the nodes that consume them.
//!
//! Trainable parameters enter a tape through [`Tape::param`] or
//! [`Tape::embedding`]. Their gradients are collected into a [`ParamGrads`]
//! map rather than written back into the parameter store, so that several
//! tapes can be evaluated independently and reduced afterwards.

mod gradcheck;
mod kernels;
mod tape;

pub use gradcheck::{
    grad_check, numeric_gradient, relative_error, GradCheckReport, RELATIVE_ERROR_FLOOR,
};
pub use kernels::softmax;
pub use tape::{Activation, GradBuf, ParamGrads, ParamId, Tape, Var};

use crate::error::{Error, Result};

/// Row-major dense tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::Config(format!(
                "tensor dimensions must be positive, got {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != values.len() {
            return Err(Error::Reshape {
                from: vec![values.len()],
                to: shape,
            });
        }
        Ok(Self {
            shape,
            values,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self::new(shape.to_vec(), vec![0.0; numel]).expect("zero-sized tensor")
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Self::new(shape.to_vec(), vec![value; numel]).expect("zero-sized tensor")
    }

    pub fn scalar(value: f64) -> Self {
        Self::new(vec![1], vec![value]).unwrap()
    }

    pub fn vector(values: Vec<f64>) -> Self {
        Self::new(vec![values.len()], values).expect("empty vector")
    }

    /// Builds a matrix from equally sized rows.
    pub fn matrix(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Data("ragged matrix rows".into()));
        }
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn grad_mut(&mut self) -> Option<&mut Vec<f64>> {
        self.grad.as_mut()
    }

    /// Replaces the gradient buffer; the buffer must match the value count.
    pub fn set_grad(&mut self, grad: Option<Vec<f64>>) -> Result<()> {
        if let Some(g) = &grad {
            if g.len() != self.values.len() {
                return Err(Error::shape("set_grad", &[g.len()], &self.shape));
            }
        }
        self.grad = grad;
        Ok(())
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let mut out =
            Self::new(shape.to_vec(), self.values.clone()).map_err(|_| Error::Reshape {
                from: self.shape.clone(),
                to: shape.to_vec(),
            })?;
        out.requires_grad = self.requires_grad;
        Ok(out)
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}
