//! Dense 64-bit tensors, a reverse-mode tape, parameter storage and Adam.
//!
//! Every layer and loss in the crate is expressed as operations on a
//! [`Graph`]. Parameters live in a [`ParameterSet`] keyed by dotted paths
//! (`encoder.lidar.l1.lora.A`), and frozen paths never receive gradients
//! or optimizer updates.

mod gradcheck;
mod graph;
mod optim;
mod params;

pub use gradcheck::{grad_check, GradCheckReport};
pub(crate) use graph::{iou_aligned_row, sigmoid as sigmoid_scalar};
pub use graph::{Gradients, Graph, Var};
pub use optim::{AdamConfig, OptimizerState};
pub use params::{decode_f64, encode_f64, Checkpoint as ParamCheckpoint, ParameterSet};

use crate::error::{Error, Result};

/// Dense row-major array of `f64`.
///
/// Shapes are lists of positive extents. Scalars use shape `[1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    pub requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: &[usize], values: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::Construction(format!("invalid shape {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != values.len() {
            return Err(Error::Construction(format!(
                "shape {shape:?} needs {n} values, got {}",
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Construction(format!(
                "non-finite value {} at index {i}",
                values[i]
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: values,
            requires_grad: false,
        })
    }

    /// Constructs without validation; callers guarantee the invariants.
    pub(crate) fn from_raw(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self {
            shape,
            data,
            requires_grad: false,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::from_raw(shape.to_vec(), vec![0.0; n])
    }

    pub fn scalar(v: f64) -> Self {
        Self::from_raw(vec![1], vec![v])
    }

    pub fn matrix(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        Self::new(&[rows, cols], values)
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Rows and columns of a rank-2 tensor. Vectors count as one row.
    pub fn dims2(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [n] => (1, *n),
            [r, c] => (*r, *c),
            _ => (1, self.data.len()),
        }
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let (_, c) = self.dims2();
        &self.data[i * c..(i + 1) * c]
    }
}

/// Numerically stable softmax restricted to entries where `mask` is true.
///
/// Masked entries come out exactly zero. Errors when no entry survives.
pub fn masked_softmax(scores: &[f64], mask: &[bool]) -> Result<Vec<f64>> {
    if scores.len() != mask.len() {
        return Err(Error::Shape(format!(
            "{} scores vs {} mask entries",
            scores.len(),
            mask.len()
        )));
    }
    let mut out = vec![0.0; scores.len()];
    masked_softmax_into(scores, mask, &mut out)?;
    Ok(out)
}

pub(crate) fn masked_softmax_into(scores: &[f64], mask: &[bool], out: &mut [f64]) -> Result<()> {
    let max = scores
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(&s, _)| s)
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(Error::EmptyAvailability);
    }
    let mut total = 0.0;
    for ((o, &s), &m) in out.iter_mut().zip(scores).zip(mask) {
        *o = if m { (s - max).exp() } else { 0.0 };
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
    Ok(())
}
