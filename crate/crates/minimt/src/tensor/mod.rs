//! Dense tensors with reverse-mode automatic differentiation.
//!
//! The engine is deliberately small: row-major `f64` storage, a [`Tape`] that
//! records every differentiable operation, and a fixed set of operation kinds
//! whose shape rules are documented on [`Var`]'s methods. There is no
//! broadcasting beyond bias-row addition; shape errors name the operation and
//! the offending dimensions.

pub mod check;
mod ops;
pub mod serialize;
mod tape;

pub use ops::OpKind;
pub use tape::{Gradients, Tape, TapeMark, Var};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Dense row-major array of 64-bit floats.
///
/// `data.len() == shape.iter().product()` always holds; constructors enforce
/// it. Gradients live on the [`Tape`], not on the tensor itself.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if data.len() != expect {
            return Err(Error::Shape {
                op: "tensor",
                detail: format!("shape {:?} wants {} elements, got {}", shape, expect, data.len()),
            });
        }
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Shape { op: "tensor", detail: format!("zero dimension in {shape:?}") });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; n] }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![value; n] }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { shape: vec![1], data: vec![value] }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Tensor { shape: vec![data.len()], data }
    }

    /// Uniform(lo, hi) fill, deterministic under the supplied generator.
    pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
        Tensor { shape: shape.to_vec(), data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    /// Rows/cols of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            other => Err(Error::Shape { op: "dims2", detail: format!("expected rank 2, got {other:?}") }),
        }
    }

    pub fn at2(&self, r: usize, c: usize) -> f64 {
        let cols = self.shape[1];
        self.data[r * cols + c]
    }

    pub fn set2(&mut self, r: usize, c: usize, v: f64) {
        let cols = self.shape[1];
        self.data[r * cols + c] = v;
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn scalar_value(&self) -> f64 {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// In-place reshape; the element count must match.
    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if expect != self.data.len() {
            return Err(Error::Shape {
                op: "reshape",
                detail: format!("{:?} -> {:?} changes element count", self.shape, shape),
            });
        }
        self.shape = shape;
        Ok(self)
    }
}

/// Inverted-dropout mask: entries are 0 with probability `rate`, otherwise
/// `1/(1-rate)`, so expectation is 1 and evaluation needs no rescaling.
/// In evaluation mode (`training == false`) the mask is all ones.
pub fn dropout_mask(shape: &[usize], rate: f64, rng: &mut ChaCha8Rng, training: bool) -> Result<Tensor> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::DropoutRate(rate));
    }
    let n: usize = shape.iter().product();
    if !training || rate == 0.0 {
        return Ok(Tensor::full(shape, 1.0));
    }
    let keep = 1.0 / (1.0 - rate);
    let data = (0..n).map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep }).collect();
    Ok(Tensor { shape: shape.to_vec(), data })
}
