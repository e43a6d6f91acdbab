//! Dense `f64` tensors, the reverse-mode tape built on them, FFT kernels,
//! multiply-add instrumentation and seeded random streams.
//!
//! Everything is row-major. Tensors are plain values; differentiation happens
//! on a [`Tape`], which records primitive operations over [`Var`] handles and
//! replays them backwards.

pub mod fft;
pub mod flops;
pub mod gradcheck;
mod kernels;
mod params;
pub mod rng;
mod tape;

pub use fft::{fft_real, ifft_real};
pub use kernels::softplus_inv;
pub(crate) use kernels::{gemm, softplus};
pub use params::{ParamId, ParamStore};
pub use tape::{CustomOp, Gradients, Tape, UnaryKind, Var};

use rand::Rng as _;

use crate::error::{Error, Result};

/// Dense row-major real tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor from external data, rejecting NaN/Inf.
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let t = Self::from_parts(shape, data)?;
        if let Some(pos) = t.data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "element {pos} is {}",
                t.data[pos]
            )));
        }
        Ok(t)
    }

    /// Like [`Tensor::new`] but allows non-finite entries (used for masks).
    pub fn from_parts(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        if shape.contains(&0) {
            return Err(Error::shape(format!("zero-sized dimension in {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} needs {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub(crate) fn raw(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// I.i.d. normal entries with standard deviation `scale`.
    pub fn randn(shape: impl Into<Vec<usize>>, scale: f64, rng: &mut rng::Rng) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| scale * rng.sample::<f64, _>(rand_distr::StandardNormal))
            .collect();
        Self { shape, data }
    }

    /// I.i.d. entries uniform in `[-bound, bound]`.
    pub fn uniform(shape: impl Into<Vec<usize>>, bound: f64, rng: &mut rng::Rng) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
        Self { shape, data }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        Self::from_parts(shape, self.data)
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        self.data[offset_of(&self.shape, index)]
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "shape mismatch in max_abs_diff");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Complex tensor stored as split real and imaginary planes.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexTensor {
    shape: Vec<usize>,
    re: Vec<f64>,
    im: Vec<f64>,
}

impl ComplexTensor {
    pub fn new(shape: impl Into<Vec<usize>>, re: Vec<f64>, im: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        if shape.contains(&0) || re.len() != n || im.len() != n {
            return Err(Error::shape(format!(
                "complex shape {shape:?} needs {n} elements per plane, got re={} im={}",
                re.len(),
                im.len()
            )));
        }
        Ok(Self { shape, re, im })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn re(&self) -> &[f64] {
        &self.re
    }

    pub fn im(&self) -> &[f64] {
        &self.im
    }

    pub fn magnitude(&self) -> Tensor {
        let data = self
            .re
            .iter()
            .zip(&self.im)
            .map(|(r, i)| r.hypot(*i))
            .collect();
        Tensor::raw(self.shape.clone(), data)
    }
}

pub(crate) fn contiguous_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        strides[d] = strides[d + 1] * shape[d + 1];
    }
    strides
}

pub(crate) fn offset_of(shape: &[usize], index: &[usize]) -> usize {
    assert_eq!(shape.len(), index.len(), "index rank mismatch");
    let mut off = 0;
    for (d, (&i, &n)) in index.iter().zip(shape).enumerate() {
        assert!(i < n, "index {i} out of bounds for axis {d} of size {n}");
        off = off * n + i;
    }
    off
}
