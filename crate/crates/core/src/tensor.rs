//! Dense rank-4 tensors in (batch, channel, row, col) order.

use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{shape_err, Result};

/// Extents of a rank-4 tensor: batch, channels, rows, cols.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug, serde::Serialize, serde::Deserialize)]
pub struct Dims {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Dims {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Dims { n, c, h, w }
    }

    pub const fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    /// Number of spatial positions per (sample, channel) plane.
    pub const fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn as_array(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.c == 0 || self.h == 0 || self.w == 0 {
            return Err(shape_err!("all dims must be >= 1, got {self}"));
        }
        Ok(())
    }
}

impl fmt::Display for Dims {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {})", self.n, self.c, self.h, self.w)
    }
}

impl From<[usize; 4]> for Dims {
    fn from(d: [usize; 4]) -> Self {
        Dims::new(d[0], d[1], d[2], d[3])
    }
}

/// A dense tensor of 64-bit reals with an optional gradient buffer.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    dims: Dims,
    data: Vec<f64>,
    pub requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("dims", &self.dims)
            .field("requires_grad", &self.requires_grad)
            .finish_non_exhaustive()
    }
}

impl Tensor {
    pub fn from_vec(dims: impl Into<Dims>, data: Vec<f64>) -> Result<Self> {
        let dims = dims.into();
        dims.validate()?;
        if data.len() != dims.numel() {
            return Err(shape_err!(
                "data length {} does not match dims {dims} ({} elements)",
                data.len(),
                dims.numel()
            ));
        }
        Ok(Tensor { dims, data, requires_grad: false, grad: None })
    }

    pub fn zeros(dims: impl Into<Dims>) -> Self {
        Self::full(dims, 0.0)
    }

    pub fn ones(dims: impl Into<Dims>) -> Self {
        Self::full(dims, 1.0)
    }

    /// Panics if any dim is zero.
    pub fn full(dims: impl Into<Dims>, value: f64) -> Self {
        let dims = dims.into();
        dims.validate().expect("tensor dims must be positive");
        Tensor { dims, data: vec![value; dims.numel()], requires_grad: false, grad: None }
    }

    /// Standard-normal samples scaled by `std`.
    pub fn randn<R: Rng + ?Sized>(dims: impl Into<Dims>, std: f64, rng: &mut R) -> Self {
        let dims = dims.into();
        let data = (0..dims.numel())
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                z * std
            })
            .collect();
        Tensor::from_vec(dims, data).expect("dims validated")
    }

    pub fn uniform<R: Rng + ?Sized>(dims: impl Into<Dims>, lo: f64, hi: f64, rng: &mut R) -> Self {
        let dims = dims.into();
        let data = (0..dims.numel()).map(|_| rng.gen_range(lo..hi)).collect();
        Tensor::from_vec(dims, data).expect("dims validated")
    }

    /// A (1, len, 1, 1) tensor, the layout used for per-channel vectors.
    pub fn vector(values: Vec<f64>) -> Result<Self> {
        let c = values.len();
        Tensor::from_vec(Dims::new(1, c, 1, 1), values)
    }

    /// Marks the tensor as a trainable parameter and allocates a zeroed gradient.
    pub fn into_param(mut self) -> Self {
        self.requires_grad = true;
        self.grad = Some(vec![0.0; self.data.len()]);
        self
    }

    pub fn dims(&self) -> Dims {
        self.dims
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

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn grad_mut(&mut self) -> Option<&mut [f64]> {
        self.grad.as_deref_mut()
    }

    /// Adds `delta` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, delta: &[f64]) -> Result<()> {
        if delta.len() != self.data.len() {
            return Err(shape_err!(
                "gradient length {} does not match tensor {}",
                delta.len(),
                self.dims
            ));
        }
        let grad = self.grad.get_or_insert_with(|| vec![0.0; delta.len()]);
        grad.iter_mut().zip(delta).for_each(|(g, d)| *g += d);
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Same data under new dims with equal element count.
    pub fn reshape(mut self, dims: impl Into<Dims>) -> Result<Self> {
        let dims = dims.into();
        dims.validate()?;
        if dims.numel() != self.dims.numel() {
            return Err(shape_err!("cannot reshape {} into {dims}", self.dims));
        }
        self.dims = dims;
        if let Some(g) = &self.grad {
            debug_assert_eq!(g.len(), dims.numel());
        }
        Ok(self)
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.dims.c + c) * self.dims.h + h) * self.dims.w + w
    }

    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> f64 {
        self.data[self.index(n, c, h, w)]
    }

    /// Contiguous (h, w) plane of sample `n`, channel `c`.
    pub fn plane(&self, n: usize, c: usize) -> &[f64] {
        let p = self.dims.plane();
        let start = (n * self.dims.c + c) * p;
        &self.data[start..start + p]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::from_vec(self.dims, self.data.iter().map(|&v| f(v)).collect()).expect("same dims")
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.dims != other.dims {
            return Err(shape_err!("elementwise op on {} and {}", self.dims, other.dims));
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Tensor::from_vec(self.dims, data)
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|v| v * s)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Samples `[start, start + len)` along the batch axis.
    pub fn slice_batch(&self, start: usize, len: usize) -> Result<Tensor> {
        if len == 0 || start + len > self.dims.n {
            return Err(shape_err!("batch slice {start}..{} out of {}", start + len, self.dims.n));
        }
        let per = self.dims.c * self.dims.plane();
        let data = self.data[start * per..(start + len) * per].to_vec();
        Tensor::from_vec(Dims { n: len, ..self.dims }, data)
    }

    /// Concatenates along the batch axis.
    pub fn stack_batch(parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts.first().ok_or_else(|| shape_err!("cannot stack zero tensors"))?;
        let d = first.dims;
        let mut data = Vec::with_capacity(d.numel() * parts.len());
        let mut n = 0;
        for p in parts {
            let pd = p.dims;
            if (pd.c, pd.h, pd.w) != (d.c, d.h, d.w) {
                return Err(shape_err!("cannot stack {pd} with {d}"));
            }
            n += pd.n;
            data.extend_from_slice(&p.data);
        }
        Tensor::from_vec(Dims { n, ..d }, data)
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.dims, other.dims, "max_abs_diff on mismatched dims");
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    /// Largest elementwise |a - b| / max(|a|, |b|, 1).
    pub fn max_rel_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.dims, other.dims, "max_rel_diff on mismatched dims");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs() / a.abs().max(b.abs()).max(1.0))
            .fold(0.0, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
