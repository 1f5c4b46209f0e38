//! Dense row-major f64 tensors.
//!
//! Video tensors use the `(N, C, T, H, W)` dimension order. Every operation
//! allocates a fresh output and leaves its inputs untouched.

use crate::error::{Error, Result};
use crate::gemm::{gemm, View};
use crate::rng::Rng;
use std::fmt;

#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Shape(Vec<usize>);

impl Shape {
    pub fn new(dims: &[usize]) -> Result<Self> {
        if dims.is_empty() {
            return Err(Error::InvalidShape("rank 0".into()));
        }
        if let Some(i) = dims.iter().position(|&d| d == 0) {
            return Err(Error::InvalidShape(format!("dim {i} is zero in {dims:?}")));
        }
        dims.iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::InvalidShape(format!("element count of {dims:?} overflows")))?;
        Ok(Shape(dims.to_vec()))
    }

    pub fn dims(&self) -> &[usize] {
        &self.0
    }

    pub fn rank(&self) -> usize {
        self.0.len()
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    pub fn strides(&self) -> Vec<usize> {
        let mut s = vec![1; self.0.len()];
        for i in (0..self.0.len().saturating_sub(1)).rev() {
            s[i] = s[i + 1] * self.0[i + 1];
        }
        s
    }
}

impl fmt::Debug for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.0)
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl Tensor {
    pub fn from_vec(dims: &[usize], data: Vec<f64>) -> Result<Self> {
        let shape = Shape::new(dims)?;
        if shape.numel() != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} values for shape {:?}",
                data.len(),
                dims
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(dims: &[usize]) -> Result<Self> {
        Self::full(dims, 0.0)
    }

    pub fn ones(dims: &[usize]) -> Result<Self> {
        Self::full(dims, 1.0)
    }

    pub fn full(dims: &[usize], value: f64) -> Result<Self> {
        let shape = Shape::new(dims)?;
        let data = vec![value; shape.numel()];
        Ok(Tensor { shape, data })
    }

    /// Deterministic uniform fill in `[lo, hi)`.
    pub fn random_uniform(dims: &[usize], seed: u64, lo: f64, hi: f64) -> Result<Self> {
        if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::InvalidArgument(format!("need lo < hi, got [{lo}, {hi})")));
        }
        let shape = Shape::new(dims)?;
        let mut rng = Rng::new(seed);
        let data = (0..shape.numel()).map(|_| rng.uniform(lo, hi)).collect();
        Ok(Tensor { shape, data })
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn dims(&self) -> &[usize] {
        self.shape.dims()
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

    pub fn reshape(&self, dims: &[usize]) -> Result<Tensor> {
        Tensor::from_vec(dims, self.data.clone())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn count_nonzero(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0.0).count()
    }

    fn check_same(&self, other: &Tensor, op: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch(format!(
                "{op}: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, k: f64) -> Tensor {
        self.map(|v| v * k)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_with(&self, other: &Tensor, op: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.check_same(other, op)?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    /// Inner product over all elements.
    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        self.check_same(other, "dot")?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        self.check_same(other, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    /// Mean over `axes`; the reduced axes are dropped from the result.
    /// Reducing every axis yields a shape-`[1]` tensor.
    pub fn reduce_mean(&self, axes: &[usize]) -> Result<Tensor> {
        let rank = self.shape.rank();
        let mut reduce = vec![false; rank];
        for &a in axes {
            if a >= rank {
                return Err(Error::InvalidArgument(format!("axis {a} out of range for rank {rank}")));
            }
            reduce[a] = true;
        }
        let dims = self.dims();
        let kept: Vec<usize> = (0..rank).filter(|&i| !reduce[i]).map(|i| dims[i]).collect();
        let out_dims = if kept.is_empty() { vec![1] } else { kept };
        let count: usize = (0..rank).filter(|&i| reduce[i]).map(|i| dims[i]).product();
        let mut sums = vec![0.0; out_dims.iter().product()];

        // output stride for each input axis (0 for reduced axes)
        let mut ostride = vec![0usize; rank];
        let mut acc = 1;
        for i in (0..rank).rev() {
            if !reduce[i] {
                ostride[i] = acc;
                acc *= dims[i];
            }
        }
        let mut idx = vec![0usize; rank];
        let mut o = 0usize;
        for &v in &self.data {
            sums[o] += v;
            for ax in (0..rank).rev() {
                idx[ax] += 1;
                o += ostride[ax];
                if idx[ax] < dims[ax] {
                    break;
                }
                o -= ostride[ax] * dims[ax];
                idx[ax] = 0;
            }
        }
        let inv = 1.0 / count as f64;
        for s in &mut sums {
            *s *= inv;
        }
        Tensor::from_vec(&out_dims, sums)
    }

    /// Matrix product of two rank-2 tensors.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (a, b) = (self.dims(), other.dims());
        if a.len() != 2 || b.len() != 2 || a[1] != b[0] {
            return Err(Error::ShapeMismatch(format!("matmul {a:?} x {b:?}")));
        }
        let (m, n) = (a[0], b[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            1.0,
            View::row_major(&self.data, m, a[1]),
            View::row_major(&other.data, b[0], n),
            0.0,
            &mut out,
            n,
        );
        Tensor::from_vec(&[m, n], out)
    }

    /// Permute axes; `perm[i]` names the source axis of output axis `i`.
    pub fn permute(&self, perm: &[usize]) -> Result<Tensor> {
        let rank = self.shape.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::InvalidArgument(format!("bad permutation {perm:?}")));
        }
        let dims = self.dims();
        let src_strides = self.shape.strides();
        let out_dims: Vec<usize> = perm.iter().map(|&p| dims[p]).collect();
        let strides: Vec<usize> = perm.iter().map(|&p| src_strides[p]).collect();
        let mut out = Vec::with_capacity(self.data.len());
        let mut idx = vec![0usize; rank];
        let mut off = 0usize;
        for _ in 0..self.data.len() {
            out.push(self.data[off]);
            for ax in (0..rank).rev() {
                idx[ax] += 1;
                off += strides[ax];
                if idx[ax] < out_dims[ax] {
                    break;
                }
                off -= strides[ax] * out_dims[ax];
                idx[ax] = 0;
            }
        }
        Tensor::from_vec(&out_dims, out)
    }
}
