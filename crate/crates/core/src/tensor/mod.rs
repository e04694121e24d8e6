//! Dense row-major tensors and the differentiable kernels built on them.
//!
//! Values are stored as `f64`. A tensor in [`Precision::F32`] mode holds only
//! values representable in single precision: every constructor and kernel
//! output rounds through `f32`, so storage behaves like a 32-bit run while
//! accumulation inside a single kernel stays in double precision.

mod batchnorm;
mod conv;
mod counter;
mod linear;
mod pool;

pub use batchnorm::{batchnorm, batchnorm_backward, BnMode, BnStats, RunningStats, BN_EPS};
pub use conv::{conv2d, conv2d_backward, conv2d_output_hw, ConvGrads};
pub use counter::{OpCounter, OpCounts, Phase};
pub use linear::{linear, linear_backward, matmul, matmul_nt, matmul_tn, LinearGrads};
pub use pool::{avgpool2d, avgpool2d_backward, maxpool2d, maxpool2d_backward, pool_output_hw};

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::fmt;

/// Storage precision, chosen once per run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

impl Precision {
    #[inline]
    pub fn round(self, x: f64) -> f64 {
        match self {
            Precision::F32 => x as f32 as f64,
            Precision::F64 => x,
        }
    }

    pub fn bytes(self) -> usize {
        match self {
            Precision::F32 => 4,
            Precision::F64 => 8,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        }
    }
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    precision: Precision,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<f64> = self.data.iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("precision", &self.precision)
            .field("data[..8]", &preview)
            .finish()
    }
}

impl Tensor {
    pub fn from_vec(shape: Vec<usize>, mut data: Vec<f64>, precision: Precision) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Contract(format!("tensor shape {shape:?} has a zero extent")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::dim("tensor", "data", n, data.len()));
        }
        if precision == Precision::F32 {
            data.iter_mut().for_each(|x| *x = precision.round(*x));
        }
        Ok(Tensor { shape, data, precision })
    }

    pub fn full(shape: &[usize], value: f64, precision: Precision) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![precision.round(value); n],
            precision,
        }
    }

    pub fn zeros(shape: &[usize], precision: Precision) -> Self {
        Self::full(shape, 0.0, precision)
    }

    pub fn ones(shape: &[usize], precision: Precision) -> Self {
        Self::full(shape, 1.0, precision)
    }

    pub fn scalar(value: f64, precision: Precision) -> Self {
        Self::full(&[1], value, precision)
    }

    /// Builds a tensor in the same precision as `self`; used by kernels whose
    /// output shape is already validated.
    pub(crate) fn with_data(&self, shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let mut t = Tensor {
            shape,
            data,
            precision: self.precision,
        };
        t.round_in_place();
        t
    }

    pub(crate) fn round_in_place(&mut self) {
        if self.precision == Precision::F32 {
            let p = self.precision;
            self.data.iter_mut().for_each(|x| *x = p.round(*x));
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.shape[axis]
    }

    pub fn ndim(&self) -> usize {
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

    /// Mutable access to the raw buffer. Callers writing values that are not
    /// representable in `f32` must call [`Tensor::rounded`] afterwards.
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn rounded(mut self) -> Self {
        self.round_in_place();
        self
    }

    pub fn to_precision(&self, precision: Precision) -> Tensor {
        let mut t = Tensor {
            shape: self.shape.clone(),
            data: self.data.clone(),
            precision,
        };
        t.round_in_place();
        t
    }

    /// Storage footprint under the tensor's precision.
    pub fn bytes(&self) -> usize {
        self.data.len() * self.precision.bytes()
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::dim("reshape", "numel", self.data.len(), n));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
            precision: self.precision,
        })
    }

    pub fn into_shape(mut self, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::dim("reshape", "numel", self.data.len(), n));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn check_precision(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.precision != other.precision {
            return Err(Error::PrecisionMismatch {
                op,
                left: self.precision.name(),
                right: other.precision.name(),
            });
        }
        Ok(())
    }

    fn check_same(&self, other: &Tensor, op: &'static str) -> Result<()> {
        self.check_precision(other, op)?;
        if self.shape != other.shape {
            return Err(Error::dim(
                op,
                "shape",
                format!("{:?}", self.shape),
                format!("{:?}", other.shape),
            ));
        }
        Ok(())
    }

    pub fn zip_map(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.check_same(other, op)?;
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(self.with_data(self.shape.clone(), data))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, "mul", |a, b| a * b)
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        self.check_same(other, "add_assign")?;
        let p = self.precision;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = p.round(*a + b);
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        let data = self.data.iter().map(|&x| f(x)).collect();
        self.with_data(self.shape.clone(), data)
    }

    pub fn scale(&self, a: f64) -> Tensor {
        self.map(|x| a * x)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    /// Largest elementwise absolute difference; shapes must agree.
    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        self.check_same(other, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(0.0_f64, |m, (a, b)| m.max((a - b).abs())))
    }

    /// `‖self − other‖₂ / max(‖self‖₂, ‖other‖₂)`, zero when both vanish.
    pub fn rel_error(&self, other: &Tensor) -> Result<f64> {
        self.check_same(other, "rel_error")?;
        let diff: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let scale = self.norm().max(other.norm());
        Ok(if scale == 0.0 { diff } else { diff / scale })
    }

    /// Number of sub-tensors along axis 0.
    pub fn outer(&self) -> usize {
        self.shape[0]
    }

    /// Copy of the `i`-th slice along axis 0, with that axis removed.
    pub fn index0(&self, i: usize) -> Result<Tensor> {
        if i >= self.shape[0] {
            return Err(Error::dim("index0", "axis0", format!("< {}", self.shape[0]), i));
        }
        let inner: usize = self.shape[1..].iter().product();
        let shape = if self.shape.len() == 1 { vec![1] } else { self.shape[1..].to_vec() };
        Ok(Tensor {
            shape,
            data: self.data[i * inner..(i + 1) * inner].to_vec(),
            precision: self.precision,
        })
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("stack of zero tensors".into()))?;
        let mut data = Vec::with_capacity(first.len() * parts.len());
        for p in parts {
            first.check_same(p, "stack")?;
            data.extend_from_slice(&p.data);
        }
        let mut shape = vec![parts.len()];
        shape.extend_from_slice(&first.shape);
        Ok(Tensor {
            shape,
            data,
            precision: first.precision,
        })
    }

    /// Splits along `axis` into two halves of `first` and `rest` extents.
    pub fn split_axis(&self, axis: usize, first: usize) -> Result<(Tensor, Tensor)> {
        let extent = self.shape[axis];
        if first == 0 || first >= extent {
            return Err(Error::dim("split", "split point", format!("0 < k < {extent}"), first));
        }
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let mut a = Vec::with_capacity(outer * first * inner);
        let mut b = Vec::with_capacity(outer * (extent - first) * inner);
        for o in 0..outer {
            let base = o * extent * inner;
            a.extend_from_slice(&self.data[base..base + first * inner]);
            b.extend_from_slice(&self.data[base + first * inner..base + extent * inner]);
        }
        let mut sa = self.shape.clone();
        sa[axis] = first;
        let mut sb = self.shape.clone();
        sb[axis] = extent - first;
        Ok((
            Tensor { shape: sa, data: a, precision: self.precision },
            Tensor { shape: sb, data: b, precision: self.precision },
        ))
    }

    /// Concatenates two tensors along `axis`; other extents must agree.
    pub fn concat_axis(a: &Tensor, b: &Tensor, axis: usize) -> Result<Tensor> {
        a.check_precision(b, "concat")?;
        if a.ndim() != b.ndim()
            || a.shape[..axis] != b.shape[..axis]
            || a.shape[axis + 1..] != b.shape[axis + 1..]
        {
            return Err(Error::dim("concat", "shape", format!("{:?}", a.shape), format!("{:?}", b.shape)));
        }
        let outer: usize = a.shape[..axis].iter().product();
        let inner: usize = a.shape[axis + 1..].iter().product();
        let (ea, eb) = (a.shape[axis], b.shape[axis]);
        let mut data = Vec::with_capacity(a.len() + b.len());
        for o in 0..outer {
            data.extend_from_slice(&a.data[o * ea * inner..(o + 1) * ea * inner]);
            data.extend_from_slice(&b.data[o * eb * inner..(o + 1) * eb * inner]);
        }
        let mut shape = a.shape.clone();
        shape[axis] = ea + eb;
        Ok(Tensor {
            shape,
            data,
            precision: a.precision,
        })
    }

    /// Repeats the tensor `times` along a new leading axis.
    pub fn repeat_leading(&self, times: usize) -> Tensor {
        let mut data = Vec::with_capacity(self.len() * times);
        for _ in 0..times {
            data.extend_from_slice(&self.data);
        }
        let mut shape = vec![times];
        shape.extend_from_slice(&self.shape);
        Tensor {
            shape,
            data,
            precision: self.precision,
        }
    }

    /// Merges the two leading axes (e.g. `[T, B, ...]` into `[T*B, ...]`).
    pub fn fold_leading(&self) -> Result<Tensor> {
        if self.ndim() < 3 {
            return Err(Error::dim("fold_leading", "rank", ">= 3", self.ndim()));
        }
        let mut shape = vec![self.shape[0] * self.shape[1]];
        shape.extend_from_slice(&self.shape[2..]);
        self.reshape(&shape)
    }

    pub fn all_binary(&self) -> bool {
        self.data.iter().all(|&x| x == 0.0 || x == 1.0)
    }
}
