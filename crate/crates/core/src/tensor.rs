//! Dense row-major tensors.
//!
//! Values are held as `f64` regardless of [`DType`]; a `F32` tensor keeps
//! every element rounded to single precision, so serialization round-trips
//! bit-exactly in either mode. Images use the batch × channels × height ×
//! width layout.

use std::fmt;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            _ => None,
        }
    }

    pub fn size_of(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }

    /// The wider of the two, used when binary operands disagree.
    pub fn promote(self, other: DType) -> DType {
        if self == DType::F64 || other == DType::F64 {
            DType::F64
        } else {
            DType::F32
        }
    }

    #[inline]
    pub(crate) fn round(self, v: f64) -> f64 {
        match self {
            DType::F32 => v as f32 as f64,
            DType::F64 => v,
        }
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor {
    dtype: DType,
    dims: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("dtype", &self.dtype)
            .field("dims", &self.dims)
            .field("len", &self.data.len())
            .finish()
    }
}

fn check_dims(dims: &[usize], len: usize) -> Result<()> {
    if dims.is_empty() {
        return Err(Error::invalid("tensor", "at least one dimension required"));
    }
    if dims.iter().any(|&d| d == 0) {
        return Err(Error::invalid("tensor", format!("zero extent in {dims:?}")));
    }
    let numel: usize = dims.iter().product();
    if numel != len {
        return Err(Error::shape(
            "tensor",
            format!("{numel} elements for {dims:?}"),
            len,
        ));
    }
    Ok(())
}

impl Tensor {
    /// Builds a float64 tensor, rejecting non-finite payloads.
    pub fn new(dims: &[usize], data: Vec<f64>) -> Result<Self> {
        Self::with_dtype(DType::F64, dims, data)
    }

    pub fn with_dtype(dtype: DType, dims: &[usize], data: Vec<f64>) -> Result<Self> {
        check_dims(dims, data.len())?;
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "tensor" });
        }
        Ok(Self::from_raw(dtype, dims.to_vec(), data))
    }

    /// Internal constructor: trusts the caller on dims and rounds to `dtype`.
    pub(crate) fn from_raw(dtype: DType, dims: Vec<usize>, mut data: Vec<f64>) -> Self {
        debug_assert_eq!(dims.iter().product::<usize>(), data.len());
        if dtype == DType::F32 {
            for v in &mut data {
                *v = dtype.round(*v);
            }
        }
        Tensor { dtype, dims, data }
    }

    pub fn zeros(dims: &[usize]) -> Self {
        Self::full(dims, 0.0)
    }

    pub fn full(dims: &[usize], value: f64) -> Self {
        let n = dims.iter().product();
        Self::from_raw(DType::F64, dims.to_vec(), vec![value; n])
    }

    /// Square identity matrix.
    pub fn eye(n: usize) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Self::from_raw(DType::F64, vec![n, n], data)
    }

    pub fn scalar(v: f64) -> Self {
        Self::from_raw(DType::F64, vec![1], vec![v])
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn ndim(&self) -> usize {
        self.dims.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Converts to `dtype`, rounding when narrowing.
    pub fn to_dtype(&self, dtype: DType) -> Tensor {
        Self::from_raw(dtype, self.dims.clone(), self.data.clone())
    }

    /// Copies the payload under new dims with the same element count.
    pub fn reshape(&self, dims: &[usize]) -> Result<Tensor> {
        check_dims(dims, self.data.len())?;
        Ok(Tensor {
            dtype: self.dtype,
            dims: dims.to_vec(),
            data: self.data.clone(),
        })
    }

    /// Same dims and dtype, new payload (rounded to dtype).
    pub(crate) fn with_data(&self, data: Vec<f64>) -> Tensor {
        Self::from_raw(self.dtype, self.dims.clone(), data)
    }

    /// Returns a copy with the element at flat index `i` replaced.
    pub fn with_value(&self, i: usize, value: f64) -> Tensor {
        let mut data = self.data.clone();
        data[i] = value;
        self.with_data(data)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        self.with_data(self.data.iter().map(|&v| f(v)).collect())
    }

    /// `(batch, channels, height, width)` of a 4-D tensor.
    pub fn nchw(&self, op: &'static str) -> Result<(usize, usize, usize, usize)> {
        match *self.dims.as_slice() {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(Error::shape(op, "4-D tensor", format!("{:?}", self.dims))),
        }
    }

    /// `(rows, cols)` of a 2-D tensor.
    pub fn matrix_dims(&self, op: &'static str) -> Result<(usize, usize)> {
        match *self.dims.as_slice() {
            [r, c] => Ok((r, c)),
            _ => Err(Error::shape(op, "2-D tensor", format!("{:?}", self.dims))),
        }
    }

    pub fn at4(&self, b: usize, c: usize, h: usize, w: usize) -> f64 {
        let [_, cs, hs, ws] = [self.dims[0], self.dims[1], self.dims[2], self.dims[3]];
        self.data[((b * cs + c) * hs + h) * ws + w]
    }

    pub fn at2(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.dims[1] + c]
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Euclidean norm of the flattened payload.
    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Largest elementwise absolute difference; dims must agree.
    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        if self.dims != other.dims {
            return Err(Error::shape(
                "max_abs_diff",
                format!("{:?}", self.dims),
                format!("{:?}", other.dims),
            ));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs())))
    }

    /// Batch item `b` of a 4-D tensor, keeping a leading extent of one.
    pub fn batch_item(&self, b: usize) -> Result<Tensor> {
        let (n, c, h, w) = self.nchw("batch_item")?;
        if b >= n {
            return Err(Error::invalid("batch_item", format!("index {b} >= batch {n}")));
        }
        let plane = c * h * w;
        Ok(Tensor::from_raw(
            self.dtype,
            vec![1, c, h, w],
            self.data[b * plane..(b + 1) * plane].to_vec(),
        ))
    }

    /// Stacks single-item 4-D tensors along the batch axis.
    pub fn stack_batch(items: &[Tensor]) -> Result<Tensor> {
        let first = items
            .first()
            .ok_or_else(|| Error::invalid("stack_batch", "no items"))?;
        let (_, c, h, w) = first.nchw("stack_batch")?;
        let mut data = Vec::with_capacity(items.len() * c * h * w);
        let mut dtype = first.dtype;
        for t in items {
            if t.dims != [1, c, h, w] {
                return Err(Error::shape(
                    "stack_batch",
                    format!("[1, {c}, {h}, {w}]"),
                    format!("{:?}", t.dims),
                ));
            }
            dtype = dtype.promote(t.dtype);
            data.extend_from_slice(&t.data);
        }
        Ok(Tensor::from_raw(dtype, vec![items.len(), c, h, w], data))
    }
}
