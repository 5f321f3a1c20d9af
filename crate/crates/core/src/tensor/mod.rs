//! Dense row-major `f64` tensors and a small reverse-mode autodiff tape.
//!
//! [`Tensor`] is a plain value type. Gradient tracking lives in [`Tape`]:
//! tensors are registered as [`Var`]s, primitive operations are recorded in
//! order, and [`Tape::backward`] walks the record once in reverse.

mod tape;

pub use tape::{Gradients, Tape, Var};

use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("shape {shape:?} does not hold {len} values")]
    BadLength { shape: Vec<usize>, len: usize },
    #[error("division by zero")]
    DivisionByZero,
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("backward already ran on this tape; reset it first")]
    BackwardTwice,
    #[error("{op} expects a rank-{expected} tensor, got shape {shape:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
}

/// Elementwise primitive kinds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OpKind {
    Add,
    Sub,
    Mul,
    Div,
    Exp,
    Log,
    Tanh,
    Relu,
    Scale(f64),
}

impl OpKind {
    pub fn is_binary(self) -> bool {
        matches!(self, OpKind::Add | OpKind::Sub | OpKind::Mul | OpKind::Div)
    }

    pub(crate) fn name(self) -> &'static str {
        match self {
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Div => "div",
            OpKind::Exp => "exp",
            OpKind::Log => "log",
            OpKind::Tanh => "tanh",
            OpKind::Relu => "relu",
            OpKind::Scale(_) => "scale",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self, TensorError> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(TensorError::BadLength {
                shape: shape.to_vec(),
                len: data.len(),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    /// Rank-0 tensor holding a single value.
    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Standard normal samples scaled by `std`.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    /// Stacks equally sized rows into a `[rows.len(), width]` matrix.
    pub fn from_rows(rows: &[&[f64]]) -> Result<Self, TensorError> {
        let width = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * width);
        for row in rows {
            if row.len() != width {
                return Err(TensorError::ShapeMismatch {
                    op: "from_rows",
                    left: vec![width],
                    right: vec![row.len()],
                });
            }
            data.extend_from_slice(row);
        }
        Ok(Self {
            shape: vec![rows.len(), width],
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable access for in-place parameter updates.
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

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Option<f64> {
        (self.data.len() == 1).then(|| self.data[0])
    }

    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => 1,
            _ => self.shape[0],
        }
    }

    /// Width of the trailing axis.
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let w = self.cols();
        &self.data[i * w..(i + 1) * w]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let w = self.cols();
        &mut self.data[i * w..(i + 1) * w]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self, TensorError> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(TensorError::BadLength {
                shape: shape.to_vec(),
                len: self.data.len(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn transpose(&self) -> Result<Self, TensorError> {
        let (m, n) = self.matrix_dims("transpose")?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(Self {
            shape: vec![n, m],
            data: out,
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Self, TensorError> {
        elementwise(OpKind::Add, self, Some(other))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Self, TensorError> {
        elementwise(OpKind::Sub, self, Some(other))
    }

    pub fn mul(&self, other: &Tensor) -> Result<Self, TensorError> {
        elementwise(OpKind::Mul, self, Some(other))
    }

    pub fn div(&self, other: &Tensor) -> Result<Self, TensorError> {
        elementwise(OpKind::Div, self, Some(other))
    }

    pub fn scale(&self, c: f64) -> Self {
        self.map(|v| c * v)
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Self, TensorError> {
        let (m, k) = self.matrix_dims("matmul")?;
        let (k2, n) = other.matrix_dims("matmul")?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        let mut out = vec![0.0; m * n];
        matmul_into(&self.data, &other.data, &mut out, m, k, n);
        Ok(Self {
            shape: vec![m, n],
            data: out,
        })
    }

    pub(crate) fn matrix_dims(&self, op: &'static str) -> Result<(usize, usize), TensorError> {
        match self.shape.as_slice() {
            &[m, n] => Ok((m, n)),
            _ => Err(TensorError::Rank {
                op,
                expected: 2,
                shape: self.shape.clone(),
            }),
        }
    }
}

/// `out[m×n] += a[m×k] · b[k×n]`, accumulated row by row so each output row
/// depends only on the matching row of `a`.
pub(crate) fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            if a_ip == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += a_ip * bv;
            }
        }
    }
}

/// Maps each flat index of `a_shape` to the flat index of a tensor with
/// `b_shape` under trailing-dimension broadcasting. `None` when `b` cannot
/// broadcast into `a`.
pub(crate) fn broadcast_index(a_shape: &[usize], b_shape: &[usize]) -> Option<Vec<usize>> {
    if b_shape.len() > a_shape.len() {
        return None;
    }
    let offset = a_shape.len() - b_shape.len();
    for (i, &bd) in b_shape.iter().enumerate() {
        let ad = a_shape[offset + i];
        if bd != ad && bd != 1 {
            return None;
        }
    }
    let n: usize = a_shape.iter().product();
    // Strides of b, with broadcast axes pinned to zero.
    let mut b_strides = vec![0usize; a_shape.len()];
    let mut stride = 1;
    for i in (0..b_shape.len()).rev() {
        if b_shape[i] != 1 {
            b_strides[offset + i] = stride;
        }
        stride *= b_shape[i];
    }
    let mut idx = Vec::with_capacity(n);
    let mut counter = vec![0usize; a_shape.len()];
    for _ in 0..n {
        idx.push(counter.iter().zip(&b_strides).map(|(c, s)| c * s).sum());
        for ax in (0..a_shape.len()).rev() {
            counter[ax] += 1;
            if counter[ax] < a_shape[ax] {
                break;
            }
            counter[ax] = 0;
        }
    }
    Some(idx)
}

pub(crate) enum Broadcast {
    Same,
    Indexed(Vec<usize>),
}

pub(crate) fn plan_broadcast(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
) -> Result<Broadcast, TensorError> {
    if a.shape == b.shape {
        return Ok(Broadcast::Same);
    }
    broadcast_index(&a.shape, &b.shape)
        .map(Broadcast::Indexed)
        .ok_or_else(|| TensorError::ShapeMismatch {
            op,
            left: a.shape.clone(),
            right: b.shape.clone(),
        })
}

/// Applies an elementwise primitive. Binary kinds require `b`, which may
/// broadcast into `a` by the trailing-dimension rule.
pub fn elementwise(op: OpKind, a: &Tensor, b: Option<&Tensor>) -> Result<Tensor, TensorError> {
    let data: Vec<f64> = if op.is_binary() {
        let b = b.ok_or(TensorError::Rank {
            op: op.name(),
            expected: a.rank(),
            shape: Vec::new(),
        })?;
        let plan = plan_broadcast(op.name(), a, b)?;
        if op == OpKind::Div && b.data.iter().any(|&v| v == 0.0) {
            return Err(TensorError::DivisionByZero);
        }
        let f = |x: f64, y: f64| match op {
            OpKind::Add => x + y,
            OpKind::Sub => x - y,
            OpKind::Mul => x * y,
            _ => x / y,
        };
        match plan {
            Broadcast::Same => a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
            Broadcast::Indexed(idx) => a
                .data
                .iter()
                .zip(&idx)
                .map(|(&x, &j)| f(x, b.data[j]))
                .collect(),
        }
    } else {
        a.data
            .iter()
            .map(|&x| match op {
                OpKind::Exp => x.exp(),
                OpKind::Log => x.ln(),
                OpKind::Tanh => x.tanh(),
                OpKind::Relu => x.max(0.0),
                OpKind::Scale(c) => c * x,
                _ => unreachable!(),
            })
            .collect()
    };
    if data.iter().any(|v| !v.is_finite()) {
        return Err(TensorError::NonFinite { op: op.name() });
    }
    Ok(Tensor {
        shape: a.shape.clone(),
        data,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn add_componentwise() {
        let a = Tensor::new(&[2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::new(&[2], vec![3.0, 4.0]).unwrap();
        assert_eq!(a.add(&b).unwrap().data(), &[4.0, 6.0]);
    }

    #[test]
    fn mul_by_ones_is_identity() {
        let x = Tensor::new(&[2, 3], vec![0.1, -2.0, 3.5, 1e-9, 7.0, -0.0]).unwrap();
        let y = x.mul(&Tensor::ones(&[2, 3])).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2]);
        let err = a.add(&b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2]"), "{msg}");
    }

    #[test]
    fn division_by_zero_is_an_error() {
        let a = Tensor::ones(&[2]);
        let b = Tensor::new(&[2], vec![1.0, 0.0]).unwrap();
        assert_eq!(a.div(&b).unwrap_err(), TensorError::DivisionByZero);
    }

    #[test]
    fn log_of_zero_is_rejected() {
        let a = Tensor::zeros(&[1]);
        assert!(matches!(
            elementwise(OpKind::Log, &a, None),
            Err(TensorError::NonFinite { op: "log" })
        ));
    }

    #[test]
    fn broadcasting_bias_and_column() {
        let a = Tensor::new(&[2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let bias = Tensor::new(&[3], vec![10., 20., 30.]).unwrap();
        assert_eq!(a.add(&bias).unwrap().data(), &[11., 22., 33., 14., 25., 36.]);
        let col = Tensor::new(&[2, 1], vec![2., 3.]).unwrap();
        assert_eq!(a.mul(&col).unwrap().data(), &[2., 4., 6., 12., 15., 18.]);
    }

    #[test]
    fn identity_matmul() {
        let x = Tensor::new(&[3, 2], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        assert_eq!(Tensor::identity(3).matmul(&x).unwrap(), x);
    }

    #[test]
    fn matmul_hand_example() {
        let a = Tensor::new(&[2, 2], vec![1., 2., 3., 4.]).unwrap();
        let b = Tensor::new(&[2, 1], vec![5., 6.]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.shape(), &[2, 1]);
        assert_eq!(c.data(), &[17., 39.]);
    }

    #[test]
    fn matmul_inner_mismatch() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        assert!(matches!(a.matmul(&b), Err(TensorError::ShapeMismatch { .. })));
    }

    #[test]
    fn new_checks_length() {
        assert!(Tensor::new(&[2, 2], vec![0.0; 3]).is_err());
        assert_eq!(Tensor::scalar(2.0).item(), Some(2.0));
    }
}
