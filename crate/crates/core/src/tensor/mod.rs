//! Dense f32 tensors and a reverse-mode tape.
//!
//! Tensors are row-major and immutable once built, apart from explicit
//! in-place parameter updates through [`Tensor::data_mut`]. Storage is
//! reference counted so binding parameters onto a [`Tape`] is a pointer copy.

mod grad_check;
pub mod kernels;
mod tape;

use std::sync::Arc;

pub use grad_check::{finite_diff, finite_diff_at};
pub use tape::{Gradients, Tape, Var};

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("data length {len} does not match shape {shape:?}")]
    BadLength { shape: Vec<usize>, len: usize },
    #[error("axis {axis} out of range for rank {rank}")]
    BadAxis { axis: usize, rank: usize },
    #[error("layer norm epsilon must be positive, got {0}")]
    BadEpsilon(f32),
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("tape already consumed by a previous backward pass")]
    TapeConsumed,
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f32>>,
    requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() || shape.iter().any(|&d| d == 0) {
            return Err(TensorError::BadLength { shape, len: data.len() });
        }
        Ok(Self { shape, data: Arc::new(data), requires_grad: false })
    }

    /// Builds a tensor whose shape is known to match `data`.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f32>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data: Arc::new(data), requires_grad: false }
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![value; n])
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn scalar(value: f32) -> Self {
        Self::from_parts(vec![1], vec![value])
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f32) -> Self {
        let n: usize = shape.iter().product();
        Self::from_parts(shape.to_vec(), (0..n).map(&mut f).collect())
    }

    /// `rows × cols` matrix from nested rows.
    pub fn matrix(rows: &[&[f32]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        let data: Vec<f32> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self::new(vec![rows.len(), cols], data)
    }

    pub fn eye(n: usize) -> Self {
        Self::from_fn(&[n, n], |i| if i / n == i % n { 1.0 } else { 0.0 })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Mutable access for in-place parameter updates. Clones the storage
    /// first if it is shared with another tensor.
    pub fn data_mut(&mut self) -> &mut [f32] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn into_data(self) -> Vec<f32> {
        Arc::try_unwrap(self.data).unwrap_or_else(|shared| (*shared).clone())
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    /// Rows and columns when viewed as a matrix (leading dims folded into rows).
    pub fn dims2(&self) -> (usize, usize) {
        let cols = *self.shape.last().expect("tensor has rank >= 1");
        (self.numel() / cols, cols)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        Ok(Self { shape: shape.to_vec(), data: Arc::clone(&self.data), requires_grad: self.requires_grad })
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self::from_parts(self.shape.clone(), self.data.iter().map(|&x| f(x)).collect())
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f32, f32) -> f32) -> Result<Self> {
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch {
                op: "zip_map",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let data = self.data.iter().zip(other.data.iter()).map(|(&a, &b)| f(a, b)).collect();
        Ok(Self::from_parts(self.shape.clone(), data))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn sum(&self) -> f32 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f32 {
        self.data.iter().fold(0.0f32, |m, x| m.max(x.abs()))
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        self.data
            .iter()
            .zip(other.data.iter())
            .fold(0.0f32, |m, (a, b)| m.max((a - b).abs()))
    }

    /// True when both tensors point at the same storage.
    pub fn shares_storage(&self, other: &Tensor) -> bool {
        Arc::ptr_eq(&self.data, &other.data)
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dims2();
        let (k2, n) = other.dims2();
        if k != k2 || self.rank() != 2 || other.rank() != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul(&self.data, &other.data, &mut out, m, k, n);
        Ok(Self::from_parts(vec![m, n], out))
    }

    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        let (outer, len, inner) = axis_split(&self.shape, axis)?;
        let mut out = self.data.to_vec();
        kernels::softmax_strided(&mut out, outer, len, inner);
        Ok(Self::from_parts(self.shape.clone(), out))
    }

    pub fn layer_norm(&self, gamma: &Tensor, beta: &Tensor, eps: f32) -> Result<Tensor> {
        if eps <= 0.0 || !eps.is_finite() {
            return Err(TensorError::BadEpsilon(eps));
        }
        let (rows, cols) = self.dims2();
        if gamma.numel() != cols || beta.numel() != cols {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                lhs: self.shape.clone(),
                rhs: gamma.shape.clone(),
            });
        }
        let mut out = vec![0.0; self.numel()];
        kernels::layer_norm(&self.data, &gamma.data, &beta.data, eps, rows, cols, &mut out, None);
        Ok(Self::from_parts(self.shape.clone(), out))
    }

    pub fn gelu(&self) -> Tensor {
        self.map(kernels::gelu)
    }

    /// Index of the largest entry; ties resolve to the lowest index.
    pub fn argmax(&self) -> usize {
        argmax(&self.data)
    }
}

/// Index of the largest value, lowest index on ties. NaN entries are skipped.
pub fn argmax(values: &[f32]) -> usize {
    let mut best = 0;
    let mut best_val = f32::NEG_INFINITY;
    for (i, &v) in values.iter().enumerate() {
        if v > best_val {
            best = i;
            best_val = v;
        }
    }
    best
}

/// Splits `shape` around `axis` into (outer, axis length, inner) extents.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(TensorError::BadAxis { axis, rank: shape.len() });
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_matmul_is_noop() {
        let a = Tensor::matrix(&[&[1.5, -2.0], &[0.25, 4.0]]).unwrap();
        assert_eq!(Tensor::eye(2).matmul(&a).unwrap(), a);
    }

    #[test]
    fn matmul_hand_arithmetic() {
        let a = Tensor::matrix(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        let b = Tensor::matrix(&[&[1.0], &[1.0]]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        assert!(matches!(a.matmul(&b), Err(TensorError::ShapeMismatch { .. })));
    }

    #[test]
    fn softmax_uniform_and_stable() {
        let s = Tensor::new(vec![3], vec![0.0; 3]).unwrap().softmax(0).unwrap();
        for &p in s.data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-7);
        }
        let s = Tensor::new(vec![3], vec![1000.0, 0.0, 0.0]).unwrap().softmax(0).unwrap();
        assert!(s.is_finite());
        assert!((s.data()[0] - 1.0).abs() < 1e-6);
        assert!(s.data()[1].abs() < 1e-6);
    }

    #[test]
    fn softmax_reference_values() {
        // exp(k) / (e + e^2 + e^3) evaluated in f64
        let s = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap().softmax(0).unwrap();
        let expected = [0.090_030_573_170_380_46, 0.244_728_471_054_797_65, 0.665_240_955_774_821_9];
        for (p, e) in s.data().iter().zip(expected) {
            assert!((f64::from(*p) - e).abs() < 1e-6);
        }
    }

    #[test]
    fn softmax_along_leading_axis() {
        let x = Tensor::matrix(&[&[1.0, 5.0], &[3.0, -2.0]]).unwrap();
        let s = x.softmax(0).unwrap();
        assert!((s.data()[0] + s.data()[2] - 1.0).abs() < 1e-6);
        assert!((s.data()[1] + s.data()[3] - 1.0).abs() < 1e-6);
        assert!(matches!(x.softmax(2), Err(TensorError::BadAxis { .. })));
    }

    #[test]
    fn layer_norm_cases() {
        let g = Tensor::ones(&[2]);
        let b = Tensor::zeros(&[2]);
        let y = Tensor::new(vec![1, 2], vec![1.0, 3.0]).unwrap().layer_norm(&g, &b, 1e-12).unwrap();
        assert!((y.data()[0] + 1.0).abs() < 1e-5 && (y.data()[1] - 1.0).abs() < 1e-5);
        let g = Tensor::ones(&[4]);
        let b = Tensor::zeros(&[4]);
        let y = Tensor::full(&[1, 4], 7.0).layer_norm(&g, &b, 1e-5).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
        assert!(matches!(
            Tensor::full(&[1, 4], 7.0).layer_norm(&g, &b, 0.0),
            Err(TensorError::BadEpsilon(_))
        ));
    }

    #[test]
    fn gelu_reference_points() {
        assert_eq!(kernels::gelu(0.0), 0.0);
        // 0.5 * (1 + tanh(sqrt(2/pi) * 1.044715)) evaluated in f64
        assert!((kernels::gelu(1.0) - 0.841_191_990_608_276_7).abs() < 1e-6);
        assert!((kernels::gelu(12.0) - 12.0).abs() < 1e-5);
        assert!(kernels::gelu(-12.0).abs() < 1e-5);
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[0.1, 0.9, 0.3]), 1);
        assert_eq!(argmax(&[0.5, 0.5]), 0);
    }

    #[test]
    fn bad_length_rejected() {
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
    }
}
