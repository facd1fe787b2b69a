//! Dense row-major tensors, a reverse-mode tape, and the Adam optimizer.
//!
//! [`Tensor`] is a plain value type. Gradient tracking lives on the [`Tape`]:
//! a tensor bound as a trainable leaf receives a gradient after
//! [`Tape::backward`], anything bound as a constant never does.

mod adam;
mod kernels;
mod tape;

pub use adam::{AdamConfig, AdamState, InverseSqrtSchedule};
pub use kernels::{gemm, log_softmax, softmax_in_place};
pub use tape::{AttnLayout, Gradients, Segment, Tape, Var};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{dim_err, Error, Result};

/// Epsilon used by every layer normalization.
pub const LAYERNORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&s| s == 0) && !data.is_empty() {
            return Err(dim_err!("shape {shape:?} has a zero extent but {} values", data.len()));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(dim_err!("shape {shape:?} implies {n} values, got {}", data.len()));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Row-major matrix from nested rows. All rows must share a length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(dim_err!("ragged rows"));
        }
        let data: Vec<f64> = rows.iter().flatten().copied().collect();
        Ok(Self {
            shape: vec![rows.len(), cols],
            data,
        })
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Gaussian entries with the given standard deviation.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0, std).expect("std must be finite and non-negative");
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(|_| dist.sample(rng)).collect(),
        }
    }

    /// Uniform entries in `[-limit, limit]`.
    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], limit: f64, rng: &mut R) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(|_| rng.random_range(-limit..=limit)).collect(),
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Row count of a matrix (first extent).
    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(0)
    }

    /// Column count of a matrix (product of trailing extents).
    pub fn cols(&self) -> usize {
        self.shape.iter().skip(1).product()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(dim_err!("cannot reshape {:?} to {shape:?}", self.shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Gather the given rows into a new matrix.
    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let c = self.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Self {
            shape: vec![idx.len(), c],
            data,
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff on different shapes");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    fn require_matrix(&self, what: &str) -> Result<(usize, usize)> {
        if self.shape.len() != 2 {
            return Err(dim_err!("{what}: expected a matrix, got shape {:?}", self.shape));
        }
        Ok((self.shape[0], self.shape[1]))
    }

    /// Matrix product `self · other`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.require_matrix("matmul lhs")?;
        let (k2, n) = other.require_matrix("matmul rhs")?;
        if k != k2 {
            return Err(dim_err!("matmul inner dimensions {m}x{k} · {k2}x{n}"));
        }
        let mut out = Tensor::zeros(&[m, n]);
        gemm(
            m,
            k,
            n,
            &self.data,
            (k, 1),
            &other.data,
            (n, 1),
            &mut out.data,
            false,
        );
        Ok(out)
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (m, n) = self.require_matrix("transpose")?;
        let mut out = Tensor::zeros(&[n, m]);
        for i in 0..m {
            for j in 0..n {
                out.data[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(out)
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        if axis >= self.shape.len() {
            return Err(dim_err!("softmax axis {axis} out of range for {:?}", self.shape));
        }
        let len = self.shape[axis];
        if len == 0 {
            return Err(Error::Contract("softmax over an empty axis".into()));
        }
        let inner: usize = self.shape[axis + 1..].iter().product();
        let outer: usize = self.shape[..axis].iter().product();
        let mut out = self.clone();
        let mut buf = vec![0.0; len];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                for (j, b) in buf.iter_mut().enumerate() {
                    *b = self.data[at(j)];
                }
                kernels::softmax_in_place(&mut buf);
                for (j, b) in buf.iter().enumerate() {
                    out.data[at(j)] = *b;
                }
            }
        }
        Ok(out)
    }

    /// Per-row layer normalization followed by `gain ⊙ x̂ + bias`.
    pub fn layernorm(&self, gain: &Tensor, bias: &Tensor) -> Result<Tensor> {
        let d = *self
            .shape
            .last()
            .ok_or_else(|| dim_err!("layernorm on a scalar shape"))?;
        if gain.len() != d || bias.len() != d {
            return Err(dim_err!(
                "layernorm gain/bias length {}/{} vs last dimension {d}",
                gain.len(),
                bias.len()
            ));
        }
        let mut out = self.clone();
        for row in out.data.chunks_mut(d) {
            kernels::layernorm_row(row);
            for ((x, g), b) in row.iter_mut().zip(&gain.data).zip(&bias.data) {
                *x = *x * g + b;
            }
        }
        Ok(out)
    }

    /// Mean over the listed rows.
    pub fn mean_rows(&self, idx: &[usize]) -> Result<Vec<f64>> {
        if idx.is_empty() {
            return Err(Error::Contract("mean over zero rows".into()));
        }
        let c = self.cols();
        let mut acc = vec![0.0; c];
        for &i in idx {
            for (a, x) in acc.iter_mut().zip(self.row(i)) {
                *a += x;
            }
        }
        let n = idx.len() as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        Ok(acc)
    }
}
