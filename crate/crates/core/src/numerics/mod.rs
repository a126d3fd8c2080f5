//! Dense tensors, the handful of differentiable layers the model needs,
//! seeded randomness and a finite-difference gradient checker.

mod gradcheck;
mod layers;
mod rng;

pub use gradcheck::{grad_check, GradCheckReport, NamedTensors, ParamSet};
pub use layers::{Ffn, FfnCache, Linear};
pub use rng::{gumbel_from_uniform, gumbel_sample, Rng, RngState};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major dense tensor of `f64` values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Domain(format!(
                "non-finite value {} at flat index {pos}",
                data[pos]
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        Self::new(vec![data.len()], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged rows".into()));
        }
        Self::matrix(rows.len(), cols, rows.concat())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable access to the raw values. Callers are responsible for keeping
    /// them finite.
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

    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => 1,
            _ => self.shape[0],
        }
    }

    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.cols().max(1))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn scale(&mut self, factor: f64) {
        self.data.iter_mut().for_each(|v| *v *= factor);
    }

    /// Appends rows to a matrix, growing its leading dimension.
    pub fn append_rows(&mut self, values: &[f64]) -> Result<()> {
        if self.shape.len() != 2 || !values.len().is_multiple_of(self.cols()) {
            return Err(Error::Shape(format!(
                "cannot append {} values to shape {:?}",
                values.len(),
                self.shape
            )));
        }
        self.shape[0] += values.len() / self.cols();
        self.data.extend_from_slice(values);
        Ok(())
    }
}

/// Standard matrix product of two rank-2 tensors.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[1] != b.shape[0] {
        return Err(Error::Shape(format!(
            "matmul {:?} x {:?}",
            a.shape, b.shape
        )));
    }
    let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let dst = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let s = a.data[i * k + p];
            if s == 0.0 {
                continue;
            }
            axpy(s, &b.data[p * n..(p + 1) * n], dst);
        }
    }
    Tensor::matrix(m, n, out)
}

/// `a · bᵀ` without materializing the transpose.
pub fn matmul_transposed(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[1] != b.shape[1] {
        return Err(Error::Shape(format!(
            "matmul_transposed {:?} x {:?}ᵀ",
            a.shape, b.shape
        )));
    }
    let (m, n) = (a.shape[0], b.shape[0]);
    let mut out = Vec::with_capacity(m * n);
    for i in 0..m {
        let ra = a.row(i);
        out.extend(b.row_iter().map(|rb| dot(ra, rb)));
    }
    Tensor::matrix(m, n, out)
}

/// Inner product with a fixed four-lane summation order.
pub fn dot(x: &[f64], y: &[f64]) -> f64 {
    debug_assert_eq!(x.len(), y.len());
    let mut acc = [0.0f64; 4];
    let xc = x.chunks_exact(4);
    let yc = y.chunks_exact(4);
    let (xr, yr) = (xc.remainder(), yc.remainder());
    for (a, b) in xc.zip(yc) {
        acc[0] += a[0] * b[0];
        acc[1] += a[1] * b[1];
        acc[2] += a[2] * b[2];
        acc[3] += a[3] * b[3];
    }
    let mut tail = 0.0;
    for (a, b) in xr.iter().zip(yr) {
        tail += a * b;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

pub fn norm(x: &[f64]) -> f64 {
    dot(x, x).sqrt()
}

/// `y += alpha * x`
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Temperature softmax with max subtraction.
pub fn softmax(logits: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if !(temperature > 0.0) {
        return Err(Error::Domain(format!(
            "softmax temperature must be positive, got {temperature}"
        )));
    }
    if logits.is_empty() {
        return Err(Error::Domain("softmax of an empty vector".into()));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits
        .iter()
        .map(|&l| ((l - max) / temperature).exp())
        .collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= sum);
    Ok(out)
}

/// `log(sum(exp(x)))`, stable.
pub fn log_sum_exp(x: &[f64]) -> f64 {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + x.iter().map(|&v| (v - max).exp()).sum::<f64>().ln()
}

/// `1 - cos(x, y)`; zero-norm inputs are rejected.
pub fn cosine_distance(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Shape(format!(
            "cosine_distance of lengths {} and {}",
            x.len(),
            y.len()
        )));
    }
    let (nx, ny) = (norm(x), norm(y));
    if nx == 0.0 || ny == 0.0 {
        return Err(Error::Domain(
            "cosine distance of a zero-norm vector".into(),
        ));
    }
    Ok(cosine_distance_with_norms(x, y, nx, ny))
}

/// Cosine distance given precomputed norms. Shares the arithmetic of
/// [`cosine_distance`] exactly, so cached-norm ranking is bit-identical.
#[inline]
pub fn cosine_distance_with_norms(x: &[f64], y: &[f64], nx: f64, ny: f64) -> f64 {
    (1.0 - dot(x, y) / (nx * ny)).clamp(0.0, 2.0)
}

/// Gradient of `cosine_distance(x, y)` with respect to `x`.
pub fn cosine_distance_grad(x: &[f64], y: &[f64]) -> Vec<f64> {
    let (nx, ny) = (norm(x), norm(y));
    let cos = dot(x, y) / (nx * ny);
    x.iter()
        .zip(y)
        .map(|(&xi, &yi)| -(yi / (nx * ny) - cos * xi / (nx * nx)))
        .collect()
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(x: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in x.iter().enumerate().skip(1) {
        if v > x[best] {
            best = i;
        }
    }
    best
}
