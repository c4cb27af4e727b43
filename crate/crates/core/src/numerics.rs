//! Dense row-major matrices and the seeded random stream.
//!
//! Batches are stored one sample per row. Every fallible operation checks
//! that its output is finite and reports [`Error::NonFinite`] otherwise, so
//! a NaN never leaks silently into a later layer.
//!
//! Variances are biased (divide by the row width, not width - 1).

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Work (multiply-adds) above which matmul rows are spread over the rayon pool.
const PARALLEL_MATMUL_WORK: usize = 1 << 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dim(
                "Matrix::new",
                format!("{} values for a {rows}x{cols} matrix", data.len()),
            ));
        }
        let m = Matrix { rows, cols, data };
        m.ensure_finite("Matrix::new")?;
        Ok(m)
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Matrix { rows, cols, data: vec![value; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Builds a matrix from equally sized rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::dim("Matrix::from_rows", format!("row {i} has {} values, expected {cols}", r.len())));
            }
            data.extend_from_slice(r);
        }
        Matrix::new(rows.len(), cols, data)
    }

    pub fn row_vector(values: Vec<f64>) -> Result<Self> {
        Matrix::new(1, values.len(), values)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        let c = self.cols;
        &mut self.data[r * c..(r + 1) * c]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn ensure_finite(&self, op: &'static str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(op))
        }
    }

    fn checked(self, op: &'static str) -> Result<Self> {
        self.ensure_finite(op)?;
        Ok(self)
    }

    fn same_shape(&self, other: &Matrix, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::dim(op, format!("{:?} vs {:?}", self.shape(), other.shape())));
        }
        Ok(())
    }

    /// `self × other`.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::dim("matmul", format!("{:?} x {:?}", self.shape(), other.shape())));
        }
        let (n, inner, m) = (self.rows, self.cols, other.cols);
        let mut out = Matrix::zeros(n, m);
        if m == 0 {
            return Ok(out);
        }
        let kernel = |(r, out_row): (usize, &mut [f64])| {
            let a_row = &self.data[r * inner..(r + 1) * inner];
            for (k, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[k * m..(k + 1) * m];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        };
        if n * inner * m >= PARALLEL_MATMUL_WORK {
            out.data.par_chunks_mut(m).enumerate().for_each(kernel);
        } else {
            out.data.chunks_mut(m).enumerate().for_each(kernel);
        }
        out.checked("matmul")
    }

    /// `selfᵀ × other`, without materializing the transpose.
    pub fn t_matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(Error::dim("t_matmul", format!("{:?}ᵀ x {:?}", self.shape(), other.shape())));
        }
        let (n, m) = (self.cols, other.cols);
        let mut out = Matrix::zeros(n, m);
        if m == 0 {
            return Ok(out);
        }
        let kernel = |(i, out_row): (usize, &mut [f64])| {
            for r in 0..self.rows {
                let a = self.data[r * n + i];
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[r * m..(r + 1) * m];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        };
        if self.rows * n * m >= PARALLEL_MATMUL_WORK {
            out.data.par_chunks_mut(m).enumerate().for_each(kernel);
        } else {
            out.data.chunks_mut(m).enumerate().for_each(kernel);
        }
        out.checked("t_matmul")
    }

    /// `self × otherᵀ`.
    pub fn matmul_t(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(Error::dim("matmul_t", format!("{:?} x {:?}ᵀ", self.shape(), other.shape())));
        }
        let (inner, m) = (self.cols, other.rows);
        let mut out = Matrix::zeros(self.rows, m);
        if m == 0 {
            return Ok(out);
        }
        let kernel = |(r, out_row): (usize, &mut [f64])| {
            let a_row = &self.data[r * inner..(r + 1) * inner];
            for (j, o) in out_row.iter_mut().enumerate() {
                let b_row = &other.data[j * inner..(j + 1) * inner];
                *o = a_row.iter().zip(b_row).map(|(a, b)| a * b).sum();
            }
        };
        if self.rows * inner * m >= PARALLEL_MATMUL_WORK {
            out.data.par_chunks_mut(m).enumerate().for_each(kernel);
        } else {
            out.data.chunks_mut(m).enumerate().for_each(kernel);
        }
        out.checked("matmul_t")
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Matrix> {
        Matrix { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&v| f(v)).collect() }.checked("map")
    }

    fn zip_with(&self, other: &Matrix, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        self.same_shape(other, op)?;
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Matrix { rows: self.rows, cols: self.cols, data }.checked(op)
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, s: f64) -> Result<Matrix> {
        self.map(|v| v * s)
    }

    pub fn add_scalar(&self, s: f64) -> Result<Matrix> {
        self.map(|v| v + s)
    }

    /// In-place `self += other`.
    pub fn add_assign(&mut self, other: &Matrix) -> Result<()> {
        self.same_shape(other, "add_assign")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        self.ensure_finite("add_assign")
    }

    /// Adds `row` to every row.
    pub fn add_row_broadcast(&self, row: &[f64]) -> Result<Matrix> {
        if row.len() != self.cols {
            return Err(Error::dim("add_row_broadcast", format!("row of {} for {} cols", row.len(), self.cols)));
        }
        let mut out = self.clone();
        for chunk in out.data.chunks_mut(self.cols.max(1)) {
            for (v, b) in chunk.iter_mut().zip(row) {
                *v += b;
            }
        }
        out.checked("add_row_broadcast")
    }

    /// Multiplies every row elementwise by `row`.
    pub fn mul_row_broadcast(&self, row: &[f64]) -> Result<Matrix> {
        if row.len() != self.cols {
            return Err(Error::dim("mul_row_broadcast", format!("row of {} for {} cols", row.len(), self.cols)));
        }
        let mut out = self.clone();
        for chunk in out.data.chunks_mut(self.cols.max(1)) {
            for (v, g) in chunk.iter_mut().zip(row) {
                *v *= g;
            }
        }
        out.checked("mul_row_broadcast")
    }

    /// Adds `col[r]` to every entry of row `r`.
    pub fn add_col_broadcast(&self, col: &[f64]) -> Result<Matrix> {
        if col.len() != self.rows {
            return Err(Error::dim("add_col_broadcast", format!("column of {} for {} rows", col.len(), self.rows)));
        }
        let mut out = self.clone();
        for (r, &c) in col.iter().enumerate() {
            for v in out.row_mut(r) {
                *v += c;
            }
        }
        out.checked("add_col_broadcast")
    }

    pub fn col_sums(&self) -> Vec<f64> {
        let mut sums = vec![0.0; self.cols];
        for row in self.data.chunks(self.cols.max(1)) {
            for (s, v) in sums.iter_mut().zip(row) {
                *s += v;
            }
        }
        sums
    }

    pub fn relu(&self) -> Matrix {
        Matrix { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&v| v.max(0.0)).collect() }
    }

    pub fn sigmoid(&self) -> Matrix {
        Matrix { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&v| sigmoid(v)).collect() }
    }

    /// Per-row mean and biased variance (divides by the width).
    pub fn row_mean_var(&self) -> (Vec<f64>, Vec<f64>) {
        let mut means = Vec::with_capacity(self.rows);
        let mut vars = Vec::with_capacity(self.rows);
        for r in 0..self.rows {
            let (m, v) = mean_var(self.row(r));
            means.push(m);
            vars.push(v);
        }
        (means, vars)
    }

    /// Copies columns `[start, end)` into a new matrix.
    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Matrix> {
        if start > end || end > self.cols {
            return Err(Error::dim("slice_cols", format!("[{start},{end}) of {} cols", self.cols)));
        }
        let w = end - start;
        let mut data = Vec::with_capacity(self.rows * w);
        for r in 0..self.rows {
            data.extend_from_slice(&self.row(r)[start..end]);
        }
        Ok(Matrix { rows: self.rows, cols: w, data })
    }

    /// Writes `block` into columns starting at `start`.
    pub fn write_cols(&mut self, start: usize, block: &Matrix) -> Result<()> {
        if block.rows != self.rows || start + block.cols > self.cols {
            return Err(Error::dim(
                "write_cols",
                format!("{:?} at col {start} into {:?}", block.shape(), self.shape()),
            ));
        }
        for r in 0..self.rows {
            let w = block.cols;
            self.row_mut(r)[start..start + w].copy_from_slice(block.row(r));
        }
        Ok(())
    }
}

/// A trainable tensor paired with its gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Matrix,
    pub grad: Matrix,
}

impl Param {
    pub fn new(value: Matrix) -> Self {
        let grad = Matrix::zeros(value.rows(), value.cols());
        Param { value, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad.as_mut_slice().fill(0.0);
    }

    pub fn accumulate(&mut self, grad: &[f64]) -> Result<()> {
        if grad.len() != self.grad.len() {
            return Err(Error::dim("Param::accumulate", format!("{} vs {}", grad.len(), self.grad.len())));
        }
        for (g, d) in self.grad.as_mut_slice().iter_mut().zip(grad) {
            *g += d;
        }
        Ok(())
    }
}

/// Two-pass mean and biased variance of a slice.
pub fn mean_var(values: &[f64]) -> (f64, f64) {
    let h = values.len() as f64;
    let mean = values.iter().sum::<f64>() / h;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / h;
    (mean, var)
}

/// Numerically stable logistic function.
pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Seeded deterministic generator (ChaCha8). The same seed yields the same
/// stream on every platform.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        RngStream { seed, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent child stream identified by `stream`; does not advance `self`.
    pub fn fork(&self, stream: u64) -> RngStream {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream.wrapping_add(1));
        let seed = rng.next_u64();
        RngStream::new(seed)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        self.rng.gen_range(lo..hi)
    }

    pub fn unit(&mut self) -> f64 {
        self.rng.gen::<f64>()
    }

    pub fn gaussian(&mut self, mean: f64, std: f64) -> f64 {
        if std == 0.0 {
            return mean;
        }
        Normal::new(mean, std).expect("finite std").sample(&mut self.rng)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.unit() < p
    }

    pub fn gaussian_matrix(&mut self, rows: usize, cols: usize, std: f64) -> Matrix {
        let data = (0..rows * cols).map(|_| self.gaussian(0.0, std)).collect();
        Matrix { rows, cols, data }
    }

    pub fn uniform_matrix(&mut self, rows: usize, cols: usize, lo: f64, hi: f64) -> Matrix {
        let data = (0..rows * cols).map(|_| self.uniform(lo, hi)).collect();
        Matrix { rows, cols, data }
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.rng);
    }

    pub(crate) fn sample<T, D: Distribution<T>>(&mut self, dist: &D) -> T {
        dist.sample(&mut self.rng)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn naive_matmul(a: &Matrix, b: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut s = 0.0;
                for k in 0..a.cols() {
                    s += a.get(i, k) * b.get(k, j);
                }
                out.set(i, j, s);
            }
        }
        out
    }

    #[test]
    fn matmul_hand_cases() {
        let id = Matrix::identity(2);
        let b = Matrix::from_rows(&[[5.0, 6.0], [7.0, 8.0]]).unwrap();
        assert_eq!(id.matmul(&b).unwrap(), b);
        let a = Matrix::from_rows(&[[1.0, 2.0]]).unwrap();
        let c = Matrix::from_rows(&[[3.0], [4.0]]).unwrap();
        assert_eq!(a.matmul(&c).unwrap().as_slice(), &[11.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = RngStream::new(11);
        let a = rng.gaussian_matrix(7, 5, 1.0);
        let b = rng.gaussian_matrix(5, 3, 1.0);
        let fast = a.matmul(&b).unwrap();
        let slow = naive_matmul(&a, &b);
        for (x, y) in fast.as_slice().iter().zip(slow.as_slice()) {
            assert!((x - y).abs() <= 1e-12);
        }
        // The transposed variants agree with the explicit transpose.
        let at = a.transpose();
        let c = rng.gaussian_matrix(7, 4, 1.0);
        let lhs = a.t_matmul(&c).unwrap();
        let rhs = naive_matmul(&at, &c);
        for (x, y) in lhs.as_slice().iter().zip(rhs.as_slice()) {
            assert!((x - y).abs() <= 1e-12);
        }
        let d = rng.gaussian_matrix(6, 5, 1.0);
        let lhs = a.matmul_t(&d).unwrap();
        let rhs = naive_matmul(&a, &d.transpose());
        for (x, y) in lhs.as_slice().iter().zip(rhs.as_slice()) {
            assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn large_matmul_uses_pool_and_matches() {
        let mut rng = RngStream::new(3);
        let a = rng.gaussian_matrix(64, 40, 1.0);
        let b = rng.gaussian_matrix(40, 50, 1.0);
        let slow = naive_matmul(&a, &b);
        for (x, y) in a.matmul(&b).unwrap().as_slice().iter().zip(slow.as_slice()) {
            assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn matmul_shape_error() {
        let a = Matrix::zeros(2, 3);
        assert!(matches!(a.matmul(&a), Err(Error::Dimension { .. })));
    }

    #[test]
    fn non_finite_is_an_error() {
        let a = Matrix::filled(1, 1, f64::MAX);
        assert!(matches!(a.scale(10.0), Err(Error::NonFinite(_))));
        assert!(Matrix::new(1, 1, vec![f64::NAN]).is_err());
    }

    #[test]
    fn relu_cases() {
        let x = Matrix::from_rows(&[[-1.0, 0.0, 2.0], [-3.0, -2.0, -0.5]]).unwrap();
        let y = x.relu();
        assert_eq!(y.row(0), &[0.0, 0.0, 2.0]);
        assert_eq!(y.row(1), &[0.0, 0.0, 0.0]);
        assert_eq!(y.relu(), y);
    }

    #[test]
    fn row_mean_var_cases() {
        let x = Matrix::from_rows(&[[2.0, 0.0], [4.0, 4.0]]).unwrap();
        let (m, v) = x.row_mean_var();
        assert_eq!(m, vec![1.0, 4.0]);
        assert_eq!(v, vec![1.0, 0.0]);

        let mut rng = RngStream::new(5);
        let row = rng.gaussian_matrix(1, 11, 3.0);
        let vals = row.as_slice();
        // two-pass oracle with pairwise separate accumulation
        let mut s = 0.0;
        for v in vals {
            s += v;
        }
        let mu = s / 11.0;
        let mut ss = 0.0;
        for v in vals {
            ss += (v - mu).powi(2);
        }
        let (m, var) = row.row_mean_var();
        assert!((m[0] - mu).abs() <= 1e-12);
        assert!((var[0] - ss / 11.0).abs() <= 1e-12);
    }

    #[test]
    fn rng_is_reproducible() {
        let mut a = RngStream::new(42);
        let mut b = RngStream::new(42);
        assert_eq!(a.gaussian_matrix(3, 3, 1.0), b.gaussian_matrix(3, 3, 1.0));
        assert_ne!(a.fork(1).next_u64(), a.fork(2).next_u64());
        assert_eq!(a.fork(1).next_u64(), b.fork(1).next_u64());
    }

    proptest! {
        #[test]
        fn matmul_is_associative(seed in 0u64..1000, n in 1usize..6, k in 1usize..6, m in 1usize..6, p in 1usize..6) {
            let mut rng = RngStream::new(seed);
            let a = rng.gaussian_matrix(n, k, 1.0);
            let b = rng.gaussian_matrix(k, m, 1.0);
            let c = rng.gaussian_matrix(m, p, 1.0);
            let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
            let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
            let scale = left.as_slice().iter().fold(1.0f64, |acc, v| acc.max(v.abs()));
            for (x, y) in left.as_slice().iter().zip(right.as_slice()) {
                prop_assert!((x - y).abs() <= 1e-9 * scale);
            }
        }

        #[test]
        fn variance_is_shift_invariant(vals in proptest::collection::vec(-100.0f64..100.0, 1..20), shift in -50.0f64..50.0) {
            let x = Matrix::row_vector(vals.clone()).unwrap();
            let y = x.add_scalar(shift).unwrap();
            let (_, vx) = x.row_mean_var();
            let (_, vy) = y.row_mean_var();
            prop_assert!(vx[0] >= 0.0);
            prop_assert!((vx[0] - vy[0]).abs() <= 1e-10);
        }
    }
}
