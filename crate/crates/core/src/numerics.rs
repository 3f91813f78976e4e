//! Small dense linear algebra and the seeded randomness contract.
//!
//! Every matrix in this crate is at most a few dozen rows wide (d ≤ 15
//! parameters, K ≤ 24 orthogonal directions), so [`Mat`] is a plain
//! row-major buffer. Symmetric eigenproblems, LU and SVD delegate to
//! `nalgebra`; the Cholesky path with its jitter ladder is local because its
//! failure signal matters to callers.

use std::fmt;
use std::ops::{Index, IndexMut};

use nalgebra::DMatrix;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Dense real matrix, row-major.
#[derive(Clone, PartialEq)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Mat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Mat {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows {
            writeln!(f, "  {:?}", self.row(r))?;
        }
        write!(f, "]")
    }
}

impl Mat {
    /// Builds a matrix from row-major entries, rejecting bad lengths and
    /// non-finite values.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "{rows}x{cols} needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite);
        }
        Ok(Self { rows, cols, data })
    }

    pub(crate) fn from_vec_unchecked(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(rows * cols, data.len());
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn diag(values: &[f64]) -> Self {
        let mut m = Self::zeros(values.len(), values.len());
        for (i, v) in values.iter().enumerate() {
            m[(i, i)] = *v;
        }
        m
    }

    /// Panics on ragged input.
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Self { rows: r, cols: c, data }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    /// Column vector.
    pub fn column(values: &[f64]) -> Self {
        Self { rows: values.len(), cols: 1, data: values.to_vec() }
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

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn col(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self[(r, c)]).collect()
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).collect()
    }

    pub fn transpose(&self) -> Mat {
        Mat::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    /// Matrix product; panics on inner-dimension mismatch.
    pub fn matmul(&self, other: &Mat) -> Mat {
        assert_eq!(self.cols, other.rows, "matmul shape mismatch");
        let mut out = Mat::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == 0.0 {
                    continue;
                }
                let orow = other.row(k);
                let dst = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (d, b) in dst.iter_mut().zip(orow) {
                    *d += a * b;
                }
            }
        }
        out
    }

    pub fn matvec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(self.cols, v.len(), "matvec shape mismatch");
        (0..self.rows).map(|i| dot(self.row(i), v)).collect()
    }

    pub fn add(&self, other: &Mat) -> Mat {
        assert_eq!(self.shape(), other.shape(), "add shape mismatch");
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Mat::from_vec_unchecked(self.rows, self.cols, data)
    }

    pub fn sub(&self, other: &Mat) -> Mat {
        assert_eq!(self.shape(), other.shape(), "sub shape mismatch");
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Mat::from_vec_unchecked(self.rows, self.cols, data)
    }

    pub fn scale(&self, s: f64) -> Mat {
        Mat::from_vec_unchecked(self.rows, self.cols, self.data.iter().map(|v| v * s).collect())
    }

    pub fn trace(&self) -> f64 {
        self.diagonal().iter().sum()
    }

    /// Largest absolute entry.
    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    /// Symmetric within `tol` relative to `max(1, max_abs)`.
    pub fn is_symmetric(&self, tol: f64) -> bool {
        if !self.is_square() {
            return false;
        }
        let scale = self.max_abs().max(1.0);
        for i in 0..self.rows {
            for j in (i + 1)..self.cols {
                if (self[(i, j)] - self[(j, i)]).abs() > tol * scale {
                    return false;
                }
            }
        }
        true
    }

    pub fn symmetrized(&self) -> Mat {
        Mat::from_fn(self.rows, self.cols, |i, j| 0.5 * (self[(i, j)] + self[(j, i)]))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn to_nalgebra(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.rows, self.cols, &self.data)
    }

    pub(crate) fn from_nalgebra(m: &DMatrix<f64>) -> Mat {
        Mat::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
    }
}

impl Index<(usize, usize)> for Mat {
    type Output = f64;
    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &self.data[r * self.cols + c]
    }
}

impl IndexMut<(usize, usize)> for Mat {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &mut self.data[r * self.cols + c]
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

const JITTER_LADDER: [f64; 4] = [0.0, 1e-12, 1e-10, 1e-8];

/// Lower Cholesky factor, or `None` when a pivot is not safely positive.
fn cholesky(a: &Mat, jitter: f64) -> Option<Mat> {
    let n = a.rows();
    let max_diag = a.diagonal().iter().fold(0.0_f64, |m, v| m.max(v.abs())) + jitter;
    let floor = f64::EPSILON * max_diag;
    let mut l = Mat::zeros(n, n);
    for j in 0..n {
        let mut d = a[(j, j)] + jitter;
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if !(d > floor) {
            return None;
        }
        let djj = d.sqrt();
        l[(j, j)] = djj;
        for i in (j + 1)..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / djj;
        }
    }
    Some(l)
}

fn cholesky_solve(l: &Mat, b: &Mat) -> Mat {
    let n = l.rows();
    let mut x = b.clone();
    for c in 0..b.cols() {
        for i in 0..n {
            let mut s = x[(i, c)];
            for k in 0..i {
                s -= l[(i, k)] * x[(k, c)];
            }
            x[(i, c)] = s / l[(i, i)];
        }
        for i in (0..n).rev() {
            let mut s = x[(i, c)];
            for k in (i + 1)..n {
                s -= l[(k, i)] * x[(k, c)];
            }
            x[(i, c)] = s / l[(i, i)];
        }
    }
    x
}

/// Solves `a·x = b` for symmetric positive definite `a`.
///
/// Falls back through diagonal jitter of 1e-12, 1e-10 and 1e-8 times
/// `trace(a)/n` before giving up with [`Error::NotSpd`]. Two steps of
/// iterative refinement against the unjittered matrix follow.
pub fn solve_spd(a: &Mat, b: &Mat) -> Result<Mat> {
    if !a.is_square() {
        return Err(Error::ShapeMismatch(format!("solve_spd needs square, got {:?}", a.shape())));
    }
    if b.rows() != a.rows() {
        return Err(Error::ShapeMismatch(format!("rhs has {} rows, matrix {}", b.rows(), a.rows())));
    }
    if !a.is_finite() || !b.is_finite() {
        return Err(Error::NonFinite);
    }
    if !a.is_symmetric(1e-10) {
        return Err(Error::NotSymmetric);
    }
    let n = a.rows();
    if n == 0 {
        return Ok(Mat::zeros(0, b.cols()));
    }
    let scale = a.trace() / n as f64;
    if !(scale > 0.0) {
        return Err(Error::NotSpd(" (non-positive trace)".into()));
    }
    for jitter in JITTER_LADDER {
        let Some(l) = cholesky(a, jitter * scale) else { continue };
        let mut x = cholesky_solve(&l, b);
        for _ in 0..2 {
            let r = b.sub(&a.matmul(&x));
            x = x.add(&cholesky_solve(&l, &r));
        }
        return Ok(x);
    }
    Err(Error::NotSpd(String::new()))
}

/// Inverse of an SPD matrix through [`solve_spd`].
pub fn inverse_spd(a: &Mat) -> Result<Mat> {
    solve_spd(a, &Mat::identity(a.rows()))
}

/// Symmetric eigendecomposition: eigenvalues ascending, eigenvectors as
/// the matching columns.
pub fn symmetric_eigen(a: &Mat) -> Result<(Vec<f64>, Mat)> {
    if !a.is_square() {
        return Err(Error::ShapeMismatch("eigen needs a square matrix".into()));
    }
    if !a.is_finite() {
        return Err(Error::NonFinite);
    }
    let eig = a.symmetrized().to_nalgebra().symmetric_eigen();
    let n = a.rows();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = Mat::from_fn(n, n, |r, c| eig.eigenvectors[(r, order[c])]);
    Ok((values, vectors))
}

/// Solves `S·Σ + Σ·S = rhs` for symmetric `S`, with `Σ` SPD.
///
/// In the eigenbasis of `Σ` the equation decouples entrywise:
/// `S̃_ab = R̃_ab / (λ_a + λ_b)`.
pub fn sylvester_solve(sigma: &Mat, rhs: &Mat) -> Result<Mat> {
    if !sigma.is_square() || rhs.shape() != sigma.shape() {
        return Err(Error::ShapeMismatch("sylvester needs matching square matrices".into()));
    }
    if !rhs.is_symmetric(1e-10) || !sigma.is_symmetric(1e-10) {
        return Err(Error::NotSymmetric);
    }
    let (lambda, q) = symmetric_eigen(sigma)?;
    if lambda.iter().any(|&l| !(l > 0.0)) {
        return Err(Error::NotSpd(" (sigma has a non-positive eigenvalue)".into()));
    }
    let rt = q.transpose().matmul(rhs).matmul(&q);
    let st = Mat::from_fn(rt.rows(), rt.cols(), |a, b| rt[(a, b)] / (lambda[a] + lambda[b]));
    Ok(q.matmul(&st).matmul(&q.transpose()).symmetrized())
}

/// Solves a general square system by partial-pivot LU.
pub fn solve_general(a: &Mat, b: &Mat) -> Result<Mat> {
    if !a.is_square() || b.rows() != a.rows() {
        return Err(Error::ShapeMismatch("solve_general shape mismatch".into()));
    }
    if !a.is_finite() || !b.is_finite() {
        return Err(Error::NonFinite);
    }
    let lu = a.to_nalgebra().lu();
    let x = lu
        .solve(&b.to_nalgebra())
        .ok_or(Error::SingularSystem(f64::INFINITY))?;
    let x = Mat::from_nalgebra(&x);
    if !x.is_finite() {
        return Err(Error::SingularSystem(f64::INFINITY));
    }
    Ok(x)
}

/// 2-norm condition number (ratio of extreme singular values).
pub fn condition_number(a: &Mat) -> f64 {
    if a.rows() == 0 || !a.is_finite() {
        return f64::INFINITY;
    }
    let sv = a.to_nalgebra().singular_values();
    let max = sv.iter().cloned().fold(0.0_f64, f64::max);
    let min = sv.iter().cloned().fold(f64::INFINITY, f64::min);
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Orthonormal polar factor `U·Vᵀ` of a tall matrix `a = U Σ Vᵀ`.
pub fn polar_factor(a: &Mat) -> Result<Mat> {
    if !a.is_finite() {
        return Err(Error::NonFinite);
    }
    let svd = a.to_nalgebra().svd(true, true);
    let (Some(u), Some(vt)) = (svd.u, svd.v_t) else {
        return Err(Error::RetractionFailure);
    };
    if svd.singular_values.iter().any(|&s| !(s > 1e-12)) {
        return Err(Error::RetractionFailure);
    }
    Ok(Mat::from_nalgebra(&(u * vt)))
}

/// Sample mean and standard error of the mean.
pub fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, f64::NAN);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

/// Finalizer of splitmix64; used to fold identifiers into stream ids.
fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Folds a tuple of identifiers (replication, pair, purpose, ...) into one
/// 64-bit stream id. Order matters.
pub fn stream_id(parts: &[u64]) -> u64 {
    parts.iter().fold(0x5eed_5eed_u64, |h, &p| splitmix(h ^ splitmix(p)))
}

/// A reproducible random stream addressed by `(seed, stream-id)`.
///
/// Backed by ChaCha8, whose 64-bit stream selector gives independent
/// sequences for distinct ids under the same seed.
#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    stream: u64,
    inner: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self { seed, stream, inner }
    }

    /// Stream for a tuple of identifiers under `seed`.
    pub fn derive(seed: u64, parts: &[u64]) -> Self {
        Self::new(seed, stream_id(parts))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}
