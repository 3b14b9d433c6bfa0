//! Complex linear algebra, sampling and the complex-to-real widening.
//!
//! Matrices are dense and row-major. Products between matrices go through
//! `matrixmultiply::zgemm`; matrix-vector products are plain loops.

use std::f64::consts::PI;
use std::ops::{Deref, DerefMut};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::{Error, Result, C64};

/// Relative pivot tolerance for the Cholesky factorization of Gram matrices.
pub const CHOLESKY_PIVOT_TOL: f64 = 1e-12;

/// Below this ratio of extreme Gram eigenvalues a matrix is treated as
/// rank deficient.
pub const GRAM_RANK_TOL: f64 = 1e-12;

/// A dense complex vector.
#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CVector(Vec<C64>);

impl CVector {
    /// Validated constructor: nonempty with finite entries.
    pub fn new(entries: Vec<C64>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::invalid("vector must be nonempty"));
        }
        let v = CVector(entries);
        if !v.is_finite() {
            return Err(Error::invalid("vector has non-finite entries"));
        }
        Ok(v)
    }

    pub fn zeros(n: usize) -> Self {
        CVector(vec![C64::new(0.0, 0.0); n])
    }

    pub fn from_fn(n: usize, f: impl FnMut(usize) -> C64) -> Self {
        CVector((0..n).map(f).collect())
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|z| z.re.is_finite() && z.im.is_finite())
    }

    pub fn norm_sqr(&self) -> f64 {
        norm_sqr(&self.0)
    }

    pub fn into_inner(self) -> Vec<C64> {
        self.0
    }

    pub fn as_slice(&self) -> &[C64] {
        &self.0
    }
}

impl From<Vec<C64>> for CVector {
    fn from(v: Vec<C64>) -> Self {
        CVector(v)
    }
}

impl Deref for CVector {
    type Target = [C64];
    fn deref(&self) -> &[C64] {
        &self.0
    }
}

impl DerefMut for CVector {
    fn deref_mut(&mut self) -> &mut [C64] {
        &mut self.0
    }
}

impl FromIterator<C64> for CVector {
    fn from_iter<I: IntoIterator<Item = C64>>(iter: I) -> Self {
        CVector(iter.into_iter().collect())
    }
}

pub fn norm_sqr(v: &[C64]) -> f64 {
    v.iter().map(|z| z.norm_sqr()).sum()
}

/// `‖a − b‖²` for equal-length slices.
pub fn dist_sqr(a: &[C64], b: &[C64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).norm_sqr()).sum()
}

/// Dense row-major complex matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct CMatrix {
    rows: usize,
    cols: usize,
    data: Vec<C64>,
}

/// How an operand enters a product.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Op {
    /// As stored.
    Plain,
    /// Conjugate transpose.
    Hermitian,
}

impl CMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<C64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::invalid("matrix dimensions must be positive"));
        }
        if data.len() != rows * cols {
            return Err(Error::dim(format!(
                "{rows}x{cols} matrix needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        if data.iter().any(|z| !(z.re.is_finite() && z.im.is_finite())) {
            return Err(Error::invalid("matrix has non-finite entries"));
        }
        Ok(CMatrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        CMatrix {
            rows,
            cols,
            data: vec![C64::new(0.0, 0.0); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |i, j| {
            if i == j {
                C64::new(1.0, 0.0)
            } else {
                C64::new(0.0, 0.0)
            }
        })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> C64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        CMatrix { rows, cols, data }
    }

    /// Builds from nested rows; every row must have the same length.
    pub fn from_rows(rows: &[Vec<C64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::dim("ragged rows"));
        }
        Self::new(rows.len(), cols, rows.concat())
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

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> C64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: C64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[C64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[C64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [C64] {
        &mut self.data
    }

    /// Column `j` copied out.
    pub fn column(&self, j: usize) -> CVector {
        CVector::from_fn(self.rows, |i| self.get(i, j))
    }

    pub fn set_column(&mut self, j: usize, v: &[C64]) {
        debug_assert_eq!(v.len(), self.rows);
        for (i, z) in v.iter().enumerate() {
            self.set(i, j, *z);
        }
    }

    /// Stacks equal-length vectors as the columns of a matrix.
    pub fn from_columns(cols: &[CVector]) -> Result<Self> {
        let rows = cols.first().map_or(0, |c| c.len());
        if cols.is_empty() || rows == 0 || cols.iter().any(|c| c.len() != rows) {
            return Err(Error::dim("columns must be nonempty and of equal length"));
        }
        Ok(Self::from_fn(rows, cols.len(), |i, j| cols[j][i]))
    }

    pub fn hermitian_transpose(&self) -> CMatrix {
        CMatrix::from_fn(self.cols, self.rows, |i, j| self.get(j, i).conj())
    }

    pub fn frobenius_norm(&self) -> f64 {
        norm_sqr(&self.data).sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data
            .iter()
            .all(|z| z.re.is_finite() && z.im.is_finite())
    }

    /// `self − other`, shapes must agree.
    pub fn sub(&self, other: &CMatrix) -> Result<CMatrix> {
        if self.shape() != other.shape() {
            return Err(Error::dim(format!(
                "cannot subtract {:?} from {:?}",
                other.shape(),
                self.shape()
            )));
        }
        Ok(CMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a - b)
                .collect(),
        })
    }

    /// Largest absolute entry.
    pub fn max_abs(&self) -> f64 {
        self.data.iter().map(|z| z.norm()).fold(0.0, f64::max)
    }

    /// `A x`.
    pub fn matvec(&self, x: &[C64]) -> Result<CVector> {
        if x.len() != self.cols {
            return Err(Error::dim(format!(
                "{}x{} matrix times vector of length {}",
                self.rows,
                self.cols,
                x.len()
            )));
        }
        let mut out = CVector::zeros(self.rows);
        self.matvec_into(x, &mut out);
        Ok(out)
    }

    pub(crate) fn matvec_into(&self, x: &[C64], out: &mut [C64]) {
        for (i, o) in out.iter_mut().enumerate() {
            *o = self.row(i).iter().zip(x).map(|(a, b)| a * b).sum();
        }
    }

    /// `Aᴴ x` without forming `Aᴴ`.
    pub fn hermitian_matvec(&self, x: &[C64]) -> Result<CVector> {
        if x.len() != self.rows {
            return Err(Error::dim(format!(
                "({}x{})ᴴ times vector of length {}",
                self.rows,
                self.cols,
                x.len()
            )));
        }
        let mut out = CVector::zeros(self.cols);
        for (i, xi) in x.iter().enumerate() {
            for (o, a) in out.iter_mut().zip(self.row(i)) {
                *o += a.conj() * xi;
            }
        }
        Ok(out)
    }

    /// `op(self) · op(other)`.
    pub fn mul(&self, op_a: Op, other: &CMatrix, op_b: Op) -> Result<CMatrix> {
        let (m, k) = op_shape(self, op_a);
        let (k2, n) = op_shape(other, op_b);
        if k != k2 {
            return Err(Error::dim(format!(
                "inner dimensions differ: {m}x{k} times {k2}x{n}"
            )));
        }
        let mut out = CMatrix::zeros(m, n);
        gemm(
            C64::new(1.0, 0.0),
            self,
            op_a,
            other,
            op_b,
            C64::new(0.0, 0.0),
            &mut out,
        );
        Ok(out)
    }

    pub fn matmul(&self, other: &CMatrix) -> Result<CMatrix> {
        self.mul(Op::Plain, other, Op::Plain)
    }

    pub(crate) fn to_nalgebra(&self) -> DMatrix<C64> {
        DMatrix::from_fn(self.rows, self.cols, |i, j| self.get(i, j))
    }

    pub(crate) fn from_nalgebra(m: &DMatrix<C64>) -> CMatrix {
        CMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
    }
}

fn op_shape(a: &CMatrix, op: Op) -> (usize, usize) {
    match op {
        Op::Plain => (a.rows, a.cols),
        Op::Hermitian => (a.cols, a.rows),
    }
}

/// `c ← alpha·op(a)·op(b) + beta·c`. Shapes are the caller's responsibility
/// and are only checked in debug builds.
pub(crate) fn gemm(
    alpha: C64,
    a: &CMatrix,
    op_a: Op,
    b: &CMatrix,
    op_b: Op,
    beta: C64,
    c: &mut CMatrix,
) {
    let (m, k) = op_shape(a, op_a);
    let (_, n) = op_shape(b, op_b);
    debug_assert_eq!(op_shape(b, op_b).0, k);
    debug_assert_eq!(c.shape(), (m, n));
    // zgemm has no conjugation flag, so Hermitian operands are materialized
    // (O(mk) next to the O(mkn) product).
    let a_h;
    let a = match op_a {
        Op::Plain => a,
        Op::Hermitian => {
            a_h = a.hermitian_transpose();
            &a_h
        }
    };
    let b_h;
    let b = match op_b {
        Op::Plain => b,
        Op::Hermitian => {
            b_h = b.hermitian_transpose();
            &b_h
        }
    };
    let (rsa, csa, fa) = (a.cols as isize, 1, matrixmultiply::CGemmOption::Standard);
    let (rsb, csb, fb) = (b.cols as isize, 1, matrixmultiply::CGemmOption::Standard);
    // SAFETY: Complex<f64> is repr(C) with layout [re, im], the pointers cover
    // the full matrices and the strides address them in bounds for the
    // (m, k, n) shapes checked above.
    unsafe {
        matrixmultiply::zgemm(
            fa,
            fb,
            m,
            k,
            n,
            [alpha.re, alpha.im],
            a.data.as_ptr().cast(),
            rsa,
            csa,
            b.data.as_ptr().cast(),
            rsb,
            csb,
            [beta.re, beta.im],
            c.data.as_mut_ptr().cast(),
            c.cols as isize,
            1,
        );
    }
}

/// `Aᴴ`.
pub fn hermitian_transpose(a: &CMatrix) -> CMatrix {
    a.hermitian_transpose()
}

/// `Tr(AᴴA) = Σ |a_ij|²`.
pub fn trace_gram(a: &CMatrix) -> f64 {
    norm_sqr(&a.data)
}

/// In-place lower Cholesky factor of a Hermitian positive-definite matrix.
/// Returns `None` when a pivot falls below `CHOLESKY_PIVOT_TOL` relative to
/// the largest diagonal entry.
fn cholesky(g: &CMatrix) -> Option<CMatrix> {
    let n = g.rows;
    let scale = (0..n).map(|i| g.get(i, i).re).fold(0.0, f64::max);
    if !(scale > 0.0) {
        return None;
    }
    let mut l = CMatrix::zeros(n, n);
    for j in 0..n {
        let mut d = g.get(j, j).re;
        for k in 0..j {
            d -= l.get(j, k).norm_sqr();
        }
        if !(d > CHOLESKY_PIVOT_TOL * scale) {
            return None;
        }
        let d = d.sqrt();
        l.set(j, j, C64::new(d, 0.0));
        for i in j + 1..n {
            let mut s = g.get(i, j);
            for k in 0..j {
                s -= l.get(i, k) * l.get(j, k).conj();
            }
            l.set(i, j, s / d);
        }
    }
    Some(l)
}

/// Inverse of `L Lᴴ` given the lower factor `L`.
fn cholesky_inverse(l: &CMatrix) -> CMatrix {
    let n = l.rows;
    let mut inv = CMatrix::zeros(n, n);
    let mut col = vec![C64::new(0.0, 0.0); n];
    for e in 0..n {
        // forward: L z = e
        for i in 0..n {
            let mut s = if i == e {
                C64::new(1.0, 0.0)
            } else {
                C64::new(0.0, 0.0)
            };
            for (k, &ck) in col.iter().enumerate().take(i) {
                s -= l.get(i, k) * ck;
            }
            col[i] = s / l.get(i, i).re;
        }
        // backward: Lᴴ x = z
        for i in (0..n).rev() {
            let mut s = col[i];
            for (k, &ck) in col.iter().enumerate().skip(i + 1) {
                s -= l.get(k, i).conj() * ck;
            }
            col[i] = s / l.get(i, i).re;
        }
        inv.set_column(e, &col);
    }
    inv
}

/// Moore–Penrose pseudo-inverse.
///
/// Full-row-rank fat matrices use `Aᴴ(AAᴴ)⁻¹`, tall ones `(AᴴA)⁻¹Aᴴ`, both
/// through a Cholesky factorization of the Gram matrix. If the factorization
/// hits a small pivot the SVD decides: a Gram condition number beyond
/// `1/GRAM_RANK_TOL` is an error, anything else is inverted through the SVD.
pub fn pseudo_inverse(a: &CMatrix) -> Result<CMatrix> {
    let fat = a.rows <= a.cols;
    let gram = if fat {
        a.mul(Op::Plain, a, Op::Hermitian)?
    } else {
        a.mul(Op::Hermitian, a, Op::Plain)?
    };
    if let Some(l) = cholesky(&gram) {
        let ginv = cholesky_inverse(&l);
        return if fat {
            a.mul(Op::Hermitian, &ginv, Op::Plain)
        } else {
            ginv.mul(Op::Plain, a, Op::Hermitian)
        };
    }
    svd_pseudo_inverse(a)
}

fn svd_pseudo_inverse(a: &CMatrix) -> Result<CMatrix> {
    let svd = a.to_nalgebra().svd(true, true);
    let smax = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    let smin = svd
        .singular_values
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min);
    let ratio = if smax > 0.0 {
        (smin / smax).powi(2)
    } else {
        0.0
    };
    if !(ratio >= GRAM_RANK_TOL) {
        return Err(Error::RankDeficient(ratio));
    }
    let pinv = svd
        .pseudo_inverse(0.0)
        .map_err(|e| Error::invalid(e.to_string()))?;
    Ok(CMatrix::from_nalgebra(&pinv))
}

/// `n×n` inverse DFT matrix with entries `exp(i·2πki/n)/√n`, indices
/// `k, i ∈ {0, …, n−1}`. Unitary.
pub fn idft_matrix(n: usize) -> Result<CMatrix> {
    if n == 0 {
        return Err(Error::invalid("idft size must be positive"));
    }
    let scale = 1.0 / (n as f64).sqrt();
    Ok(CMatrix::from_fn(n, n, |k, i| {
        // reduce the exponent mod n before forming the angle
        let phase = 2.0 * PI * ((k * i) % n) as f64 / n as f64;
        C64::from_polar(scale, phase)
    }))
}

/// Dense row-major real matrix, used by the widened real-valued system.
#[derive(Clone, Debug, PartialEq)]
pub struct RMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl RMatrix {
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        RMatrix { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn frobenius_sqr(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn scaled(&self, s: f64) -> RMatrix {
        RMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols);
        (0..self.rows)
            .map(|i| self.row(i).iter().zip(x).map(|(a, b)| a * b).sum())
            .collect()
    }

    pub fn transpose_matvec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.rows);
        let mut out = vec![0.0; self.cols];
        for (i, xi) in x.iter().enumerate() {
            for (o, a) in out.iter_mut().zip(self.row(i)) {
                *o += a * xi;
            }
        }
        out
    }
}

/// `[Re v; Im v]`.
pub fn widen_vec(v: &[C64]) -> Vec<f64> {
    v.iter()
        .map(|z| z.re)
        .chain(v.iter().map(|z| z.im))
        .collect()
}

/// Inverse of [`widen_vec`]; the input length must be even.
pub fn narrow_vec(v: &[f64]) -> Result<CVector> {
    if !v.len().is_multiple_of(2) {
        return Err(Error::dim("widened vector must have even length"));
    }
    let n = v.len() / 2;
    Ok(CVector::from_fn(n, |i| C64::new(v[i], v[n + i])))
}

/// `[[Re A, −Im A], [Im A, Re A]]`.
pub fn widen_matrix(a: &CMatrix) -> RMatrix {
    let (m, n) = a.shape();
    RMatrix::from_fn(2 * m, 2 * n, |i, j| {
        let z = a.get(i % m, j % n);
        match (i < m, j < n) {
            (true, true) | (false, false) => z.re,
            (true, false) => -z.im,
            (false, true) => z.im,
        }
    })
}

/// Real-valued system of twice the size equivalent to `(A, v)`.
pub fn widen(a: &CMatrix, v: &[C64]) -> Result<(RMatrix, Vec<f64>)> {
    if v.len() != a.rows() {
        return Err(Error::dim(format!(
            "vector of length {} for a matrix with {} rows",
            v.len(),
            a.rows()
        )));
    }
    Ok((widen_matrix(a), widen_vec(v)))
}

/// Deterministic random stream. Identical `(seed, stream)` pairs replay the
/// same sequence; distinct stream ids give independent sequences.
#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    stream: u64,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        RngStream { seed, stream, rng }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    pub fn standard_normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    /// Uniform on `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    pub fn index(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// One draw from `CN(mean, var)`.
    pub fn cgaussian(&mut self, mean: C64, var: f64) -> C64 {
        let s = (var / 2.0).sqrt();
        let re = self.standard_normal();
        let im = self.standard_normal();
        mean + C64::new(re * s, im * s)
    }
}

/// `count` independent draws from `CN(mean, var)`: real and imaginary parts
/// are independent with variance `var/2` each.
pub fn sample_cgaussian(mean: C64, var: f64, rng: &mut RngStream, count: usize) -> Result<CVector> {
    if !(var >= 0.0) || !var.is_finite() {
        return Err(Error::invalid(format!(
            "variance must be finite and >= 0, got {var}"
        )));
    }
    if count == 0 {
        return Err(Error::invalid("sample count must be positive"));
    }
    Ok(CVector::from_fn(count, |_| rng.cgaussian(mean, var)))
}
