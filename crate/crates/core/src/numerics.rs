//! Dense vector/matrix primitives shared by the rest of the crate.
//!
//! Matrices are row-major and small; nothing here tries to be a general
//! linear-algebra library.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = T::one();
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} values cannot form a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from equal-length rows. An empty slice gives a 0x0 matrix.
    pub fn from_rows<R: AsRef<[T]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::Shape(format!(
                    "row {i} has length {}, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[T]> {
        // chunks_exact panics on a zero chunk size
        (0..self.rows).map(move |i| self.row(i))
    }

    #[inline]
    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Copies the selected rows, in the given order, into a new matrix.
    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Self {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn map<U: Scalar>(&self, f: impl Fn(T) -> U) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

impl<T> std::ops::Index<(usize, usize)> for Matrix<T> {
    type Output = T;

    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &T {
        &self.data[i * self.cols + j]
    }
}

impl<T> std::ops::IndexMut<(usize, usize)> for Matrix<T> {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut T {
        &mut self.data[i * self.cols + j]
    }
}

/// Inner product, accumulated left to right.
#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

#[inline]
pub fn norm<T: Scalar>(v: &[T]) -> T {
    dot(v, v).sqrt()
}

fn check_finite<T: Scalar>(v: &[T], what: &str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("{what} contains NaN or Inf")))
    }
}

/// Scales `v` to unit Euclidean length.
pub fn l2_normalize<T: Scalar>(v: &[T]) -> Result<Vec<T>> {
    check_finite(v, "vector")?;
    let n = norm(v);
    if n <= T::zero() {
        return Err(Error::Degenerate(
            "cannot normalize a zero-norm vector".into(),
        ));
    }
    if !n.is_finite() {
        return Err(Error::NonFinite("vector norm overflowed".into()));
    }
    Ok(v.iter().map(|&x| x / n).collect())
}

/// Cosine similarity `aᵀb / (‖a‖‖b‖)`, clamped into `[-1, 1]`.
pub fn cosine<T: Scalar>(a: &[T], b: &[T]) -> Result<T> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "cosine of vectors with lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    check_finite(a, "left operand")?;
    check_finite(b, "right operand")?;
    let (na, nb) = (norm(a), norm(b));
    if na <= T::zero() || nb <= T::zero() {
        return Err(Error::Degenerate("cosine with a zero-norm operand".into()));
    }
    let c = dot(a, b) / (na * nb);
    Ok(c.max(-T::one()).min(T::one()))
}

fn check_unit_rows<T: Scalar>(m: &Matrix<T>, name: &str) -> Result<()> {
    let tol = T::unit_tolerance();
    for (i, r) in m.row_iter().enumerate() {
        check_finite(r, name)?;
        let n = norm(r);
        if (n - T::one()).abs() > tol {
            return Err(Error::NonUnitRow {
                row: i,
                norm: n.as_f64(),
            });
        }
    }
    Ok(())
}

/// N×C matrix of cosines between unit-norm embeddings `x` (N×d) and
/// unit-norm class vectors `w` (C×d). Every row of both inputs must be
/// unit-length within `Scalar::unit_tolerance()`.
pub fn cosine_logits<T: Scalar>(x: &Matrix<T>, w: &Matrix<T>) -> Result<Matrix<T>> {
    if x.cols() != w.cols() {
        return Err(Error::Shape(format!(
            "embedding dim {} vs class-weight dim {}",
            x.cols(),
            w.cols()
        )));
    }
    check_unit_rows(x, "embeddings")?;
    check_unit_rows(w, "class weights")?;
    Ok(dot_logits(x, w, true))
}

/// `x · wᵀ` without unit-norm checks; optionally clamped into `[-1, 1]`.
pub(crate) fn dot_logits<T: Scalar>(x: &Matrix<T>, w: &Matrix<T>, clamp: bool) -> Matrix<T> {
    let mut out = Matrix::zeros(x.rows(), w.rows());
    for i in 0..x.rows() {
        let xi = x.row(i);
        for j in 0..w.rows() {
            let v = dot(xi, w.row(j));
            out[(i, j)] = if clamp {
                v.max(-T::one()).min(T::one())
            } else {
                v
            };
        }
    }
    out
}

/// `log(1 + Σ e^{tⱼ})` with a max-shift so that large exponents do not
/// overflow: with `M = max(0, maxⱼ tⱼ)` this is `M + log(e^{-M} + Σ e^{tⱼ-M})`.
pub fn log1p_sum_exp<T: Scalar>(terms: &[T]) -> T {
    let shift = terms.iter().fold(T::zero(), |m, &t| m.max(t));
    let mut sum = T::zero();
    for &t in terms {
        sum += (t - shift).exp();
    }
    shifted_log1p(shift, sum)
}

/// `shift + log(e^{-shift} + sum)`, using `ln_1p` when nothing was shifted
/// and the sum is small enough for `1 + sum` to lose digits.
#[inline]
pub(crate) fn shifted_log1p<T: Scalar>(shift: T, sum: T) -> T {
    if shift == T::zero() && sum < T::one() {
        sum.ln_1p()
    } else {
        shift + ((-shift).exp() + sum).ln()
    }
}

/// `log Σ e^{tⱼ}` with the usual max-shift. Empty input gives `-∞`.
pub fn log_sum_exp<T: Scalar>(terms: &[T]) -> T {
    let shift = terms.iter().fold(T::neg_infinity(), |m, &t| m.max(t));
    if shift == T::neg_infinity() {
        return shift;
    }
    let mut acc = T::zero();
    for &t in terms {
        acc += (t - shift).exp();
    }
    shift + acc.ln()
}
