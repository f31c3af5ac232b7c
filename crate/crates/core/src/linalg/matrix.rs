use std::fmt;
use std::iter::Sum;

use num_traits::{Float, NumCast};
use rayon::prelude::*;

use crate::error::{Error, Result};

/// Floating-point element type a [`DenseMatrix`] can carry.
pub trait Scalar: Float + Sum + Send + Sync + fmt::Debug + Default + 'static {
    const BYTES: usize;

    fn from_f64(v: f64) -> Self {
        <Self as NumCast>::from(v).expect("f64 converts to any float")
    }

    fn to_f64_lossless(self) -> f64 {
        <f64 as NumCast>::from(self).expect("float converts to f64")
    }
}

impl Scalar for f32 {
    const BYTES: usize = 4;
}

impl Scalar for f64 {
    const BYTES: usize = 8;
}

/// Row-major dense matrix.
#[derive(Clone, PartialEq)]
pub struct DenseMatrix<T = f64> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

// Below this many multiply-adds a product runs on the calling thread.
const PAR_THRESHOLD: usize = 1 << 16;

impl<T: Scalar> DenseMatrix<T> {
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "DenseMatrix::new",
                format!("{} values for a {rows}x{cols} matrix", data.len()),
            ));
        }
        Ok(Self { rows, cols, data })
    }

    /// Like [`DenseMatrix::new`] but also rejects NaN and infinite entries.
    pub fn new_finite(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!(
                "non-finite entry at ({}, {})",
                pos / cols.max(1),
                pos % cols.max(1)
            )));
        }
        Self::new(rows, cols, data)
    }

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
            m.data[i * n + i] = T::one();
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    /// Builds a matrix from equally long rows. Panics on ragged input.
    pub fn from_rows<R: AsRef<[T]>>(rows: &[R]) -> Self {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Self {
            rows: rows.len(),
            cols,
            data,
        }
    }

    pub fn diag(values: &[T]) -> Self {
        let n = values.len();
        let mut m = Self::zeros(n, n);
        for (i, &v) in values.iter().enumerate() {
            m.data[i * n + i] = v;
        }
        m
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
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: T) {
        self.data[i * self.cols + j] = v;
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
        let cols = self.cols.max(1);
        self.data.chunks_exact(cols).take(if self.cols == 0 { 0 } else { self.rows })
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn cast<U: Scalar>(&self) -> DenseMatrix<U> {
        DenseMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .map(|&v| <U as NumCast>::from(v).unwrap_or_else(U::nan))
                .collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, &v| m.max(v.abs()))
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, k: T) -> Self {
        self.map(|v| v * k)
    }

    fn zip_with(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape() != other.shape() {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(), other.shape()),
            ));
        }
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    /// `self += k * other`, in place.
    pub fn axpy(&mut self, k: T, other: &Self) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape(
                "axpy",
                format!("{:?} vs {:?}", self.shape(), other.shape()),
            ));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + k * b;
        }
        Ok(())
    }
}

impl<T: Scalar> fmt::Debug for DenseMatrix<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "DenseMatrix {}x{} [", self.rows, self.cols)?;
        for i in 0..self.rows.min(8) {
            writeln!(f, "  {:?}", &self.row(i)[..self.cols.min(8)])?;
        }
        write!(f, "]")
    }
}

/// Matrix product `a · b`.
///
/// Each output element accumulates in ascending inner-index order, so the
/// result is bit-identical regardless of how output rows are scheduled.
pub fn matmul<T: Scalar>(a: &DenseMatrix<T>, b: &DenseMatrix<T>) -> Result<DenseMatrix<T>> {
    if a.cols != b.rows {
        return Err(Error::shape(
            "matmul",
            format!("{}x{} · {}x{}", a.rows, a.cols, b.rows, b.cols),
        ));
    }
    let (m, k, n) = (a.rows, a.cols, b.cols);
    let mut out = DenseMatrix::zeros(m, n);
    if n == 0 {
        return Ok(out);
    }
    let kernel = |(i, out_row): (usize, &mut [T])| {
        let a_row = a.row(i);
        for (p, &aip) in a_row.iter().enumerate() {
            let b_row = &b.data[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o = *o + aip * bv;
            }
        }
    };
    if m * k * n >= PAR_THRESHOLD {
        out.data.par_chunks_mut(n).enumerate().for_each(kernel);
    } else {
        out.data.chunks_mut(n).enumerate().for_each(kernel);
    }
    Ok(out)
}

/// `a · bᵀ` without materializing the transpose. Rows of `a` are dotted
/// with rows of `b`, ascending index order.
pub fn matmul_nt<T: Scalar>(a: &DenseMatrix<T>, b: &DenseMatrix<T>) -> Result<DenseMatrix<T>> {
    if a.cols != b.cols {
        return Err(Error::shape(
            "matmul_nt",
            format!("{}x{} · ({}x{})ᵀ", a.rows, a.cols, b.rows, b.cols),
        ));
    }
    let (m, n) = (a.rows, b.rows);
    let mut out = DenseMatrix::zeros(m, n);
    if n == 0 {
        return Ok(out);
    }
    let kernel = |(i, out_row): (usize, &mut [T])| {
        let a_row = a.row(i);
        for (j, o) in out_row.iter_mut().enumerate() {
            *o = dot(a_row, b.row(j));
        }
    };
    if m * n * a.cols >= PAR_THRESHOLD {
        out.data.par_chunks_mut(n).enumerate().for_each(kernel);
    } else {
        out.data.chunks_mut(n).enumerate().for_each(kernel);
    }
    Ok(out)
}

#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

/// Sum of squared entries, `‖A‖²_F`.
pub fn frobenius_sq<T: Scalar>(a: &DenseMatrix<T>) -> T {
    a.data.iter().fold(T::zero(), |acc, &v| acc + v * v)
}

pub fn trace<T: Scalar>(a: &DenseMatrix<T>) -> T {
    (0..a.rows.min(a.cols)).fold(T::zero(), |acc, i| acc + a.get(i, i))
}

/// `XᵀX` for an `n × d` sample matrix, symmetrized as `(G + Gᵀ)/2` so the
/// result is exactly symmetric.
pub fn gram<T: Scalar>(x: &DenseMatrix<T>) -> DenseMatrix<T> {
    let xt = x.transpose();
    let g = matmul_nt(&xt, &xt).expect("xᵀ has matching inner dimension");
    let d = g.rows;
    let half = T::from_f64(0.5);
    let mut out = DenseMatrix::zeros(d, d);
    for i in 0..d {
        for j in 0..d {
            out.data[i * d + j] = (g.data[i * d + j] + g.data[j * d + i]) * half;
        }
    }
    out
}
