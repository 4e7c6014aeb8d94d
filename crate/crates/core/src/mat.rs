//! Dense row-major matrices and the handful of products the kernels need.
//!
//! Everything here is deterministic regardless of worker count: products are
//! parallelized over output rows (each an independent fixed-order sum), and
//! reductions over rows use fixed-size chunks whose partials are combined in
//! chunk order.

use num_traits::{Float, NumAssign};
use rayon::prelude::*;
use std::fmt::Debug;
use std::iter::Sum;

/// Scalar types the kernels run on (f32 at runtime, f64 for gradient checks).
pub trait Scalar: Float + NumAssign + Sum + Send + Sync + Debug + Default + 'static {
    fn from_f64(v: f64) -> Self;
    fn to_f64v(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64v(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64v(self) -> f64 {
        self
    }
}

/// Fixed chunk length for deterministic row reductions.
const REDUCE_CHUNK: usize = 256;

/// Below this many output elements, products run serially (parallel overhead
/// dominates otherwise).
const PAR_THRESHOLD: usize = 16 * 1024;

/// Dense row-major matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Mat<S> {
    rows: usize,
    cols: usize,
    data: Vec<S>,
}

impl<S: Scalar> Mat<S> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![S::zero(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<S>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length");
        Mat { rows, cols, data }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> S) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Mat { rows, cols, data }
    }

    /// Identity-like matrix (ones on the main diagonal).
    pub fn eye(n: usize) -> Self {
        Mat::from_fn(n, n, |r, c| if r == c { S::one() } else { S::zero() })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[S] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [S] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> S {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: S) {
        self.data[r * self.cols + c] = v;
    }

    pub fn fill(&mut self, v: S) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn map(&self, f: impl Fn(S) -> S + Sync) -> Mat<S> {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn scale(&mut self, s: S) {
        self.data.iter_mut().for_each(|x| *x *= s);
    }

    pub fn add_assign(&mut self, other: &Mat<S>) {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += *b;
        }
    }

    pub fn sub(&self, other: &Mat<S>) -> Mat<S> {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| a - b)
                .collect(),
        }
    }

    pub fn add(&self, other: &Mat<S>) -> Mat<S> {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| a + b)
                .collect(),
        }
    }

    /// Copies the columns `lo..hi` into a new matrix.
    pub fn slice_cols(&self, lo: usize, hi: usize) -> Mat<S> {
        assert!(lo <= hi && hi <= self.cols);
        let w = hi - lo;
        let mut out = Mat::zeros(self.rows, w);
        for r in 0..self.rows {
            out.row_mut(r).copy_from_slice(&self.row(r)[lo..hi]);
        }
        out
    }

    /// Adds `src` into the column span `lo..lo+src.cols()` of `self`.
    pub fn add_into_cols(&mut self, lo: usize, src: &Mat<S>) {
        assert_eq!(self.rows, src.rows);
        assert!(lo + src.cols <= self.cols);
        for r in 0..self.rows {
            let dst = &mut self.row_mut(r)[lo..lo + src.cols];
            for (d, s) in dst.iter_mut().zip(src.row(r)) {
                *d += *s;
            }
        }
    }

    pub fn transpose(&self) -> Mat<S> {
        let mut out = Mat::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.set(c, r, self.get(r, c));
            }
        }
        out
    }

    /// Maximum absolute entry.
    pub fn max_abs(&self) -> f64 {
        self.data
            .iter()
            .map(|x| x.to_f64v().abs())
            .fold(0.0, f64::max)
    }

    pub fn convert<T: Scalar>(&self) -> Mat<T> {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|x| T::from_f64(x.to_f64v())).collect(),
        }
    }
}

#[inline]
fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = S::zero();
    for (x, y) in a.iter().zip(b.iter()) {
        acc += *x * *y;
    }
    acc
}

/// `a · bᵀ` where `a` is m×k and `b` is n×k, giving m×n.
///
/// Each output element is an independent dot product of two contiguous rows.
pub fn matmul_nt<S: Scalar>(a: &Mat<S>, b: &Mat<S>) -> Mat<S> {
    assert_eq!(a.cols, b.cols, "inner dimensions of a·bᵀ");
    let (m, n, k) = (a.rows, b.rows, a.cols);
    let mut out = Mat::zeros(m, n);
    let body = |(r, out_row): (usize, &mut [S])| {
        let ar = a.row(r);
        for (j, o) in out_row.iter_mut().enumerate() {
            *o = dot(ar, &b.data[j * k..(j + 1) * k]);
        }
    };
    if m * n >= PAR_THRESHOLD {
        out.data
            .par_chunks_mut(n)
            .enumerate()
            .for_each(|(r, row)| body((r, row)));
    } else {
        out.data
            .chunks_mut(n)
            .enumerate()
            .for_each(|(r, row)| body((r, row)));
    }
    out
}

/// `a · b` where `a` is m×k and `b` is k×n, giving m×n.
pub fn matmul_nn<S: Scalar>(a: &Mat<S>, b: &Mat<S>) -> Mat<S> {
    assert_eq!(a.cols, b.rows, "inner dimensions of a·b");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    let mut out = Mat::zeros(m, n);
    let body = |(r, out_row): (usize, &mut [S])| {
        let ar = a.row(r);
        for (kk, &av) in ar.iter().enumerate() {
            let brow = &b.data[kk * n..(kk + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(brow.iter()) {
                *o += av * bv;
            }
        }
        let _ = k;
    };
    if m * n >= PAR_THRESHOLD {
        out.data
            .par_chunks_mut(n)
            .enumerate()
            .for_each(|(r, row)| body((r, row)));
    } else {
        out.data
            .chunks_mut(n)
            .enumerate()
            .for_each(|(r, row)| body((r, row)));
    }
    out
}

/// `aᵀ · b` where `a` is r×m and `b` is r×n, giving m×n.
///
/// This is a reduction over the shared row axis; partial sums are taken over
/// fixed-size row chunks and combined in chunk order, so the result does not
/// depend on the worker count.
pub fn matmul_tn<S: Scalar>(a: &Mat<S>, b: &Mat<S>) -> Mat<S> {
    assert_eq!(a.rows, b.rows, "row counts of aᵀ·b");
    let (r, m, n) = (a.rows, a.cols, b.cols);
    let partial = |lo: usize, hi: usize| -> Mat<S> {
        let mut acc = Mat::zeros(m, n);
        for row in lo..hi {
            let ar = a.row(row);
            let br = b.row(row);
            for (i, &av) in ar.iter().enumerate() {
                let dst = acc.row_mut(i);
                for (d, &bv) in dst.iter_mut().zip(br.iter()) {
                    *d += av * bv;
                }
            }
        }
        acc
    };
    let bounds: Vec<(usize, usize)> = (0..r)
        .step_by(REDUCE_CHUNK)
        .map(|lo| (lo, (lo + REDUCE_CHUNK).min(r)))
        .collect();
    let partials: Vec<Mat<S>> = if r * m * n >= PAR_THRESHOLD && bounds.len() > 1 {
        bounds.par_iter().map(|&(lo, hi)| partial(lo, hi)).collect()
    } else {
        bounds.iter().map(|&(lo, hi)| partial(lo, hi)).collect()
    };
    let mut out = Mat::zeros(m, n);
    for p in &partials {
        out.add_assign(p);
    }
    out
}

/// Column sums of `a`, reduced over rows in fixed-size chunks.
pub fn col_sums<S: Scalar>(a: &Mat<S>) -> Vec<S> {
    let (r, n) = (a.rows, a.cols);
    let bounds: Vec<(usize, usize)> = (0..r)
        .step_by(REDUCE_CHUNK)
        .map(|lo| (lo, (lo + REDUCE_CHUNK).min(r)))
        .collect();
    let partial = |lo: usize, hi: usize| -> Vec<S> {
        let mut acc = vec![S::zero(); n];
        for row in lo..hi {
            for (d, &v) in acc.iter_mut().zip(a.row(row)) {
                *d += v;
            }
        }
        acc
    };
    let partials: Vec<Vec<S>> = if r * n >= PAR_THRESHOLD && bounds.len() > 1 {
        bounds.par_iter().map(|&(lo, hi)| partial(lo, hi)).collect()
    } else {
        bounds.iter().map(|&(lo, hi)| partial(lo, hi)).collect()
    };
    let mut out = vec![S::zero(); n];
    for p in &partials {
        for (d, &v) in out.iter_mut().zip(p.iter()) {
            *d += v;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_nt(a: &Mat<f64>, b: &Mat<f64>) -> Mat<f64> {
        Mat::from_fn(a.rows(), b.rows(), |i, j| {
            (0..a.cols()).map(|k| a.get(i, k) * b.get(j, k)).sum()
        })
    }

    #[test]
    fn products_agree_with_naive() {
        let a = Mat::from_fn(7, 5, |r, c| (r * 5 + c) as f64 * 0.37 - 3.0);
        let b = Mat::from_fn(4, 5, |r, c| (r as f64 - c as f64) * 0.21);
        let nt = matmul_nt(&a, &b);
        let expect = naive_nt(&a, &b);
        for i in 0..7 {
            for j in 0..4 {
                assert!((nt.get(i, j) - expect.get(i, j)).abs() < 1e-12);
            }
        }
        let bt = b.transpose();
        let nn = matmul_nn(&a, &bt.transpose().transpose());
        assert_eq!(nn.rows(), 7);
        let tn = matmul_tn(&a, &a);
        for i in 0..5 {
            for j in 0..5 {
                let expect: f64 = (0..7).map(|r| a.get(r, i) * a.get(r, j)).sum();
                assert!((tn.get(i, j) - expect).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn chunked_reduction_matches_serial_sum() {
        let a = Mat::from_fn(1000, 3, |r, c| ((r * 3 + c) % 17) as f64 - 8.0);
        let sums = col_sums(&a);
        for c in 0..3 {
            let expect: f64 = (0..1000).map(|r| a.get(r, c)).sum();
            assert!((sums[c] - expect).abs() < 1e-9);
        }
    }

    #[test]
    fn col_slicing_roundtrip() {
        let a = Mat::from_fn(3, 6, |r, c| (r * 6 + c) as f32);
        let s = a.slice_cols(2, 5);
        assert_eq!(s.cols(), 3);
        assert_eq!(s.get(1, 0), a.get(1, 2));
        let mut z = Mat::zeros(3, 6);
        z.add_into_cols(2, &s);
        assert_eq!(z.get(2, 4), a.get(2, 4));
        assert_eq!(z.get(2, 0), 0.0);
    }
}
