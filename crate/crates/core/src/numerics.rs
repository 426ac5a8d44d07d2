//! Dense vectors and matrices, the seeded generator, and the few kernels the
//! rest of the crate is built on.
//!
//! Storage is always `f64` and row-major. Every constructor and public
//! operation rejects non-finite results so downstream code can assume finite
//! entries.

use std::ops::Index;

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseVector {
    values: Vec<f64>,
}

impl DenseVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("DenseVector::new"));
        }
        Ok(Self { values })
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            values: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    /// Mutable access for in-place kernels. Callers are responsible for
    /// keeping entries finite; [`DenseVector::check_finite`] re-validates.
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.values
    }

    pub fn check_finite(&self, what: &'static str) -> Result<()> {
        if self.values.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(what))
        }
    }

    pub fn ensure_dim(&self, expected: usize) -> Result<()> {
        if self.dim() == expected {
            Ok(())
        } else {
            Err(Error::DimensionMismatch {
                expected,
                actual: self.dim(),
            })
        }
    }

    pub fn l2_norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Largest absolute entry; zero for an empty vector.
    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Elementwise `self - other`.
    pub fn sub(&self, other: &DenseVector) -> Result<DenseVector> {
        vec_axpy(-1.0, other, self)
    }

    /// Elementwise `self + other`.
    pub fn add(&self, other: &DenseVector) -> Result<DenseVector> {
        vec_axpy(1.0, other, self)
    }

    pub fn scale(&self, a: f64) -> Result<DenseVector> {
        DenseVector::new(self.values.iter().map(|v| a * v).collect())
    }
}

impl From<DenseVector> for Vec<f64> {
    fn from(v: DenseVector) -> Self {
        v.values
    }
}

impl Index<usize> for DenseVector {
    type Output = f64;

    fn index(&self, i: usize) -> &f64 {
        &self.values[i]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl DenseMatrix {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(Error::ShapeMismatch(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("DenseMatrix::new"));
        }
        Ok(Self { rows, cols, values })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            values: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.values[i * n + i] = 1.0;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.values[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.values[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// Matrix-vector product `A x`.
    pub fn mul_vec(&self, x: &DenseVector) -> Result<DenseVector> {
        x.ensure_dim(self.cols)?;
        let out = (0..self.rows)
            .map(|r| dot(self.row(r), x.as_slice()))
            .collect();
        DenseVector::new(out)
    }

    /// Columns `[start, end)` as a new matrix.
    pub fn column_block(&self, start: usize, end: usize) -> DenseMatrix {
        let cols = end - start;
        let mut values = Vec::with_capacity(self.rows * cols);
        for r in 0..self.rows {
            values.extend_from_slice(&self.row(r)[start..end]);
        }
        DenseMatrix {
            rows: self.rows,
            cols,
            values,
        }
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `a*x + y`.
pub fn vec_axpy(a: f64, x: &DenseVector, y: &DenseVector) -> Result<DenseVector> {
    x.ensure_dim(y.dim())?;
    let out = x
        .as_slice()
        .iter()
        .zip(y.as_slice())
        .map(|(xi, yi)| a * xi + yi)
        .collect();
    DenseVector::new(out)
}

pub fn matmul(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    if a.cols != b.rows {
        return Err(Error::ShapeMismatch(format!(
            "cannot multiply {}x{} by {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = vec![0.0; a.rows * b.cols];
    for i in 0..a.rows {
        let out_row = &mut out[i * b.cols..(i + 1) * b.cols];
        for (k, &aik) in a.row(i).iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            for (o, bkj) in out_row.iter_mut().zip(b.row(k)) {
                *o += aik * bkj;
            }
        }
    }
    DenseMatrix::new(a.rows, b.cols, out)
}

pub fn l1_norm(x: &DenseVector) -> Result<f64> {
    if x.is_empty() {
        return Err(Error::Empty("l1_norm of an empty vector"));
    }
    Ok(x.as_slice().iter().map(|v| v.abs()).sum())
}

/// Seeded pseudo-random stream.
///
/// Backed by ChaCha with 8 rounds (`rand_chacha::ChaCha8Rng`) seeded through
/// `SeedableRng::seed_from_u64`. The integer and float transforms below are
/// defined here rather than borrowed from a distribution crate so the stream
/// is bit-exact across platforms and dependency upgrades.
#[derive(Debug, Clone)]
pub struct SeededRng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform integer in `[0, n)` by rejection sampling. Panics if `n == 0`.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "below(0)");
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let x = self.next_u64();
            if x < zone {
                return x % n;
            }
        }
    }

    /// Independent child stream; used to give each subsystem its own stream
    /// without coupling their draw counts.
    pub fn fork(&mut self, salt: u64) -> SeededRng {
        SeededRng::new(mix64(self.next_u64() ^ mix64(salt)))
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }
}

/// SplitMix64 finalizer; a fixed bijective mixing of a 64-bit word.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn v(x: &[f64]) -> DenseVector {
        DenseVector::new(x.to_vec()).unwrap()
    }

    #[test]
    fn axpy_examples() {
        assert_eq!(vec_axpy(0.0, &v(&[1.0, 2.0]), &v(&[3.0, 4.0])).unwrap(), v(&[3.0, 4.0]));
        assert_eq!(vec_axpy(1.0, &v(&[0.0, 0.0]), &v(&[5.0, 6.0])).unwrap(), v(&[5.0, 6.0]));
        assert_eq!(vec_axpy(2.0, &v(&[1.0, -1.0]), &v(&[1.0, 1.0])).unwrap(), v(&[3.0, -1.0]));
    }

    #[test]
    fn axpy_dim_mismatch() {
        let err = vec_axpy(1.0, &v(&[1.0]), &v(&[1.0, 2.0])).unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch { .. }));
    }

    #[test]
    fn axpy_rejects_overflow() {
        let err = vec_axpy(f64::MAX, &v(&[f64::MAX]), &v(&[0.0])).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
    }

    #[test]
    fn matmul_examples() {
        let b = DenseMatrix::new(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(matmul(&DenseMatrix::identity(2), &b).unwrap(), b);

        let a = DenseMatrix::new(1, 2, vec![1.0, 2.0]).unwrap();
        let col = DenseMatrix::new(2, 1, vec![3.0, 4.0]).unwrap();
        assert_eq!(matmul(&a, &col).unwrap().as_slice(), &[11.0]);

        let z = matmul(&DenseMatrix::zeros(2, 2), &b).unwrap();
        assert!(z.as_slice().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = DenseMatrix::zeros(2, 3);
        assert!(matches!(matmul(&a, &a), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn matrix_rejects_bad_length() {
        assert!(DenseMatrix::new(2, 2, vec![1.0; 3]).is_err());
    }

    #[test]
    fn l1_examples() {
        assert_eq!(l1_norm(&v(&[0.0, 0.0, 0.0])).unwrap(), 0.0);
        assert_eq!(l1_norm(&v(&[0.5, -1.5, 2.0])).unwrap(), 4.0);
        assert_eq!(l1_norm(&v(&[-3.0])).unwrap(), 3.0);
        assert!(matches!(l1_norm(&v(&[])), Err(Error::Empty(_))));
    }

    #[test]
    fn rng_reproducible() {
        let mut a = SeededRng::new(1234);
        let mut b = SeededRng::new(1234);
        for _ in 0..10_000 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
        let mut c = SeededRng::new(1235);
        let mut a = SeededRng::new(1234);
        assert_ne!(a.next_u64(), c.next_u64());
    }

    #[test]
    fn rng_first_draws_are_pinned() {
        // Frozen from the first run; guards against silent generator changes.
        let mut r = SeededRng::new(42);
        let draws: Vec<u64> = (0..3).map(|_| r.next_u64()).collect();
        assert_eq!(
            draws,
            vec![12578764544318200737, 17529487244874322312, 7886285670807131020]
        );
        let u = SeededRng::new(7).next_f64();
        assert!((0.0..1.0).contains(&u));
    }

    #[test]
    fn below_stays_in_range() {
        let mut r = SeededRng::new(9);
        let mut seen = [0usize; 5];
        for _ in 0..5000 {
            seen[r.below(5) as usize] += 1;
        }
        assert!(seen.iter().all(|&c| c > 900 && c < 1100), "{seen:?}");
    }

    fn small_matrix(rows: usize, cols: usize) -> impl Strategy<Value = DenseMatrix> {
        prop::collection::vec(-10.0f64..10.0, rows * cols)
            .prop_map(move |vals| DenseMatrix::new(rows, cols, vals).unwrap())
    }

    proptest! {
        #[test]
        fn matmul_is_associative(a in small_matrix(3, 4), b in small_matrix(4, 2), c in small_matrix(2, 5)) {
            let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
            let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
            let scale = left.as_slice().iter().fold(1.0f64, |m, x| m.max(x.abs()));
            for (l, r) in left.as_slice().iter().zip(right.as_slice()) {
                prop_assert!((l - r).abs() <= 1e-9 * scale);
            }
        }

        #[test]
        fn axpy_with_zero_target_is_identity(x in prop::collection::vec(-1e6f64..1e6, 0..64)) {
            let x = DenseVector::new(x).unwrap();
            let out = vec_axpy(1.0, &x, &DenseVector::zeros(x.dim())).unwrap();
            prop_assert_eq!(out, x);
        }
    }
}
