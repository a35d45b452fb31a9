use std::ops::{Index, IndexMut};

use num_complex::Complex64;

use crate::error::{bail, Result};

pub type C64 = Complex64;

/// Dense complex column vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexVector {
    data: Vec<C64>,
}

impl ComplexVector {
    pub fn new(data: Vec<C64>) -> Result<Self> {
        if data.is_empty() {
            bail!(InvalidArgument, "complex vector must have at least one entry");
        }
        Ok(Self { data })
    }

    pub fn zeros(n: usize) -> Self {
        Self { data: vec![C64::new(0.0, 0.0); n] }
    }

    /// Builds a vector from interleaved `re, im` pairs.
    pub fn from_interleaved(values: &[f64]) -> Result<Self> {
        if !values.len().is_multiple_of(2) {
            bail!(InvalidArgument, "interleaved buffer has odd length {}", values.len());
        }
        Self::new(values.chunks_exact(2).map(|p| C64::new(p[0], p[1])).collect())
    }

    pub fn to_interleaved(&self) -> Vec<f64> {
        self.data.iter().flat_map(|z| [z.re, z.im]).collect()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[C64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [C64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<C64> {
        self.data
    }

    pub fn iter(&self) -> std::slice::Iter<'_, C64> {
        self.data.iter()
    }

    pub fn norm_sqr(&self) -> f64 {
        self.data.iter().map(|z| z.norm_sqr()).sum()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sqr().sqrt()
    }

    pub fn norm_inf(&self) -> f64 {
        self.data.iter().map(|z| z.norm()).fold(0.0, f64::max)
    }

    pub fn scale(&self, s: f64) -> Self {
        Self { data: self.data.iter().map(|z| z * s).collect() }
    }

    pub fn scale_c(&self, s: C64) -> Self {
        Self { data: self.data.iter().map(|z| z * s).collect() }
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a - b)
    }

    /// In-place `self += s * other`.
    pub fn axpy(&mut self, s: C64, other: &Self) -> Result<()> {
        if self.len() != other.len() {
            bail!(InvalidArgument, "length mismatch: {} vs {}", self.len(), other.len());
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
        Ok(())
    }

    /// Hermitian inner product `selfᴴ · other`.
    pub fn dot(&self, other: &Self) -> Result<C64> {
        if self.len() != other.len() {
            bail!(InvalidArgument, "length mismatch: {} vs {}", self.len(), other.len());
        }
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a.conj() * b).sum())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|z| z.re.is_finite() && z.im.is_finite())
    }

    fn zip_with(&self, other: &Self, f: impl Fn(C64, C64) -> C64) -> Result<Self> {
        if self.len() != other.len() {
            bail!(InvalidArgument, "length mismatch: {} vs {}", self.len(), other.len());
        }
        Ok(Self { data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect() })
    }
}

impl Index<usize> for ComplexVector {
    type Output = C64;
    fn index(&self, i: usize) -> &C64 {
        &self.data[i]
    }
}

impl IndexMut<usize> for ComplexVector {
    fn index_mut(&mut self, i: usize) -> &mut C64 {
        &mut self.data[i]
    }
}

impl FromIterator<C64> for ComplexVector {
    fn from_iter<I: IntoIterator<Item = C64>>(iter: I) -> Self {
        Self { data: iter.into_iter().collect() }
    }
}

/// Dense row-major complex matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexMatrix {
    rows: usize,
    cols: usize,
    data: Vec<C64>,
}

impl ComplexMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![C64::new(0.0, 0.0); rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = C64::new(1.0, 0.0);
        }
        m
    }

    pub fn from_row_major(rows: usize, cols: usize, data: Vec<C64>) -> Result<Self> {
        if data.len() != rows * cols {
            bail!(InvalidArgument, "{}x{} matrix needs {} entries, got {}", rows, cols, rows * cols, data.len());
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_diag(diag: &[C64]) -> Self {
        let mut m = Self::zeros(diag.len(), diag.len());
        for (i, &d) in diag.iter().enumerate() {
            m[(i, i)] = d;
        }
        m
    }

    /// Stacks equal-length vectors as columns.
    pub fn from_columns(cols: &[ComplexVector]) -> Result<Self> {
        let Some(first) = cols.first() else {
            bail!(InvalidArgument, "no columns given");
        };
        let rows = first.len();
        let mut m = Self::zeros(rows, cols.len());
        for (j, c) in cols.iter().enumerate() {
            if c.len() != rows {
                bail!(InvalidArgument, "column {} has length {}, expected {}", j, c.len(), rows);
            }
            for i in 0..rows {
                m[(i, j)] = c[i];
            }
        }
        Ok(m)
    }

    pub fn column_vector(v: &ComplexVector) -> Self {
        Self { rows: v.len(), cols: 1, data: v.as_slice().to_vec() }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[C64] {
        &self.data
    }

    pub fn column(&self, j: usize) -> ComplexVector {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    /// Selects a subset of columns, in the given order.
    pub fn select_columns(&self, idx: &[usize]) -> Self {
        let mut m = Self::zeros(self.rows, idx.len());
        for (k, &j) in idx.iter().enumerate() {
            for i in 0..self.rows {
                m[(i, k)] = self[(i, j)];
            }
        }
        m
    }

    pub fn adjoint(&self) -> Self {
        let mut m = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                m[(j, i)] = self[(i, j)].conj();
            }
        }
        m
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.cols != other.rows {
            bail!(InvalidArgument, "cannot multiply {}x{} by {}x{}", self.rows, self.cols, other.rows, other.cols);
        }
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == C64::new(0.0, 0.0) {
                    continue;
                }
                let row = &other.data[k * other.cols..(k + 1) * other.cols];
                let dst = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (d, b) in dst.iter_mut().zip(row) {
                    *d += a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn mul_vec(&self, v: &ComplexVector) -> Result<ComplexVector> {
        if self.cols != v.len() {
            bail!(InvalidArgument, "cannot multiply {}x{} by vector of length {}", self.rows, self.cols, v.len());
        }
        Ok((0..self.rows)
            .map(|i| self.data[i * self.cols..(i + 1) * self.cols].iter().zip(v.iter()).map(|(a, b)| a * b).sum())
            .collect())
    }

    /// `selfᴴ · v` without materialising the adjoint.
    pub fn adjoint_mul_vec(&self, v: &ComplexVector) -> Result<ComplexVector> {
        if self.rows != v.len() {
            bail!(InvalidArgument, "cannot multiply adjoint of {}x{} by vector of length {}", self.rows, self.cols, v.len());
        }
        let mut out = vec![C64::new(0.0, 0.0); self.cols];
        for i in 0..self.rows {
            let vi = v[i];
            for (o, a) in out.iter_mut().zip(&self.data[i * self.cols..(i + 1) * self.cols]) {
                *o += a.conj() * vi;
            }
        }
        Ok(ComplexVector { data: out })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.check_same(other)?;
        Ok(Self { rows: self.rows, cols: self.cols, data: self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect() })
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.check_same(other)?;
        Ok(Self { rows: self.rows, cols: self.cols, data: self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect() })
    }

    pub fn scale(&self, s: f64) -> Self {
        Self { rows: self.rows, cols: self.cols, data: self.data.iter().map(|z| z * s).collect() }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
    }

    /// Largest entry modulus.
    pub fn max_abs(&self) -> f64 {
        self.data.iter().map(|z| z.norm()).fold(0.0, f64::max)
    }

    pub fn trace(&self) -> C64 {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).sum()
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    fn check_same(&self, other: &Self) -> Result<()> {
        if self.rows != other.rows || self.cols != other.cols {
            bail!(InvalidArgument, "shape mismatch: {}x{} vs {}x{}", self.rows, self.cols, other.rows, other.cols);
        }
        Ok(())
    }
}

impl Index<(usize, usize)> for ComplexMatrix {
    type Output = C64;
    fn index(&self, (i, j): (usize, usize)) -> &C64 {
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for ComplexMatrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut C64 {
        &mut self.data[i * self.cols + j]
    }
}
