//! Banded direct solvers for the node systems assembled by the solvers.
//!
//! Interior nodes are numbered lexicographically, so every operator assembled on
//! a grid is banded with half bandwidth `nx - 2` in 2D and `1` in 1D.

use crate::error::{Error, Result};

/// General square band matrix with equal lower and upper half bandwidth.
///
/// Factorization is LU without pivoting. Every matrix the solvers build has a
/// positive definite symmetric part, which makes all leading minors nonzero.
#[derive(Debug, Clone)]
pub struct BandMatrix {
    n: usize,
    half: usize,
    width: usize,
    data: Vec<f64>,
    factored: bool,
}

impl BandMatrix {
    pub fn zeros(n: usize, half: usize) -> Self {
        let half = half.min(n.saturating_sub(1));
        let width = 2 * half + 1;
        Self {
            n,
            half,
            width,
            data: vec![0.0; n * width],
            factored: false,
        }
    }

    pub fn size(&self) -> usize {
        self.n
    }

    pub fn half_bandwidth(&self) -> usize {
        self.half
    }

    #[inline]
    fn slot(&self, i: usize, j: usize) -> usize {
        debug_assert!(i.abs_diff(j) <= self.half, "entry ({i}, {j}) outside band");
        i * self.width + (j + self.half - i)
    }

    #[inline]
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        let s = self.slot(i, j);
        self.data[s] += v;
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        if i.abs_diff(j) > self.half {
            0.0
        } else {
            self.data[self.slot(i, j)]
        }
    }

    /// y = A x (only valid before factorization).
    pub fn mul_vec(&self, x: &[f64], y: &mut [f64]) {
        debug_assert!(!self.factored);
        for i in 0..self.n {
            let lo = i.saturating_sub(self.half);
            let hi = (i + self.half).min(self.n - 1);
            let mut acc = 0.0;
            for j in lo..=hi {
                acc += self.data[self.slot(i, j)] * x[j];
            }
            y[i] = acc;
        }
    }

    /// In-place LU factorization (Doolittle, unit lower factor).
    pub fn factor(&mut self) -> Result<()> {
        let n = self.n;
        let w = self.half;
        for k in 0..n {
            let pivot = self.data[self.slot(k, k)];
            if !pivot.is_finite() || pivot.abs() < 1e-300 {
                return Err(Error::Numerical(format!(
                    "zero or non-finite pivot {pivot:e} at row {k}"
                )));
            }
            let end = (k + w).min(n - 1);
            for i in k + 1..=end {
                let sik = self.slot(i, k);
                let l = self.data[sik] / pivot;
                if l == 0.0 {
                    continue;
                }
                self.data[sik] = l;
                let row_k = k * self.width + self.half - k;
                let row_i = i * self.width + self.half - i;
                for j in k + 1..=end {
                    self.data[row_i + j] -= l * self.data[row_k + j];
                }
            }
        }
        self.factored = true;
        Ok(())
    }

    /// Solves in place after [`BandMatrix::factor`].
    pub fn solve(&self, b: &mut [f64]) {
        debug_assert!(self.factored);
        let n = self.n;
        let w = self.half;
        for i in 0..n {
            let lo = i.saturating_sub(w);
            let row = i * self.width + self.half - i;
            let mut acc = b[i];
            for j in lo..i {
                acc -= self.data[row + j] * b[j];
            }
            b[i] = acc;
        }
        for i in (0..n).rev() {
            let hi = (i + w).min(n - 1);
            let row = i * self.width + self.half - i;
            let mut acc = b[i];
            for j in i + 1..=hi {
                acc -= self.data[row + j] * b[j];
            }
            b[i] = acc / self.data[row + i];
        }
    }
}

/// Symmetric positive definite band matrix, lower band stored, Cholesky factored.
#[derive(Debug, Clone)]
pub struct SymBandMatrix {
    n: usize,
    half: usize,
    // row i holds entries (i, i - half ..= i)
    data: Vec<f64>,
    factored: bool,
}

impl SymBandMatrix {
    pub fn zeros(n: usize, half: usize) -> Self {
        let half = half.min(n.saturating_sub(1));
        Self {
            n,
            half,
            data: vec![0.0; n * (half + 1)],
            factored: false,
        }
    }

    pub fn size(&self) -> usize {
        self.n
    }

    #[inline]
    fn slot(&self, i: usize, j: usize) -> usize {
        debug_assert!(j <= i && i - j <= self.half);
        i * (self.half + 1) + (j + self.half - i)
    }

    /// Adds `v` to entry (i, j); callers add each off-diagonal pair once.
    #[inline]
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        let (r, c) = if i >= j { (i, j) } else { (j, i) };
        let s = self.slot(r, c);
        self.data[s] += v;
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (r, c) = if i >= j { (i, j) } else { (j, i) };
        if r - c > self.half {
            0.0
        } else {
            self.data[self.slot(r, c)]
        }
    }

    pub fn mul_vec(&self, x: &[f64], y: &mut [f64]) {
        debug_assert!(!self.factored);
        y.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..self.n {
            let lo = i.saturating_sub(self.half);
            for j in lo..i {
                let a = self.data[self.slot(i, j)];
                y[i] += a * x[j];
                y[j] += a * x[i];
            }
            y[i] += self.data[self.slot(i, i)] * x[i];
        }
    }

    /// Replace row and column `i` by the unit vector scaled by `diag`.
    pub fn clear_row_col(&mut self, i: usize, diag: f64) {
        let lo = i.saturating_sub(self.half);
        for j in lo..i {
            let s = self.slot(i, j);
            self.data[s] = 0.0;
        }
        let hi = (i + self.half).min(self.n - 1);
        for k in i + 1..=hi {
            let s = self.slot(k, i);
            self.data[s] = 0.0;
        }
        let s = self.slot(i, i);
        self.data[s] = diag;
    }

    pub fn factor(&mut self) -> Result<()> {
        let n = self.n;
        let w = self.half;
        let stride = w + 1;
        for i in 0..n {
            let lo = i.saturating_sub(w);
            for j in lo..=i {
                let jlo = j.saturating_sub(w).max(lo);
                let mut acc = self.data[i * stride + (j + w - i)];
                let ri = i * stride + w - i;
                let rj = j * stride + w - j;
                for k in jlo..j {
                    acc -= self.data[ri + k] * self.data[rj + k];
                }
                if i == j {
                    if !(acc > 0.0) || !acc.is_finite() {
                        return Err(Error::Numerical(format!(
                            "matrix not positive definite at row {i} (pivot {acc:e})"
                        )));
                    }
                    self.data[ri + i] = acc.sqrt();
                } else {
                    self.data[ri + j] = acc / self.data[rj + j];
                }
            }
        }
        self.factored = true;
        Ok(())
    }

    pub fn solve(&self, b: &mut [f64]) {
        debug_assert!(self.factored);
        let n = self.n;
        let w = self.half;
        let stride = w + 1;
        for i in 0..n {
            let lo = i.saturating_sub(w);
            let r = i * stride + w - i;
            let mut acc = b[i];
            for k in lo..i {
                acc -= self.data[r + k] * b[k];
            }
            b[i] = acc / self.data[r + i];
        }
        for i in (0..n).rev() {
            let r = i * stride + w - i;
            b[i] /= self.data[r + i];
            let xi = b[i];
            let lo = i.saturating_sub(w);
            for k in lo..i {
                b[k] -= self.data[r + k] * xi;
            }
        }
    }
}
