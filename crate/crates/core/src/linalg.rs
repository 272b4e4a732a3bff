//! Dense symmetric, block-diagonal and diagonal matrix representations, and
//! the Cholesky machinery used for damped trace computations.

use serde::{Deserialize, Serialize};

use crate::error::{Result, TicError};

/// Square matrix stored in full, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseSymMatrix {
    dim: usize,
    values: Vec<f64>,
}

impl DenseSymMatrix {
    pub fn zeros(dim: usize) -> Self {
        DenseSymMatrix {
            dim,
            values: vec![0.0; dim * dim],
        }
    }

    pub fn identity(dim: usize) -> Self {
        let mut m = Self::zeros(dim);
        for i in 0..dim {
            m.set(i, i, 1.0);
        }
        m
    }

    /// Wraps row-major values. The matrix is symmetrized by averaging with
    /// its transpose.
    pub fn from_row_major(dim: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != dim * dim {
            return Err(TicError::DimensionMismatch {
                what: "dense matrix values",
                expected: dim * dim,
                actual: values.len(),
            });
        }
        let mut m = DenseSymMatrix { dim, values };
        m.symmetrize();
        Ok(m)
    }

    pub fn from_diagonal(diag: &[f64]) -> Self {
        let mut m = Self::zeros(diag.len());
        for (i, &v) in diag.iter().enumerate() {
            m.set(i, i, v);
        }
        m
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.dim + j]
    }

    #[inline]
    pub(crate) fn set(&mut self, i: usize, j: usize, v: f64) {
        self.values[i * self.dim + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub(crate) fn symmetrize(&mut self) {
        let n = self.dim;
        for i in 0..n {
            for j in i + 1..n {
                let avg = 0.5 * (self.get(i, j) + self.get(j, i));
                self.set(i, j, avg);
                self.set(j, i, avg);
            }
        }
    }

    /// Largest absolute entry of `M - M^T`.
    pub fn asymmetry(&self) -> f64 {
        let n = self.dim;
        let mut worst = 0.0f64;
        for i in 0..n {
            for j in i + 1..n {
                worst = worst.max((self.get(i, j) - self.get(j, i)).abs());
            }
        }
        worst
    }

    pub fn trace(&self) -> f64 {
        (0..self.dim).map(|i| self.get(i, i)).sum()
    }

    pub fn diagonal(&self) -> DiagVector {
        DiagVector::new((0..self.dim).map(|i| self.get(i, i)).collect())
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// `|self - other|_F / |other|_F` (absolute distance when `other` is zero).
    pub fn relative_frobenius_distance(&self, other: &DenseSymMatrix) -> f64 {
        let diff: f64 = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let norm = other.frobenius_norm();
        if norm > 0.0 {
            diff / norm
        } else {
            diff
        }
    }

    pub fn submatrix(&self, start: usize, len: usize) -> DenseSymMatrix {
        let mut out = DenseSymMatrix::zeros(len);
        for i in 0..len {
            out.values[i * len..(i + 1) * len]
                .copy_from_slice(&self.values[(start + i) * self.dim + start..(start + i) * self.dim + start + len]);
        }
        out
    }

    pub fn mul_vec(&self, v: &[f64]) -> Vec<f64> {
        (0..self.dim)
            .map(|i| self.row(i).iter().zip(v).map(|(a, b)| a * b).sum())
            .collect()
    }

    /// Checks positive semi-definiteness up to `-tolerance` on the smallest
    /// eigenvalue by factoring `M + tolerance * I`.
    pub fn is_psd(&self, tolerance: f64) -> bool {
        Cholesky::factor(self, tolerance.max(0.0)).is_ok()
    }

    /// Default PSD tolerance: `1e-8 * trace / d`.
    pub fn psd_tolerance(&self) -> f64 {
        if self.dim == 0 {
            return 0.0;
        }
        1e-8 * self.trace().abs() / self.dim as f64
    }

    /// Extracts the diagonal blocks given by consecutive `sizes`.
    pub fn to_blocks(&self, sizes: &[usize]) -> Result<BlockDiagMatrix> {
        let total: usize = sizes.iter().sum();
        if total != self.dim {
            return Err(TicError::DimensionMismatch {
                what: "block sizes",
                expected: self.dim,
                actual: total,
            });
        }
        let mut start = 0;
        let mut blocks = Vec::with_capacity(sizes.len());
        for &s in sizes {
            blocks.push(self.submatrix(start, s));
            start += s;
        }
        Ok(BlockDiagMatrix { blocks })
    }
}

/// Block-diagonal matrix, one square block per parameter segment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockDiagMatrix {
    blocks: Vec<DenseSymMatrix>,
}

impl BlockDiagMatrix {
    pub fn new(blocks: Vec<DenseSymMatrix>) -> Self {
        BlockDiagMatrix { blocks }
    }

    pub fn blocks(&self) -> &[DenseSymMatrix] {
        &self.blocks
    }

    pub fn block_sizes(&self) -> Vec<usize> {
        self.blocks.iter().map(|b| b.dim()).collect()
    }

    pub fn dim(&self) -> usize {
        self.blocks.iter().map(|b| b.dim()).sum()
    }

    pub fn trace(&self) -> f64 {
        self.blocks.iter().map(|b| b.trace()).sum()
    }

    pub fn diagonal(&self) -> DiagVector {
        DiagVector::new(
            self.blocks
                .iter()
                .flat_map(|b| (0..b.dim()).map(move |i| b.get(i, i)))
                .collect(),
        )
    }

    /// Dense matrix with zero off-diagonal blocks.
    pub fn to_dense(&self) -> DenseSymMatrix {
        let d = self.dim();
        let mut out = DenseSymMatrix::zeros(d);
        let mut start = 0;
        for b in &self.blocks {
            for i in 0..b.dim() {
                for j in 0..b.dim() {
                    out.set(start + i, start + j, b.get(i, j));
                }
            }
            start += b.dim();
        }
        out
    }
}

/// Diagonal of a matrix. Entries within `1e-12` below zero are clamped to 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagVector {
    values: Vec<f64>,
}

impl DiagVector {
    pub fn new(values: Vec<f64>) -> Self {
        DiagVector { values }
    }

    /// Copy with rounding-level negative entries set to zero. Entries below
    /// `-1e-12` are left untouched so callers can detect them.
    pub fn clamped(&self) -> Self {
        DiagVector {
            values: self
                .values
                .iter()
                .map(|&v| if v < 0.0 && v >= -1e-12 { 0.0 } else { v })
                .collect(),
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn trace(&self) -> f64 {
        self.values.iter().sum()
    }
}

/// Lower-triangular Cholesky factor `L` with `A + shift * I = L L^T`.
#[derive(Debug, Clone)]
pub struct Cholesky {
    dim: usize,
    lower: Vec<f64>,
}

impl Cholesky {
    /// Factors `a + shift * I`. Fails with the first non-positive pivot.
    pub fn factor(a: &DenseSymMatrix, shift: f64) -> Result<Self> {
        let n = a.dim();
        let mut l = vec![0.0; n * n];
        for j in 0..n {
            let mut diag = a.get(j, j) + shift;
            for k in 0..j {
                diag -= l[j * n + k] * l[j * n + k];
            }
            if !(diag > 0.0) || !diag.is_finite() {
                return Err(TicError::NotPositiveDefinite {
                    index: j,
                    pivot: diag,
                });
            }
            let ljj = diag.sqrt();
            l[j * n + j] = ljj;
            for i in j + 1..n {
                let mut s = a.get(i, j);
                for k in 0..j {
                    s -= l[i * n + k] * l[j * n + k];
                }
                l[i * n + j] = s / ljj;
            }
        }
        Ok(Cholesky { dim: n, lower: l })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Solves `L y = b` in place.
    pub fn forward_solve(&self, b: &mut [f64]) {
        let n = self.dim;
        for i in 0..n {
            let row = &self.lower[i * n..i * n + i];
            let s: f64 = row.iter().zip(&b[..i]).map(|(a, c)| a * c).sum();
            b[i] = (b[i] - s) / self.lower[i * n + i];
        }
    }

    /// Solves `L^T x = b` in place.
    pub fn backward_solve(&self, b: &mut [f64]) {
        let n = self.dim;
        for i in (0..n).rev() {
            let mut s = b[i];
            for k in i + 1..n {
                s -= self.lower[k * n + i] * b[k];
            }
            b[i] = s / self.lower[i * n + i];
        }
    }

    pub fn solve(&self, b: &mut [f64]) {
        self.forward_solve(b);
        self.backward_solve(b);
    }

    /// `Tr(A^{-1} C)` as `Tr(L^{-1} C L^{-T})`: forward solves on the columns
    /// of `C` give `W = L^{-1} C`, then forward solves on the rows of `W` give
    /// `L^{-1} W^T`, whose diagonal is summed.
    pub fn trace_inv_times(&self, c: &DenseSymMatrix) -> f64 {
        let n = self.dim;
        // W^T has rows = columns of W = L^{-1} c_j; C symmetric so c_j = row j.
        let mut wt = vec![0.0; n * n];
        for j in 0..n {
            let col = &mut wt[j * n..(j + 1) * n];
            col.copy_from_slice(c.row(j));
            self.forward_solve(col);
        }
        // Row i of W is column i of W^T.
        let mut trace = 0.0;
        let mut w_row = vec![0.0; n];
        for i in 0..n {
            for j in 0..n {
                w_row[j] = wt[j * n + i];
            }
            // (L^{-1} W^T)_{ii} needs the i-th column of W^T, i.e. row i of W.
            self.forward_solve(&mut w_row);
            trace += w_row[i];
        }
        trace
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spd3() -> DenseSymMatrix {
        DenseSymMatrix::from_row_major(3, vec![4.0, 2.0, 0.6, 2.0, 5.0, 1.0, 0.6, 1.0, 3.0]).unwrap()
    }

    #[test]
    fn cholesky_reconstructs() {
        let a = spd3();
        let ch = Cholesky::factor(&a, 0.0).unwrap();
        let n = 3;
        for i in 0..n {
            for j in 0..n {
                let v: f64 = (0..n).map(|k| ch.lower[i * n + k] * ch.lower[j * n + k]).sum();
                assert!((v - a.get(i, j)).abs() < 1e-14);
            }
        }
        let mut b = vec![1.0, 2.0, 3.0];
        ch.solve(&mut b);
        let back = a.mul_vec(&b);
        for (x, y) in back.iter().zip([1.0, 2.0, 3.0]) {
            assert!((x - y).abs() < 1e-13);
        }
    }

    #[test]
    fn cholesky_reports_pivot() {
        let a = DenseSymMatrix::from_row_major(2, vec![1.0, 2.0, 2.0, 1.0]).unwrap();
        match Cholesky::factor(&a, 0.0) {
            Err(TicError::NotPositiveDefinite { index, pivot }) => {
                assert_eq!(index, 1);
                assert!((pivot + 3.0).abs() < 1e-12);
            }
            other => panic!("{other:?}"),
        }
        assert!(Cholesky::factor(&a, 3.5).is_ok());
    }

    #[test]
    fn trace_of_inverse_product_identity() {
        let a = spd3();
        let ch = Cholesky::factor(&a, 0.0).unwrap();
        assert!((ch.trace_inv_times(&a) - 3.0).abs() < 1e-13);
    }

    #[test]
    fn blocks_round_trip() {
        let a = spd3();
        let b = a.to_blocks(&[1, 2]).unwrap();
        assert_eq!(b.block_sizes(), vec![1, 2]);
        assert_eq!(b.blocks()[1].get(0, 1), 1.0);
        assert_eq!(b.trace(), a.trace());
        let dense = b.to_dense();
        assert_eq!(dense.get(0, 1), 0.0);
        assert_eq!(dense.get(2, 1), 1.0);
        assert!(a.to_blocks(&[1, 1]).is_err());
    }

    #[test]
    fn psd_check() {
        assert!(spd3().is_psd(0.0));
        let indefinite = DenseSymMatrix::from_diagonal(&[1.0, -1e-3]);
        assert!(!indefinite.is_psd(1e-6));
        let nearly = DenseSymMatrix::from_diagonal(&[1.0, -1e-12]);
        assert!(nearly.is_psd(1e-10));
    }

    #[test]
    fn clamping_only_touches_rounding_noise() {
        let d = DiagVector::new(vec![1.0, -1e-14, -1.0]).clamped();
        assert_eq!(d.values(), &[1.0, 0.0, -1.0]);
    }

    #[test]
    fn symmetrization_on_construction() {
        let m = DenseSymMatrix::from_row_major(2, vec![1.0, 2.0, 4.0, 1.0]).unwrap();
        assert_eq!(m.get(0, 1), 3.0);
        assert_eq!(m.asymmetry(), 0.0);
    }
}
