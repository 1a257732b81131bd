//! Dense and sparse kernels.
//!
//! [`DenseMatrix`] is a row-major `f64` matrix with just the operations the
//! rest of the crate needs. [`SparseGrouping`] stores a k-by-p grouping
//! matrix with exactly one nonzero per column, which makes every product
//! structurally O(p). Feature-dropout masks relax the one-nonzero invariant:
//! a dropped column simply has no entry.
//!
//! The reduction kernels fix their own association order, so results are
//! bit-identical across runs and across the `parallel`/sequential builds.

use crate::error::{Error, Result};

/// Column marker for a dropped feature in a mask matrix.
const DROPPED: u32 = u32::MAX;

/// Dot product with a fixed four-accumulator association order.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        let j = 4 * i;
        acc[0] += a[j] * b[j];
        acc[1] += a[j + 1] * b[j + 1];
        acc[2] += a[j + 2] * b[j + 2];
        acc[3] += a[j + 3] * b[j + 3];
    }
    for j in 4 * chunks..a.len() {
        acc[0] += a[j] * b[j];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3])
}

/// `y += alpha * x`, elementwise.
pub fn axpy(y: &mut [f64], alpha: f64, x: &[f64]) {
    assert_eq!(y.len(), x.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * *xi;
    }
}

/// Dense row-major matrix of 64-bit floats.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        DenseMatrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch(format!(
                "matrix {rows}x{cols} needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::Numerical("non-finite matrix entry".into()));
        }
        Ok(DenseMatrix { rows, cols, data })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = DenseMatrix::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.cols {
            return Err(Error::DimensionMismatch(format!(
                "matvec: {}x{} by vector of length {}",
                self.rows,
                self.cols,
                x.len()
            )));
        }
        Ok((0..self.rows).map(|r| dot(self.row(r), x)).collect())
    }

    /// `self * other`, for the small moment matrices in the analysis module.
    pub fn matmul(&self, other: &DenseMatrix) -> Result<DenseMatrix> {
        if self.cols != other.rows {
            return Err(Error::DimensionMismatch(format!(
                "matmul: {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = DenseMatrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a != 0.0 {
                    let src = other.row(k);
                    let dst = out.row_mut(i);
                    axpy(dst, a, src);
                }
            }
        }
        Ok(out)
    }

    /// Largest absolute entry of `self - other`.
    pub fn max_abs_diff(&self, other: &DenseMatrix) -> f64 {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

impl std::ops::Index<(usize, usize)> for DenseMatrix {
    type Output = f64;
    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        &self.data[r * self.cols + c]
    }
}

impl std::ops::IndexMut<(usize, usize)> for DenseMatrix {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }
}

/// Sparse k-by-p grouping matrix with at most one nonzero per column.
///
/// For a feature partition every column has exactly one nonzero
/// `1/sqrt(cluster size)`, which makes the rows orthonormal. Mask matrices
/// (feature dropout) may drop columns entirely and are flagged as such.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseGrouping {
    k: usize,
    p: usize,
    col_to_row: Vec<u32>,
    col_value: Vec<f64>,
    mask: bool,
}

impl SparseGrouping {
    /// Grouping matrix from per-column row assignments and values.
    pub fn new(k: usize, p: usize, col_to_row: Vec<u32>, col_value: Vec<f64>) -> Result<Self> {
        if col_to_row.len() != p || col_value.len() != p {
            return Err(Error::DimensionMismatch(format!(
                "grouping with p={p} got {} assignments, {} values",
                col_to_row.len(),
                col_value.len()
            )));
        }
        if k > p {
            return Err(Error::InvalidArgument(format!("k={k} exceeds p={p}")));
        }
        for j in 0..p {
            if col_to_row[j] as usize >= k {
                return Err(Error::InvalidArgument(format!(
                    "column {j} assigned to row {} >= k={k}",
                    col_to_row[j]
                )));
            }
            if !(col_value[j] > 0.0) || !col_value[j].is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "column {j} has non-positive value {}",
                    col_value[j]
                )));
            }
        }
        Ok(SparseGrouping {
            k,
            p,
            col_to_row,
            col_value,
            mask: false,
        })
    }

    /// Identity grouping (singleton partition).
    pub fn identity(p: usize) -> Self {
        SparseGrouping {
            k: p,
            p,
            col_to_row: (0..p as u32).collect(),
            col_value: vec![1.0; p],
            mask: false,
        }
    }

    /// Diagonal mask matrix: kept columns carry `value` on the diagonal,
    /// dropped columns have no entry.
    pub fn from_mask(keep: &[bool], value: f64) -> Self {
        let p = keep.len();
        let mut col_to_row = vec![DROPPED; p];
        let mut col_value = vec![0.0; p];
        for j in 0..p {
            if keep[j] {
                col_to_row[j] = j as u32;
                col_value[j] = value;
            }
        }
        SparseGrouping {
            k: p,
            p,
            col_to_row,
            col_value,
            mask: true,
        }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn is_mask(&self) -> bool {
        self.mask
    }

    /// Row index of column `j`, `None` when the column is dropped.
    pub fn row_of(&self, j: usize) -> Option<usize> {
        let r = self.col_to_row[j];
        (r != DROPPED).then_some(r as usize)
    }

    pub fn value_of(&self, j: usize) -> f64 {
        self.col_value[j]
    }

    /// Dense k-by-p realization, for oracles and small-p diagnostics.
    pub fn to_dense(&self) -> DenseMatrix {
        let mut m = DenseMatrix::zeros(self.k, self.p);
        for j in 0..self.p {
            if let Some(r) = self.row_of(j) {
                m[(r, j)] = self.col_value[j];
            }
        }
        m
    }
}

/// `phi * x`: projects a p-vector into the k-dimensional cluster space.
pub fn spgemv(phi: &SparseGrouping, x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != phi.p {
        return Err(Error::DimensionMismatch(format!(
            "spgemv: phi is {}x{}, x has length {}",
            phi.k,
            phi.p,
            x.len()
        )));
    }
    let mut out = vec![0.0; phi.k];
    for j in 0..phi.p {
        let r = phi.col_to_row[j];
        if r != DROPPED {
            out[r as usize] += phi.col_value[j] * x[j];
        }
    }
    Ok(out)
}

/// `phi^T * z`: back-projects a k-vector to feature space.
pub fn spgemv_t(phi: &SparseGrouping, z: &[f64]) -> Result<Vec<f64>> {
    if z.len() != phi.k {
        return Err(Error::DimensionMismatch(format!(
            "spgemv_t: phi is {}x{}, z has length {}",
            phi.k,
            phi.p,
            z.len()
        )));
    }
    let mut out = vec![0.0; phi.p];
    for j in 0..phi.p {
        let r = phi.col_to_row[j];
        if r != DROPPED {
            out[j] = phi.col_value[j] * z[r as usize];
        }
    }
    Ok(out)
}

/// `phi^T * phi * x`: the piecewise-constant approximation of `x`, each
/// feature replaced by its cluster mean.
pub fn reconstruct(phi: &SparseGrouping, x: &[f64]) -> Result<Vec<f64>> {
    let z = spgemv(phi, x)?;
    spgemv_t(phi, &z)
}
