//! Compressed-row sparse matrices sharing one pattern, and SPD solvers.

use std::io::Write;

use nalgebra::DMatrix;
use nalgebra_sparse::factorization::CscCholesky;
use nalgebra_sparse::CscMatrix;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Square CSR matrix with sorted column indices.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    n: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl SparseMatrix {
    /// Zero matrix on the pattern spanned by `entries` (both `(i,j)` and
    /// `(j,i)` are inserted, plus the diagonal).
    pub fn symmetric_pattern(n: usize, entries: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let mut rows: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
        for (i, j) in entries {
            rows[i].push(j);
            rows[j].push(i);
        }
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut col_idx = Vec::new();
        row_ptr.push(0);
        for mut r in rows {
            r.sort_unstable();
            r.dedup();
            col_idx.extend(r);
            row_ptr.push(col_idx.len());
        }
        let nnz = col_idx.len();
        Self { n, row_ptr, col_idx, values: vec![0.0; nnz] }
    }

    /// Builds a matrix from dense storage, keeping exact zeros out of the pattern
    /// except on the diagonal.
    pub fn from_dense(d: &DMatrix<f64>) -> Self {
        assert_eq!(d.nrows(), d.ncols());
        let n = d.nrows();
        let mut row_ptr = vec![0];
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        for i in 0..n {
            for j in 0..n {
                if d[(i, j)] != 0.0 || i == j {
                    col_idx.push(j);
                    values.push(d[(i, j)]);
                }
            }
            row_ptr.push(col_idx.len());
        }
        Self { n, row_ptr, col_idx, values }
    }

    pub fn zeros_like(&self) -> Self {
        Self { values: vec![0.0; self.values.len()], ..self.clone() }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    fn slot(&self, i: usize, j: usize) -> Option<usize> {
        let row = &self.col_idx[self.row_ptr[i]..self.row_ptr[i + 1]];
        row.binary_search(&j).ok().map(|k| self.row_ptr[i] + k)
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.slot(i, j).map_or(0.0, |k| self.values[k])
    }

    /// Adds `v` at `(i, j)`. Panics if the entry is outside the pattern.
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        let k = self
            .slot(i, j)
            .unwrap_or_else(|| panic!("entry ({i}, {j}) outside sparsity pattern"));
        self.values[k] += v;
    }

    /// Copies every upper-triangle value onto its mirror so that the matrix
    /// equals its transpose bit for bit.
    pub fn mirror_upper(&mut self) {
        for i in 0..self.n {
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                let j = self.col_idx[k];
                if j < i {
                    self.values[k] = self.get(j, i);
                }
            }
        }
    }

    pub fn is_exactly_symmetric(&self) -> bool {
        (0..self.n).all(|i| {
            (self.row_ptr[i]..self.row_ptr[i + 1])
                .all(|k| self.values[k].to_bits() == self.get(self.col_idx[k], i).to_bits())
        })
    }

    /// `alpha * self + beta * other`; both must share a pattern.
    pub fn combine(&self, alpha: f64, other: &SparseMatrix, beta: f64) -> SparseMatrix {
        assert!(self.same_pattern(other), "pattern mismatch");
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| alpha * a + beta * b)
            .collect();
        SparseMatrix { values, ..self.clone() }
    }

    pub fn same_pattern(&self, other: &SparseMatrix) -> bool {
        self.n == other.n && self.row_ptr == other.row_ptr && self.col_idx == other.col_idx
    }

    pub fn matvec<S: Scalar>(&self, x: &[S]) -> Vec<S> {
        let mut y = vec![S::zero(); self.n];
        self.matvec_into(x, &mut y);
        y
    }

    pub fn matvec_into<S: Scalar>(&self, x: &[S], y: &mut [S]) {
        assert_eq!(x.len(), self.n);
        assert_eq!(y.len(), self.n);
        for (i, yi) in y.iter_mut().enumerate() {
            let mut acc = S::zero();
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                acc += x[self.col_idx[k]].scale(self.values[k]);
            }
            *yi = acc;
        }
    }

    /// `x^T A conj(y)`.
    pub fn bilinear<S: Scalar>(&self, x: &[S], y: &[S]) -> S {
        let ay = self.matvec(y);
        x.iter().zip(&ay).fold(S::zero(), |acc, (&a, &b)| acc + a * b.conj())
    }

    /// `x^T A x` for real vectors.
    pub fn quad_form(&self, x: &[f64]) -> f64 {
        self.bilinear(x, x)
    }

    /// Row sums `A 1`.
    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.n)
            .map(|i| self.values[self.row_ptr[i]..self.row_ptr[i + 1]].iter().sum())
            .collect()
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.get(i, i)).collect()
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut d = DMatrix::zeros(self.n, self.n);
        for (i, j, v) in self.triplets() {
            d[(i, j)] = v;
        }
        d
    }

    pub fn triplets(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.n).flat_map(move |i| {
            (self.row_ptr[i]..self.row_ptr[i + 1]).map(move |k| (i, self.col_idx[k], self.values[k]))
        })
    }

    /// Writes `row col value` lines (coordinate format, zero-based).
    pub fn write_coo<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for (i, j, v) in self.triplets() {
            writeln!(w, "{i} {j} {v:e}")?;
        }
        Ok(())
    }

    fn to_csc_symmetric(&self) -> CscMatrix<f64> {
        // For a symmetric pattern the CSR arrays are the CSC arrays of the transpose;
        // the factorization only reads the lower triangle of each column.
        CscMatrix::try_from_csc_data(
            self.n,
            self.n,
            self.row_ptr.clone(),
            self.col_idx.clone(),
            self.values.clone(),
        )
        .expect("valid CSR arrays")
    }
}

/// Problems above this size use preconditioned conjugate gradients.
pub const DIRECT_SOLVER_LIMIT: usize = 100_000;
/// Relative residual target of the CG fallback.
pub const CG_TOLERANCE: f64 = 1e-12;

/// Solver for a symmetric positive-definite system.
pub enum SpdSolver {
    Direct(CscCholesky<f64>),
    Cg { matrix: SparseMatrix, inv_diag: Vec<f64> },
}

impl std::fmt::Debug for SpdSolver {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SpdSolver::Direct(_) => f.write_str("SpdSolver::Direct"),
            SpdSolver::Cg { matrix, .. } => write!(f, "SpdSolver::Cg(n = {})", matrix.dim()),
        }
    }
}

impl SpdSolver {
    pub fn new(matrix: &SparseMatrix) -> Result<Self> {
        if matrix.dim() > DIRECT_SOLVER_LIMIT {
            Self::conjugate_gradient(matrix)
        } else {
            Self::direct(matrix)
        }
    }

    pub fn direct(matrix: &SparseMatrix) -> Result<Self> {
        CscCholesky::factor(&matrix.to_csc_symmetric())
            .map(SpdSolver::Direct)
            .map_err(|e| Error::Solver(format!("Cholesky factorization failed: {e:?}")))
    }

    pub fn conjugate_gradient(matrix: &SparseMatrix) -> Result<Self> {
        let diag = matrix.diagonal();
        if diag.iter().any(|&d| !(d > 0.0)) {
            return Err(Error::Solver("non-positive diagonal in SPD matrix".into()));
        }
        Ok(SpdSolver::Cg { matrix: matrix.clone(), inv_diag: diag.iter().map(|d| 1.0 / d).collect() })
    }

    pub fn solve_real(&self, rhs: &[f64]) -> Result<Vec<f64>> {
        match self {
            SpdSolver::Direct(chol) => {
                let b = DMatrix::from_column_slice(rhs.len(), 1, rhs);
                let x = chol.solve(&b);
                Ok(x.as_slice().to_vec())
            }
            SpdSolver::Cg { matrix, inv_diag } => pcg(matrix, inv_diag, rhs),
        }
    }

    /// Solves with a real matrix and a (possibly complex) right-hand side.
    pub fn solve<S: Scalar>(&self, rhs: &[S]) -> Result<Vec<S>> {
        let re: Vec<f64> = rhs.iter().map(|v| v.re()).collect();
        let x_re = self.solve_real(&re)?;
        if !S::IS_COMPLEX {
            return Ok(x_re.into_iter().map(S::from_real).collect());
        }
        let im: Vec<f64> = rhs.iter().map(|v| v.im()).collect();
        let x_im = self.solve_real(&im)?;
        Ok(x_re.into_iter().zip(x_im).map(|(a, b)| S::from_parts(a, b)).collect())
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn pcg(a: &SparseMatrix, inv_diag: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    let n = b.len();
    let bnorm = dot(b, b).sqrt();
    let mut x = vec![0.0; n];
    if bnorm == 0.0 {
        return Ok(x);
    }
    let mut r = b.to_vec();
    let mut z: Vec<f64> = r.iter().zip(inv_diag).map(|(r, d)| r * d).collect();
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut ap = vec![0.0; n];
    for _ in 0..(10 * n).max(100) {
        a.matvec_into(&p, &mut ap);
        let pap = dot(&p, &ap);
        if !(pap > 0.0) {
            return Err(Error::Solver("CG breakdown: matrix not positive definite".into()));
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        if dot(&r, &r).sqrt() <= CG_TOLERANCE * bnorm {
            return Ok(x);
        }
        for i in 0..n {
            z[i] = r[i] * inv_diag[i];
        }
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    Err(Error::Solver(format!(
        "CG did not reach relative residual {CG_TOLERANCE:e}; final {:e}",
        dot(&r, &r).sqrt() / bnorm
    )))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn laplacian_1d(n: usize) -> SparseMatrix {
        let mut a = SparseMatrix::symmetric_pattern(n, (0..n - 1).map(|i| (i, i + 1)));
        for i in 0..n {
            a.add(i, i, 2.0 + 0.1);
            if i + 1 < n {
                a.add(i, i + 1, -1.0);
            }
        }
        a.mirror_upper();
        a
    }

    #[test]
    fn mirror_gives_exact_symmetry() {
        let a = laplacian_1d(6);
        assert!(a.is_exactly_symmetric());
        assert_eq!(a.get(3, 2), -1.0);
        assert_eq!(a.to_dense(), a.to_dense().transpose());
    }

    #[test]
    fn direct_and_cg_agree() {
        let a = laplacian_1d(40);
        let b: Vec<f64> = (0..40).map(|i| (i as f64 * 0.37).sin()).collect();
        let x1 = SpdSolver::direct(&a).unwrap().solve_real(&b).unwrap();
        let x2 = SpdSolver::conjugate_gradient(&a).unwrap().solve_real(&b).unwrap();
        let r = a.matvec(&x1);
        for i in 0..40 {
            assert!((r[i] - b[i]).abs() < 1e-12);
            assert!((x1[i] - x2[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn complex_rhs_splits() {
        use num_complex::Complex64;
        let a = laplacian_1d(5);
        let s = SpdSolver::new(&a).unwrap();
        let b: Vec<Complex64> = (0..5).map(|i| Complex64::new(i as f64, 1.0 - i as f64)).collect();
        let x = s.solve(&b).unwrap();
        let r = a.matvec(&x);
        for i in 0..5 {
            assert!((r[i] - b[i]).norm() < 1e-12);
        }
    }

    #[test]
    fn indefinite_matrix_fails_to_factor() {
        let mut a = laplacian_1d(4);
        a.add(2, 2, -10.0);
        assert!(SpdSolver::direct(&a).is_err());
    }

    #[test]
    fn coo_dump() {
        let a = laplacian_1d(3);
        let mut buf = Vec::new();
        a.write_coo(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), a.nnz());
        assert!(text.starts_with("0 0 "));
    }
}
