//! Sparse linear algebra: CSR operators, Jacobi-preconditioned BiCGStab, and
//! a dense partial-pivoting solver used as a test oracle.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolverError {
    #[error("no convergence after {iterations} iterations (relative residual {residual:.3e})")]
    NotConverged { iterations: usize, residual: f64 },
    #[error("breakdown at iteration {iteration}: {what}")]
    Breakdown { iteration: usize, what: &'static str },
    #[error("dimension mismatch: operator is {expected}, vector has {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("matrix is singular")]
    Singular,
    #[error("dense oracle limited to {limit} unknowns, got {n}")]
    TooLarge { n: usize, limit: usize },
    #[error("zero diagonal in row {0}")]
    ZeroDiagonal(usize),
}

/// Square matrix in compressed sparse row form.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseOperator {
    n: usize,
    row_ptr: Vec<usize>,
    cols: Vec<u32>,
    vals: Vec<f64>,
}

/// Row-by-row CSR construction without per-row allocations.
#[derive(Clone, Debug, Default)]
pub struct CsrBuilder {
    row_ptr: Vec<usize>,
    cols: Vec<u32>,
    vals: Vec<f64>,
    scratch: Vec<(usize, f64)>,
}

impl CsrBuilder {
    pub fn with_capacity(rows: usize, nnz: usize) -> Self {
        let mut row_ptr = Vec::with_capacity(rows + 1);
        row_ptr.push(0);
        CsrBuilder {
            row_ptr,
            cols: Vec::with_capacity(nnz),
            vals: Vec::with_capacity(nnz),
            scratch: Vec::new(),
        }
    }

    /// Adds an entry to the current row; duplicates are summed.
    pub fn push(&mut self, col: usize, val: f64) {
        self.scratch.push((col, val));
    }

    pub fn finish_row(&mut self) {
        self.scratch.sort_unstable_by_key(|&(c, _)| c);
        let start = self.cols.len();
        for &(c, v) in &self.scratch {
            if self.cols.len() > start && *self.cols.last().unwrap() as usize == c {
                *self.vals.last_mut().unwrap() += v;
            } else {
                self.cols.push(u32::try_from(c).expect("column index exceeds u32"));
                self.vals.push(v);
            }
        }
        self.scratch.clear();
        self.row_ptr.push(self.cols.len());
    }

    pub fn build(self) -> SparseOperator {
        let n = self.row_ptr.len() - 1;
        assert!(self.cols.iter().all(|&c| (c as usize) < n), "column out of range");
        SparseOperator {
            n,
            row_ptr: self.row_ptr,
            cols: self.cols,
            vals: self.vals,
        }
    }
}

impl SparseOperator {
    /// Builds from `(row, col, value)` entries; duplicates are summed.
    pub fn from_triplets(n: usize, mut entries: Vec<(usize, usize, f64)>) -> Self {
        entries.sort_unstable_by_key(|&(r, c, _)| (r, c));
        let mut row_ptr = vec![0usize; n + 1];
        let mut cols = Vec::with_capacity(entries.len());
        let mut vals: Vec<f64> = Vec::with_capacity(entries.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in entries {
            assert!(r < n && c < n, "entry ({r}, {c}) out of range for n = {n}");
            if last == Some((r, c)) {
                *vals.last_mut().unwrap() += v;
                continue;
            }
            cols.push(c as u32);
            vals.push(v);
            row_ptr[r + 1] += 1;
            last = Some((r, c));
        }
        for i in 0..n {
            row_ptr[i + 1] += row_ptr[i];
        }
        SparseOperator { n, row_ptr, cols, vals }
    }

    /// Builds from unsorted rows; duplicates within a row are summed.
    pub fn from_rows(rows: Vec<Vec<(usize, f64)>>) -> Self {
        let nnz = rows.iter().map(Vec::len).sum();
        let mut b = CsrBuilder::with_capacity(rows.len(), nnz);
        for row in rows {
            for (c, v) in row {
                b.push(c, v);
            }
            b.finish_row();
        }
        b.build()
    }

    pub fn identity(n: usize) -> Self {
        SparseOperator {
            n,
            row_ptr: (0..=n).collect(),
            cols: (0..n as u32).collect(),
            vals: vec![1.0; n],
        }
    }

    pub fn from_dense(a: &DenseMatrix) -> Self {
        let rows = (0..a.n)
            .map(|i| (0..a.n).filter(|&j| a[(i, j)] != 0.0).map(|j| (j, a[(i, j)])).collect())
            .collect();
        SparseOperator::from_rows(rows)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let range = self.row_ptr[i]..self.row_ptr[i + 1];
        self.cols[range.clone()]
            .iter()
            .map(|&c| c as usize)
            .zip(self.vals[range].iter().copied())
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.row(i).find(|&(c, _)| c == j).map_or(0.0, |(_, v)| v)
    }

    /// `y = A x`.
    pub fn matvec(&self, x: &[f64], y: &mut [f64]) {
        debug_assert_eq!(x.len(), self.n);
        debug_assert_eq!(y.len(), self.n);
        for (i, yi) in y.iter_mut().enumerate() {
            let (lo, hi) = (self.row_ptr[i], self.row_ptr[i + 1]);
            let mut acc = 0.0;
            for k in lo..hi {
                acc += self.vals[k] * x[self.cols[k] as usize];
            }
            *yi = acc;
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n];
        self.matvec(x, &mut y);
        y
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.get(i, i)).collect()
    }

    pub fn to_dense(&self) -> DenseMatrix {
        let mut d = DenseMatrix::zeros(self.n);
        for i in 0..self.n {
            for (j, v) in self.row(i) {
                d[(i, j)] += v;
            }
        }
        d
    }

    /// Rows that break the M-matrix sign pattern: positive diagonal,
    /// nonpositive off-diagonals, off-diagonal mass bounded by the diagonal.
    pub fn m_matrix_violations(&self) -> Vec<usize> {
        (0..self.n)
            .filter(|&i| {
                let mut diag = 0.0;
                let mut off = 0.0;
                let mut bad = false;
                for (j, v) in self.row(i) {
                    if j == i {
                        diag += v;
                    } else {
                        bad |= v > 0.0;
                        off += v.abs();
                    }
                }
                bad || diag <= 0.0 || off > diag * (1.0 + 1e-12)
            })
            .collect()
    }

    /// `A - σ diag(d)`; every row must already hold its diagonal entry.
    pub fn minus_diagonal(&self, sigma: f64, d: &[f64]) -> SparseOperator {
        let mut out = self.clone();
        for (i, di) in d.iter().enumerate() {
            let lo = self.row_ptr[i];
            let hi = self.row_ptr[i + 1];
            let k = (lo..hi)
                .find(|&k| self.cols[k] as usize == i)
                .expect("missing diagonal entry");
            out.vals[k] -= sigma * di;
        }
        out
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        (0..self.n).all(|i| {
            self.row(i)
                .all(|(j, v)| (self.get(j, i) - v).abs() <= tol * v.abs().max(1.0))
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SolveOptions {
    /// Relative residual target `||Ax - b|| <= tol ||b||`.
    pub tol: f64,
    /// Iteration cap; defaults to `50 sqrt(n)`.
    pub max_iter: Option<usize>,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions {
            tol: DEFAULT_TOL,
            max_iter: None,
        }
    }
}

pub const DEFAULT_TOL: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq)]
pub struct Solution {
    pub x: Vec<f64>,
    pub iterations: usize,
    /// Final true relative residual.
    pub residual: f64,
    pub converged: bool,
}

pub fn iteration_cap(n: usize) -> usize {
    ((50.0 * (n as f64).sqrt()).ceil() as usize).max(50)
}

/// Solves `A x = b` to the default relative residual `1e-10`.
pub fn solve(a: &SparseOperator, b: &[f64]) -> Result<Vec<f64>, SolverError> {
    solve_with(a, b, None, SolveOptions::default()).map(|s| s.x)
}

/// Solves `A x = b` with an optional initial iterate. The returned solution
/// always satisfies the residual bound; anything else is an error.
pub fn solve_with(
    a: &SparseOperator,
    b: &[f64],
    x0: Option<&[f64]>,
    opts: SolveOptions,
) -> Result<Solution, SolverError> {
    let sol = bicgstab(a, b, x0, opts)?;
    if sol.converged {
        Ok(sol)
    } else {
        Err(SolverError::NotConverged {
            iterations: sol.iterations,
            residual: sol.residual,
        })
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn true_residual(a: &SparseOperator, b: &[f64], x: &[f64], r: &mut [f64]) -> f64 {
    a.matvec(x, r);
    for (ri, bi) in r.iter_mut().zip(b) {
        *ri = bi - *ri;
    }
    norm(r)
}

/// Jacobi-preconditioned BiCGStab. Returns the last iterate with
/// `converged = false` when the cap is hit; breakdowns restart from the
/// current residual a few times before being reported.
pub fn bicgstab(
    a: &SparseOperator,
    b: &[f64],
    x0: Option<&[f64]>,
    opts: SolveOptions,
) -> Result<Solution, SolverError> {
    let n = a.n();
    if b.len() != n {
        return Err(SolverError::DimensionMismatch {
            expected: n,
            found: b.len(),
        });
    }
    if let Some(x0) = x0 {
        if x0.len() != n {
            return Err(SolverError::DimensionMismatch {
                expected: n,
                found: x0.len(),
            });
        }
    }
    let inv_diag: Vec<f64> = a
        .diagonal()
        .iter()
        .enumerate()
        .map(|(i, &d)| {
            if d != 0.0 {
                Ok(1.0 / d)
            } else {
                Err(SolverError::ZeroDiagonal(i))
            }
        })
        .collect::<Result<_, _>>()?;

    let bnorm = norm(b);
    if bnorm == 0.0 {
        return Ok(Solution {
            x: vec![0.0; n],
            iterations: 0,
            residual: 0.0,
            converged: true,
        });
    }
    let target = opts.tol * bnorm;
    let cap = opts.max_iter.unwrap_or_else(|| iteration_cap(n));

    let mut x = x0.map_or_else(|| vec![0.0; n], <[f64]>::to_vec);
    let mut r = vec![0.0; n];
    let mut rnorm = true_residual(a, b, &x, &mut r);
    let mut r_hat = r.clone();
    let mut p = vec![0.0; n];
    let mut v = vec![0.0; n];
    let mut p_hat = vec![0.0; n];
    let mut s_hat = vec![0.0; n];
    let mut t = vec![0.0; n];
    let (mut rho, mut alpha, mut omega) = (1.0, 1.0, 1.0);
    let mut restarts = 0;
    let mut it = 0;

    while it < cap {
        if rnorm <= target {
            // Guard against drift of the recursive residual.
            rnorm = true_residual(a, b, &x, &mut r);
            if rnorm <= target {
                return Ok(Solution {
                    x,
                    iterations: it,
                    residual: rnorm / bnorm,
                    converged: true,
                });
            }
            r_hat.copy_from_slice(&r);
            p.fill(0.0);
            v.fill(0.0);
            (rho, alpha, omega) = (1.0, 1.0, 1.0);
        }
        it += 1;
        let rho_new = dot(&r_hat, &r);
        if rho_new.abs() < 1e-300 || rho_new.abs() < 1e-30 * norm(&r_hat) * rnorm {
            if restarts >= 5 {
                return Err(SolverError::Breakdown {
                    iteration: it,
                    what: "rho vanished",
                });
            }
            restarts += 1;
            rnorm = true_residual(a, b, &x, &mut r);
            r_hat.copy_from_slice(&r);
            p.fill(0.0);
            v.fill(0.0);
            (rho, alpha, omega) = (1.0, 1.0, 1.0);
            continue;
        }
        let beta = (rho_new / rho) * (alpha / omega);
        rho = rho_new;
        for i in 0..n {
            p[i] = r[i] + beta * (p[i] - omega * v[i]);
            p_hat[i] = p[i] * inv_diag[i];
        }
        a.matvec(&p_hat, &mut v);
        let rv = dot(&r_hat, &v);
        if rv == 0.0 || !rv.is_finite() {
            return Err(SolverError::Breakdown {
                iteration: it,
                what: "r_hat . v vanished",
            });
        }
        alpha = rho / rv;
        // r becomes s in place.
        for i in 0..n {
            r[i] -= alpha * v[i];
        }
        let snorm = norm(&r);
        if snorm <= target {
            for i in 0..n {
                x[i] += alpha * p_hat[i];
            }
            rnorm = snorm;
            continue;
        }
        for i in 0..n {
            s_hat[i] = r[i] * inv_diag[i];
        }
        a.matvec(&s_hat, &mut t);
        let tt = dot(&t, &t);
        omega = if tt > 0.0 { dot(&t, &r) / tt } else { 0.0 };
        for i in 0..n {
            x[i] += alpha * p_hat[i] + omega * s_hat[i];
            r[i] -= omega * t[i];
        }
        rnorm = norm(&r);
        if !rnorm.is_finite() {
            return Err(SolverError::Breakdown {
                iteration: it,
                what: "non-finite residual",
            });
        }
        if omega == 0.0 {
            if restarts >= 5 {
                return Err(SolverError::Breakdown {
                    iteration: it,
                    what: "omega vanished",
                });
            }
            restarts += 1;
            r_hat.copy_from_slice(&r);
            p.fill(0.0);
            v.fill(0.0);
            (rho, alpha, omega) = (1.0, 1.0, 1.0);
        }
    }
    let rnorm = true_residual(a, b, &x, &mut r);
    Ok(Solution {
        x,
        iterations: it,
        residual: rnorm / bnorm,
        converged: rnorm <= target,
    })
}

/// Row-major square matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseMatrix {
    pub n: usize,
    pub data: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(n: usize) -> Self {
        DenseMatrix {
            n,
            data: vec![0.0; n * n],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = DenseMatrix::zeros(n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let n = rows.len();
        let mut m = DenseMatrix::zeros(n);
        for (i, row) in rows.iter().enumerate() {
            assert_eq!(row.len(), n, "row {i} has wrong length");
            m.data[i * n..(i + 1) * n].copy_from_slice(row);
        }
        m
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        (0..self.n)
            .map(|i| dot(&self.data[i * self.n..(i + 1) * self.n], x))
            .collect()
    }
}

impl std::ops::Index<(usize, usize)> for DenseMatrix {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.n + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for DenseMatrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.n + j]
    }
}

pub const DENSE_LIMIT: usize = 2000;

/// Gaussian elimination with partial pivoting.
pub fn solve_dense(a: &DenseMatrix, b: &[f64]) -> Result<Vec<f64>, SolverError> {
    let n = a.n;
    if n > DENSE_LIMIT {
        return Err(SolverError::TooLarge { n, limit: DENSE_LIMIT });
    }
    if b.len() != n {
        return Err(SolverError::DimensionMismatch {
            expected: n,
            found: b.len(),
        });
    }
    let mut m = a.data.clone();
    let mut x = b.to_vec();
    let scale = m.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    if scale == 0.0 {
        return Err(SolverError::Singular);
    }
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| m[i * n + col].abs().total_cmp(&m[j * n + col].abs()))
            .unwrap();
        let pv = m[pivot * n + col];
        if pv.abs() <= scale * f64::EPSILON * n as f64 * 1e-3 {
            return Err(SolverError::Singular);
        }
        if pivot != col {
            for k in 0..n {
                m.swap(col * n + k, pivot * n + k);
            }
            x.swap(col, pivot);
        }
        for row in col + 1..n {
            let factor = m[row * n + col] / pv;
            if factor == 0.0 {
                continue;
            }
            for k in col..n {
                m[row * n + k] -= factor * m[col * n + k];
            }
            x[row] -= factor * x[col];
        }
    }
    for row in (0..n).rev() {
        let mut acc = x[row];
        for k in row + 1..n {
            acc -= m[row * n + k] * x[k];
        }
        x[row] = acc / m[row * n + row];
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn max_diff(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn identity_solve() {
        let b = vec![1.0, -2.0, 3.5, 0.25];
        let x = solve(&SparseOperator::identity(4), &b).unwrap();
        assert!(max_diff(&x, &b) < 1e-14);
        assert_eq!(solve_dense(&DenseMatrix::identity(4), &b).unwrap(), b);
    }

    #[test]
    fn two_by_two() {
        let a = SparseOperator::from_triplets(2, vec![(0, 0, 2.0), (0, 1, 1.0), (1, 0, 1.0), (1, 1, 3.0)]);
        let x = solve(&a, &[3.0, 4.0]).unwrap();
        assert!(max_diff(&x, &[1.0, 1.0]) < 1e-10);
    }

    #[test]
    fn duplicates_are_merged() {
        let a = SparseOperator::from_triplets(2, vec![(0, 0, 1.0), (0, 0, 1.0), (1, 1, 1.0), (0, 1, 0.5)]);
        assert_eq!(a.nnz(), 3);
        assert_eq!(a.get(0, 0), 2.0);
    }

    #[test]
    fn dense_small_cases() {
        let a = DenseMatrix::from_rows(&[vec![5.0]]);
        assert_eq!(solve_dense(&a, &[10.0]).unwrap(), vec![2.0]);
        let mut h = DenseMatrix::zeros(4);
        for i in 0..4 {
            for j in 0..4 {
                h[(i, j)] = 1.0 / (i + j + 1) as f64;
            }
        }
        let b: Vec<f64> = (0..4).map(|i| (0..4).map(|j| h[(i, j)]).sum()).collect();
        let x = solve_dense(&h, &b).unwrap();
        assert!(max_diff(&x, &[1.0; 4]) < 1e-8);
        let singular = DenseMatrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 4.0]]);
        assert_eq!(solve_dense(&singular, &[1.0, 2.0]), Err(SolverError::Singular));
    }

    #[test]
    fn random_diagonally_dominant_matches_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let n = 30;
        let mut d = DenseMatrix::zeros(n);
        for i in 0..n {
            let mut off = 0.0;
            for j in 0..n {
                if i != j && rng.random::<f64>() < 0.3 {
                    let v = rng.random_range(-1.0..1.0);
                    d[(i, j)] = v;
                    off += f64::abs(v);
                }
            }
            d[(i, i)] = off + rng.random_range(0.5..2.0);
        }
        let b: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x = solve(&SparseOperator::from_dense(&d), &b).unwrap();
        let oracle = solve_dense(&d, &b).unwrap();
        assert!(max_diff(&x, &oracle) < 1e-8);
    }

    #[test]
    fn cap_reports_non_convergence() {
        let n = 100;
        let mut t = Vec::new();
        for i in 0..n {
            t.push((i, i, 2.0));
            if i > 0 {
                t.push((i, i - 1, -1.0));
            }
            if i + 1 < n {
                t.push((i, i + 1, -1.0));
            }
        }
        let a = SparseOperator::from_triplets(n, t);
        let opts = SolveOptions {
            tol: 1e-12,
            max_iter: Some(2),
        };
        assert!(matches!(
            solve_with(&a, &vec![1.0; n], None, opts),
            Err(SolverError::NotConverged { .. })
        ));
        let sol = solve_with(&a, &vec![1.0; n], None, SolveOptions::default()).unwrap();
        assert!(sol.residual <= 1e-10);
    }

    #[test]
    fn zero_rhs_and_bad_dimensions() {
        let a = SparseOperator::identity(3);
        assert_eq!(solve(&a, &[0.0; 3]).unwrap(), vec![0.0; 3]);
        assert!(matches!(
            solve(&a, &[1.0; 2]),
            Err(SolverError::DimensionMismatch { .. })
        ));
        assert!(matches!(
            solve_dense(&DenseMatrix::zeros(DENSE_LIMIT + 1), &vec![0.0; DENSE_LIMIT + 1]),
            Err(SolverError::TooLarge { .. })
        ));
    }

    #[test]
    fn m_matrix_check() {
        let a = SparseOperator::from_triplets(2, vec![(0, 0, 2.0), (0, 1, -1.0), (1, 0, 1.0), (1, 1, 1.0)]);
        assert_eq!(a.m_matrix_violations(), vec![1]);
    }
}
