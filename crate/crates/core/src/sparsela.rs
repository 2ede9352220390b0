//! Compressed-row matrices, SPD solves and equality-constrained quadratic
//! minimization.
//!
//! SPD systems are factored with an envelope (profile) Cholesky. On the
//! row-major structured meshes used here the envelope of a stiffness matrix
//! is one grid row wide, so the factorization is cheap and, unlike an
//! iterative method, insensitive to the contrast of the weights. Jacobi
//! preconditioned CG is kept as the fallback when a factorization breaks down.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SparseError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("matrix is not symmetric: |a({row},{col}) - a({col},{row})| = {defect:e}")]
    Asymmetric { row: usize, col: usize, defect: f64 },
    #[error("matrix is not positive definite: pivot {pivot:e} at row {row}")]
    NotPositiveDefinite { row: usize, pivot: f64 },
    #[error("no convergence after {iterations} iterations, relative residual {residual:e}")]
    NonConvergence { iterations: usize, residual: f64 },
    #[error("constraint matrix is rank deficient (singular reduced system)")]
    RankDeficient,
}

pub const DEFAULT_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    nrows: usize,
    ncols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    /// Builds a matrix from `(row, col, value)` triplets; duplicates are summed.
    pub fn from_triplets(nrows: usize, ncols: usize, triplets: &[(usize, usize, f64)]) -> Self {
        let mut sorted: Vec<(usize, usize, f64)> = triplets.to_vec();
        sorted.sort_by_key(|a| (a.0, a.1));
        let mut indptr = vec![0usize; nrows + 1];
        let mut indices = Vec::with_capacity(sorted.len());
        let mut values: Vec<f64> = Vec::with_capacity(sorted.len());
        let mut last: Option<(usize, usize)> = None;
        for (i, j, v) in sorted {
            assert!(i < nrows && j < ncols, "triplet ({i},{j}) outside {nrows}×{ncols}");
            if last == Some((i, j)) {
                *values.last_mut().unwrap() += v;
            } else {
                indices.push(j);
                values.push(v);
                indptr[i + 1] += 1;
                last = Some((i, j));
            }
        }
        for i in 0..nrows {
            indptr[i + 1] += indptr[i];
        }
        Self {
            nrows,
            ncols,
            indptr,
            indices,
            values,
        }
    }

    /// Builds a matrix from raw CSR arrays. Column indices must be sorted and
    /// unique within each row.
    pub fn from_raw(nrows: usize, ncols: usize, indptr: Vec<usize>, indices: Vec<usize>, values: Vec<f64>) -> Self {
        assert_eq!(indptr.len(), nrows + 1);
        assert_eq!(indices.len(), values.len());
        assert_eq!(*indptr.last().unwrap(), indices.len());
        debug_assert!((0..nrows).all(|i| indices[indptr[i]..indptr[i + 1]].windows(2).all(|w| w[0] < w[1])));
        Self {
            nrows,
            ncols,
            indptr,
            indices,
            values,
        }
    }

    pub fn identity(n: usize) -> Self {
        Self {
            nrows: n,
            ncols: n,
            indptr: (0..=n).collect(),
            indices: (0..n).collect(),
            values: vec![1.0; n],
        }
    }

    pub fn from_dense(a: &DMatrix<f64>) -> Self {
        let mut t = Vec::new();
        for i in 0..a.nrows() {
            for j in 0..a.ncols() {
                if a[(i, j)] != 0.0 {
                    t.push((i, j, a[(i, j)]));
                }
            }
        }
        Self::from_triplets(a.nrows(), a.ncols(), &t)
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn indptr(&self) -> &[usize] {
        &self.indptr
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// Column indices and values of row `i`.
    pub fn row(&self, i: usize) -> (&[usize], &[f64]) {
        let r = self.indptr[i]..self.indptr[i + 1];
        (&self.indices[r.clone()], &self.values[r])
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (cols, vals) = self.row(i);
        match cols.binary_search(&j) {
            Ok(k) => vals[k],
            Err(_) => 0.0,
        }
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.nrows.min(self.ncols)).map(|i| self.get(i, i)).collect()
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.nrows];
        self.matvec_into(x, &mut y);
        y
    }

    pub fn matvec_into(&self, x: &[f64], y: &mut [f64]) {
        assert_eq!(x.len(), self.ncols);
        assert_eq!(y.len(), self.nrows);
        for (i, yi) in y.iter_mut().enumerate() {
            let (cols, vals) = self.row(i);
            *yi = cols.iter().zip(vals).map(|(&j, &v)| v * x[j]).sum();
        }
    }

    /// `xᵀ A x`.
    /// Maximum absolute row sum.
    pub fn norm_inf(&self) -> f64 {
        (0..self.nrows())
            .map(|i| self.row(i).1.iter().map(|v| v.abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }

    pub fn quad_form(&self, x: &[f64]) -> f64 {
        dot(x, &self.matvec(x))
    }

    pub fn transpose(&self) -> Self {
        let mut counts = vec![0usize; self.ncols + 1];
        for &j in &self.indices {
            counts[j + 1] += 1;
        }
        for j in 0..self.ncols {
            counts[j + 1] += counts[j];
        }
        let indptr = counts.clone();
        let mut next = counts;
        let mut indices = vec![0; self.nnz()];
        let mut values = vec![0.0; self.nnz()];
        for i in 0..self.nrows {
            let (cols, vals) = self.row(i);
            for (&j, &v) in cols.iter().zip(vals) {
                indices[next[j]] = i;
                values[next[j]] = v;
                next[j] += 1;
            }
        }
        Self {
            nrows: self.ncols,
            ncols: self.nrows,
            indptr,
            indices,
            values,
        }
    }

    /// The submatrix picked out by `rows` and `cols`, both given as sorted or
    /// unsorted index lists into `self`.
    pub fn submatrix(&self, rows: &[usize], cols: &[usize]) -> Self {
        let mut col_map = vec![usize::MAX; self.ncols];
        for (k, &j) in cols.iter().enumerate() {
            col_map[j] = k;
        }
        let mut indptr = Vec::with_capacity(rows.len() + 1);
        indptr.push(0);
        let mut entries: Vec<(usize, f64)> = Vec::new();
        let mut indices = Vec::new();
        let mut values = Vec::new();
        for &i in rows {
            entries.clear();
            let (c, v) = self.row(i);
            for (&j, &x) in c.iter().zip(v) {
                let k = col_map[j];
                if k != usize::MAX {
                    entries.push((k, x));
                }
            }
            entries.sort_unstable_by_key(|e| e.0);
            for &(k, x) in &entries {
                indices.push(k);
                values.push(x);
            }
            indptr.push(indices.len());
        }
        Self {
            nrows: rows.len(),
            ncols: cols.len(),
            indptr,
            indices,
            values,
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut d = DMatrix::zeros(self.nrows, self.ncols);
        for i in 0..self.nrows {
            let (cols, vals) = self.row(i);
            for (&j, &v) in cols.iter().zip(vals) {
                d[(i, j)] = v;
            }
        }
        d
    }

    /// Checks `|a_ij − a_ji| ≤ rel_tol · max|a|` for every stored entry.
    pub fn check_symmetric(&self, rel_tol: f64) -> Result<(), SparseError> {
        if self.nrows != self.ncols {
            return Err(SparseError::DimensionMismatch(format!(
                "square matrix expected, got {}×{}",
                self.nrows, self.ncols
            )));
        }
        let scale = self.values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for i in 0..self.nrows {
            let (cols, vals) = self.row(i);
            for (&j, &v) in cols.iter().zip(vals) {
                if j > i {
                    let defect = (v - self.get(j, i)).abs();
                    if defect > rel_tol * scale {
                        return Err(SparseError::Asymmetric { row: i, col: j, defect });
                    }
                }
            }
        }
        Ok(())
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `y ← y + alpha·x`.
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Envelope Cholesky factor `A = L Lᵀ` of a symmetric positive definite matrix.
#[derive(Debug, Clone)]
pub struct CholeskyFactor {
    n: usize,
    /// First column of the envelope in each row.
    first: Vec<usize>,
    /// Start of each row's slice `L[i][first[i]..=i]` in `data`.
    offset: Vec<usize>,
    data: Vec<f64>,
}

impl CholeskyFactor {
    /// Factors the lower triangle of `a`; the upper triangle is not read.
    pub fn new(a: &CsrMatrix) -> Result<Self, SparseError> {
        if a.nrows() != a.ncols() {
            return Err(SparseError::DimensionMismatch(format!(
                "square matrix expected, got {}×{}",
                a.nrows(),
                a.ncols()
            )));
        }
        let n = a.nrows();
        let mut first = Vec::with_capacity(n);
        let mut offset = Vec::with_capacity(n + 1);
        offset.push(0);
        for i in 0..n {
            let (cols, _) = a.row(i);
            let f = cols.first().copied().unwrap_or(i).min(i);
            first.push(f);
            offset.push(offset[i] + (i - f + 1));
        }
        let mut data = vec![0.0; offset[n]];
        for i in 0..n {
            let (cols, vals) = a.row(i);
            for (&j, &v) in cols.iter().zip(vals) {
                if j <= i {
                    data[offset[i] + j - first[i]] = v;
                }
            }
        }

        for i in 0..n {
            let fi = first[i];
            let (done, rest) = data.split_at_mut(offset[i]);
            let row_i = &mut rest[..i - fi + 1];
            for j in fi..i {
                let fj = first[j];
                let row_j = &done[offset[j]..offset[j + 1]];
                let k0 = fi.max(fj);
                let s: f64 = row_i[k0 - fi..j - fi]
                    .iter()
                    .zip(&row_j[k0 - fj..j - fj])
                    .map(|(x, y)| x * y)
                    .sum();
                let ljj = row_j[j - fj];
                row_i[j - fi] = (row_i[j - fi] - s) / ljj;
            }
            let s: f64 = row_i[..i - fi].iter().map(|x| x * x).sum();
            let d = row_i[i - fi] - s;
            if !(d > 0.0) {
                return Err(SparseError::NotPositiveDefinite { row: i, pivot: d });
            }
            row_i[i - fi] = d.sqrt();
        }
        Ok(Self {
            n,
            first,
            offset,
            data,
        })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let mut x = b.to_vec();
        self.solve_in_place(&mut x);
        x
    }

    pub fn solve_in_place(&self, x: &mut [f64]) {
        assert_eq!(x.len(), self.n);
        for i in 0..self.n {
            let fi = self.first[i];
            let row = &self.data[self.offset[i]..self.offset[i + 1]];
            let s: f64 = row[..i - fi].iter().zip(&x[fi..i]).map(|(l, y)| l * y).sum();
            x[i] = (x[i] - s) / row[i - fi];
        }
        for i in (0..self.n).rev() {
            let fi = self.first[i];
            let row = &self.data[self.offset[i]..self.offset[i + 1]];
            x[i] /= row[i - fi];
            let xi = x[i];
            for (xk, l) in x[fi..i].iter_mut().zip(&row[..i - fi]) {
                *xk -= l * xi;
            }
        }
    }
}

/// Direct SPD solve with iterative refinement, falling back to Jacobi-PCG
/// (capped at `20·n` iterations) if the factorization breaks down.
pub fn solve_spd(a: &CsrMatrix, b: &[f64], tol: f64) -> Result<Vec<f64>, SparseError> {
    if a.nrows() != b.len() {
        return Err(SparseError::DimensionMismatch(format!(
            "matrix has {} rows, right-hand side has {}",
            a.nrows(),
            b.len()
        )));
    }
    a.check_symmetric(1e-12)?;
    match CholeskyFactor::new(a) {
        Ok(factor) => solve_refined(a, &factor, b, tol),
        Err(SparseError::NotPositiveDefinite { .. }) => pcg(a, b, tol, 20 * a.nrows().max(1)),
        Err(e) => Err(e),
    }
}

/// Solves with an existing factor, refining until `‖Ax − b‖ ≤ tol‖b‖`.
/// When refinement stagnates at rounding level the solve is accepted if the
/// backward error `‖Ax − b‖ / (‖A‖‖x‖ + ‖b‖)` is at most `tol`.
pub fn solve_refined(a: &CsrMatrix, factor: &CholeskyFactor, b: &[f64], tol: f64) -> Result<Vec<f64>, SparseError> {
    let bnorm = norm2(b);
    if bnorm == 0.0 {
        return Ok(vec![0.0; b.len()]);
    }
    let anorm = a.norm_inf();
    let mut x = factor.solve(b);
    let mut prev = f64::INFINITY;
    let mut backward = f64::INFINITY;
    for _ in 0..8 {
        let mut r = a.matvec(&x);
        for (ri, bi) in r.iter_mut().zip(b) {
            *ri = bi - *ri;
        }
        let rn = norm2(&r);
        backward = rn / (anorm * norm2(&x) + bnorm);
        if rn <= tol * bnorm || (rn > 0.5 * prev && backward <= tol) {
            return Ok(x);
        }
        prev = rn;
        let dx = factor.solve(&r);
        axpy(1.0, &dx, &mut x);
    }
    if backward <= tol {
        return Ok(x);
    }
    Err(SparseError::NonConvergence {
        iterations: 8,
        residual: backward,
    })
}

/// Jacobi-preconditioned conjugate gradients.
pub fn pcg(a: &CsrMatrix, b: &[f64], tol: f64, max_iter: usize) -> Result<Vec<f64>, SparseError> {
    let n = b.len();
    let bnorm = norm2(b);
    if bnorm == 0.0 {
        return Ok(vec![0.0; n]);
    }
    let inv_diag: Vec<f64> = a
        .diagonal()
        .iter()
        .map(|&d| if d > 0.0 { 1.0 / d } else { 1.0 })
        .collect();
    let mut x = vec![0.0; n];
    let mut r = b.to_vec();
    let mut z: Vec<f64> = r.iter().zip(&inv_diag).map(|(r, d)| r * d).collect();
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut ap = vec![0.0; n];
    let mut residual = 1.0;
    for it in 0..max_iter {
        a.matvec_into(&p, &mut ap);
        let pap = dot(&p, &ap);
        if !(pap > 0.0) {
            return Err(SparseError::NotPositiveDefinite { row: it, pivot: pap });
        }
        let alpha = rz / pap;
        axpy(alpha, &p, &mut x);
        axpy(-alpha, &ap, &mut r);
        residual = norm2(&r) / bnorm;
        if residual <= tol {
            return Ok(x);
        }
        for ((zi, ri), d) in z.iter_mut().zip(&r).zip(&inv_diag) {
            *zi = ri * d;
        }
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for (pi, zi) in p.iter_mut().zip(&z) {
            *pi = zi + beta * *pi;
        }
    }
    Err(SparseError::NonConvergence {
        iterations: max_iter,
        residual,
    })
}

/// `min ½xᵀAx − fᵀx` subject to `Bx = g`.
#[derive(Debug, Clone)]
pub struct SaddleSystem {
    pub a: CsrMatrix,
    pub b: CsrMatrix,
    pub rhs_primal: Vec<f64>,
    pub rhs_constraint: Vec<f64>,
}

/// Factored KKT system `[A Bᵀ; B 0]`, reduced to the Schur complement
/// `S = B A⁻¹ Bᵀ`. One factorization serves any number of right-hand sides.
#[derive(Debug, Clone)]
pub struct SaddleSolver {
    a: CsrMatrix,
    b: CsrMatrix,
    factor: CholeskyFactor,
    /// Columns of `A⁻¹ Bᵀ`.
    a_inv_bt: Vec<Vec<f64>>,
    schur: Option<nalgebra::Cholesky<f64, nalgebra::Dyn>>,
}

impl SaddleSolver {
    pub fn new(a: &CsrMatrix, b: &CsrMatrix) -> Result<Self, SparseError> {
        if a.nrows() != a.ncols() || b.ncols() != a.nrows() {
            return Err(SparseError::DimensionMismatch(format!(
                "A is {}×{}, B is {}×{}",
                a.nrows(),
                a.ncols(),
                b.nrows(),
                b.ncols()
            )));
        }
        let m = b.nrows();
        if m > a.nrows() {
            return Err(SparseError::RankDeficient);
        }
        let factor = CholeskyFactor::new(a)?;
        let a_inv_bt: Vec<Vec<f64>> = (0..m)
            .map(|k| {
                let mut col = vec![0.0; a.nrows()];
                let (rows, vals) = b.row(k);
                for (&i, &v) in rows.iter().zip(vals) {
                    col[i] = v;
                }
                factor.solve_in_place(&mut col);
                col
            })
            .collect();
        let schur = if m == 0 {
            None
        } else {
            let mut s = DMatrix::zeros(m, m);
            for k in 0..m {
                let col = b.matvec(&a_inv_bt[k]);
                for i in 0..m {
                    s[(i, k)] = col[i];
                }
            }
            let s = (&s + s.transpose()) * 0.5;
            let scale = (0..m).map(|i| s[(i, i)].abs()).fold(0.0, f64::max);
            let chol = nalgebra::Cholesky::new(s).ok_or(SparseError::RankDeficient)?;
            let l = chol.l_dirty();
            let min_pivot = (0..m).map(|i| l[(i, i)] * l[(i, i)]).fold(f64::INFINITY, f64::min);
            if !(min_pivot > 1e-14 * scale) {
                return Err(SparseError::RankDeficient);
            }
            Some(chol)
        };
        Ok(Self {
            a: a.clone(),
            b: b.clone(),
            factor,
            a_inv_bt,
            schur,
        })
    }

    pub fn num_constraints(&self) -> usize {
        self.b.nrows()
    }

    fn solve_once(&self, f: &[f64], g: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut x = self.factor.solve(f);
        let m = self.b.nrows();
        if m == 0 {
            return (x, Vec::new());
        }
        let bx = self.b.matvec(&x);
        let rhs = DVector::from_iterator(m, bx.iter().zip(g).map(|(a, b)| a - b));
        let lambda = self.schur.as_ref().expect("schur factor").solve(&rhs);
        for (k, col) in self.a_inv_bt.iter().enumerate() {
            axpy(-lambda[k], col, &mut x);
        }
        (x, lambda.iter().copied().collect())
    }

    /// Returns `(x, λ)` with `Ax + Bᵀλ = f`, `Bx = g`, refining until both
    /// residual blocks are below `tol` times the size of the terms involved.
    pub fn solve(&self, f: &[f64], g: &[f64], tol: f64) -> Result<(Vec<f64>, Vec<f64>), SparseError> {
        if f.len() != self.a.nrows() || g.len() != self.b.nrows() {
            return Err(SparseError::DimensionMismatch(format!(
                "right-hand sides have lengths {} and {}, system is {}+{}",
                f.len(),
                g.len(),
                self.a.nrows(),
                self.b.nrows()
            )));
        }
        let (mut x, mut lambda) = self.solve_once(f, g);
        let scale = 1.0 + (dot(f, f) + dot(g, g)).sqrt() + self.a.norm_inf() * norm2(&x);
        let mut defect = f64::INFINITY;
        for _ in 0..4 {
            let (rp, rc) = self.residuals(&x, &lambda, f, g);
            defect = norm2(&rp).max(norm2(&rc));
            if defect <= tol * scale {
                return Ok((x, lambda));
            }
            let (dx, dl) = self.solve_once(&rp, &rc);
            axpy(1.0, &dx, &mut x);
            axpy(1.0, &dl, &mut lambda);
        }
        Err(SparseError::NonConvergence {
            iterations: 4,
            residual: defect / scale,
        })
    }

    /// Residual blocks `(f − Ax − Bᵀλ, g − Bx)`.
    pub fn residuals(&self, x: &[f64], lambda: &[f64], f: &[f64], g: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut rp = self.a.matvec(x);
        if !lambda.is_empty() {
            let mut btl = vec![0.0; x.len()];
            for i in 0..self.b.nrows() {
                let (cols, vals) = self.b.row(i);
                for (&j, &v) in cols.iter().zip(vals) {
                    btl[j] += v * lambda[i];
                }
            }
            axpy(1.0, &btl, &mut rp);
        }
        for (r, fi) in rp.iter_mut().zip(f) {
            *r = fi - *r;
        }
        let mut rc = self.b.matvec(x);
        for (r, gi) in rc.iter_mut().zip(g) {
            *r = gi - *r;
        }
        (rp, rc)
    }
}

/// Solves the equality-constrained quadratic program of `sys`.
pub fn solve_saddle(sys: &SaddleSystem, tol: f64) -> Result<(Vec<f64>, Vec<f64>), SparseError> {
    if sys.b.nrows() == 0 {
        let x = solve_spd(&sys.a, &sys.rhs_primal, tol)?;
        return Ok((x, Vec::new()));
    }
    sys.a.check_symmetric(1e-12)?;
    let solver = SaddleSolver::new(&sys.a, &sys.b)?;
    solver.solve(&sys.rhs_primal, &sys.rhs_constraint, tol)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_spd(n: usize, seed: u64) -> CsrMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
        CsrMatrix::from_dense(&(m.transpose() * &m + DMatrix::identity(n, n)))
    }

    #[test]
    fn triplets_merge_and_sort() {
        let a = CsrMatrix::from_triplets(2, 3, &[(1, 2, 1.0), (0, 1, 2.0), (1, 0, 3.0), (1, 2, 4.0)]);
        assert_eq!(a.indptr(), &[0, 1, 3]);
        assert_eq!(a.indices(), &[1, 0, 2]);
        assert_eq!(a.values(), &[2.0, 3.0, 5.0]);
        assert_eq!(a.get(1, 2), 5.0);
        assert_eq!(a.get(0, 0), 0.0);
        assert_eq!(a.transpose().to_dense(), a.to_dense().transpose());
    }

    #[test]
    fn identity_solve() {
        let b = vec![1.0, -2.0, 3.5];
        assert_eq!(solve_spd(&CsrMatrix::identity(3), &b, DEFAULT_TOL).unwrap(), b);
    }

    #[test]
    fn two_by_two_solve() {
        let a = CsrMatrix::from_triplets(2, 2, &[(0, 0, 2.0), (0, 1, 1.0), (1, 0, 1.0), (1, 1, 2.0)]);
        let x = solve_spd(&a, &[3.0, 3.0], DEFAULT_TOL).unwrap();
        assert!((x[0] - 1.0).abs() < 1e-14 && (x[1] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn random_spd_solve() {
        let a = random_spd(50, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let b: Vec<f64> = (0..50).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x = solve_spd(&a, &b, DEFAULT_TOL).unwrap();
        let mut r = a.matvec(&x);
        axpy(-1.0, &b, &mut r);
        assert!(norm2(&r) <= 1e-10 * norm2(&b));
        let y = pcg(&a, &b, 1e-12, 1000).unwrap();
        assert!(x.iter().zip(&y).all(|(p, q)| (p - q).abs() < 1e-8));
    }

    #[test]
    fn asymmetric_input_is_rejected() {
        let a = CsrMatrix::from_triplets(2, 2, &[(0, 0, 2.0), (0, 1, 1.0), (1, 1, 2.0)]);
        assert!(matches!(solve_spd(&a, &[1.0, 1.0], DEFAULT_TOL), Err(SparseError::Asymmetric { .. })));
    }

    #[test]
    fn indefinite_matrix_reports_failure() {
        let a = CsrMatrix::from_triplets(2, 2, &[(0, 0, 1.0), (1, 1, -1.0)]);
        assert!(CholeskyFactor::new(&a).is_err());
        assert!(solve_spd(&a, &[1.0, 1.0], DEFAULT_TOL).is_err());
    }

    #[test]
    fn projection_onto_a_constraint() {
        let sys = SaddleSystem {
            a: CsrMatrix::identity(2),
            b: CsrMatrix::from_triplets(1, 2, &[(0, 0, 1.0)]),
            rhs_primal: vec![0.0, 0.0],
            rhs_constraint: vec![1.0],
        };
        let (x, l) = solve_saddle(&sys, DEFAULT_TOL).unwrap();
        assert!((x[0] - 1.0).abs() < 1e-14 && x[1].abs() < 1e-14);
        assert!((l[0] + 1.0).abs() < 1e-14);
    }

    #[test]
    fn empty_constraints_reduce_to_spd_solve() {
        let a = random_spd(6, 1);
        let f = vec![1.0, 0.0, -1.0, 2.0, 0.5, 0.0];
        let sys = SaddleSystem {
            a: a.clone(),
            b: CsrMatrix::from_triplets(0, 6, &[]),
            rhs_primal: f.clone(),
            rhs_constraint: vec![],
        };
        let (x, l) = solve_saddle(&sys, DEFAULT_TOL).unwrap();
        assert!(l.is_empty());
        assert_eq!(x, solve_spd(&a, &f, DEFAULT_TOL).unwrap());
    }

    #[test]
    fn saddle_matches_dense_kkt() {
        let n = 12;
        let a = random_spd(n, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let bd = DMatrix::from_fn(3, n, |_, _| rng.gen_range(-1.0..1.0));
        let b = CsrMatrix::from_dense(&bd);
        let f: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let g = vec![0.3, -1.0, 2.0];
        let (x, l) = solve_saddle(
            &SaddleSystem {
                a: a.clone(),
                b,
                rhs_primal: f.clone(),
                rhs_constraint: g.clone(),
            },
            DEFAULT_TOL,
        )
        .unwrap();
        let mut kkt = DMatrix::zeros(n + 3, n + 3);
        kkt.view_mut((0, 0), (n, n)).copy_from(&a.to_dense());
        kkt.view_mut((0, n), (n, 3)).copy_from(&bd.transpose());
        kkt.view_mut((n, 0), (3, n)).copy_from(&bd);
        let rhs = DVector::from_iterator(n + 3, f.iter().chain(&g).copied());
        let sol = kkt.lu().solve(&rhs).unwrap();
        for i in 0..n {
            assert!((x[i] - sol[i]).abs() < 1e-10);
        }
        for i in 0..3 {
            assert!((l[i] - sol[n + i]).abs() < 1e-10);
        }
    }

    #[test]
    fn dependent_constraints_are_rank_deficient() {
        let b = CsrMatrix::from_triplets(2, 3, &[(0, 0, 1.0), (0, 1, 1.0), (1, 0, 2.0), (1, 1, 2.0)]);
        assert!(matches!(
            SaddleSolver::new(&CsrMatrix::identity(3), &b),
            Err(SparseError::RankDeficient)
        ));
    }
}
