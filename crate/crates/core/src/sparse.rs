//! Compressed sparse row operators and the direct/iterative solvers built on
//! them: envelope Cholesky, Jacobi-preconditioned CG and a Schur-complement
//! saddle-point solver.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolverError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("matrix not positive definite at row {row} (pivot {pivot:e})")]
    NotPositiveDefinite { row: usize, pivot: f64 },
    #[error("no convergence after {iterations} iterations (relative residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },
    #[error("rank-deficient constraints; offending rows {rows:?}")]
    RankDeficient { rows: Vec<usize> },
    #[error("singular system: {0}")]
    Singular(String),
}

/// A sparse matrix in CSR layout with sorted, duplicate-free columns.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseOp {
    nrows: usize,
    ncols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

/// Triplet accumulator; duplicates are summed on `build`.
#[derive(Debug, Clone, Default)]
pub struct TripletBuilder {
    nrows: usize,
    ncols: usize,
    entries: Vec<(usize, usize, f64)>,
}

impl TripletBuilder {
    pub fn new(nrows: usize, ncols: usize) -> Self {
        Self {
            nrows,
            ncols,
            entries: Vec::new(),
        }
    }

    pub fn push(&mut self, row: usize, col: usize, value: f64) {
        debug_assert!(row < self.nrows && col < self.ncols);
        self.entries.push((row, col, value));
    }

    /// Sums duplicates in insertion order, so the result only depends on the
    /// order of `push` calls.
    pub fn build(self) -> SparseOp {
        let mut counts = vec![0usize; self.nrows + 1];
        for &(r, _, _) in &self.entries {
            counts[r + 1] += 1;
        }
        for i in 0..self.nrows {
            counts[i + 1] += counts[i];
        }
        let mut next = counts.clone();
        let mut cols = vec![0usize; self.entries.len()];
        let mut vals = vec![0.0; self.entries.len()];
        for &(r, c, v) in &self.entries {
            let k = next[r];
            cols[k] = c;
            vals[k] = v;
            next[r] += 1;
        }
        let mut row_ptr = Vec::with_capacity(self.nrows + 1);
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        row_ptr.push(0);
        let mut scratch: Vec<(usize, f64)> = Vec::new();
        for r in 0..self.nrows {
            scratch.clear();
            scratch.extend((counts[r]..counts[r + 1]).map(|k| (cols[k], vals[k])));
            // stable sort keeps insertion order among duplicates
            scratch.sort_by_key(|&(c, _)| c);
            let mut k = 0;
            while k < scratch.len() {
                let c = scratch[k].0;
                let mut sum = 0.0;
                while k < scratch.len() && scratch[k].0 == c {
                    sum += scratch[k].1;
                    k += 1;
                }
                col_idx.push(c);
                values.push(sum);
            }
            row_ptr.push(col_idx.len());
        }
        SparseOp {
            nrows: self.nrows,
            ncols: self.ncols,
            row_ptr,
            col_idx,
            values,
        }
    }
}

impl SparseOp {
    pub fn identity(n: usize) -> Self {
        Self {
            nrows: n,
            ncols: n,
            row_ptr: (0..=n).collect(),
            col_idx: (0..n).collect(),
            values: vec![1.0; n],
        }
    }

    pub fn zeros(nrows: usize, ncols: usize) -> Self {
        Self {
            nrows,
            ncols,
            row_ptr: vec![0; nrows + 1],
            col_idx: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn from_dense(rows: &[Vec<f64>], ncols: usize) -> Self {
        let mut b = TripletBuilder::new(rows.len(), ncols);
        for (i, row) in rows.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                if v != 0.0 {
                    b.push(i, j, v);
                }
            }
        }
        b.build()
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

    pub fn row(&self, i: usize) -> (&[usize], &[f64]) {
        let (a, b) = (self.row_ptr[i], self.row_ptr[i + 1]);
        (&self.col_idx[a..b], &self.values[a..b])
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (cols, vals) = self.row(i);
        cols.binary_search(&j).map(|k| vals[k]).unwrap_or(0.0)
    }

    pub fn triplets(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.nrows).flat_map(move |i| {
            let (cols, vals) = self.row(i);
            cols.iter().zip(vals).map(move |(&j, &v)| (i, j, v))
        })
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut out = vec![vec![0.0; self.ncols]; self.nrows];
        for (i, j, v) in self.triplets() {
            out[i][j] = v;
        }
        out
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.ncols, "matvec dimension");
        (0..self.nrows)
            .map(|i| {
                let (cols, vals) = self.row(i);
                cols.iter().zip(vals).map(|(&j, &v)| v * x[j]).sum()
            })
            .collect()
    }

    /// `A^T x`, accumulated row by row.
    pub fn matvec_transpose(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.nrows, "matvec_transpose dimension");
        let mut y = vec![0.0; self.ncols];
        for (i, &xi) in x.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            let (cols, vals) = self.row(i);
            for (&j, &v) in cols.iter().zip(vals) {
                y[j] += v * xi;
            }
        }
        y
    }

    pub fn transpose(&self) -> SparseOp {
        let mut b = TripletBuilder::new(self.ncols, self.nrows);
        for (i, j, v) in self.triplets() {
            b.push(j, i, v);
        }
        b.build()
    }

    /// Sparse product `self * other`.
    pub fn matmul(&self, other: &SparseOp) -> SparseOp {
        assert_eq!(self.ncols, other.nrows, "matmul dimension");
        let mut b = TripletBuilder::new(self.nrows, other.ncols);
        let mut acc = vec![0.0; other.ncols];
        let mut touched: Vec<usize> = Vec::new();
        let mut mark = vec![false; other.ncols];
        for i in 0..self.nrows {
            let (cols, vals) = self.row(i);
            for (&k, &a) in cols.iter().zip(vals) {
                let (ocols, ovals) = other.row(k);
                for (&j, &v) in ocols.iter().zip(ovals) {
                    if !mark[j] {
                        mark[j] = true;
                        touched.push(j);
                    }
                    acc[j] += a * v;
                }
            }
            touched.sort_unstable();
            for &j in &touched {
                b.push(i, j, acc[j]);
                acc[j] = 0.0;
                mark[j] = false;
            }
            touched.clear();
        }
        b.build()
    }

    /// `self + alpha * other`.
    pub fn add_scaled(&self, alpha: f64, other: &SparseOp) -> SparseOp {
        assert_eq!((self.nrows, self.ncols), (other.nrows, other.ncols));
        let mut b = TripletBuilder::new(self.nrows, self.ncols);
        for (i, j, v) in self.triplets() {
            b.push(i, j, v);
        }
        for (i, j, v) in other.triplets() {
            b.push(i, j, alpha * v);
        }
        b.build()
    }

    pub fn scaled(&self, alpha: f64) -> SparseOp {
        let mut out = self.clone();
        out.values.iter_mut().for_each(|v| *v *= alpha);
        out
    }

    /// Submatrix with the given rows and columns. `col_map[j]` is the local
    /// column of global column `j`, or `usize::MAX` when dropped.
    pub fn extract(&self, rows: &[usize], col_map: &[usize], ncols: usize) -> SparseOp {
        let mut b = TripletBuilder::new(rows.len(), ncols);
        for (li, &gi) in rows.iter().enumerate() {
            let (cols, vals) = self.row(gi);
            for (&gj, &v) in cols.iter().zip(vals) {
                let lj = col_map[gj];
                if lj != usize::MAX {
                    b.push(li, lj, v);
                }
            }
        }
        b.build()
    }

    /// Largest entrywise asymmetry relative to the largest entry.
    pub fn asymmetry(&self) -> f64 {
        if self.nrows != self.ncols {
            return f64::INFINITY;
        }
        let scale = self.max_abs();
        if scale == 0.0 {
            return 0.0;
        }
        let mut worst: f64 = 0.0;
        for (i, j, v) in self.triplets() {
            worst = worst.max((v - self.get(j, i)).abs());
        }
        worst / scale
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.nrows.min(self.ncols)).map(|i| self.get(i, i)).collect()
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Envelope (skyline) Cholesky factor `A = L L^T`. Row `i` of `L` is stored
/// densely from its first structural nonzero to the diagonal, so the natural
/// row-major ordering of structured grids yields a band of width ~ one grid
/// row.
#[derive(Debug, Clone)]
pub struct ProfileCholesky {
    n: usize,
    first: Vec<usize>,
    offset: Vec<usize>,
    data: Vec<f64>,
}

impl ProfileCholesky {
    pub fn factor(op: &SparseOp) -> Result<Self, SolverError> {
        if op.nrows != op.ncols {
            return Err(SolverError::Dimension {
                expected: op.nrows,
                got: op.ncols,
            });
        }
        let n = op.nrows;
        let mut first: Vec<usize> = (0..n).collect();
        for (i, j, _) in op.triplets() {
            if j < i {
                first[i] = first[i].min(j);
            } else if i < j {
                first[j] = first[j].min(i);
            }
        }
        let mut offset = Vec::with_capacity(n + 1);
        offset.push(0);
        for i in 0..n {
            offset.push(offset[i] + (i - first[i] + 1));
        }
        let mut data = vec![0.0; offset[n]];
        // lower triangle of A (symmetric part read from the lower entries)
        for (i, j, v) in op.triplets() {
            if j <= i {
                data[offset[i] + j - first[i]] = v;
            }
        }
        for i in 0..n {
            let fi = first[i];
            let row_start = offset[i];
            for j in fi..i {
                let fj = first[j];
                let k0 = fi.max(fj);
                let s = {
                    let li = &data[row_start + k0 - fi..row_start + j - fi];
                    let lj = &data[offset[j] + k0 - fj..offset[j] + j - fj];
                    dot(li, lj)
                };
                let ljj = data[offset[j] + j - fj];
                let idx = row_start + j - fi;
                data[idx] = (data[idx] - s) / ljj;
            }
            let li = &data[row_start..row_start + i - fi];
            let d = data[row_start + i - fi] - dot(li, li);
            if !(d > 0.0) || !d.is_finite() {
                return Err(SolverError::NotPositiveDefinite { row: i, pivot: d });
            }
            data[row_start + i - fi] = d.sqrt();
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

    pub fn solve_in_place(&self, x: &mut [f64]) {
        assert_eq!(x.len(), self.n, "factor dimension");
        for i in 0..self.n {
            let fi = self.first[i];
            let row = &self.data[self.offset[i]..self.offset[i + 1]];
            let s = dot(&row[..i - fi], &x[fi..i]);
            x[i] = (x[i] - s) / row[i - fi];
        }
        for i in (0..self.n).rev() {
            let fi = self.first[i];
            let row = &self.data[self.offset[i]..self.offset[i + 1]];
            x[i] /= row[i - fi];
            let xi = x[i];
            for (xc, l) in x[fi..i].iter_mut().zip(&row[..i - fi]) {
                *xc -= l * xi;
            }
        }
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let mut x = b.to_vec();
        self.solve_in_place(&mut x);
        x
    }
}

/// Jacobi-preconditioned conjugate gradients.
pub fn pcg(op: &SparseOp, rhs: &[f64], tol: f64, max_iter: usize) -> Result<Vec<f64>, SolverError> {
    let n = op.nrows();
    if rhs.len() != n {
        return Err(SolverError::Dimension {
            expected: n,
            got: rhs.len(),
        });
    }
    let bnorm = norm(rhs);
    let mut x = vec![0.0; n];
    if bnorm == 0.0 {
        return Ok(x);
    }
    let inv_diag: Vec<f64> = op
        .diagonal()
        .iter()
        .map(|&d| if d > 0.0 { 1.0 / d } else { 1.0 })
        .collect();
    let mut r = rhs.to_vec();
    let mut z: Vec<f64> = r.iter().zip(&inv_diag).map(|(a, b)| a * b).collect();
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut res = 1.0;
    for it in 0..max_iter {
        let ap = op.matvec(&p);
        let pap = dot(&p, &ap);
        if pap <= 0.0 {
            return Err(SolverError::NotPositiveDefinite { row: it, pivot: pap });
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        res = norm(&r) / bnorm;
        if res <= tol {
            // confirm with the true residual
            let ax = op.matvec(&x);
            let true_res = norm(&ax.iter().zip(rhs).map(|(a, b)| b - a).collect::<Vec<_>>()) / bnorm;
            if true_res <= tol {
                return Ok(x);
            }
            r = ax.iter().zip(rhs).map(|(a, b)| b - a).collect();
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
    Err(SolverError::NoConvergence {
        iterations: max_iter,
        residual: res,
    })
}

/// Solves `op u = rhs` for SPD `op` to relative residual `tol`.
pub fn solve_spd(op: &SparseOp, rhs: &[f64], tol: f64) -> Result<Vec<f64>, SolverError> {
    pcg(op, rhs, tol, 10 * op.nrows() + 1000)
}

/// Dense pivoted Cholesky of a small SPD matrix used for Schur complements.
#[derive(Debug, Clone)]
struct PivotedCholesky {
    n: usize,
    perm: Vec<usize>,
    l: Vec<f64>,
}

impl PivotedCholesky {
    /// Factors `a` (row-major, `n x n`). Pivots smaller than `rel_tol` times
    /// the largest diagonal entry signal rank deficiency; the returned rows
    /// are those that could not be eliminated.
    fn factor(mut a: Vec<f64>, n: usize, rel_tol: f64) -> Result<Self, Vec<usize>> {
        let mut perm: Vec<usize> = (0..n).collect();
        let scale = (0..n).fold(0.0f64, |m, i| m.max(a[i * n + i]));
        let threshold = rel_tol * scale.max(f64::MIN_POSITIVE);
        for k in 0..n {
            let (p, best) = (k..n)
                .map(|i| (i, a[i * n + i]))
                .fold((k, f64::NEG_INFINITY), |acc, x| if x.1 > acc.1 { x } else { acc });
            if !(best > threshold) {
                let mut rows: Vec<usize> = perm[k..].to_vec();
                rows.sort_unstable();
                return Err(rows);
            }
            if p != k {
                perm.swap(p, k);
                for j in 0..n {
                    a.swap(p * n + j, k * n + j);
                }
                for i in 0..n {
                    a.swap(i * n + p, i * n + k);
                }
            }
            let d = a[k * n + k].sqrt();
            a[k * n + k] = d;
            for i in k + 1..n {
                a[i * n + k] /= d;
            }
            // full trailing update keeps both triangles valid for later swaps
            for i in k + 1..n {
                let lik = a[i * n + k];
                for j in k + 1..n {
                    a[i * n + j] -= lik * a[j * n + k];
                }
            }
        }
        Ok(Self { n, perm, l: a })
    }

    fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut y: Vec<f64> = self.perm.iter().map(|&p| b[p]).collect();
        for i in 0..n {
            let mut s = y[i];
            for k in 0..i {
                s -= self.l[i * n + k] * y[k];
            }
            y[i] = s / self.l[i * n + i];
        }
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in i + 1..n {
                s -= self.l[k * n + i] * y[k];
            }
            y[i] = s / self.l[i * n + i];
        }
        let mut x = vec![0.0; n];
        for (i, &p) in self.perm.iter().enumerate() {
            x[p] = y[i];
        }
        x
    }
}

/// Relative pivot threshold below which Schur-complement rows count as
/// linearly dependent.
const RANK_TOL: f64 = 1e-12;

/// Prepared solver for `[K C^T; C 0] [q; l] = [b; 0]` with `K` SPD on the
/// kernel of `C`. Zero rows of `C` are pruned; the remaining rows must be
/// linearly independent.
#[derive(Debug, Clone)]
pub struct SaddleSolver {
    factor: ProfileCholesky,
    constraints: SparseOp,
    kept_rows: Vec<usize>,
    /// `K^{-1} C^T`, column-major (one column per kept constraint).
    kinv_ct: Vec<f64>,
    schur: Option<PivotedCholesky>,
}

impl SaddleSolver {
    pub fn new(op: &SparseOp, constraints: &SparseOp) -> Result<Self, SolverError> {
        if constraints.ncols() != op.nrows() {
            return Err(SolverError::Dimension {
                expected: op.nrows(),
                got: constraints.ncols(),
            });
        }
        let factor = ProfileCholesky::factor(op)?;
        let kept_rows: Vec<usize> = (0..constraints.nrows())
            .filter(|&i| constraints.row(i).1.iter().any(|&v| v != 0.0))
            .collect();
        let n = op.nrows();
        let r = kept_rows.len();
        let pruned = {
            let col_map: Vec<usize> = (0..n).collect();
            constraints.extract(&kept_rows, &col_map, n)
        };
        let mut kinv_ct = vec![0.0; n * r];
        for (c, col) in kinv_ct.chunks_mut(n.max(1)).take(r).enumerate() {
            let (cols, vals) = pruned.row(c);
            for (&j, &v) in cols.iter().zip(vals) {
                col[j] = v;
            }
            factor.solve_in_place(col);
        }
        let schur = if r == 0 {
            None
        } else {
            let mut s = vec![0.0; r * r];
            for a in 0..r {
                let (cols, vals) = pruned.row(a);
                for b in 0..r {
                    let y = &kinv_ct[b * n..(b + 1) * n];
                    s[a * r + b] = cols.iter().zip(vals).map(|(&j, &v)| v * y[j]).sum();
                }
            }
            for a in 0..r {
                for b in 0..a {
                    let m = 0.5 * (s[a * r + b] + s[b * r + a]);
                    s[a * r + b] = m;
                    s[b * r + a] = m;
                }
            }
            let chol = PivotedCholesky::factor(s, r, RANK_TOL).map_err(|local| SolverError::RankDeficient {
                rows: local.into_iter().map(|k| kept_rows[k]).collect(),
            })?;
            Some(chol)
        };
        Ok(Self {
            factor,
            constraints: pruned,
            kept_rows,
            kinv_ct,
            schur,
        })
    }

    pub fn dim(&self) -> usize {
        self.factor.dim()
    }

    /// Indices of the constraint rows that survived pruning.
    pub fn kept_rows(&self) -> &[usize] {
        &self.kept_rows
    }

    pub fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        let n = self.dim();
        let mut x = self.factor.solve(rhs);
        if let Some(schur) = &self.schur {
            let cx = self.constraints.matvec(&x);
            let lambda = schur.solve(&cx);
            for (c, &l) in lambda.iter().enumerate() {
                if l == 0.0 {
                    continue;
                }
                let y = &self.kinv_ct[c * n..(c + 1) * n];
                for (xi, yi) in x.iter_mut().zip(y) {
                    *xi -= l * yi;
                }
            }
        }
        x
    }
}

/// One-shot saddle-point solve; returns the primal part `q` with `C q = 0`.
pub fn solve_saddle(op: &SparseOp, constraints: &SparseOp, rhs: &[f64]) -> Result<Vec<f64>, SolverError> {
    if rhs.len() != op.nrows() {
        return Err(SolverError::Dimension {
            expected: op.nrows(),
            got: rhs.len(),
        });
    }
    Ok(SaddleSolver::new(op, constraints)?.solve(rhs))
}
