//! Dual active-set solver for `min 1/2 ||x||^2 + c^T x  s.t.  A x >= b`.
//!
//! This is the Goldfarb-Idnani method specialised to an identity Hessian. Constraints are
//! added one at a time (most violated first). Only the triangular factor of the sparse active
//! normals is kept; step directions come from semi-normal equations with one refinement
//! step, so an iteration costs `O(q^2 + q nnz)` rather than `O(n^2)`. Because the method is
//! dual, it detects infeasibility exactly and can resume after new rows are appended.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Constraint rows stored in compressed sparse row form.
#[derive(Debug, Clone, Default)]
pub struct SparseRows {
    pub row_ptr: Vec<usize>,
    pub cols: Vec<usize>,
    pub vals: Vec<f64>,
    pub rhs: Vec<f64>,
    pub tags: Vec<u32>,
}

impl SparseRows {
    pub fn new() -> Self {
        SparseRows { row_ptr: vec![0], ..Default::default() }
    }

    pub fn len(&self) -> usize {
        self.rhs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rhs.is_empty()
    }

    /// Appends `a^T x >= rhs`, dropping exact zeros.
    pub fn push(&mut self, entries: impl IntoIterator<Item = (usize, f64)>, rhs: f64, tag: u32) {
        for (c, v) in entries {
            if v != 0.0 {
                self.cols.push(c);
                self.vals.push(v);
            }
        }
        self.row_ptr.push(self.cols.len());
        self.rhs.push(rhs);
        self.tags.push(tag);
    }

    pub fn push_dense(&mut self, a: &[f64], rhs: f64, tag: u32) {
        self.push(a.iter().copied().enumerate(), rhs, tag);
    }

    pub fn append(&mut self, other: &SparseRows) {
        let base = self.cols.len();
        self.cols.extend_from_slice(&other.cols);
        self.vals.extend_from_slice(&other.vals);
        self.row_ptr.extend(other.row_ptr[1..].iter().map(|p| p + base));
        self.rhs.extend_from_slice(&other.rhs);
        self.tags.extend_from_slice(&other.tags);
    }

    pub fn row(&self, i: usize) -> (&[usize], &[f64]) {
        let (a, b) = (self.row_ptr[i], self.row_ptr[i + 1]);
        (&self.cols[a..b], &self.vals[a..b])
    }

    pub fn dot(&self, i: usize, x: &[f64]) -> f64 {
        let (c, v) = self.row(i);
        c.iter().zip(v).map(|(&j, &a)| a * x[j]).sum()
    }

    pub fn row_norm(&self, i: usize) -> f64 {
        self.row(i).1.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// `a_i^T x - b_i` for every row.
    pub fn residuals(&self, x: &[f64]) -> Vec<f64> {
        (0..self.len()).map(|i| self.dot(i, x) - self.rhs[i]).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QpOptions {
    pub max_iter: usize,
    /// Rows with normalized slack above `-feas_tol` count as satisfied.
    pub feas_tol: f64,
}

impl Default for QpOptions {
    fn default() -> Self {
        QpOptions { max_iter: 10_000, feas_tol: 1e-10 }
    }
}

/// A violated row at the point where infeasibility was detected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViolatedRow {
    pub index: usize,
    pub tag: u32,
    pub residual: f64,
}

/// Diagnostic returned when the constraints admit no solution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfeasibilityReport {
    /// Row that could not be added to the active set.
    pub blocking_row: usize,
    pub blocking_tag: u32,
    /// Most violated rows at the last dual iterate, worst first.
    pub most_violated: Vec<ViolatedRow>,
}

impl fmt::Display for InfeasibilityReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "row {} (tag {}) is inconsistent with the active set", self.blocking_row, self.blocking_tag)?;
        for v in self.most_violated.iter().take(5) {
            write!(f, "; row {} tag {} residual {:.3e}", v.index, v.tag, v.residual)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub x: Vec<f64>,
    pub objective: f64,
    pub active: Vec<usize>,
    pub multipliers: Vec<f64>,
    pub iterations: usize,
    pub min_residual: f64,
}

/// Resumable dual active-set state.
#[derive(Debug, Clone)]
pub struct DualActiveSet {
    n: usize,
    c: Vec<f64>,
    rows: SparseRows,
    norms: Vec<f64>,
    x: Vec<f64>,
    /// Upper-triangular factor of the active normals (`N = Q R`), stored by column
    /// (column k has k + 1 entries). `Q` itself is never formed.
    rcols: Vec<Vec<f64>>,
    active: Vec<usize>,
    is_active: Vec<bool>,
    mult: Vec<f64>,
    opts: QpOptions,
    iterations: usize,
    /// Rows priced every iteration; the rest are only scanned once the working rows hold.
    work: Vec<usize>,
    in_work: Vec<bool>,
    /// Dense scratch copy of the candidate normal.
    scatter: Vec<f64>,
}

impl DualActiveSet {
    pub fn new(n: usize, c: Vec<f64>, rows: SparseRows, opts: QpOptions) -> Self {
        assert_eq!(c.len(), n);
        let x = c.iter().map(|v| -v).collect();
        let norms = (0..rows.len()).map(|i| rows.row_norm(i)).collect();
        let m = rows.len();
        DualActiveSet {
            n,
            c,
            rows,
            norms,
            x,
            rcols: Vec::new(),
            active: Vec::new(),
            is_active: vec![false; m],
            mult: Vec::new(),
            opts,
            iterations: 0,
            work: Vec::new(),
            in_work: vec![false; m],
            scatter: vec![0.0; n],
        }
    }

    pub fn rows(&self) -> &SparseRows {
        &self.rows
    }

    /// Appends constraints; the next [`solve`](Self::solve) continues from the current iterate.
    pub fn add_rows(&mut self, extra: &SparseRows) {
        let start = self.rows.len();
        self.rows.append(extra);
        for i in start..self.rows.len() {
            self.norms.push(self.rows.row_norm(i));
            self.is_active.push(false);
            self.in_work.push(false);
        }
    }

    fn normalized_slack(&self, i: usize) -> f64 {
        let nrm = self.norms[i];
        let s = self.rows.dot(i, &self.x) - self.rows.rhs[i];
        if nrm > 0.0 {
            s / nrm
        } else {
            s
        }
    }

    fn most_violated(&mut self) -> Option<usize> {
        let mut best = None;
        let mut worst = -self.opts.feas_tol;
        for &i in &self.work {
            if self.is_active[i] {
                continue;
            }
            let s = self.normalized_slack(i);
            if s < worst {
                worst = s;
                best = Some(i);
            }
        }
        if best.is_some() {
            return best;
        }
        // Full pricing pass: pull the worst violated rows into the working set.
        let mut viol: Vec<(f64, usize)> = (0..self.rows.len())
            .filter(|&i| !self.in_work[i])
            .filter_map(|i| {
                let s = self.normalized_slack(i);
                (s < -self.opts.feas_tol).then_some((s, i))
            })
            .collect();
        if viol.is_empty() {
            return None;
        }
        viol.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let batch = 64;
        for &(_, i) in viol.iter().take(batch) {
            self.in_work[i] = true;
            self.work.push(i);
        }
        Some(viol[0].1)
    }

    /// `N^T v` for a dense `v`.
    fn active_dots(&self, v: &[f64]) -> Vec<f64> {
        self.active.iter().map(|&i| self.rows.dot(i, v)).collect()
    }

    /// Solves `R^T R y = b` in place.
    fn normal_solve(&self, b: &mut [f64]) {
        let q = b.len();
        for i in 0..q {
            let mut acc = b[i];
            for (k, bk) in b.iter().enumerate().take(i) {
                acc -= self.rcols[i][k] * bk;
            }
            b[i] = acc / self.rcols[i][i];
        }
        self.back_solve(b);
    }

    /// Solves `R y = b` in place.
    fn back_solve(&self, b: &mut [f64]) {
        let q = b.len();
        for i in (0..q).rev() {
            let mut acc = b[i];
            for m in i + 1..q {
                acc -= self.rcols[m][i] * b[m];
            }
            b[i] = acc / self.rcols[i][i];
        }
    }

    /// `z -= N r`.
    fn sub_active(&self, r: &[f64], z: &mut [f64]) {
        for (&i, &rk) in self.active.iter().zip(r) {
            if rk != 0.0 {
                let (cols, vals) = self.rows.row(i);
                for (&c, &v) in cols.iter().zip(vals) {
                    z[c] -= rk * v;
                }
            }
        }
    }

    /// Projection of row `p` onto the complement of the active normals, `z`, and the
    /// coefficients `r` with `n_p = N r + z`. Uses semi-normal equations with one step of
    /// refinement.
    fn directions(&mut self, p: usize, z: &mut [f64]) -> Vec<f64> {
        let (cols, vals) = self.rows.row(p);
        for (&c, &v) in cols.iter().zip(vals) {
            self.scatter[c] = v;
        }
        let mut r = self.active_dots(&self.scatter);
        for (&c, _) in cols.iter().zip(vals) {
            self.scatter[c] = 0.0;
        }
        self.normal_solve(&mut r);
        z.iter_mut().for_each(|v| *v = 0.0);
        for (&c, &v) in cols.iter().zip(vals) {
            z[c] = v;
        }
        self.sub_active(&r, z);
        if !r.is_empty() {
            let mut dr = self.active_dots(z);
            self.normal_solve(&mut dr);
            self.sub_active(&dr, z);
            for (a, b) in r.iter_mut().zip(&dr) {
                *a += b;
            }
        }
        r
    }

    fn drop_active(&mut self, pos: usize) {
        let row = self.active.remove(pos);
        self.is_active[row] = false;
        self.mult.remove(pos);
        self.rcols.remove(pos);
        let q = self.active.len();
        for i in pos..q {
            let (a, b) = (self.rcols[i][i], self.rcols[i][i + 1]);
            let h = a.hypot(b);
            if h == 0.0 {
                self.rcols[i].truncate(i + 1);
                continue;
            }
            let (c, s) = (a / h, b / h);
            for m in i..q {
                let (va, vb) = (self.rcols[m][i], self.rcols[m][i + 1]);
                self.rcols[m][i] = c * va + s * vb;
                self.rcols[m][i + 1] = -s * va + c * vb;
            }
            self.rcols[i].truncate(i + 1);
        }
    }

    /// Runs the dual iterations until every row is satisfied.
    pub fn solve(&mut self) -> Result<QpSolution> {
        let n = self.n;
        let mut z = vec![0.0; n];
        while let Some(p) = self.most_violated() {
            let np2: f64 = self.rows.row(p).1.iter().map(|v| v * v).sum();
            let mut u_new = 0.0;
            loop {
                self.iterations += 1;
                if self.iterations > self.opts.max_iter {
                    return Err(Error::IterationLimit(self.opts.max_iter));
                }
                let r = self.directions(p, &mut z);
                let mut t1 = f64::INFINITY;
                let mut drop_pos = None;
                for (j, &rj) in r.iter().enumerate() {
                    if rj > 0.0 {
                        let ratio = self.mult[j] / rj;
                        if ratio < t1 {
                            t1 = ratio;
                            drop_pos = Some(j);
                        }
                    }
                }
                let zn: f64 = z.iter().map(|v| v * v).sum();
                let slack = self.rows.dot(p, &self.x) - self.rows.rhs[p];
                let t2 = if zn > 1e-14 * np2 { -slack / zn } else { f64::INFINITY };
                if t1.is_infinite() && t2.is_infinite() {
                    return Err(Error::Infeasible(self.report(p)));
                }
                let t = t1.min(t2);
                if t2.is_finite() {
                    for (xi, zi) in self.x.iter_mut().zip(&z) {
                        *xi += t * zi;
                    }
                }
                for (m, rj) in self.mult.iter_mut().zip(&r) {
                    *m -= t * rj;
                }
                u_new += t;
                if t2 <= t1 {
                    // Full step: p joins the active set; the new factor column is
                    // (R r, ||z||).
                    let q = self.active.len();
                    let mut col = vec![0.0; q + 1];
                    for (m, &rm) in r.iter().enumerate() {
                        for (i, ci) in col.iter_mut().enumerate().take(m + 1) {
                            *ci += self.rcols[m][i] * rm;
                        }
                    }
                    col[q] = zn.sqrt();
                    self.rcols.push(col);
                    self.active.push(p);
                    self.is_active[p] = true;
                    self.mult.push(u_new);
                    break;
                }
                let pos = drop_pos.expect("partial step always has a blocking constraint");
                self.drop_active(pos);
            }
        }
        Ok(self.solution())
    }

    fn solution(&self) -> QpSolution {
        let objective = 0.5 * self.x.iter().map(|v| v * v).sum::<f64>() + self.c.iter().zip(&self.x).map(|(a, b)| a * b).sum::<f64>();
        let min_residual = self.rows.residuals(&self.x).into_iter().fold(f64::INFINITY, f64::min);
        QpSolution {
            x: self.x.clone(),
            objective,
            active: self.active.clone(),
            multipliers: self.mult.clone(),
            iterations: self.iterations,
            min_residual,
        }
    }

    fn report(&self, p: usize) -> InfeasibilityReport {
        let mut v: Vec<ViolatedRow> = (0..self.rows.len())
            .filter_map(|i| {
                let r = self.rows.dot(i, &self.x) - self.rows.rhs[i];
                (r < 0.0).then(|| ViolatedRow { index: i, tag: self.rows.tags[i], residual: r })
            })
            .collect();
        v.sort_by(|a, b| a.residual.total_cmp(&b.residual));
        v.truncate(20);
        InfeasibilityReport { blocking_row: p, blocking_tag: self.rows.tags[p], most_violated: v }
    }
}

/// One-shot solve of `min 1/2 ||x||^2 + c^T x s.t. rows`.
pub fn solve_qp(n: usize, c: Vec<f64>, rows: SparseRows, opts: QpOptions) -> Result<QpSolution> {
    DualActiveSet::new(n, c, rows, opts).solve()
}
