//! Dense convex QP solver.
//!
//! Solves
//!
//! ```text
//! minimize    ½ xᵀHx + gᵀx
//! subject to  Cx ≤ d
//! ```
//!
//! with `H` symmetric positive definite, by a primal active-set method in
//! range-space form. With `H = LLᵀ` and `V = L⁻¹Cᵀ`, the equality-constrained
//! subproblem on a working set `W` has multipliers
//! `μ = -(V_WᵀV_W)⁻¹ (d_W + V_Wᵀ L⁻¹g)` and minimizer
//! `x = -L⁻ᵀ(L⁻¹g + V_W μ)`. Columns of `V` are only computed for rows that
//! enter the working set. The working set can be warm-started.
//!
//! When the starting point is infeasible, a phase-one problem with one extra
//! elastic variable is solved first by the same machinery.

use nalgebra::{Cholesky, DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QpError {
    #[error("QP Hessian is not positive definite")]
    NotConvex,
    #[error("QP constraints are infeasible (residual violation {0:e})")]
    Infeasible(f64),
    #[error("active-set iteration limit reached")]
    IterationLimit,
    #[error("dimension mismatch: {0}")]
    Dimension(String),
}

#[derive(Debug, Clone)]
pub struct Qp {
    pub hessian: DMatrix<f64>,
    pub gradient: DVector<f64>,
    /// Rows `c_i` of `Cx ≤ d`.
    pub constraints: DMatrix<f64>,
    pub bounds: DVector<f64>,
}

impl Qp {
    pub fn num_vars(&self) -> usize {
        self.gradient.len()
    }

    pub fn num_rows(&self) -> usize {
        self.bounds.len()
    }

    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.hessian * x)) + self.gradient.dot(x)
    }

    /// Largest `c_iᵀx - d_i`, or 0 without rows.
    pub fn max_violation(&self, x: &DVector<f64>) -> f64 {
        if self.num_rows() == 0 {
            return 0.0;
        }
        (&self.constraints * x - &self.bounds).max().max(0.0)
    }

    fn check(&self) -> Result<(), QpError> {
        let n = self.num_vars();
        if self.hessian.shape() != (n, n) {
            return Err(QpError::Dimension(format!("hessian is {:?}, expected ({n}, {n})", self.hessian.shape())));
        }
        if self.constraints.shape() != (self.num_rows(), n) {
            return Err(QpError::Dimension(format!(
                "constraints are {:?}, expected ({}, {n})",
                self.constraints.shape(),
                self.num_rows()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub x: DVector<f64>,
    /// One multiplier per constraint row, zero for inactive rows.
    pub multipliers: DVector<f64>,
    /// Final working set, usable as the next warm start.
    pub active_set: Vec<usize>,
    pub iterations: usize,
    pub objective: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct ActiveSetSolver {
    pub max_iterations: usize,
    /// Absolute feasibility tolerance on `Cx ≤ d`.
    pub feasibility_tol: f64,
    /// Multipliers above `-dual_tol` are accepted as nonnegative.
    pub dual_tol: f64,
}

impl Default for ActiveSetSolver {
    fn default() -> Self {
        Self {
            max_iterations: 2000,
            feasibility_tol: 1e-9,
            dual_tol: 1e-10,
        }
    }
}

/// Cholesky factor of `H` that exploits a diagonal trailing block: `H` is
/// dense on the leading `dense` variables and diagonal after them.
struct Factor {
    dense: usize,
    lead: DMatrix<f64>,
    tail_sqrt: DVector<f64>,
}

impl Factor {
    fn new(h: &DMatrix<f64>) -> Result<Self, QpError> {
        let n = h.nrows();
        let mut dense = n;
        while dense > 0 {
            let j = dense - 1;
            let coupled = (0..n).any(|i| i != j && (h[(i, j)] != 0.0 || h[(j, i)] != 0.0));
            if coupled {
                break;
            }
            dense -= 1;
        }
        let lead = if dense > 0 {
            Cholesky::new(h.view((0, 0), (dense, dense)).into_owned())
                .ok_or(QpError::NotConvex)?
                .unpack()
        } else {
            DMatrix::zeros(0, 0)
        };
        let mut tail_sqrt = DVector::zeros(n - dense);
        for i in dense..n {
            let d = h[(i, i)];
            if !(d > 0.0) {
                return Err(QpError::NotConvex);
            }
            tail_sqrt[i - dense] = d.sqrt();
        }
        Ok(Self { dense, lead, tail_sqrt })
    }

    /// `L⁻¹ b`
    fn forward(&self, b: &DVector<f64>) -> DVector<f64> {
        let mut out = b.clone();
        // leading zeros of `b` stay zero, so only the trailing block is solved
        let first = b.iter().position(|&v| v != 0.0).unwrap_or(b.len());
        if first < self.dense {
            let size = self.dense - first;
            let mut head = out.rows_mut(first, size);
            self.lead.view((first, first), (size, size)).solve_lower_triangular_mut(&mut head);
        }
        for (i, d) in self.tail_sqrt.iter().enumerate() {
            out[self.dense + i] /= d;
        }
        out
    }

    /// `L⁻ᵀ b`
    fn backward(&self, b: &DVector<f64>) -> DVector<f64> {
        let mut out = b.clone();
        if self.dense > 0 {
            let mut head = out.rows_mut(0, self.dense);
            self.lead.tr_solve_lower_triangular_mut(&mut head);
        }
        for (i, d) in self.tail_sqrt.iter().enumerate() {
            out[self.dense + i] /= d;
        }
        out
    }
}

impl ActiveSetSolver {
    /// Solves `qp` starting from `x0` (zeros when `None`) with `warm_active`
    /// as the initial working-set candidate.
    pub fn solve(&self, qp: &Qp, x0: Option<&DVector<f64>>, warm_active: &[usize]) -> Result<QpSolution, QpError> {
        qp.check()?;
        let n = qp.num_vars();
        let start = match x0 {
            Some(x) if x.len() == n => x.clone(),
            Some(x) => return Err(QpError::Dimension(format!("start has {} entries, expected {n}", x.len()))),
            None => DVector::zeros(n),
        };
        let factor = Factor::new(&qp.hessian)?;

        let start = if qp.max_violation(&start) > self.feasibility_tol {
            self.phase_one(qp, &start)?
        } else {
            start
        };
        self.run(qp, &factor, start, warm_active)
    }

    fn phase_one(&self, qp: &Qp, x0: &DVector<f64>) -> Result<DVector<f64>, QpError> {
        let n = qp.num_vars();
        let m = qp.num_rows();
        let eps = 1e-6;
        let t0 = qp.max_violation(x0) + 1.0;

        // variables (x, t): min ε/2 ‖x - x0‖² + t + ε/2 t²  s.t. Cx - t ≤ d, -t ≤ 0
        let mut hessian = DMatrix::identity(n + 1, n + 1) * eps;
        hessian[(n, n)] = eps;
        let mut gradient = DVector::zeros(n + 1);
        gradient.rows_mut(0, n).copy_from(&(x0 * -eps));
        gradient[n] = 1.0;
        let mut constraints = DMatrix::zeros(m + 1, n + 1);
        constraints.view_mut((0, 0), (m, n)).copy_from(&qp.constraints);
        for i in 0..m {
            constraints[(i, n)] = -1.0;
        }
        constraints[(m, n)] = -1.0;
        let mut bounds = DVector::zeros(m + 1);
        bounds.rows_mut(0, m).copy_from(&qp.bounds);
        let aux = Qp {
            hessian,
            gradient,
            constraints,
            bounds,
        };
        let mut start = DVector::zeros(n + 1);
        start.rows_mut(0, n).copy_from(x0);
        start[n] = t0;
        let sol = self.run(&aux, &Factor::new(&aux.hessian)?, start, &[])?;
        let x = sol.x.rows(0, n).into_owned();
        let violation = qp.max_violation(&x);
        if violation > self.feasibility_tol {
            return Err(QpError::Infeasible(violation));
        }
        Ok(x)
    }

    fn run(&self, qp: &Qp, factor: &Factor, mut x: DVector<f64>, warm_active: &[usize]) -> Result<QpSolution, QpError> {
        let m = qp.num_rows();
        let q = factor.forward(&qp.gradient);
        let ct = qp.constraints.transpose();
        let row = |i: usize| -> DVector<f64> { ct.column(i).into_owned() };
        let row_norms: Vec<f64> = (0..m).map(|i| ct.column(i).norm()).collect();

        // row activities `Cx`, updated along each step
        let mut cx = ct.tr_mul(&x);
        let mut ws = WorkingSet::new(m);
        // rows found numerically dependent on the working set; never re-added
        let mut skipped = vec![false; m];

        for &i in warm_active {
            if i >= m || ws.contains(i) {
                continue;
            }
            let resid = cx[i] - qp.bounds[i];
            if resid.abs() <= self.feasibility_tol * (1.0 + qp.bounds[i].abs()) + 1e-12 {
                ws.try_add(i, factor.forward(&row(i)));
            }
        }

        let mut iterations = 0;
        loop {
            iterations += 1;
            if iterations > self.max_iterations {
                return Err(QpError::IterationLimit);
            }

            let (x_eq, mu) = ws.equality_solution(factor, &q, &qp.bounds)?;
            let p = &x_eq - &x;
            let scale = 1.0 + x.amax();
            if p.amax() <= 1e-12 * scale {
                cx += ct.tr_mul(&p);
                x = x_eq;
                // drop the most negative multiplier, lowest row index on ties
                let mut drop: Option<(usize, f64)> = None;
                for (k, &val) in mu.iter().enumerate() {
                    if val < -self.dual_tol && drop.is_none_or(|(_, best)| val < best) {
                        drop = Some((k, val));
                    }
                }
                match drop {
                    Some((k, _)) => {
                        ws.remove_at(k);
                        continue;
                    }
                    None => {
                        let mut multipliers = DVector::zeros(m);
                        for (k, &i) in ws.rows.iter().enumerate() {
                            multipliers[i] = mu[k];
                        }
                        let objective = qp.objective(&x);
                        return Ok(QpSolution {
                            x,
                            multipliers,
                            active_set: ws.rows.clone(),
                            iterations,
                            objective,
                        });
                    }
                }
            }

            let p_norm = p.norm();
            let mut alpha = 1.0;
            let mut blocking = None;
            let cp_all = ct.tr_mul(&p);
            for i in 0..m {
                if skipped[i] || ws.contains(i) {
                    continue;
                }
                let cp = cp_all[i];
                if cp <= 1e-13 * row_norms[i] * p_norm {
                    continue;
                }
                let slack = (qp.bounds[i] - cx[i]).max(0.0);
                let t = slack / cp;
                if t < alpha {
                    alpha = t;
                    blocking = Some(i);
                }
            }
            x.axpy(alpha, &p, 1.0);
            cx.axpy(alpha, &cp_all, 1.0);
            if let Some(i) = blocking {
                if !ws.try_add(i, factor.forward(&row(i))) {
                    skipped[i] = true;
                }
            }
        }
    }
}

/// Working-set rows with their `L⁻¹c_i` columns and the lower Cholesky
/// factor `R` of the Gram matrix `S = V_WᵀV_W = RRᵀ`.
struct WorkingSet {
    rows: Vec<usize>,
    member: Vec<bool>,
    cols: Vec<DVector<f64>>,
    gram_factor: DMatrix<f64>,
}

impl WorkingSet {
    fn new(m: usize) -> Self {
        Self {
            rows: Vec::new(),
            member: vec![false; m],
            cols: Vec::new(),
            gram_factor: DMatrix::zeros(0, 0),
        }
    }

    fn contains(&self, i: usize) -> bool {
        self.member[i]
    }

    /// Adds row `i` unless it is numerically dependent on the current set.
    fn try_add(&mut self, i: usize, v: DVector<f64>) -> bool {
        let k = self.rows.len();
        let vv = v.dot(&v);
        if !(vv > 0.0) {
            return false;
        }
        let mut y = DVector::from_fn(k, |j, _| self.cols[j].dot(&v));
        if k > 0 && !self.gram_factor.solve_lower_triangular_mut(&mut y) {
            return false;
        }
        // Schur complement of the new row against the existing set
        let schur = vv - y.dot(&y);
        if schur <= 1e-10 * vv {
            return false;
        }
        let mut r = std::mem::replace(&mut self.gram_factor, DMatrix::zeros(0, 0)).resize(k + 1, k + 1, 0.0);
        for j in 0..k {
            r[(k, j)] = y[j];
        }
        r[(k, k)] = schur.sqrt();
        self.gram_factor = r;
        self.rows.push(i);
        self.member[i] = true;
        self.cols.push(v);
        true
    }

    fn remove_at(&mut self, k: usize) {
        let i = self.rows.remove(k);
        self.member[i] = false;
        self.cols.remove(k);
        let n = self.rows.len();
        // dropping row k of R leaves RRᵀ intact; Givens rotations on column
        // pairs restore the lower-triangular shape
        let mut r = std::mem::replace(&mut self.gram_factor, DMatrix::zeros(0, 0)).remove_row(k);
        for j in k..n {
            let (a, b) = (r[(j, j)], r[(j, j + 1)]);
            let h = a.hypot(b);
            let (c, s) = if h > 0.0 { (a / h, b / h) } else { (1.0, 0.0) };
            for i in j..n {
                let (x, y) = (r[(i, j)], r[(i, j + 1)]);
                r[(i, j)] = c * x + s * y;
                r[(i, j + 1)] = -s * x + c * y;
            }
        }
        self.gram_factor = r.remove_column(n);
    }

    fn equality_solution(
        &self,
        factor: &Factor,
        q: &DVector<f64>,
        bounds: &DVector<f64>,
    ) -> Result<(DVector<f64>, DVector<f64>), QpError> {
        let k = self.rows.len();
        let mut z = q.clone();
        if k == 0 {
            return Ok((-factor.backward(&z), DVector::zeros(0)));
        }
        let mut mu = DVector::from_fn(k, |j, _| -(bounds[self.rows[j]] + self.cols[j].dot(q)));
        if !self.gram_factor.solve_lower_triangular_mut(&mut mu)
            || !self.gram_factor.tr_solve_lower_triangular_mut(&mut mu)
        {
            return Err(QpError::NotConvex);
        }
        for (j, c) in self.cols.iter().enumerate() {
            z.axpy(mu[j], c, 1.0);
        }
        Ok((-factor.backward(&z), mu))
    }
}
