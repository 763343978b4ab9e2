// SPDX-License-Identifier: MIT OR Apache-2.0

//! Dense convex quadratic programming with full dual recovery.
//!
//! Problems have the form
//!
//! ```text
//! minimize   ½ zᵀ P z + qᵀ z
//! subject to A_eq z  = b_eq      (multipliers λ)
//!            A_in z ≤ b_in      (multipliers μ ≥ 0)
//! ```
//!
//! with stationarity written as `P z + q + A_eqᵀ λ + A_inᵀ μ = 0`.
//!
//! The solver is a primal active-set method working in the null space of the
//! current working set. Phase 1 finds a feasible point by minimizing the
//! largest constraint violation (itself a linear program handled by the same
//! engine); phase 2 alternates Newton steps on the reduced problem with ratio
//! tests. Multipliers are least-norm solutions of the working-set stationarity
//! system, which keeps them well defined when `P` is only semidefinite or the
//! constraints are redundant. Constraint additions break ties by smallest
//! index and removals follow Bland's rule, so results are deterministic.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{amax, lstsq, null_space, select_rows, sym_eigen, vstack};

/// Default absolute-plus-relative solver tolerance.
pub const DEFAULT_TOL: f64 = 1e-9;

/// Relative factor of the binding classification tolerance.
pub const BINDING_RTOL: f64 = 1e-7;

/// Binding tolerance for a constraint with right-hand side `b`.
pub fn binding_tol(b: f64) -> f64 {
    BINDING_RTOL * (1.0 + b.abs())
}

/// A convex quadratic program.
#[derive(Debug, Clone, PartialEq)]
pub struct QpProblem {
    pub p: DMatrix<f64>,
    pub q: DVector<f64>,
    pub a_eq: DMatrix<f64>,
    pub b_eq: DVector<f64>,
    pub a_in: DMatrix<f64>,
    pub b_in: DVector<f64>,
}

impl QpProblem {
    /// Unconstrained problem `min ½ zᵀPz + qᵀz`.
    pub fn new(p: DMatrix<f64>, q: DVector<f64>) -> Self {
        let n = q.len();
        QpProblem {
            p,
            q,
            a_eq: DMatrix::zeros(0, n),
            b_eq: DVector::zeros(0),
            a_in: DMatrix::zeros(0, n),
            b_in: DVector::zeros(0),
        }
    }

    /// Replace the equality constraints.
    pub fn with_eq(mut self, a_eq: DMatrix<f64>, b_eq: DVector<f64>) -> Self {
        self.a_eq = a_eq;
        self.b_eq = b_eq;
        self
    }

    /// Replace the inequality constraints.
    pub fn with_in(mut self, a_in: DMatrix<f64>, b_in: DVector<f64>) -> Self {
        self.a_in = a_in;
        self.b_in = b_in;
        self
    }

    /// Number of variables.
    pub fn n(&self) -> usize {
        self.q.len()
    }

    /// Objective value at `z`.
    pub fn objective(&self, z: &DVector<f64>) -> f64 {
        0.5 * z.dot(&(&self.p * z)) + self.q.dot(z)
    }

    /// Check dimensions, symmetry and positive semidefiniteness.
    pub fn check(&self) -> Result<()> {
        let n = self.n();
        let dims_ok = self.p.nrows() == n
            && self.p.ncols() == n
            && self.a_eq.ncols() == n
            && self.a_eq.nrows() == self.b_eq.len()
            && self.a_in.ncols() == n
            && self.a_in.nrows() == self.b_in.len();
        if !dims_ok {
            return Err(Error::DimensionMismatch(format!(
                "QP with {n} variables: P is {}x{}, A_eq is {}x{} for {} rhs, A_in is {}x{} for {} rhs",
                self.p.nrows(),
                self.p.ncols(),
                self.a_eq.nrows(),
                self.a_eq.ncols(),
                self.b_eq.len(),
                self.a_in.nrows(),
                self.a_in.ncols(),
                self.b_in.len()
            )));
        }
        let finite = self.p.iter().all(|v| v.is_finite())
            && self.q.iter().all(|v| v.is_finite())
            && self.a_eq.iter().all(|v| v.is_finite())
            && self.b_eq.iter().all(|v| v.is_finite())
            && self.a_in.iter().all(|v| v.is_finite())
            && self.b_in.iter().all(|v| v.is_finite());
        if !finite {
            return Err(Error::Solver("QP data contains non-finite values".into()));
        }
        if n == 0 {
            return Ok(());
        }
        let pnorm = self.p.amax();
        let asym = (&self.p - self.p.transpose()).amax();
        if asym > 1e-12 * pnorm.max(1.0) {
            return Err(Error::Solver(format!("P is not symmetric (asymmetry {asym:e})")));
        }
        let floor = sym_eigen(&self.p).eigenvalues.min();
        if floor < -1e-9 * pnorm.max(1.0) {
            return Err(Error::Solver(format!("P is not positive semidefinite (eigenvalue {floor:e})")));
        }
        Ok(())
    }
}

/// Termination status of [`solve_qp`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub enum QpStatus {
    Optimal,
    Infeasible,
    Unbounded,
    MaxIter,
}

/// Primal-dual result of [`solve_qp`].
#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub z: DVector<f64>,
    pub lambda_eq: DVector<f64>,
    pub mu_in: DVector<f64>,
    pub objective: f64,
    pub status: QpStatus,
    /// Inequalities whose residual is within [`binding_tol`].
    pub active_set: Vec<usize>,
    /// Final working set of the active-set iteration (sorted).
    pub working_set: Vec<usize>,
    pub iterations: usize,
}

/// Residuals of the KKT conditions at a candidate primal-dual point.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct KktReport {
    pub stationarity_inf_norm: f64,
    pub primal_eq_inf_norm: f64,
    pub primal_in_violation: f64,
    pub comp_slack_inf_norm: f64,
    pub dual_feas_violation: f64,
}

impl KktReport {
    /// Largest of all residuals.
    pub fn max(&self) -> f64 {
        self.stationarity_inf_norm
            .max(self.primal_eq_inf_norm)
            .max(self.primal_in_violation)
            .max(self.comp_slack_inf_norm)
            .max(self.dual_feas_violation)
    }
}

/// Evaluate the KKT residuals of `sol` for `prob`.
pub fn verify_kkt(prob: &QpProblem, sol: &QpSolution) -> Result<KktReport> {
    let n = prob.n();
    if sol.z.len() != n
        || sol.lambda_eq.len() != prob.b_eq.len()
        || sol.mu_in.len() != prob.b_in.len()
        || prob.a_eq.ncols() != n
        || prob.a_in.ncols() != n
        || prob.p.nrows() != n
    {
        return Err(Error::DimensionMismatch(
            "solution and problem dimensions disagree".into(),
        ));
    }
    let stat = &prob.p * &sol.z
        + &prob.q
        + prob.a_eq.transpose() * &sol.lambda_eq
        + prob.a_in.transpose() * &sol.mu_in;
    let eq = &prob.a_eq * &sol.z - &prob.b_eq;
    let slack = &prob.b_in - &prob.a_in * &sol.z;
    let viol = slack.iter().fold(0.0_f64, |acc, &s| acc.max(-s));
    let cs = slack
        .iter()
        .zip(sol.mu_in.iter())
        .fold(0.0_f64, |acc, (s, m)| acc.max((s * m).abs()));
    let dual = sol.mu_in.iter().fold(0.0_f64, |acc, &m| acc.max(-m));
    Ok(KktReport {
        stationarity_inf_norm: amax(&stat),
        primal_eq_inf_norm: amax(&eq),
        primal_in_violation: viol,
        comp_slack_inf_norm: cs,
        dual_feas_violation: dual,
    })
}

/// Solve a convex QP.
///
/// Returns `Err` only for malformed problems (dimension mismatch, non-finite
/// data, asymmetric or indefinite `P`); numerical outcomes are reported through
/// [`QpSolution::status`].
pub fn solve_qp(prob: &QpProblem, tol: f64) -> Result<QpSolution> {
    prob.check()?;
    let n = prob.n();
    let m = prob.b_in.len();
    let p_eq = prob.b_eq.len();
    let max_iter = 50 * (n + m).max(1);

    let infeasible = |z: DVector<f64>, iterations| QpSolution {
        objective: prob.objective(&z),
        z,
        lambda_eq: DVector::zeros(p_eq),
        mu_in: DVector::zeros(m),
        status: QpStatus::Infeasible,
        active_set: Vec::new(),
        working_set: Vec::new(),
        iterations,
    };

    // Least-norm point of the equality constraints.
    let z0 = if p_eq > 0 {
        lstsq(&prob.a_eq, &prob.b_eq).0
    } else {
        DVector::zeros(n)
    };
    if p_eq > 0 {
        let r = amax(&(&prob.a_eq * &z0 - &prob.b_eq));
        if r > tol * (1.0 + amax(&prob.b_eq)) {
            return Ok(infeasible(z0, 0));
        }
    }

    // Phase 1: minimize the largest violation t over (z, t).
    let mut iterations = 0;
    let viol0 = (0..m)
        .map(|i| prob.a_in.row(i).transpose().dot(&z0) - prob.b_in[i])
        .fold(0.0_f64, f64::max);
    let start = if viol0 > 0.0 {
        let mut a_in1 = DMatrix::zeros(m + 1, n + 1);
        a_in1.view_mut((0, 0), (m, n)).copy_from(&prob.a_in);
        for i in 0..m {
            a_in1[(i, n)] = -1.0;
        }
        a_in1[(m, n)] = -1.0;
        let mut b_in1 = DVector::zeros(m + 1);
        b_in1.rows_mut(0, m).copy_from(&prob.b_in);
        let mut a_eq1 = DMatrix::zeros(p_eq, n + 1);
        a_eq1.view_mut((0, 0), (p_eq, n)).copy_from(&prob.a_eq);
        let mut q1 = DVector::zeros(n + 1);
        q1[n] = 1.0;
        let mut w0 = DVector::zeros(n + 1);
        w0.rows_mut(0, n).copy_from(&z0);
        w0[n] = viol0;
        let lp = Core {
            p: DMatrix::zeros(n + 1, n + 1),
            q: q1,
            a_eq: a_eq1,
            a_in: a_in1,
            b_in: b_in1,
            tol,
        };
        let res = lp.run(w0, 50 * (n + m + 2));
        iterations += res.iterations;
        let t = res.z[n];
        if res.status != QpStatus::Optimal || t > tol * (1.0 + amax(&prob.b_in)) {
            return Ok(infeasible(res.z.rows(0, n).into_owned(), iterations));
        }
        res.z.rows(0, n).into_owned()
    } else {
        z0
    };

    // Phase 2.
    let core = Core {
        p: prob.p.clone(),
        q: prob.q.clone(),
        a_eq: prob.a_eq.clone(),
        a_in: prob.a_in.clone(),
        b_in: prob.b_in.clone(),
        tol,
    };
    let res = core.run(start, max_iter);
    iterations += res.iterations;

    let z = res.z;
    let active_set = (0..m)
        .filter(|&i| prob.b_in[i] - prob.a_in.row(i).transpose().dot(&z) <= binding_tol(prob.b_in[i]))
        .collect();
    Ok(QpSolution {
        objective: prob.objective(&z),
        z,
        lambda_eq: res.lambda_eq,
        mu_in: res.mu_in,
        status: res.status,
        active_set,
        working_set: res.working_set,
        iterations,
    })
}

/// Problem data for one phase of the active-set iteration.
struct Core {
    p: DMatrix<f64>,
    q: DVector<f64>,
    a_eq: DMatrix<f64>,
    a_in: DMatrix<f64>,
    b_in: DVector<f64>,
    tol: f64,
}

struct CoreResult {
    z: DVector<f64>,
    lambda_eq: DVector<f64>,
    mu_in: DVector<f64>,
    status: QpStatus,
    working_set: Vec<usize>,
    iterations: usize,
}

impl Core {
    /// Primal active-set iteration from a feasible starting point.
    fn run(&self, mut z: DVector<f64>, max_iter: usize) -> CoreResult {
        let n = z.len();
        let m = self.b_in.len();
        let p_eq = self.a_eq.nrows();
        let pnorm = if n > 0 { self.p.amax() } else { 0.0 };
        let curv_tol = 1e-10 * pnorm.max(1.0);
        let mut working: Vec<usize> = Vec::new();

        for iter in 0..max_iter {
            let g = &self.p * &z + &self.q;
            let gscale = 1.0 + amax(&g);
            let n_mat = vstack(&self.a_eq, &select_rows(&self.a_in, &working));
            let zb = null_space(&n_mat, n);

            // Search direction in the null space of the working set.
            let mut direction: Option<(DVector<f64>, bool)> = None;
            if zb.ncols() > 0 {
                let gr = zb.transpose() * &g;
                let hr = zb.transpose() * &self.p * &zb;
                let eig = sym_eigen(&hr);
                let (mut flat, mut curved) = (Vec::new(), Vec::new());
                for (k, &ev) in eig.eigenvalues.iter().enumerate() {
                    if ev <= curv_tol {
                        flat.push(k);
                    } else {
                        curved.push(k);
                    }
                }
                let stat_tol = (1e-3 * self.tol).max(1e-14 * gscale);
                let mut flat_dir = DVector::zeros(zb.ncols());
                for &k in &flat {
                    let u = eig.eigenvectors.column(k);
                    flat_dir -= u * u.dot(&gr);
                }
                if amax(&flat_dir) > stat_tol {
                    // Zero curvature with a descent component: move until blocked.
                    direction = Some((&zb * flat_dir, true));
                } else {
                    let mut newton = DVector::zeros(zb.ncols());
                    for &k in &curved {
                        let u = eig.eigenvectors.column(k);
                        newton -= u * (u.dot(&gr) / eig.eigenvalues[k]);
                    }
                    let d = &zb * newton;
                    if amax(&gr) > stat_tol && amax(&d) > 1e-15 * (1.0 + amax(&z)) {
                        direction = Some((d, false));
                    }
                }
            }

            match direction {
                Some((d, unbounded_ray)) => {
                    // Ratio test; strict comparison keeps the smallest index on ties.
                    let dnorm = amax(&d);
                    let mut step = if unbounded_ray { f64::INFINITY } else { 1.0 };
                    let mut blocking = None;
                    for i in 0..m {
                        if working.contains(&i) {
                            continue;
                        }
                        let row = self.a_in.row(i);
                        let ad = row.transpose().dot(&d);
                        if ad <= 1e-12 * row.amax().max(1e-300) * dnorm {
                            continue;
                        }
                        let slack = (self.b_in[i] - row.transpose().dot(&z)).max(0.0);
                        let t = slack / ad;
                        if t < step {
                            step = t;
                            blocking = Some(i);
                        }
                    }
                    if step.is_infinite() {
                        return CoreResult {
                            z,
                            lambda_eq: DVector::zeros(p_eq),
                            mu_in: DVector::zeros(m),
                            status: QpStatus::Unbounded,
                            working_set: sorted(working),
                            iterations: iter + 1,
                        };
                    }
                    z += d * step;
                    if let Some(i) = blocking {
                        working.push(i);
                    }
                }
                None => {
                    // Subspace minimizer: least-norm multipliers of Nᵀy = −g.
                    let y = -lstsq(&n_mat.transpose(), &g).0;
                    let drop_tol = 0.1 * self.tol * (1.0 + 1e-3 * gscale);
                    let drop = working
                        .iter()
                        .enumerate()
                        .filter(|(k, _)| y[p_eq + k] < -drop_tol)
                        .map(|(k, &i)| (i, k))
                        .min();
                    match drop {
                        Some((_, k)) => {
                            working.remove(k);
                        }
                        None => {
                            let mut mu = DVector::zeros(m);
                            for (k, &i) in working.iter().enumerate() {
                                mu[i] = y[p_eq + k].max(0.0);
                            }
                            return CoreResult {
                                z,
                                lambda_eq: y.rows(0, p_eq).into_owned(),
                                mu_in: mu,
                                status: QpStatus::Optimal,
                                working_set: sorted(working),
                                iterations: iter + 1,
                            };
                        }
                    }
                }
            }
        }
        CoreResult {
            z,
            lambda_eq: DVector::zeros(p_eq),
            mu_in: DVector::zeros(m),
            status: QpStatus::MaxIter,
            working_set: sorted(working),
            iterations: max_iter,
        }
    }
}

fn sorted(mut v: Vec<usize>) -> Vec<usize> {
    v.sort_unstable();
    v
}
