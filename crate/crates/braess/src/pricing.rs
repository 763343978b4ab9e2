// SPDX-License-Identifier: MIT OR Apache-2.0

//! Charging-price policies that mitigate Braess' paradox.
//!
//! Travelers normally pay the LMP of the bus they charge at. This module
//! replaces that pass-through price with
//!
//! * three adaptive, system-optimal policies whose equilibria minimize `Φ_T`,
//!   `Φ_P` or `Φ_C`. Each equilibrium is computed by solving the auxiliary
//!   optimization program directly. The supporting route prices are
//!   reported by [`policy_prices`]:
//!
//!   ```text
//!   Π_T = Ãx,   Π_P = π(λ) − Ãx − Aᵀβ,   Π_C = Ãx + π(λ)
//!   ```
//!
//!   where `Ã = Aᵀdiag(α)A` and `π(λ) = ρBᵀλ` is the LMP pass-through price;
//! * static prices `Π`, which decouple route choice from the grid.
//!
//! Under static prices the equilibrium is piecewise affine in `Π`:
//! `x(Π) = KΠ + v` and `λ(Π) = CΠ + w` on each *critical region* (set of prices
//! sharing one binding pattern). [`critical_region`] assembles these maps
//! and the region's linear inequalities. [`eliminate_bp_static`] searches a
//! region for prices that remove every transportation BP while collecting a
//! minimum revenue. [`region_walk`] samples regions inside a price box.

use std::collections::HashSet;
use std::fmt;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

use crate::equilibrium::{
    classify, economic_dispatch_with, solve_gue_with, solve_joint, transport_ue_groups, ue_problem, BindingPattern,
    FlowObjective, GueSolution,
};
use crate::error::{Error, Result};
use crate::linalg::{amax, condition_number, sym_eigen};
use crate::metrics::{
    assemble_report, derivative_fd_with, screen_fd_with, social_costs, BpReport, Method, SensitivityRow, Settings,
};
use crate::model::{charging_load, CoupledSystem, Parameter};
use crate::qp::{solve_qp, QpProblem, QpStatus, DEFAULT_TOL};

/// Tolerance on the normalized constraint slacks of the BP-elimination
/// program.
pub const MITIGATION_TOL: f64 = 1e-7;

/// Iteration cap of the BP-elimination search.
const MAX_BUNDLE_ITER: usize = 200;

/// Largest condition number accepted for the reduced systems of a region.
const REGION_COND_MAX: f64 = 1e12;

/// Residual allowed when the region maps are checked against direct solves.
const REGION_RESIDUAL_MAX: f64 = 1e-6;

/// How travelers are charged.
#[derive(Debug, Clone, PartialEq)]
pub enum PricingPolicy {
    /// Pay the LMP of the charging bus (the plain GUE).
    LmpPassThrough,
    /// Fixed route prices.
    Static(DVector<f64>),
    /// Adaptive prices whose equilibrium minimizes total travel cost.
    OptT,
    /// Adaptive prices whose equilibrium minimizes generation cost.
    OptP,
    /// Adaptive prices whose equilibrium minimizes travel plus generation
    /// cost.
    OptC,
}

impl fmt::Display for PricingPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PricingPolicy::LmpPassThrough => "lmp",
            PricingPolicy::Static(_) => "static",
            PricingPolicy::OptT => "opt-t",
            PricingPolicy::OptP => "opt-p",
            PricingPolicy::OptC => "opt-c",
        })
    }
}

/// GUE induced by `policy`, at the default solver tolerance.
pub fn gue_under_policy(sys: &CoupledSystem, policy: &PricingPolicy) -> Result<GueSolution> {
    gue_under_policy_with(sys, policy, DEFAULT_TOL)
}

/// GUE induced by `policy`.
///
/// `route_cost` of the result is the travel cost plus the policy price, so
/// the UE condition holds for it. `nu` and `xi` are measured in the same
/// cost. `OptT` routes travelers without regard to the grid and may
/// therefore fail with `INFEASIBLE_DISPATCH`.
pub fn gue_under_policy_with(sys: &CoupledSystem, policy: &PricingPolicy, tol: f64) -> Result<GueSolution> {
    let a = sys.transport.route_cost_matrix();
    let free = sys.transport.route_free_cost();
    let mut gue = match policy {
        PricingPolicy::LmpPassThrough => return solve_gue_with(sys, tol),
        PricingPolicy::Static(pi) => {
            check_prices(sys, pi)?;
            let ue = transport_ue_groups(&sys.transport, pi, &sys.demand_groups(), tol)?;
            dispatch_at_flows(sys, clean_flows(sys, ue.x), ue.nu, ue.xi, tol)?
        }
        PricingPolicy::OptT => {
            let prob = ue_problem(&(&a + a.transpose()), &free, &sys.demand_groups());
            let sol = solve_qp(&prob, tol)?;
            if sol.status != QpStatus::Optimal {
                return Err(Error::Solver(format!("travel-cost program ended with status {:?}", sol.status)));
            }
            let nu = sol.lambda_eq.iter().map(|l| -l).collect();
            dispatch_at_flows(sys, clean_flows(sys, sol.z), nu, sol.mu_in, tol)?
        }
        PricingPolicy::OptP => {
            let n = sys.n_routes();
            let flow = FlowObjective {
                quad: DMatrix::zeros(n, n),
                lin: DVector::zeros(n),
            };
            solve_joint(sys, &flow, tol)?
        }
        PricingPolicy::OptC => {
            let flow = FlowObjective {
                quad: &a + a.transpose(),
                lin: free,
            };
            solve_joint(sys, &flow, tol)?
        }
    };
    let prices = policy_prices(sys, &gue, policy);
    gue.route_cost = sys.transport.travel_costs(&gue.x) + prices;
    Ok(gue)
}

fn check_prices(sys: &CoupledSystem, pi: &DVector<f64>) -> Result<()> {
    if pi.len() != sys.n_routes() {
        return Err(Error::DimensionMismatch(format!(
            "price vector has {} entries for {} routes",
            pi.len(),
            sys.n_routes()
        )));
    }
    if pi.iter().any(|p| !p.is_finite()) {
        return Err(Error::InvalidRange("static prices must be finite".into()));
    }
    Ok(())
}

/// Zero the flows of groups without demand (solver residue).
fn clean_flows(sys: &CoupledSystem, mut x: DVector<f64>) -> DVector<f64> {
    for (routes, demand) in sys.demand_groups() {
        if demand == 0.0 {
            routes.into_iter().for_each(|r| x[r] = 0.0);
        }
    }
    x
}

/// Dispatch the charging load of fixed route flows and classify the result.
fn dispatch_at_flows(
    sys: &CoupledSystem,
    x: DVector<f64>,
    nu: Vec<f64>,
    xi: DVector<f64>,
    tol: f64,
) -> Result<GueSolution> {
    let pw = &sys.power;
    let d = charging_load(sys, &x, true)?;
    let dispatch = economic_dispatch_with(pw, &d, tol)?;
    let nonneg: Vec<usize> = if pw.enforce_nonneg_gen {
        (0..sys.n_buses()).filter(|&i| pw.generator_mask[i]).collect()
    } else {
        Vec::new()
    };
    let gen_mult: Vec<f64> = nonneg
        .iter()
        .map(|&i| pw.q_diag[i] * dispatch.g[i] + pw.mu[i] - dispatch.lambda[i])
        .collect();
    let binding = classify(sys, &x, &dispatch, &xi, &nonneg, &gen_mult);
    let route_cost = sys.transport.travel_costs(&x);
    Ok(GueSolution {
        x,
        dispatch,
        nu,
        xi,
        route_cost,
        binding,
        warnings: Vec::new(),
    })
}

/// Route prices of `policy` evaluated at the equilibrium `gue`.
///
/// For the adaptive policies, re-solving the transportation UE at these
/// (now fixed) prices returns the flows of `gue`.
pub fn policy_prices(sys: &CoupledSystem, gue: &GueSolution, policy: &PricingPolicy) -> DVector<f64> {
    let a = sys.transport.route_cost_matrix();
    let lmp_price = sys.route_charging_price(&gue.dispatch.lambda);
    match policy {
        PricingPolicy::LmpPassThrough => lmp_price,
        PricingPolicy::Static(pi) => pi.clone(),
        PricingPolicy::OptT => &a * &gue.x,
        PricingPolicy::OptP => lmp_price - &a * &gue.x - sys.transport.route_free_cost(),
        PricingPolicy::OptC => &a * &gue.x + lmp_price,
    }
}

/// BP screen of every capacity parameter under `policy`.
///
/// The adaptive policies are screened by finite differences of
/// [`gue_under_policy_with`]. Static prices also get exact rows from
/// [`static_derivative_kkt`], which decide the verdicts where available.
pub fn screen_under_policy(sys: &CoupledSystem, policy: &PricingPolicy, settings: &Settings) -> BpReport {
    let tol = settings.tol;
    let solver = |s: &CoupledSystem| gue_under_policy_with(s, policy, tol);
    let PricingPolicy::Static(_) = policy else {
        return screen_fd_with(sys, settings, &solver);
    };
    let base = solver(sys);
    let per_param = sys
        .capacity_parameters()
        .par_iter()
        .map(|&p| {
            let kkt = match &base {
                Ok(g) => static_derivative_kkt(sys, g, p),
                Err(e) => Err(e.clone()),
            };
            (p, vec![kkt, derivative_fd_with(sys, p, settings.fd_step, &solver)])
        })
        .collect();
    assemble_report(per_param)
}

/// Exact derivative of the social costs under static prices `pi`.
///
/// Line capacities do not enter route choice, so `∂Φ_T/∂f̄ = 0` exactly and
/// `∂Φ_P/∂f̄` is minus the line's flow multipliers. For a link slope,
/// `∂x/∂α_ℓ = y_ℓ K a_ℓ` (`a_ℓ` the link's route incidence, `y_ℓ` its flow)
/// and `∂Φ_P/∂α_ℓ = π(λ)ᵀ∂x/∂α_ℓ`.
pub fn static_derivative_kkt(sys: &CoupledSystem, gue: &GueSolution, param: Parameter) -> Result<SensitivityRow> {
    if gue.binding.degenerate {
        return Err(Error::DegeneratePattern(format!(
            "binding pattern at {param} is degenerate (a binding constraint has a zero multiplier)"
        )));
    }
    let theta = sys.parameter_value(param)?;
    let (dphi_t, dphi_p) = match param {
        Parameter::Fbar(l) => {
            let eta: f64 = sys.power.rows_of_line(l).iter().map(|&r| gue.dispatch.eta[r]).sum();
            (0.0, -eta)
        }
        Parameter::Alpha(l) => {
            let maps = TransportMaps::new(sys, &gue.binding.zero_routes)?;
            let a_l = link_incidence(sys, l);
            let y = a_l.dot(&gue.x);
            let dx = &maps.x.m * &a_l * y;
            let marginal = sys.transport.route_cost_matrix() * &gue.x * 2.0 + sys.transport.route_free_cost();
            let dphi_t = y * y + marginal.dot(&dx);
            let dphi_p = sys.route_charging_price(&gue.dispatch.lambda).dot(&dx);
            (dphi_t, dphi_p)
        }
        Parameter::Rho | Parameter::QScale => {
            return Err(Error::Precondition(format!(
                "exact static-price derivatives cover capacity parameters only, not {param}"
            )))
        }
    };
    Ok(SensitivityRow {
        parameter: param,
        theta,
        costs: social_costs(sys, gue),
        dphi_t,
        dphi_p,
        dphi_c: dphi_t + dphi_p,
        method: Method::Kkt,
        at_region_boundary: false,
        side_residual: None,
    })
}

/// Route incidence of link `l` (row `l` of the link-route matrix).
fn link_incidence(sys: &CoupledSystem, l: usize) -> DVector<f64> {
    sys.transport.link_route.row(l).transpose()
}

// ---------------------------------------------------------------------------
// Critical regions
// ---------------------------------------------------------------------------

/// Affine map `Π ↦ mΠ + c`.
#[derive(Debug, Clone, PartialEq)]
pub struct Affine {
    pub m: DMatrix<f64>,
    pub c: DVector<f64>,
}

impl Affine {
    fn zeros(rows: usize, n: usize) -> Self {
        Affine {
            m: DMatrix::zeros(rows, n),
            c: DVector::zeros(rows),
        }
    }

    /// Value at `pi`.
    pub fn eval(&self, pi: &DVector<f64>) -> DVector<f64> {
        &self.m * pi + &self.c
    }

    /// `self` followed by the linear map `t`.
    fn then(&self, t: &DMatrix<f64>) -> Affine {
        Affine {
            m: t * &self.m,
            c: t * &self.c,
        }
    }

    /// Stack the rows of several maps.
    fn stack(parts: &[Affine], n: usize) -> Affine {
        let rows: usize = parts.iter().map(|p| p.c.len()).sum();
        let mut out = Affine::zeros(rows, n);
        let mut at = 0;
        for p in parts {
            let k = p.c.len();
            out.m.view_mut((at, 0), (k, n)).copy_from(&p.m);
            out.c.rows_mut(at, k).copy_from(&p.c);
            at += k;
        }
        out
    }
}

/// Solve `kkt·z = rhs(Π)` for a square, well-conditioned `kkt`, with one
/// step of iterative refinement.
fn solve_affine(kkt: &DMatrix<f64>, rhs: &Affine) -> Affine {
    let lu = kkt.clone().full_piv_lu();
    let solve = |b: &DMatrix<f64>| {
        let mut z = lu.solve(b).unwrap_or_else(|| DMatrix::zeros(b.nrows(), b.ncols()));
        let r = b - kkt * &z;
        if let Some(dz) = lu.solve(&r) {
            z += dz;
        }
        z
    };
    let c = solve(&DMatrix::from_column_slice(rhs.c.len(), 1, rhs.c.as_slice()));
    Affine {
        m: solve(&rhs.m),
        c: c.column(0).into_owned(),
    }
}

/// Route flows and group costs as affine maps of the prices, for a fixed set
/// of unused routes.
struct TransportMaps {
    x: Affine,
    /// Cost excess `(Ãx + Aᵀβ + Π)_r − ν` of every unused route.
    xi_zero: Affine,
}

impl TransportMaps {
    fn new(sys: &CoupledSystem, zero_routes: &[usize]) -> Result<Self> {
        let n = sys.n_routes();
        let a = sys.transport.route_cost_matrix();
        let c = sys.transport.route_free_cost();
        let groups = sys.demand_groups();
        let active: Vec<usize> = (0..n).filter(|r| !zero_routes.contains(r)).collect();
        let group_of = |r: usize| groups.iter().position(|(routes, _)| routes.contains(&r));
        // Groups with at least one used route.
        let live: Vec<usize> = (0..groups.len())
            .filter(|&g| groups[g].0.iter().any(|r| active.contains(r)))
            .collect();
        let (s, k) = (active.len(), live.len());
        // Stationarity Ã_SS x_S − ν_g = −c_S − Π_S, then Σ_{r∈g} x_r = N_g.
        let mut kkt = DMatrix::zeros(s + k, s + k);
        let mut rhs = Affine::zeros(s + k, n);
        for (i, &r) in active.iter().enumerate() {
            for (j, &q) in active.iter().enumerate() {
                kkt[(i, j)] = a[(r, q)];
            }
            if let Some(g) = group_of(r).and_then(|g| live.iter().position(|&h| h == g)) {
                kkt[(i, s + g)] = -1.0;
                kkt[(s + g, i)] = 1.0;
            }
            rhs.m[(i, r)] = -1.0;
            rhs.c[i] = -c[r];
        }
        for (gi, &g) in live.iter().enumerate() {
            rhs.c[s + gi] = groups[g].1;
        }
        if s + k > 0 && condition_number(&kkt) > REGION_COND_MAX {
            return Err(Error::DegeneratePattern(
                "route flows are not unique on this binding pattern".into(),
            ));
        }
        let sol = solve_affine(&kkt, &rhs);
        let mut x = Affine::zeros(n, n);
        for (i, &r) in active.iter().enumerate() {
            x.m.set_row(r, &sol.m.row(i));
            x.c[r] = sol.c[i];
        }
        let mut nu = Affine::zeros(groups.len(), n);
        for (gi, &g) in live.iter().enumerate() {
            nu.m.set_row(g, &sol.m.row(s + gi));
            nu.c[g] = sol.c[s + gi];
        }
        let cost = Affine {
            m: &a * &x.m + DMatrix::identity(n, n),
            c: &a * &x.c + &c,
        };
        let mut xi_zero = Affine::zeros(zero_routes.len(), n);
        for (i, &r) in zero_routes.iter().enumerate() {
            let mut row = cost.m.row(r).into_owned();
            let mut c0 = cost.c[r];
            if let Some(g) = group_of(r) {
                row -= nu.m.row(g);
                c0 -= nu.c[g];
            }
            xi_zero.m.set_row(i, &row);
            xi_zero.c[i] = c0;
        }
        Ok(TransportMaps { x, xi_zero })
    }
}

/// Dispatch quantities as affine maps of the prices, for a fixed set of
/// congested rows and idle generators.
struct DispatchMaps {
    g: Affine,
    lambda: Affine,
    eta: Affine,
    flows: Affine,
}

impl DispatchMaps {
    fn new(sys: &CoupledSystem, load: &Affine, pattern: &BindingPattern) -> Result<Self> {
        let pw = &sys.power;
        let n = load.m.ncols();
        let n_p = sys.n_buses();
        let m_p = pw.n_flow_constraints();
        let h = &pw.shift_factor;
        let free: Vec<usize> = (0..n_p)
            .filter(|&i| pw.generator_mask[i] && !pattern.idle_generators.contains(&i))
            .collect();
        let lines = &pattern.congested_lines;
        let (f, l) = (free.len(), lines.len());
        // Unknowns (g_F, γ, η_L):
        //   Q_i g_i − γ + Σ_ℓ H_ℓi η_ℓ = −μ_i      (i ∈ F)
        //   Σ_F g_i = 1ᵀd
        //   Σ_F H_ℓi g_i = f̄_ℓ + (Hd)_ℓ            (ℓ ∈ L)
        let dim = f + 1 + l;
        let mut kkt = DMatrix::zeros(dim, dim);
        for (a, &i) in free.iter().enumerate() {
            kkt[(a, a)] = pw.q_diag[i];
            kkt[(a, f)] = -1.0;
            kkt[(f, a)] = 1.0;
            for (b, &row) in lines.iter().enumerate() {
                kkt[(a, f + 1 + b)] = h[(row, i)];
                kkt[(f + 1 + b, a)] = h[(row, i)];
            }
        }
        if condition_number(&kkt) > REGION_COND_MAX {
            return Err(Error::DegeneratePattern(
                "dispatch is not unique on this binding pattern".into(),
            ));
        }
        let hd = load.then(h);
        let mut rhs = Affine::zeros(dim, n);
        for (a, &i) in free.iter().enumerate() {
            rhs.c[a] = -pw.mu[i];
        }
        rhs.m.set_row(f, &load.m.row_sum());
        rhs.c[f] = load.c.sum();
        for (b, &row) in lines.iter().enumerate() {
            rhs.m.set_row(f + 1 + b, &hd.m.row(row));
            rhs.c[f + 1 + b] = pw.f_cap[row] + hd.c[row];
        }
        let sol = solve_affine(&kkt, &rhs);
        let mut g = Affine::zeros(n_p, n);
        for (a, &i) in free.iter().enumerate() {
            g.m.set_row(i, &sol.m.row(a));
            g.c[i] = sol.c[a];
        }
        let mut eta = Affine::zeros(m_p, n);
        for (b, &row) in lines.iter().enumerate() {
            eta.m.set_row(row, &sol.m.row(f + 1 + b));
            eta.c[row] = sol.c[f + 1 + b];
        }
        let ones = DMatrix::from_element(n_p, 1, 1.0);
        let gamma = Affine {
            m: sol.m.rows(f, 1).into_owned(),
            c: sol.c.rows(f, 1).into_owned(),
        };
        let lambda = Affine {
            m: &ones * &gamma.m - h.transpose() * &eta.m,
            c: &ones * &gamma.c - h.transpose() * &eta.c,
        };
        let flows = Affine {
            m: h * (&g.m - &load.m),
            c: h * (&g.c - &load.c),
        };
        Ok(DispatchMaps { g, lambda, eta, flows })
    }
}

/// A critical region of static prices: the prices sharing one binding
/// pattern, with the affine equilibrium maps valid on it.
#[derive(Debug, Clone, PartialEq)]
pub struct CriticalRegion {
    pub pattern: BindingPattern,
    /// Prices the region was built from.
    pub anchor: DVector<f64>,
    /// `x(Π) = KΠ + v`.
    pub k: DMatrix<f64>,
    pub v: DVector<f64>,
    /// `λ(Π) = CΠ + w`.
    pub c: DMatrix<f64>,
    pub w: DVector<f64>,
    /// Region inequalities as slacks `s(Π) ≥ 0`.
    pub slacks: Affine,
    /// Name of every slack row.
    pub slack_names: Vec<String>,
    /// Largest deviation of the maps from direct solves at the anchor and at
    /// one interior perturbation of it.
    pub residual: f64,
}

impl CriticalRegion {
    /// Route flows predicted at `pi`.
    pub fn flows(&self, pi: &DVector<f64>) -> DVector<f64> {
        &self.k * pi + &self.v
    }

    /// LMPs predicted at `pi`.
    pub fn lmps(&self, pi: &DVector<f64>) -> DVector<f64> {
        &self.c * pi + &self.w
    }

    /// Smallest region slack at `pi`, scaled by `1 + |s_c|`.
    pub fn min_slack(&self, pi: &DVector<f64>) -> f64 {
        let s = self.slacks.eval(pi);
        s.iter()
            .zip(self.slacks.c.iter())
            .map(|(v, c)| v / (1.0 + c.abs()))
            .fold(f64::INFINITY, f64::min)
    }

    /// Whether `pi` satisfies every region inequality within `tol`.
    pub fn contains(&self, pi: &DVector<f64>, tol: f64) -> bool {
        self.min_slack(pi) >= -tol
    }

    /// Largest eigenvalue of `(K + Kᵀ)/2` (nonpositive for a valid region).
    pub fn k_max_eigenvalue(&self) -> f64 {
        let sym = (&self.k + self.k.transpose()) * 0.5;
        sym_eigen(&sym).eigenvalues.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// JSON summary of the region.
    pub fn to_json(&self) -> serde_json::Value {
        json!({
            "pattern": self.pattern,
            "anchor": self.anchor.as_slice(),
            "K": rows(&self.k),
            "v": self.v.as_slice(),
            "C": rows(&self.c),
            "w": self.w.as_slice(),
            "k_max_eigenvalue": self.k_max_eigenvalue(),
            "residual": self.residual,
        })
    }
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

/// Build the affine maps and inequalities of a binding pattern.
fn region_from_pattern(sys: &CoupledSystem, pattern: &BindingPattern, anchor: &DVector<f64>) -> Result<CriticalRegion> {
    let pw = &sys.power;
    let n = sys.n_routes();
    let tm = TransportMaps::new(sys, &pattern.zero_routes)?;
    let rb = sys.route_bus_matrix() * sys.coupling.rho;
    let load = Affine {
        m: &rb * &tm.x.m,
        c: &rb * &tm.x.c + &pw.base_load,
    };
    let dm = DispatchMaps::new(sys, &load, pattern)?;

    let mut parts = Vec::new();
    let mut names = Vec::new();
    let pick = |a: &Affine, idx: &[usize], sign: f64, offset: Option<&DVector<f64>>| {
        let mut out = Affine::zeros(idx.len(), n);
        for (k, &i) in idx.iter().enumerate() {
            out.m.set_row(k, &(a.m.row(i) * sign));
            out.c[k] = sign * a.c[i] + offset.map_or(0.0, |o| o[i]);
        }
        out
    };
    let active: Vec<usize> = (0..n).filter(|r| !pattern.zero_routes.contains(r)).collect();
    parts.push(pick(&tm.x, &active, 1.0, None));
    names.extend(active.iter().map(|r| format!("x:{r}")));
    parts.push(tm.xi_zero.clone());
    names.extend(pattern.zero_routes.iter().map(|r| format!("xi:{r}")));
    parts.push(pick(&dm.eta, &pattern.congested_lines, 1.0, None));
    names.extend(pattern.congested_lines.iter().map(|r| format!("eta:{r}")));
    let open: Vec<usize> = (0..pw.n_flow_constraints())
        .filter(|r| !pattern.congested_lines.contains(r))
        .collect();
    parts.push(pick(&dm.flows, &open, -1.0, Some(&pw.f_cap)));
    names.extend(open.iter().map(|r| format!("flow:{r}")));
    if pw.enforce_nonneg_gen {
        let running: Vec<usize> = (0..sys.n_buses())
            .filter(|&i| pw.generator_mask[i] && !pattern.idle_generators.contains(&i))
            .collect();
        parts.push(pick(&dm.g, &running, 1.0, None));
        names.extend(running.iter().map(|i| format!("g:{i}")));
        // μ_i − λ_i ≥ 0 at idle generators.
        parts.push(pick(&dm.lambda, &pattern.idle_generators, -1.0, Some(&pw.mu)));
        names.extend(pattern.idle_generators.iter().map(|i| format!("idle:{i}")));
    }
    Ok(CriticalRegion {
        pattern: pattern.clone(),
        anchor: anchor.clone(),
        k: tm.x.m,
        v: tm.x.c,
        c: dm.lambda.m,
        w: dm.lambda.c,
        slacks: Affine::stack(&parts, n),
        slack_names: names,
        residual: 0.0,
    })
}

/// Critical region of the static prices `pi`.
///
/// The maps are checked against direct equilibrium solves at `pi` and at one
/// perturbation of `pi` strictly inside the region.
pub fn critical_region(sys: &CoupledSystem, pi: &DVector<f64>) -> Result<CriticalRegion> {
    let policy = PricingPolicy::Static(pi.clone());
    let gue = gue_under_policy(sys, &policy)?;
    if gue.binding.degenerate {
        return Err(Error::DegeneratePattern(
            "the prices lie on the boundary of their critical region".into(),
        ));
    }
    let mut region = region_from_pattern(sys, &gue.binding, pi)?;
    let deviation = |p: &DVector<f64>, g: &GueSolution| {
        let scale_x = 1.0 + amax(&g.x);
        let scale_l = 1.0 + amax(&g.dispatch.lambda);
        (amax(&(region.flows(p) - &g.x)) / scale_x).max(amax(&(region.lmps(p) - &g.dispatch.lambda)) / scale_l)
    };
    let mut residual = deviation(pi, &gue);
    // An interior perturbation along a fixed low-discrepancy direction.
    let n = pi.len();
    let dir = DVector::from_iterator(n, halton(7, n).into_iter().map(|u| 2.0 * u - 1.0));
    let mut step = 1e-3 * (1.0 + amax(pi));
    for _ in 0..40 {
        let p = pi + &dir * step;
        if region.min_slack(&p) > 0.0 {
            let g = gue_under_policy(sys, &PricingPolicy::Static(p.clone()))?;
            residual = residual.max(deviation(&p, &g));
            break;
        }
        step *= 0.5;
    }
    if residual > REGION_RESIDUAL_MAX {
        return Err(Error::DegeneratePattern(format!(
            "region maps deviate from direct solves by {residual:e}"
        )));
    }
    region.residual = residual;
    Ok(region)
}

// ---------------------------------------------------------------------------
// BP elimination
// ---------------------------------------------------------------------------

/// A box of admissible prices.
#[derive(Debug, Clone, PartialEq)]
pub struct PriceBox {
    pub lo: DVector<f64>,
    pub hi: DVector<f64>,
}

impl PriceBox {
    /// Box with the same bounds on every route.
    pub fn uniform(n: usize, lo: f64, hi: f64) -> Result<Self> {
        PriceBox::new(DVector::from_element(n, lo), DVector::from_element(n, hi))
    }

    /// Box `lo ≤ Π ≤ hi`; the bounds must be finite and ordered.
    pub fn new(lo: DVector<f64>, hi: DVector<f64>) -> Result<Self> {
        if lo.len() != hi.len() {
            return Err(Error::DimensionMismatch("price bounds differ in length".into()));
        }
        if lo.iter().chain(hi.iter()).any(|v| !v.is_finite()) || lo.iter().zip(hi.iter()).any(|(l, h)| l > h) {
            return Err(Error::InvalidRange("price bounds must be finite with lo ≤ hi".into()));
        }
        Ok(PriceBox { lo, hi })
    }

    fn clamp(&self, pi: &DVector<f64>) -> DVector<f64> {
        pi.zip_zip_map(&self.lo, &self.hi, |p, l, h| p.clamp(l, h))
    }

    fn contains(&self, pi: &DVector<f64>) -> bool {
        pi.iter().zip(self.lo.iter().zip(self.hi.iter())).all(|(p, (l, h))| *p >= *l && *p <= *h)
    }

    fn diameter(&self) -> f64 {
        (&self.hi - &self.lo).norm()
    }
}

/// One constraint `g(Π) ≥ 0` of the BP-elimination program, as a quadratic
/// `½ΠᵀHΠ + bᵀΠ + c₀` divided by a positive scale.
#[derive(Debug, Clone)]
struct QuadConstraint {
    name: String,
    h: DMatrix<f64>,
    b: DVector<f64>,
    c0: f64,
    concave: bool,
}

impl QuadConstraint {
    /// Product of the affine scalars `(gu·Π + u0)(gw·Π + w0)`, scaled.
    fn product(name: String, gu: DVector<f64>, u0: f64, gw: DVector<f64>, w0: f64, scale: f64) -> Self {
        let h = (&gu * gw.transpose() + &gw * gu.transpose()) / scale;
        let b = (&gw * u0 + &gu * w0) / scale;
        QuadConstraint::new(name, h, b, u0 * w0 / scale)
    }

    fn new(name: String, h: DMatrix<f64>, b: DVector<f64>, c0: f64) -> Self {
        let scale = 1.0 + h.amax() + b.amax() + c0.abs();
        let max_eig = sym_eigen(&h).eigenvalues.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let concave = max_eig <= 1e-10 * scale;
        QuadConstraint { name, h, b, c0, concave }
    }

    fn value(&self, pi: &DVector<f64>) -> f64 {
        0.5 * pi.dot(&(&self.h * pi)) + self.b.dot(pi) + self.c0
    }

    fn gradient(&self, pi: &DVector<f64>) -> DVector<f64> {
        &self.h * pi + &self.b
    }

    /// Identically zero (a derivative that vanishes on the whole region).
    fn is_trivial(&self) -> bool {
        self.h.amax() <= 1e-12 && self.b.amax() <= 1e-12 && self.c0.abs() <= 1e-12
    }
}

/// The constraints of the BP-elimination program on `region`:
/// `∂Φ_T/∂α_ℓ ≥ 0` and `∂Φ_P/∂α_ℓ ≥ 0` for every link, and the revenue floor.
fn mitigation_constraints(sys: &CoupledSystem, region: &CriticalRegion, revenue_floor: Option<f64>) -> Vec<QuadConstraint> {
    let a = sys.transport.route_cost_matrix();
    let free = sys.transport.route_free_cost();
    let rho = sys.coupling.rho;
    let rb = sys.route_bus_matrix();
    let k = &region.k;
    let (v, c, w) = (&region.v, &region.c, &region.w);
    // Scales: the social costs at the anchor.
    let x0 = region.flows(&region.anchor);
    let phi_t = x0.dot(&(&a * &x0 + &free));
    let lambda0 = region.lmps(&region.anchor);
    let phi_p = rho * lambda0.dot(&(&rb * &x0)).abs();
    let mut out = Vec::new();
    for l in 0..sys.transport.n_links() {
        let a_l = link_incidence(sys, l);
        let ka = k * &a_l;
        // y_ℓ(Π) = a_ℓᵀ(KΠ + v).
        let (gy, y0) = (k.transpose() * &a_l, a_l.dot(v));
        // ∂Φ_T/∂α_ℓ = y(y + (2Ãx + Aᵀβ)ᵀKa).
        let gu = &gy + (k.transpose() * (&a * &ka)) * 2.0;
        let u0 = y0 + ka.dot(&(&a * v * 2.0 + &free));
        let t = QuadConstraint::product(format!("dphi_t/alpha:{l}"), gy.clone(), y0, gu, u0, 1.0 + phi_t);
        // ∂Φ_P/∂α_ℓ = y·ρλᵀBKa.
        let bka = &rb * &ka * rho;
        let p = QuadConstraint::product(
            format!("dphi_p/alpha:{l}"),
            gy,
            y0,
            c.transpose() * &bka,
            bka.dot(w),
            1.0 + phi_p,
        );
        out.extend([t, p].into_iter().filter(|q| !q.is_trivial()));
    }
    if let Some(theta) = revenue_floor {
        let scale = 1.0 + theta.abs();
        out.push(QuadConstraint::new(
            "revenue".into(),
            (k + k.transpose()) / scale,
            v / scale,
            -theta / scale,
        ));
    }
    out
}

/// Outcome of the BP-elimination search.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum MitigationStatus {
    /// Feasible prices were found.
    Found,
    /// The constraints cannot hold together in the region (certified by an
    /// upper bound on the largest attainable minimum slack).
    InfeasibleInRegion,
    /// Neither a feasible point nor a certificate was obtained.
    Indeterminate,
}

impl fmt::Display for MitigationStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MitigationStatus::Found => "found",
            MitigationStatus::InfeasibleInRegion => "infeasible_in_region",
            MitigationStatus::Indeterminate => "indeterminate",
        })
    }
}

/// Result of [`eliminate_bp_static`].
#[derive(Debug, Clone, PartialEq)]
pub struct MitigationResult {
    pub status: MitigationStatus,
    /// The feasible prices when found, else the best point visited.
    pub pi: Option<DVector<f64>>,
    /// Revenue `Πᵀx(Π)` at `pi`.
    pub revenue: f64,
    /// Normalized slack of every constraint at `pi`.
    pub constraint_slacks: Vec<(String, f64)>,
    /// Constraints verified to be concave, whose cutting-plane model bounds
    /// the attainable minimum slack.
    pub certified_constraints: Vec<String>,
    /// Upper bound on the largest attainable minimum slack over the
    /// certified constraints.
    pub upper_bound: Option<f64>,
    pub iterations: usize,
}

impl MitigationResult {
    /// JSON report including the region.
    pub fn to_json(&self, region: &CriticalRegion) -> serde_json::Value {
        json!({
            "status": self.status.to_string(),
            "pi": self.pi.as_ref().map(|p| p.as_slice().to_vec()),
            "region": region.to_json(),
            "revenue": self.revenue,
            "constraint_slacks": self
                .constraint_slacks
                .iter()
                .map(|(n, s)| json!({"name": n, "slack": s}))
                .collect::<Vec<_>>(),
            "certified_constraints": self.certified_constraints,
            "upper_bound": self.upper_bound,
            "iterations": self.iterations,
        })
    }
}

/// Cutting-plane model of `min_j g_j` over the region and box.
struct CutModel<'a> {
    region: &'a CriticalRegion,
    bounds: &'a PriceBox,
    /// Rows `t − gᵀΠ ≤ value − gᵀΠ_k`, tagged with the constraint index.
    cuts: Vec<(usize, DVector<f64>, f64)>,
}

impl CutModel<'_> {
    fn add_cuts(&mut self, cons: &[QuadConstraint], pi: &DVector<f64>) {
        for (j, q) in cons.iter().enumerate() {
            let g = q.gradient(pi);
            let rhs = q.value(pi) - g.dot(pi);
            self.cuts.push((j, g, rhs));
        }
    }

    /// Maximize `t − (σ/2)|Π − centre|²` subject to the cuts of the selected
    /// constraints. `None` when the region and box do not intersect.
    fn solve(&self, keep: &dyn Fn(usize) -> bool, centre: &DVector<f64>, sigma: f64) -> Result<Option<(DVector<f64>, f64)>> {
        let n = centre.len();
        let cuts: Vec<&(usize, DVector<f64>, f64)> = self.cuts.iter().filter(|c| keep(c.0)).collect();
        let slacks = &self.region.slacks;
        let m = cuts.len() + slacks.c.len() + 2 * n;
        let mut a_in = DMatrix::zeros(m, n + 1);
        let mut b_in = DVector::zeros(m);
        let mut row = 0;
        for (_, g, rhs) in &cuts {
            for i in 0..n {
                a_in[(row, i)] = -g[i];
            }
            a_in[(row, n)] = 1.0;
            b_in[row] = *rhs;
            row += 1;
        }
        for s in 0..slacks.c.len() {
            for i in 0..n {
                a_in[(row, i)] = -slacks.m[(s, i)];
            }
            b_in[row] = slacks.c[s];
            row += 1;
        }
        for i in 0..n {
            a_in[(row, i)] = 1.0;
            b_in[row] = self.bounds.hi[i];
            a_in[(row + 1, i)] = -1.0;
            b_in[row + 1] = -self.bounds.lo[i];
            row += 2;
        }
        let mut p = DMatrix::zeros(n + 1, n + 1);
        let mut q = DVector::zeros(n + 1);
        for i in 0..n {
            p[(i, i)] = sigma;
            q[i] = -sigma * centre[i];
        }
        q[n] = -1.0;
        let sol = solve_qp(&QpProblem::new(p, q).with_in(a_in, b_in), DEFAULT_TOL)?;
        match sol.status {
            QpStatus::Optimal => Ok(Some((sol.z.rows(0, n).into_owned(), sol.z[n]))),
            QpStatus::Infeasible => Ok(None),
            s => Err(Error::Solver(format!("cutting-plane subproblem ended with status {s:?}"))),
        }
    }
}

/// Search `region ∩ bounds` for static prices under which no link slope
/// produces a T-T or T-P BP and the revenue `Πᵀx(Π)` is at least
/// `revenue_floor` (`None` drops the revenue constraint).
///
/// Maximizes the smallest normalized constraint slack by a proximal
/// cutting-plane method. A point with every slack `≥ −MITIGATION_TOL` is
/// returned as `Found`. When the cutting-plane model of the concave
/// constraints bounds the attainable minimum slack below zero, the result is
/// `InfeasibleInRegion`. Otherwise it is `Indeterminate`.
pub fn eliminate_bp_static(
    sys: &CoupledSystem,
    region: &CriticalRegion,
    revenue_floor: Option<f64>,
    bounds: &PriceBox,
) -> Result<MitigationResult> {
    if bounds.lo.len() != sys.n_routes() {
        return Err(Error::DimensionMismatch(format!(
            "price bounds have {} entries for {} routes",
            bounds.lo.len(),
            sys.n_routes()
        )));
    }
    let cons = mitigation_constraints(sys, region, revenue_floor);
    let certified: Vec<String> = cons.iter().filter(|c| c.concave).map(|c| c.name.clone()).collect();
    let min_slack = |pi: &DVector<f64>| cons.iter().map(|c| c.value(pi)).fold(f64::INFINITY, f64::min);
    let admissible = |pi: &DVector<f64>| bounds.contains(pi) && region.contains(pi, MITIGATION_TOL);
    let result = |status, pi: Option<DVector<f64>>, upper_bound, iterations| {
        let (revenue, constraint_slacks) = match &pi {
            Some(p) => (p.dot(&region.flows(p)), cons.iter().map(|c| (c.name.clone(), c.value(p))).collect()),
            None => (0.0, Vec::new()),
        };
        MitigationResult {
            status,
            pi,
            revenue,
            constraint_slacks,
            certified_constraints: certified.clone(),
            upper_bound,
            iterations,
        }
    };

    let start = bounds.clamp(&region.anchor);
    if admissible(&start) && min_slack(&start) >= -MITIGATION_TOL {
        return Ok(result(MitigationStatus::Found, Some(start), None, 0));
    }
    let diam = bounds.diameter().max(1e-12);
    let sigma = 1.0 / (diam * diam);
    let sigma_bound = 1e-9 / (diam * diam);
    let mut model = CutModel {
        region,
        bounds,
        cuts: Vec::new(),
    };
    model.add_cuts(&cons, &start);
    let all = |_: usize| true;
    let concave_only = |j: usize| cons[j].concave;
    let mut centre: Option<(DVector<f64>, f64)> = admissible(&start).then(|| (start.clone(), min_slack(&start)));
    let mut upper_bound = None;
    for it in 1..=MAX_BUNDLE_ITER {
        let prox_centre = centre.as_ref().map_or(&start, |c| &c.0).clone();
        let Some((cand, t_model)) = model.solve(&all, &prox_centre, sigma)? else {
            return Ok(result(MitigationStatus::InfeasibleInRegion, None, Some(f64::NEG_INFINITY), it));
        };
        let f_cand = min_slack(&cand);
        if f_cand >= -MITIGATION_TOL {
            return Ok(result(MitigationStatus::Found, Some(cand), upper_bound, it));
        }
        model.add_cuts(&cons, &cand);
        // Upper bound from the concave constraints alone.
        if !certified.is_empty() {
            if let Some((_, ub)) = model.solve(&concave_only, &prox_centre, sigma_bound)? {
                let ub = ub + 0.5 * sigma_bound * diam * diam;
                upper_bound = Some(ub);
                if ub < -MITIGATION_TOL {
                    let best = centre.map(|c| c.0).unwrap_or(cand);
                    return Ok(result(MitigationStatus::InfeasibleInRegion, Some(best), upper_bound, it));
                }
            }
        }
        let serious = match &centre {
            None => true,
            Some((_, f_c)) => f_cand >= f_c + 0.1 * (t_model - f_c),
        };
        let gap = centre.as_ref().map_or(f64::INFINITY, |(_, f_c)| t_model - f_c);
        if serious {
            centre = Some((cand, f_cand));
        }
        if gap <= 1e-10 {
            break;
        }
    }
    let best = centre.map(|c| c.0);
    Ok(result(MitigationStatus::Indeterminate, best, upper_bound, MAX_BUNDLE_ITER))
}

// ---------------------------------------------------------------------------
// Region walk
// ---------------------------------------------------------------------------

/// The first `n` coordinates of the Halton point with index `index`.
pub fn halton(index: usize, n: usize) -> Vec<f64> {
    const PRIMES: [usize; 30] = [
        2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53, 59, 61, 67, 71, 73, 79, 83, 89, 97, 101, 103, 107,
        109, 113,
    ];
    (0..n)
        .map(|d| {
            let base = PRIMES[d % PRIMES.len()];
            let (mut i, mut f, mut r) = (index, 1.0, 0.0);
            while i > 0 {
                f /= base as f64;
                r += f * (i % base) as f64;
                i /= base;
            }
            r
        })
        .collect()
}

/// One region visited by [`region_walk`].
#[derive(Debug, Clone)]
pub struct RegionProbe {
    /// Index of the first sample that landed in the region.
    pub sample: usize,
    pub pi: DVector<f64>,
    pub outcome: std::result::Result<(CriticalRegion, MitigationResult), Error>,
}

/// Result of [`region_walk`].
#[derive(Debug, Clone)]
pub struct RegionWalk {
    pub probes: Vec<RegionProbe>,
    /// Samples drawn before stopping.
    pub samples: usize,
    /// `Found` when some region holds feasible prices, else `Indeterminate`
    /// (sampling does not visit every region).
    pub status: MitigationStatus,
}

impl RegionWalk {
    /// The first feasible region and its result.
    pub fn found(&self) -> Option<(&CriticalRegion, &MitigationResult)> {
        self.probes.iter().find_map(|p| match &p.outcome {
            Ok((r, m)) if m.status == MitigationStatus::Found => Some((r, m)),
            _ => None,
        })
    }

    /// Regions visited per sample drawn.
    pub fn coverage(&self) -> f64 {
        self.probes.len() as f64 / self.samples.max(1) as f64
    }

    /// JSON report of the walk.
    pub fn to_json(&self) -> serde_json::Value {
        let probes: Vec<serde_json::Value> = self
            .probes
            .iter()
            .map(|p| match &p.outcome {
                Ok((r, m)) => json!({"sample": p.sample, "sample_pi": p.pi.as_slice(), "result": m.to_json(r)}),
                Err(e) => json!({"sample": p.sample, "sample_pi": p.pi.as_slice(), "error": e.code(), "message": e.to_string()}),
            })
            .collect();
        let found = self.found();
        json!({
            "status": self.status.to_string(),
            "pi": found.and_then(|(_, m)| m.pi.as_ref().map(|p| p.as_slice().to_vec())),
            "region": found.map(|(r, _)| r.to_json()),
            "revenue": found.map(|(_, m)| m.revenue),
            "constraint_slacks": found.map(|(_, m)| m
                .constraint_slacks
                .iter()
                .map(|(n, s)| json!({"name": n, "slack": s}))
                .collect::<Vec<_>>()),
            "samples": self.samples,
            "regions": self.probes.len(),
            "coverage": self.coverage(),
            "probes": probes,
        })
    }
}

/// Sample up to `budget` static price vectors from a Halton sequence over
/// `bounds`, group them by binding pattern and run [`eliminate_bp_static`]
/// once per new region, stopping at the first region with feasible prices.
///
/// Equilibria at the samples are computed in parallel; regions are examined
/// in sample order, so the result does not depend on scheduling.
pub fn region_walk(
    sys: &CoupledSystem,
    bounds: &PriceBox,
    budget: usize,
    revenue_floor: Option<f64>,
) -> Result<RegionWalk> {
    if budget == 0 {
        return Err(Error::InvalidRange("region walk needs a budget of at least one sample".into()));
    }
    let n = sys.n_routes();
    if bounds.lo.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "price bounds have {} entries for {n} routes",
            bounds.lo.len()
        )));
    }
    let sample = |i: usize| {
        let u = halton(i + 1, n);
        DVector::from_fn(n, |r, _| bounds.lo[r] + u[r] * (bounds.hi[r] - bounds.lo[r]))
    };
    let points: Vec<DVector<f64>> = (0..budget).map(sample).collect();
    let patterns: Vec<Option<BindingPattern>> = points
        .par_iter()
        .map(|p| {
            gue_under_policy(sys, &PricingPolicy::Static(p.clone()))
                .ok()
                .map(|g| g.binding)
        })
        .collect();
    let mut seen: HashSet<(Vec<usize>, Vec<usize>, Vec<usize>)> = HashSet::new();
    let mut probes = Vec::new();
    let mut samples = 0;
    for (i, (pi, pattern)) in points.into_iter().zip(patterns).enumerate() {
        samples = i + 1;
        let Some(pattern) = pattern else { continue };
        let key = (
            pattern.zero_routes.clone(),
            pattern.congested_lines.clone(),
            pattern.idle_generators.clone(),
        );
        if !seen.insert(key) {
            continue;
        }
        let outcome = critical_region(sys, &pi)
            .and_then(|r| eliminate_bp_static(sys, &r, revenue_floor, bounds).map(|m| (r, m)));
        let done = matches!(&outcome, Ok((_, m)) if m.status == MitigationStatus::Found);
        probes.push(RegionProbe { sample: i, pi, outcome });
        if done {
            break;
        }
    }
    let status = if probes
        .iter()
        .any(|p| matches!(&p.outcome, Ok((_, m)) if m.status == MitigationStatus::Found))
    {
        MitigationStatus::Found
    } else {
        MitigationStatus::Indeterminate
    };
    Ok(RegionWalk { probes, samples, status })
}

