// SPDX-License-Identifier: MIT OR Apache-2.0

//! Economic dispatch, transportation user equilibrium (UE) and the joint
//! generalized user equilibrium (GUE).
//!
//! The GUE is computed from one convex QP over route flows `x` and
//! generation `g`:
//!
//! ```text
//! minimize   ½ xᵀÃx + (Aᵀβ)ᵀx + ½ gᵀQg + μᵀg
//! subject to 1ᵀg − ρ1ᵀx = 1ᵀd₀                     (balance, γ = −multiplier)
//!            Σ_{r∈k} x_r = N_k  for every O-D pair k   (ν_k = −multiplier)
//!            g_i = 0 off the generator mask
//!            H(g − d₀ − ρB x) ≤ f̄                     (line duals η)
//!            x ≥ 0                                    (route duals ξ)
//!            g ≥ 0 on generators when enforced
//! ```
//!
//! where `B = (A^CB)ᵀA^CR` maps routes to charging buses. Its KKT conditions
//! are exactly the UE conditions with route costs
//! `c = Ãx + Aᵀβ + ρBᵀλ = ν + ξ` and the dispatch optimality conditions with
//! LMPs `λ = γ1 − Hᵀη`, so no best-response iteration is needed.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{amax, rank};
use crate::model::{charging_load, CoupledSystem, OdDemand, PowerNetwork, TransportationNetwork};
use crate::qp::{binding_tol, solve_qp, QpProblem, QpSolution, QpStatus, DEFAULT_TOL};

/// Relative factor of the active-route threshold (`x_r > 1e-7·demand`).
pub const ACTIVE_RTOL: f64 = 1e-7;

/// Relative factor of the zero-multiplier threshold used to flag degenerate
/// binding patterns.
pub const DEGENERATE_RTOL: f64 = 1e-7;

/// Solution of the economic dispatch program.
#[derive(Debug, Clone, PartialEq)]
pub struct DispatchSolution {
    /// Generation per bus (MW).
    pub g: DVector<f64>,
    /// Net injection `g − d` per bus.
    pub p: DVector<f64>,
    /// Locational marginal prices `γ1 − Hᵀη`.
    pub lambda: DVector<f64>,
    /// System energy price (negated balance multiplier).
    pub gamma: f64,
    /// Flow-constraint multipliers.
    pub eta: DVector<f64>,
    /// Generation cost `½ gᵀQg + μᵀg`.
    pub cost: f64,
}

/// Binding pattern of an equilibrium: which routes carry no flow and which
/// flow constraints sit at their limit.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize)]
pub struct BindingPattern {
    /// Routes with `x_r = 0`.
    pub zero_routes: Vec<usize>,
    /// Flow-constraint rows with `(Hp)_ℓ = f̄_ℓ`.
    pub congested_lines: Vec<usize>,
    /// Generators held at `g_i = 0` by the nonnegativity restriction.
    pub idle_generators: Vec<usize>,
    /// Some binding constraint has a zero multiplier (the point lies on the
    /// boundary of its critical region).
    pub degenerate: bool,
}

impl BindingPattern {
    /// Same zero routes, congested rows and idle generators (ignores the
    /// degeneracy flag).
    pub fn same_pattern(&self, other: &BindingPattern) -> bool {
        self.zero_routes == other.zero_routes
            && self.congested_lines == other.congested_lines
            && self.idle_generators == other.idle_generators
    }
}

/// Generalized user equilibrium.
#[derive(Debug, Clone, PartialEq)]
pub struct GueSolution {
    /// Route flows.
    pub x: DVector<f64>,
    /// Dispatch at the equilibrium charging load, with the LMPs the route
    /// costs were built from.
    pub dispatch: DispatchSolution,
    /// Equilibrium travel-plus-charging cost per O-D pair.
    pub nu: Vec<f64>,
    /// Route-flow multipliers (cost excess of unused routes).
    pub xi: DVector<f64>,
    /// Travel plus charging cost of every route.
    pub route_cost: DVector<f64>,
    pub binding: BindingPattern,
    /// Non-fatal findings such as `NONUNIQUE_WARNING`.
    pub warnings: Vec<String>,
}

/// Solution of the transportation UE program at given route prices.
#[derive(Debug, Clone, PartialEq)]
pub struct UeSolution {
    pub x: DVector<f64>,
    /// Equilibrium cost per demand group.
    pub nu: Vec<f64>,
    pub xi: DVector<f64>,
}

fn qp_failure(sol: &QpSolution, what: &str) -> Error {
    match sol.status {
        QpStatus::Infeasible => Error::InfeasibleDispatch(format!("{what}: no feasible schedule")),
        QpStatus::Unbounded => Error::Solver(format!("{what}: objective unbounded below")),
        QpStatus::MaxIter => Error::Solver(format!("{what}: iteration cap reached")),
        QpStatus::Optimal => unreachable!("optimal solutions are not failures"),
    }
}

/// Generation cost `½ gᵀ diag(Q) g + μᵀg`.
pub fn generation_cost(power: &PowerNetwork, g: &DVector<f64>) -> f64 {
    g.iter()
        .enumerate()
        .map(|(i, &gi)| 0.5 * power.q_diag[i] * gi * gi + power.mu[i] * gi)
        .sum()
}

/// LMPs `γ1 − Hᵀη`.
fn lmps(power: &PowerNetwork, gamma: f64, eta: &DVector<f64>) -> DVector<f64> {
    DVector::from_element(power.n_buses(), gamma) - power.shift_factor.transpose() * eta
}

/// Economic dispatch against total bus load `d` (base load included by the
/// caller), at the default tolerance.
pub fn economic_dispatch(power: &PowerNetwork, d: &DVector<f64>) -> Result<DispatchSolution> {
    economic_dispatch_with(power, d, DEFAULT_TOL)
}

/// Economic dispatch with an explicit solver tolerance.
pub fn economic_dispatch_with(power: &PowerNetwork, d: &DVector<f64>, tol: f64) -> Result<DispatchSolution> {
    let n = power.n_buses();
    if d.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "load vector has {} entries for {n} buses",
            d.len()
        )));
    }
    let off: Vec<usize> = (0..n).filter(|&i| !power.generator_mask[i]).collect();
    let gens: Vec<usize> = if power.enforce_nonneg_gen {
        (0..n).filter(|&i| power.generator_mask[i]).collect()
    } else {
        Vec::new()
    };
    let m_p = power.n_flow_constraints();

    let mut a_eq = DMatrix::zeros(1 + off.len(), n);
    let mut b_eq = DVector::zeros(1 + off.len());
    a_eq.row_mut(0).fill(1.0);
    b_eq[0] = d.sum();
    for (k, &i) in off.iter().enumerate() {
        a_eq[(1 + k, i)] = 1.0;
    }
    let mut a_in = DMatrix::zeros(m_p + gens.len(), n);
    let mut b_in = DVector::zeros(m_p + gens.len());
    a_in.rows_mut(0, m_p).copy_from(&power.shift_factor);
    b_in.rows_mut(0, m_p).copy_from(&(&power.f_cap + &power.shift_factor * d));
    for (k, &i) in gens.iter().enumerate() {
        a_in[(m_p + k, i)] = -1.0;
    }
    let prob = QpProblem::new(DMatrix::from_diagonal(&power.q_diag), power.mu.clone())
        .with_eq(a_eq, b_eq)
        .with_in(a_in, b_in);
    let sol = solve_qp(&prob, tol)?;
    if sol.status != QpStatus::Optimal {
        return Err(qp_failure(&sol, "economic dispatch"));
    }
    let g = sol.z.clone();
    let gamma = -sol.lambda_eq[0];
    let eta = sol.mu_in.rows(0, m_p).into_owned();
    Ok(DispatchSolution {
        p: &g - d,
        lambda: lmps(power, gamma, &eta),
        gamma,
        cost: generation_cost(power, &g),
        eta,
        g,
    })
}

/// Transportation UE for a single demand at fixed route prices.
pub fn transport_ue(transport: &TransportationNetwork, route_prices: &DVector<f64>, demand: f64) -> Result<UeSolution> {
    let groups = vec![((0..transport.n_routes()).collect(), demand)];
    transport_ue_groups(transport, route_prices, &groups, DEFAULT_TOL)
}

/// Transportation UE with one demand constraint per group of routes.
pub fn transport_ue_groups(
    transport: &TransportationNetwork,
    route_prices: &DVector<f64>,
    groups: &[(Vec<usize>, f64)],
    tol: f64,
) -> Result<UeSolution> {
    let n = transport.n_routes();
    if route_prices.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "price vector has {} entries for {n} routes",
            route_prices.len()
        )));
    }
    let prob = ue_problem(&transport.route_cost_matrix(), &(transport.route_free_cost() + route_prices), groups);
    let sol = solve_qp(&prob, tol)?;
    if sol.status != QpStatus::Optimal {
        return Err(qp_failure(&sol, "transportation UE"));
    }
    Ok(UeSolution {
        x: sol.z.clone(),
        nu: sol.lambda_eq.iter().map(|l| -l).collect(),
        xi: sol.mu_in.clone(),
    })
}

/// `min ½ xᵀPx + cᵀx` over the demand simplex of every group.
pub(crate) fn ue_problem(p: &DMatrix<f64>, c: &DVector<f64>, groups: &[(Vec<usize>, f64)]) -> QpProblem {
    let n = c.len();
    let mut a_eq = DMatrix::zeros(groups.len(), n);
    let mut b_eq = DVector::zeros(groups.len());
    for (k, (routes, demand)) in groups.iter().enumerate() {
        for &r in routes {
            a_eq[(k, r)] = 1.0;
        }
        b_eq[k] = *demand;
    }
    QpProblem::new(p.clone(), c.clone())
        .with_eq(a_eq, b_eq)
        .with_in(-DMatrix::identity(n, n), DVector::zeros(n))
}

/// Row layout of the joint (x, g) program.
#[derive(Debug, Clone)]
pub(crate) struct JointLayout {
    pub n_r: usize,
    pub n_p: usize,
    pub n_groups: usize,
    pub m_p: usize,
    /// Buses with `g ≥ 0` rows (after the route rows).
    pub nonneg: Vec<usize>,
}

impl JointLayout {
    pub fn route_row(&self, r: usize) -> usize {
        self.m_p + r
    }

    pub fn gen_row(&self, k: usize) -> usize {
        self.m_p + self.n_r + k
    }
}

/// Objective of the joint program in the flow variables.
#[derive(Debug, Clone)]
pub(crate) struct FlowObjective {
    pub quad: DMatrix<f64>,
    pub lin: DVector<f64>,
}

impl FlowObjective {
    /// The UE potential `½ xᵀÃx + (Aᵀβ)ᵀx`.
    pub fn potential(sys: &CoupledSystem) -> Self {
        FlowObjective {
            quad: sys.transport.route_cost_matrix(),
            lin: sys.transport.route_free_cost(),
        }
    }
}

/// Assemble the joint program for `sys` with the given flow objective.
pub(crate) fn joint_problem(sys: &CoupledSystem, flow: &FlowObjective) -> (QpProblem, JointLayout) {
    let pw = &sys.power;
    let n_r = sys.n_routes();
    let n_p = sys.n_buses();
    let groups = sys.demand_groups();
    let m_p = pw.n_flow_constraints();
    let rho = sys.coupling.rho;
    let off_mask: Vec<usize> = (0..n_p).filter(|&i| !pw.generator_mask[i]).collect();
    let nonneg: Vec<usize> = if pw.enforce_nonneg_gen {
        (0..n_p).filter(|&i| pw.generator_mask[i]).collect()
    } else {
        Vec::new()
    };
    let n = n_r + n_p;
    let rb = sys.route_bus_matrix();

    let mut p = DMatrix::zeros(n, n);
    p.view_mut((0, 0), (n_r, n_r)).copy_from(&flow.quad);
    for i in 0..n_p {
        p[(n_r + i, n_r + i)] = pw.q_diag[i];
    }
    let mut q = DVector::zeros(n);
    q.rows_mut(0, n_r).copy_from(&flow.lin);
    q.rows_mut(n_r, n_p).copy_from(&pw.mu);

    let n_eq = 1 + groups.len() + off_mask.len();
    let mut a_eq = DMatrix::zeros(n_eq, n);
    let mut b_eq = DVector::zeros(n_eq);
    for r in 0..n_r {
        a_eq[(0, r)] = -rho * rb.column(r).sum();
    }
    for i in 0..n_p {
        a_eq[(0, n_r + i)] = 1.0;
    }
    b_eq[0] = pw.base_load.sum();
    for (k, (routes, demand)) in groups.iter().enumerate() {
        for &r in routes {
            a_eq[(1 + k, r)] = 1.0;
        }
        b_eq[1 + k] = *demand;
    }
    for (k, &i) in off_mask.iter().enumerate() {
        a_eq[(1 + groups.len() + k, n_r + i)] = 1.0;
    }

    let n_in = m_p + n_r + nonneg.len();
    let mut a_in = DMatrix::zeros(n_in, n);
    let mut b_in = DVector::zeros(n_in);
    let hb = &pw.shift_factor * &rb * rho;
    a_in.view_mut((0, 0), (m_p, n_r)).copy_from(&(-hb));
    a_in.view_mut((0, n_r), (m_p, n_p)).copy_from(&pw.shift_factor);
    b_in.rows_mut(0, m_p).copy_from(&(&pw.f_cap + &pw.shift_factor * &pw.base_load));
    for r in 0..n_r {
        a_in[(m_p + r, r)] = -1.0;
    }
    for (k, &i) in nonneg.iter().enumerate() {
        a_in[(m_p + n_r + k, n_r + i)] = -1.0;
    }
    let layout = JointLayout {
        n_r,
        n_p,
        n_groups: groups.len(),
        m_p,
        nonneg,
    };
    (QpProblem::new(p, q).with_eq(a_eq, b_eq).with_in(a_in, b_in), layout)
}

/// Solve the joint program with a custom flow objective and unpack the
/// equilibrium quantities. Route costs always use the UE cost
/// `Ãx + Aᵀβ + ρBᵀλ`.
pub(crate) fn solve_joint(sys: &CoupledSystem, flow: &FlowObjective, tol: f64) -> Result<GueSolution> {
    let (prob, layout) = joint_problem(sys, flow);
    let sol = solve_qp(&prob, tol)?;
    if sol.status != QpStatus::Optimal {
        return Err(qp_failure(&sol, "equilibrium program"));
    }
    let (n_r, n_p, m_p) = (layout.n_r, layout.n_p, layout.m_p);
    let mut x = sol.z.rows(0, n_r).into_owned();
    // A group without demand has the single feasible point x = 0; remove
    // solver-tolerance residue there.
    for (routes, demand) in sys.demand_groups() {
        if demand == 0.0 {
            routes.into_iter().for_each(|r| x[r] = 0.0);
        }
    }
    let g = sol.z.rows(n_r, n_p).into_owned();
    let gamma = -sol.lambda_eq[0];
    let eta = sol.mu_in.rows(0, m_p).into_owned();
    let lambda = lmps(&sys.power, gamma, &eta);
    let d = charging_load(sys, &x, true)?;
    let dispatch = DispatchSolution {
        p: &g - &d,
        cost: generation_cost(&sys.power, &g),
        lambda,
        gamma,
        eta,
        g,
    };
    let nu: Vec<f64> = (0..layout.n_groups).map(|k| -sol.lambda_eq[1 + k]).collect();
    let xi = DVector::from_fn(n_r, |r, _| sol.mu_in[layout.route_row(r)]);
    let route_cost = sys.transport.travel_costs(&x) + sys.route_charging_price(&dispatch.lambda);
    let gen_mult: Vec<f64> = (0..layout.nonneg.len())
        .map(|k| sol.mu_in[layout.gen_row(k)])
        .collect();
    let binding = classify(sys, &x, &dispatch, &xi, &layout.nonneg, &gen_mult);
    let mut out = GueSolution {
        x,
        dispatch,
        nu,
        xi,
        route_cost,
        binding,
        warnings: Vec::new(),
    };
    out.warnings = uniqueness_warnings(sys);
    Ok(out)
}

/// Classify the binding pattern of an equilibrium.
pub(crate) fn classify(
    sys: &CoupledSystem,
    x: &DVector<f64>,
    dispatch: &DispatchSolution,
    xi: &DVector<f64>,
    nonneg: &[usize],
    gen_mult: &[f64],
) -> BindingPattern {
    let pw = &sys.power;
    let flows = &pw.shift_factor * &dispatch.p;
    let mut zero_routes = Vec::new();
    for (routes, demand) in sys.demand_groups() {
        let tol = ACTIVE_RTOL * demand + 1e-12;
        zero_routes.extend(routes.into_iter().filter(|&r| x[r] <= tol));
    }
    zero_routes.sort_unstable();
    let congested_lines: Vec<usize> = (0..pw.n_flow_constraints())
        .filter(|&l| flows[l] >= pw.f_cap[l] - binding_tol(pw.f_cap[l]))
        .collect();
    let idle: Vec<usize> = nonneg
        .iter()
        .enumerate()
        .filter(|(_, &i)| dispatch.g[i] <= binding_tol(0.0))
        .map(|(k, _)| k)
        .collect();
    let price_scale = 1.0 + amax(&dispatch.lambda);
    let dual_tol = DEGENERATE_RTOL * price_scale;
    let cost_tol = DEGENERATE_RTOL * (1.0 + amax(&sys.transport.travel_costs(x)) + price_scale * sys.coupling.rho);
    let degenerate = congested_lines.iter().any(|&l| dispatch.eta[l] <= dual_tol)
        || zero_routes.iter().any(|&r| xi[r] <= cost_tol)
        || idle.iter().any(|&k| gen_mult[k] <= dual_tol);
    BindingPattern {
        zero_routes,
        congested_lines,
        idle_generators: idle.iter().map(|&k| nonneg[k]).collect(),
        degenerate,
    }
}

fn uniqueness_warnings(sys: &CoupledSystem) -> Vec<String> {
    let mut w = Vec::new();
    let a = sys.transport.route_cost_matrix();
    if rank(&a) < sys.n_routes() {
        w.push("NONUNIQUE_WARNING: route cost matrix is singular; route flows may be nonunique".to_string());
    }
    let pw = &sys.power;
    if (0..sys.n_buses()).any(|i| pw.generator_mask[i] && pw.q_diag[i] <= 0.0) {
        w.push("NONUNIQUE_WARNING: a dispatchable bus has zero quadratic cost; generation may be nonunique".to_string());
    }
    w
}

/// Compute the GUE of `sys` at the default tolerance.
pub fn solve_gue(sys: &CoupledSystem) -> Result<GueSolution> {
    solve_gue_with(sys, DEFAULT_TOL)
}

/// Compute the GUE of `sys` with an explicit solver tolerance.
///
/// After the joint solve the dispatch is re-solved at the equilibrium load as
/// a consistency check: its cost must agree, and a differing LMP vector (a
/// nonunique dual) is reported as a warning.
pub fn solve_gue_with(sys: &CoupledSystem, tol: f64) -> Result<GueSolution> {
    let mut sol = solve_joint(sys, &FlowObjective::potential(sys), tol)?;
    let d = charging_load(sys, &sol.x, true)?;
    let check = economic_dispatch_with(&sys.power, &d, tol)?;
    let scale = 1.0 + check.cost.abs();
    if (check.cost - sol.dispatch.cost).abs() > 1e-6 * scale {
        return Err(Error::Degeneracy(format!(
            "dispatch cost at the equilibrium load ({}) differs from the joint program ({})",
            check.cost, sol.dispatch.cost
        )));
    }
    let lmp_gap = amax(&(&check.lambda - &sol.dispatch.lambda));
    if lmp_gap > 1e-6 * (1.0 + amax(&check.lambda)) {
        sol.warnings.push(format!(
            "DEGENERATE_DUAL: LMPs at the equilibrium load are not unique (gap {lmp_gap:e})"
        ));
        sol.binding.degenerate = true;
    }
    Ok(sol)
}

/// GUE with explicit O-D demands (each pair's flows sum to its demand).
pub fn solve_gue_multi_od(sys: &CoupledSystem, od_demands: &[OdDemand]) -> Result<GueSolution> {
    let mut s = sys.clone();
    s.od_demands = Some(od_demands.to_vec());
    let report = crate::model::validate_system(&s);
    if !report.is_ok() {
        return Err(Error::Validation(report));
    }
    solve_gue(&s)
}

/// Binding pattern of an equilibrium.
pub fn congestion_pattern(sol: &GueSolution) -> BindingPattern {
    sol.binding.clone()
}

/// JSON dump of an equilibrium with its social costs.
pub fn gue_json(sys: &CoupledSystem, sol: &GueSolution) -> serde_json::Value {
    let costs = crate::metrics::social_costs(sys, sol);
    let v = |x: &DVector<f64>| x.iter().copied().collect::<Vec<f64>>();
    let nu = if sol.nu.len() == 1 {
        serde_json::json!(sol.nu[0])
    } else {
        serde_json::json!(sol.nu)
    };
    serde_json::json!({
        "x": v(&sol.x),
        "g": v(&sol.dispatch.g),
        "p": v(&sol.dispatch.p),
        "lambda": v(&sol.dispatch.lambda),
        "eta": v(&sol.dispatch.eta),
        "nu": nu,
        "phi_t": costs.phi_t,
        "phi_p": costs.phi_p,
        "phi_c": costs.phi_c,
        "congested_lines": sol.binding.congested_lines,
        "zero_routes": sol.binding.zero_routes,
    })
}
