// SPDX-License-Identifier: MIT OR Apache-2.0

//! Subnetwork / route-bundle reduction of coupled systems with a radial
//! (tree or forest) power network, and the analytic Braess-paradox
//! conditions that follow from it.
//!
//! At a GUE, deleting the congested lines splits a radial grid into
//! *subnetworks* whose buses share one LMP. The active routes charging
//! inside a subnetwork form its *route bundle*; their travel costs are equal,
//! so each bundle behaves like a single route with an affine common cost
//! `ĉ_k = α̂_kᵀx̂ + β̂_k`, and each subnetwork like a single generator with
//! cost slope `Q̂_k`. The resulting K-dimensional *aggregated system*
//!
//! ```text
//! α̂x̂ + β̂ + ρλ̂ = η1,   λ̂ = diag(Q̂)(ρx̂ + d̂ + f̂) + μ̂,   1ᵀx̂ = N
//! ```
//!
//! has the closed-form sensitivity matrix `B̂_ul⁻¹ = Γ⁻¹ − Γ⁻¹11ᵀΓ⁻¹/D`
//! (`Γ = α̂ + ρ²diag(Q̂)`, `D = 1ᵀΓ⁻¹1`), from which every BP condition is a
//! sign test. Each condition carries the derivative it is equivalent to, so
//! verdicts can be cross-checked against [`crate::metrics`].

use std::collections::BTreeSet;
use std::fmt;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use serde_json::json;

use crate::equilibrium::{transport_ue, GueSolution, ACTIVE_RTOL};
use crate::error::{Error, Result};
use crate::linalg::{amax, condition_number};
use crate::metrics::{social_costs, BpType, VERDICT_RTOL};
use crate::model::{CoupledSystem, PowerNetwork, TransportationNetwork};

/// Relative spread of LMPs allowed inside one subnetwork
/// (`1e-6·(1+max|λ|)`).
pub const LMP_RTOL: f64 = 1e-6;

/// Relative spread of travel costs allowed inside one route bundle.
pub const COST_RTOL: f64 = 1e-6;

/// Condition number above which the flow/aggregate-flow matrix `M` is
/// treated as singular.
pub const M_COND_MAX: f64 = 1e12;

/// Relative step for finite differences of the aggregation map and of the
/// bundle-restricted UE.
const FD_RSTEP: f64 = 1e-6;

// ---------------------------------------------------------------------------
// Topology
// ---------------------------------------------------------------------------

/// Minimal union–find over bus indices.
struct DisjointSets(Vec<usize>);

impl DisjointSets {
    fn new(n: usize) -> Self {
        DisjointSets((0..n).collect())
    }

    fn find(&mut self, i: usize) -> usize {
        let mut root = i;
        while self.0[root] != root {
            root = self.0[root];
        }
        let mut cur = i;
        while self.0[cur] != root {
            let next = self.0[cur];
            self.0[cur] = root;
            cur = next;
        }
        root
    }

    /// Merge the sets of `a` and `b`; false when they were already joined.
    fn union(&mut self, a: usize, b: usize) -> bool {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return false;
        }
        self.0[ra] = rb;
        true
    }
}

fn line_endpoints(power: &PowerNetwork) -> Result<&[[usize; 2]]> {
    power.lines.as_deref().ok_or_else(|| {
        Error::Precondition("radial analysis needs the bus endpoints of every line (`lines`)".into())
    })
}

/// Check that the undirected line graph is a forest (no cycles, no parallel
/// lines, no self-loops).
pub fn assert_radial(power: &PowerNetwork) -> Result<()> {
    let lines = line_endpoints(power)?;
    let mut sets = DisjointSets::new(power.n_buses());
    for (l, &[a, b]) in lines.iter().enumerate() {
        if a >= power.n_buses() || b >= power.n_buses() {
            return Err(Error::DimensionMismatch(format!("line {l} references a bus that does not exist")));
        }
        if !sets.union(a, b) {
            return Err(Error::NotRadial(format!("line {l} ({a}–{b}) closes a cycle in the power network")));
        }
    }
    Ok(())
}

/// Physical lines with at least one congested constraint row.
fn congested_line_set(sys: &CoupledSystem, gue: &GueSolution) -> BTreeSet<usize> {
    gue.binding
        .congested_lines
        .iter()
        .map(|&row| sys.power.line_index[row])
        .collect()
}

/// Buses on the side of `line` that contains `start` once `line` is removed.
fn side_of_line(power: &PowerNetwork, lines: &[[usize; 2]], line: usize, start: usize) -> Vec<bool> {
    let n = power.n_buses();
    let mut seen = vec![false; n];
    let mut stack = vec![start];
    seen[start] = true;
    while let Some(i) = stack.pop() {
        for (l, &[a, b]) in lines.iter().enumerate() {
            if l == line {
                continue;
            }
            let other = if a == i {
                b
            } else if b == i {
                a
            } else {
                continue;
            };
            if !seen[other] {
                seen[other] = true;
                stack.push(other);
            }
        }
    }
    seen
}

/// Signed flow on every line of a radial grid, positive from
/// `lines[ℓ][0]` to `lines[ℓ][1]`, from the net injections `p`.
///
/// Removing a line splits its tree in two; the flow it carries equals the
/// net injection of the side containing its first endpoint.
pub fn radial_line_flows(power: &PowerNetwork, p: &DVector<f64>) -> Result<DVector<f64>> {
    assert_radial(power)?;
    let lines = line_endpoints(power)?;
    let mut f = DVector::zeros(lines.len());
    for (l, &[a, _]) in lines.iter().enumerate() {
        let side = side_of_line(power, lines, l, a);
        f[l] = (0..power.n_buses()).filter(|&i| side[i]).map(|i| p[i]).sum();
    }
    Ok(f)
}

// ---------------------------------------------------------------------------
// Subnetworks and route bundles
// ---------------------------------------------------------------------------

/// Buses joined by uncongested lines at a GUE.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Subnetwork {
    pub buses: Vec<usize>,
    /// Uncongested lines between member buses.
    pub internal_lines: Vec<usize>,
    /// Common LMP (mean over members).
    pub lmp: f64,
}

/// Active routes charging inside one subnetwork.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RouteBundle {
    /// Index of the subnetwork the routes charge in.
    pub subnetwork: usize,
    pub routes: Vec<usize>,
    /// `x̂_k`, the total flow of the bundle.
    pub aggregate_flow: f64,
    /// Common travel cost `ĉ_k` (charging excluded).
    pub common_cost: f64,
}

/// Connected components of the grid after deleting the congested lines,
/// ordered by smallest member bus.
pub fn partition_subnetworks(sys: &CoupledSystem, gue: &GueSolution) -> Result<Vec<Subnetwork>> {
    let power = &sys.power;
    assert_radial(power)?;
    let lines = line_endpoints(power)?;
    let congested = congested_line_set(sys, gue);
    let n = power.n_buses();
    let mut sets = DisjointSets::new(n);
    for (l, &[a, b]) in lines.iter().enumerate() {
        if !congested.contains(&l) {
            sets.union(a, b);
        }
    }
    let mut roots: Vec<usize> = Vec::new();
    let mut members: Vec<Vec<usize>> = Vec::new();
    for i in 0..n {
        let r = sets.find(i);
        match roots.iter().position(|&x| x == r) {
            Some(k) => members[k].push(i),
            None => {
                roots.push(r);
                members.push(vec![i]);
            }
        }
    }
    let lambda = &gue.dispatch.lambda;
    let tol = LMP_RTOL * (1.0 + amax(lambda));
    let mut out = Vec::with_capacity(members.len());
    for buses in members {
        let (lo, hi) = buses
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &i| (lo.min(lambda[i]), hi.max(lambda[i])));
        if hi - lo > tol {
            return Err(Error::Degeneracy(format!(
                "LMPs in the subnetwork {buses:?} spread by {:.3e} although no line between them is congested",
                hi - lo
            )));
        }
        let internal_lines = (0..lines.len())
            .filter(|&l| !congested.contains(&l) && buses.contains(&lines[l][0]))
            .collect();
        let lmp = buses.iter().map(|&i| lambda[i]).sum::<f64>() / buses.len() as f64;
        out.push(Subnetwork {
            buses,
            internal_lines,
            lmp,
        });
    }
    Ok(out)
}

/// Threshold below which a route counts as unused.
fn active_threshold(sys: &CoupledSystem) -> f64 {
    ACTIVE_RTOL * sys.total_demand() + 1e-12
}

/// Route bundles of the subnetworks that host at least one active route,
/// in subnetwork order. Subnetworks without active routes get no bundle.
pub fn route_bundles(sys: &CoupledSystem, gue: &GueSolution, subnets: &[Subnetwork]) -> Result<Vec<RouteBundle>> {
    let thr = active_threshold(sys);
    let travel = sys.transport.travel_costs(&gue.x);
    let mut out = Vec::new();
    for (k, s) in subnets.iter().enumerate() {
        let routes: Vec<usize> = (0..sys.n_routes())
            .filter(|&r| gue.x[r] > thr && s.buses.contains(&sys.route_bus(r)))
            .collect();
        if routes.is_empty() {
            continue;
        }
        let costs: Vec<f64> = routes.iter().map(|&r| travel[r]).collect();
        let (lo, hi) = costs
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &c| (lo.min(c), hi.max(c)));
        if hi - lo > COST_RTOL * (1.0 + hi.abs()) {
            return Err(Error::Degeneracy(format!(
                "travel costs of the routes {routes:?} charging in one subnetwork differ by {:.3e}",
                hi - lo
            )));
        }
        out.push(RouteBundle {
            subnetwork: k,
            aggregate_flow: routes.iter().map(|&r| gue.x[r]).sum(),
            common_cost: costs.iter().sum::<f64>() / costs.len() as f64,
            routes,
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Aggregated system
// ---------------------------------------------------------------------------

/// A congested line between two subnetworks, oriented by its dispatched
/// flow.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TieLine {
    pub line: usize,
    /// Subnetwork the power leaves.
    pub from_subnetwork: usize,
    /// Subnetwork the power enters.
    pub to_subnetwork: usize,
    /// Line capacity `f̄_ℓ` (the flow it carries).
    pub capacity: f64,
}

/// The K-dimensional reduction of a GUE on a radial grid.
///
/// Bundle-level quantities (index `k < K`) follow the order of the bundles;
/// `subnet_*` quantities cover every subnetwork, including those without a
/// bundle.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregatedSystem {
    pub k: usize,
    pub rho: f64,
    pub demand: f64,
    /// Subnetwork of every bundle.
    pub bundle_subnetwork: Vec<usize>,
    /// Active routes in bundle order; `x_act = Ĉx̂ + q̂` over these.
    pub active_routes: Vec<usize>,
    /// α̂ (K × K); row k gives the common cost slope of bundle k.
    pub alpha_hat: DMatrix<f64>,
    pub beta_hat: DVector<f64>,
    /// Harmonic aggregation `(1ᵀQ_k⁻¹1)⁻¹` over the dispatchable generators
    /// of each bundle's subnetwork.
    pub q_hat: DVector<f64>,
    pub mu_hat: DVector<f64>,
    /// Base load of each bundle's subnetwork.
    pub base_hat: DVector<f64>,
    pub tie_lines: Vec<TieLine>,
    /// Ŝ (K × tie lines): +1 where power leaves the bundle's subnetwork.
    pub s_hat: DMatrix<f64>,
    /// Ŝ over every subnetwork (subnetworks × tie lines).
    pub subnet_s: DMatrix<f64>,
    /// `f̂ = Ŝf̄`, the net outflow of each bundle's subnetwork.
    pub f_hat: DVector<f64>,
    /// Γ = α̂ + ρ²diag(Q̂).
    pub gamma: DMatrix<f64>,
    /// D = 1ᵀΓ⁻¹1.
    pub d: f64,
    /// Upper-left K × K block of B̂⁻¹.
    pub b_ul_inv: DMatrix<f64>,
    /// Ĉ (active routes × K) and q̂ with `x_act = Ĉx̂ + q̂`.
    pub c_hat: DMatrix<f64>,
    pub q_vec: DVector<f64>,
    /// Aggregate flows x̂ and LMPs λ̂ of the bundles.
    pub x_hat: DVector<f64>,
    pub lambda_hat: DVector<f64>,
    /// LMP of every subnetwork.
    pub subnet_lmp: DVector<f64>,
    /// Equilibrium travel-plus-charging cost η.
    pub eta: f64,
    /// Social costs of the underlying GUE (verdict noise floors).
    pub phi_t: f64,
    pub phi_p: f64,
}

/// Ĉ, q̂, α̂ and β̂ of the bundles at slopes `alpha`.
struct BundleAffine {
    c_hat: DMatrix<f64>,
    q_vec: DVector<f64>,
    alpha_hat: DMatrix<f64>,
    beta_hat: DVector<f64>,
}

fn bundle_affine(transport: &TransportationNetwork, alpha: &DVector<f64>, bundles: &[Vec<usize>]) -> Result<BundleAffine> {
    let t = TransportationNetwork {
        alpha: alpha.clone(),
        ..transport.clone()
    };
    let a_full = t.route_cost_matrix();
    let b_full = t.route_free_cost();
    let active: Vec<usize> = bundles.iter().flatten().copied().collect();
    let (r, k) = (active.len(), bundles.len());
    let a_act = DMatrix::from_fn(r, r, |i, j| a_full[(active[i], active[j])]);
    let b_act = DVector::from_fn(r, |i, _| b_full[active[i]]);
    // M stacks the equal-cost rows of consecutive routes of every bundle
    // (E Ã) above one bundle-sum row per bundle.
    let mut m = DMatrix::zeros(r, r);
    let mut rhs_b = DVector::zeros(r - k);
    let mut row = 0;
    let mut offset = 0;
    for routes in bundles {
        for j in 0..routes.len() - 1 {
            let (u, v) = (offset + j, offset + j + 1);
            m.set_row(row, &(a_act.row(u) - a_act.row(v)));
            rhs_b[row] = -(b_act[u] - b_act[v]);
            row += 1;
        }
        offset += routes.len();
    }
    offset = 0;
    for (kk, routes) in bundles.iter().enumerate() {
        for j in 0..routes.len() {
            m[(r - k + kk, offset + j)] = 1.0;
        }
        offset += routes.len();
    }
    let cond = condition_number(&m);
    if cond.is_nan() || cond > M_COND_MAX {
        return Err(Error::SingularM(format!(
            "flow/aggregate-flow matrix M is singular at this equilibrium (condition number {cond:.3e})"
        )));
    }
    let m_inv = m
        .try_inverse()
        .ok_or_else(|| Error::SingularM("flow/aggregate-flow matrix M is not invertible".into()))?;
    let c_hat = m_inv.columns(r - k, k).into_owned();
    let q_vec = m_inv.columns(0, r - k) * rhs_b;
    let slope = &a_act * &c_hat;
    let free = &a_act * &q_vec + &b_act;
    let mut alpha_hat = DMatrix::zeros(k, k);
    let mut beta_hat = DVector::zeros(k);
    offset = 0;
    for (kk, routes) in bundles.iter().enumerate() {
        let n = routes.len() as f64;
        for j in 0..routes.len() {
            for s in 0..k {
                alpha_hat[(kk, s)] += slope[(offset + j, s)] / n;
            }
            beta_hat[kk] += free[offset + j] / n;
        }
        offset += routes.len();
    }
    Ok(BundleAffine {
        c_hat,
        q_vec,
        alpha_hat,
        beta_hat,
    })
}

/// `B̂_ul⁻¹` and D from Γ.
fn b_ul_inverse(gamma: &DMatrix<f64>) -> Result<(DMatrix<f64>, f64)> {
    let k = gamma.nrows();
    let g_inv = gamma
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::Degeneracy("aggregated cost matrix Γ is singular".into()))?;
    let ones = DVector::from_element(k, 1.0);
    let g1 = &g_inv * &ones;
    let g1t = g_inv.transpose() * &ones;
    let d = ones.dot(&g1);
    if d.abs() < 1e-300 {
        return Err(Error::Degeneracy("Schur complement 1ᵀΓ⁻¹1 vanishes".into()));
    }
    Ok((&g_inv - &g1 * g1t.transpose() / d, d))
}

/// Reduce `gue` to its aggregated system.
pub fn aggregate(
    sys: &CoupledSystem,
    gue: &GueSolution,
    subnets: &[Subnetwork],
    bundles: &[RouteBundle],
) -> Result<AggregatedSystem> {
    if sys.demand_groups().len() != 1 {
        return Err(Error::Precondition(
            "the aggregated system is defined for a single origin-destination pair".into(),
        ));
    }
    if bundles.is_empty() {
        return Err(Error::Precondition("no route carries flow; nothing to aggregate".into()));
    }
    let power = &sys.power;
    let lines = line_endpoints(power)?;
    let k = bundles.len();
    let rho = sys.coupling.rho;
    let subnet_of = |bus: usize| subnets.iter().position(|s| s.buses.contains(&bus)).expect("partition covers every bus");

    // Subnetwork generation cost: harmonic aggregation over the generators
    // that are free to move (dispatchable and not pinned at zero).
    let free_gen = |i: usize| power.generator_mask[i] && !gue.binding.idle_generators.contains(&i);
    let n_sub = subnets.len();
    let mut sub_q = DVector::zeros(n_sub);
    let mut sub_mu = DVector::zeros(n_sub);
    let mut sub_base = DVector::zeros(n_sub);
    for (s, sub) in subnets.iter().enumerate() {
        let gens: Vec<usize> = sub.buses.iter().copied().filter(|&i| free_gen(i)).collect();
        sub_base[s] = sub.buses.iter().map(|&i| power.base_load[i]).sum();
        if gens.is_empty() {
            return Err(Error::Precondition(format!(
                "subnetwork {s} (buses {:?}) has no dispatchable generator",
                sub.buses
            )));
        }
        if let Some(&i) = gens.iter().find(|&&i| power.q_diag[i] <= 0.0) {
            sub_q[s] = 0.0;
            sub_mu[s] = power.mu[i];
        } else {
            let inv_sum: f64 = gens.iter().map(|&i| 1.0 / power.q_diag[i]).sum();
            sub_q[s] = 1.0 / inv_sum;
            sub_mu[s] = sub_q[s] * gens.iter().map(|&i| power.mu[i] / power.q_diag[i]).sum::<f64>();
        }
    }

    // Tie lines, oriented by the dispatched flow.
    let flows = radial_line_flows(power, &gue.dispatch.p)?;
    let congested = congested_line_set(sys, gue);
    let mut tie_lines = Vec::new();
    for &l in &congested {
        let [a, b] = lines[l];
        let (from, to) = if flows[l] >= 0.0 { (a, b) } else { (b, a) };
        let row = power.rows_of_line(l)[0];
        tie_lines.push(TieLine {
            line: l,
            from_subnetwork: subnet_of(from),
            to_subnetwork: subnet_of(to),
            capacity: power.f_cap[row],
        });
    }
    let mut subnet_s = DMatrix::zeros(n_sub, tie_lines.len());
    for (j, t) in tie_lines.iter().enumerate() {
        subnet_s[(t.from_subnetwork, j)] += 1.0;
        subnet_s[(t.to_subnetwork, j)] -= 1.0;
    }
    let fbar = DVector::from_iterator(tie_lines.len(), tie_lines.iter().map(|t| t.capacity));

    let bundle_subnetwork: Vec<usize> = bundles.iter().map(|b| b.subnetwork).collect();
    let route_sets: Vec<Vec<usize>> = bundles.iter().map(|b| b.routes.clone()).collect();
    let affine = bundle_affine(&sys.transport, &sys.transport.alpha, &route_sets)?;
    let pick = |v: &DVector<f64>| DVector::from_fn(k, |kk, _| v[bundle_subnetwork[kk]]);
    let q_hat = pick(&sub_q);
    let mu_hat = pick(&sub_mu);
    let base_hat = pick(&sub_base);
    let s_hat = DMatrix::from_fn(k, tie_lines.len(), |kk, j| subnet_s[(bundle_subnetwork[kk], j)]);
    let f_hat = &s_hat * &fbar;
    let gamma = &affine.alpha_hat + DMatrix::from_diagonal(&q_hat) * (rho * rho);
    let (b_ul_inv, d) = b_ul_inverse(&gamma)?;
    let x_hat = DVector::from_iterator(k, bundles.iter().map(|b| b.aggregate_flow));
    let subnet_lmp = DVector::from_iterator(n_sub, subnets.iter().map(|s| s.lmp));
    let lambda_hat = pick(&subnet_lmp);
    let costs = social_costs(sys, gue);
    let active_routes: Vec<usize> = route_sets.iter().flatten().copied().collect();

    let agg = AggregatedSystem {
        k,
        rho,
        demand: sys.total_demand(),
        bundle_subnetwork,
        active_routes,
        alpha_hat: affine.alpha_hat,
        beta_hat: affine.beta_hat,
        q_hat,
        mu_hat,
        base_hat,
        tie_lines,
        s_hat,
        subnet_s,
        f_hat,
        gamma,
        d,
        b_ul_inv,
        c_hat: affine.c_hat,
        q_vec: affine.q_vec,
        x_hat,
        lambda_hat,
        subnet_lmp,
        eta: gue.nu[0],
        phi_t: costs.phi_t,
        phi_p: costs.phi_p,
    };
    agg.verify(gue)?;
    Ok(agg)
}

/// Subnetworks, bundles and the aggregated system of a GUE.
#[derive(Debug, Clone, PartialEq)]
pub struct Reduction {
    pub subnetworks: Vec<Subnetwork>,
    pub bundles: Vec<RouteBundle>,
    pub aggregated: AggregatedSystem,
}

/// Partition, bundle and aggregate in one call.
pub fn reduce(sys: &CoupledSystem, gue: &GueSolution) -> Result<Reduction> {
    let subnetworks = partition_subnetworks(sys, gue)?;
    let bundles = route_bundles(sys, gue, &subnetworks)?;
    let aggregated = aggregate(sys, gue, &subnetworks, &bundles)?;
    Ok(Reduction {
        subnetworks,
        bundles,
        aggregated,
    })
}

impl AggregatedSystem {
    /// Solve the aggregated equilibrium equations for `(x̂, η)`.
    pub fn solve(&self) -> Result<(DVector<f64>, f64)> {
        let k = self.k;
        let mut b = DMatrix::zeros(k + 1, k + 1);
        b.view_mut((0, 0), (k, k)).copy_from(&self.gamma);
        for i in 0..k {
            b[(i, k)] = -1.0;
            b[(k, i)] = 1.0;
        }
        let mut v = DVector::zeros(k + 1);
        let load = &self.base_hat + &self.f_hat;
        for i in 0..k {
            v[i] = -(self.beta_hat[i] + self.rho * (self.q_hat[i] * load[i] + self.mu_hat[i]));
        }
        v[k] = self.demand;
        let sol = b
            .lu()
            .solve(&v)
            .ok_or_else(|| Error::Degeneracy("aggregated equilibrium system is singular".into()))?;
        Ok((sol.rows(0, k).into_owned(), sol[k]))
    }

    /// Aggregate LMPs implied by aggregate flows `x̂`.
    pub fn lmps_at(&self, x_hat: &DVector<f64>) -> DVector<f64> {
        let g = x_hat * self.rho + &self.base_hat + &self.f_hat;
        g.component_mul(&self.q_hat) + &self.mu_hat
    }

    /// Check the reduction against the full equilibrium: `x = Ĉx̂ + q̂`,
    /// `λ̂` from the aggregated dispatch, and the aggregated equilibrium
    /// reproducing `x̂`.
    fn verify(&self, gue: &GueSolution) -> Result<()> {
        let x_act = DVector::from_iterator(self.active_routes.len(), self.active_routes.iter().map(|&r| gue.x[r]));
        let scale = 1.0 + self.demand;
        let recon = &self.c_hat * &self.x_hat + &self.q_vec;
        if amax(&(recon - &x_act)) > 1e-6 * scale {
            return Err(Error::Degeneracy("route flows are not reproduced by Ĉx̂ + q̂".into()));
        }
        let lam_scale = 1.0 + amax(&self.lambda_hat);
        if amax(&(self.lmps_at(&self.x_hat) - &self.lambda_hat)) > 1e-6 * lam_scale {
            return Err(Error::Degeneracy("subnetwork LMPs disagree with the aggregated dispatch".into()));
        }
        let (x_hat, _) = self.solve()?;
        if amax(&(x_hat - &self.x_hat)) > 1e-6 * scale {
            return Err(Error::Degeneracy("the aggregated equilibrium does not reproduce x̂".into()));
        }
        Ok(())
    }

    /// Marginal travel cost `(α̂ + α̂ᵀ)x̂ + β̂`, the gradient of
    /// `Φ_T = x̂ᵀα̂x̂ + β̂ᵀx̂`.
    pub fn marginal_cost(&self) -> DVector<f64> {
        (&self.alpha_hat + self.alpha_hat.transpose()) * &self.x_hat + &self.beta_hat
    }

    /// Whether α̂ has no off-diagonal entries beyond rounding.
    pub fn alpha_hat_is_diagonal(&self) -> bool {
        let scale = 1.0 + self.alpha_hat.amax();
        (0..self.k).all(|i| (0..self.k).all(|j| i == j || self.alpha_hat[(i, j)].abs() <= 1e-10 * scale))
    }
}

/// Derivatives of the aggregate flows.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregateSensitivities {
    /// `∂x̂/∂α̂_{k,k'}` at `[k][k']`.
    pub d_alpha_hat: Vec<Vec<DVector<f64>>>,
    /// `∂x̂/∂β̂_k`.
    pub d_beta_hat: Vec<DVector<f64>>,
    /// `∂x̂/∂f̄_ℓ` for every tie line, in `tie_lines` order.
    pub d_fbar: Vec<DVector<f64>>,
}

/// `∂x̂/∂α̂_{k,k'} = −x̂_{k'}B̂_ul⁻¹e_k`, `∂x̂/∂β̂_k = −B̂_ul⁻¹e_k` and
/// `∂x̂/∂f̄_ℓ = −ρB̂_ul⁻¹diag(Q̂)Ŝe_ℓ`.
pub fn aggregate_sensitivities(agg: &AggregatedSystem) -> AggregateSensitivities {
    let k = agg.k;
    let col = |i: usize| -agg.b_ul_inv.column(i).into_owned();
    let d_alpha_hat = (0..k)
        .map(|i| (0..k).map(|j| col(i) * agg.x_hat[j]).collect())
        .collect();
    let d_beta_hat = (0..k).map(col).collect();
    let qs = DMatrix::from_diagonal(&agg.q_hat) * &agg.s_hat;
    let d_fbar = (0..agg.tie_lines.len())
        .map(|j| -(&agg.b_ul_inv * qs.column(j)) * agg.rho)
        .collect();
    AggregateSensitivities {
        d_alpha_hat,
        d_beta_hat,
        d_fbar,
    }
}

// ---------------------------------------------------------------------------
// Verdicts
// ---------------------------------------------------------------------------

/// Outcome of one analytic condition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum Verdict {
    /// The paradox occurs (the derivative clears the noise floor in the
    /// paradoxical direction).
    Occurs,
    /// The paradox does not occur.
    Absent,
    /// The derivative is within the noise floor of zero.
    Indeterminate,
}

impl Verdict {
    pub fn occurs(self) -> bool {
        self == Verdict::Occurs
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::Occurs => "occurs",
            Verdict::Absent => "absent",
            Verdict::Indeterminate => "indeterminate",
        })
    }
}

/// What a condition perturbs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum Subject {
    /// A route's total congestion slope (any link used only by it).
    Route(usize),
    /// A road link's slope `α_ℓ`.
    Link(usize),
    /// A physical line's capacity `f̄_ℓ`.
    Line(usize),
    /// An entry `α̂_{k,k'}` of the aggregated slope matrix.
    AlphaHat(usize, usize),
    /// An aggregated free-flow cost `β̂_k`.
    BetaHat(usize),
}

impl fmt::Display for Subject {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Subject::Route(r) => write!(f, "route:{r}"),
            Subject::Link(l) => write!(f, "alpha:{l}"),
            Subject::Line(l) => write!(f, "fbar:{l}"),
            Subject::AlphaHat(i, j) => write!(f, "alpha_hat:{i},{j}"),
            Subject::BetaHat(k) => write!(f, "beta_hat:{k}"),
        }
    }
}

/// One evaluated condition with the derivative it is equivalent to.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Condition {
    pub bp_type: BpType,
    pub subject: Subject,
    /// `∂Φ/∂θ` for the perturbed parameter θ (road slopes: BP when
    /// negative; line capacities: BP when positive).
    pub derivative: f64,
    pub verdict: Verdict,
}

/// Evaluated conditions with their named intermediates.
#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct ConditionVerdicts {
    /// ω per route (fully congested) or per bundle (aggregated).
    pub omega: Vec<f64>,
    pub omega_tilde: Vec<f64>,
    pub psi: Vec<f64>,
    /// ς per bus (fully congested) or per subnetwork (aggregated); equal to
    /// the LMP where no active route charges.
    pub varsigma: Vec<f64>,
    pub conditions: Vec<Condition>,
}

impl ConditionVerdicts {
    /// Verdict of `bp_type` at `subject`, if evaluated.
    pub fn verdict(&self, bp_type: BpType, subject: Subject) -> Option<Verdict> {
        self.conditions
            .iter()
            .find(|c| c.bp_type == bp_type && c.subject == subject)
            .map(|c| c.verdict)
    }

    /// Whether `bp_type` occurs anywhere.
    pub fn any(&self, bp_type: BpType) -> bool {
        self.conditions.iter().any(|c| c.bp_type == bp_type && c.verdict.occurs())
    }
}

fn cost_floor(bp_type: BpType, phi_t: f64, phi_p: f64) -> f64 {
    let phi = match bp_type {
        BpType::TT | BpType::PT => phi_t,
        BpType::TP | BpType::PP => phi_p,
        BpType::TC | BpType::PC => phi_t + phi_p,
    };
    VERDICT_RTOL * (1.0 + phi.abs())
}

/// Classify a derivative: road slopes are paradoxical when the derivative is
/// negative, line capacities when it is positive. A derivative that is zero
/// by structure (not merely small) is `Absent`.
fn classify(bp_type: BpType, derivative: f64, tol: f64, structural_zero: bool) -> Verdict {
    if structural_zero {
        return Verdict::Absent;
    }
    let signed = match bp_type {
        BpType::TT | BpType::TP | BpType::TC => -derivative,
        BpType::PT | BpType::PP | BpType::PC => derivative,
    };
    if signed > tol {
        Verdict::Occurs
    } else if signed < -tol {
        Verdict::Absent
    } else {
        Verdict::Indeterminate
    }
}

fn condition(bp_type: BpType, subject: Subject, derivative: f64, phi: (f64, f64), structural_zero: bool) -> Condition {
    let tol = cost_floor(bp_type, phi.0, phi.1);
    Condition {
        bp_type,
        subject,
        derivative,
        verdict: classify(bp_type, derivative, tol, structural_zero),
    }
}

/// Conditions for a grid without congested lines: the power network never
/// causes a paradox and road expansion cannot raise the generation cost;
/// T-T occurs exactly where classical BP occurs in the single bundle.
pub fn check_uncongested(sys: &CoupledSystem, gue: &GueSolution) -> Result<ConditionVerdicts> {
    if !gue.binding.congested_lines.is_empty() {
        return Err(Error::Precondition(format!(
            "the power network is congested (rows {:?})",
            gue.binding.congested_lines
        )));
    }
    let thr = active_threshold(sys);
    let routes: Vec<usize> = (0..sys.n_routes()).filter(|&r| gue.x[r] > thr).collect();
    let bundle = RouteBundle {
        subnetwork: 0,
        aggregate_flow: routes.iter().map(|&r| gue.x[r]).sum(),
        common_cost: 0.0,
        routes,
    };
    let costs = social_costs(sys, gue);
    let phi = (costs.phi_t, costs.phi_p);
    let mut out = classical_bp_in_bundle(sys, &bundle, bundle.aggregate_flow, phi)?;
    let links: Vec<usize> = out.conditions.iter().map(|c| c.subject).filter_map(|s| match s {
        Subject::Link(l) => Some(l),
        _ => None,
    }).collect();
    for l in links {
        out.conditions.push(condition(BpType::TP, Subject::Link(l), 0.0, phi, true));
    }
    for l in 0..sys.power.n_lines() {
        out.conditions.push(condition(BpType::PT, Subject::Line(l), 0.0, phi, true));
        out.conditions.push(condition(BpType::PP, Subject::Line(l), 0.0, phi, true));
    }
    Ok(out)
}

/// The routes and buses of a fully congested radial GUE whose active routes
/// share neither links nor buses.
struct FullyCongested {
    routes: Vec<usize>,
    /// Bus of every active route.
    bus: Vec<usize>,
}

fn fully_congested_setup(sys: &CoupledSystem, gue: &GueSolution) -> Result<FullyCongested> {
    assert_radial(&sys.power)?;
    if sys.demand_groups().len() != 1 {
        return Err(Error::Precondition("a single origin-destination pair is required".into()));
    }
    let congested = congested_line_set(sys, gue);
    if let Some(l) = (0..sys.power.n_lines()).find(|l| !congested.contains(l)) {
        return Err(Error::Precondition(format!("A1 fails: line {l} is not congested")));
    }
    let thr = active_threshold(sys);
    let routes: Vec<usize> = (0..sys.n_routes()).filter(|&r| gue.x[r] > thr).collect();
    let bus: Vec<usize> = routes.iter().map(|&r| sys.route_bus(r)).collect();
    let a = &sys.transport.link_route;
    for i in 0..routes.len() {
        for j in i + 1..routes.len() {
            if bus[i] == bus[j] {
                return Err(Error::Precondition(format!(
                    "A2 fails: active routes {} and {} charge at the same bus {}",
                    routes[i], routes[j], bus[i]
                )));
            }
            if (0..a.nrows()).any(|l| a[(l, routes[i])] != 0.0 && a[(l, routes[j])] != 0.0) {
                return Err(Error::Precondition(format!(
                    "A2 fails: active routes {} and {} share a link",
                    routes[i], routes[j]
                )));
            }
        }
    }
    for &i in &bus {
        if !sys.power.generator_mask[i] || gue.binding.idle_generators.contains(&i) || sys.power.q_diag[i] <= 0.0 {
            return Err(Error::Precondition(format!(
                "bus {i} hosts an active route but has no generator with a positive cost slope"
            )));
        }
    }
    Ok(FullyCongested { routes, bus })
}

/// Conditions for a fully congested radial grid whose active routes share
/// neither links nor buses.
///
/// Per active route r (charging at bus i_r) with `α̂_r`, `β̂_r` the sums of
/// the slopes and free-flow costs of its links:
///
/// * `ω_r = 1/(α̂_r + ρ²Q_{i_r})`, `ω̃ = ω/Σω`;
/// * `ψ_r = ω_r((2α̂_r x_r + β̂_r) − Σ ω̃_{r'}(2α̂_{r'}x_{r'} + β̂_{r'}))`;
/// * T-T at r iff `x_r < ψ_r`; T-P at r iff `Σ ω̃_{r'}(λ_{i_r} − λ_{i_{r'}}) > 0`.
///
/// Per line carrying power from i to i': P-T iff
/// `Q_iψ_{r_i}·1{i active} − Q_{i'}ψ_{r_{i'}}·1{i' active} < 0`, and P-P iff
/// `ς_i − ς_{i'} > 0` with `ς_i = λ_i − ρ²Q_iω_{r_i}Σω̃_{r'}(λ_i − λ_{i_{r'}})`
/// at active buses and `ς_i = λ_i` elsewhere.
pub fn check_fully_congested(sys: &CoupledSystem, gue: &GueSolution) -> Result<ConditionVerdicts> {
    let setup = fully_congested_setup(sys, gue)?;
    let (routes, bus) = (&setup.routes, &setup.bus);
    let n = routes.len();
    let rho = sys.coupling.rho;
    let q = &sys.power.q_diag;
    let lambda = &gue.dispatch.lambda;
    let a_tilde = sys.transport.route_cost_matrix();
    let beta_r = sys.transport.route_free_cost();
    let alpha_hat: Vec<f64> = routes.iter().map(|&r| a_tilde[(r, r)]).collect();
    let beta_hat: Vec<f64> = routes.iter().map(|&r| beta_r[r]).collect();
    let x: Vec<f64> = routes.iter().map(|&r| gue.x[r]).collect();
    let omega: Vec<f64> = (0..n).map(|j| 1.0 / (alpha_hat[j] + rho * rho * q[bus[j]])).collect();
    let total: f64 = omega.iter().sum();
    let omega_tilde: Vec<f64> = omega.iter().map(|w| w / total).collect();
    let marginal: Vec<f64> = (0..n).map(|j| 2.0 * alpha_hat[j] * x[j] + beta_hat[j]).collect();
    let mean_marginal: f64 = (0..n).map(|j| omega_tilde[j] * marginal[j]).sum();
    let psi: Vec<f64> = (0..n).map(|j| omega[j] * (marginal[j] - mean_marginal)).collect();
    let lam: Vec<f64> = bus.iter().map(|&i| lambda[i]).collect();
    let spread = |j: usize| -> f64 { (0..n).map(|jj| omega_tilde[jj] * (lam[j] - lam[jj])).sum() };

    let costs = social_costs(sys, gue);
    let phi = (costs.phi_t, costs.phi_p);
    let single = n <= 1;
    let mut conditions = Vec::new();
    for j in 0..n {
        // ∂Φ_T/∂α̂_r = x_r(x_r − ψ_r) and ∂Φ_P/∂α̂_r = −ρx_rω_rΣω̃(λ_{i_r} − λ_{i_r'}).
        let d_t = x[j] * (x[j] - psi[j]);
        let d_p = -rho * x[j] * omega[j] * spread(j);
        conditions.push(condition(BpType::TT, Subject::Route(routes[j]), d_t, phi, false));
        conditions.push(condition(BpType::TP, Subject::Route(routes[j]), d_p, phi, single));
    }

    let n_bus = sys.n_buses();
    let route_at = |i: usize| bus.iter().position(|&b| b == i);
    let varsigma: Vec<f64> = (0..n_bus)
        .map(|i| match route_at(i) {
            Some(j) => lambda[i] - rho * rho * q[i] * omega[j] * spread(j),
            None => lambda[i],
        })
        .collect();
    let lines = line_endpoints(&sys.power)?;
    let flows = radial_line_flows(&sys.power, &gue.dispatch.p)?;
    for (l, &[a, b]) in lines.iter().enumerate() {
        let (from, to) = if flows[l] >= 0.0 { (a, b) } else { (b, a) };
        let effect = |i: usize| route_at(i).map_or(0.0, |j| q[i] * psi[j]);
        let d_t = -rho * (effect(from) - effect(to));
        let d_p = varsigma[from] - varsigma[to];
        let idle_ends = route_at(from).is_none() && route_at(to).is_none();
        conditions.push(condition(BpType::PT, Subject::Line(l), d_t, phi, idle_ends || single));
        conditions.push(condition(BpType::PP, Subject::Line(l), d_p, phi, false));
    }
    Ok(ConditionVerdicts {
        omega,
        omega_tilde,
        psi,
        varsigma,
        conditions,
    })
}

/// Aggregated T-BP (ATBP) conditions: signs of `∂Φ_T` and `∂Φ_P` with
/// respect to every `α̂_{k,k'}` and `β̂_k`.
///
/// `omega`, `omega_tilde` and `psi` hold `ω_k = 1/(α̂_{k,k} + ρ²Q̂_k)`, its
/// normalization, and `ψ̂_k = ((α̂+α̂ᵀ)x̂ + β̂)ᵀB̂_ul⁻¹e_k`, which reduces to
/// `ω_k((2α̂_{k,k}x̂_k + β̂_k) − Σ ω̃_{k'}(2α̂_{k',k'}x̂_{k'} + β̂_{k'}))` when α̂
/// is diagonal.
pub fn check_atbp(agg: &AggregatedSystem) -> ConditionVerdicts {
    let k = agg.k;
    let rho = agg.rho;
    let phi = (agg.phi_t, agg.phi_p);
    let marginal = agg.marginal_cost();
    // Row vectors mᵀB̂_ul⁻¹ and λ̂ᵀB̂_ul⁻¹.
    let psi_row = agg.b_ul_inv.transpose() * &marginal;
    let lam_row = agg.b_ul_inv.transpose() * &agg.lambda_hat;
    let single = k == 1;
    let mut conditions = Vec::new();
    for i in 0..k {
        for j in 0..k {
            let d_t = agg.x_hat[i] * agg.x_hat[j] - agg.x_hat[j] * psi_row[i];
            let d_p = -rho * agg.x_hat[j] * lam_row[i];
            conditions.push(condition(BpType::TT, Subject::AlphaHat(i, j), d_t, phi, false));
            conditions.push(condition(BpType::TP, Subject::AlphaHat(i, j), d_p, phi, single));
        }
    }
    for i in 0..k {
        let d_t = agg.x_hat[i] - psi_row[i];
        let d_p = -rho * lam_row[i];
        conditions.push(condition(BpType::TT, Subject::BetaHat(i), d_t, phi, false));
        conditions.push(condition(BpType::TP, Subject::BetaHat(i), d_p, phi, single));
    }
    let omega: Vec<f64> = (0..k)
        .map(|i| 1.0 / (agg.alpha_hat[(i, i)] + rho * rho * agg.q_hat[i]))
        .collect();
    let total: f64 = omega.iter().sum();
    let omega_tilde = omega.iter().map(|w| w / total).collect();
    ConditionVerdicts {
        omega,
        omega_tilde,
        psi: psi_row.iter().copied().collect(),
        varsigma: aggregated_varsigma(agg).iter().copied().collect(),
        conditions,
    }
}

/// ψ̂ from the diagonal-α̂ closed form (meaningful only when α̂ is
/// diagonal).
pub fn psi_hat_diagonal(agg: &AggregatedSystem) -> Vec<f64> {
    let k = agg.k;
    let rho = agg.rho;
    let omega: Vec<f64> = (0..k)
        .map(|i| 1.0 / (agg.alpha_hat[(i, i)] + rho * rho * agg.q_hat[i]))
        .collect();
    let total: f64 = omega.iter().sum();
    let marginal: Vec<f64> = (0..k)
        .map(|i| 2.0 * agg.alpha_hat[(i, i)] * agg.x_hat[i] + agg.beta_hat[i])
        .collect();
    let mean: f64 = (0..k).map(|i| omega[i] / total * marginal[i]).sum();
    (0..k).map(|i| omega[i] * (marginal[i] - mean)).collect()
}

/// ς̂ per subnetwork: `λ̂_k − ρ²Q̂_k(λ̂ᵀB̂_ul⁻¹)_k` for bundle subnetworks,
/// the LMP elsewhere.
fn aggregated_varsigma(agg: &AggregatedSystem) -> DVector<f64> {
    let lam_row = agg.b_ul_inv.transpose() * &agg.lambda_hat;
    let mut out = agg.subnet_lmp.clone();
    for (kk, &s) in agg.bundle_subnetwork.iter().enumerate() {
        out[s] -= agg.rho * agg.rho * agg.q_hat[kk] * lam_row[kk];
    }
    out
}

/// Power-induced BP conditions on every tie line of the aggregated system:
/// `∂Φ_T/∂f̄ = −ρ((α̂+α̂ᵀ)x̂ + β̂)ᵀB̂_ul⁻¹diag(Q̂)Ŝe` and
/// `∂Φ_P/∂f̄ = λ̂ᵀŜe − ρ²λ̂ᵀB̂_ul⁻¹diag(Q̂)Ŝe` (equal to `ς̂_i − ς̂_{i'}` for
/// power flowing from subnetwork i to i').
pub fn check_pbp_aggregated(agg: &AggregatedSystem) -> ConditionVerdicts {
    let rho = agg.rho;
    let phi = (agg.phi_t, agg.phi_p);
    let marginal = agg.marginal_cost();
    let qs = DMatrix::from_diagonal(&agg.q_hat) * &agg.s_hat;
    let t_row = (agg.b_ul_inv.transpose() * &marginal).transpose() * &qs * (-rho);
    let varsigma = aggregated_varsigma(agg);
    let p_row = varsigma.transpose() * &agg.subnet_s;
    let single = agg.k == 1;
    let mut conditions = Vec::new();
    for (j, t) in agg.tie_lines.iter().enumerate() {
        let idle_ends = !agg.bundle_subnetwork.contains(&t.from_subnetwork)
            && !agg.bundle_subnetwork.contains(&t.to_subnetwork);
        conditions.push(condition(BpType::PT, Subject::Line(t.line), t_row[j], phi, single || idle_ends));
        conditions.push(condition(BpType::PP, Subject::Line(t.line), p_row[j], phi, false));
    }
    let atbp = check_atbp(agg);
    ConditionVerdicts {
        omega: atbp.omega,
        omega_tilde: atbp.omega_tilde,
        psi: atbp.psi,
        varsigma: varsigma.iter().copied().collect(),
        conditions,
    }
}

/// Total travel cost of the bundle-restricted, fixed-demand UE.
fn bundle_travel_cost(transport: &TransportationNetwork, routes: &[usize], demand: f64) -> Result<f64> {
    let link_route = DMatrix::from_fn(transport.n_links(), routes.len(), |l, j| transport.link_route[(l, routes[j])]);
    let t = TransportationNetwork {
        link_route,
        ..transport.clone()
    };
    let ue = transport_ue(&t, &DVector::zeros(routes.len()), demand)?;
    Ok(ue.x.dot(&t.travel_costs(&ue.x)))
}

/// Classical BP inside a bundle viewed as a road network with fixed demand
/// `x_hat`: a central finite difference of its UE travel cost with respect
/// to the slope of every link it uses (T-T verdict per link).
///
/// `phi` supplies the `(Φ_T, Φ_P)` noise floors.
pub fn classical_bp_in_bundle(
    sys: &CoupledSystem,
    bundle: &RouteBundle,
    x_hat: f64,
    phi: (f64, f64),
) -> Result<ConditionVerdicts> {
    let transport = &sys.transport;
    let links: Vec<usize> = (0..transport.n_links())
        .filter(|&l| bundle.routes.iter().any(|&r| transport.link_route[(l, r)] != 0.0))
        .collect();
    let mut conditions = Vec::new();
    for l in links {
        let a = transport.alpha[l];
        let h = FD_RSTEP * (1.0 + a.abs());
        let at = |v: f64| {
            let mut t = transport.clone();
            t.alpha[l] = v;
            bundle_travel_cost(&t, &bundle.routes, x_hat)
        };
        let d = if a - h > 0.0 {
            (at(a + h)? - at(a - h)?) / (2.0 * h)
        } else {
            (at(a + h)? - at(a)?) / h
        };
        // Single-route bundles cannot exhibit classical BP.
        let structural = bundle.routes.len() == 1;
        conditions.push(condition(BpType::TT, Subject::Link(l), d, phi, structural && d >= 0.0));
    }
    Ok(ConditionVerdicts {
        conditions,
        ..Default::default()
    })
}

/// T-T and T-P conditions per road link from the aggregated system and the
/// chain rule through the aggregation map:
/// `∂Φ/∂α_ℓ = Σ ∂Φ/∂α̂_{k,k'}·∂α̂_{k,k'}/∂α_ℓ + Σ ∂Φ/∂β̂_k·∂β̂_k/∂α_ℓ`.
pub fn link_conditions(sys: &CoupledSystem, red: &Reduction) -> Result<ConditionVerdicts> {
    let agg = &red.aggregated;
    let atbp = check_atbp(agg);
    let k = agg.k;
    let grab = |t: BpType, s: Subject| {
        atbp.conditions
            .iter()
            .find(|c| c.bp_type == t && c.subject == s)
            .map(|c| c.derivative)
            .expect("every α̂/β̂ entry is evaluated")
    };
    let route_sets: Vec<Vec<usize>> = red.bundles.iter().map(|b| b.routes.clone()).collect();
    let transport = &sys.transport;
    let phi = (agg.phi_t, agg.phi_p);
    let mut conditions = Vec::new();
    for l in 0..transport.n_links() {
        if !agg.active_routes.iter().any(|&r| transport.link_route[(l, r)] != 0.0) {
            continue;
        }
        let a = transport.alpha[l];
        let h = FD_RSTEP * (1.0 + a.abs());
        let at = |v: f64| {
            let mut alpha = transport.alpha.clone();
            alpha[l] = v;
            bundle_affine(transport, &alpha, &route_sets)
        };
        let (plus, minus) = (at(a + h)?, at(a - h)?);
        let d_alpha = (plus.alpha_hat - minus.alpha_hat) / (2.0 * h);
        let d_beta = (plus.beta_hat - minus.beta_hat) / (2.0 * h);
        let (mut d_t, mut d_p) = (0.0, 0.0);
        for i in 0..k {
            for j in 0..k {
                d_t += grab(BpType::TT, Subject::AlphaHat(i, j)) * d_alpha[(i, j)];
                d_p += grab(BpType::TP, Subject::AlphaHat(i, j)) * d_alpha[(i, j)];
            }
            d_t += grab(BpType::TT, Subject::BetaHat(i)) * d_beta[i];
            d_p += grab(BpType::TP, Subject::BetaHat(i)) * d_beta[i];
        }
        conditions.push(condition(BpType::TT, Subject::Link(l), d_t, phi, false));
        conditions.push(condition(BpType::TP, Subject::Link(l), d_p, phi, k == 1));
    }
    Ok(ConditionVerdicts {
        conditions,
        ..Default::default()
    })
}

// ---------------------------------------------------------------------------
// Relations between BP types
// ---------------------------------------------------------------------------

/// One implication between BP verdicts, checked at a specific route/line.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Implication {
    /// Short label, e.g. `"a"` or `"homogeneous b1"`.
    pub label: String,
    pub premise: String,
    pub conclusion: String,
    /// Whether the premise held (definite verdicts only).
    pub applicable: bool,
    /// Whether the conclusion held when the premise did.
    pub holds: bool,
    /// Whether the implication follows from the exact derivatives. (c) and
    /// homogeneous (b1) only follow when the LMP of the bus without active
    /// routes is left out of the P-P condition, so they can fail.
    pub derivable: bool,
}

/// Outcome of checking every applicable implication.
#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct ImplicationReport {
    pub checked: Vec<Implication>,
}

impl ImplicationReport {
    pub fn violations(&self) -> Vec<&Implication> {
        self.checked.iter().filter(|i| i.applicable && !i.holds).collect()
    }

    /// Violations of implications that follow from the exact derivatives;
    /// any entry here indicates a bug or a tolerance problem.
    pub fn derivable_violations(&self) -> Vec<&Implication> {
        self.violations().into_iter().filter(|i| i.derivable).collect()
    }
}

/// Check the relations between BP types implied by the fully congested
/// conditions, for every route/line pair they talk about.
///
/// With `r` an active route charging at bus `i_r` and `i` a bus without
/// active routes:
///
/// * (a) P-T on a line carrying power `i_r → i` ⇒ no T-T at r;
/// * (b) no P-T on a line carrying power `i → i_r` ⇒ no T-T at r;
/// * (c) no P-P on a line carrying power `i_r → i` ⇒ T-P at r;
/// * (d) P-P on a line carrying power `i → i_r` ⇒ T-P at r;
/// * (e) no P-T or P-P on lines between two buses without active routes.
///
/// When every active route has the same free-flow cost, additionally
/// T-T at r ⇒ no T-P at r, and for lines `i_r → i` (no P-T ⇒ P-P), lines
/// `i → i_r` and `i_r → i_{r'}` (P-T ⇒ no P-P).
///
/// Premises are only taken from definite verdicts; indeterminate verdicts
/// make an implication inapplicable. The exact P-P derivative on a line
/// `i_r → i` is `ς_{i_r} − λ_i`, and `λ_i ≥ λ_{i_r}` across a congested
/// line, so (c) and homogeneous (b1) are checked but flagged as not
/// derivable.
pub fn bp_relations(sys: &CoupledSystem, gue: &GueSolution, verdicts: &ConditionVerdicts) -> Result<ImplicationReport> {
    let setup = fully_congested_setup(sys, gue)?;
    let lines = line_endpoints(&sys.power)?;
    let flows = radial_line_flows(&sys.power, &gue.dispatch.p)?;
    let route_at = |i: usize| setup.bus.iter().position(|&b| b == i).map(|j| setup.routes[j]);
    let get = |t: BpType, s: Subject| verdicts.verdict(t, s).unwrap_or(Verdict::Indeterminate);
    let is = |t: BpType, s: Subject| get(t, s) == Verdict::Occurs;
    let isnt = |t: BpType, s: Subject| get(t, s) == Verdict::Absent;
    let beta_r = sys.transport.route_free_cost();
    let homogeneous = setup.routes.windows(2).all(|w| {
        (beta_r[w[0]] - beta_r[w[1]]).abs() <= 1e-12 * (1.0 + beta_r[w[0]].abs())
    });
    let mut out = ImplicationReport::default();
    let mut push = |label: &str, premise: String, conclusion: String, applicable: bool, holds: bool| {
        out.checked.push(Implication {
            label: label.into(),
            premise,
            conclusion,
            applicable,
            holds: !applicable || holds,
            derivable: label != "c" && label != "homogeneous b1",
        });
    };
    for (l, &[a, b]) in lines.iter().enumerate() {
        let (from, to) = if flows[l] >= 0.0 { (a, b) } else { (b, a) };
        let line = Subject::Line(l);
        match (route_at(from), route_at(to)) {
            (Some(r), None) => {
                let route = Subject::Route(r);
                push("a", format!("PT at {line}"), format!("no TT at {route}"),
                    is(BpType::PT, line), !is(BpType::TT, route));
                push("c", format!("no PP at {line}"), format!("TP at {route}"),
                    isnt(BpType::PP, line), is(BpType::TP, route));
                if homogeneous {
                    push("homogeneous b1", format!("no PT at {line}"), format!("PP at {line}"),
                        isnt(BpType::PT, line), is(BpType::PP, line));
                }
            }
            (None, Some(r)) => {
                let route = Subject::Route(r);
                push("b", format!("no PT at {line}"), format!("no TT at {route}"),
                    isnt(BpType::PT, line), !is(BpType::TT, route));
                push("d", format!("PP at {line}"), format!("TP at {route}"),
                    is(BpType::PP, line), is(BpType::TP, route));
                if homogeneous {
                    push("homogeneous b2", format!("PT at {line}"), format!("no PP at {line}"),
                        is(BpType::PT, line), !is(BpType::PP, line));
                }
            }
            (Some(_), Some(_)) => {
                if homogeneous {
                    push("homogeneous b3", format!("PT at {line}"), format!("no PP at {line}"),
                        is(BpType::PT, line), !is(BpType::PP, line));
                }
            }
            (None, None) => {
                push("e", format!("{line} joins buses without active routes"), format!("no PT/PP at {line}"),
                    true, !is(BpType::PT, line) && !is(BpType::PP, line));
            }
        }
    }
    if homogeneous {
        for &r in &setup.routes {
            let route = Subject::Route(r);
            push("homogeneous a", format!("TT at {route}"), format!("no TP at {route}"),
                is(BpType::TT, route), !is(BpType::TP, route));
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Report
// ---------------------------------------------------------------------------

fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn vector(v: &DVector<f64>) -> Vec<f64> {
    v.iter().copied().collect()
}

fn verdicts_json(v: &ConditionVerdicts) -> serde_json::Value {
    json!({
        "omega": v.omega,
        "omega_tilde": v.omega_tilde,
        "psi": v.psi,
        "varsigma": v.varsigma,
        "conditions": v.conditions.iter().map(|c| json!({
            "type": c.bp_type.to_string(),
            "subject": c.subject.to_string(),
            "derivative": c.derivative,
            "verdict": c.verdict.to_string(),
        })).collect::<Vec<_>>(),
    })
}

fn error_json(e: &Error) -> serde_json::Value {
    json!({ "error": e.code(), "message": e.to_string() })
}

/// Full reduction report: subnetworks, bundles, aggregated matrices, every
/// applicable condition family and the implication checks. Families whose
/// preconditions fail are reported with their error code.
pub fn reduce_report(sys: &CoupledSystem, gue: &GueSolution) -> Result<serde_json::Value> {
    let red = reduce(sys, gue)?;
    let agg = &red.aggregated;
    let sens = aggregate_sensitivities(agg);
    let costs = social_costs(sys, gue);
    let phi = (costs.phi_t, costs.phi_p);

    let classical: Vec<serde_json::Value> = red
        .bundles
        .iter()
        .map(|b| match classical_bp_in_bundle(sys, b, b.aggregate_flow, phi) {
            Ok(v) => json!({ "subnetwork": b.subnetwork, "verdicts": verdicts_json(&v) }),
            Err(e) => error_json(&e),
        })
        .collect();
    let uncongested = match check_uncongested(sys, gue) {
        Ok(v) => verdicts_json(&v),
        Err(e) => error_json(&e),
    };
    let (fully, relations) = match check_fully_congested(sys, gue) {
        Ok(v) => {
            let rel = match bp_relations(sys, gue, &v) {
                Ok(r) => json!({
                    "checked": r.checked,
                    "violations": r.violations().len(),
                    "derivable_violations": r.derivable_violations().len(),
                }),
                Err(e) => error_json(&e),
            };
            (verdicts_json(&v), rel)
        }
        Err(e) => (error_json(&e), error_json(&e)),
    };
    let links = match link_conditions(sys, &red) {
        Ok(v) => verdicts_json(&v),
        Err(e) => error_json(&e),
    };
    Ok(json!({
        "subnetworks": red.subnetworks,
        "bundles": red.bundles,
        "aggregated": {
            "K": agg.k,
            "alpha_hat": matrix_rows(&agg.alpha_hat),
            "alpha_hat_diagonal": agg.alpha_hat_is_diagonal(),
            "beta_hat": vector(&agg.beta_hat),
            "q_hat": vector(&agg.q_hat),
            "mu_hat": vector(&agg.mu_hat),
            "base_hat": vector(&agg.base_hat),
            "tie_lines": agg.tie_lines,
            "s_hat": matrix_rows(&agg.s_hat),
            "f_hat": vector(&agg.f_hat),
            "gamma": matrix_rows(&agg.gamma),
            "d": agg.d,
            "b_ul_inv": matrix_rows(&agg.b_ul_inv),
            "c_hat": matrix_rows(&agg.c_hat),
            "q_vec": vector(&agg.q_vec),
            "active_routes": agg.active_routes,
            "x_hat": vector(&agg.x_hat),
            "lambda_hat": vector(&agg.lambda_hat),
            "eta": agg.eta,
        },
        "sensitivities": {
            "d_beta_hat": sens.d_beta_hat.iter().map(vector).collect::<Vec<_>>(),
            "d_fbar": sens.d_fbar.iter().map(vector).collect::<Vec<_>>(),
        },
        "atbp": verdicts_json(&check_atbp(agg)),
        "pbp": verdicts_json(&check_pbp_aggregated(agg)),
        "links": links,
        "classical": classical,
        "uncongested": uncongested,
        "fully_congested": fully,
        "relations": relations,
    }))
}
