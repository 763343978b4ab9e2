// SPDX-License-Identifier: MIT OR Apache-2.0

//! Independent oracles shared by the integration tests and the acceptance
//! target. Nothing here calls into the active-set logic under test.

#![allow(dead_code)]

use braess::equilibrium::solve_gue;
use braess::metrics::{derivative_kkt, BpType};
use braess::model::{CoupledSystem, Coupling, Parameter, PowerNetwork, TransportationNetwork};
use braess::qp::QpProblem;
use braess::radial::{
    bp_relations, check_fully_congested, check_pbp_aggregated, link_conditions, reduce, Condition, Subject, Verdict,
};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Optimal primal-dual triple found by exhaustive active-set enumeration.
pub struct OracleSolution {
    pub z: DVector<f64>,
    pub lambda_eq: DVector<f64>,
    pub mu_in: DVector<f64>,
    pub objective: f64,
}

/// Enumerate all 2^m candidate active sets, solve each equality-constrained
/// KKT system and keep the feasible point of least objective whose
/// multipliers are nonnegative. Requires a strictly convex objective.
pub fn enumerate_active_sets(prob: &QpProblem) -> Option<OracleSolution> {
    let n = prob.n();
    let m = prob.b_in.len();
    let p = prob.b_eq.len();
    let mut best: Option<OracleSolution> = None;
    for mask in 0u32..(1u32 << m) {
        let set: Vec<usize> = (0..m).filter(|i| mask & (1 << i) != 0).collect();
        let k = p + set.len();
        if k > n {
            continue;
        }
        let mut kkt = DMatrix::zeros(n + k, n + k);
        let mut rhs = DVector::zeros(n + k);
        kkt.view_mut((0, 0), (n, n)).copy_from(&prob.p);
        for j in 0..n {
            rhs[j] = -prob.q[j];
        }
        for r in 0..k {
            let (row, b) = if r < p {
                (prob.a_eq.row(r).into_owned(), prob.b_eq[r])
            } else {
                (prob.a_in.row(set[r - p]).into_owned(), prob.b_in[set[r - p]])
            };
            for j in 0..n {
                kkt[(n + r, j)] = row[j];
                kkt[(j, n + r)] = row[j];
            }
            rhs[n + r] = b;
        }
        let Some(sol) = kkt.lu().solve(&rhs) else { continue };
        let z = sol.rows(0, n).into_owned();
        let feasible = (0..m).all(|i| prob.a_in.row(i).transpose().dot(&z) <= prob.b_in[i] + 1e-9);
        let dual_ok = (0..set.len()).all(|s| sol[n + p + s] >= -1e-9);
        if !(feasible && dual_ok) {
            continue;
        }
        let objective = prob.objective(&z);
        if best.as_ref().map_or(true, |b| objective < b.objective - 1e-12) {
            let mut mu = DVector::zeros(m);
            for (s, &i) in set.iter().enumerate() {
                mu[i] = sol[n + p + s];
            }
            best = Some(OracleSolution {
                z,
                lambda_eq: sol.rows(n, p).into_owned(),
                mu_in: mu,
                objective,
            });
        }
    }
    best
}

/// Random strictly convex QP with `n` variables, `m` inequalities and `p`
/// equalities that is feasible by construction.
pub fn random_qp(rng: &mut ChaCha8Rng, n: usize, m: usize, p: usize) -> QpProblem {
    let l = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
    let pm = l.transpose() * &l + DMatrix::identity(n, n) * 0.1;
    let q = DVector::from_fn(n, |_, _| rng.gen_range(-2.0..2.0));
    let z_feas = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
    let a_in = DMatrix::from_fn(m, n, |_, _| rng.gen_range(-1.0..1.0));
    let slack = DVector::from_fn(m, |_, _| rng.gen_range(0.0..0.5));
    let b_in = &a_in * &z_feas + slack;
    let a_eq = DMatrix::from_fn(p, n, |_, _| rng.gen_range(-1.0..1.0));
    let b_eq = &a_eq * &z_feas;
    QpProblem::new(pm, q).with_eq(a_eq, b_eq).with_in(a_in, b_in)
}

/// Max-norm of a vector difference.
pub fn max_diff(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
}

// ---------------------------------------------------------------------------
// Random radial systems
// ---------------------------------------------------------------------------

/// Random tree grid on `n_bus` buses with one route per entry of
/// `charger_buses` (route r charges at `charger_buses[r]`), every line
/// limited to `fcap` in both directions.
///
/// Shift factors use bus 0 as the slack: an injection at bus i withdrawn at
/// bus 0 crosses line (a, b) with sign +1 when i lies on a's side and bus 0
/// on b's side, −1 in the opposite case.
pub fn random_radial_system(rng: &mut ChaCha8Rng, n_bus: usize, charger_buses: &[usize], fcap: f64) -> CoupledSystem {
    let mut lines = Vec::new();
    for i in 1..n_bus {
        let p = rng.gen_range(0..i);
        lines.push(if rng.gen_bool(0.5) { [p, i] } else { [i, p] });
    }
    let m = lines.len();
    let mut h = DMatrix::zeros(2 * m, n_bus);
    for (l, &[a, _]) in lines.iter().enumerate() {
        let mut on_a = vec![false; n_bus];
        on_a[a] = true;
        let mut stack = vec![a];
        while let Some(i) = stack.pop() {
            for (k, &[u, v]) in lines.iter().enumerate() {
                let other = match (k == l, u == i, v == i) {
                    (false, true, _) => v,
                    (false, _, true) => u,
                    _ => continue,
                };
                if !on_a[other] {
                    on_a[other] = true;
                    stack.push(other);
                }
            }
        }
        for i in 0..n_bus {
            let s = match (on_a[i], on_a[0]) {
                (true, false) => 1.0,
                (false, true) => -1.0,
                _ => 0.0,
            };
            h[(l, i)] = s;
            h[(l + m, i)] = -s;
        }
    }
    let r = charger_buses.len();
    let mut charger_bus = DMatrix::zeros(r, n_bus);
    for (k, &b) in charger_buses.iter().enumerate() {
        charger_bus[(k, b)] = 1.0;
    }
    CoupledSystem {
        transport: TransportationNetwork {
            alpha: DVector::from_fn(r, |_, _| rng.gen_range(0.2..3.0)),
            beta: DVector::from_fn(r, |_, _| rng.gen_range(0.0..1.0)),
            link_route: DMatrix::identity(r, r),
        },
        power: PowerNetwork {
            shift_factor: h,
            f_cap: DVector::from_element(2 * m, fcap),
            q_diag: DVector::from_fn(n_bus, |_, _| rng.gen_range(0.5..2.0)),
            mu: DVector::from_fn(n_bus, |_, _| rng.gen_range(0.0..0.5)),
            base_load: DVector::from_fn(n_bus, |_, _| rng.gen_range(0.0..0.5)),
            generator_mask: vec![true; n_bus],
            enforce_nonneg_gen: false,
            line_index: (0..m).chain(0..m).collect(),
            lines: Some(lines),
        },
        coupling: Coupling {
            charger_route: DMatrix::identity(r, r),
            charger_bus,
            rho: rng.gen_range(0.3..2.0),
            demand: 1.0,
        },
        od_demands: None,
    }
}

/// Fully congested instance: tight lines and routes on distinct buses.
pub fn random_fully_congested(rng: &mut ChaCha8Rng) -> CoupledSystem {
    let n_bus = rng.gen_range(2..6);
    let n_routes = rng.gen_range(1..=n_bus);
    let mut buses: Vec<usize> = (0..n_bus).collect();
    for i in 0..n_bus {
        let j = rng.gen_range(i..n_bus);
        buses.swap(i, j);
    }
    buses.truncate(n_routes);
    let fcap = rng.gen_range(0.001..0.05);
    random_radial_system(rng, n_bus, &buses, fcap)
}

/// Partially congested instance: several routes per bus allowed, routes
/// sharing extra links, random line limits.
pub fn random_partially_congested(rng: &mut ChaCha8Rng) -> CoupledSystem {
    let n_bus = rng.gen_range(2..6);
    let n_routes = rng.gen_range(2..6);
    let buses: Vec<usize> = (0..n_routes).map(|_| rng.gen_range(0..n_bus)).collect();
    let mut sys = random_radial_system(rng, n_bus, &buses, 1.0);
    let n_links = n_routes + 2;
    let mut a = DMatrix::zeros(n_links, n_routes);
    for r in 0..n_routes {
        a[(r, r)] = 1.0;
        for l in n_routes..n_links {
            if rng.gen_bool(0.3) {
                a[(l, r)] = 1.0;
            }
        }
    }
    sys.transport.link_route = a;
    sys.transport.alpha = DVector::from_fn(n_links, |_, _| rng.gen_range(0.2..3.0));
    sys.transport.beta = DVector::from_fn(n_links, |_, _| rng.gen_range(0.0..1.0));
    for l in 0..sys.power.n_lines() {
        let v = rng.gen_range(0.01..0.5);
        sys = sys.with_parameter(Parameter::Fbar(l), v).unwrap();
    }
    sys
}

/// Tally of analytic-verdict versus KKT-derivative comparisons.
#[derive(Debug, Default)]
pub struct Concordance {
    pub instances: usize,
    pub conditions: usize,
    /// Definite verdicts whose sign disagrees with the KKT derivative.
    pub sign_disagreements: usize,
    /// Largest |analytic − KKT| relative to `1 + |KKT|`.
    pub max_rel_diff: f64,
    pub relation_checks: usize,
    pub derivable_violations: usize,
    /// Violations of the implications that drop the inactive bus's LMP.
    pub other_violations: usize,
}

fn parameter_of(subject: Subject) -> Parameter {
    match subject {
        Subject::Route(r) | Subject::Link(r) => Parameter::Alpha(r),
        Subject::Line(l) => Parameter::Fbar(l),
        other => panic!("{other} is not a system parameter"),
    }
}

fn compare(stats: &mut Concordance, sys: &CoupledSystem, gue: &braess::equilibrium::GueSolution, conds: &[Condition]) {
    for c in conds {
        let row = derivative_kkt(sys, gue, parameter_of(c.subject)).expect("interior instance");
        let d = match c.bp_type {
            BpType::TT | BpType::PT => row.dphi_t,
            _ => row.dphi_p,
        };
        stats.conditions += 1;
        stats.max_rel_diff = stats.max_rel_diff.max((d - c.derivative).abs() / (1.0 + d.abs()));
        let kkt_bp = match c.bp_type {
            BpType::TT | BpType::TP => d < 0.0,
            _ => d > 0.0,
        };
        let definite = c.verdict != Verdict::Indeterminate;
        if definite && (c.verdict == Verdict::Occurs) != kkt_bp && d.abs() > 1e-9 {
            stats.sign_disagreements += 1;
        }
    }
}

/// Compare fully congested and aggregated verdicts with KKT derivatives on
/// `n` random instances of each family.
pub fn radial_concordance(seed: u64, n: usize) -> Concordance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut stats = Concordance::default();
    let mut full = 0;
    while full < n {
        let sys = random_fully_congested(&mut rng);
        let Ok(gue) = solve_gue(&sys) else { continue };
        if gue.binding.degenerate {
            continue;
        }
        let Ok(v) = check_fully_congested(&sys, &gue) else { continue };
        full += 1;
        stats.instances += 1;
        compare(&mut stats, &sys, &gue, &v.conditions);
        let rel = bp_relations(&sys, &gue, &v).unwrap();
        stats.relation_checks += rel.checked.iter().filter(|i| i.applicable).count();
        stats.derivable_violations += rel.derivable_violations().len();
        stats.other_violations += rel.violations().len() - rel.derivable_violations().len();
    }
    let mut partial = 0;
    while partial < n {
        let sys = random_partially_congested(&mut rng);
        let Ok(gue) = solve_gue(&sys) else { continue };
        if gue.binding.degenerate {
            continue;
        }
        let Ok(red) = reduce(&sys, &gue) else { continue };
        partial += 1;
        stats.instances += 1;
        let mut conds = link_conditions(&sys, &red).unwrap().conditions;
        conds.extend(check_pbp_aggregated(&red.aggregated).conditions);
        compare(&mut stats, &sys, &gue, &conds);
    }
    stats
}
