// SPDX-License-Identifier: MIT OR Apache-2.0

use braess::equilibrium::{economic_dispatch, solve_gue, solve_gue_multi_od, transport_ue};
use braess::metrics::{social_costs, sweep};
use braess::model::{builtin_case, charging_load, CoupledSystem, OdDemand, Parameter};
use nalgebra::{dvector, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn three_bus(alpha: [f64; 2], rho: f64, q: [f64; 3], fbar: [f64; 3]) -> CoupledSystem {
    let mut sys = builtin_case("two_route_three_bus").unwrap();
    sys.transport.alpha = DVector::from_row_slice(&alpha);
    sys.coupling.rho = rho;
    sys.power.q_diag = DVector::from_row_slice(&q);
    for (l, &f) in fbar.iter().enumerate() {
        sys = sys.with_parameter(Parameter::Fbar(l), f).unwrap();
    }
    sys
}

#[test]
fn two_bus_congested_lmps_follow_closed_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let base = builtin_case("two_route_two_bus").unwrap();
    for _ in 0..200 {
        let rho: f64 = rng.gen_range(0.2..3.0);
        let x1: f64 = rng.gen_range(0.0..1.0);
        let x = dvector![x1, 1.0 - x1];
        // Congested when the unconstrained flow ρ(x₂−x₁)/2 exceeds f̄.
        let fbar = rng.gen_range(0.001..1.0) * (rho * (x[1] - x[0]) / 2.0).max(0.0);
        if fbar <= 1e-6 {
            continue;
        }
        let mut sys = base.clone();
        sys.coupling.rho = rho;
        sys = sys.with_parameter(Parameter::Fbar(0), fbar).unwrap();
        let d = charging_load(&sys, &x, true).unwrap();
        let ed = economic_dispatch(&sys.power, &d).unwrap();
        assert!((ed.lambda[0] - (rho * x[0] + fbar)).abs() < 1e-8);
        assert!((ed.lambda[1] - (rho * x[1] - fbar)).abs() < 1e-8);
    }
}

#[test]
fn uncongested_two_bus_splits_evenly_in_price() {
    let mut sys = builtin_case("two_route_two_bus").unwrap();
    sys = sys.with_parameter(Parameter::Fbar(0), 10.0).unwrap();
    let gue = solve_gue(&sys).unwrap();
    // Equal LMPs, so route costs equalize on travel cost alone: 2x₁ = x₂.
    assert!((gue.x[0] - 1.0 / 3.0).abs() < 1e-9);
    assert!((gue.dispatch.lambda[0] - gue.dispatch.lambda[1]).abs() < 1e-9);
    assert!(gue.binding.congested_lines.is_empty());
}

#[test]
fn three_bus_pattern_one_three_matches_closed_form() {
    for a1 in [60.0, 100.0, 200.0] {
        let (a2, rho, q, fb) = (10.0, 6.0, [2.0, 1.0, 1.0], [0.1, 0.3, 0.1]);
        let sys = three_bus([a1, a2], rho, q, fb);
        let gue = solve_gue(&sys).unwrap();
        assert_eq!(gue.binding.congested_lines, vec![0, 2], "α₁ = {a1}");
        let den = a1 + a2 + rho * rho * (q[0] + q[1]);
        let k = rho * q[0] / 3.0 * (4.0 * fb[0] - fb[2]) + rho * q[1] * (fb[0] + fb[2]);
        let x1 = (a2 + rho * rho * q[1] - k) / den;
        let x2 = (a1 + rho * rho * q[0] + k) / den;
        let g = [
            rho * x1 + (4.0 * fb[0] - fb[2]) / 3.0,
            rho * x2 - (fb[0] + fb[2]),
            (4.0 * fb[2] - fb[0]) / 3.0,
        ];
        assert!((gue.x[0] - x1).abs() < 1e-6 && (gue.x[1] - x2).abs() < 1e-6);
        for i in 0..3 {
            assert!((gue.dispatch.g[i] - g[i]).abs() < 1e-6);
            assert!((gue.dispatch.lambda[i] - q[i] * g[i]).abs() < 1e-6);
        }
    }
}

#[test]
fn three_bus_pattern_switches_near_point_eight() {
    let sys = three_bus([1.0, 10.0], 6.0, [2.0, 1.0, 1.0], [0.1, 0.3, 0.1]);
    let table = sweep(&sys, Parameter::Fbar(2), 0.04, 2.0, 196).unwrap();
    let step = (2.0 - 0.04) / 195.0;
    let switches = table.switch_points();
    assert!(
        switches.iter().any(|&t| (t - 0.8).abs() <= step + 1e-12),
        "switches at {switches:?}"
    );
    // Below the switch: line 1 negative (row 3) and line 3 positive (row 2).
    let early = table.rows[5].outcome.as_ref().unwrap();
    assert_eq!(early.pattern.congested_lines, vec![2, 3]);
}

#[test]
fn uniform_cost_and_fixed_point_hold_on_builtins() {
    for name in braess::model::BUILTIN_NAMES {
        let sys = builtin_case(name).unwrap();
        let gue = solve_gue(&sys).unwrap();
        let scale = 1.0 + gue.route_cost.amax();
        for (routes, demand) in sys.demand_groups() {
            let nu = gue.nu[0];
            for r in routes {
                if gue.x[r] > 1e-7 * demand {
                    assert!((gue.route_cost[r] - nu).abs() < 1e-6 * scale, "{name}: active route {r}");
                } else {
                    assert!(gue.route_cost[r] >= nu - 1e-6 * scale, "{name}: idle route {r}");
                }
            }
        }
        // Re-dispatch at the equilibrium load reproduces the generation cost.
        let d = charging_load(&sys, &gue.x, true).unwrap();
        let ed = economic_dispatch(&sys.power, &d).unwrap();
        assert!((ed.cost - gue.dispatch.cost).abs() < 1e-6 * (1.0 + ed.cost.abs()), "{name}");
        // Best-responding travellers at the equilibrium prices stay put when
        // the route cost matrix is nonsingular.
        if gue.warnings.is_empty() {
            let prices = sys.route_charging_price(&gue.dispatch.lambda);
            let ue = transport_ue(&sys.transport, &prices, sys.total_demand()).unwrap();
            assert!((ue.x - &gue.x).amax() < 1e-6 * sys.total_demand(), "{name}");
        }
    }
}

#[test]
fn bay_area_costs_match_independent_evaluation() {
    let sys = builtin_case("bay_area_ieee9").unwrap();
    let gue = solve_gue(&sys).unwrap();
    let c = social_costs(&sys, &gue);
    let a = &sys.transport.link_route;
    let alpha = nalgebra::DMatrix::from_diagonal(&sys.transport.alpha);
    let phi_t = gue.x.dot(&(a.transpose() * &alpha * a * &gue.x + a.transpose() * &sys.transport.beta));
    let d = charging_load(&sys, &gue.x, true).unwrap();
    let phi_p = economic_dispatch(&sys.power, &d).unwrap().cost;
    assert!(c.phi_t > 0.0 && c.phi_p > 0.0);
    assert!((c.phi_t - phi_t).abs() < 1e-9 * phi_t);
    assert!((c.phi_p - phi_p).abs() < 1e-6 * phi_p);
    assert_eq!(c.phi_c, c.phi_t + c.phi_p);
}

#[test]
fn zero_demand_costs_only_base_load() {
    let mut sys = builtin_case("bay_area_ieee9").unwrap();
    sys.coupling.demand = 0.0;
    let gue = solve_gue(&sys).unwrap();
    let c = social_costs(&sys, &gue);
    assert_eq!(c.phi_t, 0.0);
    let ed = economic_dispatch(&sys.power, &sys.power.base_load).unwrap();
    assert!((c.phi_p - ed.cost).abs() < 1e-6 * ed.cost);
}

#[test]
fn infeasible_dispatch_is_reported() {
    let mut sys = builtin_case("two_route_two_bus").unwrap();
    // Only bus 0 can generate and the line cannot carry the load at bus 1.
    sys.power.generator_mask = vec![true, false];
    sys.power.base_load = dvector![0.0, 1.0];
    sys = sys.with_parameter(Parameter::Fbar(0), 0.01).unwrap();
    let err = solve_gue(&sys).unwrap_err();
    assert_eq!(err.code(), "INFEASIBLE_DISPATCH");
}

#[test]
fn multi_od_demands_are_met_per_pair() {
    let sys = builtin_case("wheatstone_two_bus").unwrap();
    let od = vec![
        OdDemand {
            routes: vec![0, 1, 2],
            demand: 0.7,
        },
        OdDemand {
            routes: vec![3],
            demand: 0.3,
        },
    ];
    let gue = solve_gue_multi_od(&sys, &od).unwrap();
    assert!((gue.x[0] + gue.x[1] + gue.x[2] - 0.7).abs() < 1e-9);
    assert!((gue.x[3] - 0.3).abs() < 1e-9);
    assert_eq!(gue.nu.len(), 2);
}
