// SPDX-License-Identifier: MIT OR Apache-2.0

use braess::equilibrium::solve_gue;
use braess::metrics::{
    derivative_fd, derivative_kkt, report_csv, screen_bp, social_costs, sweep, BpType, ScreenMethod, CSV_HEADER,
};
use braess::model::{builtin_case, Coupling, CoupledSystem, Parameter, PowerNetwork, TransportationNetwork};
use nalgebra::{dmatrix, dvector, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn two_bus(alpha: [f64; 2], rho: f64, fbar: f64) -> CoupledSystem {
    let mut sys = builtin_case("two_route_two_bus").unwrap();
    sys.transport.alpha = DVector::from_row_slice(&alpha);
    sys.coupling.rho = rho;
    sys.with_parameter(Parameter::Fbar(0), fbar).unwrap()
}

fn single_route(alpha: f64, beta: f64, demand: f64) -> CoupledSystem {
    CoupledSystem {
        transport: TransportationNetwork {
            alpha: dvector![alpha],
            beta: dvector![beta],
            link_route: dmatrix![1.0],
        },
        power: PowerNetwork {
            shift_factor: dmatrix![1.0, 0.0],
            f_cap: dvector![10.0],
            q_diag: dvector![1.0, 1.0],
            mu: dvector![0.0, 0.0],
            base_load: dvector![0.0, 0.0],
            generator_mask: vec![true, true],
            enforce_nonneg_gen: false,
            line_index: vec![0],
            lines: Some(vec![[0, 1]]),
        },
        coupling: Coupling {
            charger_route: dmatrix![1.0],
            charger_bus: dmatrix![1.0, 0.0],
            rho: 1.0,
            demand,
        },
        od_demands: None,
    }
}

/// Richardson-extrapolated central difference of `f` at `theta`.
fn richardson(f: impl Fn(f64) -> f64, theta: f64, h: f64) -> f64 {
    let d = |h: f64| (f(theta + h) - f(theta - h)) / (2.0 * h);
    (4.0 * d(h / 2.0) - d(h)) / 3.0
}

#[test]
fn two_bus_uncongested_line_derivatives_vanish() {
    let sys = two_bus([2.0, 1.0], 1.0, 10.0);
    let gue = solve_gue(&sys).unwrap();
    assert!(gue.binding.congested_lines.is_empty());
    for row in [
        derivative_fd(&sys, Parameter::Fbar(0), 1e-5).unwrap(),
        derivative_kkt(&sys, &gue, Parameter::Fbar(0)).unwrap(),
    ] {
        assert!(row.dphi_t.abs() < 1e-6 && row.dphi_p.abs() < 1e-6 && row.dphi_c.abs() < 1e-6);
    }
}

#[test]
fn two_bus_congested_travel_derivative_matches_closed_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut saw_tt = false;
    let mut checked = 0;
    while checked < 101 {
        // The first instance has a long road 1 next to a short road 2, where
        // the charging-price differential dominates.
        let (alpha, rho, fbar) = if checked == 0 {
            ([5.0, 0.1], 1.0, 0.001)
        } else {
            (
                [rng.gen_range(0.2..3.0), rng.gen_range(0.2..3.0)],
                rng.gen_range(0.1..3.0),
                rng.gen_range(0.001..0.5),
            )
        };
        let sys = two_bus(alpha, rho, fbar);
        let gue = solve_gue(&sys).unwrap();
        if gue.binding.congested_lines != vec![0] || gue.binding.degenerate || !gue.binding.zero_routes.is_empty() {
            continue;
        }
        checked += 1;
        // (α₁+ρ²)x₁ + 2ρf̄ = (α₂+ρ²)x₂ with x₁ + x₂ = 1.
        let den = alpha[0] + alpha[1] + 2.0 * rho * rho;
        let x1 = (alpha[1] + rho * rho - 2.0 * rho * fbar) / den;
        let (l1, l2) = (rho * x1 + fbar, rho * (1.0 - x1) - fbar);
        let dx1 = -x1 / den;
        let expected = x1 * x1 + 2.0 * rho * (l2 - l1) * dx1;
        let row = derivative_kkt(&sys, &gue, Parameter::Alpha(0)).unwrap();
        assert!((gue.x[0] - x1).abs() < 1e-9);
        assert!((row.dphi_t - expected).abs() < 1e-8, "{alpha:?} {rho} {fbar}");
        let report = screen_bp(&sys, ScreenMethod::Kkt);
        let tol = 1e-6 * (1.0 + row.costs.phi_t);
        assert_eq!(report.has_at(BpType::TT, Parameter::Alpha(0)), expected < -tol);
        saw_tt |= expected < -tol;
        // Expanding road 2 always raises the generation cost; the line
        // never causes a paradox.
        let r2 = derivative_kkt(&sys, &gue, Parameter::Alpha(1)).unwrap();
        assert!(r2.dphi_p < 0.0);
        let tol_p = 1e-6 * (1.0 + r2.costs.phi_p);
        assert_eq!(report.has_at(BpType::TP, Parameter::Alpha(1)), r2.dphi_p < -tol_p);
        assert!(!report.has(BpType::PT) && !report.has(BpType::PP));
    }
    assert!(saw_tt, "some congested 2-bus instance exhibits T-T");
}

#[test]
fn single_route_fd_matches_quadratic() {
    let (alpha, beta, n) = (0.7, 1.3, 2.0);
    let sys = single_route(alpha, beta, n);
    let gue = solve_gue(&sys).unwrap();
    let c = social_costs(&sys, &gue);
    assert!((c.phi_t - (alpha * n * n + beta * n)).abs() < 1e-12);
    let row = derivative_fd(&sys, Parameter::Alpha(0), 1e-4).unwrap();
    assert!((row.dphi_t - n * n).abs() < 1e-7);
    let kkt = derivative_kkt(&sys, &gue, Parameter::Alpha(0)).unwrap();
    assert!((kkt.dphi_t - n * n).abs() < 1e-10);
}

#[test]
fn three_bus_road_expansion_raises_generation_cost() {
    let mut sys = builtin_case("two_route_three_bus").unwrap();
    sys.transport.alpha = dvector![5.0, 10.0];
    let gue = solve_gue(&sys).unwrap();
    let fd = derivative_fd(&sys, Parameter::Alpha(0), 1e-5).unwrap();
    let kkt = derivative_kkt(&sys, &gue, Parameter::Alpha(0)).unwrap();
    assert!(fd.dphi_p < 0.0 && kkt.dphi_p < 0.0);
    assert!(screen_bp(&sys, ScreenMethod::Kkt).has_at(BpType::TP, Parameter::Alpha(0)));
}

#[test]
fn three_bus_line_derivative_matches_symbolic_expression() {
    // α = (1,1), ρ = 6, Q = diag(0,1,1), lines 1 and 3 congested.
    for f3 in [0.05, 0.07, 0.09] {
        let mut sys = builtin_case("two_route_three_bus").unwrap();
        sys.transport.alpha = dvector![1.0, 1.0];
        sys.power.q_diag = dvector![0.0, 1.0, 1.0];
        sys = sys.with_parameter(Parameter::Fbar(2), f3).unwrap();
        let gue = solve_gue(&sys).unwrap();
        assert_eq!(gue.binding.congested_lines, vec![0, 2]);
        let (a1, a2, rho, q1, q2, f1) = (1.0, 1.0, 6.0, 0.0, 1.0, 0.1);
        let x2 = gue.x[1];
        let expected = -(rho * x2 - f1 - f3) * (a1 + a2 + 4.0 / 3.0 * rho * rho * q1)
            / (a1 + a2 + rho * rho * (q1 + q2))
            + 4.0 / 3.0 * (4.0 * f3 - f1) / 3.0;
        let row = derivative_kkt(&sys, &gue, Parameter::Fbar(2)).unwrap();
        assert!((row.dphi_p - expected).abs() < 1e-9, "f̄₃ = {f3}");
        assert!(row.dphi_p > 0.0);
    }
}

#[test]
fn kkt_agrees_with_extrapolated_fd_on_builtins() {
    for name in ["two_route_two_bus", "two_route_three_bus", "wheatstone_two_bus", "bay_area_ieee9"] {
        let sys = builtin_case(name).unwrap();
        let gue = solve_gue(&sys).unwrap();
        let mut params = sys.capacity_parameters();
        params.extend([Parameter::Rho, Parameter::QScale]);
        for p in params {
            let fd_row = derivative_fd(&sys, p, 1e-4).unwrap();
            if fd_row.at_region_boundary {
                continue;
            }
            let Ok(kkt) = derivative_kkt(&sys, &gue, p) else { continue };
            let theta = sys.parameter_value(p).unwrap();
            let h = 1e-4 * (1.0 + theta.abs());
            let eval = |v: f64| {
                let s = sys.with_parameter(p, v).unwrap();
                let g = solve_gue(&s).unwrap();
                let c = social_costs(&s, &g);
                (c.phi_t, c.phi_p)
            };
            if theta - h <= 0.0 {
                continue;
            }
            let rt = richardson(|v| eval(v).0, theta, h);
            let rp = richardson(|v| eval(v).1, theta, h);
            for (exact, approx) in [(kkt.dphi_t, rt), (kkt.dphi_p, rp)] {
                let tol = 1e-4_f64.max(1e-3 * approx.abs());
                assert!((exact - approx).abs() <= tol, "{name} {p}: kkt {exact} vs fd {approx}");
            }
            assert_eq!(kkt.dphi_c, kkt.dphi_t + kkt.dphi_p);
            let side = kkt.side_residual.unwrap();
            assert!(side <= 1e-6 * (1.0 + gue.route_cost.norm()) * (1.0 + sys.total_demand()), "{name} {p}");
        }
    }
}

#[test]
fn uncongested_systems_have_zero_line_rows() {
    let mut sys = builtin_case("wheatstone_two_bus").unwrap();
    sys = sys.with_parameter(Parameter::Fbar(0), 5.0).unwrap();
    let report = screen_bp(&sys, ScreenMethod::Both);
    assert!(report.failures.is_empty());
    for row in report.rows.iter().filter(|r| matches!(r.parameter, Parameter::Fbar(_))) {
        assert!(row.dphi_t.abs() < 1e-6 && row.dphi_p.abs() < 1e-6);
    }
}

#[test]
fn degenerate_pattern_is_rejected() {
    let sys = builtin_case("two_route_two_bus").unwrap();
    let mut gue = solve_gue(&sys).unwrap();
    gue.binding.degenerate = true;
    let err = derivative_kkt(&sys, &gue, Parameter::Alpha(0)).unwrap_err();
    assert_eq!(err.code(), "DEGENERATE_PATTERN");
}

#[test]
fn sweep_rejects_empty_range() {
    let sys = builtin_case("two_route_two_bus").unwrap();
    for (lo, hi, n) in [(1.0, 1.0, 2), (2.0, 1.0, 5), (0.0, 1.0, 1)] {
        let err = sweep(&sys, Parameter::Fbar(0), lo, hi, n).unwrap_err();
        assert_eq!(err.code(), "INVALID_RANGE");
    }
}

#[test]
fn screen_csv_is_deterministic_and_well_formed() {
    let sys = builtin_case("two_route_three_bus").unwrap();
    let a = report_csv(&screen_bp(&sys, ScreenMethod::Both));
    let b = report_csv(&screen_bp(&sys, ScreenMethod::Both));
    assert_eq!(a, b);
    let mut lines = a.lines();
    assert_eq!(lines.next(), Some(CSV_HEADER));
    for line in lines {
        assert_eq!(line.split(',').count(), 11, "{line}");
    }
    assert!(!a.contains('\r'));
}

#[test]
fn costs_sum_exactly() {
    let sys = builtin_case("bay_area_ieee9").unwrap();
    let gue = solve_gue(&sys).unwrap();
    let c = social_costs(&sys, &gue);
    assert_eq!(c.phi_c, c.phi_t + c.phi_p);
}
