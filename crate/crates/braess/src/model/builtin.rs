// SPDX-License-Identifier: MIT OR Apache-2.0

//! Built-in example systems.
//!
//! * `two_route_two_bus` — two parallel roads, each with a charger at its own
//!   bus, joined by one line limited in one direction.
//! * `two_route_three_bus` — the triangle grid with both flow directions
//!   limited.
//! * `wheatstone_two_bus` — a Wheatstone road network whose three routes
//!   charge at bus 0, plus a direct road charging at bus 1.
//! * `bay_area_ieee9` — the IEEE 9-bus grid coupled with a Davis → San Jose
//!   road network (10 routes, 4 chargers).
//! * `bay_area_ieee9_wheatstone` — the same grid with the extra
//!   Fremont–Mtn. View road (route 11) and the Wheatstone-style costs.

use nalgebra::{DMatrix, DVector};

use super::{Coupling, CoupledSystem, PowerNetwork, TransportationNetwork};
use crate::error::{Error, Result};

/// Names accepted by [`builtin_case`].
pub const BUILTIN_NAMES: [&str; 5] = [
    "two_route_two_bus",
    "two_route_three_bus",
    "wheatstone_two_bus",
    "bay_area_ieee9",
    "bay_area_ieee9_wheatstone",
];

/// Build one of the built-in systems by name.
pub fn builtin_case(name: &str) -> Result<CoupledSystem> {
    match name {
        "two_route_two_bus" => Ok(two_route_two_bus()),
        "two_route_three_bus" => Ok(two_route_three_bus()),
        "wheatstone_two_bus" => Ok(wheatstone_two_bus()),
        "bay_area_ieee9" => Ok(bay_area_ieee9(false)),
        "bay_area_ieee9_wheatstone" => Ok(bay_area_ieee9(true)),
        _ => Err(Error::UnknownCase(name.to_string())),
    }
}

/// Zero matrix with ones at the given (row, column) positions.
fn incidence(n_rows: usize, n_cols: usize, ones: &[(usize, usize)]) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(n_rows, n_cols);
    for &(i, j) in ones {
        m[(i, j)] = 1.0;
    }
    m
}

fn unrestricted_power(
    shift_factor: DMatrix<f64>,
    f_cap: Vec<f64>,
    q_diag: Vec<f64>,
    line_index: Vec<usize>,
    lines: Vec<[usize; 2]>,
) -> PowerNetwork {
    let n = shift_factor.ncols();
    PowerNetwork {
        shift_factor,
        f_cap: DVector::from_vec(f_cap),
        q_diag: DVector::from_vec(q_diag),
        mu: DVector::zeros(n),
        base_load: DVector::zeros(n),
        generator_mask: vec![true; n],
        enforce_nonneg_gen: false,
        line_index,
        lines: Some(lines),
    }
}

fn two_route_two_bus() -> CoupledSystem {
    CoupledSystem {
        transport: TransportationNetwork {
            alpha: DVector::from_vec(vec![2.0, 1.0]),
            beta: DVector::zeros(2),
            link_route: DMatrix::identity(2, 2),
        },
        // The single constraint limits the flow from bus 0 to bus 1, which
        // equals the net injection at bus 0.
        power: unrestricted_power(
            DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
            vec![0.1],
            vec![1.0, 1.0],
            vec![0],
            vec![[0, 1]],
        ),
        coupling: Coupling {
            charger_route: DMatrix::identity(2, 2),
            charger_bus: DMatrix::identity(2, 2),
            rho: 1.0,
            demand: 1.0,
        },
        od_demands: None,
    }
}

fn two_route_three_bus() -> CoupledSystem {
    // Shift factors with bus 0 as reference; lines 0→1, 2→0 and 2→1.
    let h_hat = [[0.0, -0.8, -0.6], [0.0, 0.2, 0.4], [0.0, -0.2, 0.6]];
    let mut h = DMatrix::zeros(6, 3);
    for (l, row) in h_hat.iter().enumerate() {
        for (i, &v) in row.iter().enumerate() {
            h[(l, i)] = v;
            h[(l + 3, i)] = -v;
        }
    }
    CoupledSystem {
        transport: TransportationNetwork {
            alpha: DVector::from_vec(vec![1.0, 10.0]),
            beta: DVector::zeros(2),
            link_route: DMatrix::identity(2, 2),
        },
        power: unrestricted_power(
            h,
            vec![0.1, 0.3, 0.1, 0.1, 0.3, 0.1],
            vec![2.0, 1.0, 1.0],
            vec![0, 1, 2, 0, 1, 2],
            vec![[0, 1], [2, 0], [2, 1]],
        ),
        coupling: Coupling {
            charger_route: DMatrix::identity(2, 2),
            charger_bus: incidence(2, 3, &[(0, 0), (1, 1)]),
            rho: 6.0,
            demand: 1.0,
        },
        od_demands: None,
    }
}

fn wheatstone_two_bus() -> CoupledSystem {
    // Links: 0 O→A, 1 A→D, 2 A→B (bridge), 3 O→B, 4 B→D, 5 direct O→D.
    // Routes: {0,1}, {0,2,4}, {3,4}, {5}.
    let link_route = incidence(6, 4, &[(0, 0), (1, 0), (0, 1), (2, 1), (4, 1), (3, 2), (4, 2), (5, 3)]);
    CoupledSystem {
        transport: TransportationNetwork {
            alpha: DVector::from_vec(vec![1.0, 2.0, 2.0, 2.0, 1.0, 1.0]),
            beta: DVector::zeros(6),
            link_route,
        },
        power: unrestricted_power(
            DMatrix::from_row_slice(2, 2, &[1.0, 0.0, -1.0, 0.0]),
            vec![0.01, 0.01],
            vec![2.0, 1.0],
            vec![0, 0],
            vec![[0, 1]],
        ),
        coupling: Coupling {
            charger_route: incidence(2, 4, &[(0, 0), (0, 1), (0, 2), (1, 3)]),
            charger_bus: DMatrix::identity(2, 2),
            rho: 1.0,
            demand: 1.0,
        },
        od_demands: None,
    }
}

/// IEEE 9-bus branches (from, to, reactance), 0-based buses.
const IEEE9_BRANCHES: [(usize, usize, f64); 9] = [
    (0, 3, 0.0576),
    (3, 4, 0.092),
    (4, 5, 0.17),
    (2, 5, 0.0586),
    (5, 6, 0.1008),
    (6, 7, 0.072),
    (7, 1, 0.0625),
    (7, 8, 0.161),
    (8, 3, 0.085),
];

/// DC power-transfer distribution factors with bus 0 as reference.
fn ieee9_ptdf() -> DMatrix<f64> {
    let nb = 9;
    let nl = IEEE9_BRANCHES.len();
    let mut bbus = DMatrix::zeros(nb, nb);
    let mut bf = DMatrix::zeros(nl, nb);
    for (k, &(a, b, x)) in IEEE9_BRANCHES.iter().enumerate() {
        let s = 1.0 / x;
        bf[(k, a)] = s;
        bf[(k, b)] = -s;
        bbus[(a, a)] += s;
        bbus[(b, b)] += s;
        bbus[(a, b)] -= s;
        bbus[(b, a)] -= s;
    }
    let reduced = bbus.view((1, 1), (nb - 1, nb - 1)).into_owned();
    let inv = reduced
        .try_inverse()
        .expect("reduced susceptance matrix of a connected grid is invertible");
    let mut binv = DMatrix::zeros(nb, nb);
    binv.view_mut((1, 1), (nb - 1, nb - 1)).copy_from(&inv);
    bf * binv
}

fn bay_area_ieee9(wheatstone: bool) -> CoupledSystem {
    let ptdf = ieee9_ptdf();
    let nl = IEEE9_BRANCHES.len();
    let mut h = DMatrix::zeros(2 * nl, 9);
    h.rows_mut(0, nl).copy_from(&ptdf);
    h.rows_mut(nl, nl).copy_from(&(-&ptdf));
    let mut f_line = vec![250.0, 250.0, 25.0, 300.0, 10.0, 250.0, 250.0, 250.0, 250.0];
    if wheatstone {
        // Lines (5,6) and (6,7) restored so that the grid is uncongested.
        f_line[2] = 250.0;
        f_line[4] = 250.0;
    }
    let f_cap: Vec<f64> = f_line.iter().chain(f_line.iter()).copied().collect();
    let line_index: Vec<usize> = (0..nl).chain(0..nl).collect();
    let lines: Vec<[usize; 2]> = IEEE9_BRANCHES.iter().map(|&(a, b, _)| [a, b]).collect();

    let mut q_diag = vec![0.0; 9];
    q_diag[..3].copy_from_slice(&[0.11, 0.085, 0.1225]);
    let mut mu = vec![0.0; 9];
    mu[..3].copy_from_slice(&[5.0, 1.2, 1.0]);
    let base_load = vec![0.0, 480.0, 0.0, 10.0, 160.0, 80.0, 0.0, 40.0, 120.0];
    let generator_mask = (0..9).map(|i| i < 3).collect();

    // Links: 0 Davis–Winters, 1 Winters–Fairfield, 2 Davis–Fairfield,
    // 3 Fairfield–Mtn.View, 4 Fairfield–Fremont, 5 Mtn.View–San Jose,
    // 6 Fremont–San Jose, 7 Fremont–Mtn.View (Wheatstone variant only).
    // Chargers: 0 Winters (bus 3), 1 Fairfield (bus 4), 2 Mtn.View (bus 5),
    // 3 Fremont (bus 7).
    let mut routes: Vec<(Vec<usize>, usize)> = Vec::new();
    let paths: [(&[usize], &[usize]); 4] = [
        (&[0, 1, 3, 5], &[0, 1, 2]),
        (&[0, 1, 4, 6], &[0, 1, 3]),
        (&[2, 3, 5], &[1, 2]),
        (&[2, 4, 6], &[1, 3]),
    ];
    for (links, chargers) in paths {
        for &c in chargers {
            routes.push((links.to_vec(), c));
        }
    }
    let (n_links, alpha, beta) = if wheatstone {
        routes.push((vec![0, 1, 4, 7, 5], 0));
        (
            8,
            vec![0.0, 0.0, 0.0, 0.0, 6.67e-4, 6.67e-4, 0.0, 1e-3],
            vec![0.0, 0.0, 0.0, 20.0, 10.0, 10.0, 20.0, 0.0],
        )
    } else {
        (
            7,
            vec![3.2e-3, 3.2e-3, 3.2e-3, 6.4e-3, 9.6e-3, 6.4e-3, 9.6e-3],
            vec![1.6, 20.8, 22.4, 19.2, 12.8, 12.8, 19.2],
        )
    };
    let n_routes = routes.len();
    let mut link_route = DMatrix::zeros(n_links, n_routes);
    let mut charger_route = DMatrix::zeros(4, n_routes);
    for (r, (links, c)) in routes.iter().enumerate() {
        for &l in links {
            link_route[(l, r)] = 1.0;
        }
        charger_route[(*c, r)] = 1.0;
    }
    let charger_bus = incidence(4, 9, &[(0, 3), (1, 4), (2, 5), (3, 7)]);

    CoupledSystem {
        transport: TransportationNetwork {
            alpha: DVector::from_vec(alpha),
            beta: DVector::from_vec(beta),
            link_route,
        },
        power: PowerNetwork {
            shift_factor: h,
            f_cap: DVector::from_vec(f_cap),
            q_diag: DVector::from_vec(q_diag),
            mu: DVector::from_vec(mu),
            base_load: DVector::from_vec(base_load),
            generator_mask,
            enforce_nonneg_gen: true,
            line_index,
            lines: Some(lines),
        },
        coupling: Coupling {
            charger_route,
            charger_bus,
            rho: 0.02,
            demand: 15000.0,
        },
        od_demands: None,
    }
}
