// SPDX-License-Identifier: MIT OR Apache-2.0

//! Generalized user equilibria (GUE) of coupled power–transportation systems
//! and Braess' paradox (BP) analysis.
//!
//! Electric vehicles choose routes to minimize travel cost plus the charging
//! cost at the bus their charger connects to; the grid operator dispatches
//! generation against the resulting charging loads, and the locational
//! marginal prices (LMPs) of that dispatch are the charging prices. The GUE
//! is a fixed point of the two, computed here as one convex QP.
//!
//! Modules, bottom-up:
//!
//! * [`qp`] — dense active-set QP solver with exact binding patterns and duals.
//! * [`model`] — system types, validation, JSON format, built-in cases.
//! * [`equilibrium`] — economic dispatch, transportation UE, joint GUE.
//! * [`metrics`] — social costs, finite-difference and KKT sensitivities, BP
//!   screening and sweeps.
//! * [`radial`] — subnetwork/route-bundle reduction and the analytic BP
//!   conditions for radial grids.
//! * [`pricing`] — system-optimal charging prices, static-price critical
//!   regions and BP elimination.
//!
//! BP types are written X-Y: expanding capacity in system X (lowering a road
//! slope α or raising a line limit f̄) worsens the social cost of Y (T =
//! transportation, P = power, C = combined).

pub mod equilibrium;
pub mod error;
mod linalg;
pub mod metrics;
pub mod model;
pub mod pricing;
pub mod qp;
pub mod radial;

pub use error::{Error, Result};
