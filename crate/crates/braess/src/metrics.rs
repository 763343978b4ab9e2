// SPDX-License-Identifier: MIT OR Apache-2.0

//! Social-cost metrics, their sensitivities to capacity parameters, Braess'
//! paradox (BP) screening and parameter sweeps.
//!
//! Two derivative methods are offered:
//!
//! * finite differences of the re-solved equilibrium, with a flag when the
//!   binding pattern differs across the stencil;
//! * exact derivatives from the implicit function theorem applied to the
//!   reduced KKT system of the joint equilibrium program with its binding
//!   pattern held fixed.
//!
//! A BP of type T-x (x ∈ {T, P, C}) occurs when lowering a road's congestion
//! slope `α_ℓ` (expanding the road) raises the social cost `Φ_x`; a P-x BP
//! occurs when raising a line capacity `f̄_ℓ` raises `Φ_x`.

use std::collections::BTreeMap;
use std::fmt;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;

use crate::equilibrium::{joint_problem, solve_gue_with, BindingPattern, FlowObjective, GueSolution};
use crate::error::{Error, Result};
use crate::linalg::{lstsq, select_rows, vstack};
use crate::model::{CoupledSystem, Parameter};
use crate::qp::DEFAULT_TOL;

/// Default relative finite-difference step.
pub const DEFAULT_FD_STEP: f64 = 1e-5;

/// Relative factor of the noise floor a derivative must clear to raise a
/// verdict (`1e-6·(1+|Φ|)`).
pub const VERDICT_RTOL: f64 = 1e-6;

/// Social costs of an equilibrium.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct SocialCosts {
    /// Total travel cost `Σ_r x_r c^tr_r(x)` (charging payments excluded).
    pub phi_t: f64,
    /// Generation cost of the dispatch.
    pub phi_p: f64,
    /// `phi_t + phi_p`.
    pub phi_c: f64,
}

/// Social costs of `gue`.
pub fn social_costs(sys: &CoupledSystem, gue: &GueSolution) -> SocialCosts {
    let phi_t = gue.x.dot(&sys.transport.travel_costs(&gue.x));
    let phi_p = gue.dispatch.cost;
    SocialCosts {
        phi_t,
        phi_p,
        phi_c: phi_t + phi_p,
    }
}

/// How a derivative was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum Method {
    Fd,
    Kkt,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Fd => "fd",
            Method::Kkt => "kkt",
        })
    }
}

/// Derivative methods requested from a screen.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScreenMethod {
    Fd,
    Kkt,
    /// Both methods; verdicts come from the exact rows, falling back to
    /// finite differences where the exact derivative is unavailable.
    Both,
}

/// The six BP types.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum BpType {
    TT,
    TP,
    TC,
    PT,
    PP,
    PC,
}

impl fmt::Display for BpType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// Derivatives of the three social costs with respect to one parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityRow {
    pub parameter: Parameter,
    /// Parameter value the derivative is taken at.
    pub theta: f64,
    /// Social costs at `theta`.
    pub costs: SocialCosts,
    pub dphi_t: f64,
    pub dphi_p: f64,
    pub dphi_c: f64,
    pub method: Method,
    /// The binding pattern changes within the stencil (finite differences)
    /// or the pattern is degenerate; such rows never raise verdicts.
    pub at_region_boundary: bool,
    /// `|c(x,λ)ᵀ ∂x/∂θ|` for exact derivatives (zero by the uniform-cost
    /// property of equilibria), `None` for finite differences.
    pub side_residual: Option<f64>,
}

impl SensitivityRow {
    /// BP types this row exhibits.
    pub fn verdicts(&self) -> Vec<BpType> {
        if self.at_region_boundary {
            return Vec::new();
        }
        let tol = |phi: f64| VERDICT_RTOL * (1.0 + phi.abs());
        let c = &self.costs;
        let d = [(self.dphi_t, c.phi_t), (self.dphi_p, c.phi_p), (self.dphi_c, c.phi_c)];
        let types = match self.parameter {
            // Expanding a road lowers α: a BP is a negative derivative.
            Parameter::Alpha(_) => [BpType::TT, BpType::TP, BpType::TC],
            // Expanding a line raises f̄: a BP is a positive derivative.
            Parameter::Fbar(_) => [BpType::PT, BpType::PP, BpType::PC],
            Parameter::Rho | Parameter::QScale => return Vec::new(),
        };
        let sign = if matches!(self.parameter, Parameter::Alpha(_)) { -1.0 } else { 1.0 };
        types
            .into_iter()
            .zip(d)
            .filter(|(_, (dv, phi))| sign * dv > tol(*phi))
            .map(|(t, _)| t)
            .collect()
    }
}

/// Result of a BP screen.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct BpReport {
    pub rows: Vec<SensitivityRow>,
    /// Parameters triggering each BP type.
    pub verdicts: BTreeMap<BpType, Vec<Parameter>>,
    /// Parameters whose derivative could not be computed, with the error.
    pub failures: Vec<(Parameter, Error)>,
}

impl BpReport {
    /// Whether any parameter triggers `t`.
    pub fn has(&self, t: BpType) -> bool {
        self.verdicts.get(&t).is_some_and(|v| !v.is_empty())
    }

    /// Whether `param` triggers `t`.
    pub fn has_at(&self, t: BpType, param: Parameter) -> bool {
        self.verdicts.get(&t).is_some_and(|v| v.contains(&param))
    }
}

/// Numerical settings shared by derivatives, screens and sweeps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Settings {
    /// QP tolerance.
    pub tol: f64,
    /// Relative finite-difference step (`h = fd_step·(1+|θ|)`).
    pub fd_step: f64,
}

impl Default for Settings {
    fn default() -> Self {
        Settings {
            tol: DEFAULT_TOL,
            fd_step: DEFAULT_FD_STEP,
        }
    }
}

/// Equilibrium map used inside finite-difference loops.
pub type Solver<'a> = dyn Fn(&CoupledSystem) -> Result<GueSolution> + Sync + 'a;

/// Finite-difference derivative with the default solver.
pub fn derivative_fd(sys: &CoupledSystem, param: Parameter, step: f64) -> Result<SensitivityRow> {
    derivative_fd_with(sys, param, step, &|s: &CoupledSystem| solve_gue_with(s, DEFAULT_TOL))
}

/// Finite-difference derivative of the social costs of `solver(sys)`.
///
/// Central differences with `h = step·(1+|θ|)`; a forward difference is used
/// when `θ − h` would leave the nonnegative parameter range.
pub fn derivative_fd_with(sys: &CoupledSystem, param: Parameter, step: f64, solver: &Solver) -> Result<SensitivityRow> {
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::InvalidRange(format!("finite-difference step must be positive, got {step}")));
    }
    let theta = sys.parameter_value(param)?;
    let h = step * (1.0 + theta.abs());
    let eval = |v: f64| -> Result<(SocialCosts, BindingPattern)> {
        let s = sys.with_parameter(param, v)?;
        let g = solver(&s)?;
        Ok((social_costs(&s, &g), g.binding))
    };
    let centre = eval(theta)?;
    let (lo, hi, width) = if theta - h > 0.0 {
        (eval(theta - h)?, eval(theta + h)?, 2.0 * h)
    } else {
        (centre.clone(), eval(theta + h)?, h)
    };
    let d = |f: fn(&SocialCosts) -> f64| (f(&hi.0) - f(&lo.0)) / width;
    let dphi_t = d(|c| c.phi_t);
    let dphi_p = d(|c| c.phi_p);
    Ok(SensitivityRow {
        parameter: param,
        theta,
        costs: centre.0,
        dphi_t,
        dphi_p,
        dphi_c: dphi_t + dphi_p,
        method: Method::Fd,
        at_region_boundary: !lo.1.same_pattern(&hi.1),
        side_residual: None,
    })
}

/// Exact derivative of the social costs at the equilibrium `gue` of `sys`.
///
/// Differentiates the KKT system of the joint program restricted to the
/// binding constraints. The program data are affine in every supported
/// parameter, so their derivatives are the exact differences between the
/// programs at `θ+1` and `θ`.
pub fn derivative_kkt(sys: &CoupledSystem, gue: &GueSolution, param: Parameter) -> Result<SensitivityRow> {
    if gue.binding.degenerate {
        return Err(Error::DegeneratePattern(format!(
            "binding pattern at {param} is degenerate (a binding constraint has a zero multiplier)"
        )));
    }
    let theta = sys.parameter_value(param)?;
    let (p0, layout) = joint_problem(sys, &FlowObjective::potential(sys));
    let shifted = sys.with_parameter(param, theta + 1.0)?;
    let (p1, _) = joint_problem(&shifted, &FlowObjective::potential(&shifted));

    let (n_r, n_p) = (layout.n_r, layout.n_p);
    let n = n_r + n_p;
    let mut active: Vec<usize> = gue.binding.congested_lines.clone();
    active.extend(gue.binding.zero_routes.iter().map(|&r| layout.route_row(r)));
    for bus in &gue.binding.idle_generators {
        if let Some(k) = layout.nonneg.iter().position(|b| b == bus) {
            active.push(layout.gen_row(k));
        }
    }
    let a0 = vstack(&p0.a_eq, &select_rows(&p0.a_in, &active));
    let a1 = vstack(&p1.a_eq, &select_rows(&p1.a_in, &active));
    let b0 = stack_vec(&p0.b_eq, &select_vec(&p0.b_in, &active));
    let b1 = stack_vec(&p1.b_eq, &select_vec(&p1.b_in, &active));
    let (dp, dq, da, db) = (&p1.p - &p0.p, &p1.q - &p0.q, &a1 - &a0, b1 - b0);

    let mut z = DVector::zeros(n);
    z.rows_mut(0, n_r).copy_from(&gue.x);
    z.rows_mut(n_r, n_p).copy_from(&gue.dispatch.g);
    // Multipliers of the binding constraints from stationarity.
    let grad = &p0.p * &z + &p0.q;
    let (y, _) = lstsq(&a0.transpose(), &(-&grad));

    let k = a0.nrows();
    let mut kkt = DMatrix::zeros(n + k, n + k);
    kkt.view_mut((0, 0), (n, n)).copy_from(&p0.p);
    kkt.view_mut((0, n), (n, k)).copy_from(&a0.transpose());
    kkt.view_mut((n, 0), (k, n)).copy_from(&a0);
    let mut rhs = DVector::zeros(n + k);
    rhs.rows_mut(0, n).copy_from(&(-(&dp * &z) - &dq - da.transpose() * &y));
    rhs.rows_mut(n, k).copy_from(&(&db - &da * &z));
    let (sol, resid) = lstsq(&kkt, &rhs);
    if resid > 1e-6 {
        return Err(Error::DegeneratePattern(format!(
            "reduced KKT system at {param} is inconsistent (relative residual {resid:e})"
        )));
    }
    let dx = sol.rows(0, n_r).into_owned();
    let dg = sol.rows(n_r, n_p).into_owned();

    let x = &gue.x;
    let a_tilde = sys.transport.route_cost_matrix();
    let d_a_tilde = dp.view((0, 0), (n_r, n_r)).into_owned();
    let marginal = &a_tilde * x * 2.0 + sys.transport.route_free_cost();
    let dphi_t = x.dot(&(&d_a_tilde * x)) + marginal.dot(&dx);

    let g = &gue.dispatch.g;
    let pw = &sys.power;
    let dphi_p = match param {
        Parameter::Alpha(_) | Parameter::Fbar(_) => {
            // dΦ_P = λᵀ ∂d/∂θ − Σ η over the perturbed line's rows.
            let dd = &sys.route_bus_matrix() * &dx * sys.coupling.rho;
            let mut v = gue.dispatch.lambda.dot(&dd);
            if let Parameter::Fbar(l) = param {
                v -= pw.rows_of_line(l).iter().map(|&r| gue.dispatch.eta[r]).sum::<f64>();
            }
            v
        }
        Parameter::Rho | Parameter::QScale => {
            let dq_gen = dp.view((n_r, n_r), (n_p, n_p)).diagonal();
            let marginal_gen = g.component_mul(&pw.q_diag) + &pw.mu;
            0.5 * g.dot(&dq_gen.component_mul(g)) + marginal_gen.dot(&dg)
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
        side_residual: Some(gue.route_cost.dot(&dx).abs()),
    })
}

fn select_vec(v: &DVector<f64>, rows: &[usize]) -> DVector<f64> {
    DVector::from_iterator(rows.len(), rows.iter().map(|&r| v[r]))
}

fn stack_vec(a: &DVector<f64>, b: &DVector<f64>) -> DVector<f64> {
    DVector::from_iterator(a.len() + b.len(), a.iter().chain(b.iter()).copied())
}

/// Screen every capacity parameter of `sys` for BPs.
pub fn screen_bp(sys: &CoupledSystem, method: ScreenMethod) -> BpReport {
    screen_bp_with(sys, method, &Settings::default())
}

/// Screen with explicit settings and the equilibrium solver.
pub fn screen_bp_with(sys: &CoupledSystem, method: ScreenMethod, settings: &Settings) -> BpReport {
    let tol = settings.tol;
    let solver = move |s: &CoupledSystem| solve_gue_with(s, tol);
    let base = solve_gue_with(sys, tol);
    let params = sys.capacity_parameters();
    let per_param: Vec<(Parameter, Vec<Result<SensitivityRow>>)> = params
        .par_iter()
        .map(|&p| {
            let kkt = || match &base {
                Ok(g) => derivative_kkt(sys, g, p),
                Err(e) => Err(e.clone()),
            };
            let fd = || derivative_fd_with(sys, p, settings.fd_step, &solver);
            let rows = match method {
                ScreenMethod::Fd => vec![fd()],
                ScreenMethod::Kkt => vec![kkt()],
                ScreenMethod::Both => vec![kkt(), fd()],
            };
            (p, rows)
        })
        .collect();
    assemble_report(per_param)
}

/// Screen every capacity parameter with finite differences of an arbitrary
/// equilibrium map (for example a pricing policy).
pub fn screen_fd_with(sys: &CoupledSystem, settings: &Settings, solver: &Solver) -> BpReport {
    let per_param: Vec<(Parameter, Vec<Result<SensitivityRow>>)> = sys
        .capacity_parameters()
        .par_iter()
        .map(|&p| (p, vec![derivative_fd_with(sys, p, settings.fd_step, solver)]))
        .collect();
    assemble_report(per_param)
}

/// Collect rows, failures and verdicts. The first successful row of each
/// parameter decides its verdicts.
pub(crate) fn assemble_report(per_param: Vec<(Parameter, Vec<Result<SensitivityRow>>)>) -> BpReport {
    let mut report = BpReport::default();
    for (p, results) in per_param {
        let mut decided = false;
        for r in results {
            match r {
                Ok(row) => {
                    if !decided {
                        for t in row.verdicts() {
                            report.verdicts.entry(t).or_default().push(p);
                        }
                        decided = true;
                    }
                    report.rows.push(row);
                }
                Err(e) => report.failures.push((p, e)),
            }
        }
    }
    report
}

/// One point of a parameter sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub theta: f64,
    /// Equilibrium at `theta`, or the error that prevented it.
    pub outcome: std::result::Result<SweepPoint, Error>,
    /// The binding pattern differs from the previous successful row.
    pub pattern_switch: bool,
}

/// Equilibrium quantities recorded at a sweep point.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub x: DVector<f64>,
    pub lambda: DVector<f64>,
    pub costs: SocialCosts,
    pub pattern: BindingPattern,
    /// Exact derivative where the pattern is nondegenerate, finite
    /// differences otherwise.
    pub derivative: Option<SensitivityRow>,
}

/// A parameter sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepTable {
    pub parameter: Parameter,
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    /// Parameter values at which the binding pattern switches.
    pub fn switch_points(&self) -> Vec<f64> {
        self.rows.iter().filter(|r| r.pattern_switch).map(|r| r.theta).collect()
    }
}

/// Sweep `param` over `n_steps` equally spaced values in `[lo, hi]`.
pub fn sweep(sys: &CoupledSystem, param: Parameter, lo: f64, hi: f64, n_steps: usize) -> Result<SweepTable> {
    sweep_with(sys, param, lo, hi, n_steps, &Settings::default())
}

/// Sweep with explicit settings.
pub fn sweep_with(
    sys: &CoupledSystem,
    param: Parameter,
    lo: f64,
    hi: f64,
    n_steps: usize,
    settings: &Settings,
) -> Result<SweepTable> {
    if !(lo.is_finite() && hi.is_finite() && lo < hi) {
        return Err(Error::InvalidRange(format!("sweep needs lo < hi, got [{lo}, {hi}]")));
    }
    if n_steps < 2 {
        return Err(Error::InvalidRange(format!("sweep needs at least 2 steps, got {n_steps}")));
    }
    sys.parameter_value(param)?;
    let tol = settings.tol;
    let solver = move |s: &CoupledSystem| solve_gue_with(s, tol);
    let points: Vec<(f64, std::result::Result<SweepPoint, Error>)> = (0..n_steps)
        .into_par_iter()
        .map(|i| {
            let theta = lo + (hi - lo) * i as f64 / (n_steps - 1) as f64;
            let point = (|| {
                let s = sys.with_parameter(param, theta)?;
                let g = solver(&s)?;
                let derivative = derivative_kkt(&s, &g, param)
                    .or_else(|_| derivative_fd_with(&s, param, settings.fd_step, &solver))
                    .ok();
                Ok(SweepPoint {
                    x: g.x.clone(),
                    lambda: g.dispatch.lambda.clone(),
                    costs: social_costs(&s, &g),
                    pattern: g.binding,
                    derivative,
                })
            })();
            (theta, point)
        })
        .collect();
    let mut rows = Vec::with_capacity(n_steps);
    let mut prev: Option<BindingPattern> = None;
    for (theta, outcome) in points {
        let mut pattern_switch = false;
        if let Ok(p) = &outcome {
            pattern_switch = prev.as_ref().is_some_and(|q| !q.same_pattern(&p.pattern));
            prev = Some(p.pattern.clone());
        }
        rows.push(SweepRow {
            theta,
            outcome,
            pattern_switch,
        });
    }
    Ok(SweepTable { parameter: param, rows })
}

/// Header of screen and sweep CSV files.
pub const CSV_HEADER: &str = "param,theta,phi_t,phi_p,phi_c,dphi_t,dphi_p,dphi_c,method,boundary,verdicts";

/// Format a float with 12 significant digits in the shortest of fixed or
/// exponent notation, trailing zeros removed.
pub fn fmt_g12(v: f64) -> String {
    if v.is_nan() {
        return "nan".into();
    }
    if v.is_infinite() {
        return if v > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if v == 0.0 {
        return "0".into();
    }
    let sci = format!("{:.11e}", v);
    let (mantissa, exp) = sci.split_once('e').expect("exponent notation");
    let exp: i32 = exp.parse().expect("integer exponent");
    let trim = |s: &str| -> String {
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s.to_string()
        }
    };
    if (-4..12).contains(&exp) {
        let decimals = (11 - exp).max(0) as usize;
        trim(&format!("{:.*}", decimals, v))
    } else {
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{}e{}{:02}", trim(mantissa), sign, exp.abs())
    }
}

fn csv_row(out: &mut String, row: &SensitivityRow) {
    let verdicts: Vec<String> = row.verdicts().iter().map(|t| t.to_string()).collect();
    out.push_str(&format!(
        "{},{},{},{},{},{},{},{},{},{},{}\n",
        row.parameter,
        fmt_g12(row.theta),
        fmt_g12(row.costs.phi_t),
        fmt_g12(row.costs.phi_p),
        fmt_g12(row.costs.phi_c),
        fmt_g12(row.dphi_t),
        fmt_g12(row.dphi_p),
        fmt_g12(row.dphi_c),
        row.method,
        row.at_region_boundary,
        verdicts.join(";"),
    ));
}

/// CSV of a screen: one line per sensitivity row.
pub fn report_csv(report: &BpReport) -> String {
    let mut out = format!("{CSV_HEADER}\n");
    for row in &report.rows {
        csv_row(&mut out, row);
    }
    out
}

/// CSV of a sweep: one line per successful point. Derivative columns are
/// empty where no derivative could be computed; `boundary` is set where the
/// pattern switches or is degenerate.
pub fn sweep_csv(table: &SweepTable) -> String {
    let mut out = format!("{CSV_HEADER}\n");
    for row in &table.rows {
        let Ok(pt) = &row.outcome else { continue };
        let boundary = row.pattern_switch || pt.pattern.degenerate;
        match &pt.derivative {
            Some(d) => {
                let mut d = d.clone();
                d.at_region_boundary |= boundary;
                csv_row(&mut out, &d);
            }
            None => out.push_str(&format!(
                "{},{},{},{},{},,,,,{},\n",
                table.parameter,
                fmt_g12(row.theta),
                fmt_g12(pt.costs.phi_t),
                fmt_g12(pt.costs.phi_p),
                fmt_g12(pt.costs.phi_c),
                boundary,
            )),
        }
    }
    out
}
