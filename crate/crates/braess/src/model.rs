// SPDX-License-Identifier: MIT OR Apache-2.0

//! Domain types of the coupled power–transportation system, structural
//! validation, the on-disk JSON format and capacity-parameter addressing.
//!
//! Flows are carried in unnormalized units: `demand` is the total number of
//! travelers (1 for a unit continuum), and every solver works directly in
//! those units.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub mod builtin;

pub use builtin::{builtin_case, BUILTIN_NAMES};

/// Road network: per-link affine costs `α_ℓ·flow + β_ℓ` and the link-route
/// incidence matrix `A^LR` (links × routes).
#[derive(Debug, Clone, PartialEq)]
pub struct TransportationNetwork {
    pub alpha: DVector<f64>,
    pub beta: DVector<f64>,
    pub link_route: DMatrix<f64>,
}

impl TransportationNetwork {
    pub fn n_links(&self) -> usize {
        self.link_route.nrows()
    }

    pub fn n_routes(&self) -> usize {
        self.link_route.ncols()
    }

    /// Route-level congestion matrix `Ã = (A^LR)ᵀ diag(α) A^LR`.
    pub fn route_cost_matrix(&self) -> DMatrix<f64> {
        let a = &self.link_route;
        let mut weighted = a.clone();
        for (l, mut row) in weighted.row_iter_mut().enumerate() {
            row *= self.alpha[l];
        }
        a.transpose() * weighted
    }

    /// Route-level free-flow costs `(A^LR)ᵀ β`.
    pub fn route_free_cost(&self) -> DVector<f64> {
        self.link_route.transpose() * &self.beta
    }

    /// Travel cost of every route at flow `x`: `Ãx + (A^LR)ᵀβ`.
    pub fn travel_costs(&self, x: &DVector<f64>) -> DVector<f64> {
        self.route_cost_matrix() * x + self.route_free_cost()
    }

    /// Links used by route `r`.
    pub fn route_links(&self, r: usize) -> Vec<usize> {
        (0..self.n_links())
            .filter(|&l| self.link_route[(l, r)] != 0.0)
            .collect()
    }
}

/// DC power network: flow constraints `H p ≤ f̄`, quadratic generation costs
/// `½ gᵀ diag(Q) g + μᵀ g`, base load and optional dispatch restrictions.
///
/// Each row of `shift_factor` is one directed flow constraint. `line_index`
/// maps every row to a physical line, so a line limited in both directions
/// owns two rows (`+Ĥ_ℓ` and `−Ĥ_ℓ`); capacity parameters address lines, not
/// rows. `lines` optionally records the bus endpoints of every physical line,
/// which radial analyses require.
#[derive(Debug, Clone, PartialEq)]
pub struct PowerNetwork {
    pub shift_factor: DMatrix<f64>,
    pub f_cap: DVector<f64>,
    pub q_diag: DVector<f64>,
    pub mu: DVector<f64>,
    pub base_load: DVector<f64>,
    pub generator_mask: Vec<bool>,
    pub enforce_nonneg_gen: bool,
    pub line_index: Vec<usize>,
    pub lines: Option<Vec<[usize; 2]>>,
}

impl PowerNetwork {
    pub fn n_buses(&self) -> usize {
        self.shift_factor.ncols()
    }

    pub fn n_flow_constraints(&self) -> usize {
        self.shift_factor.nrows()
    }

    /// Number of physical lines (capacity parameters).
    pub fn n_lines(&self) -> usize {
        self.line_index.iter().map(|&l| l + 1).max().unwrap_or(0)
    }

    /// Constraint rows belonging to physical line `line`.
    pub fn rows_of_line(&self, line: usize) -> Vec<usize> {
        (0..self.line_index.len())
            .filter(|&k| self.line_index[k] == line)
            .collect()
    }

    /// Whether every bus may generate without sign restriction, i.e. the
    /// unrestricted dispatch of the base model.
    pub fn is_unrestricted(&self) -> bool {
        self.generator_mask.iter().all(|&g| g) && !self.enforce_nonneg_gen
    }
}

/// Charger placement: charger-route (`A^CR`, chargers × routes) and
/// charger-bus (`A^CB`, chargers × buses) incidences, energy per traveler `ρ`
/// and total traffic demand.
#[derive(Debug, Clone, PartialEq)]
pub struct Coupling {
    pub charger_route: DMatrix<f64>,
    pub charger_bus: DMatrix<f64>,
    pub rho: f64,
    pub demand: f64,
}

/// Demand of one origin-destination pair over its routes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OdDemand {
    pub routes: Vec<usize>,
    pub demand: f64,
}

/// A complete, validated coupled system.
#[derive(Debug, Clone, PartialEq)]
pub struct CoupledSystem {
    pub transport: TransportationNetwork,
    pub power: PowerNetwork,
    pub coupling: Coupling,
    pub od_demands: Option<Vec<OdDemand>>,
}

impl CoupledSystem {
    pub fn n_routes(&self) -> usize {
        self.transport.n_routes()
    }

    pub fn n_buses(&self) -> usize {
        self.power.n_buses()
    }

    /// Route-to-bus incidence `(A^CB)ᵀ A^CR` (buses × routes).
    pub fn route_bus_matrix(&self) -> DMatrix<f64> {
        self.coupling.charger_bus.transpose() * &self.coupling.charger_route
    }

    /// Bus at which travelers on route `r` charge.
    pub fn route_bus(&self, r: usize) -> usize {
        let rb = self.route_bus_matrix();
        (0..self.n_buses())
            .find(|&i| rb[(i, r)] != 0.0)
            .expect("validated system: every route has one charger bus")
    }

    /// Demand groups as (routes, demand); a single group when no O-D pairs
    /// are given.
    pub fn demand_groups(&self) -> Vec<(Vec<usize>, f64)> {
        match &self.od_demands {
            Some(ods) => ods.iter().map(|o| (o.routes.clone(), o.demand)).collect(),
            None => vec![((0..self.n_routes()).collect(), self.coupling.demand)],
        }
    }

    /// Total traffic over all demand groups.
    pub fn total_demand(&self) -> f64 {
        self.demand_groups().iter().map(|(_, d)| d).sum()
    }

    /// Charging price seen by every route at LMPs `λ`: `ρ (A^CR)ᵀ A^CB λ`.
    pub fn route_charging_price(&self, lambda: &DVector<f64>) -> DVector<f64> {
        self.route_bus_matrix().transpose() * lambda * self.coupling.rho
    }
}

/// Power-system charging loads `ρ (A^CB)ᵀ A^CR x`, plus the base load when
/// `include_base` is set.
pub fn charging_load(sys: &CoupledSystem, x: &DVector<f64>, include_base: bool) -> Result<DVector<f64>> {
    if x.len() != sys.n_routes() {
        return Err(Error::DimensionMismatch(format!(
            "flow vector has {} entries, system has {} routes",
            x.len(),
            sys.n_routes()
        )));
    }
    let mut d = sys.route_bus_matrix() * x * sys.coupling.rho;
    if include_base {
        d += &sys.power.base_load;
    }
    Ok(d)
}

// ---------------------------------------------------------------------------
// Validation
// ---------------------------------------------------------------------------

/// One validation finding.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Issue {
    pub code: String,
    pub message: String,
}

/// All invariant violations (errors) and soft findings (warnings).
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ValidationReport {
    pub errors: Vec<Issue>,
    pub warnings: Vec<Issue>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.errors.is_empty()
    }

    fn error(&mut self, code: &str, message: impl Into<String>) {
        self.errors.push(Issue {
            code: code.into(),
            message: message.into(),
        });
    }

    fn warn(&mut self, code: &str, message: impl Into<String>) {
        self.warnings.push(Issue {
            code: code.into(),
            message: message.into(),
        });
    }

    pub fn has_error(&self, code: &str) -> bool {
        self.errors.iter().any(|e| e.code == code)
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self
            .errors
            .iter()
            .map(|e| format!("{}: {}", e.code, e.message))
            .collect();
        write!(f, "{}", parts.join("; "))
    }
}

fn is_binary(v: f64) -> bool {
    v == 0.0 || v == 1.0
}

/// Check every structural invariant of `sys`. Never fails: violations are
/// returned as data.
pub fn validate_system(sys: &CoupledSystem) -> ValidationReport {
    let mut rep = ValidationReport::default();
    let t = &sys.transport;
    let pw = &sys.power;
    let c = &sys.coupling;
    let (m_t, n_r) = (t.n_links(), t.n_routes());
    let (m_p, n_p) = (pw.n_flow_constraints(), pw.n_buses());
    let n_c = c.charger_route.nrows();

    let mut dim = |ok: bool, what: String| {
        if !ok {
            rep.error("DIMENSION_MISMATCH", what);
        }
    };
    dim(t.alpha.len() == m_t, format!("alpha has {} entries for {m_t} links", t.alpha.len()));
    dim(t.beta.len() == m_t, format!("beta has {} entries for {m_t} links", t.beta.len()));
    dim(pw.f_cap.len() == m_p, format!("f_cap has {} entries for {m_p} flow constraints", pw.f_cap.len()));
    dim(pw.q_diag.len() == n_p, format!("q_diag has {} entries for {n_p} buses", pw.q_diag.len()));
    dim(pw.mu.len() == n_p, format!("mu has {} entries for {n_p} buses", pw.mu.len()));
    dim(pw.base_load.len() == n_p, format!("base_load has {} entries for {n_p} buses", pw.base_load.len()));
    dim(
        pw.generator_mask.len() == n_p,
        format!("generator_mask has {} entries for {n_p} buses", pw.generator_mask.len()),
    );
    dim(
        pw.line_index.len() == m_p,
        format!("line_index has {} entries for {m_p} flow constraints", pw.line_index.len()),
    );
    dim(
        c.charger_route.ncols() == n_r,
        format!("charger_route has {} columns for {n_r} routes", c.charger_route.ncols()),
    );
    dim(
        c.charger_bus.nrows() == n_c,
        format!("charger_bus has {} rows for {n_c} chargers", c.charger_bus.nrows()),
    );
    dim(
        c.charger_bus.ncols() == n_p,
        format!("charger_bus has {} columns for {n_p} buses", c.charger_bus.ncols()),
    );
    if let Some(lines) = &pw.lines {
        dim(
            lines.len() == pw.n_lines(),
            format!("lines lists {} lines, line_index addresses {}", lines.len(), pw.n_lines()),
        );
        dim(
            lines.iter().all(|l| l[0] < n_p && l[1] < n_p && l[0] != l[1]),
            "lines reference unknown buses or self-loops".to_string(),
        );
    }
    if let Some(ods) = &sys.od_demands {
        dim(
            ods.iter().all(|o| o.routes.iter().all(|&r| r < n_r)),
            "od_demands reference unknown routes".to_string(),
        );
    }
    if !rep.is_ok() {
        return rep;
    }

    let all_finite = t.alpha.iter().chain(t.beta.iter()).all(|v| v.is_finite())
        && t.link_route.iter().all(|v| v.is_finite())
        && pw.shift_factor.iter().all(|v| v.is_finite())
        && pw.f_cap.iter().chain(pw.q_diag.iter()).chain(pw.mu.iter()).all(|v| v.is_finite())
        && pw.base_load.iter().all(|v| v.is_finite())
        && c.rho.is_finite()
        && c.demand.is_finite();
    if !all_finite {
        rep.error("INVALID_VALUE", "non-finite number in system data");
    }
    if t.alpha.iter().any(|&a| a < 0.0) {
        rep.error("INVALID_VALUE", "alpha must be nonnegative");
    }
    if t.beta.iter().any(|&b| b < 0.0) {
        rep.error("INVALID_VALUE", "beta must be nonnegative");
    }
    if !t.link_route.iter().all(|&v| is_binary(v)) {
        rep.error("INVALID_VALUE", "link_route must be a 0/1 matrix");
    }
    if pw.f_cap.iter().any(|&f| f <= 0.0) {
        rep.error("NONPOSITIVE_CAPACITY", "every flow limit f_cap must be positive");
    }
    if pw.q_diag.iter().any(|&q| q < 0.0) {
        rep.error("INVALID_VALUE", "q_diag must be nonnegative");
    }
    if pw.base_load.iter().any(|&d| d < 0.0) {
        rep.error("INVALID_VALUE", "base_load must be nonnegative");
    }
    if c.rho.is_nan() || c.rho <= 0.0 {
        rep.error("INVALID_VALUE", "rho must be positive");
    }
    if c.demand.is_nan() || c.demand < 0.0 {
        rep.error("INVALID_VALUE", "demand must be nonnegative");
    }
    if !c.charger_route.iter().chain(c.charger_bus.iter()).all(|&v| is_binary(v)) {
        rep.error("INVALID_VALUE", "charger incidence matrices must be 0/1");
    }
    for r in 0..n_r {
        let ones = c.charger_route.column(r).iter().filter(|&&v| v != 0.0).count();
        if ones != 1 {
            rep.error(
                "CHARGER_MULTIPLICITY",
                format!("route {r} is served by {ones} chargers, expected exactly one"),
            );
        }
    }
    for k in 0..n_c {
        let ones = c.charger_bus.row(k).iter().filter(|&&v| v != 0.0).count();
        if ones != 1 {
            rep.error(
                "CHARGER_MULTIPLICITY",
                format!("charger {k} connects to {ones} buses, expected exactly one"),
            );
        }
    }
    for r in 0..n_r {
        if t.link_route.column(r).iter().all(|&v| v == 0.0) {
            rep.warn("EMPTY_ROUTE", format!("route {r} uses no link (zero-length route)"));
        }
    }
    if let Some(ods) = &sys.od_demands {
        let mut seen = vec![0usize; n_r];
        for o in ods {
            for &r in &o.routes {
                seen[r] += 1;
            }
            if !o.demand.is_finite() || o.demand < 0.0 {
                rep.error("OD_PARTITION", "O-D demands must be finite and nonnegative");
            }
        }
        if seen.iter().any(|&s| s != 1) {
            rep.error("OD_PARTITION", "od_demands must partition the route set");
        }
    }
    for i in 0..n_p {
        if pw.generator_mask[i] && pw.q_diag[i] == 0.0 {
            rep.warn(
                "NONUNIQUE_WARNING",
                format!("bus {i} generates at zero quadratic cost; generation may be nonunique"),
            );
        }
    }
    rep
}

// ---------------------------------------------------------------------------
// JSON format
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TransportFile {
    alpha: Vec<f64>,
    beta: Vec<f64>,
    link_route: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PowerFile {
    shift_factor: Vec<Vec<f64>>,
    f_cap: Vec<f64>,
    q_diag: Vec<f64>,
    mu: Vec<f64>,
    #[serde(default)]
    base_load: Option<Vec<f64>>,
    #[serde(default)]
    generator_mask: Option<Vec<f64>>,
    #[serde(default)]
    enforce_nonneg_gen: bool,
    #[serde(default)]
    line_index: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    lines: Option<Vec<[usize; 2]>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CouplingFile {
    charger_route: Vec<Vec<f64>>,
    charger_bus: Vec<Vec<f64>>,
    rho: f64,
    #[serde(default = "default_demand")]
    demand: f64,
}

fn default_demand() -> f64 {
    1.0
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SystemFile {
    transport: TransportFile,
    power: PowerFile,
    coupling: CouplingFile,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    od_demands: Option<Vec<OdDemand>>,
}

fn matrix_from_rows(rows: &[Vec<f64>], ncols_hint: usize, what: &str) -> Result<DMatrix<f64>> {
    let ncols = rows.first().map_or(ncols_hint, Vec::len);
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::DimensionMismatch(format!("{what}: rows have different lengths")));
    }
    Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

fn matrix_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn vec_of(v: &DVector<f64>) -> Vec<f64> {
    v.iter().copied().collect()
}

fn dimension_to_parse(e: Error) -> Error {
    match e {
        Error::DimensionMismatch(m) => Error::Validation(ValidationReport {
            errors: vec![Issue {
                code: "DIMENSION_MISMATCH".into(),
                message: m,
            }],
            warnings: vec![],
        }),
        other => other,
    }
}

impl SystemFile {
    fn into_system(self) -> Result<CoupledSystem> {
        let n_r = self.coupling.charger_route.first().map_or(0, Vec::len);
        let n_p = self.power.q_diag.len();
        let link_route = matrix_from_rows(&self.transport.link_route, n_r, "link_route")?;
        let shift_factor = matrix_from_rows(&self.power.shift_factor, n_p, "shift_factor")?;
        let n_buses = shift_factor.ncols();
        let m_p = shift_factor.nrows();
        let power = PowerNetwork {
            f_cap: DVector::from_vec(self.power.f_cap),
            q_diag: DVector::from_vec(self.power.q_diag),
            mu: DVector::from_vec(self.power.mu),
            base_load: DVector::from_vec(self.power.base_load.unwrap_or_else(|| vec![0.0; n_buses])),
            generator_mask: match self.power.generator_mask {
                Some(mask) => {
                    if mask.iter().any(|&v| !is_binary(v)) {
                        return Err(Error::Validation(ValidationReport {
                            errors: vec![Issue {
                                code: "INVALID_VALUE".into(),
                                message: "generator_mask must contain only 0 and 1".into(),
                            }],
                            warnings: vec![],
                        }));
                    }
                    mask.iter().map(|&v| v == 1.0).collect()
                }
                None => vec![true; n_buses],
            },
            enforce_nonneg_gen: self.power.enforce_nonneg_gen,
            line_index: self.power.line_index.unwrap_or_else(|| (0..m_p).collect()),
            lines: self.power.lines,
            shift_factor,
        };
        let charger_route = matrix_from_rows(&self.coupling.charger_route, 0, "charger_route")?;
        let charger_bus = matrix_from_rows(&self.coupling.charger_bus, n_buses, "charger_bus")?;
        Ok(CoupledSystem {
            transport: TransportationNetwork {
                alpha: DVector::from_vec(self.transport.alpha),
                beta: DVector::from_vec(self.transport.beta),
                link_route,
            },
            power,
            coupling: Coupling {
                charger_route,
                charger_bus,
                rho: self.coupling.rho,
                demand: self.coupling.demand,
            },
            od_demands: self.od_demands,
        })
    }

    fn from_system(sys: &CoupledSystem) -> SystemFile {
        SystemFile {
            transport: TransportFile {
                alpha: vec_of(&sys.transport.alpha),
                beta: vec_of(&sys.transport.beta),
                link_route: matrix_to_rows(&sys.transport.link_route),
            },
            power: PowerFile {
                shift_factor: matrix_to_rows(&sys.power.shift_factor),
                f_cap: vec_of(&sys.power.f_cap),
                q_diag: vec_of(&sys.power.q_diag),
                mu: vec_of(&sys.power.mu),
                base_load: Some(vec_of(&sys.power.base_load)),
                generator_mask: Some(
                    sys.power
                        .generator_mask
                        .iter()
                        .map(|&g| if g { 1.0 } else { 0.0 })
                        .collect(),
                ),
                enforce_nonneg_gen: sys.power.enforce_nonneg_gen,
                line_index: Some(sys.power.line_index.clone()),
                lines: sys.power.lines.clone(),
            },
            coupling: CouplingFile {
                charger_route: matrix_to_rows(&sys.coupling.charger_route),
                charger_bus: matrix_to_rows(&sys.coupling.charger_bus),
                rho: sys.coupling.rho,
                demand: sys.coupling.demand,
            },
            od_demands: sys.od_demands.clone(),
        }
    }
}

/// Parse and validate a system from its JSON representation.
pub fn load_system(bytes: &[u8]) -> Result<CoupledSystem> {
    let file: SystemFile = serde_json::from_slice(bytes).map_err(|e| Error::Parse {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    let sys = file.into_system().map_err(dimension_to_parse)?;
    let report = validate_system(&sys);
    if !report.is_ok() {
        return Err(Error::Validation(report));
    }
    Ok(sys)
}

/// Serialize a system to pretty-printed JSON (full round-trip precision).
pub fn save_system(sys: &CoupledSystem) -> Vec<u8> {
    let mut out = serde_json::to_vec_pretty(&SystemFile::from_system(sys))
        .expect("system serialization cannot fail");
    out.push(b'\n');
    out
}

// ---------------------------------------------------------------------------
// Parameter addressing
// ---------------------------------------------------------------------------

/// A scalar parameter of the system that screens and sweeps vary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Parameter {
    /// Congestion slope of link ℓ.
    Alpha(usize),
    /// Capacity of physical line ℓ (every constraint row of the line).
    Fbar(usize),
    /// Charging energy per traveler.
    Rho,
    /// Multiplier σ applied to every quadratic generation cost.
    QScale,
}

impl fmt::Display for Parameter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Parameter::Alpha(l) => write!(f, "alpha:{l}"),
            Parameter::Fbar(l) => write!(f, "fbar:{l}"),
            Parameter::Rho => write!(f, "rho"),
            Parameter::QScale => write!(f, "qscale"),
        }
    }
}

impl std::str::FromStr for Parameter {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let parse_index = |rest: &str| {
            rest.parse::<usize>()
                .map_err(|_| format!("invalid index in parameter `{s}`"))
        };
        match s.split_once(':') {
            Some(("alpha", rest)) => Ok(Parameter::Alpha(parse_index(rest)?)),
            Some(("fbar", rest)) => Ok(Parameter::Fbar(parse_index(rest)?)),
            None if s == "rho" => Ok(Parameter::Rho),
            None if s == "qscale" => Ok(Parameter::QScale),
            _ => Err(format!(
                "unknown parameter `{s}` (expected alpha:<l>, fbar:<l>, rho or qscale)"
            )),
        }
    }
}

impl CoupledSystem {
    /// Every capacity parameter: all link slopes, then all line capacities.
    pub fn capacity_parameters(&self) -> Vec<Parameter> {
        (0..self.transport.n_links())
            .map(Parameter::Alpha)
            .chain((0..self.power.n_lines()).map(Parameter::Fbar))
            .collect()
    }

    fn check_parameter(&self, param: Parameter) -> Result<()> {
        match param {
            Parameter::Alpha(l) if l >= self.transport.n_links() => Err(Error::DimensionMismatch(format!(
                "link {l} does not exist ({} links)",
                self.transport.n_links()
            ))),
            Parameter::Fbar(l) if l >= self.power.n_lines() => Err(Error::DimensionMismatch(format!(
                "line {l} does not exist ({} lines)",
                self.power.n_lines()
            ))),
            _ => Ok(()),
        }
    }

    /// Current value of `param` (`QScale` is always 1 relative to `self`).
    pub fn parameter_value(&self, param: Parameter) -> Result<f64> {
        self.check_parameter(param)?;
        Ok(match param {
            Parameter::Alpha(l) => self.transport.alpha[l],
            Parameter::Fbar(l) => self.power.f_cap[self.power.rows_of_line(l)[0]],
            Parameter::Rho => self.coupling.rho,
            Parameter::QScale => 1.0,
        })
    }

    /// Copy of the system with `param` set to `value` (`QScale` multiplies
    /// the quadratic costs of `self` by `value`).
    pub fn with_parameter(&self, param: Parameter, value: f64) -> Result<CoupledSystem> {
        self.check_parameter(param)?;
        let mut out = self.clone();
        match param {
            Parameter::Alpha(l) => out.transport.alpha[l] = value,
            Parameter::Fbar(l) => {
                for k in self.power.rows_of_line(l) {
                    out.power.f_cap[k] = value;
                }
            }
            Parameter::Rho => out.coupling.rho = value,
            Parameter::QScale => out.power.q_diag *= value,
        }
        Ok(out)
    }
}
