// SPDX-License-Identifier: MIT OR Apache-2.0

//! `braess` — command-line front end.
//!
//! Commands: `solve`, `screen`, `sweep`, `reduce`, `mitigate`, `case` and
//! `plot`. Systems come from a JSON file (`--system`) or a built-in case
//! (`--case`). Parameters are addressed as `alpha:<l>`, `fbar:<l>`, `rho` or
//! `qscale` with 0-based indices.
//!
//! Exit codes: 0 on success, 1 on a domain error (one `error[CODE]: message`
//! line on stderr), 2 on a usage error. Output goes to `--out` through a
//! temporary file renamed into place, or to stdout.

mod plot;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use braess::equilibrium::{gue_json, solve_gue_with};
use braess::metrics::{report_csv, screen_bp_with, sweep_csv, sweep_with, BpReport, ScreenMethod, Settings};
use braess::model::{builtin_case, load_system, save_system, CoupledSystem, Parameter, BUILTIN_NAMES};
use braess::pricing::{gue_under_policy_with, policy_prices, region_walk, screen_under_policy, PriceBox, PricingPolicy};
use braess::radial::reduce_report;
use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};
use nalgebra::DVector;

pub use plot::render_plot_data;

/// Equilibria and Braess' paradox analysis of coupled power–transportation
/// systems.
#[derive(Debug, Parser)]
#[command(name = "braess", version, about)]
struct Cli {
    /// QP tolerance.
    #[arg(long, global = true, default_value_t = braess::qp::DEFAULT_TOL, value_parser = positive, allow_hyphen_values = true)]
    tol: f64,
    /// Relative finite-difference step.
    #[arg(long = "fd-step", global = true, default_value_t = braess::metrics::DEFAULT_FD_STEP, value_parser = positive, allow_hyphen_values = true)]
    fd_step: f64,
    /// Suppress informational messages on stderr.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Compute the equilibrium and write it as JSON.
    Solve {
        #[command(flatten)]
        input: Input,
        #[command(flatten)]
        policy: PolicyArgs,
        #[command(flatten)]
        out: Out,
    },
    /// Screen every road slope and line limit for Braess' paradox (CSV).
    Screen {
        #[command(flatten)]
        input: Input,
        /// Derivative method.
        #[arg(long, value_enum, default_value_t = MethodArg::Both)]
        method: MethodArg,
        #[command(flatten)]
        policy: PolicyArgs,
        #[command(flatten)]
        out: Out,
    },
    /// Sweep one parameter and record social costs and derivatives (CSV).
    Sweep {
        #[command(flatten)]
        input: Input,
        /// Parameter to sweep: alpha:<l>, fbar:<l>, rho or qscale (0-based).
        #[arg(long)]
        param: Parameter,
        /// First parameter value.
        #[arg(long, allow_hyphen_values = true)]
        from: f64,
        /// Last parameter value.
        #[arg(long, allow_hyphen_values = true)]
        to: f64,
        /// Number of equally spaced values, endpoints included.
        #[arg(long)]
        steps: usize,
        #[command(flatten)]
        out: Out,
    },
    /// Radial reduction and analytic BP conditions (JSON).
    Reduce {
        #[command(flatten)]
        input: Input,
        #[command(flatten)]
        out: Out,
    },
    /// Search static charging prices that eliminate BP (JSON).
    Mitigate {
        #[command(flatten)]
        input: Input,
        /// Minimum charging revenue Πᵀx.
        #[arg(long = "revenue-floor", allow_hyphen_values = true)]
        revenue_floor: Option<f64>,
        /// Lower bound on every route price.
        #[arg(long = "pi-lo", default_value_t = -1.0, allow_hyphen_values = true)]
        pi_lo: f64,
        /// Upper bound on every route price.
        #[arg(long = "pi-hi", default_value_t = 1.0, allow_hyphen_values = true)]
        pi_hi: f64,
        /// Number of price samples to examine.
        #[arg(long, default_value_t = 64)]
        budget: usize,
        #[command(flatten)]
        out: Out,
    },
    /// Export a built-in case as a system JSON file.
    Case {
        /// Built-in case name.
        #[arg(long)]
        name: String,
        #[command(flatten)]
        out: Out,
    },
    /// Reshape a sweep CSV into gnuplot data blocks.
    Plot {
        /// Sweep CSV produced by `sweep`.
        #[arg(long)]
        input: PathBuf,
        #[command(flatten)]
        out: Out,
    },
}

#[derive(Debug, Args)]
#[group(required = true, multiple = false)]
struct Input {
    /// System JSON file.
    #[arg(long)]
    system: Option<PathBuf>,
    /// Built-in case name.
    #[arg(long)]
    case: Option<String>,
}

#[derive(Debug, Args)]
struct PolicyArgs {
    /// Charging-price policy.
    #[arg(long, value_enum, default_value_t = PolicyArg::Lmp)]
    policy: PolicyArg,
    /// Route prices for `--policy static`, comma separated.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pi: Option<Vec<f64>>,
}

#[derive(Debug, Args)]
struct Out {
    /// Output file (written atomically); stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum MethodArg {
    Fd,
    Kkt,
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum PolicyArg {
    Lmp,
    Static,
    OptT,
    OptP,
    OptC,
}

fn positive(s: &str) -> Result<f64, String> {
    match s.parse::<f64>() {
        Ok(v) if v.is_finite() && v > 0.0 => Ok(v),
        _ => Err(format!("expected a positive number, got `{s}`")),
    }
}

/// Failures of a command run.
enum Failure {
    /// Library error: exit 1 with its code.
    Domain(braess::Error),
    /// Output could not be written: exit 1.
    Io(String),
    /// Flag combination rejected after parsing: exit 2.
    Usage(clap::Error),
}

impl From<braess::Error> for Failure {
    fn from(e: braess::Error) -> Self {
        Failure::Domain(e)
    }
}

fn usage(msg: impl std::fmt::Display) -> Failure {
    Failure::Usage(Cli::command().error(clap::error::ErrorKind::ArgumentConflict, msg))
}

fn main() -> ExitCode {
    ExitCode::from(run(std::env::args_os()))
}

/// Parse `argv` (program name first), run the command and return the exit
/// code.
fn run<I, T>(argv: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(Failure::Domain(e)) => {
            eprintln!("error[{}]: {}", e.code(), e);
            1
        }
        Err(Failure::Io(msg)) => {
            eprintln!("error[IO_ERROR]: {msg}");
            1
        }
        Err(Failure::Usage(e)) => {
            let _ = e.print();
            2
        }
    }
}

fn execute(cli: &Cli) -> Result<(), Failure> {
    let settings = Settings {
        tol: cli.tol,
        fd_step: cli.fd_step,
    };
    let info = |msg: String| {
        if !cli.quiet {
            eprintln!("{msg}");
        }
    };
    match &cli.command {
        Command::Solve { input, policy, out } => {
            let sys = input.load()?;
            let policy = policy.resolve(&sys)?;
            let gue = gue_under_policy_with(&sys, &policy, settings.tol)?;
            let mut doc = gue_json(&sys, &gue);
            if !matches!(policy, PricingPolicy::LmpPassThrough) {
                let prices = policy_prices(&sys, &gue, &policy);
                doc["policy"] = serde_json::json!(policy.to_string());
                doc["route_prices"] = serde_json::json!(prices.as_slice());
            }
            info(format!(
                "solve: phi_t={} phi_p={} phi_c={}",
                doc["phi_t"], doc["phi_p"], doc["phi_c"]
            ));
            emit(&out.out, &json_text(&doc))
        }
        Command::Screen {
            input,
            method,
            policy,
            out,
        } => {
            let sys = input.load()?;
            let policy = policy.resolve(&sys)?;
            let report = match (&policy, method) {
                (PricingPolicy::LmpPassThrough, m) => {
                    let m = match m {
                        MethodArg::Fd => ScreenMethod::Fd,
                        MethodArg::Kkt => ScreenMethod::Kkt,
                        MethodArg::Both => ScreenMethod::Both,
                    };
                    screen_bp_with(&sys, m, &settings)
                }
                (PricingPolicy::Static(_), _) | (_, MethodArg::Fd | MethodArg::Both) => {
                    screen_under_policy(&sys, &policy, &settings)
                }
                (_, MethodArg::Kkt) => {
                    return Err(usage(format!(
                        "--method kkt is available for the lmp and static policies only, not `{policy}`"
                    )))
                }
            };
            if report.rows.is_empty() {
                if let Some((_, e)) = report.failures.first() {
                    return Err(Failure::Domain(e.clone()));
                }
            }
            summarize_screen(&report, &info);
            emit(&out.out, &report_csv(&report))
        }
        Command::Sweep {
            input,
            param,
            from,
            to,
            steps,
            out,
        } => {
            let sys = input.load()?;
            let table = sweep_with(&sys, *param, *from, *to, *steps, &settings)?;
            let failed: Vec<_> = table.rows.iter().filter_map(|r| r.outcome.as_ref().err()).collect();
            if failed.len() == table.rows.len() {
                return Err(Failure::Domain(failed[0].clone()));
            }
            if !failed.is_empty() {
                info(format!(
                    "sweep: {} of {} points failed (first: {}); they are omitted",
                    failed.len(),
                    table.rows.len(),
                    failed[0].code()
                ));
            }
            let switches = table.switch_points();
            if !switches.is_empty() {
                info(format!("sweep: binding pattern switches at {switches:?}"));
            }
            emit(&out.out, &sweep_csv(&table))
        }
        Command::Reduce { input, out } => {
            let sys = input.load()?;
            let gue = solve_gue_with(&sys, settings.tol)?;
            let doc = reduce_report(&sys, &gue)?;
            emit(&out.out, &json_text(&doc))
        }
        Command::Mitigate {
            input,
            revenue_floor,
            pi_lo,
            pi_hi,
            budget,
            out,
        } => {
            let sys = input.load()?;
            let bounds = PriceBox::uniform(sys.n_routes(), *pi_lo, *pi_hi)?;
            let walk = region_walk(&sys, &bounds, *budget, *revenue_floor)?;
            info(format!(
                "mitigate: {} after {} samples ({} regions)",
                walk.status,
                walk.samples,
                walk.to_json()["regions"]
            ));
            emit(&out.out, &json_text(&walk.to_json()))
        }
        Command::Case { name, out } => {
            let sys = builtin_case(name)?;
            emit(&out.out, &String::from_utf8_lossy(&save_system(&sys)))
        }
        Command::Plot { input, out } => {
            let text = std::fs::read_to_string(input).map_err(|e| {
                braess::Error::MalformedCsv(format!("cannot read {}: {e}", input.display()))
            })?;
            emit(&out.out, &render_plot_data(&text)?)
        }
    }
}

impl Input {
    fn load(&self) -> Result<CoupledSystem, Failure> {
        match (&self.system, &self.case) {
            (Some(path), _) => {
                let bytes = std::fs::read(path).map_err(|e| braess::Error::Parse {
                    line: 0,
                    column: 0,
                    message: format!("cannot read {}: {e}", path.display()),
                })?;
                Ok(load_system(&bytes)?)
            }
            (None, Some(name)) => builtin_case(name).map_err(|e| match e {
                braess::Error::UnknownCase(_) => {
                    Failure::Domain(braess::Error::UnknownCase(format!("{name} (known: {})", BUILTIN_NAMES.join(", "))))
                }
                e => Failure::Domain(e),
            }),
            (None, None) => Err(usage("one of --system or --case is required")),
        }
    }
}

impl PolicyArgs {
    fn resolve(&self, sys: &CoupledSystem) -> Result<PricingPolicy, Failure> {
        match (self.policy, &self.pi) {
            (PolicyArg::Static, Some(pi)) => {
                if pi.len() != sys.n_routes() {
                    return Err(Failure::Domain(braess::Error::DimensionMismatch(format!(
                        "--pi has {} prices but the system has {} routes",
                        pi.len(),
                        sys.n_routes()
                    ))));
                }
                Ok(PricingPolicy::Static(DVector::from_column_slice(pi)))
            }
            (PolicyArg::Static, None) => Err(usage("--policy static requires --pi")),
            (_, Some(_)) => Err(usage("--pi is only meaningful with --policy static")),
            (PolicyArg::Lmp, None) => Ok(PricingPolicy::LmpPassThrough),
            (PolicyArg::OptT, None) => Ok(PricingPolicy::OptT),
            (PolicyArg::OptP, None) => Ok(PricingPolicy::OptP),
            (PolicyArg::OptC, None) => Ok(PricingPolicy::OptC),
        }
    }
}

fn summarize_screen(report: &BpReport, info: &dyn Fn(String)) {
    for (bp, params) in &report.verdicts {
        if !params.is_empty() {
            let names: Vec<String> = params.iter().map(Parameter::to_string).collect();
            info(format!("screen: {}-{} BP at {}", &bp.to_string()[..1], &bp.to_string()[1..], names.join(", ")));
        }
    }
    if report.verdicts.values().all(Vec::is_empty) {
        info("screen: no BP detected".into());
    }
    for (param, e) in &report.failures {
        info(format!("screen: {param} skipped: {} {e}", e.code()));
    }
}

fn json_text(doc: &serde_json::Value) -> String {
    let mut s = serde_json::to_string_pretty(doc).unwrap_or_else(|_| doc.to_string());
    s.push('\n');
    s
}

/// Write `text` to `path` atomically (temporary file in the same directory,
/// then rename), or to stdout.
fn emit(path: &Option<PathBuf>, text: &str) -> Result<(), Failure> {
    let Some(path) = path else {
        let mut stdout = std::io::stdout().lock();
        return stdout
            .write_all(text.as_bytes())
            .and_then(|()| stdout.flush())
            .map_err(|e| Failure::Io(format!("cannot write to stdout: {e}")));
    };
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let io = |e: std::io::Error| Failure::Io(format!("cannot write {}: {e}", path.display()));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io)?;
    tmp.write_all(text.as_bytes()).map_err(io)?;
    tmp.as_file().sync_all().map_err(io)?;
    tmp.persist(path).map_err(|e| io(e.error))?;
    Ok(())
}
