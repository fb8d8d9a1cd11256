//! Command-line orchestration: argument parsing, run directories, output
//! files, the run manifest, and the exit-code contract.
//!
//! Exit codes: 0 success, 1 usage/config error, 2 solver nonconvergence,
//! 3 check failure (slope checks or bound violations).

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use crate::analysis::{
    self, check_bounds, fit_rate, linf_envelope, rates_csv, Approximant, RateRow, SweepResult,
    NORM_NAMES,
};
use crate::asymptotics::LayerProfile;
use crate::config::{ConfigError, RunConfig, SlopeCheck};
use crate::geometry::BcKind;
use crate::solver::{self, DimensionlessBeta, SolverError, LADDER_HIGH, LADDER_LOW};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_NONCONVERGED: i32 = 2;
pub const EXIT_CHECK_FAILED: i32 = 3;

#[derive(Parser)]
#[command(name = "pbcell", version, about = "Periodic-cell Poisson-Boltzmann solver")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Path to the run configuration file.
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory (overrides the config's [output] dir).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Worker threads for sweep parallelism; 1 guarantees bit-reproducible CSVs.
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Solve the cell problem at a single beta and write the potential field.
    Solve(RunArgs),
    /// Sweep a beta grid, compare against approximants, fit rates.
    Sweep(RunArgs),
    /// Check the maximum-principle envelope for a single solve.
    Bounds(RunArgs),
    /// Integrate the boundary-layer profile ODE and write it out.
    Layer(RunArgs),
    /// Build or load the unit-cell mesh and write it out.
    Mesh(RunArgs),
}

/// Record of everything a run wrote, serialized last so its presence marks a
/// complete run.
struct Manifest {
    command: &'static str,
    files: Vec<String>,
    verdicts: Vec<(String, bool)>,
    started: Instant,
    config_echo: String,
}

impl Manifest {
    fn new(command: &'static str, config_echo: &str) -> Self {
        Manifest {
            command,
            files: Vec::new(),
            verdicts: Vec::new(),
            started: Instant::now(),
            config_echo: config_echo.to_string(),
        }
    }

    fn record(&mut self, name: &str) {
        self.files.push(name.to_string());
    }

    fn verdict(&mut self, what: impl Into<String>, pass: bool) {
        self.verdicts.push((what.into(), pass));
    }

    fn serialize(&self) -> String {
        let mut out = String::new();
        writeln!(out, "pbcell manifest").unwrap();
        writeln!(out, "version = {}", env!("CARGO_PKG_VERSION")).unwrap();
        writeln!(out, "command = {}", self.command).unwrap();
        writeln!(out, "elapsed_s = {:.3}", self.started.elapsed().as_secs_f64()).unwrap();
        writeln!(out, "files:").unwrap();
        for f in &self.files {
            writeln!(out, "  {f}").unwrap();
        }
        writeln!(out, "checks:").unwrap();
        for (what, pass) in &self.verdicts {
            writeln!(out, "  {what}: {}", if *pass { "pass" } else { "fail" }).unwrap();
        }
        writeln!(out, "config:").unwrap();
        for line in self.config_echo.lines() {
            writeln!(out, "  {line}").unwrap();
        }
        out
    }

    /// Writes the manifest atomically: temp file in the same directory, then
    /// rename over the final name.
    fn write(&self, dir: &Path) -> std::io::Result<()> {
        let tmp = dir.join("manifest.txt.tmp");
        std::fs::write(&tmp, self.serialize())?;
        std::fs::rename(&tmp, dir.join("manifest.txt"))
    }
}

#[derive(Debug, thiserror::Error)]
enum RunError {
    #[error("{0}")]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Solver(#[from] SolverError),
    #[error("{0}")]
    Analysis(#[from] analysis::AnalysisError),
    #[error("{0}")]
    Asymptotics(#[from] crate::asymptotics::AsymptoticsError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl RunError {
    fn exit_code(&self) -> i32 {
        match self {
            RunError::Solver(SolverError::NewtonStalled { .. }) => EXIT_NONCONVERGED,
            RunError::Analysis(analysis::AnalysisError::Solver(
                SolverError::NewtonStalled { .. },
            )) => EXIT_NONCONVERGED,
            _ => EXIT_CONFIG,
        }
    }
}

/// Runs the parsed command line; returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    let (name, args): (&'static str, &RunArgs) = match &cli.command {
        Command::Solve(a) => ("solve", a),
        Command::Sweep(a) => ("sweep", a),
        Command::Bounds(a) => ("bounds", a),
        Command::Layer(a) => ("layer", a),
        Command::Mesh(a) => ("mesh", a),
    };
    let cfg = match RunConfig::load(&args.config) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("pbcell: config error: {e}");
            return EXIT_CONFIG;
        }
    };
    let out_dir = args.out.clone().unwrap_or_else(|| cfg.output_dir.clone());
    if let Err(e) = std::fs::create_dir_all(&out_dir) {
        eprintln!("pbcell: cannot create output directory {}: {e}", out_dir.display());
        return EXIT_CONFIG;
    }
    let mut manifest = Manifest::new(name, &cfg.echo);
    let result = match &cli.command {
        Command::Solve(_) => cmd_solve(&cfg, &out_dir, &mut manifest),
        Command::Sweep(a) => cmd_sweep(&cfg, &out_dir, a.threads, &mut manifest),
        Command::Bounds(_) => cmd_bounds(&cfg, &out_dir, &mut manifest),
        Command::Layer(_) => cmd_layer(&cfg, &out_dir, &mut manifest),
        Command::Mesh(_) => cmd_mesh(&cfg, &out_dir, &mut manifest),
    };
    let code = match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("pbcell: {e}");
            e.exit_code()
        }
    };
    if let Err(e) = manifest.write(&out_dir) {
        eprintln!("pbcell: cannot write manifest: {e}");
        return EXIT_CONFIG;
    }
    code
}

fn bind_problem(
    cfg: &RunConfig,
) -> Result<(crate::geometry::CellMesh, crate::geometry::SurfaceData), RunError> {
    let mesh = cfg.geometry.build()?;
    let bc = cfg
        .bc
        .as_ref()
        .ok_or_else(|| RunError::Usage("config has no [bc] block".into()))?;
    let data = bc.bind(&mesh)?;
    Ok((mesh, data))
}

fn single_beta(cfg: &RunConfig) -> Result<f64, RunError> {
    cfg.beta
        .ok_or_else(|| RunError::Usage("this command needs `beta` in a [run] block".into()))
}

fn solve_once(
    space: &crate::fem::FemSpace,
    data: &crate::geometry::SurfaceData,
    cfg: &RunConfig,
    beta: f64,
) -> Result<(crate::fem::Field, crate::solver::SolveReport), RunError> {
    let field_report = if !(LADDER_LOW..=LADDER_HIGH).contains(&beta) {
        solver::continuation_solve(space, &cfg.electrolyte, data, beta, &cfg.solver)?
    } else {
        let b = DimensionlessBeta::new(beta)?;
        match data.kind {
            BcKind::Sigma => {
                solver::solve_neumann(space, &cfg.electrolyte, data, b, &cfg.solver, None)?
            }
            BcKind::Zeta => {
                solver::solve_dirichlet(space, &cfg.electrolyte, data, b, &cfg.solver, None)?
            }
        }
    };
    Ok(field_report)
}

fn report_text(beta: f64, report: &crate::solver::SolveReport) -> String {
    let mut out = String::new();
    writeln!(out, "pbcell solve report").unwrap();
    writeln!(out, "beta = {beta:.16e}").unwrap();
    writeln!(out, "iterations = {}", report.iterations).unwrap();
    writeln!(out, "final_residual = {:.16e}", report.final_residual).unwrap();
    if let Some(b) = report.balance_residual {
        writeln!(out, "balance_residual = {b:.16e}").unwrap();
    }
    writeln!(out, "wall_time_s = {:.3}", report.wall_time_s).unwrap();
    writeln!(out, "iter,energy,residual").unwrap();
    for (i, (e, r)) in report
        .energy_history
        .iter()
        .zip(&report.residual_history)
        .enumerate()
    {
        writeln!(out, "{i},{e:.16e},{r:.16e}").unwrap();
    }
    out
}

fn cmd_solve(cfg: &RunConfig, out: &Path, manifest: &mut Manifest) -> Result<i32, RunError> {
    let beta = single_beta(cfg)?;
    let (mesh, data) = bind_problem(cfg)?;
    let space = crate::fem::FemSpace::new(&mesh);
    let (psi, report) = solve_once(&space, &data, cfg, beta)?;
    psi.save(&out.join("psi.pbfield"))
        .map_err(|e| RunError::Usage(e.to_string()))?;
    manifest.record("psi.pbfield");
    std::fs::write(out.join("report.txt"), report_text(beta, &report))?;
    manifest.record("report.txt");
    manifest.verdict(format!("converged at beta={beta}"), true);
    Ok(EXIT_OK)
}

/// Theory slope used for the rates CSV: the configured check threshold when
/// one exists, NaN otherwise.
fn theory_slope(checks: &[SlopeCheck], a: Approximant, norm: &str) -> f64 {
    checks
        .iter()
        .find(|c| c.approximant == a && c.norm == norm)
        .map(|c| c.threshold)
        .unwrap_or(f64::NAN)
}

fn fit_all(result: &SweepResult, approximants: &[Approximant], checks: &[SlopeCheck]) -> Vec<RateRow> {
    let mut rows = Vec::new();
    for &a in approximants {
        for norm in NORM_NAMES {
            let series = result.series(a, norm);
            if let Ok(fit) = fit_rate(&series) {
                rows.push(RateRow {
                    approximant: a.name(),
                    norm,
                    fit,
                    theory_slope: theory_slope(checks, a, norm),
                });
            }
        }
    }
    rows
}

fn cmd_sweep(
    cfg: &RunConfig,
    out: &Path,
    threads: usize,
    manifest: &mut Manifest,
) -> Result<i32, RunError> {
    if cfg.betas.is_empty() {
        return Err(RunError::Usage(
            "sweep needs a beta grid in the [sweep] block".into(),
        ));
    }
    if cfg.approximants.is_empty() {
        return Err(RunError::Usage(
            "sweep needs an approximants list in the [sweep] block".into(),
        ));
    }
    let (mesh, data) = bind_problem(cfg)?;
    let space = crate::fem::FemSpace::new(&mesh);
    let result = analysis::sweep(
        &space,
        &cfg.electrolyte,
        &data,
        &cfg.betas,
        &cfg.approximants,
        &cfg.solver,
        threads,
    )?;
    std::fs::write(out.join("sweep.csv"), result.to_csv())?;
    manifest.record("sweep.csv");

    let solver_failures: Vec<&analysis::BetaDiagnostics> = result
        .diagnostics
        .iter()
        .filter(|d| d.failure.is_some())
        .collect();
    for d in &solver_failures {
        eprintln!(
            "pbcell: solve failed at beta={:.3e}: {}",
            d.beta,
            d.failure.as_deref().unwrap_or("")
        );
    }

    if cfg.betas.len() < 2 {
        std::fs::write(out.join("rates.csv"), rates_csv(&[]))?;
        manifest.record("rates.csv");
        eprintln!("pbcell: warning: single-beta grid, no rates fitted");
        return Ok(if solver_failures.is_empty() {
            EXIT_OK
        } else {
            EXIT_NONCONVERGED
        });
    }

    let rates = fit_all(&result, &cfg.approximants, &cfg.checks);
    std::fs::write(out.join("rates.csv"), rates_csv(&rates))?;
    manifest.record("rates.csv");

    let mut all_pass = true;
    for c in &cfg.checks {
        let label = format!(
            "{} {} slope {} {}",
            c.approximant.name(),
            c.norm,
            if c.upper { "<=" } else { ">=" },
            c.threshold
        );
        let fit = rates
            .iter()
            .find(|r| r.approximant == c.approximant.name() && r.norm == c.norm);
        let pass = match fit {
            Some(r) => c.passes(r.fit.slope),
            None => false,
        };
        if let Some(r) = fit {
            eprintln!("pbcell: {label}: fitted {:.3} -> {}", r.fit.slope, if pass { "pass" } else { "fail" });
        }
        manifest.verdict(label, pass);
        all_pass &= pass;
    }
    if !solver_failures.is_empty() {
        return Ok(EXIT_NONCONVERGED);
    }
    Ok(if all_pass { EXIT_OK } else { EXIT_CHECK_FAILED })
}

fn cmd_bounds(cfg: &RunConfig, out: &Path, manifest: &mut Manifest) -> Result<i32, RunError> {
    let beta = single_beta(cfg)?;
    let (mesh, data) = bind_problem(cfg)?;
    if data.kind != BcKind::Sigma {
        return Err(RunError::Usage(
            "the bounds command applies to Neumann problems".into(),
        ));
    }
    let space = crate::fem::FemSpace::new(&mesh);
    let (psi, _) = solve_once(&space, &data, cfg, beta)?;
    let env = linf_envelope(&space, &cfg.electrolyte, &data, beta, 1e-8)?;
    let violations = check_bounds(&psi, &env)?;
    let mut text = String::new();
    writeln!(text, "pbcell bounds report").unwrap();
    writeln!(text, "beta = {beta:.16e}").unwrap();
    let lo = env.lower.values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = env.upper.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    writeln!(text, "lower_min = {lo:.16e}").unwrap();
    writeln!(text, "upper_max = {hi:.16e}").unwrap();
    writeln!(text, "violations = {}", violations.len()).unwrap();
    for dof in violations.iter().take(50) {
        writeln!(text, "  dof {dof} value {:.16e}", psi.values[*dof]).unwrap();
    }
    std::fs::write(out.join("bounds.txt"), text)?;
    manifest.record("bounds.txt");
    manifest.verdict(
        format!("envelope [{lo:.4}, {hi:.4}] holds"),
        violations.is_empty(),
    );
    Ok(if violations.is_empty() {
        EXIT_OK
    } else {
        EXIT_CHECK_FAILED
    })
}

fn cmd_layer(cfg: &RunConfig, out: &Path, manifest: &mut Manifest) -> Result<i32, RunError> {
    let zeta = match cfg.layer_zeta {
        Some(z) => z,
        None => match cfg.bc.as_ref().map(|b| (&b.values, b.kind)) {
            Some((crate::config::BcValues::Constant(z), BcKind::Zeta)) => *z,
            _ => {
                return Err(RunError::Usage(
                    "layer needs `zeta` in a [layer] block or a constant Dirichlet bc".into(),
                ))
            }
        },
    };
    let profile = LayerProfile::compute(&cfg.electrolyte, zeta)?;
    profile.save(&out.join("profile.pblayer"))?;
    manifest.record("profile.pblayer");
    manifest.verdict(format!("profile computed for zeta={zeta}"), true);
    Ok(EXIT_OK)
}

fn cmd_mesh(cfg: &RunConfig, out: &Path, manifest: &mut Manifest) -> Result<i32, RunError> {
    let mesh = cfg.geometry.build()?;
    println!("nodes {}", mesh.n_nodes());
    println!("elements {}", mesh.n_elems());
    println!("surface_facets {}", mesh.facets().len());
    mesh.save(&out.join("mesh.pbmesh"))
        .map_err(|e| RunError::Usage(e.to_string()))?;
    manifest.record("mesh.pbmesh");
    manifest.verdict("mesh built", true);
    Ok(EXIT_OK)
}
