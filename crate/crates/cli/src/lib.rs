//! Command-line front end: configuration, the five subcommands and the
//! CSV / JSON-lines writers.
//!
//! Exit codes: 0 success, 1 usage error, 2 solver failure (including a failed
//! derivative audit and unwritable output).

pub mod config;
pub mod output;

use std::io::Write;
use std::path::Path;

use jko_core::driver::{
    convergence_study, derivative_check, preset_library, run_with, DerivCheckReport, Preset,
};
use jko_core::oracles::{self, reference_heat_solver};
use jko_core::DensityField;
use serde::Serialize;
use thiserror::Error;

pub use config::{parse_config, Command, RunConfig};

/// Relative finite-difference error above which `derivcheck` fails.
pub const DERIVCHECK_TOL: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Clap(#[from] clap::Error),
    #[error("{0}")]
    Usage(String),
    #[error("solver failure: {0}")]
    Solver(#[from] jko_core::Error),
    #[error("{0}")]
    Check(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl CliError {
    pub fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::Io(format!("{}: {e}", path.display()))
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Clap(e) if !e.use_stderr() => 0,
            CliError::Clap(_) | CliError::Usage(_) => 1,
            CliError::Solver(_) | CliError::Check(_) | CliError::Io(_) => 2,
        }
    }
}

#[derive(Serialize)]
struct Manifest<'a, T: Serialize> {
    config: &'a RunConfig,
    preset: &'a Preset,
    #[serde(skip_serializing_if = "Option::is_none")]
    result: Option<T>,
}

/// Execute `cfg`, printing a human summary to `out`.
pub fn execute(cfg: &RunConfig, out: &mut dyn Write) -> Result<(), CliError> {
    let w = |out: &mut dyn Write, s: String| writeln!(out, "{s}").map_err(|e| CliError::Io(e.to_string()));
    match cfg.command {
        Command::ListPresets => {
            for p in preset_library() {
                w(out, format!("{:<18} {}", p.name, p.description))?;
            }
            Ok(())
        }
        Command::Run => {
            let p = cfg.resolved_preset()?;
            let res = run_with(&p, |_| {})?;
            output::write_outputs(
                &res.snapshots,
                &res.diagnostics,
                &Manifest {
                    config: cfg,
                    preset: &p,
                    result: None::<()>,
                },
                &cfg.out,
            )?;
            let last = res.diagnostics.last().copied().unwrap_or(res.initial);
            w(
                out,
                format!(
                    "{}: {} steps to t={:.6}, mass {:.12e}, min rho {:.3e}, modified energy {:.12e}",
                    p.name,
                    res.diagnostics.len(),
                    last.t,
                    last.mass,
                    last.min_rho,
                    last.modified_energy
                ),
            )?;
            w(out, format!("wrote {} snapshots to {}", res.snapshots.len(), cfg.out.display()))
        }
        Command::Convergence => {
            let p = cfg.resolved_preset()?;
            let taus: Vec<f64> = (0..4).map(|k| p.tau / f64::powi(2.0, k)).collect();
            let reference = heat_reference(&p, taus[taus.len() - 1])?;
            let table = convergence_study(&p, &taus, reference.as_ref())?;
            write_result(cfg, &p, &table, "convergence.json")?;
            w(out, "tau, richardson_l1, reference_l1".into())?;
            for r in &table.rows {
                let refe = r.reference.map_or("-".to_string(), |e| format!("{e:.6e}"));
                w(out, format!("{:.6e}, {:.6e}, {refe}", r.tau, r.richardson))?;
            }
            let ro = table.reference_order.map_or("-".to_string(), |o| format!("{o:.3}"));
            w(out, format!("order: richardson {:.3}, reference {ro}", table.richardson_order))
        }
        Command::Steady => {
            let p = cfg.resolved_preset()?;
            let res = run_with(&p, |_| {})?;
            let target = steady_state(&p, res.initial.mass)?;
            let report = SteadyReport {
                t: res.diagnostics.last().map_or(0.0, |d| d.t),
                l1: oracles::l1_err(&res.final_rho, &target)?,
                linf: oracles::linf_err(&res.final_rho, &target)?,
            };
            output::write_outputs(
                &res.snapshots,
                &res.diagnostics,
                &Manifest {
                    config: cfg,
                    preset: &p,
                    result: Some(&report),
                },
                &cfg.out,
            )?;
            w(
                out,
                format!("{} at t={:.6}: l1 {:.6e}, linf {:.6e} against the closed-form steady state", p.name, report.t, report.l1, report.linf),
            )
        }
        Command::Derivcheck => {
            let p = cfg.resolved_preset()?;
            let report = derivative_check(&p, cfg.seed, cfg.corrupt_gradient)?;
            print_audit(out, &report)?;
            if report.worst() > DERIVCHECK_TOL {
                return Err(CliError::Check(format!(
                    "derivative audit failed: max relative error {:.3e} > {DERIVCHECK_TOL:e}",
                    report.worst()
                )));
            }
            w(out, "derivative audit passed".into())
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct SteadyReport {
    pub t: f64,
    pub l1: f64,
    pub linf: f64,
}

fn write_result<T: Serialize>(cfg: &RunConfig, p: &Preset, result: &T, file: &str) -> Result<(), CliError> {
    std::fs::create_dir_all(&cfg.out).map_err(|e| CliError::io(&cfg.out, e))?;
    output::write_json(
        &Manifest {
            config: cfg,
            preset: p,
            result: Some(result),
        },
        &cfg.out.join(file),
    )
}

/// Implicit finite-difference reference for the heat preset, on a time step
/// much finer than the finest JKO step.
fn heat_reference(p: &Preset, tau_min: f64) -> Result<Option<DensityField>, CliError> {
    if p.name != "heat1d" {
        return Ok(None);
    }
    let rho0 = p.initial_density()?;
    Ok(Some(reference_heat_solver(&rho0, tau_min / 64.0, p.t_max)?))
}

fn steady_state(p: &Preset, mass: f64) -> Result<DensityField, CliError> {
    let grid = p.build_grid()?;
    let f: fn(f64, f64) -> f64 = match p.name.as_str() {
        "nfp1d" => |x, m| oracles::nfp_steady(x, 2.0, m),
        "agg1d" => |x, _| oracles::agg1d_steady(x),
        "dlss1d" => |x, _| oracles::dlss_steady(x),
        other => {
            return Err(CliError::Usage(format!(
                "preset `{other}` has no closed-form steady state (try nfp1d, agg1d or dlss1d)"
            )))
        }
    };
    Ok(DensityField::from_fn(grid, |x| f(x[0], mass))?)
}

fn print_audit(out: &mut dyn Write, r: &DerivCheckReport) -> Result<(), CliError> {
    let io = |e: std::io::Error| CliError::Io(e.to_string());
    writeln!(
        out,
        "{} ({} cells): gradient {:.3e}, hessian {:.3e}",
        r.preset, r.n_cells, r.exact.gradient_rel_err, r.exact.hessian_rel_err
    )
    .map_err(io)?;
    if let Some((mult, a)) = r.surrogate {
        writeln!(
            out,
            "surrogate (multiplier {mult}): gradient {:.3e}, hessian {:.3e}",
            a.gradient_rel_err, a.hessian_rel_err
        )
        .map_err(io)?;
    }
    Ok(())
}
