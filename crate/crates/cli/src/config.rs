//! Run configuration: command-line flags layered over an optional
//! `key=value` file layered over preset defaults.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use jko_core::driver::{lookup, Overrides, Preset};
use serde::Serialize;

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Subcommand)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    /// Run a preset and write snapshots and diagnostics.
    Run,
    /// Halve tau repeatedly and report the temporal order.
    Convergence,
    /// Run to t_max and compare with the closed-form steady state.
    Steady,
    /// Compare analytic derivatives with finite differences.
    Derivcheck,
    /// List the available presets.
    ListPresets,
}

#[derive(Debug, Parser)]
#[command(name = "jko", version, about = "Fisher-information regularized JKO solver")]
pub struct Args {
    #[command(subcommand)]
    pub command: Command,
    #[arg(long, global = true)]
    pub preset: Option<String>,
    /// Flat key=value file; flags take precedence over it.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<String>,
    #[arg(long, global = true, value_name = "N")]
    pub nx: Option<String>,
    #[arg(long, global = true, value_name = "N")]
    pub ny: Option<String>,
    #[arg(long, global = true, value_name = "X")]
    pub tau: Option<String>,
    #[arg(long, global = true, value_name = "X")]
    pub beta: Option<String>,
    /// Surrogate Hessian multiplier; 0 selects the exact Hessian.
    #[arg(long, global = true, value_name = "N")]
    pub beta_tilde_mult: Option<String>,
    #[arg(long, global = true, value_name = "X")]
    pub t_max: Option<String>,
    #[arg(long, global = true, value_name = "X")]
    pub tol: Option<String>,
    #[arg(long, global = true, value_name = "N")]
    pub max_inner: Option<String>,
    #[arg(long, global = true, value_name = "X")]
    pub qp_tol: Option<String>,
    #[arg(long, global = true, value_name = "N")]
    pub snapshot_stride: Option<String>,
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<String>,
    /// Negative control for derivcheck.
    #[arg(long, global = true, hide = true)]
    pub corrupt_gradient: bool,
}

pub const DEFAULT_SEED: u64 = 7;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub command: Command,
    pub preset: Option<String>,
    pub overrides: Overrides,
    pub seed: u64,
    pub out: PathBuf,
    #[serde(skip)]
    pub corrupt_gradient: bool,
}

impl RunConfig {
    /// The preset with every override applied.
    pub fn resolved_preset(&self) -> Result<Preset, CliError> {
        let name = self
            .preset
            .as_deref()
            .ok_or_else(|| CliError::Usage("missing preset: pass --preset or set `preset` in the config file".into()))?;
        let mut p = lookup(name).map_err(|e| CliError::Usage(e.to_string()))?;
        p.apply(&self.overrides).map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(p)
    }
}

/// Settings gathered from one source, still as raw strings.
#[derive(Debug, Default)]
struct Layer {
    values: Vec<(String, String)>,
}

impl Layer {
    fn push(&mut self, key: &str, value: Option<&String>) {
        if let Some(v) = value {
            self.values.push((key.to_string(), v.clone()));
        }
    }
}

const KEYS: &[&str] = &[
    "preset",
    "out",
    "nx",
    "ny",
    "tau",
    "beta",
    "beta_tilde_mult",
    "t_max",
    "tol",
    "max_inner",
    "qp_tol",
    "snapshot_stride",
    "seed",
];

/// Parse a config file body. Keys use the flag names with underscores.
fn parse_file(text: &str, path: &Path) -> Result<Layer, CliError> {
    let mut layer = Layer::default();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(CliError::Usage(format!(
                "{}:{}: expected key=value, got `{line}`",
                path.display(),
                n + 1
            )));
        };
        let key = k.trim().replace('-', "_");
        if !KEYS.contains(&key.as_str()) {
            return Err(CliError::Usage(format!("{}:{}: unknown key `{}`", path.display(), n + 1, k.trim())));
        }
        layer.values.push((key, v.trim().to_string()));
    }
    Ok(layer)
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, CliError> {
    v.parse()
        .map_err(|_| CliError::Usage(format!("invalid value `{v}` for `{key}`")))
}

fn set(cfg: &mut RunConfig, key: &str, v: &str) -> Result<(), CliError> {
    let o = &mut cfg.overrides;
    match key {
        "preset" => cfg.preset = Some(v.to_string()),
        "out" => cfg.out = PathBuf::from(v),
        "nx" => o.nx = Some(num(key, v)?),
        "ny" => o.ny = Some(num(key, v)?),
        "tau" => o.tau = Some(num(key, v)?),
        "beta" => o.beta = Some(num(key, v)?),
        "beta_tilde_mult" => o.beta_tilde_mult = Some(num(key, v)?),
        "t_max" => o.t_max = Some(num(key, v)?),
        "tol" => o.tol = Some(num(key, v)?),
        "max_inner" => o.max_inner = Some(num(key, v)?),
        "qp_tol" => o.qp_tol = Some(num(key, v)?),
        "snapshot_stride" => o.snapshot_stride = Some(num(key, v)?),
        "seed" => cfg.seed = num(key, v)?,
        _ => return Err(CliError::Usage(format!("unknown key `{key}`"))),
    }
    Ok(())
}

/// Resolve parsed flags and the optional config file into a [`RunConfig`].
pub fn resolve(args: Args) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig {
        command: args.command,
        preset: None,
        overrides: Overrides::default(),
        seed: DEFAULT_SEED,
        out: PathBuf::from("out"),
        corrupt_gradient: args.corrupt_gradient,
    };
    if let Some(path) = &args.config {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        for (k, v) in parse_file(&text, path)?.values {
            set(&mut cfg, &k, &v)?;
        }
    }
    let mut flags = Layer::default();
    flags.push("preset", args.preset.as_ref());
    flags.push("out", args.out.as_ref());
    flags.push("nx", args.nx.as_ref());
    flags.push("ny", args.ny.as_ref());
    flags.push("tau", args.tau.as_ref());
    flags.push("beta", args.beta.as_ref());
    flags.push("beta_tilde_mult", args.beta_tilde_mult.as_ref());
    flags.push("t_max", args.t_max.as_ref());
    flags.push("tol", args.tol.as_ref());
    flags.push("max_inner", args.max_inner.as_ref());
    flags.push("qp_tol", args.qp_tol.as_ref());
    flags.push("snapshot_stride", args.snapshot_stride.as_ref());
    flags.push("seed", args.seed.as_ref());
    for (k, v) in flags.values {
        set(&mut cfg, &k, &v)?;
    }
    Ok(cfg)
}

/// Parse `argv` (including the program name).
pub fn parse_config<I, T>(argv: I) -> Result<RunConfig, CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let args = Args::try_parse_from(argv).map_err(CliError::Clap)?;
    resolve(args)
}
