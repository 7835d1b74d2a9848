use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use jko_core::driver::{Snapshot, StepDiagnostics};
use jko_core::DensityField;
use serde::Serialize;

use crate::CliError;

/// `rho_t<t with 6 decimals>.csv`.
pub fn snapshot_name(t: f64) -> String {
    format!("rho_t{t:.6}.csv")
}

/// Write one density as CSV. `{}` on `f64` prints the shortest string that
/// parses back to the same value.
pub fn write_density_csv(rho: &DensityField, path: &Path) -> Result<(), CliError> {
    let io = |e| CliError::io(path, e);
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    let grid = rho.grid;
    if grid.dim() == 1 {
        writeln!(w, "x,rho").map_err(io)?;
    } else {
        writeln!(w, "x,y,rho").map_err(io)?;
    }
    for (c, v) in rho.values.iter().enumerate() {
        let p = grid.cell_center(c);
        if grid.dim() == 1 {
            writeln!(w, "{},{}", p[0], v).map_err(io)?;
        } else {
            writeln!(w, "{},{},{}", p[0], p[1], v).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    fs::write(path, text + "\n").map_err(|e| CliError::io(path, e))
}

/// Snapshots, `diagnostics.jsonl` and `manifest.json` under `dir`.
pub fn write_outputs<M: Serialize>(
    snapshots: &[Snapshot],
    diagnostics: &[StepDiagnostics],
    manifest: &M,
    dir: &Path,
) -> Result<Vec<PathBuf>, CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let mut written = Vec::new();
    for s in snapshots {
        let path = dir.join(snapshot_name(s.t));
        write_density_csv(&s.rho, &path)?;
        written.push(path);
    }

    let path = dir.join("diagnostics.jsonl");
    let io = |e| CliError::io(&path, e);
    let mut w = BufWriter::new(File::create(&path).map_err(io)?);
    for d in diagnostics {
        let line = serde_json::to_string(d).map_err(|e| CliError::Io(e.to_string()))?;
        writeln!(w, "{line}").map_err(io)?;
    }
    w.flush().map_err(io)?;
    written.push(path.clone());

    let path = dir.join("manifest.json");
    write_json(manifest, &path)?;
    written.push(path);
    Ok(written)
}
