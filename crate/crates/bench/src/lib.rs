//! Benchmark fixtures shared by the criterion targets.

use jko_core::driver::{lookup, Overrides};
use jko_core::{warm_start, JkoStepProblem, Result, StateVector};

/// One step problem of `preset` at resolution `nx`, with its warm start.
pub fn step_fixture(preset: &str, nx: usize) -> Result<(JkoStepProblem, StateVector)> {
    let mut p = lookup(preset)?;
    p.apply(&Overrides {
        nx: Some(nx),
        ..Overrides::default()
    })?;
    let problem = p.problem()?;
    let warm = warm_start(&problem.rho_prev, None, None, p.sqp.warm_start_floor)?;
    Ok((problem, warm))
}
