//! Sequential quadratic programming for one JKO step.
//!
//! Each inner iteration solves the quadratic model of `F` at `u` under the
//! continuity constraint and `rho >= 0`, then moves `u <- u + t (z - u)`.
//! The first move is a full step onto the feasible manifold; later moves
//! backtrack on `F` with an Armijo test. Iteration stops once
//! `|F(u_next) - F(u)| / |F(u)| < tol_rel`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{DensityField, FluxField};
use crate::linalg::{dot, DEFAULT_SHIFT};
use crate::objective::{JkoStepProblem, StateVector};
use crate::qp::{QpOptions, QpProblem, QpResult, QpWorkspace};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LineSearch {
    /// Always take `t = 1`.
    FullStep,
    Backtracking {
        shrink: f64,
        armijo_c: f64,
        max_halvings: usize,
    },
}

impl Default for LineSearch {
    fn default() -> Self {
        LineSearch::Backtracking {
            shrink: 0.5,
            armijo_c: 1e-4,
            max_halvings: 30,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SqpParams {
    pub tol_rel: f64,
    pub max_inner: usize,
    pub line_search: LineSearch,
    pub qp_tol: f64,
    pub qp_max_iter: usize,
    pub warm_start_floor: f64,
    /// Recompute the Hessian every `hessian_lag` inner iterations.
    pub hessian_lag: usize,
    /// Keep every inner iterate in the result (for rate studies).
    pub record_iterates: bool,
}

impl Default for SqpParams {
    fn default() -> Self {
        Self {
            tol_rel: 1e-6,
            max_inner: 50,
            line_search: LineSearch::default(),
            qp_tol: 1e-9,
            qp_max_iter: 200,
            warm_start_floor: 1e-6,
            hessian_lag: 1,
            record_iterates: false,
        }
    }
}

impl SqpParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol_rel > 0.0) {
            return Err(Error::InvalidParameter(format!("tol_rel {} must be positive", self.tol_rel)));
        }
        if !(self.qp_tol > 0.0) {
            return Err(Error::InvalidParameter(format!("qp_tol {} must be positive", self.qp_tol)));
        }
        if self.max_inner == 0 || self.hessian_lag == 0 {
            return Err(Error::InvalidParameter("max_inner and hessian_lag must be >= 1".into()));
        }
        if let LineSearch::Backtracking { shrink, armijo_c, .. } = self.line_search {
            if !(shrink > 0.0 && shrink < 1.0) || !(armijo_c > 0.0 && armijo_c < 1.0) {
                return Err(Error::InvalidParameter("line search constants must lie in (0, 1)".into()));
            }
        }
        Ok(())
    }
}

/// One inner iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct InnerRecord {
    pub objective: f64,
    pub step: f64,
    pub qp_iterations: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub rho_next: DensityField,
    pub m_next: FluxField,
    pub state: StateVector,
    pub inner_iterations: usize,
    pub qp_iterations: usize,
    pub final_objective: f64,
    pub converged: bool,
    pub trace: Vec<InnerRecord>,
    /// Inner iterates `u^(1), u^(2), ...` when requested.
    pub iterates: Vec<Vec<f64>>,
}

/// Initial guess: `2 rho_k - rho_{k-1}` where that is at least `floor`,
/// `rho_k` elsewhere; the previous flux or zero.
pub fn warm_start(
    rho_k: &DensityField,
    rho_km1: Option<&DensityField>,
    m_prev: Option<&FluxField>,
    floor: f64,
) -> Result<StateVector> {
    let grid = rho_k.grid;
    let rho: Vec<f64> = match rho_km1 {
        Some(prev) => {
            if prev.grid != grid {
                return Err(Error::InvalidGrid("warm start fields on different grids".into()));
            }
            rho_k
                .values
                .iter()
                .zip(&prev.values)
                .map(|(&a, &b)| {
                    let e = 2.0 * a - b;
                    if e >= floor {
                        e
                    } else {
                        a
                    }
                })
                .collect()
        }
        None => rho_k.values.clone(),
    };
    let m = match m_prev {
        Some(m) => {
            if m.grid != grid {
                return Err(Error::InvalidGrid("warm start fields on different grids".into()));
            }
            m.interior()
        }
        None => vec![0.0; grid.n_interior_faces()],
    };
    Ok(StateVector::from_parts(&rho, &m))
}

pub fn sqp_step(p: &JkoStepProblem, params: &SqpParams, warm: &StateVector) -> Result<StepResult> {
    sqp_step_with(p, params, warm, &mut QpWorkspace::default())
}

/// [`sqp_step`] reusing the KKT analysis held by `ws`.
pub fn sqp_step_with(
    p: &JkoStepProblem,
    params: &SqpParams,
    warm: &StateVector,
    ws: &mut QpWorkspace,
) -> Result<StepResult> {
    params.validate()?;
    let mut u = warm.clone();
    let mut f = p.value(&u);
    if !f.is_finite() {
        return Err(Error::StepFailed("warm start is not strictly positive".into()));
    }
    let cons = p.constraints();
    let opts = QpOptions {
        tol: params.qp_tol,
        max_iter: params.qp_max_iter,
        shift: DEFAULT_SHIFT,
        ordering: Some(p.grid.kkt_ordering()),
    };
    let mut trace = Vec::new();
    let mut iterates = Vec::new();
    let mut qp_total = 0;
    let mut converged = false;
    let mut h = p.hessian(&u)?;

    for l in 0..params.max_inner {
        if l > 0 && l % params.hessian_lag == 0 {
            h = p.hessian(&u)?;
        }
        let g = p.gradient(&u)?;
        let qp = QpProblem {
            h: h.clone(),
            g,
            a: cons.a.clone(),
            b: cons.b.clone(),
            nonneg: cons.nonneg.clone(),
            center: u.values.clone(),
        };
        let res = solve_subproblem(&qp, &opts, ws)?;
        qp_total += res.iterations;
        let d: Vec<f64> = res.z.iter().zip(&u.values).map(|(z, x)| z - x).collect();

        let mut full_step = None;
        if l == 0 {
            let trial = shifted(&u, &d, 1.0);
            let f_trial = p.value(&trial);
            // (rho_prev, 0) is feasible, so its objective bounds the minimum.
            // A worse landing point means the warm start misled the model.
            let fallback = StateVector::from_parts(&p.rho_prev.values, &vec![0.0; p.grid.n_interior_faces()]);
            let f_fallback = p.value(&fallback);
            if f_trial <= f_fallback {
                full_step = Some((1.0, f_trial));
            } else if fallback.values != u.values {
                u = fallback;
                f = f_fallback;
                h = p.hessian(&u)?;
                trace.push(InnerRecord {
                    objective: f,
                    step: 0.0,
                    qp_iterations: res.iterations,
                });
                continue;
            }
        }
        let (t, f_new) = match full_step {
            Some(found) => found,
            None => {
                let slope = dot(&qp.g, &d);
                if slope >= -f64::EPSILON * f.abs() {
                    // The model sees no descent direction left.
                    converged = true;
                    trace.push(InnerRecord {
                        objective: f,
                        step: 0.0,
                        qp_iterations: res.iterations,
                    });
                    break;
                }
                match line_search(p, params.line_search, &u, &d, f, slope) {
                    Some(found) => found,
                    None => {
                        if f.abs() > 0.0 && slope.abs() < 1e3 * f64::EPSILON * f.abs() {
                            converged = true;
                            break;
                        }
                        return Err(Error::StepFailed(format!(
                            "line search failed at inner iteration {l} (slope {slope:e})"
                        )));
                    }
                }
            }
        };
        if !f_new.is_finite() {
            return Err(Error::StepFailed(format!("non-finite objective at inner iteration {l}")));
        }
        u = shifted(&u, &d, t);
        let change = (f_new - f).abs() / f.abs().max(f64::MIN_POSITIVE);
        f = f_new;
        trace.push(InnerRecord {
            objective: f,
            step: t,
            qp_iterations: res.iterations,
        });
        if params.record_iterates {
            iterates.push(u.values.clone());
        }
        if l >= 1 && change < params.tol_rel {
            converged = true;
            break;
        }
    }

    let (rho_next, m_next) = u.unpack(p.grid)?;
    Ok(StepResult {
        rho_next,
        m_next,
        inner_iterations: trace.len(),
        qp_iterations: qp_total,
        final_objective: f,
        converged,
        trace,
        iterates,
        state: u,
    })
}

/// Solve the model, retrying once with a larger diagonal shift.
fn solve_subproblem(qp: &QpProblem, opts: &QpOptions, ws: &mut QpWorkspace) -> Result<QpResult> {
    let first = ws.solve(qp, opts);
    match first {
        Ok(r) if r.converged => return Ok(r),
        Ok(_) | Err(Error::SingularKkt { .. }) => {}
        Err(e) => return Err(e),
    }
    let retry = QpOptions {
        shift: opts.shift * 1e4,
        ..opts.clone()
    };
    let r = ws.solve(qp, &retry)?;
    if r.converged {
        Ok(r)
    } else {
        Err(Error::StepFailed(format!(
            "QP did not converge in {} iterations (residual {:e})",
            r.iterations,
            r.kkt_residuals.max()
        )))
    }
}

fn shifted(u: &StateVector, d: &[f64], t: f64) -> StateVector {
    let mut v = u.clone();
    for (x, di) in v.values.iter_mut().zip(d) {
        *x += t * di;
    }
    v
}

/// Returns the accepted step and objective value.
fn line_search(p: &JkoStepProblem, ls: LineSearch, u: &StateVector, d: &[f64], f: f64, slope: f64) -> Option<(f64, f64)> {
    match ls {
        LineSearch::FullStep => {
            let v = p.value(&shifted(u, d, 1.0));
            v.is_finite().then_some((1.0, v))
        }
        LineSearch::Backtracking {
            shrink,
            armijo_c,
            max_halvings,
        } => {
            let mut t = 1.0;
            for _ in 0..=max_halvings {
                let v = p.value(&shifted(u, d, t));
                if v <= f + armijo_c * t * slope {
                    return Some((t, v));
                }
                t *= shrink;
            }
            None
        }
    }
}
