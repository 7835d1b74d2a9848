//! Primal-dual interior-point method for
//!
//! ```text
//!     min_z 1/2 (z - u)ᵀ H (z - u) + gᵀ (z - u)   s.t.  A z = b,  z_I >= 0
//! ```
//!
//! Mehrotra predictor-corrector with a single primal-dual step length. The
//! bound multipliers `w` live on `I` only. Every Newton system is the
//! quasi-definite KKT matrix `[H + Z⁻¹W, Aᵀ; A, -δ]`, factored once per
//! iteration and solved for both the predictor and the corrector.

use crate::error::{Error, Result};
use crate::linalg::{norm_inf, KktSolver, SparseMatrix, DEFAULT_SHIFT};

const STEP_TO_BOUNDARY: f64 = 0.995;
const FEASIBILITY_TOL: f64 = 1e-6;
const CORRECTOR_HALVINGS: usize = 4;
const MU_HALVINGS: usize = 20;

#[derive(Debug, Clone, PartialEq)]
pub struct QpProblem {
    pub h: SparseMatrix,
    pub g: Vec<f64>,
    pub a: SparseMatrix,
    pub b: Vec<f64>,
    /// Indices constrained to be nonnegative.
    pub nonneg: Vec<usize>,
    /// Expansion point `u`.
    pub center: Vec<f64>,
}

impl QpProblem {
    fn validate(&self) -> Result<()> {
        let n = self.h.rows();
        let dims = [
            (self.h.cols(), n),
            (self.g.len(), n),
            (self.center.len(), n),
            (self.b.len(), self.a.rows()),
        ];
        for (got, expected) in dims {
            if got != expected {
                return Err(Error::DimensionMismatch { expected, got });
            }
        }
        if self.a.rows() > 0 && self.a.cols() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: self.a.cols(),
            });
        }
        if let Some(&i) = self.nonneg.iter().find(|&&i| i >= n) {
            return Err(Error::InvalidParameter(format!("bound index {i} out of range")));
        }
        Ok(())
    }

    /// Model value `1/2 (z-u)ᵀH(z-u) + gᵀ(z-u)`.
    pub fn model_value(&self, z: &[f64]) -> f64 {
        let d: Vec<f64> = z.iter().zip(&self.center).map(|(a, b)| a - b).collect();
        let hd = self.h.matvec(&d).expect("dimensions validated");
        d.iter().zip(&hd).map(|(a, b)| 0.5 * a * b).sum::<f64>() + d.iter().zip(&self.g).map(|(a, b)| a * b).sum::<f64>()
    }
}

/// Scaled KKT residuals: stationarity and primal feasibility relative to
/// `1 + ‖g‖∞` and `1 + ‖b‖∞`, complementarity as the mean `z_i w_i`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct KktResiduals {
    pub stationarity: f64,
    pub primal: f64,
    pub complementarity: f64,
}

impl KktResiduals {
    pub fn max(&self) -> f64 {
        self.stationarity.max(self.primal).max(self.complementarity)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpResult {
    pub z: Vec<f64>,
    pub dual_eq: Vec<f64>,
    /// Multipliers of the bounds, in `nonneg` order.
    pub dual_bound: Vec<f64>,
    pub iterations: usize,
    pub kkt_residuals: KktResiduals,
    pub converged: bool,
    /// Barrier parameter after each accepted iteration.
    pub mu_trace: Vec<f64>,
    /// Largest diagonal shift the factorizations needed.
    pub shift: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub shift: f64,
    /// Elimination order for the KKT matrix (see [`KktSolver::new`]).
    pub ordering: Option<Vec<usize>>,
}

impl Default for QpOptions {
    fn default() -> Self {
        Self {
            tol: 1e-9,
            max_iter: 100,
            shift: DEFAULT_SHIFT,
            ordering: None,
        }
    }
}

/// Solve with default options apart from `tol` and `max_iter`.
pub fn solve_qp(q: &QpProblem, tol: f64, max_iter: usize) -> Result<QpResult> {
    QpWorkspace::default().solve(
        q,
        &QpOptions {
            tol,
            max_iter,
            ..QpOptions::default()
        },
    )
}

/// Keeps the symbolic KKT analysis between solves with the same pattern.
#[derive(Debug, Clone, Default)]
pub struct QpWorkspace {
    kkt: Option<KktSolver>,
}

struct Iterate {
    z: Vec<f64>,
    y: Vec<f64>,
    w: Vec<f64>,
}

impl QpWorkspace {
    fn solver(&mut self, q: &QpProblem, opts: &QpOptions) -> Result<&mut KktSolver> {
        let stale = match &self.kkt {
            Some(s) => !s.matches(&q.h, &q.a),
            None => true,
        };
        if stale {
            self.kkt = Some(KktSolver::new(&q.h, &q.a, opts.ordering.clone())?);
        }
        Ok(self.kkt.as_mut().expect("just built"))
    }

    pub fn solve(&mut self, q: &QpProblem, opts: &QpOptions) -> Result<QpResult> {
        q.validate()?;
        let n = q.h.rows();
        let m = q.a.rows();
        let bounds = &q.nonneg;
        let p = bounds.len();

        // c = g - H u, so the model is 1/2 zᵀHz + cᵀz + const.
        let hu = q.h.matvec(&q.center)?;
        let c: Vec<f64> = q.g.iter().zip(&hu).map(|(g, h)| g - h).collect();
        let b_scale = 1.0 + norm_inf(&q.b);
        let g_scale = 1.0 + norm_inf(&q.g);

        let h_zero = q.h.scaled(0.0);
        let solver = self.solver(q, opts)?;

        // Least-squares projection of the center onto {Az = b}.
        let mut max_shift = solver.factor(&h_zero, &q.a, Some(&vec![1.0; n]), 0.0, opts.shift)?;
        let mut rhs = [q.center.as_slice(), q.b.as_slice()].concat();
        solver.solve_in_place(&mut rhs);
        let mut z = rhs[..n].to_vec();
        let proj_res = residual_primal(&q.a, &z, &q.b);
        if !(norm_inf(&proj_res) <= FEASIBILITY_TOL * b_scale) {
            return Err(Error::InfeasibleEqualities(norm_inf(&proj_res)));
        }
        for &i in bounds {
            let floor = if q.center[i] > 0.0 { q.center[i].min(1.0) } else { 1.0 };
            z[i] = z[i].max(floor);
        }
        let mut it = Iterate {
            z,
            y: vec![0.0; m],
            w: vec![1.0; p],
        };

        let mut mu_trace = Vec::new();
        let mut best: Option<(f64, Iterate, KktResiduals)> = None;
        let mut prev_mu = f64::INFINITY;
        let mut primal_diag = vec![0.0; n];

        for iter in 0..=opts.max_iter {
            let rd = residual_dual(q, &c, &it)?;
            let rp = residual_primal(&q.a, &it.z, &q.b);
            let mu = complementarity(&it, bounds);
            let res = KktResiduals {
                stationarity: norm_inf(&rd) / g_scale,
                primal: norm_inf(&rp) / b_scale,
                complementarity: mu,
            };
            if !res.max().is_finite() {
                break;
            }
            if res.stationarity <= opts.tol && res.primal <= opts.tol && mu <= opts.tol {
                return Ok(QpResult {
                    z: it.z,
                    dual_eq: it.y,
                    dual_bound: it.w,
                    iterations: iter,
                    kkt_residuals: res,
                    converged: true,
                    mu_trace,
                    shift: max_shift,
                });
            }
            let merit = res.max();
            if best.as_ref().is_none_or(|(bm, _, _)| merit < *bm) {
                best = Some((
                    merit,
                    Iterate {
                        z: it.z.clone(),
                        y: it.y.clone(),
                        w: it.w.clone(),
                    },
                    res,
                ));
            }
            if iter == opts.max_iter {
                break;
            }

            for (k, &i) in bounds.iter().enumerate() {
                primal_diag[i] = it.w[k] / it.z[i];
            }
            let solver = self.kkt.as_mut().expect("built above");
            let s = solver.factor(&q.h, &q.a, Some(&primal_diag), 0.0, opts.shift)?;
            max_shift = max_shift.max(s);

            // Predictor: r_c = z w.
            let rc_aff: Vec<f64> = bounds.iter().enumerate().map(|(k, &i)| it.z[i] * it.w[k]).collect();
            let (dz_a, _, dw_a) = newton_direction(solver, &rd, &rp, &rc_aff, &it, bounds, n);
            let (ap, ad) = max_steps(&it, &dz_a, &dw_a, bounds);
            let sigma = if p > 0 {
                let mu_aff = bounds
                    .iter()
                    .enumerate()
                    .map(|(k, &i)| (it.z[i] + ap * dz_a[i]) * (it.w[k] + ad * dw_a[k]))
                    .sum::<f64>()
                    / p as f64;
                (mu_aff / mu).clamp(0.0, 1.0).powi(3)
            } else {
                0.0
            };

            // Corrector: r_c = z w + dz_aff dw_aff - sigma mu.
            let rc: Vec<f64> = bounds
                .iter()
                .enumerate()
                .map(|(k, &i)| it.z[i] * it.w[k] + dz_a[i] * dw_a[k] - sigma * mu)
                .collect();
            let target = prev_mu.min(mu);
            let (dz, dy, dw) = newton_direction(solver, &rd, &rp, &rc, &it, bounds, n);
            let mut accepted = monotone_step(&it, &dz, &dy, &dw, bounds, target, CORRECTOR_HALVINGS);
            if accepted.is_none() {
                // The second-order term can make mu increase along the whole
                // corrector ray; a plain centered direction always lowers it.
                let sigma = sigma.min(0.5);
                let rc: Vec<f64> = bounds
                    .iter()
                    .enumerate()
                    .map(|(k, &i)| it.z[i] * it.w[k] - sigma * mu)
                    .collect();
                let (dz, dy, dw) = newton_direction(solver, &rd, &rp, &rc, &it, bounds, n);
                accepted = monotone_step(&it, &dz, &dy, &dw, bounds, target, MU_HALVINGS);
            }
            let Some((next, next_mu)) = accepted else {
                break;
            };
            it = next;
            prev_mu = next_mu;
            mu_trace.push(next_mu);
        }

        let (_, it, res) = best.ok_or_else(|| Error::StepFailed("QP iterates are not finite".into()))?;
        Ok(QpResult {
            z: it.z,
            dual_eq: it.y,
            dual_bound: it.w,
            iterations: opts.max_iter,
            kkt_residuals: res,
            converged: false,
            mu_trace,
            shift: max_shift,
        })
    }
}

/// Step along `(dz, dy, dw)` from the fraction-to-boundary length, halving
/// until `mu` does not exceed `target`.
fn monotone_step(
    it: &Iterate,
    dz: &[f64],
    dy: &[f64],
    dw: &[f64],
    bounds: &[usize],
    target: f64,
    halvings: usize,
) -> Option<(Iterate, f64)> {
    let (ap, ad) = max_steps(it, dz, dw, bounds);
    let mut alpha = (STEP_TO_BOUNDARY * ap.min(ad)).min(1.0);
    for _ in 0..=halvings {
        let next = step(it, dz, dy, dw, alpha);
        let mu = complementarity(&next, bounds);
        if bounds.is_empty() || mu <= target {
            return Some((next, mu));
        }
        alpha *= 0.5;
    }
    None
}

fn residual_primal(a: &SparseMatrix, z: &[f64], b: &[f64]) -> Vec<f64> {
    if a.rows() == 0 {
        return Vec::new();
    }
    let mut r = a.matvec(z).expect("dimensions validated");
    for (ri, bi) in r.iter_mut().zip(b) {
        *ri -= bi;
    }
    r
}

/// `r_d = H z + c - Aᵀ y - E w`.
fn residual_dual(q: &QpProblem, c: &[f64], it: &Iterate) -> Result<Vec<f64>> {
    let mut r = q.h.matvec(&it.z)?;
    if q.a.rows() > 0 {
        let aty = q.a.tr_matvec(&it.y)?;
        for (ri, ai) in r.iter_mut().zip(&aty) {
            *ri -= ai;
        }
    }
    for (ri, ci) in r.iter_mut().zip(c) {
        *ri += ci;
    }
    for (k, &i) in q.nonneg.iter().enumerate() {
        r[i] -= it.w[k];
    }
    Ok(r)
}

fn complementarity(it: &Iterate, bounds: &[usize]) -> f64 {
    if bounds.is_empty() {
        return 0.0;
    }
    bounds.iter().enumerate().map(|(k, &i)| it.z[i] * it.w[k]).sum::<f64>() / bounds.len() as f64
}

/// Solve the reduced Newton system for `(dz, dy, dw)` given residuals.
fn newton_direction(
    solver: &KktSolver,
    rd: &[f64],
    rp: &[f64],
    rc: &[f64],
    it: &Iterate,
    bounds: &[usize],
    n: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut rhs = Vec::with_capacity(n + rp.len());
    rhs.extend(rd.iter().map(|r| -r));
    rhs.extend(rp.iter().map(|r| -r));
    for (k, &i) in bounds.iter().enumerate() {
        rhs[i] -= rc[k] / it.z[i];
    }
    solver.solve_in_place(&mut rhs);
    let dz = rhs[..n].to_vec();
    let dy: Vec<f64> = rhs[n..].iter().map(|v| -v).collect();
    let dw: Vec<f64> = bounds
        .iter()
        .enumerate()
        .map(|(k, &i)| (-rc[k] - it.w[k] * dz[i]) / it.z[i])
        .collect();
    (dz, dy, dw)
}

/// Largest primal and dual steps in `[0, 1]` keeping `z_I, w >= 0`.
fn max_steps(it: &Iterate, dz: &[f64], dw: &[f64], bounds: &[usize]) -> (f64, f64) {
    let mut ap: f64 = 1.0;
    let mut ad: f64 = 1.0;
    for (k, &i) in bounds.iter().enumerate() {
        if dz[i] < 0.0 {
            ap = ap.min(-it.z[i] / dz[i]);
        }
        if dw[k] < 0.0 {
            ad = ad.min(-it.w[k] / dw[k]);
        }
    }
    (ap, ad)
}

fn step(it: &Iterate, dz: &[f64], dy: &[f64], dw: &[f64], alpha: f64) -> Iterate {
    let add = |x: &[f64], d: &[f64]| x.iter().zip(d).map(|(a, b)| a + alpha * b).collect();
    Iterate {
        z: add(&it.z, dz),
        y: add(&it.y, dy),
        w: add(&it.w, dw),
    }
}
