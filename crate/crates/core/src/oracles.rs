//! Closed-form profiles, a reference heat solver and l¹ error metrics.

use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::grid::DensityField;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BarenblattParams {
    pub m_exp: f64,
    pub c: f64,
    pub t0: f64,
}

impl Default for BarenblattParams {
    fn default() -> Self {
        Self {
            m_exp: 2.0,
            c: 0.8,
            t0: 1e-3,
        }
    }
}

/// Self-similar solution of `rho_t = (rho^m)_xx` in 1D:
///
/// ```text
///     s^(-1/(m+1)) ( C - (m-1)/(2m(m+1)) x^2 s^(-2/(m+1)) )_+^(1/(m-1)),   s = t + t0
/// ```
pub fn barenblatt(x: f64, t: f64, p: &BarenblattParams) -> f64 {
    let m = p.m_exp;
    let s = t + p.t0;
    let k = (m - 1.0) / (2.0 * m * (m + 1.0));
    let inner = p.c - k * x * x * s.powf(-2.0 / (m + 1.0));
    if inner <= 0.0 {
        return 0.0;
    }
    s.powf(-1.0 / (m + 1.0)) * inner.powf(1.0 / (m - 1.0))
}

/// Equilibrium `(C - (m-1)/m V)_+^(1/(m-1))` of the nonlinear Fokker–Planck
/// equation with `V = x^2/2`, with `C` fixed by the mass.
pub fn nfp_steady(x: f64, m_exp: f64, mass: f64) -> f64 {
    let c = nfp_constant(m_exp, mass);
    nfp_profile(x, m_exp, c)
}

fn nfp_profile(x: f64, m: f64, c: f64) -> f64 {
    let inner = c - (m - 1.0) / m * 0.5 * x * x;
    if inner <= 0.0 {
        0.0
    } else {
        inner.powf(1.0 / (m - 1.0))
    }
}

/// `C` such that the equilibrium carries `mass`; `(3M/8)^(2/3)` for `m = 2`.
pub fn nfp_constant(m_exp: f64, mass: f64) -> f64 {
    if m_exp == 2.0 {
        return (3.0 * mass / 8.0).powf(2.0 / 3.0);
    }
    // Mass is increasing in C; bisect on the integral over the support.
    let mass_of = |c: f64| {
        let r = (2.0 * c * m_exp / (m_exp - 1.0)).sqrt();
        crate::quadrature::integrate(|x| nfp_profile(x, m_exp, c), -r, r, 16, 64)
    };
    let (mut lo, mut hi) = (0.0, 1.0);
    while mass_of(hi) < mass {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mass_of(mid) < mass {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Equilibrium `(1/pi) sqrt((2 - x^2)_+)` of the aggregation equation with
/// `W = x^2/2 - ln|x|`.
pub fn agg1d_steady(x: f64) -> f64 {
    (2.0 - x * x).max(0.0).sqrt() / PI
}

/// Equilibrium of the DLSS flow with `V = x^2/2`: the standard Gaussian.
pub fn dlss_steady(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

/// `sum |rho - reference| vol`.
pub fn l1_err(rho: &DensityField, reference: &DensityField) -> Result<f64> {
    check_same(rho, reference)?;
    Ok(rho
        .values
        .iter()
        .zip(&reference.values)
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
        * rho.grid.cell_volume())
}

/// Richardson error between runs at `tau` and `tau / 2`.
pub fn richardson_err(rho_tau: &DensityField, rho_tau_half: &DensityField) -> Result<f64> {
    l1_err(rho_tau, rho_tau_half)
}

/// `max |rho - reference|`.
pub fn linf_err(rho: &DensityField, reference: &DensityField) -> Result<f64> {
    check_same(rho, reference)?;
    Ok(rho
        .values
        .iter()
        .zip(&reference.values)
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs())))
}

fn check_same(a: &DensityField, b: &DensityField) -> Result<()> {
    if a.grid != b.grid {
        return Err(Error::InvalidGrid("fields live on different grids".into()));
    }
    Ok(())
}

/// Backward Euler for `rho_t = rho_xx` with the three-point Laplacian and
/// no-flux boundaries, `round(t_max / tau)` steps.
pub fn reference_heat_solver(rho0: &DensityField, tau: f64, t_max: f64) -> Result<DensityField> {
    let grid = rho0.grid;
    if grid.dim() != 1 {
        return Err(Error::InvalidGrid("reference heat solver is 1D only".into()));
    }
    if !(tau > 0.0) {
        return Err(Error::InvalidParameter(format!("tau {tau} must be positive")));
    }
    let n = grid.nx();
    let r = tau / (grid.dx() * grid.dx());
    let steps = (t_max / tau).round() as usize;
    let mut rho = rho0.values.clone();
    if n == 1 {
        return Ok(rho0.clone());
    }
    let mut lower = vec![-r; n];
    let mut upper = vec![-r; n];
    let mut diag = vec![1.0 + 2.0 * r; n];
    lower[0] = 0.0;
    upper[n - 1] = 0.0;
    diag[0] = 1.0 + r;
    diag[n - 1] = 1.0 + r;
    for _ in 0..steps {
        rho = thomas(&lower, &diag, &upper, &rho);
    }
    DensityField::new(grid, rho)
}

/// Tridiagonal solve; `lower[0]` and `upper[n-1]` are ignored.
fn thomas(lower: &[f64], diag: &[f64], upper: &[f64], rhs: &[f64]) -> Vec<f64> {
    let n = diag.len();
    let mut c = vec![0.0; n];
    let mut d = vec![0.0; n];
    c[0] = upper[0] / diag[0];
    d[0] = rhs[0] / diag[0];
    for i in 1..n {
        let den = diag[i] - lower[i] * c[i - 1];
        c[i] = upper[i] / den;
        d[i] = (rhs[i] - lower[i] * d[i - 1]) / den;
    }
    let mut x = vec![0.0; n];
    x[n - 1] = d[n - 1];
    for i in (0..n - 1).rev() {
        x[i] = d[i] - c[i] * x[i + 1];
    }
    x
}
