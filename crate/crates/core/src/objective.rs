//! The one-step objective over `u = [rho ; m]` and its constraints.
//!
//! ```text
//!     F(u) = sum_edges [ 2 m^2 / (rho_a + rho_b)
//!                        + c_F / h^2 (log rho_a - log rho_b)^2 (rho_a + rho_b) / 2 ] vol
//!            + 2 tau E(rho)
//!     A u = b  <=>  rho_i + sum_e (m_{i+e/2} - m_{i-e/2}) / h_e = rho_prev_i
//! ```
//!
//! The flux block holds interior faces only, in [`Grid::edges`] order.

use serde::{Deserialize, Serialize};

use crate::energy::{
    clamp_log, energy_gradient, energy_value, entropy_value, fisher_gradient, fisher_hessian_triplets, fisher_value,
    local_energy_hessian_diag, EnergySpec, FisherCoeff, LOG_FLOOR,
};
use crate::error::{Error, Result};
use crate::grid::{DensityField, Edge, FluxField, Grid};
use crate::linalg::SparseMatrix;

/// Packed state `[rho ; m_interior]`.
#[derive(Debug, Clone, PartialEq)]
pub struct StateVector {
    pub values: Vec<f64>,
    n_cells: usize,
}

impl StateVector {
    pub fn pack(rho: &DensityField, m: &FluxField) -> Self {
        let mut values = rho.values.clone();
        values.extend(m.interior());
        Self {
            values,
            n_cells: rho.values.len(),
        }
    }

    pub fn from_parts(rho: &[f64], m: &[f64]) -> Self {
        let mut values = rho.to_vec();
        values.extend_from_slice(m);
        Self {
            values,
            n_cells: rho.len(),
        }
    }

    pub fn from_vec(values: Vec<f64>, grid: &Grid) -> Result<Self> {
        let expected = grid.n_cells() + grid.n_interior_faces();
        if values.len() != expected {
            return Err(Error::DimensionMismatch {
                expected,
                got: values.len(),
            });
        }
        Ok(Self {
            values,
            n_cells: grid.n_cells(),
        })
    }

    pub fn rho(&self) -> &[f64] {
        &self.values[..self.n_cells]
    }

    pub fn m(&self) -> &[f64] {
        &self.values[self.n_cells..]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Position of cell `c` in the packed vector.
    pub fn cell_position(c: usize) -> usize {
        c
    }

    /// Position of interior face `k` (edge order) in the packed vector.
    pub fn face_position(&self, k: usize) -> usize {
        self.n_cells + k
    }

    /// Split back into fields. Negative densities are rejected.
    pub fn unpack(&self, grid: Grid) -> Result<(DensityField, FluxField)> {
        let rho = DensityField::new(grid, self.rho().to_vec())?;
        let m = FluxField::from_interior(grid, self.m())?;
        Ok((rho, m))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum HessianMode {
    Exact,
    /// Interaction energy replaced by entropy and the Fisher coefficient
    /// multiplied by `multiplier`.
    Surrogate { multiplier: u32 },
}

/// Equality constraints `A u = b` and the indices constrained to be `>= 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct ContinuityConstraint {
    pub a: SparseMatrix,
    pub b: Vec<f64>,
    pub nonneg: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct JkoStepProblem {
    pub grid: Grid,
    pub spec: EnergySpec,
    pub tau: f64,
    pub fisher: FisherCoeff,
    pub hessian_mode: HessianMode,
    pub rho_prev: DensityField,
    edges: Vec<Edge>,
}

impl JkoStepProblem {
    pub fn new(
        spec: EnergySpec,
        tau: f64,
        fisher: FisherCoeff,
        hessian_mode: HessianMode,
        rho_prev: DensityField,
    ) -> Result<Self> {
        if !(tau > 0.0) || !tau.is_finite() {
            return Err(Error::InvalidParameter(format!("tau {tau} must be positive")));
        }
        if let HessianMode::Surrogate { multiplier } = hessian_mode {
            if multiplier < 1 {
                return Err(Error::InvalidParameter("surrogate multiplier must be >= 1".into()));
            }
        }
        let grid = spec.grid;
        if rho_prev.grid != grid {
            return Err(Error::InvalidGrid("previous density lives on a different grid".into()));
        }
        Ok(Self {
            grid,
            spec,
            tau,
            fisher,
            hessian_mode,
            rho_prev,
            edges: grid.edges(),
        })
    }

    /// Same problem with a new previous density.
    pub fn with_rho_prev(&self, rho_prev: DensityField) -> Result<Self> {
        if rho_prev.grid != self.grid {
            return Err(Error::InvalidGrid("previous density lives on a different grid".into()));
        }
        Ok(Self {
            rho_prev,
            ..self.clone()
        })
    }

    pub fn n_state(&self) -> usize {
        self.grid.n_cells() + self.edges.len()
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    /// `c_F / (2 tau) I(rho) + E(rho)`, the quantity each step does not increase.
    pub fn modified_energy(&self, rho: &[f64]) -> f64 {
        self.fisher.value() / (2.0 * self.tau) * fisher_value(rho, &self.grid) + energy_value(rho, &self.spec)
    }

    fn check(&self, u: &StateVector) -> Result<()> {
        if u.len() != self.n_state() {
            return Err(Error::DimensionMismatch {
                expected: self.n_state(),
                got: u.len(),
            });
        }
        match u.rho().iter().enumerate().find(|(_, &r)| !(r > 0.0)) {
            Some((cell, &value)) => Err(Error::NonPositiveDensity { cell, value }),
            None => Ok(()),
        }
    }

    fn kinetic_value(&self, u: &StateVector) -> f64 {
        let (rho, m) = (u.rho(), u.m());
        self.edges
            .iter()
            .zip(m)
            .map(|(e, &mk)| 2.0 * mk * mk / (rho[e.lo] + rho[e.hi]))
            .sum::<f64>()
            * self.grid.cell_volume()
    }

    /// Kinetic part of the gradient, written into `g`.
    fn kinetic_gradient(&self, u: &StateVector, g: &mut [f64]) {
        let vol = self.grid.cell_volume();
        let n = self.grid.n_cells();
        let (rho, m) = (u.rho(), u.m());
        for (k, (e, &mk)) in self.edges.iter().zip(m).enumerate() {
            let s = rho[e.lo] + rho[e.hi];
            g[n + k] += 4.0 * mk / s * vol;
            let dr = -2.0 * mk * mk / (s * s) * vol;
            g[e.lo] += dr;
            g[e.hi] += dr;
        }
    }

    fn kinetic_hessian_triplets(&self, u: &StateVector, trip: &mut Vec<(usize, usize, f64)>) {
        let vol = self.grid.cell_volume();
        let n = self.grid.n_cells();
        let (rho, m) = (u.rho(), u.m());
        for (k, (e, &mk)) in self.edges.iter().zip(m).enumerate() {
            let s = rho[e.lo] + rho[e.hi];
            let f = n + k;
            let mm = 4.0 / s * vol;
            let mr = -4.0 * mk / (s * s) * vol;
            let rr = 4.0 * mk * mk / (s * s * s) * vol;
            trip.push((f, f, mm));
            for c in [e.lo, e.hi] {
                trip.push((f, c, mr));
                trip.push((c, f, mr));
            }
            for a in [e.lo, e.hi] {
                for b in [e.lo, e.hi] {
                    trip.push((a, b, rr));
                }
            }
        }
    }

    /// `F(u)`, or `+inf` if any density is not positive.
    pub fn value(&self, u: &StateVector) -> f64 {
        if self.check(u).is_err() {
            return f64::INFINITY;
        }
        let rho = u.rho();
        self.kinetic_value(u)
            + self.fisher.value() * fisher_value(rho, &self.grid)
            + 2.0 * self.tau * energy_value(rho, &self.spec)
    }

    pub fn gradient(&self, u: &StateVector) -> Result<Vec<f64>> {
        self.check(u)?;
        let rho = u.rho();
        let mut g = vec![0.0; self.n_state()];
        self.kinetic_gradient(u, &mut g);
        let cf = self.fisher.value();
        for (gi, (fi, ei)) in g
            .iter_mut()
            .zip(fisher_gradient(rho, &self.grid).into_iter().zip(energy_gradient(rho, &self.spec)))
        {
            *gi += cf * fi + 2.0 * self.tau * ei;
        }
        Ok(g)
    }

    /// Hessian in the problem's own mode.
    pub fn hessian(&self, u: &StateVector) -> Result<SparseMatrix> {
        self.hessian_with_mode(u, self.hessian_mode)
    }

    pub fn hessian_with_mode(&self, u: &StateVector, mode: HessianMode) -> Result<SparseMatrix> {
        self.check(u)?;
        let rho = u.rho();
        let n = self.grid.n_cells();
        let vol = self.grid.cell_volume();
        let mut trip = Vec::new();
        self.kinetic_hessian_triplets(u, &mut trip);
        let two_tau = 2.0 * self.tau;
        let local = local_energy_hessian_diag(rho, &self.spec);
        match mode {
            HessianMode::Exact => {
                fisher_hessian_triplets(rho, &self.grid, self.fisher.value(), &mut trip);
                match &self.spec.interaction {
                    None => trip.extend(local.iter().enumerate().map(|(i, &d)| (i, i, two_tau * d))),
                    Some(w) => {
                        let w2 = two_tau * vol * vol;
                        for i in 0..n {
                            for j in 0..n {
                                let mut v = w.between(i, j) * w2;
                                if i == j {
                                    v += two_tau * local[i];
                                }
                                trip.push((i, j, v));
                            }
                        }
                    }
                }
            }
            HessianMode::Surrogate { multiplier } => {
                fisher_hessian_triplets(rho, &self.grid, multiplier as f64 * self.fisher.value(), &mut trip);
                let with_entropy = self.spec.interaction.is_some();
                for (i, (&r, &d)) in rho.iter().zip(&local).enumerate() {
                    let ent = if with_entropy { vol / r.max(LOG_FLOOR) } else { 0.0 };
                    trip.push((i, i, two_tau * (d + ent)));
                }
            }
        }
        SparseMatrix::from_triplets(self.n_state(), self.n_state(), &trip)
    }

    /// The function whose exact Hessian the surrogate mode returns.
    pub fn surrogate_value(&self, u: &StateVector, multiplier: u32) -> f64 {
        if self.check(u).is_err() {
            return f64::INFINITY;
        }
        let rho = u.rho();
        let local = EnergySpec {
            interaction: None,
            ..self.spec.clone()
        };
        let mut e = energy_value(rho, &local);
        if self.spec.interaction.is_some() {
            e += entropy_value(rho, &self.grid);
        }
        self.kinetic_value(u) + multiplier as f64 * self.fisher.value() * fisher_value(rho, &self.grid) + 2.0 * self.tau * e
    }

    pub fn surrogate_gradient(&self, u: &StateVector, multiplier: u32) -> Result<Vec<f64>> {
        self.check(u)?;
        let rho = u.rho();
        let vol = self.grid.cell_volume();
        let local = EnergySpec {
            interaction: None,
            ..self.spec.clone()
        };
        let mut g = vec![0.0; self.n_state()];
        self.kinetic_gradient(u, &mut g);
        let cf = multiplier as f64 * self.fisher.value();
        let fg = fisher_gradient(rho, &self.grid);
        let eg = energy_gradient(rho, &local);
        for i in 0..rho.len() {
            let mut e = eg[i];
            if self.spec.interaction.is_some() {
                e += (clamp_log(rho[i]) + 1.0) * vol;
            }
            g[i] += cf * fg[i] + 2.0 * self.tau * e;
        }
        Ok(g)
    }

    pub fn constraints(&self) -> ContinuityConstraint {
        let n = self.grid.n_cells();
        let mut trip = Vec::with_capacity(n + 2 * self.edges.len());
        for c in 0..n {
            trip.push((c, c, 1.0));
        }
        for (k, e) in self.edges.iter().enumerate() {
            trip.push((e.lo, n + k, 1.0 / e.spacing));
            trip.push((e.hi, n + k, -1.0 / e.spacing));
        }
        ContinuityConstraint {
            a: SparseMatrix::from_triplets(n, self.n_state(), &trip).expect("indices in range"),
            b: self.rho_prev.values.clone(),
            nonneg: (0..n).collect(),
        }
    }
}

pub fn objective_value(u: &StateVector, p: &JkoStepProblem) -> f64 {
    p.value(u)
}

pub fn objective_gradient(u: &StateVector, p: &JkoStepProblem) -> Result<Vec<f64>> {
    p.gradient(u)
}

pub fn objective_hessian(u: &StateVector, p: &JkoStepProblem, mode: HessianMode) -> Result<SparseMatrix> {
    p.hessian_with_mode(u, mode)
}

pub fn build_constraints(p: &JkoStepProblem) -> ContinuityConstraint {
    p.constraints()
}

/// Worst relative discrepancy between an analytic gradient/Hessian pair and
/// central differences, measured at `u`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DerivativeAudit {
    pub gradient_rel_err: f64,
    pub hessian_rel_err: f64,
}

/// Compare analytic derivatives of `f` with central differences.
///
/// Relative errors are taken against the largest entry of the analytic
/// quantity, so tiny entries do not dominate.
pub fn audit_derivatives(
    f: &dyn Fn(&[f64]) -> f64,
    grad: &dyn Fn(&[f64]) -> Vec<f64>,
    hess: &SparseMatrix,
    u: &[f64],
) -> DerivativeAudit {
    let n = u.len();
    let g = grad(u);
    let mut x = u.to_vec();
    let mut g_err: f64 = 0.0;
    let mut h_err: f64 = 0.0;
    let g_scale = g.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
    let h_dense = hess.to_dense();
    let h_scale = h_dense.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
    for j in 0..n {
        let step = 1e-6 * u[j].abs().max(1e-2);
        x[j] = u[j] + step;
        let fp = f(&x);
        let gp = grad(&x);
        x[j] = u[j] - step;
        let fm = f(&x);
        let gm = grad(&x);
        x[j] = u[j];
        g_err = g_err.max(((fp - fm) / (2.0 * step) - g[j]).abs() / g_scale);
        for i in 0..n {
            let fd = (gp[i] - gm[i]) / (2.0 * step);
            h_err = h_err.max((fd - h_dense[i * n + j]).abs() / h_scale);
        }
    }
    DerivativeAudit {
        gradient_rel_err: g_err,
        hessian_rel_err: h_err,
    }
}
