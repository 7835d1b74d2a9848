//! Discrete free energy, entropy and Fisher information.
//!
//! ```text
//!     E(rho) = sum_j [U(rho_j) + V_j rho_j] vol + 1/2 sum_{j,l} W_{jl} rho_j rho_l vol^2
//!     I(rho) = sum_edges (log rho_a - log rho_b)^2 / h^2 * (rho_a + rho_b)/2 * vol
//! ```
//!
//! Logarithms are evaluated at `max(rho, LOG_FLOOR)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{DensityField, Grid};
use crate::linalg::SparseMatrix;
use crate::quadrature::gauss_legendre;

pub const LOG_FLOOR: f64 = 1e-14;

#[inline]
pub(crate) fn clamp_log(x: f64) -> f64 {
    x.max(LOG_FLOOR).ln()
}

/// One term of a radial function `f(r)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RadialTerm {
    /// `coeff * r^exponent`.
    Power { coeff: f64, exponent: f64 },
    /// `coeff * ln r`.
    Log { coeff: f64 },
    /// `coeff * exp(-r^2 / scale^2)`.
    Gaussian { coeff: f64, scale: f64 },
}

impl RadialTerm {
    pub fn eval(&self, r: f64) -> f64 {
        match *self {
            RadialTerm::Power { coeff, exponent } => {
                if exponent == 0.0 {
                    coeff
                } else {
                    coeff * r.powf(exponent)
                }
            }
            RadialTerm::Log { coeff } => coeff * r.ln(),
            RadialTerm::Gaussian { coeff, scale } => coeff * (-(r * r) / (scale * scale)).exp(),
        }
    }

    /// Mean of the term over the cell `[-a, a]` (1D) or `[-a, a] x [-b, b]`
    /// (2D) centered at the origin.
    pub fn cell_average(&self, dim: usize, a: f64, b: f64) -> Result<f64> {
        match (*self, dim) {
            (RadialTerm::Gaussian { coeff, .. }, _) => Ok(coeff),
            (RadialTerm::Power { coeff, exponent }, 1) => {
                if exponent <= -1.0 {
                    return Err(Error::DivergentKernel(format!("|x|^{exponent} in 1D")));
                }
                Ok(coeff * a.powf(exponent) / (exponent + 1.0))
            }
            (RadialTerm::Log { coeff }, 1) => Ok(coeff * (a.ln() - 1.0)),
            (RadialTerm::Power { coeff, exponent }, _) => {
                if exponent <= -2.0 {
                    return Err(Error::DivergentKernel(format!("|x|^{exponent} in 2D")));
                }
                let half = exponent / 2.0;
                if half >= 0.0 && half.fract() == 0.0 {
                    Ok(coeff * even_power_rect_mean(half as u32, a, b))
                } else {
                    let p2 = exponent + 2.0;
                    Ok(coeff * polar_rect_mean(a, b, |rmax| rmax.powf(p2) / p2))
                }
            }
            (RadialTerm::Log { coeff }, _) => Ok(coeff * log_rect_mean(a, b)),
        }
    }
}

/// Mean of `(x^2 + y^2)^k` over `[-a, a] x [-b, b]`.
fn even_power_rect_mean(k: u32, a: f64, b: f64) -> f64 {
    let mut s = 0.0;
    let mut binom = 1.0;
    for i in 0..=k {
        let j = k - i;
        let mx = a.powi(2 * i as i32) / (2 * i + 1) as f64;
        let my = b.powi(2 * j as i32) / (2 * j + 1) as f64;
        s += binom * mx * my;
        binom = binom * (k - i) as f64 / (i + 1) as f64;
    }
    s
}

/// Closed form of the mean of `ln |x|` over `[-a, a] x [-b, b]`, from the
/// antiderivative `xy ln(x^2+y^2) - 3xy + x^2 atan(y/x) + y^2 atan(x/y)` of
/// `ln(x^2 + y^2)`.
pub fn log_rect_mean(a: f64, b: f64) -> f64 {
    let f = a * b * (a * a + b * b).ln() - 3.0 * a * b + a * a * (b / a).atan() + b * b * (a / b).atan();
    0.5 * f / (a * b)
}

/// Mean over the rectangle of a radial integrand, given `g(R) = ∫_0^R f(r) r dr`,
/// by splitting the quarter rectangle into two triangles in polar form.
pub(crate) fn polar_rect_mean(a: f64, b: f64, g: impl Fn(f64) -> f64) -> f64 {
    let theta1 = (b / a).atan();
    let (x, w) = gauss_legendre(48);
    let mut s = 0.0;
    for (xi, wi) in x.iter().zip(&w) {
        let t = 0.5 * theta1 * (xi + 1.0);
        s += 0.5 * theta1 * wi * g(a / t.cos());
        let span = std::f64::consts::FRAC_PI_2 - theta1;
        let t2 = theta1 + 0.5 * span * (xi + 1.0);
        s += 0.5 * span * wi * g(b / t2.sin());
    }
    s / (a * b)
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RadialFunction {
    pub terms: Vec<RadialTerm>,
}

impl RadialFunction {
    pub fn new(terms: Vec<RadialTerm>) -> Self {
        Self { terms }
    }

    pub fn eval(&self, r: f64) -> f64 {
        self.terms.iter().map(|t| t.eval(r)).sum()
    }

    pub fn cell_average(&self, dim: usize, a: f64, b: f64) -> Result<f64> {
        self.terms.iter().map(|t| t.cell_average(dim, a, b)).sum()
    }
}

/// A radial potential `V(x) = f(|x - center|)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Potential {
    pub profile: RadialFunction,
    pub center: [f64; 2],
}

impl Potential {
    pub fn eval(&self, p: [f64; 2]) -> f64 {
        let r = ((p[0] - self.center[0]).powi(2) + (p[1] - self.center[1]).powi(2)).sqrt();
        self.profile.eval(r)
    }
}

/// How the self-interaction entry `W(0)` is filled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelfInteraction {
    /// Mean of the kernel over one cell centered at the origin.
    #[default]
    CellAverage,
    /// The kernel's value at 0; only valid for kernels finite there.
    PointValue,
}

/// Interaction kernel sampled on nonnegative cell offsets.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelTable {
    nx: usize,
    ny: usize,
    table: Vec<f64>,
}

impl KernelTable {
    pub fn new(kernel: &RadialFunction, grid: &Grid) -> Result<Self> {
        Self::with_rule(kernel, grid, SelfInteraction::CellAverage)
    }

    pub fn with_rule(kernel: &RadialFunction, grid: &Grid, rule: SelfInteraction) -> Result<Self> {
        let (nx, ny) = (grid.nx(), grid.ny());
        let (dx, dy) = (grid.dx(), if grid.dim() == 2 { grid.dy() } else { 0.0 });
        let mut table = vec![0.0; nx * ny];
        for dj in 0..ny {
            for di in 0..nx {
                let r = ((di as f64 * dx).powi(2) + (dj as f64 * dy).powi(2)).sqrt();
                table[di + nx * dj] = if di == 0 && dj == 0 && rule == SelfInteraction::CellAverage {
                    kernel.cell_average(grid.dim(), 0.5 * grid.dx(), 0.5 * grid.dy())?
                } else {
                    kernel.eval(r)
                };
            }
        }
        if let Some(v) = table.iter().find(|v| !v.is_finite()) {
            return Err(Error::DivergentKernel(format!("non-finite kernel value {v}")));
        }
        Ok(Self { nx, ny, table })
    }

    /// Kernel value at the cell offset `(di, dj)`.
    pub fn get(&self, di: isize, dj: isize) -> f64 {
        self.table[di.unsigned_abs() + self.nx * dj.unsigned_abs()]
    }

    /// `(W * rho)_c = sum_l W(x_c - x_l) rho_l` (no volume factor).
    pub fn convolve(&self, rho: &[f64]) -> Vec<f64> {
        let (nx, ny) = (self.nx, self.ny);
        let mut out = vec![0.0; nx * ny];
        for j in 0..ny {
            for i in 0..nx {
                let mut s = 0.0;
                for l in 0..ny {
                    let row = &self.table[nx * j.abs_diff(l)..nx * (j.abs_diff(l) + 1)];
                    let rl = &rho[nx * l..nx * (l + 1)];
                    for k in 0..nx {
                        s += row[i.abs_diff(k)] * rl[k];
                    }
                }
                out[i + nx * j] = s;
            }
        }
        out
    }

    /// Kernel value between two cells.
    pub fn between(&self, c: usize, d: usize) -> f64 {
        let (ci, cj) = (c % self.nx, c / self.nx);
        let (di, dj) = (d % self.nx, d / self.nx);
        self.table[ci.abs_diff(di) + self.nx * cj.abs_diff(dj)]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InternalEnergy {
    None,
    /// `rho log rho`.
    Entropy,
    /// `coeff * rho^exponent`.
    Power { exponent: f64, coeff: f64 },
}

impl InternalEnergy {
    /// Porous-medium internal energy `rho^m / (m - 1)`.
    pub fn porous_medium(m: f64) -> Self {
        InternalEnergy::Power {
            exponent: m,
            coeff: 1.0 / (m - 1.0),
        }
    }

    pub fn value(&self, r: f64) -> f64 {
        match *self {
            InternalEnergy::None => 0.0,
            InternalEnergy::Entropy => r * clamp_log(r),
            InternalEnergy::Power { exponent, coeff } => coeff * r.max(0.0).powf(exponent),
        }
    }

    pub fn first(&self, r: f64) -> f64 {
        match *self {
            InternalEnergy::None => 0.0,
            InternalEnergy::Entropy => clamp_log(r) + 1.0,
            InternalEnergy::Power { exponent, coeff } => coeff * exponent * r.max(0.0).powf(exponent - 1.0),
        }
    }

    pub fn second(&self, r: f64) -> f64 {
        match *self {
            InternalEnergy::None => 0.0,
            InternalEnergy::Entropy => 1.0 / r.max(LOG_FLOOR),
            InternalEnergy::Power { exponent, coeff } => {
                coeff * exponent * (exponent - 1.0) * r.max(LOG_FLOOR).powf(exponent - 2.0)
            }
        }
    }
}

/// Energy `E` sampled on a particular grid.
#[derive(Debug, Clone, PartialEq)]
pub struct EnergySpec {
    pub grid: Grid,
    pub internal: InternalEnergy,
    /// `V` at the cell centers.
    pub potential: Option<Vec<f64>>,
    pub interaction: Option<KernelTable>,
}

impl EnergySpec {
    pub fn new(
        grid: Grid,
        internal: InternalEnergy,
        potential: Option<&Potential>,
        kernel: Option<&RadialFunction>,
    ) -> Result<Self> {
        if let InternalEnergy::Power { exponent, coeff } = internal {
            if !(exponent > 1.0) || !(coeff >= 0.0) {
                return Err(Error::InvalidParameter(format!(
                    "power internal energy needs exponent > 1 and coeff >= 0, got {exponent}, {coeff}"
                )));
            }
        }
        let potential = match potential {
            Some(p) => {
                let v: Vec<f64> = grid.cell_centers().into_iter().map(|c| p.eval(c)).collect();
                if v.iter().any(|x| !x.is_finite()) {
                    return Err(Error::InvalidParameter("potential is singular at a cell center".into()));
                }
                Some(v)
            }
            None => None,
        };
        let interaction = kernel.map(|k| KernelTable::new(k, &grid)).transpose()?;
        Ok(Self {
            grid,
            internal,
            potential,
            interaction,
        })
    }

    /// Energy with no terms.
    pub fn zero(grid: Grid) -> Self {
        Self {
            grid,
            internal: InternalEnergy::None,
            potential: None,
            interaction: None,
        }
    }

    pub fn is_local(&self) -> bool {
        self.interaction.is_none()
    }
}

pub fn energy_value(rho: &[f64], spec: &EnergySpec) -> f64 {
    let vol = spec.grid.cell_volume();
    let mut local = 0.0;
    for (j, &r) in rho.iter().enumerate() {
        local += spec.internal.value(r);
        if let Some(v) = &spec.potential {
            local += v[j] * r;
        }
    }
    let mut e = local * vol;
    if let Some(w) = &spec.interaction {
        let conv = w.convolve(rho);
        e += 0.5 * rho.iter().zip(&conv).map(|(a, b)| a * b).sum::<f64>() * vol * vol;
    }
    e
}

/// `∂E/∂rho_j`.
pub fn energy_gradient(rho: &[f64], spec: &EnergySpec) -> Vec<f64> {
    let vol = spec.grid.cell_volume();
    let mut g: Vec<f64> = rho
        .iter()
        .enumerate()
        .map(|(j, &r)| {
            let v = spec.potential.as_ref().map_or(0.0, |v| v[j]);
            (spec.internal.first(r) + v) * vol
        })
        .collect();
    if let Some(w) = &spec.interaction {
        let conv = w.convolve(rho);
        for (gj, cj) in g.iter_mut().zip(conv) {
            *gj += cj * vol * vol;
        }
    }
    g
}

/// Diagonal of the local part of the energy Hessian.
pub fn local_energy_hessian_diag(rho: &[f64], spec: &EnergySpec) -> Vec<f64> {
    let vol = spec.grid.cell_volume();
    rho.iter().map(|&r| spec.internal.second(r) * vol).collect()
}

/// Full energy Hessian; dense when an interaction kernel is present.
pub fn energy_hessian(rho: &[f64], spec: &EnergySpec) -> SparseMatrix {
    let n = rho.len();
    let vol = spec.grid.cell_volume();
    let diag = local_energy_hessian_diag(rho, spec);
    let mut trip = Vec::new();
    match &spec.interaction {
        None => trip.extend(diag.iter().enumerate().map(|(i, &d)| (i, i, d))),
        Some(w) => {
            for i in 0..n {
                for j in 0..n {
                    let mut v = w.between(i, j) * vol * vol;
                    if i == j {
                        v += diag[i];
                    }
                    trip.push((i, j, v));
                }
            }
        }
    }
    SparseMatrix::from_triplets(n, n, &trip).expect("indices in range")
}

/// Entropy `H(rho) = sum rho log rho vol`.
pub fn entropy_value(rho: &[f64], grid: &Grid) -> f64 {
    rho.iter().map(|&r| r * clamp_log(r)).sum::<f64>() * grid.cell_volume()
}

/// Multiplier of the Fisher information inside the step objective.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct FisherCoeff(f64);

impl FisherCoeff {
    pub fn new(value: f64) -> Result<Self> {
        if !(value >= 0.0) || !value.is_finite() {
            return Err(Error::InvalidParameter(format!("Fisher coefficient {value} must be >= 0")));
        }
        Ok(Self(value))
    }

    /// `beta^-2 tau^2`.
    pub fn from_beta(beta: f64, tau: f64) -> Result<Self> {
        if !(beta > 0.0) {
            return Err(Error::InvalidParameter(format!("beta {beta} must be positive")));
        }
        Self::new(tau * tau / (beta * beta))
    }

    /// DLSS mode: the Fisher term carries `tau`.
    pub fn dlss(tau: f64) -> Result<Self> {
        Self::new(tau)
    }

    pub fn value(&self) -> f64 {
        self.0
    }
}

/// `t_ij = (rho_i - rho_j)(log rho_i - log rho_j) + (rho_i + rho_j)`.
#[inline]
pub fn fisher_t(ri: f64, rj: f64) -> f64 {
    (ri - rj) * (clamp_log(ri) - clamp_log(rj)) + (ri + rj)
}

pub fn fisher_value(rho: &[f64], grid: &Grid) -> f64 {
    let vol = grid.cell_volume();
    grid.edges()
        .iter()
        .map(|e| {
            let (a, b) = (rho[e.lo], rho[e.hi]);
            let d = clamp_log(a) - clamp_log(b);
            d * d * 0.5 * (a + b) / (e.spacing * e.spacing)
        })
        .sum::<f64>()
        * vol
}

pub fn fisher_gradient(rho: &[f64], grid: &Grid) -> Vec<f64> {
    let vol = grid.cell_volume();
    let mut g = vec![0.0; rho.len()];
    for e in grid.edges() {
        let (a, b) = (rho[e.lo].max(LOG_FLOOR), rho[e.hi].max(LOG_FLOOR));
        let d = a.ln() - b.ln();
        let s = a + b;
        let w = vol / (e.spacing * e.spacing);
        g[e.lo] += (d * s / a + 0.5 * d * d) * w;
        g[e.hi] += (-d * s / b + 0.5 * d * d) * w;
    }
    g
}

/// Append the Fisher Hessian, scaled by `scale`, as triplets.
pub(crate) fn fisher_hessian_triplets(rho: &[f64], grid: &Grid, scale: f64, trip: &mut Vec<(usize, usize, f64)>) {
    let vol = grid.cell_volume();
    for e in grid.edges() {
        let (a, b) = (rho[e.lo].max(LOG_FLOOR), rho[e.hi].max(LOG_FLOOR));
        let t = fisher_t(a, b);
        let w = scale * vol / (e.spacing * e.spacing);
        trip.push((e.lo, e.lo, w * t / (a * a)));
        trip.push((e.hi, e.hi, w * t / (b * b)));
        trip.push((e.lo, e.hi, -w * t / (a * b)));
        trip.push((e.hi, e.lo, -w * t / (a * b)));
    }
}

pub fn fisher_hessian(rho: &[f64], grid: &Grid) -> SparseMatrix {
    let mut trip = Vec::new();
    fisher_hessian_triplets(rho, grid, 1.0, &mut trip);
    SparseMatrix::from_triplets(rho.len(), rho.len(), &trip).expect("indices in range")
}

/// Convenience wrappers on fields.
impl DensityField {
    pub fn energy(&self, spec: &EnergySpec) -> f64 {
        energy_value(&self.values, spec)
    }

    pub fn fisher(&self) -> f64 {
        fisher_value(&self.values, &self.grid)
    }
}
