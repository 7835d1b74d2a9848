//! Outer JKO time loop and the library of reference experiments.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::energy::{
    energy_value, fisher_value, EnergySpec, FisherCoeff, InternalEnergy, Potential, RadialFunction, RadialTerm,
};
use crate::error::{Error, Result};
use crate::grid::{DensityField, FluxField, Grid};
use crate::objective::{audit_derivatives, DerivativeAudit, HessianMode, JkoStepProblem, StateVector};
use crate::oracles::{barenblatt, l1_err, BarenblattParams};
use crate::qp::QpWorkspace;
use crate::sqp::{sqp_step_with, warm_start, SqpParams};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub dim: usize,
    pub nx: usize,
    pub ny: usize,
    pub x: (f64, f64),
    pub y: (f64, f64),
}

impl GridSpec {
    pub fn line(nx: usize, x: (f64, f64)) -> Self {
        Self {
            dim: 1,
            nx,
            ny: 1,
            x,
            y: (0.0, 1.0),
        }
    }

    pub fn square(n: usize, a: f64, b: f64) -> Self {
        Self {
            dim: 2,
            nx: n,
            ny: n,
            x: (a, b),
            y: (a, b),
        }
    }

    pub fn build(&self) -> Result<Grid> {
        match self.dim {
            1 => Grid::new_1d(self.nx, self.x.0, self.x.1),
            2 => Grid::new_2d(self.nx, self.ny, self.x, self.y),
            d => Err(Error::InvalidGrid(format!("dimension {d} not supported"))),
        }
    }
}

/// `amplitude * exp(-|x - center|^2 / (2 sigma^2))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bump {
    pub center: [f64; 2],
    pub sigma: f64,
    pub amplitude: f64,
}

impl Bump {
    pub fn eval(&self, p: [f64; 2]) -> f64 {
        let r2 = (p[0] - self.center[0]).powi(2) + (p[1] - self.center[1]).powi(2);
        self.amplitude * (-r2 / (2.0 * self.sigma * self.sigma)).exp()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitialDensity {
    /// `scale * (sum of bumps + floor)`, optionally rescaled to a mass.
    Bumps {
        bumps: Vec<Bump>,
        floor: f64,
        scale: f64,
        normalize_to: Option<f64>,
    },
    /// Barenblatt profile at `t = 0` plus `floor`.
    Barenblatt { params: BarenblattParams, floor: f64 },
    /// Indicator of `|x - c_x| <= half_width[0], |y - c_y| <= half_width[1]`
    /// plus `floor`.
    Box {
        center: [f64; 2],
        half_width: [f64; 2],
        floor: f64,
    },
}

impl InitialDensity {
    pub fn sample(&self, grid: Grid) -> Result<DensityField> {
        match self {
            InitialDensity::Bumps {
                bumps,
                floor,
                scale,
                normalize_to,
            } => {
                let mut rho = DensityField::from_fn(grid, |p| scale * (bumps.iter().map(|b| b.eval(p)).sum::<f64>() + floor))?;
                if let Some(mass) = normalize_to {
                    rho.normalize_to(*mass);
                }
                Ok(rho)
            }
            InitialDensity::Barenblatt { params, floor } => {
                DensityField::from_fn(grid, |p| barenblatt(p[0], 0.0, params) + floor)
            }
            InitialDensity::Box {
                center,
                half_width,
                floor,
            } => DensityField::from_fn(grid, |p| {
                let inside = (p[0] - center[0]).abs() <= half_width[0]
                    && (grid.dim() == 1 || (p[1] - center[1]).abs() <= half_width[1]);
                if inside {
                    1.0 + floor
                } else {
                    *floor
                }
            }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FisherMode {
    /// Coefficient `beta^-2 tau^2`.
    Beta { beta_inv_sq: f64 },
    /// Coefficient `tau`; the Fisher information is part of the energy.
    Dlss,
}

impl FisherMode {
    pub fn coeff(&self, tau: f64) -> Result<FisherCoeff> {
        match *self {
            FisherMode::Beta { beta_inv_sq } => FisherCoeff::new(beta_inv_sq * tau * tau),
            FisherMode::Dlss => FisherCoeff::dlss(tau),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Preset {
    pub name: String,
    pub description: String,
    pub grid: GridSpec,
    pub initial: InitialDensity,
    pub internal: InternalEnergy,
    pub potential: Option<Potential>,
    pub kernel: Option<RadialFunction>,
    pub tau: f64,
    pub fisher: FisherMode,
    pub hessian: HessianMode,
    pub t_max: f64,
    pub sqp: SqpParams,
    pub snapshot_stride: usize,
    /// Center used for radial diagnostics.
    pub center: Option<[f64; 2]>,
}

impl Preset {
    pub fn build_grid(&self) -> Result<Grid> {
        self.grid.build()
    }

    pub fn energy_spec(&self, grid: Grid) -> Result<EnergySpec> {
        EnergySpec::new(grid, self.internal, self.potential.as_ref(), self.kernel.as_ref())
    }

    pub fn initial_density(&self) -> Result<DensityField> {
        self.initial.sample(self.build_grid()?)
    }

    pub fn fisher_coeff(&self) -> Result<FisherCoeff> {
        self.fisher.coeff(self.tau)
    }

    /// The step problem whose previous density is the initial condition.
    pub fn problem(&self) -> Result<JkoStepProblem> {
        let grid = self.build_grid()?;
        JkoStepProblem::new(
            self.energy_spec(grid)?,
            self.tau,
            self.fisher_coeff()?,
            self.hessian,
            self.initial.sample(grid)?,
        )
    }

    pub fn barenblatt_params(&self) -> Option<BarenblattParams> {
        match self.initial {
            InitialDensity::Barenblatt { params, .. } => Some(params),
            _ => None,
        }
    }

    pub fn n_steps(&self) -> usize {
        ((self.t_max / self.tau) - 1e-9).ceil().max(0.0) as usize
    }

    pub fn apply(&mut self, o: &Overrides) -> Result<()> {
        if let Some(nx) = o.nx {
            self.grid.nx = nx;
            if self.grid.dim == 2 && o.ny.is_none() {
                self.grid.ny = nx;
            }
        }
        if let Some(ny) = o.ny {
            if self.grid.dim != 2 {
                return Err(Error::InvalidParameter("ny applies to 2D presets only".into()));
            }
            self.grid.ny = ny;
        }
        if let Some(tau) = o.tau {
            self.tau = tau;
        }
        if let Some(beta) = o.beta {
            if !(beta > 0.0) {
                return Err(Error::InvalidParameter(format!("beta {beta} must be positive")));
            }
            match self.fisher {
                FisherMode::Beta { .. } => self.fisher = FisherMode::Beta { beta_inv_sq: 1.0 / (beta * beta) },
                FisherMode::Dlss => {
                    return Err(Error::InvalidParameter("beta does not apply to DLSS presets".into()));
                }
            }
        }
        if let Some(mult) = o.beta_tilde_mult {
            self.hessian = if mult == 0 {
                HessianMode::Exact
            } else {
                HessianMode::Surrogate { multiplier: mult }
            };
        }
        if let Some(t) = o.t_max {
            self.t_max = t;
        }
        if let Some(tol) = o.tol {
            self.sqp.tol_rel = tol;
        }
        if let Some(k) = o.max_inner {
            self.sqp.max_inner = k;
        }
        if let Some(q) = o.qp_tol {
            self.sqp.qp_tol = q;
        }
        if let Some(s) = o.snapshot_stride {
            self.snapshot_stride = s;
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        self.build_grid()?;
        if !(self.tau > 0.0) {
            return Err(Error::InvalidParameter(format!("tau {} must be positive", self.tau)));
        }
        if !(self.t_max >= 0.0) {
            return Err(Error::InvalidParameter(format!("t_max {} must be >= 0", self.t_max)));
        }
        if self.snapshot_stride == 0 {
            return Err(Error::InvalidParameter("snapshot_stride must be >= 1".into()));
        }
        self.sqp.validate()
    }
}

/// Optional replacements for preset values.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Overrides {
    pub nx: Option<usize>,
    pub ny: Option<usize>,
    pub tau: Option<f64>,
    pub beta: Option<f64>,
    /// `0` selects the exact Hessian.
    pub beta_tilde_mult: Option<u32>,
    pub t_max: Option<f64>,
    pub tol: Option<f64>,
    pub max_inner: Option<usize>,
    pub qp_tol: Option<f64>,
    pub snapshot_stride: Option<usize>,
}

fn power(coeff: f64, exponent: f64) -> RadialTerm {
    RadialTerm::Power { coeff, exponent }
}

fn gaussian_1d(sigma: f64, center: f64) -> Bump {
    Bump {
        center: [center, 0.0],
        sigma,
        amplitude: 1.0 / ((2.0 * std::f64::consts::PI).sqrt() * sigma),
    }
}

/// Mass of `scale * (sum of bumps + floor)` over the whole plane, with the
/// floor integrated over a domain of measure `volume`.
fn continuum_mass(dim: usize, bumps: &[Bump], floor: f64, scale: f64, volume: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    let bump: f64 = bumps
        .iter()
        .map(|b| b.amplitude * (two_pi * b.sigma * b.sigma).powf(0.5 * dim as f64))
        .sum();
    scale * (bump + floor * volume)
}

fn sqp(tol_rel: f64) -> SqpParams {
    SqpParams {
        tol_rel,
        ..SqpParams::default()
    }
}

/// Every reference experiment.
pub fn preset_library() -> Vec<Preset> {
    let sqrt_2pi = (2.0 * std::f64::consts::PI).sqrt();
    let quadratic = |center: [f64; 2]| Potential {
        profile: RadialFunction::new(vec![power(0.5, 2.0)]),
        center,
    };
    let theta = 0.1;
    let dlss_bumps = [-1.5, 1.5].map(|c| Bump {
        center: [c, 0.0],
        sigma: theta,
        amplitude: 1.0,
    });
    let dlss_initial = |volume: f64| InitialDensity::Bumps {
        bumps: dlss_bumps.to_vec(),
        floor: 1e-8,
        scale: 1.0 / (2.0 * sqrt_2pi * theta),
        normalize_to: Some(continuum_mass(1, &dlss_bumps, 1e-8, 1.0 / (2.0 * sqrt_2pi * theta), volume)),
    };
    let heat_bump = Bump {
        center: [1.0, 0.0],
        sigma: (1.0f64 / 200.0).sqrt(),
        amplitude: 1.0,
    };
    let ring_center = [1.25, 1.25];
    // (1/(sqrt(2 pi) theta)) exp(-|x - x0|^2 / theta^2) + 1e-5, theta = 0.2
    let ring_bump = Bump {
        center: ring_center,
        sigma: 0.2 / 2f64.sqrt(),
        amplitude: 1.0 / (sqrt_2pi * 0.2),
    };
    let ring_initial = InitialDensity::Bumps {
        bumps: vec![ring_bump],
        floor: 1e-5,
        scale: 1.0,
        normalize_to: Some(1.0),
    };
    let newton = RadialFunction::new(vec![power(0.5, 2.0), RadialTerm::Log { coeff: -1.0 }]);

    vec![
        Preset {
            name: "heat1d".into(),
            description: "heat equation, entropy energy, beta = 1".into(),
            grid: GridSpec::line(99, (0.0, 2.0)),
            initial: InitialDensity::Bumps {
                bumps: vec![heat_bump],
                floor: 1e-5,
                scale: 1.0,
                normalize_to: Some(continuum_mass(1, &[heat_bump], 1e-5, 1.0, 2.0)),
            },
            internal: InternalEnergy::Entropy,
            potential: None,
            kernel: None,
            tau: 0.0025,
            fisher: FisherMode::Beta { beta_inv_sq: 1.0 },
            hessian: HessianMode::Exact,
            t_max: 0.1,
            sqp: sqp(1.25e-7),
            snapshot_stride: 4,
            center: None,
        },
        Preset {
            name: "pme1d".into(),
            description: "porous medium equation, m = 2, Barenblatt initial data".into(),
            grid: GridSpec::line(49, (-1.0, 1.0)),
            initial: InitialDensity::Barenblatt {
                params: BarenblattParams {
                    m_exp: 2.0,
                    c: 0.8,
                    t0: 1e-3,
                },
                floor: 1e-5,
            },
            internal: InternalEnergy::porous_medium(2.0),
            potential: None,
            kernel: None,
            tau: 5e-4,
            fisher: FisherMode::Beta { beta_inv_sq: 1.0 },
            hessian: HessianMode::Exact,
            t_max: 6e-3,
            sqp: sqp(1e-8),
            snapshot_stride: 2,
            center: None,
        },
        Preset {
            name: "nfp1d".into(),
            description: "nonlinear Fokker-Planck, U = rho^2, V = x^2/2".into(),
            grid: GridSpec::line(200, (-1.0, 1.0)),
            initial: InitialDensity::Bumps {
                bumps: vec![gaussian_1d(0.2, 0.0)],
                floor: 1e-8,
                scale: 0.125,
                normalize_to: Some(continuum_mass(1, &[gaussian_1d(0.2, 0.0)], 1e-8, 0.125, 2.0)),
            },
            internal: InternalEnergy::porous_medium(2.0),
            potential: Some(quadratic([0.0, 0.0])),
            kernel: None,
            tau: 0.004,
            fisher: FisherMode::Beta { beta_inv_sq: 1.0 / 40.0 },
            hessian: HessianMode::Exact,
            t_max: 4.0,
            // The tails fall to ~1e-8, where a 1e-9 complementarity gap is
            // larger than the per-step energy decrease.
            sqp: SqpParams {
                qp_tol: 1e-11,
                ..sqp(1e-6)
            },
            snapshot_stride: 50,
            center: None,
        },
        Preset {
            name: "agg1d".into(),
            description: "aggregation, W = x^2/2 - ln|x|".into(),
            grid: GridSpec::line(50, (-2.0, 2.0)),
            initial: InitialDensity::Bumps {
                bumps: vec![gaussian_1d(0.5, 0.0)],
                floor: 1e-8,
                scale: 1.0,
                normalize_to: Some(continuum_mass(1, &[gaussian_1d(0.5, 0.0)], 1e-8, 1.0, 4.0)),
            },
            internal: InternalEnergy::None,
            potential: None,
            kernel: Some(newton.clone()),
            tau: 0.016,
            fisher: FisherMode::Beta {
                beta_inv_sq: 1.0 / 640.0,
            },
            hessian: HessianMode::Surrogate { multiplier: 40 },
            t_max: 10.0,
            sqp: sqp(1e-9),
            snapshot_stride: 25,
            center: None,
        },
        Preset {
            name: "dlss1d".into(),
            description: "DLSS, V = x^2/2, double Gaussian initial data".into(),
            grid: GridSpec::line(800, (-4.0, 4.0)),
            initial: dlss_initial(8.0),
            internal: InternalEnergy::None,
            potential: Some(quadratic([0.0, 0.0])),
            kernel: None,
            tau: 0.01,
            fisher: FisherMode::Dlss,
            hessian: HessianMode::Exact,
            t_max: 5.0,
            sqp: sqp(1e-6),
            snapshot_stride: 50,
            center: None,
        },
        Preset {
            name: "dlss1d_doublewell".into(),
            description: "DLSS, V = 10 (1 - x^2)^2".into(),
            grid: GridSpec::line(50, (-2.0, 2.0)),
            initial: dlss_initial(4.0),
            internal: InternalEnergy::None,
            potential: Some(Potential {
                profile: RadialFunction::new(vec![power(10.0, 0.0), power(-20.0, 2.0), power(10.0, 4.0)]),
                center: [0.0, 0.0],
            }),
            kernel: None,
            tau: 0.05,
            fisher: FisherMode::Dlss,
            hessian: HessianMode::Exact,
            t_max: 5.0,
            sqp: sqp(1e-6),
            snapshot_stride: 10,
            center: None,
        },
        Preset {
            name: "ring2d".into(),
            description: "2D aggregation, W = |x|^4/4 - |x|^2/2, collapses to a ring of radius 1/sqrt(3)".into(),
            grid: GridSpec::square(50, 0.0, 2.5),
            initial: ring_initial.clone(),
            internal: InternalEnergy::None,
            potential: None,
            kernel: Some(RadialFunction::new(vec![power(0.25, 4.0), power(-0.5, 2.0)])),
            tau: 0.04,
            fisher: FisherMode::Beta { beta_inv_sq: 2e-3 },
            hessian: HessianMode::Surrogate { multiplier: 80 },
            t_max: 10.0,
            sqp: sqp(1e-6),
            snapshot_stride: 25,
            center: Some(ring_center),
        },
        Preset {
            name: "disk2d".into(),
            description: "2D aggregation, W = |x|^2/2 - ln|x|, uniform disk of radius 1".into(),
            grid: GridSpec::square(50, 0.0, 2.5),
            initial: ring_initial,
            internal: InternalEnergy::None,
            potential: None,
            kernel: Some(newton.clone()),
            tau: 0.04,
            fisher: FisherMode::Beta { beta_inv_sq: 2e-3 },
            hessian: HessianMode::Surrogate { multiplier: 40 },
            t_max: 6.0,
            sqp: sqp(1e-6),
            snapshot_stride: 25,
            center: Some(ring_center),
        },
        Preset {
            name: "aggdrift2d".into(),
            description: "2D aggregation-drift, V = -ln|x|/4, annulus 1/2 < r < sqrt(5/4)".into(),
            grid: GridSpec::square(36, -1.8, 1.8),
            initial: InitialDensity::Bumps {
                // A pentagon: not radially symmetric, but centred on the
                // origin. V pushes any off-centre configuration outwards.
                bumps: (0..5)
                    .map(|k| {
                        let a = 0.3 + 0.4 * std::f64::consts::PI * k as f64;
                        Bump {
                            center: [0.8 * a.cos(), 0.8 * a.sin()],
                            sigma: 0.15,
                            amplitude: 1.0,
                        }
                    })
                    .collect(),
                floor: 1e-5,
                scale: 1.0,
                normalize_to: Some(1.0),
            },
            internal: InternalEnergy::None,
            potential: Some(Potential {
                profile: RadialFunction::new(vec![RadialTerm::Log { coeff: -0.25 }]),
                center: [0.0, 0.0],
            }),
            kernel: Some(newton),
            tau: 0.1,
            fisher: FisherMode::Beta { beta_inv_sq: 1.25e-3 },
            hessian: HessianMode::Surrogate { multiplier: 80 },
            t_max: 10.0,
            sqp: sqp(1e-6),
            snapshot_stride: 10,
            center: Some([0.0, 0.0]),
        },
        Preset {
            name: "aggdiff2d".into(),
            description: "2D aggregation-diffusion, W = -exp(-|x|^2)/pi, U = 0.05 rho^3".into(),
            grid: GridSpec::square(60, -3.0, 3.0),
            initial: InitialDensity::Box {
                center: [0.0, 0.0],
                half_width: [2.5, 2.5],
                floor: 1e-5,
            },
            internal: InternalEnergy::Power {
                exponent: 3.0,
                coeff: 0.05,
            },
            potential: None,
            kernel: Some(RadialFunction::new(vec![RadialTerm::Gaussian {
                coeff: -1.0 / std::f64::consts::PI,
                scale: 1.0,
            }])),
            tau: 0.5,
            fisher: FisherMode::Beta { beta_inv_sq: 1.25e-3 },
            hessian: HessianMode::Surrogate { multiplier: 40 },
            t_max: 20.0,
            sqp: sqp(1e-6),
            snapshot_stride: 4,
            center: Some([0.0, 0.0]),
        },
        Preset {
            name: "dlss2d".into(),
            description: "2D DLSS, V = |x|^2/2, four Gaussians".into(),
            grid: GridSpec::square(112, -3.6, 3.6),
            initial: InitialDensity::Bumps {
                bumps: [[1.2, 1.2], [-1.2, 1.2], [-1.2, -1.2], [1.2, -1.2]]
                    .iter()
                    .map(|&center| Bump {
                        center,
                        sigma: 0.3,
                        amplitude: 1.0,
                    })
                    .collect(),
                floor: 1e-8,
                scale: 1.0,
                normalize_to: Some(1.0),
            },
            internal: InternalEnergy::None,
            potential: Some(quadratic([0.0, 0.0])),
            kernel: None,
            tau: 0.04,
            fisher: FisherMode::Dlss,
            hessian: HessianMode::Exact,
            t_max: 2.0,
            sqp: sqp(1e-6),
            snapshot_stride: 10,
            center: Some([0.0, 0.0]),
        },
    ]
}

pub fn lookup(name: &str) -> Result<Preset> {
    preset_library()
        .into_iter()
        .find(|p| p.name == name)
        .ok_or_else(|| Error::UnknownPreset(name.to_string()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepDiagnostics {
    pub step: usize,
    pub t: f64,
    pub mass: f64,
    pub min_rho: f64,
    pub energy: f64,
    pub fisher: f64,
    pub modified_energy: f64,
    pub inner_iterations: usize,
    pub qp_iterations: usize,
    pub converged: bool,
    pub wall_time: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub step: usize,
    pub t: f64,
    pub rho: DensityField,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    /// State before the first step.
    pub initial: StepDiagnostics,
    pub diagnostics: Vec<StepDiagnostics>,
    pub snapshots: Vec<Snapshot>,
    pub final_rho: DensityField,
    pub final_m: FluxField,
}

impl RunOutput {
    /// Initial record followed by every step.
    pub fn history(&self) -> impl Iterator<Item = &StepDiagnostics> {
        std::iter::once(&self.initial).chain(&self.diagnostics)
    }
}

pub fn run(preset: &Preset) -> Result<RunOutput> {
    run_with(preset, |_| {})
}

/// [`run`] calling `observer` after each step.
pub fn run_with(preset: &Preset, mut observer: impl FnMut(&StepDiagnostics)) -> Result<RunOutput> {
    preset.validate()?;
    let base = preset.problem()?;
    let grid = base.grid;
    let record = |step: usize, rho: &DensityField, inner, qp, converged, wall| {
        let energy = energy_value(&rho.values, &base.spec);
        let fisher = fisher_value(&rho.values, &grid);
        StepDiagnostics {
            step,
            t: step as f64 * preset.tau,
            mass: rho.mass(),
            min_rho: rho.min(),
            energy,
            fisher,
            modified_energy: base.fisher.value() / (2.0 * base.tau) * fisher + energy,
            inner_iterations: inner,
            qp_iterations: qp,
            converged,
            wall_time: wall,
        }
    };

    let rho0 = base.rho_prev.clone();
    let initial = record(0, &rho0, 0, 0, true, 0.0);
    let n_steps = preset.n_steps();
    let mut snapshots = vec![Snapshot {
        step: 0,
        t: 0.0,
        rho: rho0.clone(),
    }];
    let mut diagnostics = Vec::with_capacity(n_steps);
    let mut rho_k = rho0;
    let mut rho_km1: Option<DensityField> = None;
    let mut m_prev: Option<FluxField> = None;
    let mut ws = QpWorkspace::default();

    for k in 1..=n_steps {
        let clock = Instant::now();
        let abort = |e: Error| Error::RunAborted {
            step: k,
            source: Box::new(e),
        };
        let p = base.with_rho_prev(rho_k.clone()).map_err(abort)?;
        let warm = warm_start(&rho_k, rho_km1.as_ref(), m_prev.as_ref(), preset.sqp.warm_start_floor).map_err(abort)?;
        let res = sqp_step_with(&p, &preset.sqp, &warm, &mut ws).map_err(abort)?;
        let d = record(
            k,
            &res.rho_next,
            res.inner_iterations,
            res.qp_iterations,
            res.converged,
            clock.elapsed().as_secs_f64(),
        );
        observer(&d);
        diagnostics.push(d);
        if k % preset.snapshot_stride == 0 || k == n_steps {
            snapshots.push(Snapshot {
                step: k,
                t: d.t,
                rho: res.rho_next.clone(),
            });
        }
        rho_km1 = Some(std::mem::replace(&mut rho_k, res.rho_next));
        m_prev = Some(res.m_next);
    }

    Ok(RunOutput {
        initial,
        diagnostics,
        snapshots,
        final_rho: rho_k,
        final_m: m_prev.unwrap_or_else(|| FluxField::zeros(grid)),
    })
}

/// Least-squares slope of `log e` against `log tau`.
pub fn fit_order(taus: &[f64], errs: &[f64]) -> f64 {
    let pts: Vec<(f64, f64)> = taus
        .iter()
        .zip(errs)
        .filter(|(_, &e)| e > 0.0)
        .map(|(&t, &e)| (t.ln(), e.ln()))
        .collect();
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}

/// Coefficient of determination of the straight-line fit of `ys` on `xs`.
pub fn linear_fit_r2(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let slope = sxy / sxx;
    let r2 = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    (slope, r2)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceRow {
    pub tau: f64,
    /// `‖rho_tau - rho_{tau/2}‖₁`.
    pub richardson: f64,
    /// `‖rho_tau - rho_ref‖₁`, when a reference is given.
    pub reference: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceTable {
    pub rows: Vec<ConvergenceRow>,
    pub richardson_order: f64,
    pub reference_order: Option<f64>,
}

/// Errors of `solve(tau)` at the final time for each `tau` and `tau / 2`,
/// with fitted orders. `solve` is called once per distinct step size.
pub fn convergence_table(
    taus: &[f64],
    mut solve: impl FnMut(f64) -> Result<DensityField>,
    reference: Option<&DensityField>,
) -> Result<ConvergenceTable> {
    let mut cache: Vec<(f64, DensityField)> = Vec::new();
    let mut get = |tau: f64, cache: &mut Vec<(f64, DensityField)>| -> Result<DensityField> {
        if let Some((_, r)) = cache.iter().find(|(t, _)| (t / tau - 1.0).abs() < 1e-12) {
            return Ok(r.clone());
        }
        let r = solve(tau)?;
        cache.push((tau, r.clone()));
        Ok(r)
    };
    let mut rows = Vec::new();
    for &tau in taus {
        let a = get(tau, &mut cache)?;
        let b = get(0.5 * tau, &mut cache)?;
        rows.push(ConvergenceRow {
            tau,
            richardson: l1_err(&a, &b)?,
            reference: reference.map(|r| l1_err(&a, r)).transpose()?,
        });
    }
    let ts: Vec<f64> = rows.iter().map(|r| r.tau).collect();
    let rich: Vec<f64> = rows.iter().map(|r| r.richardson).collect();
    let reference_order = if reference.is_some() {
        let e: Vec<f64> = rows.iter().map(|r| r.reference.unwrap_or(0.0)).collect();
        Some(fit_order(&ts, &e))
    } else {
        None
    };
    Ok(ConvergenceTable {
        richardson_order: fit_order(&ts, &rich),
        rows,
        reference_order,
    })
}

/// Temporal convergence study of a preset: runs it to `t_max` at each step
/// size (and half of each) and compares final densities.
pub fn convergence_study(preset: &Preset, taus: &[f64], reference: Option<&DensityField>) -> Result<ConvergenceTable> {
    convergence_table(
        taus,
        |tau| {
            let mut p = preset.clone();
            p.tau = tau;
            p.snapshot_stride = usize::MAX;
            Ok(run(&p)?.final_rho)
        },
        reference,
    )
}

/// Fraction of the mass held by cells whose centers lie at distance
/// `[r_lo, r_hi]` from `center`.
pub fn radial_mass_fraction(rho: &DensityField, center: [f64; 2], r_lo: f64, r_hi: f64) -> f64 {
    let total: f64 = rho.values.iter().sum();
    let inside: f64 = rho
        .grid
        .cell_centers()
        .iter()
        .zip(&rho.values)
        .filter(|(c, _)| {
            let r = ((c[0] - center[0]).powi(2) + (c[1] - center[1]).powi(2)).sqrt();
            r >= r_lo && r <= r_hi
        })
        .map(|(_, v)| v)
        .sum();
    inside / total
}

/// Mass per radial shell of width `dr` around `center`.
pub fn radial_profile(rho: &DensityField, center: [f64; 2], dr: f64) -> Vec<(f64, f64)> {
    let vol = rho.grid.cell_volume();
    let mut shells: Vec<f64> = Vec::new();
    for (c, v) in rho.grid.cell_centers().iter().zip(&rho.values) {
        let r = ((c[0] - center[0]).powi(2) + (c[1] - center[1]).powi(2)).sqrt();
        let k = (r / dr) as usize;
        if shells.len() <= k {
            shells.resize(k + 1, 0.0);
        }
        shells[k] += v * vol;
    }
    shells.into_iter().enumerate().map(|(k, m)| ((k as f64 + 0.5) * dr, m)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DerivCheckReport {
    pub preset: String,
    pub n_cells: usize,
    pub exact: DerivativeAudit,
    /// Audit of the surrogate model, for presets with an interaction kernel.
    pub surrogate: Option<(u32, DerivativeAudit)>,
}

impl DerivCheckReport {
    pub fn worst(&self) -> f64 {
        let mut w = self.exact.gradient_rel_err.max(self.exact.hessian_rel_err);
        if let Some((_, a)) = self.surrogate {
            w = w.max(a.gradient_rel_err).max(a.hessian_rel_err);
        }
        w
    }
}

/// Audit the objective derivatives of `preset` at a random interior point.
/// With `corrupt_gradient`, one gradient entry is perturbed on purpose.
pub fn derivative_check(preset: &Preset, seed: u64, corrupt_gradient: bool) -> Result<DerivCheckReport> {
    let p = preset.problem()?;
    let grid = p.grid;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mean = p.rho_prev.mass() / grid.volume();
    let rho: Vec<f64> = (0..grid.n_cells()).map(|_| mean * rng.random_range(0.5..1.5)).collect();
    let m: Vec<f64> = (0..grid.n_interior_faces())
        .map(|_| mean * rng.random_range(-0.2..0.2))
        .collect();
    let u = StateVector::from_parts(&rho, &m);
    let unpack = |x: &[f64]| StateVector::from_vec(x.to_vec(), &grid).expect("length fixed");
    let corrupt = |mut g: Vec<f64>| {
        if corrupt_gradient {
            g[0] *= 1.0 + 1e-3;
            g[0] += 1e-3;
        }
        g
    };

    let h = p.hessian_with_mode(&u, HessianMode::Exact)?;
    let exact = audit_derivatives(
        &|x| p.value(&unpack(x)),
        &|x| corrupt(p.gradient(&unpack(x)).expect("interior point")),
        &h,
        &u.values,
    );
    let surrogate = match preset.hessian {
        HessianMode::Surrogate { multiplier } => {
            let hs = p.hessian_with_mode(&u, preset.hessian)?;
            let audit = audit_derivatives(
                &|x| p.surrogate_value(&unpack(x), multiplier),
                &|x| corrupt(p.surrogate_gradient(&unpack(x), multiplier).expect("interior point")),
                &hs,
                &u.values,
            );
            Some((multiplier, audit))
        }
        HessianMode::Exact => None,
    };
    Ok(DerivCheckReport {
        preset: preset.name.clone(),
        n_cells: grid.n_cells(),
        exact,
        surrogate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracles::reference_heat_solver;

    #[test]
    fn library_lookups() {
        assert_eq!(lookup("pme1d").unwrap().barenblatt_params().unwrap().c, 0.8);
        let drift = lookup("aggdrift2d").unwrap();
        assert_eq!(
            drift.potential.unwrap().profile.terms,
            vec![RadialTerm::Log { coeff: -0.25 }]
        );
        let dlss = lookup("dlss1d").unwrap();
        assert_eq!(dlss.fisher_coeff().unwrap().value(), dlss.tau);
        assert!(matches!(lookup("nope"), Err(Error::UnknownPreset(_))));
    }

    #[test]
    fn caption_numbers() {
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-12 * b.abs().max(1e-300);
        let cf = |n: &str| lookup(n).unwrap().fisher_coeff().unwrap().value();
        assert!(close(cf("nfp1d"), 4e-7));
        assert!(close(cf("agg1d"), 4e-7));
        assert!(close(cf("ring2d"), 3.2e-6));
        assert!(close(cf("disk2d"), 3.2e-6));
        assert!(close(cf("aggdrift2d"), 1.25e-5));
        assert!(close(cf("aggdiff2d"), 3.125e-4));
        let dx = |n: &str| lookup(n).unwrap().build_grid().unwrap().dx();
        assert!((dx("heat1d") - 0.0202).abs() < 1e-4);
        assert!((dx("pme1d") - 0.0408).abs() < 1e-4);
        assert!(close(dx("nfp1d"), 0.01));
        assert!(close(dx("agg1d"), 0.08));
        assert!(close(dx("dlss1d"), 0.01));
        assert!(close(dx("dlss1d_doublewell"), 0.08));
        assert!(close(dx("ring2d"), 0.05));
        assert!(close(dx("aggdrift2d"), 0.1));
        assert!(close(dx("aggdiff2d"), 0.1));
        assert!((dx("dlss2d") - 0.0643).abs() < 1e-4);
    }

    #[test]
    fn initial_densities_are_positive() {
        for p in preset_library() {
            let rho = p.initial_density().unwrap();
            assert!(rho.min() > 0.0, "{}", p.name);
            p.energy_spec(rho.grid).unwrap();
        }
        let ring = lookup("ring2d").unwrap().initial_density().unwrap();
        assert!((ring.mass() - 1.0).abs() < 1e-12);
        let heat = lookup("heat1d").unwrap().initial_density().unwrap();
        assert!((heat.mass() - (std::f64::consts::PI.sqrt() / 10.0 + 2e-5)).abs() < 1e-12);
        let box_mass = lookup("aggdiff2d").unwrap().initial_density().unwrap().mass();
        assert!((box_mass - 25.0).abs() < 1e-3);
    }

    #[test]
    fn overrides_apply() {
        let mut p = lookup("heat1d").unwrap();
        p.apply(&Overrides {
            tau: Some(0.00125),
            ..Overrides::default()
        })
        .unwrap();
        assert_eq!(p.tau, 0.00125);
        assert_eq!(p.grid.nx, 99);
        assert!(p
            .apply(&Overrides {
                ny: Some(3),
                ..Overrides::default()
            })
            .is_err());
        let mut d = lookup("dlss1d").unwrap();
        assert!(d
            .apply(&Overrides {
                beta: Some(2.0),
                ..Overrides::default()
            })
            .is_err());
    }

    #[test]
    fn short_heat_run_is_structure_preserving() {
        let mut p = lookup("heat1d").unwrap();
        p.t_max = 0.01;
        let out = run(&p).unwrap();
        assert_eq!(out.diagnostics.len(), 4);
        let m0 = out.initial.mass;
        let hist: Vec<_> = out.history().collect();
        for w in hist.windows(2) {
            assert!((w[1].mass - m0).abs() <= 1e-8 * m0);
            assert!(w[1].min_rho > 0.0);
            assert!(w[1].energy <= w[0].energy);
        }
        assert_eq!(out.snapshots.len(), 2);
    }

    #[test]
    fn convergence_harness() {
        let g = Grid::new_1d(40, 0.0, 2.0).unwrap();
        let rho0 = DensityField::from_fn(g, |x| 1.0 + 0.5 * (std::f64::consts::PI * x[0] / 2.0).cos()).unwrap();
        let t_max = 0.2;
        let taus = [0.02, 0.01, 0.005];
        // backward Euler: first order
        let table = convergence_table(&taus, |tau| reference_heat_solver(&rho0, tau, t_max), None).unwrap();
        assert!((table.richardson_order - 1.0).abs() < 0.1);
        // Richardson-extrapolated backward Euler: second order
        let second = |tau: f64| -> Result<DensityField> {
            let a = reference_heat_solver(&rho0, tau, t_max)?;
            let b = reference_heat_solver(&rho0, 0.5 * tau, t_max)?;
            let v = a.values.iter().zip(&b.values).map(|(x, y)| 2.0 * y - x).collect();
            DensityField::new(g, v)
        };
        let table = convergence_table(&taus, second, None).unwrap();
        assert!((table.richardson_order - 2.0).abs() < 0.15, "{}", table.richardson_order);
        // identical runs give zero error
        let same = convergence_table(&[0.01], |_| Ok(rho0.clone()), Some(&rho0)).unwrap();
        assert_eq!(same.rows[0].richardson, 0.0);
        assert_eq!(same.rows[0].reference, Some(0.0));
    }

    #[test]
    fn radial_mass() {
        let g = Grid::new_2d(20, 20, (-1.0, 1.0), (-1.0, 1.0)).unwrap();
        let rho = DensityField::constant(g, 1.0).unwrap();
        assert!((radial_mass_fraction(&rho, [0.0, 0.0], 0.0, 10.0) - 1.0).abs() < 1e-15);
        let f = radial_mass_fraction(&rho, [0.0, 0.0], 0.0, 0.5);
        assert!((f - std::f64::consts::PI * 0.25 / 4.0).abs() < 0.03);
        let prof = radial_profile(&rho, [0.0, 0.0], 0.1);
        assert!((prof.iter().map(|p| p.1).sum::<f64>() - 4.0).abs() < 1e-12);
    }

    #[test]
    fn derivcheck_and_negative_control() {
        let mut p = lookup("heat1d").unwrap();
        p.grid.nx = 20;
        let r = derivative_check(&p, 7, false).unwrap();
        assert!(r.worst() < 1e-5, "{r:?}");
        let bad = derivative_check(&p, 7, true).unwrap();
        assert!(bad.worst() > 1e-5);
        let mut a = lookup("agg1d").unwrap();
        a.grid.nx = 20;
        let r = derivative_check(&a, 7, false).unwrap();
        assert!(r.surrogate.is_some());
        assert!(r.worst() < 1e-5, "{r:?}");
    }
}
