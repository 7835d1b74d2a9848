//! Fisher-information regularized JKO time stepping for Wasserstein gradient flows
//!
//! ```text
//!     d/dt rho = div( rho grad( U'(rho) + V + W * rho ) )
//! ```
//!
//! Each time step minimizes a strictly convex program over cell densities and
//! face fluxes,
//!
//! ```text
//!     min  sum_faces [ m^2 / mean(rho) + c_F (dlog rho / h)^2 mean(rho) ] vol + 2 tau E(rho)
//!     s.t. rho - rho_prev + div m = 0,   rho >= 0
//! ```
//!
//! where `c_F` is the Fisher coefficient. The program is solved by sequential
//! quadratic programming ([`sqp`]) whose subproblems go to a primal-dual
//! interior-point QP solver ([`qp`]) backed by a sparse quasi-definite LDLᵀ
//! factorization ([`linalg`]).
//!
//! The outer time loop and the library of reference experiments live in
//! [`driver`]; closed-form solutions and error metrics in [`oracles`].

pub mod driver;
pub mod energy;
pub mod error;
pub mod grid;
pub mod linalg;
pub mod objective;
pub mod oracles;
pub mod qp;
pub mod quadrature;
pub mod sqp;

pub use driver::{preset_library, run, Preset, RunOutput, StepDiagnostics};
pub use energy::{EnergySpec, FisherCoeff, InternalEnergy, RadialFunction, RadialTerm};
pub use error::{Error, Result};
pub use grid::{DensityField, FluxField, Grid};
pub use objective::{HessianMode, JkoStepProblem, StateVector};
pub use qp::{solve_qp, QpProblem, QpResult};
pub use sqp::{sqp_step, warm_start, SqpParams, StepResult};
