//! Numerics for a two-time quantum theory of two interacting particles.
//!
//! The crate discretizes trajectory functionals on a pair of time axes,
//! evaluates the auxiliary functional of the action operator over a quadratic
//! exponent ansatz, solves the resulting two-time wave equation by
//! least-squares collocation, and extracts the system energy in the
//! large-duration limit. The zero-coupling sector has an exact plane-wave
//! solution that anchors the test suite end to end.
//!
//! All numerics are generic over the floating-point scalar through
//! [`scalar::Scalar`]; the aliases below fix the common instantiations.

pub mod action;
pub mod chi;
pub mod energy;
pub mod grid;
pub mod kernel;
pub mod scalar;
pub mod solver;

pub use num_complex::Complex;

pub use action::{PrefactorConvention, ResidualField, WOptions};
pub use chi::{ChiCoefficients, ChiValue};
pub use energy::EnergyEstimate;
pub use grid::{Constants, Endpoints, TimeGrid, Trajectory};
pub use kernel::{CouplingPrefactor, KernelConfig};
pub use scalar::{Scalar, Vec3};
pub use solver::SolveReport;

// Concrete double-precision aliases; the CLI and the acceptance suite use
// these.
pub type TimeGrid64 = grid::TimeGrid<f64>;
pub type Trajectory64 = grid::Trajectory<f64>;
pub type Constants64 = grid::Constants<f64>;
pub type Endpoints64 = grid::Endpoints<f64>;
pub type Vec3_64 = scalar::Vec3<f64>;
pub type KernelConfig64 = kernel::KernelConfig<f64>;
pub type ChiCoefficients64 = chi::ChiCoefficients<f64>;
pub type ResidualField64 = action::ResidualField<f64>;
pub type SolveReport64 = solver::SolveReport<f64>;
pub type EnergyEstimate64 = energy::EnergyEstimate<f64>;
pub type Complex64 = num_complex::Complex<f64>;

// Single-precision variants for callers that trade accuracy for footprint.
pub type TimeGrid32 = grid::TimeGrid<f32>;
pub type Trajectory32 = grid::Trajectory<f32>;
pub type Constants32 = grid::Constants<f32>;
pub type ChiCoefficients32 = chi::ChiCoefficients<f32>;
