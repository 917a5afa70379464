//! Rate-distortion solvers for sources observed through a noisy channel,
//! where the decoder reproduces both the hidden state and the observation.
//!
//! The setting: a state `S` is seen only through an observation `X`, and a
//! code for `X` must deliver a state estimate within distortion `D_s` and an
//! observation estimate within distortion `D_o`. The minimum achievable rate
//! as a function of the two budgets is computed here for:
//!
//! * finite alphabets ([`discrete`]): Blahut-Arimoto iterations on the
//!   product reproduction alphabet, with multiplier search to meet both
//!   budgets;
//! * Gaussian models ([`gaussian`]): determinant maximization over the error
//!   covariance by a log-barrier interior-point method, plus variants with
//!   matrix-valued budgets, weighted single budgets, and several states;
//! * simultaneously diagonalizable Gaussian models ([`waterfill`]): a
//!   weighted reverse water-filling solution in the joint eigenbasis, with
//!   closed-form boundary curves and budget-region classification;
//! * achievability checks ([`verify`]): the forward test channel realizing a
//!   Gaussian solution, with exact and Monte Carlo distortion evaluation.
//!
//! Rates are in nats throughout the library; conversion to bits is left to
//! callers. All numeric code is generic over the scalar type via [`Real`];
//! the aliases at the crate root fix the common `f64` instantiations.

pub mod discrete;
pub mod error;
pub mod gaussian;
pub mod linalg;
mod maxdet;
pub mod model;
pub mod scalar;
pub mod verify;
pub mod waterfill;

pub use error::{Error, Result};
pub use scalar::Real;

/// Finite-alphabet semantic source over `f64`.
pub type DiscreteSource64 = model::DiscreteSemanticSource<f64>;
/// Gaussian observation model over `f64`.
pub type GaussianModel64 = model::GaussianSemanticModel<f64>;
/// Gaussian model with several state constraints over `f64`.
pub type MultiStateModel64 = model::MultiStateGaussianModel<f64>;
/// Distortion budget pair over `f64`.
pub type Budget64 = model::DistortionBudget<f64>;
/// Discrete solver output over `f64`.
pub type DiscreteSolution64 = discrete::DiscreteRdfSolution<f64>;
/// Gaussian solver output over `f64`.
pub type GaussianSolution64 = gaussian::GaussianRdfSolution<f64>;
/// Joint eigenbasis form of a Gaussian model over `f64`.
pub type SpectralModel64 = waterfill::SpectralModel<f64>;
/// Water-filling solver output over `f64`.
pub type WaterfillSolution64 = waterfill::WaterfillSolution<f64>;
/// Forward test channel over `f64`.
pub type TestChannel64 = verify::TestChannel<f64>;

/// Finite-alphabet semantic source over `f32`.
pub type DiscreteSource32 = model::DiscreteSemanticSource<f32>;
/// Gaussian observation model over `f32`.
pub type GaussianModel32 = model::GaussianSemanticModel<f32>;
