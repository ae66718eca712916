//! Bounded adversarial perturbations for image classifiers.
//!
//! The crate trains a feed-forward generator against a frozen target
//! classifier so that, once trained, perturbations for new inputs are a
//! single forward pass — no further access to the target model is needed.
//! Alongside it live the classic baselines (fast gradient sign, iterative
//! margin-loss optimization), distillation-based black-box attacks,
//! adversarial-training defenses, and an experiment harness that turns all
//! of the above into CSV/Markdown reports and perturbation grids.
//!
//! All numeric code is generic over the scalar type through [`Scalar`];
//! the concrete aliases below fix `f32` as the working precision.

// ndarray dispatches matrix products to the system BLAS; the link lives here.
extern crate blas_src;

pub mod attacks;
pub mod data;
pub mod defenses;
pub mod distillation;
pub mod error;
pub mod evaluation;
pub mod models;
pub mod nn;
pub mod pipeline;
pub mod rng;

pub use error::{Error, Result};

use ndarray::NdFloat;
use num_traits::FromPrimitive;

/// Scalar bound for all numeric kernels. Satisfied by `f32` and `f64`.
pub trait Scalar: NdFloat + FromPrimitive + std::iter::Sum + 'static {}
impl<T: NdFloat + FromPrimitive + std::iter::Sum + 'static> Scalar for T {}

/// Working precision used by the CLI and the experiment harness.
pub type Real = f32;

pub type Dataset = data::Dataset<Real>;
pub type Classifier = models::Classifier<Real>;
pub type BlackBoxOracle = models::BlackBoxOracle<Real>;
pub type GeneratorModel = attacks::GeneratorModel<Real>;
pub type DiscriminatorModel = attacks::DiscriminatorModel<Real>;
pub type AttackResult = attacks::AttackResult<Real>;
