//! Dissipaton equation-of-motion solver for open quantum systems.
//!
//! The numerical core is generic over the real scalar (`f32` or `f64`); the
//! aliases below fix it to `f64`, which is what the command-line tool and the
//! acceptance suite use.

// `!(x > 0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dynamics;
pub mod error;
pub mod hierarchy;
pub mod linalg;
pub mod model;
pub mod quadrature;
pub mod scalar;
pub mod steady;
pub mod thermo;

pub use error::{DeomError, Result};
pub use scalar::Real;

pub type Complex = scalar::C<f64>;
pub type Matrix = linalg::CMatrix<f64>;
pub type SystemSpec = model::SystemSpec<f64>;
pub type DrudeSpec = model::DrudeSpec<f64>;
pub type ModeSet = model::ModeSet<f64>;
pub type DdoStore = hierarchy::DdoStore<f64>;
pub type Generator = hierarchy::Generator<f64>;
pub type GeneratorCoefficients = hierarchy::GeneratorCoefficients<f64>;
pub type Scaling = hierarchy::Scaling<f64>;
pub type ObservableSpec = dynamics::ObservableSpec<f64>;
pub type PropagateConfig = dynamics::PropagateConfig<f64>;
pub type SciConfig = steady::SciConfig<f64>;

pub use hierarchy::IndexSpace;

use std::sync::Arc;

/// Generator over a freshly enumerated index space in the scaled
/// representation, the default setup for production runs.
pub fn scaled_generator<T: Real>(
    system: &model::SystemSpec<T>,
    modes: &model::ModeSet<T>,
    max_tier: usize,
) -> Result<hierarchy::Generator<T>> {
    let space = Arc::new(IndexSpace::enumerate(modes.n_u(), modes.n_poles(), max_tier)?);
    let f = Arc::new(hierarchy::scaling_factors(&space, modes));
    hierarchy::Generator::new(space, system, modes, hierarchy::Scaling::Scaled(f))
}

/// Same as [`scaled_generator`] in the raw representation.
pub fn raw_generator<T: Real>(
    system: &model::SystemSpec<T>,
    modes: &model::ModeSet<T>,
    max_tier: usize,
) -> Result<hierarchy::Generator<T>> {
    let space = Arc::new(IndexSpace::enumerate(modes.n_u(), modes.n_poles(), max_tier)?);
    hierarchy::Generator::new(space, system, modes, hierarchy::Scaling::Raw)
}
