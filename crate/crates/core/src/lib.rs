//! Multiscale reactive transport through a thin perforated fracture:
//! cell and boundary-layer problems, the homogenized interface model, the
//! ε-resolved micro model and the error verification that ties them together.

pub mod cell_solvers;
pub mod cli;
pub mod config;
pub mod error;
pub mod geometry;
pub mod homog_solver;
pub mod layer_solvers;
pub mod linalg;
pub mod micro_solver;
pub mod reactions;
pub mod scalar;
pub mod verify;

pub use error::{Error, Result};
pub use scalar::Real;

pub type CellGeometryF64 = geometry::CellGeometry<f64>;
pub type MaskedGridF64 = geometry::MaskedGrid<f64>;
pub type MicroDomainSpecF64 = geometry::MicroDomainSpec<f64>;
pub type ReactionSystemF64 = reactions::ReactionSystem<f64>;
pub type EffectiveDataF64 = cell_solvers::EffectiveData<f64>;
