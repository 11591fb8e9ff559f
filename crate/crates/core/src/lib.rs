//! Adaptive multiresolution finite-volume solver for the two-dimensional
//! bidomain equations with Mitchell–Schaeffer membrane kinetics.
//!
//! The numerical core is generic over the scalar type ([`scalar::Real`],
//! implemented for `f32` and `f64`). The aliases below fix it to `f64`, with
//! `F32` variants for single precision.

pub mod elliptic;
pub mod error;
pub mod fv;
pub mod grid;
pub mod lts;
pub mod model;
pub mod multiresolution;
pub mod scalar;
pub mod sim;
pub mod tree;

pub use error::{Error, Result};
pub use grid::CellIndex;
pub use scalar::Real;

pub type Params = model::ModelParams<f64>;
pub type Stimulus = model::StimulusProtocol<f64>;
pub type MrConfig = multiresolution::MrConfig<f64>;
pub type TreeConfig = tree::TreeConfig<f64>;
pub type Tree = tree::MrTree<f64>;
pub type UniformSolver = fv::UniformSolver<f64>;
pub type AdaptiveSettings = lts::AdaptiveSettings<f64>;
pub type AdaptiveSolver = lts::AdaptiveSolver<f64>;
pub type SolverSettings = elliptic::SolverSettings<f64>;

pub type ParamsF32 = model::ModelParams<f32>;
pub type StimulusF32 = model::StimulusProtocol<f32>;
pub type TreeF32 = tree::MrTree<f32>;
pub type UniformSolverF32 = fv::UniformSolver<f32>;
pub type AdaptiveSolverF32 = lts::AdaptiveSolver<f32>;
