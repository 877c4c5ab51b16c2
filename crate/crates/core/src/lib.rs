//! Differentiable cloth simulation and point-cloud driven estimation of its
//! stiffness and mass multipliers.
//!
//! The numeric modules are generic over [`Real`] (`f32` or `f64`); the aliases at
//! the bottom of this file fix the scalar for the common cases.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod chamfer;
pub mod error;
pub mod estimator;
pub mod geom;
pub mod io;
pub mod mesh;
pub mod real;
pub mod sampler;
pub mod scenarios;
pub mod sim;

pub use error::{Error, Result};
pub use geom::{Mat3, Vec3};
pub use real::Real;

pub type Vec3d = Vec3<f64>;
pub type Vec3f = Vec3<f32>;
pub type TriMesh64 = mesh::TriMesh<f64>;
pub type TriMesh32 = mesh::TriMesh<f32>;
pub type Scene64 = sim::Scene<f64>;
pub type Scene32 = sim::Scene<f32>;
pub type SimParams64 = sim::SimParams<f64>;
pub type Trajectory64 = sim::Trajectory<f64>;
pub type SampledCloud64 = sampler::SampledCloud<f64>;
pub type TargetSequence64 = scenarios::TargetSequence<f64>;
pub type EstimateResult64 = estimator::EstimateResult<f64>;
