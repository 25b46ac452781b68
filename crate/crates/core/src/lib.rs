//! Animatable avatar pipeline built around a pose-keyed texture vocabulary.
//!
//! The crate covers the full path from multi-view capture data to a
//! pose-driven renderable character:
//!
//! - [`body_model`]: skinned template, forward kinematics, linear blend
//!   skinning and inverse skinning of sampled points.
//! - [`texture_atlas`]: back-projection of camera images into UV texture
//!   maps and pixel-aligned feature maps.
//! - [`pose_vocab`]: body-part pose keys, farthest-point key sampling and
//!   KNN feature interpolation.
//! - [`neural_field`]: SDF+color multilayer perceptron with hand-rolled
//!   reverse-mode differentiation and Laplace-CDF density conversion.
//! - [`renderer`]: ray generation, stratified/depth-guided sampling and
//!   volume-rendering quadrature.
//! - [`trainer`]: losses, Adam, the three-stage schedule and image metrics.
//! - [`geometry_extract`]: SDF grids, marching cubes and depth rasterization.
//! - [`synthetic_scene`]: a deterministic procedural capture rig that makes
//!   every stage verifiable without real data.

pub mod body_model;
pub mod bvh;
pub mod error;
pub mod geometry_extract;
pub(crate) mod mc_tables;
pub mod imgio;
pub mod metrics;
pub mod neural_field;
pub mod pose_vocab;
pub mod renderer;
pub mod synthetic_scene;
pub mod texture_atlas;
pub mod trainer;

pub use error::{Error, Result};

#[cfg(test)]
pub(crate) mod testutil;

/// Canonical joint count of the kinematic tree.
pub const JOINT_COUNT: usize = 24;

pub type Vec3 = nalgebra::Vector3<f64>;
pub type Mat3 = nalgebra::Matrix3<f64>;
