//! Simulation toolkit for two-stage IRS-assisted 3D multi-target localization.
//!
//! A multi-antenna base station first estimates the directions of all targets
//! from direct echoes with 2D MUSIC. Passive reflecting surfaces then sweep
//! DFT beams to estimate the surface-to-target directions, and each target is
//! placed in 3D by triangulating one BS direction with one surface direction.
//!
//! Modules:
//! - [`array`]: steering vectors, planar array responses, DFT codebooks.
//! - [`channel`]: scene geometry, path gains and channel matrices.
//! - [`stage1`]: BS probing, sample covariance and 2D MUSIC.
//! - [`stage2`]: surface beam scanning, echo synthesis, regime analysis.
//! - [`crb`]: Fisher information matrices, CRBs and finite-difference oracle.
//! - [`localization`]: triangulation and multi-target association.
//! - [`harness`]: experiment configs, Monte Carlo runs and CSV output.

// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod array;
pub mod channel;
pub mod crb;
pub mod error;
pub mod harness;
pub mod localization;
pub mod stage1;
pub mod stage2;

pub use array::{Position3, SpatialAnglePair, UpaConfig};
pub use channel::{IrsPanel, PathGain, PathKind, SceneGeometry, Target};
pub use error::{Error, Result};
pub use num_complex::Complex64;

/// Dense complex column vector.
pub type ComplexVector = nalgebra::DVector<Complex64>;
/// Dense complex matrix.
pub type ComplexMatrix = nalgebra::DMatrix<Complex64>;
