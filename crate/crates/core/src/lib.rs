//! Rigid body localization (RBL) from anchor-to-sensor range measurements.
//!
//! A rigid body carries `N` sensors at known body-frame coordinates (the
//! conformation). `M` anchors at known global positions measure noisy ranges
//! to every sensor. The crate estimates the body's rotation angles and
//! translation with a double Gaussian belief propagation (GaBP) estimator
//! built on a small-angle linearization of the rigid transform:
//!
//! 1. [`position`] pre-estimates each sensor position and squared norm.
//! 2. [`linsys`] assembles the stacked linear system in the rotation angles
//!    and the translation.
//! 3. [`gabp`] runs a bivariate GaBP over both parameter blocks, cancels the
//!    estimated translation and refines the angles with a second GaBP.
//!
//! [`baseline`] provides an LS + Procrustes comparison method, and
//! [`harness`] drives seeded Monte-Carlo sweeps and writes RMSE reports.

pub mod baseline;
pub mod error;
pub mod gabp;
pub mod geometry;
pub mod harness;
pub mod linsys;
pub mod position;
pub mod scenario;

pub use error::{RblError, Result};

/// Lower bound applied to every variance used as a divisor.
pub const VARIANCE_FLOOR: f64 = 1e-12;
