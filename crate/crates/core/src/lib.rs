//! Numerical homogenization by localized orthogonal decomposition.
//!
//! The crate computes patch-localized element correctors for rough diffusion
//! coefficients on nested P1 triangulations of the unit square, compresses
//! them into a quasi-local kernel and a piecewise-constant effective tensor,
//! evaluates the homogenization indicator, and measures worst-case L2 errors
//! of the resulting coarse solvers.

pub mod geometry;
pub mod sparse;
pub mod fem;
pub mod corrector;
pub mod effective;
pub mod coefficients;
pub mod bench;
pub mod experiments;
