//! Numerical tools for planar Filippov systems with a pseudo saddle-focus:
//! region classification, sliding dynamics, piecewise-smooth integration,
//! first-return maps and their symbolic coding.

pub mod error;
pub mod geometry;
pub mod integrator;
pub mod models;
pub mod poly;
pub mod real;
pub mod shilnikov;
pub mod sliding;
pub mod symbolic;

pub use error::{Error, Result};
pub use geometry::{classify, Dynamics, PiecewiseSystem, RegionClass, RegionTag, Tolerances, Which};
pub use models::{build_model, ShilnikovParams, SystemSpec};
pub use real::{Dd, Real, Vec3};
