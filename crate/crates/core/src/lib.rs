//! Latin hypercube sampling for Z-estimation: keyed random streams, LHS and
//! i.i.d. designs, the main-effect decomposition of vector fields, a damped
//! Newton Z-estimator with sandwich variances, GLM estimating equations and
//! a replication harness.

pub mod anova;
pub mod design;
pub mod error;
pub mod glm;
pub mod harness;
pub mod io;
pub mod linalg;
pub mod rngperm;
pub mod stats;
pub mod zsolve;

pub use error::{Error, Result};
