//! Estimation and control library for a 1:5-scale autonomous rally car:
//! vehicle dynamics models, tire curves, state/parameter estimation, a
//! GPS/IMU batch smoother, sampling-based model predictive control, and
//! the supporting simulation and logging plumbing.

pub mod chassis;
pub mod config;
pub mod error;
pub mod linalg;
pub mod logio;
pub mod moi;
pub mod smoother;
pub mod mppi;
pub mod tire;
pub mod track;
pub mod ukf;
pub mod vehicle;

pub use error::{RallyError, Result};
