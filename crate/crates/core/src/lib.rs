//! Tightly coupled radar and legged-robot odometry.

pub mod estimator;
pub mod geom;
pub mod io_dataset;
pub mod leg_factor;
pub mod leg_kin;
pub mod metrics;
pub mod radar_ego;
pub mod radar_factor;
pub mod state;
