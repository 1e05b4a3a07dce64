//! Differential contrastive depth synthesis: data, models, losses, training,
//! downstream tasks and metrics.

pub mod depth;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod scene;
pub mod seed;
pub mod tasks;
pub mod train;
pub mod util;

pub use error::{DclError, Result};
