//! Motion-tracking policy training on a planar biped: adaptive clip sampling,
//! mixture-of-experts policies, PPO teacher training, DAgger distillation,
//! dataset curation and evaluation.

pub mod config;
pub mod curation;
pub mod eval;
pub mod error;
pub mod motion;
pub mod nn;
pub mod sampler;
pub mod sim;
pub mod skeleton;
pub mod train;

pub use error::{Error, Result};
