//! Success-filtered distillation of risky PPO policies into diffusion
//! policies, on low-dimensional surrogate assistive tasks.
//!
//! The pipeline: train a PPO baseline for a fixed (deliberately short)
//! budget, roll it out, keep only the successful episodes, and fit a DDPM
//! over short action sequences conditioned on recent observations. The
//! distilled policy is deployed with receding-horizon execution.

pub mod diffusion;
pub mod envs;
pub mod error;
mod jsonio;
pub mod nn;
pub mod pipeline;
pub mod ppo;
pub mod trajstore;
pub mod seeds;

pub use error::{Error, Result};
