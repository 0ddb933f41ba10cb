//! Learning-guided motion planning for planar n-link arms.
//!
//! The crate covers the full algorithmic pipeline and is `no_std` (with
//! `alloc`) so it can be embedded without an operating system:
//!
//! - [`world`]: arm kinematics, obstacle geometry and signed distances.
//! - [`keyconfig`]: key-configuration selection and the binary environment
//!   fingerprint used to condition the generative model.
//! - [`planners`]: bidirectional RRT, shortcutting and horizon resampling.
//! - [`trajopt`]: hinge collision and smoothness costs, analytic gradients and
//!   a fixed-iteration descent optimizer.
//! - [`diffusion`]: noise schedules, v-prediction algebra, DDIM sampling with
//!   endpoint constraints and cost guidance.
//! - [`denoiser`]: the AdaLN transformer denoiser with hand-written backward.
//! - [`training`]: the combined training objective and loop.
//! - [`dataset`]: procedural problems and ground-truth trajectories.
//! - [`metrics`]: success, collision rate and penetration depth.
//!
//! File formats, the command-line tool and the benchmark harness live in the
//! `kcplan` companion crate.
#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod dataset;
pub mod denoiser;
pub mod diffusion;
mod error;
pub mod keyconfig;
pub mod math;
pub mod metrics;
pub mod planners;
pub mod seed;
pub mod training;
pub mod trajopt;
pub mod world;

pub use error::{Error, Result};
pub use world::{ArmModel, Configuration, Environment, Obstacle, Trajectory, Vec2};
