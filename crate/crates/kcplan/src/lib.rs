//! File formats, dataset tooling, benchmark harness and command-line front end
//! for the `kcplan-core` planner.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod eval;
pub mod io;

pub use kcplan_core as core;
