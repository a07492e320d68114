//! Offline planning for persistent fused GPU kernels.
//!
//! The pipeline: an [`ir::OperatorGraph`] is lowered into a micro-op trace,
//! dependencies are recovered into a [`dag::DepGraph`], a [`plan::PlanCandidate`]
//! binds ops to warp roles and shared-memory pages, [`sim`] replays the plan
//! on a cycle model, and [`search`] explores the plan space.

pub mod cli;
pub mod dag;
pub mod error;
pub mod hw;
pub mod ir;
pub mod passes;
pub mod plan;
pub mod search;
pub mod sim;
pub mod trace;

pub use error::{Error, ErrorClass, Result};
