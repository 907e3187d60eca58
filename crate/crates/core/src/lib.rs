//! Program-memory LoRA for continual learning on a single adapted linear
//! layer: routed composition of adapter slots, EMA consolidation, and the
//! tooling to check it.

pub mod error;
pub mod harness;
pub mod numerics;
pub mod program_memory;
pub mod routing;
pub mod theory;
pub mod training;

pub use error::{Error, Result};
