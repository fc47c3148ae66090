//! Single depth-map super-resolution trained with cross-task knowledge
//! transfer from an auxiliary RGB depth-estimation network.
//!
//! Training couples three networks: the super-resolution network (the only
//! one used at inference), a depth-estimation network fed with colour, and a
//! structure-prediction network. Each epoch the network with the lower
//! recovery error acts as teacher and the other is updated with output-space
//! and affinity-space distillation terms plus a structure regularizer.

pub mod cli;
pub mod data;
pub mod distill;
pub mod error;
pub mod eval;
pub mod losses;
pub mod networks;
pub mod supervision;
pub mod train;

pub use error::{Error, Result};

#[global_allocator]
static ALLOCATOR: mimalloc::MiMalloc = mimalloc::MiMalloc;
