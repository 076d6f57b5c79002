//! Delta-tuning toolkit for toy transformer backbones.
//!
//! Attach, train, serialize and hot-swap parameter-efficient delta modules
//! (LoRA, bottleneck adapters, bias tuning, prefix tuning) onto module trees
//! without touching the backbone construction code. Modules are addressed by
//! name, hidden states are re-routed by wrapping forward behaviors at run
//! time, and delta parameters live in ordinary checkpoint snapshots.

pub mod addressing;
pub mod backbones;
pub mod deltas;
pub mod error;
pub mod lifecycle;
pub mod modtree;
pub mod rng;
pub mod routing;
pub mod tensor;
pub mod vis;

pub use error::{Error, Result};
pub use tensor::Tensor;
