//! Command-line surface and training harness for the delta-tuning toolkit:
//! migration-style training on synthetic tasks, parameter counting, tree
//! visualization and multi-task serving with hot-swapped delta checkpoints.

pub mod count;
pub mod multitask;
pub mod spec;
pub mod tasks;
pub mod train;
pub mod viscmd;
