//! Configuration, training, evaluation, stability runs and sweeps.

pub mod checkpoint;
pub mod config;
pub mod sweep;
pub mod train;

pub use checkpoint::Checkpoint;
pub use config::{Profile, RunConfig};
pub use sweep::{sweep, SweepPreset, SweepTable};
pub use train::{evaluate_checkpoint, evaluate_model, stability, train, train_on, RunReport, StabilityReport};
