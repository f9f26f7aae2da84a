//! Adversarial training with hybrid real-patch supervision.

pub mod batch;
pub mod config;
pub mod losses;
pub mod trainer;

pub use batch::{form_hybrid_batch, HybridBatch, MatchRecord};
pub use config::{TrainingConfig, TrainingMode};
pub use losses::{loss_discriminator, loss_generator, GeneratorLoss};
pub use trainer::{read_log, RunManifest, RunSummary, StepRecord, Trainer};
