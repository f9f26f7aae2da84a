//! Sim-to-real photorealism enhancement with a lightweight U-Net generator
//! trained against a PatchGAN discriminator on hybrid patch batches: positional
//! patches from a paired enhanced target plus nearest-neighbour real-world
//! patches retrieved from a perceptual-feature index.
//!
//! The crate is organised by pipeline phase:
//!
//! - [`datasets`]: image ingestion, normalisation and synthetic/enhanced pairing.
//! - [`patch_index`]: patch extraction, VGG-16 embeddings and exact L2 search.
//! - [`networks`]: generator, discriminator, initialisation and checkpoints.
//! - [`training`]: hybrid batch formation, least-squares losses and the loop.
//! - [`inference`]: feed-forward enhancement and the latency benchmark.
//! - [`evaluation`]: Kernel Inception Distance and matched-patch contact sheets.

pub mod datasets;
pub mod error;
pub mod evaluation;
pub mod fixtures;
pub mod inference;
pub mod networks;
pub mod patch_index;
pub mod training;
mod util;

pub use error::{Error, Result};
