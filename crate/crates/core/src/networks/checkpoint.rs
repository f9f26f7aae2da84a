//! Checkpoint directories: `generator.safetensors`, optionally
//! `discriminator.safetensors`, and a `manifest.json` sidecar carrying the
//! configuration, its hash, the seed, progress counters and parameter counts.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor};
use candle_nn::VarMap;
use serde::{Deserialize, Serialize};

use super::layers::{snapshot, var_builder_from};
use super::{parameter_count, DiscriminatorConfig, Generator, GeneratorConfig};
use crate::{util, Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const GENERATOR_FILE: &str = "generator.safetensors";
pub const DISCRIMINATOR_FILE: &str = "discriminator.safetensors";
const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub generator_config: GeneratorConfig,
    pub generator_config_hash: String,
    pub generator_parameter_count: usize,
    #[serde(default)]
    pub discriminator_config: Option<DiscriminatorConfig>,
    #[serde(default)]
    pub discriminator_config_hash: Option<String>,
    #[serde(default)]
    pub discriminator_parameter_count: Option<usize>,
    /// Instance norms carry learned scale/shift.
    pub norm_affine: bool,
    pub seed: u64,
    pub epoch: u64,
    pub step: u64,
    #[serde(default)]
    pub mode: Option<String>,
}

impl CheckpointManifest {
    pub fn for_generator(config: &GeneratorConfig, seed: u64) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            generator_config: config.clone(),
            generator_config_hash: config.hash(),
            generator_parameter_count: config.parameter_count(),
            discriminator_config: None,
            discriminator_config_hash: None,
            discriminator_parameter_count: None,
            norm_affine: config.affine_norm,
            seed,
            epoch: 0,
            step: 0,
            mode: None,
        }
    }

    pub fn with_discriminator(mut self, config: &DiscriminatorConfig) -> Self {
        self.discriminator_config_hash = Some(config.hash());
        self.discriminator_parameter_count = Some(config.parameter_count());
        self.discriminator_config = Some(config.clone());
        self
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        if !path.is_file() {
            return Err(Error::Checkpoint(format!("no {MANIFEST_FILE} in {}", dir.display())));
        }
        util::read_json(&path)
    }
}

/// Tensors copied out of live var maps, ready to be written without holding
/// on to training state.
#[derive(Debug)]
pub struct CheckpointSnapshot {
    pub dir: PathBuf,
    pub manifest: CheckpointManifest,
    pub generator: HashMap<String, Tensor>,
    pub discriminator: Option<HashMap<String, Tensor>>,
}

impl CheckpointSnapshot {
    pub fn capture(
        dir: impl Into<PathBuf>,
        manifest: CheckpointManifest,
        generator: &VarMap,
        discriminator: Option<&VarMap>,
    ) -> Result<Self> {
        Ok(Self {
            dir: dir.into(),
            manifest,
            generator: snapshot(generator)?,
            discriminator: discriminator.map(snapshot).transpose()?,
        })
    }

    pub fn write(&self) -> Result<()> {
        util::create_dir_all(&self.dir)?;
        candle_core::safetensors::save(&self.generator, self.dir.join(GENERATOR_FILE))?;
        if let Some(d) = &self.discriminator {
            candle_core::safetensors::save(d, self.dir.join(DISCRIMINATOR_FILE))?;
        }
        util::write_json(&self.dir.join(MANIFEST_FILE), &self.manifest)
    }
}

/// Writes a checkpoint for a generator (and optionally its discriminator).
pub fn save(
    dir: &Path,
    manifest: CheckpointManifest,
    generator: &VarMap,
    discriminator: Option<&VarMap>,
) -> Result<()> {
    CheckpointSnapshot::capture(dir, manifest, generator, discriminator)?.write()
}

/// An inference-only generator restored from a checkpoint directory.
#[derive(Clone, Debug)]
pub struct GeneratorCheckpoint {
    pub manifest: CheckpointManifest,
    pub generator: Generator,
    pub dir: PathBuf,
}

impl GeneratorCheckpoint {
    /// Loads the generator, refusing checkpoints whose recorded configuration
    /// hash differs from what this code computes, or from `expected`.
    pub fn load(dir: &Path, expected: &GeneratorConfig) -> Result<Self> {
        let manifest = CheckpointManifest::read(dir)?;
        let recomputed = manifest.generator_config.hash();
        if recomputed != manifest.generator_config_hash {
            return Err(Error::Checkpoint(format!(
                "config hash mismatch in {}: manifest records {}, this build computes {recomputed}; refusing to run",
                dir.display(),
                manifest.generator_config_hash
            )));
        }
        if manifest.generator_config_hash != expected.hash() {
            return Err(Error::Checkpoint(format!(
                "checkpoint {} was trained with a different generator configuration ({:?})",
                dir.display(),
                manifest.generator_config
            )));
        }
        let path = dir.join(GENERATOR_FILE);
        if !path.is_file() {
            return Err(Error::Checkpoint(format!("missing {}", path.display())));
        }
        let tensors = candle_core::safetensors::load(&path, &Device::Cpu)?;
        let count: usize = tensors.values().map(Tensor::elem_count).sum();
        if count != manifest.generator_parameter_count || count != expected.parameter_count() {
            return Err(Error::Checkpoint(format!(
                "parameter count {count} does not match manifest ({}) / configuration ({})",
                manifest.generator_parameter_count,
                expected.parameter_count()
            )));
        }
        let generator = Generator::load(expected, var_builder_from(tensors))?;
        Ok(Self {
            manifest,
            generator,
            dir: dir.to_path_buf(),
        })
    }
}

/// Writes a freshly initialised generator checkpoint.
pub fn write_initial_generator(dir: &Path, config: &GeneratorConfig, seed: u64) -> Result<CheckpointManifest> {
    let (varmap, _) = super::fresh_generator(config, seed)?;
    let manifest = CheckpointManifest::for_generator(config, seed);
    debug_assert_eq!(parameter_count(&varmap), config.parameter_count());
    save(dir, manifest.clone(), &varmap, None)?;
    Ok(manifest)
}
