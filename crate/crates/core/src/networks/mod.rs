//! Generator and discriminator definitions, seeded initialisation and
//! checkpoint persistence.

pub mod checkpoint;
pub mod discriminator;
pub mod generator;
pub mod layers;

use std::hash::Hasher;

use candle_core::{DType, Device, Tensor};
use candle_nn::{VarBuilder, VarMap};
use serde::{Deserialize, Serialize};

pub use checkpoint::{CheckpointManifest, GeneratorCheckpoint};
pub use discriminator::{Discriminator, DiscriminatorConfig};
pub use generator::{Generator, GeneratorConfig, GeneratorTrace};

use crate::{util, Result};

/// Standard deviation of the zero-mean Gaussian used for convolution kernels.
pub const INIT_STD: f32 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerKind {
    Conv,
    ConvTranspose,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerInfo {
    pub name: String,
    pub kind: LayerKind,
    pub normalized: bool,
}

impl LayerInfo {
    fn new(name: &str, kind: LayerKind, normalized: bool) -> Self {
        Self {
            name: name.to_string(),
            kind,
            normalized,
        }
    }
}

/// Overwrites every variable in `varmap` deterministically from `seed`:
/// convolution kernels ~ N(0, 0.02), norm scales = 1, biases and shifts = 0.
/// Variables are visited in name order so the result does not depend on
/// construction order.
pub fn init_weights(varmap: &VarMap, seed: u64) -> Result<()> {
    let data = varmap.data().lock().expect("var map lock poisoned");
    let mut names: Vec<&String> = data.keys().collect();
    names.sort();
    let mut rng = util::rng(seed, 0);
    for name in names {
        let var = &data[name];
        let shape = var.as_tensor().dims().to_vec();
        let n: usize = shape.iter().product();
        let values = if shape.len() == 4 {
            util::normal_vec(&mut rng, n, 0.0, INIT_STD)
        } else if is_norm_scale(name) {
            vec![1.0; n]
        } else {
            vec![0.0; n]
        };
        var.set(&Tensor::from_vec(values, shape, &Device::Cpu)?)?;
    }
    Ok(())
}

fn is_norm_scale(name: &str) -> bool {
    name.rsplit_once('.')
        .map(|(layer, leaf)| leaf == "weight" && layer.rsplit('.').next().is_some_and(|l| l.starts_with("norm")))
        .unwrap_or(false)
}

pub fn parameter_count(varmap: &VarMap) -> usize {
    varmap.all_vars().iter().map(|v| v.as_tensor().elem_count()).sum()
}

/// Fast content fingerprint over all parameters (names and exact bits),
/// used to assert which network an optimiser step touched.
pub fn parameter_fingerprint(varmap: &VarMap) -> Result<u64> {
    let data = varmap.data().lock().expect("var map lock poisoned");
    let mut names: Vec<&String> = data.keys().collect();
    names.sort();
    let mut hasher = std::collections::hash_map::DefaultHasher::new();
    for name in names {
        hasher.write(name.as_bytes());
        let values = data[name].as_tensor().flatten_all()?.to_vec1::<f32>()?;
        for v in values {
            hasher.write_u32(v.to_bits());
        }
    }
    Ok(hasher.finish())
}

/// A freshly initialised generator whose parameters live in the returned var map.
pub fn fresh_generator(config: &GeneratorConfig, seed: u64) -> Result<(VarMap, Generator)> {
    let varmap = VarMap::new();
    let vb = VarBuilder::from_varmap(&varmap, DType::F32, &Device::Cpu);
    let net = Generator::load(config, vb)?;
    init_weights(&varmap, seed)?;
    Ok((varmap, net))
}

/// A generator over detached copies of `varmap`'s tensors. Its forward pass
/// records no autograd graph, so intermediates are freed as soon as they are used.
pub fn frozen_generator(config: &GeneratorConfig, varmap: &VarMap) -> Result<Generator> {
    Generator::load(config, layers::var_builder_from(layers::snapshot(varmap)?))
}

pub fn fresh_discriminator(config: &DiscriminatorConfig, seed: u64) -> Result<(VarMap, Discriminator)> {
    let varmap = VarMap::new();
    let vb = VarBuilder::from_varmap(&varmap, DType::F32, &Device::Cpu);
    let net = Discriminator::load(config, vb)?;
    init_weights(&varmap, seed)?;
    Ok((varmap, net))
}

#[cfg(test)]
mod tests;
