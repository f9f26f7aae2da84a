//! PatchGAN discriminator producing a single-channel map of local realism scores.

use candle_core::Tensor;
use candle_nn::VarBuilder;
use serde::{Deserialize, Serialize};

use super::layers::{leaky_relu, Conv2d, InstanceNorm};
use super::{LayerInfo, LayerKind};
use crate::{util, Error, Result};

const ARCHITECTURE: &str = "patchgan-3x-v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    pub in_channels: usize,
    pub channels: [usize; 3],
    pub negative_slope: f64,
    pub affine_norm: bool,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            channels: [64, 128, 256],
            negative_slope: 0.2,
            affine_norm: true,
        }
    }
}

impl DiscriminatorConfig {
    pub const MIN_INPUT: usize = 16;

    pub fn parameter_count(&self) -> usize {
        let [c1, c2, c3] = self.channels;
        let norm = if self.affine_norm { 2 } else { 0 };
        (self.in_channels * c1 * 16 + c1) + (c1 * c2 * 16 + norm * c2) + (c2 * c3 * 16 + norm * c3) + (c3 * 16 + 1)
    }

    /// Spatial size of the realism map for an `n`-pixel input side.
    pub fn output_side(n: usize) -> usize {
        let down = |n: usize| (n + 2 - 4) / 2 + 1;
        down(down(down(n))) + 2 - 4 + 1
    }

    pub fn hash(&self) -> String {
        let json = serde_json::json!({ "architecture": ARCHITECTURE, "config": self });
        util::sha256_hex(json.to_string().as_bytes())
    }
}

#[derive(Clone, Debug)]
pub struct Discriminator {
    config: DiscriminatorConfig,
    h1: Conv2d,
    h2: (Conv2d, InstanceNorm),
    h3: (Conv2d, InstanceNorm),
    head: Conv2d,
}

impl Discriminator {
    pub fn load(config: &DiscriminatorConfig, vb: VarBuilder) -> Result<Self> {
        let [c1, c2, c3] = config.channels;
        let affine = config.affine_norm;
        let normed = |name: &str, cin, cout| -> Result<(Conv2d, InstanceNorm)> {
            Ok((
                Conv2d::load(vb.pp(name).pp("conv"), cin, cout, (4, 4), 2, (1, 1), false)?,
                InstanceNorm::load(vb.pp(name).pp("norm"), cout, affine)?,
            ))
        };
        Ok(Self {
            config: config.clone(),
            h1: Conv2d::load(vb.pp("h1").pp("conv"), config.in_channels, c1, (4, 4), 2, (1, 1), true)?,
            h2: normed("h2", c1, c2)?,
            h3: normed("h3", c2, c3)?,
            head: Conv2d::load(vb.pp("head").pp("conv"), c3, 1, (4, 4), 1, (1, 1), true)?,
        })
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.config
    }

    /// Scores a B×3×h×w batch; returns B×1×h′×w′ unbounded realism scores.
    pub fn forward(&self, p: &Tensor) -> Result<Tensor> {
        let dims = p.dims();
        if dims.len() != 4 || dims[1] != self.config.in_channels {
            return Err(Error::Shape(format!(
                "discriminator expects B×{}×h×w input, got {dims:?}",
                self.config.in_channels
            )));
        }
        let min = DiscriminatorConfig::MIN_INPUT;
        if dims[2] < min || dims[3] < min {
            return Err(Error::Shape(format!(
                "discriminator input {}×{} is smaller than {min}×{min}",
                dims[2], dims[3]
            )));
        }
        let slope = self.config.negative_slope;
        let h1 = leaky_relu(&p.apply(&self.h1)?, slope)?;
        let h2 = leaky_relu(&h1.apply(&self.h2.0)?.apply(&self.h2.1)?, slope)?;
        let h3 = leaky_relu(&h2.apply(&self.h3.0)?.apply(&self.h3.1)?, slope)?;
        Ok(h3.apply(&self.head)?)
    }

    pub fn layers(&self) -> Vec<LayerInfo> {
        vec![
            LayerInfo::new("h1", LayerKind::Conv, false),
            LayerInfo::new("h2", LayerKind::Conv, true),
            LayerInfo::new("h3", LayerKind::Conv, true),
            LayerInfo::new("head", LayerKind::Conv, false),
        ]
    }
}
