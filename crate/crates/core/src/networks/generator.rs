//! U-Net style generator: three strided encoder stages, a residual bottleneck,
//! and a mirrored transposed-convolution decoder with concatenated skips.

use candle_core::{Module, Tensor};
use candle_nn::VarBuilder;
use serde::{Deserialize, Serialize};

use super::layers::{Conv2d, ConvTranspose2d, InstanceNorm};
use super::{LayerInfo, LayerKind};
use crate::{util, Error, Result};

const ARCHITECTURE: &str = "unet-resbottleneck-v1";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub encoder_channels: [usize; 3],
    pub bottleneck_blocks: usize,
    /// Learned per-channel scale and shift on every instance norm.
    pub affine_norm: bool,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            out_channels: 3,
            encoder_channels: [64, 128, 256],
            bottleneck_blocks: 4,
            affine_norm: true,
        }
    }
}

impl GeneratorConfig {
    /// Output widths of the two intermediate decoder stages, mirroring the encoder.
    pub fn decoder_channels(&self) -> [usize; 2] {
        [self.encoder_channels[1], self.encoder_channels[0]]
    }

    /// Total downsampling factor; inputs must be divisible by it.
    pub const fn spatial_divisor() -> usize {
        8
    }

    pub fn parameter_count(&self) -> usize {
        let [c1, c2, c3] = self.encoder_channels;
        let [d3, d2] = self.decoder_channels();
        let norm = if self.affine_norm { 2 } else { 0 };
        let k4 = 16;
        let enc = (self.in_channels * c1 * k4 + c1) + (c1 * c2 * k4 + norm * c2) + (c2 * c3 * k4 + norm * c3);
        let res = self.bottleneck_blocks * 2 * (c3 * c3 * 9 + norm * c3);
        let dec = (c3 * d3 * k4 + norm * d3) + ((d3 + c2) * d2 * k4 + norm * d2);
        let head = (d2 + c1) * self.out_channels * k4 + self.out_channels;
        enc + res + dec + head
    }

    /// Digest identifying this configuration under the current architecture code.
    pub fn hash(&self) -> String {
        let json = serde_json::json!({ "architecture": ARCHITECTURE, "config": self });
        util::sha256_hex(json.to_string().as_bytes())
    }
}

#[derive(Clone, Debug)]
struct ResBlock {
    conv1: Conv2d,
    norm1: InstanceNorm,
    conv2: Conv2d,
    norm2: InstanceNorm,
}

impl ResBlock {
    fn load(vb: VarBuilder, channels: usize, affine: bool) -> Result<Self> {
        Ok(Self {
            conv1: Conv2d::load(vb.pp("conv1"), channels, channels, (3, 3), 1, (1, 1), false)?,
            norm1: InstanceNorm::load(vb.pp("norm1"), channels, affine)?,
            conv2: Conv2d::load(vb.pp("conv2"), channels, channels, (3, 3), 1, (1, 1), false)?,
            norm2: InstanceNorm::load(vb.pp("norm2"), channels, affine)?,
        })
    }
}

impl Module for ResBlock {
    fn forward(&self, z: &Tensor) -> candle_core::Result<Tensor> {
        let h = z.apply(&self.conv1)?.apply(&self.norm1)?.relu()?;
        let h = h.apply(&self.conv2)?.apply(&self.norm2)?;
        z + h
    }
}

/// Every intermediate activation of one generator pass.
#[derive(Clone, Debug)]
pub struct GeneratorTrace {
    pub e1: Tensor,
    pub e2: Tensor,
    pub e3: Tensor,
    pub m: Tensor,
    pub d3: Tensor,
    pub d2: Tensor,
    pub output: Tensor,
}

#[derive(Clone, Debug)]
pub struct Generator {
    config: GeneratorConfig,
    enc1: Conv2d,
    enc2: (Conv2d, InstanceNorm),
    enc3: (Conv2d, InstanceNorm),
    bottleneck: Vec<ResBlock>,
    dec3: (ConvTranspose2d, InstanceNorm),
    dec2: (ConvTranspose2d, InstanceNorm),
    head: ConvTranspose2d,
}

impl Generator {
    pub fn load(config: &GeneratorConfig, vb: VarBuilder) -> Result<Self> {
        let [c1, c2, c3] = config.encoder_channels;
        let [d3, d2] = config.decoder_channels();
        let affine = config.affine_norm;
        let enc = |name: &str, cin, cout| -> Result<(Conv2d, InstanceNorm)> {
            Ok((
                Conv2d::load(vb.pp(name).pp("conv"), cin, cout, (4, 4), 2, (1, 1), false)?,
                InstanceNorm::load(vb.pp(name).pp("norm"), cout, affine)?,
            ))
        };
        let dec = |name: &str, cin, cout| -> Result<(ConvTranspose2d, InstanceNorm)> {
            Ok((
                ConvTranspose2d::load(vb.pp(name).pp("conv"), cin, cout, false)?,
                InstanceNorm::load(vb.pp(name).pp("norm"), cout, affine)?,
            ))
        };
        let bottleneck = (0..config.bottleneck_blocks)
            .map(|i| ResBlock::load(vb.pp(format!("res{i}")), c3, affine))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config: config.clone(),
            enc1: Conv2d::load(vb.pp("enc1").pp("conv"), config.in_channels, c1, (4, 4), 2, (1, 1), true)?,
            enc2: enc("enc2", c1, c2)?,
            enc3: enc("enc3", c2, c3)?,
            bottleneck,
            dec3: dec("dec3", c3, d3)?,
            dec2: dec("dec2", d3 + c2, d2)?,
            head: ConvTranspose2d::load(vb.pp("head").pp("conv"), d2 + c1, config.out_channels, true)?,
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn check_input(&self, x: &Tensor) -> Result<()> {
        let dims = x.dims();
        if dims.len() != 4 || dims[1] != self.config.in_channels {
            return Err(Error::Shape(format!(
                "generator expects B×{}×H×W input, got {dims:?}",
                self.config.in_channels
            )));
        }
        self.check_resolution(dims[2], dims[3])
    }

    /// Spatial half of [`Self::check_input`], for callers without a tensor.
    pub fn check_resolution(&self, h: usize, w: usize) -> Result<()> {
        let div = GeneratorConfig::spatial_divisor();
        if h == 0 || w == 0 || h % div != 0 || w % div != 0 {
            return Err(Error::Shape(format!(
                "generator input {h}×{w} must be non-empty and divisible by {div}"
            )));
        }
        Ok(())
    }

    pub fn encode(&self, x: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
        self.check_input(x)?;
        let e1 = x.apply(&self.enc1)?.relu()?;
        let e2 = e1.apply(&self.enc2.0)?.apply(&self.enc2.1)?.relu()?;
        let e3 = e2.apply(&self.enc3.0)?.apply(&self.enc3.1)?.relu()?;
        Ok((e1, e2, e3))
    }

    pub fn bottleneck(&self, e3: &Tensor) -> Result<Tensor> {
        let mut m = e3.clone();
        for block in &self.bottleneck {
            m = m.apply(block)?;
        }
        Ok(m)
    }

    /// Decoder given the bottleneck output and the two skip tensors.
    /// Returns `(d3, d2, output)`.
    pub fn decode(&self, m: &Tensor, e2: &Tensor, e1: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
        let d3 = m.apply(&self.dec3.0)?.apply(&self.dec3.1)?.relu()?;
        let d2 = Tensor::cat(&[&d3, e2], 1)?
            .apply(&self.dec2.0)?
            .apply(&self.dec2.1)?
            .relu()?;
        let out = Tensor::cat(&[&d2, e1], 1)?.apply(&self.head)?.tanh()?;
        Ok((d3, d2, out))
    }

    pub fn forward_traced(&self, x: &Tensor) -> Result<GeneratorTrace> {
        let (e1, e2, e3) = self.encode(x)?;
        let m = self.bottleneck(&e3)?;
        let (d3, d2, output) = self.decode(&m, &e2, &e1)?;
        Ok(GeneratorTrace {
            e1,
            e2,
            e3,
            m,
            d3,
            d2,
            output,
        })
    }

    /// Maps a B×3×H×W batch in [-1, 1] to an enhanced batch of the same shape.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (e1, e2, e3) = self.encode(x)?;
        let m = self.bottleneck(&e3)?;
        Ok(self.decode(&m, &e2, &e1)?.2)
    }

    pub fn layers(&self) -> Vec<LayerInfo> {
        let mut layers = vec![
            LayerInfo::new("enc1", LayerKind::Conv, false),
            LayerInfo::new("enc2", LayerKind::Conv, true),
            LayerInfo::new("enc3", LayerKind::Conv, true),
        ];
        for i in 0..self.bottleneck.len() {
            layers.push(LayerInfo::new(&format!("res{i}.conv1"), LayerKind::Conv, true));
            layers.push(LayerInfo::new(&format!("res{i}.conv2"), LayerKind::Conv, true));
        }
        layers.push(LayerInfo::new("dec3", LayerKind::ConvTranspose, true));
        layers.push(LayerInfo::new("dec2", LayerKind::ConvTranspose, true));
        layers.push(LayerInfo::new("head", LayerKind::ConvTranspose, false));
        layers
    }
}
