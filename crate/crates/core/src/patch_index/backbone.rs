//! Frozen VGG-16 feature extractor truncated at `relu4_3`, the activation after
//! the third convolution of the fourth block.
//!
//! Weights use the torchvision `features.N.{weight,bias}` naming, stored as
//! safetensors. A seeded random backbone is available for desk-scale runs and
//! tests where the ImageNet weights are not at hand; its identifier records
//! that it is random so indices built with it are never mixed with real ones.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use candle_core::{Device, Module, Tensor};

use super::patches::Patch;
use crate::networks::layers::{var_builder_from, Conv2d};
use crate::{util, Error, Result};

pub const LAYER_NAME: &str = "features.22/relu4_3";
pub const ASSET_NAME: &str = "VGG-16 ImageNet weights (torchvision `features.*` layout, safetensors)";

/// torchvision `features` indices of the ten convolutions up to conv4_3,
/// with their channel widths.
const CONVS: [(usize, usize, usize); 10] = [
    (0, 3, 64),
    (2, 64, 64),
    (5, 64, 128),
    (7, 128, 128),
    (10, 128, 256),
    (12, 256, 256),
    (14, 256, 256),
    (17, 256, 512),
    (19, 512, 512),
    (21, 512, 512),
];
/// Positions in `CONVS` followed by a 2×2 max pool.
const POOL_AFTER: [usize; 3] = [1, 3, 6];

const RANDOM_PREFIX: &str = "vgg16-random:seed=";

const IMAGENET_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
const IMAGENET_STD: [f32; 3] = [0.229, 0.224, 0.225];

/// A feature vector produced by the backbone.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedding {
    pub vector: Vec<f32>,
    pub norm: Option<f32>,
}

impl Embedding {
    pub fn new(vector: Vec<f32>) -> Result<Self> {
        if let Some(i) = vector.iter().position(|v| !v.is_finite()) {
            return Err(Error::Index(format!("embedding has non-finite value at {i}")));
        }
        let norm = vector.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt() as f32;
        Ok(Self {
            vector,
            norm: Some(norm),
        })
    }

    pub fn dim(&self) -> usize {
        self.vector.len()
    }
}

#[derive(Clone, Debug)]
pub struct Vgg16Features {
    convs: Vec<Conv2d>,
    id: String,
}

impl Vgg16Features {
    /// Loads ImageNet weights; a missing file is reported as a setup error naming the asset.
    pub fn from_safetensors(path: &Path) -> Result<Self> {
        if !path.is_file() {
            return Err(Error::MissingAsset {
                asset: ASSET_NAME.into(),
                path: path.to_path_buf(),
            });
        }
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let digest = util::sha256_hex(&bytes);
        let tensors = candle_core::safetensors::load_buffer(&bytes, &Device::Cpu)?;
        let mut wanted = HashMap::new();
        for (idx, _, _) in CONVS {
            for leaf in ["weight", "bias"] {
                let key = format!("features.{idx}.{leaf}");
                let t = tensors.get(&key).ok_or_else(|| Error::MissingAsset {
                    asset: format!("{ASSET_NAME}: tensor `{key}`"),
                    path: path.to_path_buf(),
                })?;
                wanted.insert(key, t.to_dtype(candle_core::DType::F32)?);
            }
        }
        Self::from_tensors(wanted, format!("vgg16-imagenet:{}", &digest[..16]))
    }

    /// He-initialised backbone, deterministic in `seed`.
    pub fn random(seed: u64) -> Result<Self> {
        let mut rng = util::rng(seed, 0x5667_4731);
        let mut tensors = HashMap::new();
        for (idx, cin, cout) in CONVS {
            let std = (2.0 / (cin * 9) as f32).sqrt();
            let w = util::normal_vec(&mut rng, cout * cin * 9, 0.0, std);
            tensors.insert(
                format!("features.{idx}.weight"),
                Tensor::from_vec(w, (cout, cin, 3, 3), &Device::Cpu)?,
            );
            tensors.insert(format!("features.{idx}.bias"), Tensor::zeros(cout, candle_core::DType::F32, &Device::Cpu)?);
        }
        Self::from_tensors(tensors, format!("{RANDOM_PREFIX}{seed}"))
    }

    fn from_tensors(tensors: HashMap<String, Tensor>, id: String) -> Result<Self> {
        let vb = var_builder_from(tensors);
        let convs = CONVS
            .iter()
            .map(|&(idx, cin, cout)| Conv2d::load(vb.pp(format!("features.{idx}")), cin, cout, (3, 3), 1, (1, 1), true))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { convs, id })
    }

    /// The backbone an index was built with: the given weights file, or the
    /// seeded random backbone recorded in the index's metadata.
    pub fn for_index(backbone_id: &str, weights: Option<&Path>) -> Result<Self> {
        if let Some(path) = weights {
            return Self::from_safetensors(path);
        }
        match backbone_id.strip_prefix(RANDOM_PREFIX).map(str::parse::<u64>) {
            Some(Ok(seed)) => Self::random(seed),
            _ => Err(Error::MissingAsset {
                asset: format!("{ASSET_NAME} (index backbone `{backbone_id}`)"),
                path: Path::new("<not supplied>").to_path_buf(),
            }),
        }
    }

    /// Identifier recorded in index manifests: weights digest or random seed.
    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn layer_name(&self) -> &'static str {
        LAYER_NAME
    }

    /// Flattened `relu4_3` size for a `patch`×`patch` input: 512 channels at 1/8 resolution.
    pub fn embedding_dim(patch: usize) -> usize {
        let side = patch / 2 / 2 / 2;
        512 * side * side
    }

    /// Embeds an N×3×P×P batch of patches in [-1, 1]; returns N×d.
    pub fn embed_batch(&self, patches: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = patches.dims4()?;
        if c != 3 {
            return Err(Error::ChannelCount(c));
        }
        if h < 8 || w < 8 {
            return Err(Error::Shape(format!("patch {h}×{w} too small for the backbone")));
        }
        let dev = patches.device();
        let mean = Tensor::new(&IMAGENET_MEAN, dev)?.reshape((1, 3, 1, 1))?;
        let std = Tensor::new(&IMAGENET_STD, dev)?.reshape((1, 3, 1, 1))?;
        let mut x = patches
            .detach()
            .affine(0.5, 0.5)?
            .broadcast_sub(&mean)?
            .broadcast_div(&std)?;
        for (i, conv) in self.convs.iter().enumerate() {
            x = conv.forward(&x)?.relu()?;
            if POOL_AFTER.contains(&i) {
                x = x.max_pool2d(2)?;
            }
        }
        Ok(x.reshape((n, ()))?)
    }

    pub fn embed(&self, patch: &Patch) -> Result<Embedding> {
        let v = self.embed_batch(&patch.data.unsqueeze(0)?)?.squeeze(0)?.to_vec1::<f32>()?;
        Embedding::new(v)
    }
}
