//! InceptionV3 pool features (2048-d), torchvision layout and parameter names.
//!
//! Batch norms run in inference mode and are folded into a per-channel scale
//! and shift at load time.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use candle_core::{DType, Device, Module, Tensor};

use super::FeatureExtractor;
use crate::datasets::Resolution;
use crate::networks::layers::{var_builder_from, Conv2d};
use crate::{util, Error, Result};

pub const ASSET_NAME: &str = "InceptionV3 ImageNet weights (torchvision layout, safetensors)";
pub const FEATURE_DIM: usize = 2048;
pub const INPUT_SIDE: usize = 299;
const BN_EPS: f64 = 1e-3;

/// One conv + batch-norm + ReLU unit.
#[derive(Clone, Debug, PartialEq)]
struct ConvSpec {
    name: String,
    cin: usize,
    cout: usize,
    kernel: (usize, usize),
    stride: usize,
    padding: (usize, usize),
}

fn spec(name: impl Into<String>, cin: usize, cout: usize, kernel: (usize, usize), stride: usize, padding: (usize, usize)) -> ConvSpec {
    ConvSpec {
        name: name.into(),
        cin,
        cout,
        kernel,
        stride,
        padding,
    }
}

#[derive(Clone, Copy, Debug)]
enum Block {
    A { cin: usize, pool: usize },
    B { cin: usize },
    C { cin: usize, c7: usize },
    D { cin: usize },
    E { cin: usize },
}

const STEM: [(&str, usize, usize, usize, usize, usize); 5] = [
    ("Conv2d_1a_3x3", 3, 32, 3, 2, 0),
    ("Conv2d_2a_3x3", 32, 32, 3, 1, 0),
    ("Conv2d_2b_3x3", 32, 64, 3, 1, 1),
    ("Conv2d_3b_1x1", 64, 80, 1, 1, 0),
    ("Conv2d_4a_3x3", 80, 192, 3, 1, 0),
];

const MIXED: [(&str, Block); 11] = [
    ("Mixed_5b", Block::A { cin: 192, pool: 32 }),
    ("Mixed_5c", Block::A { cin: 256, pool: 64 }),
    ("Mixed_5d", Block::A { cin: 288, pool: 64 }),
    ("Mixed_6a", Block::B { cin: 288 }),
    ("Mixed_6b", Block::C { cin: 768, c7: 128 }),
    ("Mixed_6c", Block::C { cin: 768, c7: 160 }),
    ("Mixed_6d", Block::C { cin: 768, c7: 160 }),
    ("Mixed_6e", Block::C { cin: 768, c7: 192 }),
    ("Mixed_7a", Block::D { cin: 768 }),
    ("Mixed_7b", Block::E { cin: 1280 }),
    ("Mixed_7c", Block::E { cin: 2048 }),
];

fn block_specs(p: &str, block: Block) -> Vec<ConvSpec> {
    let n = |leaf: &str| format!("{p}.{leaf}");
    let (k1, k3, row7, col7, row3, col3) = ((1, 1), (3, 3), (1, 7), (7, 1), (1, 3), (3, 1));
    match block {
        Block::A { cin, pool } => vec![
            spec(n("branch1x1"), cin, 64, k1, 1, (0, 0)),
            spec(n("branch5x5_1"), cin, 48, k1, 1, (0, 0)),
            spec(n("branch5x5_2"), 48, 64, (5, 5), 1, (2, 2)),
            spec(n("branch3x3dbl_1"), cin, 64, k1, 1, (0, 0)),
            spec(n("branch3x3dbl_2"), 64, 96, k3, 1, (1, 1)),
            spec(n("branch3x3dbl_3"), 96, 96, k3, 1, (1, 1)),
            spec(n("branch_pool"), cin, pool, k1, 1, (0, 0)),
        ],
        Block::B { cin } => vec![
            spec(n("branch3x3"), cin, 384, k3, 2, (0, 0)),
            spec(n("branch3x3dbl_1"), cin, 64, k1, 1, (0, 0)),
            spec(n("branch3x3dbl_2"), 64, 96, k3, 1, (1, 1)),
            spec(n("branch3x3dbl_3"), 96, 96, k3, 2, (0, 0)),
        ],
        Block::C { cin, c7 } => vec![
            spec(n("branch1x1"), cin, 192, k1, 1, (0, 0)),
            spec(n("branch7x7_1"), cin, c7, k1, 1, (0, 0)),
            spec(n("branch7x7_2"), c7, c7, row7, 1, (0, 3)),
            spec(n("branch7x7_3"), c7, 192, col7, 1, (3, 0)),
            spec(n("branch7x7dbl_1"), cin, c7, k1, 1, (0, 0)),
            spec(n("branch7x7dbl_2"), c7, c7, col7, 1, (3, 0)),
            spec(n("branch7x7dbl_3"), c7, c7, row7, 1, (0, 3)),
            spec(n("branch7x7dbl_4"), c7, c7, col7, 1, (3, 0)),
            spec(n("branch7x7dbl_5"), c7, 192, row7, 1, (0, 3)),
            spec(n("branch_pool"), cin, 192, k1, 1, (0, 0)),
        ],
        Block::D { cin } => vec![
            spec(n("branch3x3_1"), cin, 192, k1, 1, (0, 0)),
            spec(n("branch3x3_2"), 192, 320, k3, 2, (0, 0)),
            spec(n("branch7x7x3_1"), cin, 192, k1, 1, (0, 0)),
            spec(n("branch7x7x3_2"), 192, 192, row7, 1, (0, 3)),
            spec(n("branch7x7x3_3"), 192, 192, col7, 1, (3, 0)),
            spec(n("branch7x7x3_4"), 192, 192, k3, 2, (0, 0)),
        ],
        Block::E { cin } => vec![
            spec(n("branch1x1"), cin, 320, k1, 1, (0, 0)),
            spec(n("branch3x3_1"), cin, 384, k1, 1, (0, 0)),
            spec(n("branch3x3_2a"), 384, 384, row3, 1, (0, 1)),
            spec(n("branch3x3_2b"), 384, 384, col3, 1, (1, 0)),
            spec(n("branch3x3dbl_1"), cin, 448, k1, 1, (0, 0)),
            spec(n("branch3x3dbl_2"), 448, 384, k3, 1, (1, 1)),
            spec(n("branch3x3dbl_3a"), 384, 384, row3, 1, (0, 1)),
            spec(n("branch3x3dbl_3b"), 384, 384, col3, 1, (1, 0)),
            spec(n("branch_pool"), cin, 192, k1, 1, (0, 0)),
        ],
    }
}

fn all_specs() -> Vec<ConvSpec> {
    let mut out: Vec<ConvSpec> = STEM
        .iter()
        .map(|&(name, cin, cout, k, s, p)| spec(name, cin, cout, (k, k), s, (p, p)))
        .collect();
    for (name, block) in MIXED {
        out.extend(block_specs(name, block));
    }
    out
}

#[derive(Clone, Debug)]
struct BasicConv {
    conv: Conv2d,
    scale: Tensor,
    shift: Tensor,
}

impl BasicConv {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = self.conv.forward(x)?;
        Ok(y.broadcast_mul(&self.scale)?.broadcast_add(&self.shift)?.relu()?)
    }
}

#[derive(Clone, Debug)]
pub struct InceptionV3 {
    convs: HashMap<String, BasicConv>,
    id: String,
}

impl InceptionV3 {
    pub fn from_safetensors(path: &Path) -> Result<Self> {
        if !path.is_file() {
            return Err(Error::MissingAsset {
                asset: ASSET_NAME.into(),
                path: path.to_path_buf(),
            });
        }
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let digest = util::sha256_hex(&bytes);
        let mut tensors = candle_core::safetensors::load_buffer(&bytes, &Device::Cpu)?;
        let mut wanted = HashMap::new();
        for s in all_specs() {
            for leaf in ["conv.weight", "bn.weight", "bn.bias", "bn.running_mean", "bn.running_var"] {
                let key = format!("{}.{leaf}", s.name);
                let t = tensors.remove(&key).ok_or_else(|| Error::MissingAsset {
                    asset: format!("{ASSET_NAME}: tensor `{key}`"),
                    path: path.to_path_buf(),
                })?;
                wanted.insert(key, t.to_dtype(DType::F32)?);
            }
        }
        Self::from_tensors(wanted, format!("inception-v3-imagenet:{}", &digest[..16]))
    }

    /// He-initialised weights with identity batch-norm statistics.
    pub fn random(seed: u64) -> Result<Self> {
        let mut rng = util::rng(seed, 0x1ce9_7104);
        let mut tensors = HashMap::new();
        let dev = &Device::Cpu;
        for s in all_specs() {
            let fan_in = s.cin * s.kernel.0 * s.kernel.1;
            let w = util::normal_vec(&mut rng, s.cout * fan_in, 0.0, (2.0 / fan_in as f32).sqrt());
            tensors.insert(
                format!("{}.conv.weight", s.name),
                Tensor::from_vec(w, (s.cout, s.cin, s.kernel.0, s.kernel.1), dev)?,
            );
            tensors.insert(format!("{}.bn.weight", s.name), Tensor::ones(s.cout, DType::F32, dev)?);
            tensors.insert(format!("{}.bn.bias", s.name), Tensor::zeros(s.cout, DType::F32, dev)?);
            tensors.insert(format!("{}.bn.running_mean", s.name), Tensor::zeros(s.cout, DType::F32, dev)?);
            tensors.insert(format!("{}.bn.running_var", s.name), Tensor::ones(s.cout, DType::F32, dev)?);
        }
        Self::from_tensors(tensors, format!("inception-v3-random:seed={seed}"))
    }

    fn from_tensors(tensors: HashMap<String, Tensor>, id: String) -> Result<Self> {
        let vb = var_builder_from(tensors);
        let mut convs = HashMap::new();
        for s in all_specs() {
            let unit = vb.pp(&s.name);
            let conv = Conv2d::load(unit.pp("conv"), s.cin, s.cout, s.kernel, s.stride, s.padding, false)?;
            let bn = unit.pp("bn");
            let gamma = bn.get(s.cout, "weight")?;
            let beta = bn.get(s.cout, "bias")?;
            let mean = bn.get(s.cout, "running_mean")?;
            let var = bn.get(s.cout, "running_var")?;
            let scale = (gamma / (var + BN_EPS)?.sqrt()?)?;
            let shift = (beta - (&mean * &scale)?)?;
            convs.insert(
                s.name.clone(),
                BasicConv {
                    conv,
                    scale: scale.reshape((1, s.cout, 1, 1))?,
                    shift: shift.reshape((1, s.cout, 1, 1))?,
                },
            );
        }
        Ok(Self { convs, id })
    }

    fn unit(&self, name: &str, x: &Tensor) -> Result<Tensor> {
        self.convs
            .get(name)
            .ok_or_else(|| Error::Shape(format!("no conv `{name}`")))?
            .forward(x)
    }

    fn chain(&self, p: &str, names: &[&str], x: &Tensor) -> Result<Tensor> {
        let mut y = x.clone();
        for n in names {
            y = self.unit(&format!("{p}.{n}"), &y)?;
        }
        Ok(y)
    }

    fn block(&self, p: &str, block: Block, x: &Tensor) -> Result<Tensor> {
        let parts = match block {
            Block::A { .. } => vec![
                self.chain(p, &["branch1x1"], x)?,
                self.chain(p, &["branch5x5_1", "branch5x5_2"], x)?,
                self.chain(p, &["branch3x3dbl_1", "branch3x3dbl_2", "branch3x3dbl_3"], x)?,
                self.chain(p, &["branch_pool"], &avg_pool_3x3(x)?)?,
            ],
            Block::B { .. } => vec![
                self.chain(p, &["branch3x3"], x)?,
                self.chain(p, &["branch3x3dbl_1", "branch3x3dbl_2", "branch3x3dbl_3"], x)?,
                max_pool_3x3_s2(x)?,
            ],
            Block::C { .. } => vec![
                self.chain(p, &["branch1x1"], x)?,
                self.chain(p, &["branch7x7_1", "branch7x7_2", "branch7x7_3"], x)?,
                self.chain(
                    p,
                    &["branch7x7dbl_1", "branch7x7dbl_2", "branch7x7dbl_3", "branch7x7dbl_4", "branch7x7dbl_5"],
                    x,
                )?,
                self.chain(p, &["branch_pool"], &avg_pool_3x3(x)?)?,
            ],
            Block::D { .. } => vec![
                self.chain(p, &["branch3x3_1", "branch3x3_2"], x)?,
                self.chain(p, &["branch7x7x3_1", "branch7x7x3_2", "branch7x7x3_3", "branch7x7x3_4"], x)?,
                max_pool_3x3_s2(x)?,
            ],
            Block::E { .. } => {
                let b3 = self.chain(p, &["branch3x3_1"], x)?;
                let b3 = Tensor::cat(&[self.chain(p, &["branch3x3_2a"], &b3)?, self.chain(p, &["branch3x3_2b"], &b3)?], 1)?;
                let bd = self.chain(p, &["branch3x3dbl_1", "branch3x3dbl_2"], x)?;
                let bd = Tensor::cat(
                    &[self.chain(p, &["branch3x3dbl_3a"], &bd)?, self.chain(p, &["branch3x3dbl_3b"], &bd)?],
                    1,
                )?;
                vec![
                    self.chain(p, &["branch1x1"], x)?,
                    b3,
                    bd,
                    self.chain(p, &["branch_pool"], &avg_pool_3x3(x)?)?,
                ]
            }
        };
        Ok(Tensor::cat(&parts, 1)?)
    }

    /// Pool features of an N×3×H×W batch in [-1, 1].
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = x.dims4()?;
        if c != 3 {
            return Err(Error::ChannelCount(c));
        }
        if h < 75 || w < 75 {
            return Err(Error::Shape(format!("InceptionV3 needs at least 75×75 input, got {h}×{w}")));
        }
        let mut y = x.detach();
        for name in ["Conv2d_1a_3x3", "Conv2d_2a_3x3", "Conv2d_2b_3x3"] {
            y = self.unit(name, &y)?;
        }
        y = max_pool_3x3_s2(&y)?;
        for name in ["Conv2d_3b_1x1", "Conv2d_4a_3x3"] {
            y = self.unit(name, &y)?;
        }
        y = max_pool_3x3_s2(&y)?;
        for (name, block) in MIXED {
            y = self.block(name, block, &y)?;
        }
        Ok(y.mean((2, 3))?)
    }
}

/// 3×3 average pool, stride 1, zero padding 1, padded cells counted.
fn avg_pool_3x3(x: &Tensor) -> Result<Tensor> {
    let padded = x.pad_with_zeros(2, 1, 1)?.pad_with_zeros(3, 1, 1)?;
    Ok(padded.avg_pool2d_with_stride((3, 3), (1, 1))?)
}

fn max_pool_3x3_s2(x: &Tensor) -> Result<Tensor> {
    Ok(x.max_pool2d_with_stride((3, 3), (2, 2))?)
}

impl FeatureExtractor for InceptionV3 {
    fn id(&self) -> &str {
        &self.id
    }

    fn input_resolution(&self) -> Resolution {
        Resolution::square(INPUT_SIDE)
    }

    fn dim(&self) -> usize {
        FEATURE_DIM
    }

    fn extract(&self, batch: &Tensor) -> Result<Tensor> {
        self.forward(batch)
    }
}
