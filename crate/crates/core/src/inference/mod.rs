//! Feed-forward enhancement of arbitrary synthetic images and the latency
//! benchmark.

pub mod bench;

use std::path::{Path, PathBuf};

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::datasets::{denormalize, load_rgb, normalize_rgb, preprocess, Resolution};
use crate::networks::{Generator, GeneratorCheckpoint};
use crate::{util, Error, Result};

pub use bench::{benchmark, BenchmarkConfig, BenchmarkReport, BenchmarkRow, ReferenceRow, Stat};

/// How input sizes are reconciled with the generator's divisibility requirement.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum ResolutionPolicy {
    /// Reflect-pad bottom/right to the next multiple of 8, crop back on output.
    #[default]
    ReflectPad,
    /// Resize to a fixed resolution (each side a multiple of 8) and write at that size.
    Resize(Resolution),
}

/// Next multiple of the generator's spatial divisor at or above `n`.
pub fn padded_len(n: usize) -> usize {
    let d = crate::networks::GeneratorConfig::spatial_divisor();
    n.div_ceil(d) * d
}

fn reflect_index(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let r = i % period;
    if r < n {
        r
    } else {
        period - r
    }
}

/// Reflect-pads the last two dims of a C×H×W tensor to `(height, width)`.
pub fn reflect_pad(x: &Tensor, height: usize, width: usize) -> Result<Tensor> {
    let (_, h, w) = x.dims3()?;
    if height < h || width < w {
        return Err(Error::Shape(format!("cannot pad {h}x{w} down to {height}x{width}")));
    }
    let mut out = x.clone();
    if height > h {
        let rows: Vec<u32> = (0..height).map(|i| reflect_index(i, h) as u32).collect();
        out = out.index_select(&Tensor::new(rows, x.device())?, 1)?;
    }
    if width > w {
        let cols: Vec<u32> = (0..width).map(|i| reflect_index(i, w) as u32).collect();
        out = out.index_select(&Tensor::new(cols, x.device())?, 2)?;
    }
    Ok(out)
}

/// Runs the generator on one normalised C×H×W image of any size, padding
/// and cropping around the forward pass.
pub fn enhance_tensor(generator: &Generator, x: &Tensor) -> Result<Tensor> {
    let (_, h, w) = x.dims3()?;
    let (ph, pw) = (padded_len(h), padded_len(w));
    let padded = reflect_pad(x, ph, pw)?;
    let y = generator.forward(&padded.unsqueeze(0)?)?.squeeze(0)?;
    Ok(y.narrow(1, 0, h)?.narrow(2, 0, w)?)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnhancedImage {
    pub input: PathBuf,
    pub output: PathBuf,
    pub input_resolution: Resolution,
    pub processed_resolution: Resolution,
    pub output_resolution: Resolution,
}

/// Enhances each input and writes `<out_dir>/<stem>.png`. Uses only the
/// generator: no index, discriminator or auxiliary buffers.
pub fn enhance(
    checkpoint: &GeneratorCheckpoint,
    inputs: &[PathBuf],
    out_dir: &Path,
    policy: ResolutionPolicy,
) -> Result<Vec<EnhancedImage>> {
    util::create_dir_all(out_dir)?;
    let mut results = Vec::with_capacity(inputs.len());
    for input in inputs {
        let raw = load_rgb(input)?;
        let input_resolution = Resolution::new(raw.height() as usize, raw.width() as usize);
        let (y, processed) = match policy {
            ResolutionPolicy::ReflectPad => {
                let x = normalize_rgb(&raw)?;
                let processed = Resolution::new(padded_len(input_resolution.height), padded_len(input_resolution.width));
                (enhance_tensor(&checkpoint.generator, &x)?, processed)
            }
            ResolutionPolicy::Resize(res) => {
                let x = preprocess(&raw, res, &input.to_string_lossy())?;
                let y = checkpoint.generator.forward(&x.batched()?)?.squeeze(0)?;
                (y, res)
            }
        };
        let img = denormalize(&y)?;
        let stem = input
            .file_stem()
            .ok_or_else(|| Error::Ingestion {
                path: input.clone(),
                reason: "no file name".into(),
            })?
            .to_string_lossy();
        let output = out_dir.join(format!("{stem}.png"));
        img.save(&output).map_err(|e| Error::Ingestion {
            path: output.clone(),
            reason: e.to_string(),
        })?;
        results.push(EnhancedImage {
            input: input.clone(),
            output,
            input_resolution,
            processed_resolution: processed,
            output_resolution: Resolution::new(img.height() as usize, img.width() as usize),
        });
    }
    Ok(results)
}
