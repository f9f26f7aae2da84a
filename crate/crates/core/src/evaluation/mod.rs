//! Realism evaluation: KID over extractor features and nearest-match contact
//! sheets.

pub mod inception;
pub mod kid;
pub mod report;

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::datasets::{preprocess, load_rgb, Resolution};
use crate::{util, Error, Result};

pub use inception::InceptionV3;
pub use kid::{compute_kid, kid_with_plan, mmd2_unbiased, KidConfig, KidResult, SubsetPlan};
pub use report::{match_report, MatchSheet};

/// Maps preprocessed N×3×H×W batches in [-1, 1] to N×d features.
pub trait FeatureExtractor {
    fn id(&self) -> &str;
    fn input_resolution(&self) -> Resolution;
    fn dim(&self) -> usize;
    fn extract(&self, batch: &Tensor) -> Result<Tensor>;
}

/// Row-major N×d feature matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSet {
    features: Vec<f32>,
    rows: usize,
    dim: usize,
    extractor_id: String,
}

impl FeatureSet {
    pub fn new(features: Vec<f32>, rows: usize, dim: usize, extractor_id: impl Into<String>) -> Result<Self> {
        if features.len() != rows * dim {
            return Err(Error::Shape(format!(
                "{} values cannot form {rows}×{dim} features",
                features.len()
            )));
        }
        if let Some(i) = features.iter().position(|v| !v.is_finite()) {
            return Err(Error::Parameter(format!("feature row {} is not finite", i / dim.max(1))));
        }
        Ok(Self {
            features,
            rows,
            dim,
            extractor_id: extractor_id.into(),
        })
    }

    pub fn from_tensor(t: &Tensor, extractor_id: impl Into<String>) -> Result<Self> {
        let (rows, dim) = t.dims2()?;
        Self::new(t.flatten_all()?.to_vec1::<f32>()?, rows, dim, extractor_id)
    }

    pub fn len(&self) -> usize {
        self.rows
    }

    pub fn is_empty(&self) -> bool {
        self.rows == 0
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn extractor_id(&self) -> &str {
        &self.extractor_id
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    /// Rows `[start, end)` as a new set.
    pub fn slice(&self, start: usize, end: usize) -> Result<Self> {
        if start > end || end > self.rows {
            return Err(Error::Parameter(format!("rows {start}..{end} out of 0..{}", self.rows)));
        }
        Self::new(
            self.features[start * self.dim..end * self.dim].to_vec(),
            end - start,
            self.dim,
            self.extractor_id.clone(),
        )
    }

    pub fn to_tensor(&self) -> Result<Tensor> {
        Ok(Tensor::from_vec(self.features.clone(), (self.rows, self.dim), &Device::Cpu)?)
    }
}

/// Content hash over the sorted file names and bytes of a set of images.
pub fn dataset_hash(paths: &[PathBuf]) -> Result<String> {
    let mut entries = Vec::with_capacity(paths.len());
    for p in paths {
        let bytes = fs::read(p).map_err(|e| Error::io(p, e))?;
        let name = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        entries.push(format!("{name}:{}", util::sha256_hex(&bytes)));
    }
    entries.sort();
    Ok(util::sha256_hex(entries.join("\n").as_bytes()))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct CacheEntry {
    extractor_id: String,
    dataset_hash: String,
    rows: usize,
    dim: usize,
}

/// Features on disk keyed by `(extractor id, dataset hash)`.
#[derive(Clone, Debug)]
pub struct FeatureCache {
    dir: PathBuf,
}

impl FeatureCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    fn key(extractor_id: &str, dataset_hash: &str) -> String {
        util::sha256_hex(format!("{extractor_id}\n{dataset_hash}").as_bytes())[..32].to_string()
    }

    fn paths(&self, key: &str) -> (PathBuf, PathBuf) {
        (
            self.dir.join(format!("{key}.safetensors")),
            self.dir.join(format!("{key}.json")),
        )
    }

    pub fn get(&self, extractor_id: &str, dataset_hash: &str) -> Result<Option<FeatureSet>> {
        let (data, meta) = self.paths(&Self::key(extractor_id, dataset_hash));
        if !data.is_file() || !meta.is_file() {
            return Ok(None);
        }
        let entry: CacheEntry = util::read_json(&meta)?;
        if entry.extractor_id != extractor_id || entry.dataset_hash != dataset_hash {
            return Ok(None);
        }
        let tensors = candle_core::safetensors::load(&data, &Device::Cpu)?;
        let t = tensors
            .get("features")
            .ok_or_else(|| Error::Serde(format!("{} has no `features` tensor", data.display())))?;
        let set = FeatureSet::from_tensor(t, extractor_id)?;
        if (set.len(), set.dim()) != (entry.rows, entry.dim) {
            return Ok(None);
        }
        Ok(Some(set))
    }

    pub fn put(&self, dataset_hash: &str, set: &FeatureSet) -> Result<()> {
        util::create_dir_all(&self.dir)?;
        let (data, meta) = self.paths(&Self::key(set.extractor_id(), dataset_hash));
        let mut map = HashMap::new();
        map.insert("features".to_string(), set.to_tensor()?);
        candle_core::safetensors::save(&map, &data)?;
        util::write_json(
            &meta,
            &CacheEntry {
                extractor_id: set.extractor_id().to_string(),
                dataset_hash: dataset_hash.to_string(),
                rows: set.len(),
                dim: set.dim(),
            },
        )
    }
}

/// Features of `images`, resized to the extractor's input, in the order given.
pub fn extract_features(extractor: &dyn FeatureExtractor, images: &[PathBuf], batch_size: usize) -> Result<FeatureSet> {
    let res = extractor.input_resolution();
    let mut values = Vec::with_capacity(images.len() * extractor.dim());
    for chunk in images.chunks(batch_size.max(1)) {
        let batch = chunk
            .iter()
            .map(|p| Ok(preprocess(&load_rgb(p)?, res, &p.to_string_lossy())?.into_tensor()))
            .collect::<Result<Vec<_>>>()?;
        let f = extractor.extract(&Tensor::stack(&batch, 0)?)?;
        values.extend(f.flatten_all()?.to_vec1::<f32>()?);
    }
    FeatureSet::new(values, images.len(), extractor.dim(), extractor.id())
}

/// As [`extract_features`], reusing cached features when present.
pub fn cached_features(
    extractor: &dyn FeatureExtractor,
    images: &[PathBuf],
    cache: Option<&FeatureCache>,
    batch_size: usize,
) -> Result<FeatureSet> {
    let Some(cache) = cache else {
        return extract_features(extractor, images, batch_size);
    };
    let hash = dataset_hash(images)?;
    if let Some(set) = cache.get(extractor.id(), &hash)? {
        log::info!("feature cache hit for {} images", set.len());
        return Ok(set);
    }
    let set = extract_features(extractor, images, batch_size)?;
    cache.put(&hash, &set)?;
    Ok(set)
}

/// Image files directly under `dir`, sorted by name.
pub fn list_image_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
        })
        .collect();
    out.sort();
    Ok(out)
}
