//! Dataset ingestion: reading 8-bit RGB images, resizing and normalising them
//! into [`ImageTensor`]s, and pairing synthetic frames with their enhanced
//! counterparts by filename stem.
//!
//! Directory layout is `<root>/<split>/<stem>.<ext>`. A split may carry a
//! manifest at `<root>/<split>.txt` with one stem per line; without one the
//! split is derived from the directory listings.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use candle_core::{Device, Tensor};
use image::imageops::FilterType;
use image::{DynamicImage, RgbImage};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::{util, Error, Result};

/// Per-channel normalisation statistics applied after scaling to [0, 1].
pub const NORM_MEAN: [f32; 3] = [0.5, 0.5, 0.5];
pub const NORM_STD: [f32; 3] = [0.5, 0.5, 0.5];

pub const DEFAULT_RESOLUTION: Resolution = Resolution {
    height: 512,
    width: 512,
};

const IMAGE_EXTENSIONS: &[&str] = &["png", "jpg", "jpeg"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Resolution {
    pub height: usize,
    pub width: usize,
}

impl Resolution {
    pub const fn new(height: usize, width: usize) -> Self {
        Self { height, width }
    }

    pub const fn square(side: usize) -> Self {
        Self::new(side, side)
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }
}

impl fmt::Display for Resolution {
    /// Formats as `WIDTHxHEIGHT`, the usual way display resolutions are written.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.width, self.height)
    }
}

impl FromStr for Resolution {
    type Err = Error;

    /// Parses `WIDTHxHEIGHT` (e.g. `1920x1080`) or a single side length.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Parameter(format!("cannot parse resolution `{s}`, expected WIDTHxHEIGHT"));
        let s = s.trim();
        match s.split_once(['x', 'X']) {
            Some((w, h)) => {
                let width = w.trim().parse().map_err(|_| bad())?;
                let height = h.trim().parse().map_err(|_| bad())?;
                if width == 0 || height == 0 {
                    return Err(bad());
                }
                Ok(Self::new(height, width))
            }
            None => {
                let side: usize = s.parse().map_err(|_| bad())?;
                if side == 0 {
                    return Err(bad());
                }
                Ok(Self::square(side))
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Synthetic,
    Enhanced,
    Real,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "val" | "validation" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Parameter(format!("unknown split `{other}`"))),
        }
    }
}

/// How items of two datasets are aligned. Only filename-stem equality is supported.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairingKey {
    #[default]
    FileStem,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub root_path: PathBuf,
    pub kind: DatasetKind,
    #[serde(default)]
    pub pairing_key: PairingKey,
    pub split: Split,
}

impl DatasetSpec {
    pub fn new(root_path: impl Into<PathBuf>, kind: DatasetKind, split: Split) -> Self {
        Self {
            root_path: root_path.into(),
            kind,
            pairing_key: PairingKey::FileStem,
            split,
        }
    }

    pub fn split_dir(&self) -> PathBuf {
        self.root_path.join(self.split.as_str())
    }

    /// Directory holding the split's images. Real-world datasets are often
    /// unsplit, so they fall back to the root when `<root>/<split>` is absent.
    pub fn image_dir(&self) -> PathBuf {
        let dir = self.split_dir();
        if self.kind == DatasetKind::Real && !dir.is_dir() {
            self.root_path.clone()
        } else {
            dir
        }
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.root_path.join(format!("{}.txt", self.split.as_str()))
    }

    /// Lists `stem -> path` for every image in [`Self::image_dir`], sorted by stem.
    pub fn list_images(&self) -> Result<BTreeMap<String, PathBuf>> {
        Ok(scan_images(&self.image_dir())?.0)
    }
}

/// A normalised 3×H×W image with values in [-1, 1].
#[derive(Clone, Debug)]
pub struct ImageTensor {
    data: Tensor,
    source_id: String,
}

impl ImageTensor {
    pub fn new(data: Tensor, source_id: impl Into<String>) -> Result<Self> {
        let dims = data.dims();
        if dims.len() != 3 {
            return Err(Error::Shape(format!("image tensor must be 3×H×W, got {dims:?}")));
        }
        if dims[0] != 3 {
            return Err(Error::ChannelCount(dims[0]));
        }
        Ok(Self {
            data,
            source_id: source_id.into(),
        })
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor {
        self.data
    }

    /// The image as a 1×3×H×W batch.
    pub fn batched(&self) -> Result<Tensor> {
        Ok(self.data.unsqueeze(0)?)
    }

    pub fn source_id(&self) -> &str {
        &self.source_id
    }

    pub fn height(&self) -> usize {
        self.data.dims()[1]
    }

    pub fn width(&self) -> usize {
        self.data.dims()[2]
    }

    pub fn resolution(&self) -> Resolution {
        Resolution::new(self.height(), self.width())
    }
}

/// Reads an image file, rejecting anything that is not 3-channel colour.
pub fn load_rgb(path: &Path) -> Result<RgbImage> {
    let img = image::open(path).map_err(|e| Error::Ingestion {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    into_rgb(img)
}

pub fn into_rgb(img: DynamicImage) -> Result<RgbImage> {
    let channels = img.color().channel_count() as usize;
    if channels != 3 {
        return Err(Error::ChannelCount(channels));
    }
    Ok(img.into_rgb8())
}

/// Resizes (bilinear, antialiased when shrinking) and maps each channel via
/// `v -> (v / 255 - mean) / std`.
pub fn preprocess(raw: &RgbImage, resolution: Resolution, source_id: &str) -> Result<ImageTensor> {
    if raw.width() == 0 || raw.height() == 0 {
        return Err(Error::Shape("image has zero extent".into()));
    }
    if resolution.height == 0 || resolution.width == 0 {
        return Err(Error::Parameter("resolution must be positive".into()));
    }
    let same = raw.width() as usize == resolution.width && raw.height() as usize == resolution.height;
    let resized;
    let img = if same {
        raw
    } else {
        resized = image::imageops::resize(
            raw,
            resolution.width as u32,
            resolution.height as u32,
            FilterType::Triangle,
        );
        &resized
    };
    ImageTensor::new(normalize_rgb(img)?, source_id)
}

/// Loads and preprocesses an image file; the path becomes the source id.
pub fn preprocess_file(path: &Path, resolution: Resolution) -> Result<ImageTensor> {
    let raw = load_rgb(path)?;
    preprocess(&raw, resolution, &path.to_string_lossy())
}

/// Normalises an 8-bit image at its native size into a 3×H×W tensor.
pub fn normalize_rgb(img: &RgbImage) -> Result<Tensor> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let plane = w * h;
    let mut data = vec![0f32; 3 * plane];
    for (i, px) in img.pixels().enumerate() {
        for c in 0..3 {
            data[c * plane + i] = (px.0[c] as f32 / 255.0 - NORM_MEAN[c]) / NORM_STD[c];
        }
    }
    Ok(Tensor::from_vec(data, (3, h, w), &Device::Cpu)?)
}

/// Maps a 3×H×W (or 1×3×H×W) tensor in [-1, 1] back to 8-bit RGB via
/// `clamp((v + 1) / 2, 0, 1) * 255`, rounding half to even.
pub fn denormalize(t: &Tensor) -> Result<RgbImage> {
    let t = match t.rank() {
        4 if t.dims()[0] == 1 => t.squeeze(0)?,
        3 => t.clone(),
        _ => {
            return Err(Error::Shape(format!(
                "denormalize expects 3×H×W or 1×3×H×W, got {:?}",
                t.dims()
            )))
        }
    };
    let (c, h, w) = t.dims3()?;
    if c != 3 {
        return Err(Error::ChannelCount(c));
    }
    let data = t.flatten_all()?.to_vec1::<f32>()?;
    let plane = h * w;
    let mut out = RgbImage::new(w as u32, h as u32);
    for (i, px) in out.pixels_mut().enumerate() {
        for ch in 0..3 {
            px.0[ch] = quantize(data[ch * plane + i]);
        }
    }
    Ok(out)
}

fn quantize(v: f32) -> u8 {
    scaled_to_u8(((v + 1.0) / 2.0).clamp(0.0, 1.0) * 255.0)
}

fn scaled_to_u8(x: f32) -> u8 {
    x.round_ties_even() as u8
}

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        .unwrap_or(false)
}

/// Returns `stem -> path` for images in `dir` plus stems that appeared more than once.
fn scan_images(dir: &Path) -> Result<(BTreeMap<String, PathBuf>, Vec<String>)> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && is_image(p))
        .collect();
    paths.sort();
    let mut map = BTreeMap::new();
    let mut duplicates = Vec::new();
    for path in paths {
        let Some(stem) = path.file_stem().and_then(|s| s.to_str()) else {
            continue;
        };
        if map.insert(stem.to_string(), path.clone()).is_some() {
            duplicates.push(stem.to_string());
        }
    }
    Ok((map, duplicates))
}

/// Items excluded while pairing a split. Always produced, even when empty.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairingReport {
    pub split: Option<Split>,
    /// Synthetic stems with no enhanced counterpart.
    pub missing_enhanced: Vec<String>,
    /// Enhanced stems with no synthetic counterpart.
    pub missing_synthetic: Vec<String>,
    /// Manifest stems found in neither directory.
    pub missing_both: Vec<String>,
    /// Stems that matched more than one file in a directory; the lexically last path wins.
    pub duplicate_stems: Vec<String>,
    pub warnings: Vec<String>,
}

impl PairingReport {
    pub fn excluded_count(&self) -> usize {
        self.missing_enhanced.len() + self.missing_synthetic.len() + self.missing_both.len()
    }

    pub fn is_clean(&self) -> bool {
        self.excluded_count() == 0 && self.duplicate_stems.is_empty() && self.warnings.is_empty()
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let split = self.split.map(|s| s.to_string()).unwrap_or_else(|| "-".into());
        out.push_str(&format!("# pairing report, split {split}\n"));
        out.push_str(&format!("# excluded {}\n", self.excluded_count()));
        for w in &self.warnings {
            out.push_str(&format!("warning\t{w}\n"));
        }
        for (tag, stems) in [
            ("missing_enhanced", &self.missing_enhanced),
            ("missing_synthetic", &self.missing_synthetic),
            ("missing_both", &self.missing_both),
            ("duplicate_stem", &self.duplicate_stems),
        ] {
            for stem in stems {
                out.push_str(&format!("{tag}\t{stem}\n"));
            }
        }
        out
    }

    pub fn write_to(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairedItem {
    pub stem: String,
    pub synthetic: PathBuf,
    pub enhanced: PathBuf,
}

impl PairedItem {
    pub fn load(&self, resolution: Resolution) -> Result<(ImageTensor, ImageTensor)> {
        Ok((
            preprocess_file(&self.synthetic, resolution)?,
            preprocess_file(&self.enhanced, resolution)?,
        ))
    }
}

/// Aligned synthetic/enhanced pairs of one split, sorted by stem.
#[derive(Clone, Debug)]
pub struct PairedSplit {
    pub split: Split,
    pub pairs: Vec<PairedItem>,
    pub report: PairingReport,
}

impl PairedSplit {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn stems(&self) -> BTreeSet<&str> {
        self.pairs.iter().map(|p| p.stem.as_str()).collect()
    }

    /// Visit order for one pass over the split: a seeded permutation of pair indices.
    pub fn order(&self, seed: u64, epoch: u64) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.pairs.len()).collect();
        let mut rng = util::rng(seed, epoch);
        idx.shuffle(&mut rng);
        idx
    }

    /// Pairs in the seeded visit order of `epoch`.
    pub fn ordered(&self, seed: u64, epoch: u64) -> Vec<&PairedItem> {
        self.order(seed, epoch).into_iter().map(|i| &self.pairs[i]).collect()
    }

    pub fn load_all(&self, resolution: Resolution) -> Result<Vec<(ImageTensor, ImageTensor)>> {
        self.pairs.iter().map(|p| p.load(resolution)).collect()
    }
}

fn read_manifest(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_string)
        .collect())
}

/// Pairs the synthetic and enhanced images of `split` by filename stem.
///
/// Stems come from `<synthetic root>/<split>.txt` when present, otherwise from
/// the union of both directory listings. Unpaired stems are excluded and listed
/// in the returned report; an empty split yields no pairs and a warning.
pub fn load_paired_split(
    synthetic: &DatasetSpec,
    enhanced: &DatasetSpec,
    split: Split,
) -> Result<PairedSplit> {
    let synthetic = DatasetSpec {
        split,
        ..synthetic.clone()
    };
    let enhanced = DatasetSpec {
        split,
        ..enhanced.clone()
    };
    let (syn, mut dups) = scan_images(&synthetic.image_dir())?;
    let (enh, dups_enh) = scan_images(&enhanced.image_dir())?;
    dups.extend(dups_enh);
    dups.sort();
    dups.dedup();

    let mut report = PairingReport {
        split: Some(split),
        duplicate_stems: dups,
        ..Default::default()
    };

    let manifest_path = synthetic.manifest_path();
    let stems: Vec<String> = if manifest_path.is_file() {
        let mut s = read_manifest(&manifest_path)?;
        s.sort();
        s.dedup();
        s
    } else {
        syn.keys().chain(enh.keys()).cloned().collect::<BTreeSet<_>>().into_iter().collect()
    };

    let mut pairs = Vec::new();
    for stem in stems {
        match (syn.get(&stem), enh.get(&stem)) {
            (Some(s), Some(e)) => pairs.push(PairedItem {
                stem,
                synthetic: s.clone(),
                enhanced: e.clone(),
            }),
            (Some(_), None) => report.missing_enhanced.push(stem),
            (None, Some(_)) => report.missing_synthetic.push(stem),
            (None, None) => report.missing_both.push(stem),
        }
    }
    if pairs.is_empty() {
        report.warnings.push(format!(
            "no synthetic/enhanced pairs found for split {split} under {} and {}",
            synthetic.image_dir().display(),
            enhanced.image_dir().display()
        ));
    }
    if report.excluded_count() > 0 {
        log::warn!("split {split}: {} unpaired stems excluded", report.excluded_count());
    }
    Ok(PairedSplit { split, pairs, report })
}

/// Fails if any stem appears in more than one of the given splits.
pub fn check_disjoint(splits: &[&PairedSplit]) -> Result<()> {
    let mut seen: BTreeMap<&str, Split> = BTreeMap::new();
    for s in splits {
        for stem in s.stems() {
            if let Some(prev) = seen.insert(stem, s.split) {
                if prev != s.split {
                    return Err(Error::Config(format!(
                        "stem `{stem}` appears in both {prev} and {} splits",
                        s.split
                    )));
                }
            }
        }
    }
    Ok(())
}
