//! Fixed-grid patch extraction.
//!
//! Four square patches are cut from each image at the corners of a 2×2 grid.
//! For the standard 512×512 input with 196-pixel patches the origins are
//! (0,0), (0,316), (316,0), (316,316); the gap between neighbours keeps every
//! pair of patches disjoint.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::datasets::{ImageTensor, Resolution};
use crate::{Error, Result};

pub const PATCHES_PER_IMAGE: usize = 4;
pub const STANDARD_PATCH: usize = 196;
pub const STANDARD_IMAGE: usize = 512;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PatchGeometry {
    pub image: Resolution,
    pub patch: usize,
}

impl Default for PatchGeometry {
    fn default() -> Self {
        Self::standard()
    }
}

impl PatchGeometry {
    pub const fn standard() -> Self {
        Self {
            image: Resolution::square(STANDARD_IMAGE),
            patch: STANDARD_PATCH,
        }
    }

    pub fn new(image: Resolution, patch: usize) -> Result<Self> {
        if patch == 0 || 2 * patch > image.height || 2 * patch > image.width {
            return Err(Error::Parameter(format!(
                "four non-overlapping {patch}×{patch} patches do not fit in {image}"
            )));
        }
        Ok(Self { image, patch })
    }

    /// Standard geometry scaled to a smaller training resolution, keeping the
    /// patch-to-image ratio (e.g. 49-pixel patches at 128×128).
    pub fn scaled(image: Resolution) -> Result<Self> {
        let side = image.height.min(image.width) as f64;
        let patch = (STANDARD_PATCH as f64 * side / STANDARD_IMAGE as f64).round() as usize;
        Self::new(image, patch)
    }

    /// Top-left `(row, col)` of each grid position 0..4, row-major.
    pub fn origins(&self) -> [(usize, usize); PATCHES_PER_IMAGE] {
        let r = self.image.height - self.patch;
        let c = self.image.width - self.patch;
        [(0, 0), (0, c), (r, 0), (r, c)]
    }

    fn check(&self, h: usize, w: usize) -> Result<()> {
        if (h, w) != (self.image.height, self.image.width) {
            return Err(Error::Shape(format!(
                "patch extraction expects {}×{} images, got {h}×{w}",
                self.image.height, self.image.width
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Patch {
    pub data: Tensor,
    pub source_id: String,
    pub grid_pos: u8,
    pub pixel_origin: (usize, usize),
}

#[derive(Clone, Debug)]
pub struct PatchSet {
    pub patches: Vec<Patch>,
}

impl PatchSet {
    /// The patches stacked as a 4×3×P×P batch in grid order.
    pub fn batch(&self) -> Result<Tensor> {
        let ts: Vec<&Tensor> = self.patches.iter().map(|p| &p.data).collect();
        Ok(Tensor::stack(&ts, 0)?)
    }
}

pub fn extract_patches(img: &ImageTensor, geometry: &PatchGeometry) -> Result<PatchSet> {
    geometry.check(img.height(), img.width())?;
    let p = geometry.patch;
    let patches = geometry
        .origins()
        .iter()
        .enumerate()
        .map(|(i, &(r, c))| {
            Ok(Patch {
                data: img.tensor().narrow(1, r, p)?.narrow(2, c, p)?,
                source_id: img.source_id().to_string(),
                grid_pos: i as u8,
                pixel_origin: (r, c),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PatchSet { patches })
}

/// Extracts patches from a B×3×H×W batch, giving a (4B)×3×P×P batch ordered
/// image-major then grid position. Gradients flow through the crop.
pub fn extract_patch_batch(images: &Tensor, geometry: &PatchGeometry) -> Result<Tensor> {
    let (b, _, h, w) = images.dims4()?;
    geometry.check(h, w)?;
    let p = geometry.patch;
    let mut crops = Vec::with_capacity(b * PATCHES_PER_IMAGE);
    for i in 0..b {
        let img = images.narrow(0, i, 1)?;
        for &(r, c) in geometry.origins().iter() {
            crops.push(img.narrow(2, r, p)?.narrow(3, c, p)?);
        }
    }
    Ok(Tensor::cat(&crops, 0)?)
}
