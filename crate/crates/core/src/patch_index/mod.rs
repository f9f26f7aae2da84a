//! Real-world patch retrieval: fixed-grid patch extraction, VGG-16 `relu4_3`
//! embeddings, and an exact L2 index mapping a generated patch to its nearest
//! real-world patch.

pub mod backbone;
pub mod index;
pub mod patches;

use std::collections::{HashMap, VecDeque};
use std::path::Path;
use std::sync::{Arc, Mutex};

use candle_core::Tensor;

pub use backbone::{Embedding, Vgg16Features};
pub use index::{IndexMeta, NearestMatch, PatchIndex, PatchProvenance};
pub use patches::{extract_patch_batch, extract_patches, Patch, PatchGeometry, PatchSet, PATCHES_PER_IMAGE};

use crate::datasets::{self, DatasetSpec, ImageTensor};
use crate::{Error, Result};

/// Embeds every grid patch of every image in `real` and indexes it.
pub fn build_index(real: &DatasetSpec, backbone: &Vgg16Features, geometry: &PatchGeometry) -> Result<PatchIndex> {
    let images = real.list_images()?;
    if images.is_empty() {
        return Err(Error::EmptyDataset(format!(
            "no real-world images under {}",
            real.image_dir().display()
        )));
    }
    let meta = IndexMeta {
        backbone_id: backbone.id().to_string(),
        layer: backbone.layer_name().to_string(),
        geometry: *geometry,
    };
    let mut index = PatchIndex::new(Vgg16Features::embedding_dim(geometry.patch), meta)?;
    for (n, path) in images.values().enumerate() {
        let path = std::fs::canonicalize(path).map_err(|e| Error::io(path, e))?;
        let img = datasets::preprocess_file(&path, geometry.image)?;
        add_image(&mut index, backbone, &img)?;
        if (n + 1) % 100 == 0 {
            log::info!("indexed {} / {} real images", n + 1, images.len());
        }
    }
    Ok(index)
}

/// Adds the four grid patches of a preprocessed image to `index`.
pub fn add_image(index: &mut PatchIndex, backbone: &Vgg16Features, img: &ImageTensor) -> Result<()> {
    let set = extract_patches(img, &index.meta().geometry)?;
    let embeddings = backbone.embed_batch(&set.batch()?)?.to_vec2::<f32>()?;
    for (patch, vector) in set.patches.iter().zip(embeddings) {
        index.add(
            &vector,
            PatchProvenance {
                source_id: patch.source_id.clone(),
                grid_pos: patch.grid_pos,
                pixel_origin: patch.pixel_origin,
            },
        )?;
    }
    Ok(())
}

/// Re-crops real patches from their source images, keeping a bounded cache of
/// preprocessed images.
#[derive(Debug)]
pub struct RealPatchStore {
    geometry: PatchGeometry,
    capacity: usize,
    cache: Mutex<(HashMap<String, ImageTensor>, VecDeque<String>)>,
}

impl RealPatchStore {
    pub fn new(geometry: PatchGeometry, capacity: usize) -> Self {
        Self {
            geometry,
            capacity: capacity.max(1),
            cache: Mutex::new((HashMap::new(), VecDeque::new())),
        }
    }

    fn image(&self, source_id: &str) -> Result<ImageTensor> {
        let mut guard = self.cache.lock().expect("patch cache lock poisoned");
        let (map, order) = &mut *guard;
        if let Some(img) = map.get(source_id) {
            return Ok(img.clone());
        }
        let img = datasets::preprocess_file(Path::new(source_id), self.geometry.image)?;
        if map.len() >= self.capacity {
            if let Some(old) = order.pop_front() {
                map.remove(&old);
            }
        }
        map.insert(source_id.to_string(), img.clone());
        order.push_back(source_id.to_string());
        Ok(img)
    }

    /// Pixels (3×P×P) of the patch described by `provenance`.
    pub fn crop(&self, provenance: &PatchProvenance) -> Result<Tensor> {
        let img = self.image(&provenance.source_id)?;
        let (r, c) = provenance.pixel_origin;
        let p = self.geometry.patch;
        if r + p > img.height() || c + p > img.width() {
            return Err(Error::Index(format!(
                "patch at {:?} falls outside {}",
                provenance.pixel_origin, provenance.source_id
            )));
        }
        Ok(img.tensor().narrow(1, r, p)?.narrow(2, c, p)?)
    }
}

/// A generated patch's nearest real-world patch, with its pixels.
#[derive(Clone, Debug)]
pub struct PatchMatch {
    pub nearest: NearestMatch,
    pub pixels: Tensor,
}

/// Backbone + index + pixel store: everything needed to turn generated
/// patches into matched real patches.
#[derive(Debug)]
pub struct PatchMatcher {
    backbone: Vgg16Features,
    index: Arc<PatchIndex>,
    store: RealPatchStore,
}

impl PatchMatcher {
    pub const DEFAULT_CACHE: usize = 512;

    pub fn new(backbone: Vgg16Features, index: Arc<PatchIndex>) -> Result<Self> {
        if index.meta().backbone_id != backbone.id() {
            return Err(Error::Config(format!(
                "index was built with backbone `{}` but `{}` was supplied",
                index.meta().backbone_id,
                backbone.id()
            )));
        }
        if index.meta().layer != backbone.layer_name() {
            return Err(Error::Config(format!(
                "index layer `{}` differs from backbone layer `{}`",
                index.meta().layer,
                backbone.layer_name()
            )));
        }
        let geometry = index.meta().geometry;
        if Vgg16Features::embedding_dim(geometry.patch) != index.dim() {
            return Err(Error::DimensionMismatch {
                expected: Vgg16Features::embedding_dim(geometry.patch),
                actual: index.dim(),
            });
        }
        Ok(Self {
            backbone,
            index,
            store: RealPatchStore::new(geometry, Self::DEFAULT_CACHE),
        })
    }

    pub fn geometry(&self) -> PatchGeometry {
        self.index.meta().geometry
    }

    pub fn index(&self) -> &Arc<PatchIndex> {
        &self.index
    }

    pub fn backbone(&self) -> &Vgg16Features {
        &self.backbone
    }

    /// Nearest real patch for each patch of an N×3×P×P batch.
    pub fn match_batch(&self, patches: &Tensor) -> Result<Vec<PatchMatch>> {
        let embeddings = self.backbone.embed_batch(patches)?.to_vec2::<f32>()?;
        embeddings
            .iter()
            .map(|e| {
                let nearest = self.index.query_nearest(e)?;
                let pixels = self.store.crop(&nearest.provenance)?;
                Ok(PatchMatch { nearest, pixels })
            })
            .collect()
    }
}
