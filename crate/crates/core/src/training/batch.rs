//! Hybrid batch formation.
//!
//! One generator pass produces `X̂`; its four grid patches form the generated
//! set. In hybrid mode the generated set is those four patches twice, and the
//! real set is the four positional target patches followed by the nearest
//! real-world patch of each generated patch. Enhanced-only mode drops the
//! duplicated half and the index lookups.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use super::TrainingMode;
use crate::networks::Generator;
use crate::patch_index::{extract_patch_batch, PatchGeometry, PatchMatcher, PatchProvenance};
use crate::{Error, Result};

/// Per-patch telemetry of an index lookup.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchRecord {
    pub index_id: usize,
    pub distance: f32,
    pub provenance: PatchProvenance,
    /// The matched pixels differ from the positional target patch.
    pub differs_from_target: bool,
}

#[derive(Clone, Debug)]
pub struct HybridBatch {
    pub mode: TrainingMode,
    /// `[p̂, p̂]` in hybrid mode, `[p̂]` otherwise; attached to the generator graph.
    pub generated: Tensor,
    /// `[p_target, p_matched]` in hybrid mode, `[p_target]` otherwise.
    pub real: Tensor,
    /// Positional target patches, in the same order as `p̂`.
    pub target_patches: Tensor,
    /// The full generator output `X̂`.
    pub generated_image: Tensor,
    pub matches: Vec<MatchRecord>,
}

impl HybridBatch {
    pub fn generated_len(&self) -> usize {
        self.generated.dims()[0]
    }

    pub fn real_len(&self) -> usize {
        self.real.dims()[0]
    }
}

/// Runs the generator once on `x` and assembles the discriminator's two patch sets.
///
/// `x` and `target` are aligned B×3×H×W batches at the geometry's resolution.
pub fn form_hybrid_batch(
    x: &Tensor,
    target: &Tensor,
    generator: &Generator,
    matcher: Option<&PatchMatcher>,
    mode: TrainingMode,
    geometry: &PatchGeometry,
) -> Result<HybridBatch> {
    if x.dims() != target.dims() {
        return Err(Error::Shape(format!(
            "synthetic {:?} and target {:?} are not aligned",
            x.dims(),
            target.dims()
        )));
    }
    if let Some(m) = matcher {
        if m.geometry() != *geometry {
            return Err(Error::Config(format!(
                "index geometry {:?} differs from training geometry {geometry:?}",
                m.geometry()
            )));
        }
    }
    let matcher = match (mode, matcher) {
        (TrainingMode::Hybrid, None) => {
            return Err(Error::Config("hybrid mode requires a patch index".into()));
        }
        (TrainingMode::Hybrid, Some(m)) => Some(m),
        (TrainingMode::EnhancedOnly, _) => None,
    };

    let x_hat = generator.forward(x)?;
    let p_hat = extract_patch_batch(&x_hat, geometry)?;
    let p_target = extract_patch_batch(target, geometry)?;

    let (generated, real, matches) = match matcher {
        None => (p_hat.clone(), p_target.clone(), Vec::new()),
        Some(m) => {
            let found = m.match_batch(&p_hat.detach())?;
            let mut pixels = Vec::with_capacity(found.len());
            let mut records = Vec::with_capacity(found.len());
            for (i, pm) in found.into_iter().enumerate() {
                let diff = (&pm.pixels - &p_target.get(i)?)?.abs()?.max_all()?.to_scalar::<f32>()?;
                records.push(MatchRecord {
                    index_id: pm.nearest.id,
                    distance: pm.nearest.distance,
                    provenance: pm.nearest.provenance,
                    differs_from_target: diff > 0.0,
                });
                pixels.push(pm.pixels);
            }
            let matched = Tensor::stack(&pixels, 0)?;
            (
                Tensor::cat(&[&p_hat, &p_hat], 0)?,
                Tensor::cat(&[&p_target, &matched], 0)?,
                records,
            )
        }
    };
    Ok(HybridBatch {
        mode,
        generated,
        real,
        target_patches: p_target,
        generated_image: x_hat,
        matches,
    })
}
