//! Least-squares adversarial objectives and the L1 reconstruction term.
//!
//! Expectations over a patch set are realised as the mean over every cell of
//! every realism map in the set.

use candle_core::{DType, Tensor};

use super::batch::HybridBatch;
use crate::networks::Discriminator;
use crate::{Error, Result};

fn non_empty(t: &Tensor, what: &str) -> Result<()> {
    if t.elem_count() == 0 {
        return Err(Error::Parameter(format!("{what} is empty")));
    }
    Ok(())
}

/// Mean over every element, accumulated in f64 and returned as f32; f32
/// accumulation drifts by ~1e-6 relative over a few thousand cells.
fn mean(t: &Tensor) -> Result<Tensor> {
    Ok(t.to_dtype(DType::F64)?.mean_all()?.to_dtype(DType::F32)?)
}

/// `mean((real - 1)^2) + mean(generated^2)` over realism maps.
pub fn lsgan_discriminator(real_scores: &Tensor, generated_scores: &Tensor) -> Result<Tensor> {
    non_empty(real_scores, "real set")?;
    non_empty(generated_scores, "generated set")?;
    let real = mean(&(real_scores - 1.0)?.sqr()?)?;
    let fake = mean(&generated_scores.sqr()?)?;
    Ok((real + fake)?)
}

/// `mean((generated - 1)^2)`: pushes generated scores towards "real".
pub fn lsgan_generator(generated_scores: &Tensor) -> Result<Tensor> {
    non_empty(generated_scores, "generated set")?;
    mean(&(generated_scores - 1.0)?.sqr()?)
}

/// Per-element mean absolute difference between two equally shaped tensors.
pub fn l1(x_hat: &Tensor, target: &Tensor) -> Result<Tensor> {
    if x_hat.dims() != target.dims() {
        return Err(Error::Shape(format!(
            "L1 operands differ in shape: {:?} vs {:?}",
            x_hat.dims(),
            target.dims()
        )));
    }
    non_empty(x_hat, "image")?;
    mean(&(x_hat - target)?.abs()?)
}

/// Discriminator loss on a hybrid batch; generated patches are detached so the
/// generator receives no gradient from this term.
pub fn loss_discriminator(d: &Discriminator, batch: &HybridBatch) -> Result<Tensor> {
    non_empty(&batch.real, "real set")?;
    non_empty(&batch.generated, "generated set")?;
    let real = d.forward(&batch.real.detach())?;
    let fake = d.forward(&batch.generated.detach())?;
    lsgan_discriminator(&real, &fake)
}

#[derive(Clone, Debug)]
pub struct GeneratorLoss {
    /// `adversarial + lambda * l1`, the quantity that is optimised.
    pub total: Tensor,
    pub adversarial: Tensor,
    /// Unweighted mean absolute error against the target.
    pub l1: Tensor,
}

pub fn loss_generator(
    d: &Discriminator,
    batch: &HybridBatch,
    x_hat: &Tensor,
    target: &Tensor,
    lambda: f64,
) -> Result<GeneratorLoss> {
    let adversarial = lsgan_generator(&d.forward(&batch.generated)?)?;
    let l1 = l1(x_hat, target)?;
    let total = (&adversarial + (&l1 * lambda)?)?;
    Ok(GeneratorLoss {
        total,
        adversarial,
        l1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, DType};

    fn scalar(t: &Tensor) -> f32 {
        t.to_scalar::<f32>().unwrap()
    }

    #[test]
    fn perfect_discriminator_has_zero_loss() {
        let ones = Tensor::ones((8, 1, 5, 5), DType::F32, &Device::Cpu).unwrap();
        let zeros = Tensor::zeros((8, 1, 5, 5), DType::F32, &Device::Cpu).unwrap();
        assert_eq!(scalar(&lsgan_discriminator(&ones, &zeros).unwrap()), 0.0);
    }

    #[test]
    fn constant_half_map() {
        let half = Tensor::full(0.5f32, (8, 1, 3, 3), &Device::Cpu).unwrap();
        assert_eq!(scalar(&lsgan_discriminator(&half, &half).unwrap()), 0.5);
        assert_eq!(scalar(&lsgan_generator(&half).unwrap()), 0.25);
    }

    #[test]
    fn l1_scaling_and_shape_guard() {
        let t = Tensor::full(0.3f32, (1, 3, 4, 4), &Device::Cpu).unwrap();
        let shifted = (&t + 0.1).unwrap();
        let v = scalar(&l1(&shifted, &t).unwrap());
        assert!((v - 0.1).abs() < 1e-6);
        let other = Tensor::zeros((1, 3, 4, 5), DType::F32, &Device::Cpu).unwrap();
        assert!(l1(&t, &other).is_err());
    }

    #[test]
    fn empty_sets_are_contract_violations() {
        let empty = Tensor::zeros((0, 1, 3, 3), DType::F32, &Device::Cpu).unwrap();
        let ones = Tensor::ones((1, 1, 3, 3), DType::F32, &Device::Cpu).unwrap();
        assert!(lsgan_discriminator(&empty, &ones).is_err());
        assert!(lsgan_discriminator(&ones, &empty).is_err());
        assert!(lsgan_generator(&empty).is_err());
    }
}
