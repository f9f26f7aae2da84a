//! Kernel Inception Distance: the unbiased squared MMD under the cubic
//! polynomial kernel `k(x, y) = (xᵀy / d + 1)³`, averaged over random subsets.

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use super::FeatureSet;
use crate::{util, Error, Result};

/// KID values are conventionally reported multiplied by this factor.
pub const REPORT_SCALE: f64 = 100.0;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KidConfig {
    pub subset_size: usize,
    pub n_subsets: usize,
    pub seed: u64,
}

impl Default for KidConfig {
    fn default() -> Self {
        Self {
            subset_size: 100,
            n_subsets: 100,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KidResult {
    /// Mean of the per-subset estimates (unscaled).
    pub mean: f64,
    /// Population standard deviation of the per-subset estimates (unscaled).
    pub std: f64,
    pub subset_values: Vec<f64>,
    pub subset_size: usize,
    pub n_subsets: usize,
}

impl KidResult {
    pub fn mean_x100(&self) -> f64 {
        self.mean * REPORT_SCALE
    }

    pub fn std_x100(&self) -> f64 {
        self.std * REPORT_SCALE
    }

    pub fn to_text(&self, a: &str, b: &str) -> String {
        format!(
            "kid_x100: {:.4} ± {:.4}\nkid: {:.6e} ± {:.6e}\nscale: x{REPORT_SCALE}\nsubset_size: {}\nn_subsets: {}\nset_a: {a}\nset_b: {b}\n",
            self.mean_x100(),
            self.std_x100(),
            self.mean,
            self.std,
            self.subset_size,
            self.n_subsets
        )
    }
}

/// Row indices used for every subset, per set.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SubsetPlan {
    pub a: Vec<Vec<usize>>,
    pub b: Vec<Vec<usize>>,
}

impl SubsetPlan {
    /// Independent draws without replacement for each set and subset.
    pub fn random(n_a: usize, n_b: usize, config: &KidConfig) -> Result<Self> {
        check_subset(n_a.min(n_b), config)?;
        let draw = |n: usize, stream: u64| sample(&mut util::rng(config.seed, stream), n, config.subset_size).into_vec();
        Ok(Self {
            a: (0..config.n_subsets).map(|k| draw(n_a, 2 * k as u64)).collect(),
            b: (0..config.n_subsets).map(|k| draw(n_b, 2 * k as u64 + 1)).collect(),
        })
    }

    /// The same rows, in the same order, on both sides of every subset.
    pub fn identical(n: usize, config: &KidConfig) -> Result<Self> {
        let plan = Self::random(n, n, config)?;
        Ok(Self {
            b: plan.a.clone(),
            a: plan.a,
        })
    }

    pub fn swapped(&self) -> Self {
        Self {
            a: self.b.clone(),
            b: self.a.clone(),
        }
    }
}

fn check_subset(n: usize, config: &KidConfig) -> Result<()> {
    if config.subset_size < 2 {
        return Err(Error::Parameter("KID subset size must be at least 2".into()));
    }
    if config.n_subsets == 0 {
        return Err(Error::Parameter("KID needs at least one subset".into()));
    }
    if config.subset_size > n {
        return Err(Error::Parameter(format!(
            "KID subset size {} exceeds the smaller set ({n} rows)",
            config.subset_size
        )));
    }
    Ok(())
}

fn kernel(x: &[f32], y: &[f32]) -> f64 {
    let dot: f64 = x.iter().zip(y).map(|(a, b)| *a as f64 * *b as f64).sum();
    (dot / x.len() as f64 + 1.0).powi(3)
}

/// Unbiased MMD² between two row sets: within-set sums exclude the diagonal,
/// the cross term averages every pair.
pub fn mmd2_unbiased(x: &[&[f32]], y: &[&[f32]]) -> Result<f64> {
    let (m, n) = (x.len(), y.len());
    if m < 2 || n < 2 {
        return Err(Error::Parameter("unbiased MMD² needs at least two rows per set".into()));
    }
    let within = |rows: &[&[f32]]| {
        let mut s = 0.0;
        for i in 0..rows.len() {
            for j in i + 1..rows.len() {
                s += kernel(rows[i], rows[j]);
            }
        }
        2.0 * s / (rows.len() * (rows.len() - 1)) as f64
    };
    let mut cross = 0.0;
    for xi in x {
        for yj in y {
            cross += kernel(xi, yj);
        }
    }
    Ok(within(x) + within(y) - 2.0 * cross / (m * n) as f64)
}

/// KID over the subsets of an explicit plan.
pub fn kid_with_plan(a: &FeatureSet, b: &FeatureSet, plan: &SubsetPlan) -> Result<KidResult> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch {
            expected: a.dim(),
            actual: b.dim(),
        });
    }
    if plan.a.len() != plan.b.len() || plan.a.is_empty() {
        return Err(Error::Parameter("subset plan sides differ or are empty".into()));
    }
    let values = plan
        .a
        .iter()
        .zip(&plan.b)
        .map(|(ia, ib)| {
            let x: Vec<&[f32]> = ia.iter().map(|&i| a.row(i)).collect();
            let y: Vec<&[f32]> = ib.iter().map(|&i| b.row(i)).collect();
            mmd2_unbiased(&x, &y)
        })
        .collect::<Result<Vec<f64>>>()?;
    let k = values.len() as f64;
    let mean = values.iter().sum::<f64>() / k;
    let std = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / k).sqrt();
    Ok(KidResult {
        mean,
        std,
        subset_size: plan.a[0].len(),
        n_subsets: values.len(),
        subset_values: values,
    })
}

pub fn compute_kid(a: &FeatureSet, b: &FeatureSet, config: &KidConfig) -> Result<KidResult> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Parameter("KID needs two non-empty feature sets".into()));
    }
    let plan = SubsetPlan::random(a.len(), b.len(), config)?;
    kid_with_plan(a, b, &plan)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gaussian(n: usize, d: usize, mean: f32, seed: u64) -> FeatureSet {
        let v = util::normal_vec(&mut util::rng(seed, 0), n * d, mean, 1.0);
        FeatureSet::new(v, n, d, "test").unwrap()
    }

    #[test]
    fn subset_larger_than_set_is_rejected() {
        let a = gaussian(10, 4, 0.0, 1);
        let cfg = KidConfig {
            subset_size: 11,
            n_subsets: 2,
            seed: 0,
        };
        assert!(matches!(compute_kid(&a, &a, &cfg), Err(Error::Parameter(_))));
    }

    #[test]
    fn shifted_distribution_scores_higher() {
        let a = gaussian(60, 8, 0.0, 1);
        let b = gaussian(60, 8, 0.0, 2);
        let c = gaussian(60, 8, 1.0, 3);
        let cfg = KidConfig {
            subset_size: 30,
            n_subsets: 20,
            seed: 5,
        };
        let same = compute_kid(&a, &b, &cfg).unwrap().mean;
        let shifted = compute_kid(&a, &c, &cfg).unwrap().mean;
        assert!(same < shifted, "{same} vs {shifted}");
    }

    #[test]
    fn report_scale() {
        let r = KidResult {
            mean: 0.0341,
            std: 0.001,
            subset_values: vec![],
            subset_size: 2,
            n_subsets: 1,
        };
        assert!((r.mean_x100() - 3.41).abs() < 1e-12);
        assert!(r.to_text("a", "b").contains("kid_x100: 3.4100"));
    }
}
