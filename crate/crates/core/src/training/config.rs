use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::datasets::{Resolution, Split};
use crate::patch_index::PatchGeometry;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainingMode {
    /// Real set = positional target patches + index-matched real patches.
    #[default]
    Hybrid,
    /// Real set = positional target patches only; the index is never consulted.
    #[serde(alias = "enhanced-only")]
    EnhancedOnly,
}

impl fmt::Display for TrainingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TrainingMode::Hybrid => "hybrid",
            TrainingMode::EnhancedOnly => "enhanced_only",
        })
    }
}

impl FromStr for TrainingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "hybrid" => Ok(TrainingMode::Hybrid),
            "enhanced_only" | "eo" => Ok(TrainingMode::EnhancedOnly),
            other => Err(Error::Parameter(format!("unknown training mode `{other}`"))),
        }
    }
}

/// Training hyper-parameters and inputs, read from a flat TOML file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub lambda_l1: f64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epochs: u64,
    pub batch_size: usize,
    pub mode: TrainingMode,
    pub seed: u64,
    /// Write a checkpoint every this many steps; 0 keeps only the final one.
    pub checkpoint_interval: u64,
    /// Stop after this many optimisation steps even mid-epoch.
    pub max_steps: Option<u64>,
    pub height: usize,
    pub width: usize,
    /// Patch side; defaults to the standard patch scaled to the resolution.
    pub patch_size: Option<usize>,
    /// Hash both networks around every optimiser step to prove each step
    /// only touched its own network.
    pub verify_isolation: bool,
    pub synthetic_dir: Option<PathBuf>,
    pub enhanced_dir: Option<PathBuf>,
    pub split: Split,
    pub vgg_weights: Option<PathBuf>,
    /// Use a seeded random backbone instead of ImageNet weights.
    pub backbone_seed: Option<u64>,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            lambda_l1: 10.0,
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            epochs: 20,
            batch_size: 1,
            mode: TrainingMode::Hybrid,
            seed: 0,
            checkpoint_interval: 5000,
            max_steps: None,
            height: 512,
            width: 512,
            patch_size: None,
            verify_isolation: false,
            synthetic_dir: None,
            enhanced_dir: None,
            split: Split::Train,
            vgg_weights: None,
            backbone_seed: None,
        }
    }
}

impl TrainingConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Serde(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.lambda_l1 > 0.0 && self.lambda_l1.is_finite()) {
            return bad("lambda_l1 must be positive");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must lie in [0, 1)");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if self.height % 8 != 0 || self.width % 8 != 0 || self.height == 0 || self.width == 0 {
            return bad("training resolution must be a positive multiple of 8");
        }
        self.geometry()?;
        Ok(())
    }

    pub fn resolution(&self) -> Resolution {
        Resolution::new(self.height, self.width)
    }

    pub fn geometry(&self) -> Result<PatchGeometry> {
        match self.patch_size {
            Some(p) => PatchGeometry::new(self.resolution(), p),
            None => PatchGeometry::scaled(self.resolution()),
        }
    }

    /// Generator steps for a full run over `pairs` training pairs.
    pub fn total_steps(&self, pairs: usize) -> u64 {
        let per_epoch = pairs.div_ceil(self.batch_size) as u64;
        let total = per_epoch * self.epochs;
        self.max_steps.map_or(total, |m| m.min(total))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_published_settings() {
        let c = TrainingConfig::default();
        assert_eq!(c.lambda_l1, 10.0);
        assert_eq!(c.lr, 2e-4);
        assert_eq!((c.beta1, c.beta2), (0.5, 0.999));
        assert_eq!((c.epochs, c.batch_size), (20, 1));
        assert_eq!(c.geometry().unwrap(), PatchGeometry::standard());
    }

    #[test]
    fn full_run_step_count() {
        // 20 epochs over 9,549 training pairs at batch size 1.
        assert_eq!(TrainingConfig::default().total_steps(9_549), 190_980);
        let c = TrainingConfig {
            max_steps: Some(200),
            ..Default::default()
        };
        assert_eq!(c.total_steps(8), 160);
        let c = TrainingConfig {
            batch_size: 3,
            epochs: 1,
            ..Default::default()
        };
        assert_eq!(c.total_steps(8), 3);
    }

    #[test]
    fn flat_toml_round_trip() {
        let text = r#"
            lambda_l1 = 5.0
            mode = "enhanced-only"
            seed = 3
            height = 128
            width = 128
            max_steps = 10
            synthetic_dir = "/data/syn"
        "#;
        let c = TrainingConfig::from_toml_str(text).unwrap();
        assert_eq!(c.mode, TrainingMode::EnhancedOnly);
        assert_eq!(c.geometry().unwrap().patch, 49);
        let again = TrainingConfig::from_toml_str(&c.to_toml_string().unwrap()).unwrap();
        assert_eq!(again, c);
    }

    #[test]
    fn invalid_values_rejected() {
        for text in [
            "lambda_l1 = 0.0",
            "lr = -1.0",
            "batch_size = 0",
            "beta1 = 1.0",
            "height = 100",
            "unknown_key = 1",
            "height = 32\nwidth = 32\npatch_size = 20",
        ] {
            assert!(TrainingConfig::from_toml_str(text).is_err(), "{text}");
        }
    }

    #[test]
    fn mode_parsing() {
        assert_eq!("hybrid".parse::<TrainingMode>().unwrap(), TrainingMode::Hybrid);
        assert_eq!("enhanced-only".parse::<TrainingMode>().unwrap(), TrainingMode::EnhancedOnly);
        assert!("both".parse::<TrainingMode>().is_err());
    }
}
