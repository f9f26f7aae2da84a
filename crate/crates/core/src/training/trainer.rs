//! The alternating discriminator/generator optimisation loop.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::mpsc;
use std::thread;

use candle_core::Tensor;
use candle_nn::{AdamW, Optimizer, ParamsAdamW, VarMap};
use serde::{Deserialize, Serialize};

use super::batch::{form_hybrid_batch, HybridBatch};
use super::losses::{loss_discriminator, loss_generator};
use super::{TrainingConfig, TrainingMode};
use crate::datasets::{ImageTensor, PairedItem, PairedSplit};
use crate::networks::checkpoint::CheckpointSnapshot;
use crate::networks::{
    fresh_discriminator, fresh_generator, parameter_fingerprint, CheckpointManifest, Discriminator,
    DiscriminatorConfig, Generator, GeneratorConfig,
};
use crate::patch_index::{PatchGeometry, PatchMatcher};
use crate::{util, Error, Result};

pub const LOG_FILE: &str = "log.jsonl";
pub const RUN_MANIFEST_FILE: &str = "manifest.json";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const FINAL_CHECKPOINT: &str = "final";
/// Hybrid steps without a single matched patch differing from its target
/// before the run is flagged as silently degenerate.
pub const SUPERVISION_WINDOW: u64 = 100;

const DISCRIMINATOR_SEED_SALT: u64 = 0x9E37_79B9_7F4A_7C15;
const ADAM_EPS: f64 = 1e-8;

/// One optimisation step's telemetry; one line of `log.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// 1-based count of completed generator steps.
    pub step: u64,
    pub epoch: u64,
    pub loss_d: f32,
    pub loss_g: f32,
    pub loss_g_adv: f32,
    /// Unweighted mean absolute error of the generator output.
    pub loss_g_l1: f32,
    /// Squared feature distance of each generated patch to its match; empty
    /// in enhanced-only mode.
    pub match_distances: Vec<f32>,
    pub match_ids: Vec<usize>,
    /// At least one matched patch differs from its positional target.
    pub matched_differs: bool,
    /// Parameter hashes were compared around both optimiser steps.
    pub isolation_checked: bool,
    pub stems: Vec<String>,
}

/// Written next to the log when a loss becomes non-finite.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NonFiniteDump {
    pub step: u64,
    pub epoch: u64,
    pub stage: String,
    pub loss_d: f32,
    pub loss_g: Option<f32>,
    pub loss_g_adv: Option<f32>,
    pub loss_g_l1: Option<f32>,
    pub stems: Vec<String>,
    pub match_distances: Vec<f32>,
    pub generator_fingerprint: u64,
    pub discriminator_fingerprint: u64,
}

/// Run-level metadata; rewritten when the run ends.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: TrainingConfig,
    pub generator_config: GeneratorConfig,
    pub generator_config_hash: String,
    pub discriminator_config: DiscriminatorConfig,
    pub discriminator_seed: u64,
    pub geometry: PatchGeometry,
    pub index_backbone: Option<String>,
    pub index_entries: Option<usize>,
    pub pairs: usize,
    pub excluded_pairs: usize,
    pub planned_steps: u64,
    pub completed_steps: u64,
    pub checkpoints: Vec<PathBuf>,
    /// Windows of hybrid steps in which no match differed from its target.
    pub supervision_warnings: u64,
    pub finished: bool,
}

/// Owns both networks, their optimisers and (in hybrid mode) the matcher.
pub struct Trainer {
    config: TrainingConfig,
    geometry: PatchGeometry,
    g_vars: VarMap,
    generator: Generator,
    d_vars: VarMap,
    discriminator: Discriminator,
    opt_g: AdamW,
    opt_d: AdamW,
    matcher: Option<PatchMatcher>,
    step: u64,
    dump_dir: Option<PathBuf>,
}

impl Trainer {
    pub fn new(config: TrainingConfig, matcher: Option<PatchMatcher>) -> Result<Self> {
        Self::with_networks(config, GeneratorConfig::default(), DiscriminatorConfig::default(), matcher)
    }

    pub fn with_networks(
        config: TrainingConfig,
        g_config: GeneratorConfig,
        d_config: DiscriminatorConfig,
        matcher: Option<PatchMatcher>,
    ) -> Result<Self> {
        config.validate()?;
        let geometry = config.geometry()?;
        if config.mode == TrainingMode::Hybrid {
            let m = matcher
                .as_ref()
                .ok_or_else(|| Error::Config("hybrid mode requires a patch index".into()))?;
            if m.geometry() != geometry {
                return Err(Error::Config(format!(
                    "index geometry {:?} differs from training geometry {geometry:?}",
                    m.geometry()
                )));
            }
        }
        let (g_vars, generator) = fresh_generator(&g_config, config.seed)?;
        let (d_vars, discriminator) = fresh_discriminator(&d_config, discriminator_seed(config.seed))?;
        let params = ParamsAdamW {
            lr: config.lr,
            beta1: config.beta1,
            beta2: config.beta2,
            eps: ADAM_EPS,
            weight_decay: 0.0,
        };
        let opt_g = AdamW::new(g_vars.all_vars(), params.clone())?;
        let opt_d = AdamW::new(d_vars.all_vars(), params)?;
        Ok(Self {
            config,
            geometry,
            g_vars,
            generator,
            d_vars,
            discriminator,
            opt_g,
            opt_d,
            matcher,
            step: 0,
            dump_dir: None,
        })
    }

    pub fn config(&self) -> &TrainingConfig {
        &self.config
    }

    pub fn geometry(&self) -> PatchGeometry {
        self.geometry
    }

    pub fn generator(&self) -> &Generator {
        &self.generator
    }

    pub fn discriminator(&self) -> &Discriminator {
        &self.discriminator
    }

    pub fn generator_vars(&self) -> &VarMap {
        &self.g_vars
    }

    pub fn discriminator_vars(&self) -> &VarMap {
        &self.d_vars
    }

    pub fn matcher(&self) -> Option<&PatchMatcher> {
        self.matcher.as_ref()
    }

    pub fn steps_completed(&self) -> u64 {
        self.step
    }

    /// Directory that receives a dump when a loss turns non-finite.
    pub fn set_dump_dir(&mut self, dir: impl Into<PathBuf>) {
        self.dump_dir = Some(dir.into());
    }

    pub fn form_batch(&self, x: &Tensor, target: &Tensor) -> Result<HybridBatch> {
        form_hybrid_batch(x, target, &self.generator, self.matcher.as_ref(), self.config.mode, &self.geometry)
    }

    /// One discriminator step followed by one generator step on an aligned
    /// B×3×H×W pair of batches.
    pub fn step(&mut self, x: &Tensor, target: &Tensor, epoch: u64, stems: Vec<String>) -> Result<StepRecord> {
        let verify = self.config.verify_isolation;
        let step = self.step + 1;
        let batch = self.form_batch(x, target)?;
        let match_distances: Vec<f32> = batch.matches.iter().map(|m| m.distance).collect();

        let loss_d = loss_discriminator(&self.discriminator, &batch)?;
        let loss_d_val = loss_d.to_scalar::<f32>()?;
        if !loss_d_val.is_finite() {
            let dump = self.dump(step, epoch, "discriminator", loss_d_val, None, &stems, &match_distances)?;
            return Err(non_finite(dump));
        }
        let g_before = verify.then(|| parameter_fingerprint(&self.g_vars)).transpose()?;
        self.opt_d.backward_step(&loss_d)?;
        if let Some(before) = g_before {
            if parameter_fingerprint(&self.g_vars)? != before {
                return Err(Error::IsolationViolation(format!(
                    "discriminator step {step} changed generator parameters"
                )));
            }
        }

        let g_loss = loss_generator(
            &self.discriminator,
            &batch,
            &batch.generated_image,
            target,
            self.config.lambda_l1,
        )?;
        let total = g_loss.total.to_scalar::<f32>()?;
        let adv = g_loss.adversarial.to_scalar::<f32>()?;
        let l1 = g_loss.l1.to_scalar::<f32>()?;
        if !(total.is_finite() && adv.is_finite() && l1.is_finite()) {
            let dump = self.dump(step, epoch, "generator", loss_d_val, Some((total, adv, l1)), &stems, &match_distances)?;
            return Err(non_finite(dump));
        }
        let d_before = verify.then(|| parameter_fingerprint(&self.d_vars)).transpose()?;
        self.opt_g.backward_step(&g_loss.total)?;
        if let Some(before) = d_before {
            if parameter_fingerprint(&self.d_vars)? != before {
                return Err(Error::IsolationViolation(format!(
                    "generator step {step} changed discriminator parameters"
                )));
            }
        }

        self.step = step;
        Ok(StepRecord {
            step,
            epoch,
            loss_d: loss_d_val,
            loss_g: total,
            loss_g_adv: adv,
            loss_g_l1: l1,
            matched_differs: batch.matches.iter().any(|m| m.differs_from_target),
            match_ids: batch.matches.iter().map(|m| m.index_id).collect(),
            match_distances,
            isolation_checked: verify,
            stems,
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn dump(
        &self,
        step: u64,
        epoch: u64,
        stage: &str,
        loss_d: f32,
        g: Option<(f32, f32, f32)>,
        stems: &[String],
        match_distances: &[f32],
    ) -> Result<NonFiniteDump> {
        let dump = NonFiniteDump {
            step,
            epoch,
            stage: stage.to_string(),
            loss_d,
            loss_g: g.map(|v| v.0),
            loss_g_adv: g.map(|v| v.1),
            loss_g_l1: g.map(|v| v.2),
            stems: stems.to_vec(),
            match_distances: match_distances.to_vec(),
            generator_fingerprint: parameter_fingerprint(&self.g_vars)?,
            discriminator_fingerprint: parameter_fingerprint(&self.d_vars)?,
        };
        if let Some(dir) = &self.dump_dir {
            util::write_json(&dir.join(format!("nonfinite_step{step}.json")), &dump)?;
        }
        Ok(dump)
    }

    fn checkpoint_manifest(&self, epoch: u64) -> CheckpointManifest {
        let mut m = CheckpointManifest::for_generator(self.generator.config(), self.config.seed)
            .with_discriminator(self.discriminator.config());
        m.epoch = epoch;
        m.step = self.step;
        m.mode = Some(self.config.mode.to_string());
        m
    }

    /// Trains over `split` until the configured epochs or `max_steps` run out,
    /// writing `log.jsonl`, `manifest.json` and `checkpoints/` under `run_dir`.
    pub fn train(&mut self, split: &PairedSplit, run_dir: &Path) -> Result<RunSummary> {
        if split.is_empty() {
            return Err(Error::EmptyDataset(format!("{} split has no pairs", split.split.as_str())));
        }
        util::create_dir_all(run_dir)?;
        let ckpt_root = run_dir.join(CHECKPOINT_DIR);
        util::create_dir_all(&ckpt_root)?;
        self.set_dump_dir(run_dir);
        split.report.write_to(&run_dir.join("pairing_report.txt"))?;

        let planned = self.config.total_steps(split.len());
        let mut manifest = RunManifest {
            config: self.config.clone(),
            generator_config: self.generator.config().clone(),
            generator_config_hash: self.generator.config().hash(),
            discriminator_config: self.discriminator.config().clone(),
            discriminator_seed: discriminator_seed(self.config.seed),
            geometry: self.geometry,
            index_backbone: self.matcher.as_ref().map(|m| m.backbone().id().to_string()),
            index_entries: self.matcher.as_ref().map(|m| m.index().len()),
            pairs: split.len(),
            excluded_pairs: split.report.excluded_count(),
            planned_steps: planned,
            completed_steps: 0,
            checkpoints: Vec::new(),
            supervision_warnings: 0,
            finished: false,
        };
        let manifest_path = run_dir.join(RUN_MANIFEST_FILE);
        util::write_json(&manifest_path, &manifest)?;

        let log_path = run_dir.join(LOG_FILE);
        let mut log = BufWriter::new(File::create(&log_path).map_err(|e| Error::io(&log_path, e))?);

        let schedule = self.schedule(split, planned);
        let resolution = self.config.resolution();
        let result = thread::scope(|scope| -> Result<Vec<StepRecord>> {
            let (batch_tx, batch_rx) = mpsc::sync_channel::<Result<LoadedBatch>>(2);
            scope.spawn(move || {
                for (epoch, items) in schedule {
                    let loaded = load_batch(&items, resolution).map(|(x, t)| LoadedBatch {
                        epoch,
                        x,
                        target: t,
                        stems: items.iter().map(|p| p.stem.clone()).collect(),
                    });
                    if batch_tx.send(loaded).is_err() {
                        return;
                    }
                }
            });
            let (ckpt_tx, ckpt_rx) = mpsc::sync_channel::<CheckpointSnapshot>(1);
            let writer = scope.spawn(move || -> Result<()> {
                for snap in ckpt_rx {
                    snap.write()?;
                }
                Ok(())
            });

            let mut records = Vec::new();
            let mut since_differing = 0u64;
            let mut last_epoch = 0;
            let outcome = (|| -> Result<()> {
                for loaded in batch_rx {
                    let loaded = loaded?;
                    last_epoch = loaded.epoch;
                    let rec = self.step(&loaded.x, &loaded.target, loaded.epoch, loaded.stems)?;
                    serde_json::to_writer(&mut log, &rec)?;
                    log.write_all(b"\n").map_err(|e| Error::io(&log_path, e))?;
                    log.flush().map_err(|e| Error::io(&log_path, e))?;
                    if self.config.mode == TrainingMode::Hybrid {
                        since_differing = if rec.matched_differs { 0 } else { since_differing + 1 };
                        if since_differing == SUPERVISION_WINDOW {
                            log::warn!(
                                "no matched patch differed from its target over the last {SUPERVISION_WINDOW} steps"
                            );
                            manifest.supervision_warnings += 1;
                            since_differing = 0;
                        }
                    }
                    let interval = self.config.checkpoint_interval;
                    if interval > 0 && rec.step % interval == 0 && rec.step < planned {
                        let dir = ckpt_root.join(format!("step_{:08}", rec.step));
                        manifest.checkpoints.push(dir.clone());
                        let snap = CheckpointSnapshot::capture(
                            dir,
                            self.checkpoint_manifest(rec.epoch),
                            &self.g_vars,
                            Some(&self.d_vars),
                        )?;
                        ckpt_tx
                            .send(snap)
                            .map_err(|_| Error::Checkpoint("checkpoint writer stopped".into()))?;
                    }
                    records.push(rec);
                }
                Ok(())
            })();
            drop(ckpt_tx);
            let written = writer.join().expect("checkpoint writer panicked");
            outcome?;
            written?;
            let dir = ckpt_root.join(FINAL_CHECKPOINT);
            CheckpointSnapshot::capture(&dir, self.checkpoint_manifest(last_epoch), &self.g_vars, Some(&self.d_vars))?
                .write()?;
            manifest.checkpoints.push(dir);
            Ok(records)
        });

        manifest.completed_steps = self.step;
        manifest.finished = result.is_ok();
        util::write_json(&manifest_path, &manifest)?;
        let records = result?;
        Ok(RunSummary {
            run_dir: run_dir.to_path_buf(),
            records,
            manifest,
        })
    }

    /// Per-step items in visit order: seeded shuffles per epoch, grouped into
    /// batches and truncated to `planned` steps.
    fn schedule(&self, split: &PairedSplit, planned: u64) -> Vec<(u64, Vec<PairedItem>)> {
        let mut out = Vec::new();
        for epoch in 0..self.config.epochs {
            let order = split.ordered(self.config.seed, epoch);
            for chunk in order.chunks(self.config.batch_size) {
                if out.len() as u64 == planned {
                    return out;
                }
                out.push((epoch, chunk.iter().map(|p| (*p).clone()).collect()));
            }
        }
        out
    }
}

impl std::fmt::Debug for Trainer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Trainer")
            .field("config", &self.config)
            .field("geometry", &self.geometry)
            .field("step", &self.step)
            .finish_non_exhaustive()
    }
}

#[derive(Debug)]
pub struct RunSummary {
    pub run_dir: PathBuf,
    pub records: Vec<StepRecord>,
    pub manifest: RunManifest,
}

struct LoadedBatch {
    epoch: u64,
    x: Tensor,
    target: Tensor,
    stems: Vec<String>,
}

fn load_batch(items: &[PairedItem], resolution: crate::datasets::Resolution) -> Result<(Tensor, Tensor)> {
    let mut xs = Vec::with_capacity(items.len());
    let mut ts = Vec::with_capacity(items.len());
    for item in items {
        let (x, t): (ImageTensor, ImageTensor) = item.load(resolution)?;
        xs.push(x.into_tensor());
        ts.push(t.into_tensor());
    }
    Ok((Tensor::stack(&xs, 0)?, Tensor::stack(&ts, 0)?))
}

pub fn discriminator_seed(seed: u64) -> u64 {
    seed ^ DISCRIMINATOR_SEED_SALT
}

fn non_finite(dump: NonFiniteDump) -> Error {
    Error::NonFiniteLoss {
        step: dump.step,
        detail: format!(
            "{} loss non-finite (loss_d={}, loss_g={:?}, l1={:?}) on {:?}",
            dump.stage, dump.loss_d, dump.loss_g, dump.loss_g_l1, dump.stems
        ),
    }
}

/// Reads a `log.jsonl` back into step records.
pub fn read_log(path: &Path) -> Result<Vec<StepRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}
