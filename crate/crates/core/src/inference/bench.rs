//! Serial latency / throughput / peak-memory benchmark of the generator.
//!
//! Timing brackets the forward pass only, followed by a device
//! synchronisation. On CPU the memory column is the process's peak resident
//! set size, reset before each resolution when the kernel allows it.

use std::fmt::Write as _;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::datasets::Resolution;
use crate::networks::layers::IM2COL_BUDGET_BYTES;
use crate::networks::Generator;
use crate::{util, Error, Result};

/// Coefficient of variation above which a row is flagged as unstable.
pub const CV_FLAG: f64 = 0.10;
const INPUT_POOL: usize = 4;
const BYTES_PER_GB: f64 = 1e9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkConfig {
    pub runs: usize,
    pub warmup: usize,
    pub seed: u64,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            runs: 100,
            warmup: 10,
            seed: 0,
        }
    }
}

/// Mean and sample standard deviation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = if values.len() > 1 {
            values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        Self { mean, std: var.sqrt() }
    }

    pub fn cv(&self) -> f64 {
        if self.mean == 0.0 {
            0.0
        } else {
            self.std / self.mean
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum RowOutcome {
    Ok {
        latency_ms: Stat,
        fps: Stat,
        peak_memory_gb: Option<f64>,
        latency_cv: f64,
        /// Latency CV above [`CV_FLAG`]; reported, never fatal.
        unstable: bool,
        /// `|fps_mean - 1000 / latency_mean| <= fps_std`.
        fps_consistent: bool,
        samples_ms: Vec<f64>,
    },
    Failed {
        reason: String,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkRow {
    pub resolution: Resolution,
    pub warmup_runs: usize,
    pub timed_runs: usize,
    #[serde(flatten)]
    pub outcome: RowOutcome,
}

impl BenchmarkRow {
    pub fn latency_ms(&self) -> Option<Stat> {
        match &self.outcome {
            RowOutcome::Ok { latency_ms, .. } => Some(*latency_ms),
            RowOutcome::Failed { .. } => None,
        }
    }
}

/// Published figures for comparison only; never used as thresholds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceRow {
    pub resolution: Resolution,
    pub latency_ms: Stat,
    pub fps: Stat,
    pub memory_gb: f64,
    pub device: String,
}

pub fn published_reference() -> Vec<ReferenceRow> {
    let device = "NVIDIA RTX 4070 Super (published)".to_string();
    vec![
        ReferenceRow {
            resolution: Resolution::new(720, 1280),
            latency_ms: Stat { mean: 12.347, std: 0.279 },
            fps: Stat { mean: 81.03, std: 1.80 },
            memory_gb: 0.8,
            device: device.clone(),
        },
        ReferenceRow {
            resolution: Resolution::new(1080, 1920),
            latency_ms: Stat { mean: 29.642, std: 0.175 },
            fps: Stat { mean: 33.74, std: 0.20 },
            memory_gb: 1.5,
            device,
        },
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub device_descriptor: String,
    pub memory_label: String,
    pub rows: Vec<BenchmarkRow>,
    pub reference: Vec<ReferenceRow>,
}

impl BenchmarkReport {
    /// Mean latency strictly increases along the successful rows, in the
    /// order they were requested.
    pub fn latency_monotonic(&self) -> bool {
        let means: Vec<f64> = self.rows.iter().filter_map(|r| r.latency_ms()).map(|s| s.mean).collect();
        means.windows(2).all(|w| w[0] < w[1])
    }

    /// Plain-text table: Resolution | Latency ms | FPS | memory GB.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "device: {}", self.device_descriptor);
        let _ = writeln!(s, "memory column: {}", self.memory_label);
        let _ = writeln!(
            s,
            "{:<12} {:>22} {:>18} {:>10}  notes",
            "Resolution", "Latency (ms)", "FPS", "VRAM (GB)"
        );
        for row in &self.rows {
            let res = row.resolution.to_string();
            match &row.outcome {
                RowOutcome::Ok {
                    latency_ms,
                    fps,
                    peak_memory_gb,
                    unstable,
                    fps_consistent,
                    latency_cv,
                    ..
                } => {
                    let mem = peak_memory_gb.map_or("n/a".to_string(), |g| format!("{g:.2}"));
                    let mut notes = format!("runs={} warmup={}", row.timed_runs, row.warmup_runs);
                    if *unstable {
                        let _ = write!(notes, " UNSTABLE(cv={:.1}%)", latency_cv * 100.0);
                    }
                    if !fps_consistent {
                        notes.push_str(" FPS-INCONSISTENT");
                    }
                    let _ = writeln!(
                        s,
                        "{:<12} {:>22} {:>18} {:>10}  {}",
                        res,
                        format!("{:.3} ± {:.3}", latency_ms.mean, latency_ms.std),
                        format!("{:.2} ± {:.2}", fps.mean, fps.std),
                        mem,
                        notes
                    );
                }
                RowOutcome::Failed { reason } => {
                    let _ = writeln!(s, "{:<12} {:>22} {:>18} {:>10}  FAILED: {}", res, "-", "-", "-", reason);
                }
            }
        }
        if !self.reference.is_empty() {
            let _ = writeln!(s, "reference (not comparable hardware):");
            for r in &self.reference {
                let _ = writeln!(
                    s,
                    "{:<12} {:>22} {:>18} {:>10}  {}",
                    r.resolution.to_string(),
                    format!("{:.3} ± {:.3}", r.latency_ms.mean, r.latency_ms.std),
                    format!("{:.2} ± {:.2}", r.fps.mean, r.fps.std),
                    format!("{:.1}", r.memory_gb),
                    r.device
                );
            }
        }
        s
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn read_status_kb(field: &str) -> Option<u64> {
    let text = fs::read_to_string("/proc/self/status").ok()?;
    text.lines()
        .find(|l| l.starts_with(field))?
        .split_whitespace()
        .nth(1)?
        .parse()
        .ok()
}

fn mem_available_bytes() -> Option<u64> {
    let text = fs::read_to_string("/proc/meminfo").ok()?;
    let kb: u64 = text
        .lines()
        .find(|l| l.starts_with("MemAvailable:"))?
        .split_whitespace()
        .nth(1)?
        .parse()
        .ok()?;
    Some(kb * 1024)
}

/// Resets the peak-RSS watermark; false when the kernel refuses.
fn reset_peak_rss() -> bool {
    fs::write("/proc/self/clear_refs", "5").is_ok()
}

fn cpu_descriptor() -> String {
    let model = fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|t| {
            t.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split_once(':'))
                .map(|(_, v)| v.trim().to_string())
        })
        .unwrap_or_else(|| "unknown cpu".into());
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
    format!("cpu: {model} ({threads} threads)")
}

/// Rough upper bound on the working set of one forward pass, used to skip
/// resolutions that cannot fit instead of letting the process be killed.
pub fn estimate_forward_bytes(resolution: Resolution) -> u64 {
    (resolution.pixels() as u64) * 4 * 64 + IM2COL_BUDGET_BYTES as u64
}

fn time_resolution(
    generator: &Generator,
    device: &Device,
    resolution: Resolution,
    config: &BenchmarkConfig,
    stream: u64,
) -> Result<(Vec<f64>, Option<f64>, bool)> {
    let mut rng = util::rng(config.seed, stream);
    let n = 3 * resolution.pixels();
    let inputs: Vec<Tensor> = (0..INPUT_POOL.min(config.runs + config.warmup).max(1))
        .map(|_| {
            let v = util::normal_vec(&mut rng, n, 0.0, 0.5).into_iter().map(|x| x.clamp(-1.0, 1.0)).collect();
            Tensor::from_vec(v, (1, 3, resolution.height, resolution.width), device)
        })
        .collect::<candle_core::Result<_>>()?;
    let reset = reset_peak_rss();
    for i in 0..config.warmup {
        generator.forward(&inputs[i % inputs.len()])?;
        device.synchronize()?;
    }
    let mut samples = Vec::with_capacity(config.runs);
    for i in 0..config.runs {
        let x = &inputs[i % inputs.len()];
        let start = Instant::now();
        let y = generator.forward(x)?;
        device.synchronize()?;
        samples.push(start.elapsed().as_secs_f64() * 1e3);
        drop(y);
    }
    let peak = read_status_kb("VmHWM:").map(|kb| kb as f64 * 1024.0 / BYTES_PER_GB);
    Ok((samples, peak, reset))
}

/// Benchmarks each resolution in order, strictly serially. A resolution that
/// cannot run is recorded as failed and the remaining ones still run.
pub fn benchmark(generator: &Generator, resolutions: &[Resolution], config: &BenchmarkConfig) -> Result<BenchmarkReport> {
    if config.runs == 0 {
        return Err(Error::Parameter("benchmark needs at least one timed run".into()));
    }
    let device = Device::Cpu;
    let mut rows = Vec::with_capacity(resolutions.len());
    let mut watermark_reset = true;
    for (i, &res) in resolutions.iter().enumerate() {
        let outcome = if let Err(e) = generator.check_resolution(res.height, res.width) {
            RowOutcome::Failed { reason: e.to_string() }
        } else if let Some(avail) = mem_available_bytes().filter(|a| estimate_forward_bytes(res) > *a) {
            RowOutcome::Failed {
                reason: format!(
                    "out of memory: needs ~{:.2} GB, {:.2} GB available",
                    estimate_forward_bytes(res) as f64 / BYTES_PER_GB,
                    avail as f64 / BYTES_PER_GB
                ),
            }
        } else {
            match catch_unwind(AssertUnwindSafe(|| time_resolution(generator, &device, res, config, i as u64))) {
                Ok(Ok((samples, peak, reset))) => {
                    watermark_reset &= reset;
                    let latency = Stat::of(&samples);
                    let fps_samples: Vec<f64> = samples.iter().map(|ms| 1000.0 / ms).collect();
                    let fps = Stat::of(&fps_samples);
                    let fps_consistent = (fps.mean - 1000.0 / latency.mean).abs() <= fps.std + 1e-9 * fps.mean;
                    RowOutcome::Ok {
                        latency_ms: latency,
                        fps,
                        peak_memory_gb: peak,
                        latency_cv: latency.cv(),
                        unstable: latency.cv() > CV_FLAG,
                        fps_consistent,
                        samples_ms: samples,
                    }
                }
                Ok(Err(e)) => RowOutcome::Failed { reason: e.to_string() },
                Err(panic) => RowOutcome::Failed {
                    reason: panic
                        .downcast_ref::<String>()
                        .cloned()
                        .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                        .unwrap_or_else(|| "forward pass panicked".into()),
                },
            }
        };
        if let RowOutcome::Ok { unstable: true, latency_cv, .. } = &outcome {
            log::warn!("{res}: latency CV {:.1}% exceeds {:.0}%", latency_cv * 100.0, CV_FLAG * 100.0);
        }
        rows.push(BenchmarkRow {
            resolution: res,
            warmup_runs: config.warmup,
            timed_runs: config.runs,
            outcome,
        });
    }
    let memory_label = if watermark_reset {
        "peak resident set size per resolution (CPU; no device allocator)".to_string()
    } else {
        "peak resident set size over process lifetime (CPU; watermark reset unavailable)".to_string()
    };
    Ok(BenchmarkReport {
        device_descriptor: cpu_descriptor(),
        memory_label,
        rows,
        reference: published_reference(),
    })
}
