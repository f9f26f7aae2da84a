use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use simreal::datasets::{load_paired_split, DatasetKind, DatasetSpec, Resolution, Split};
use simreal::evaluation::{self, FeatureCache, InceptionV3, KidConfig};
use simreal::inference::{self, BenchmarkConfig, ResolutionPolicy};
use simreal::networks::checkpoint::write_initial_generator;
use simreal::networks::{GeneratorCheckpoint, GeneratorConfig};
use simreal::patch_index::{build_index, PatchGeometry, PatchIndex, PatchMatcher, Vgg16Features};
use simreal::training::{Trainer, TrainingConfig, TrainingMode};
use simreal::fixtures;

#[derive(Parser, Debug)]
#[command(name = "simreal", version, about = "Paired sim-to-real image enhancement with real-patch supervision")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write procedural synthetic / enhanced / real datasets.
    Fixtures {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        pairs: usize,
        #[arg(long, default_value_t = 16)]
        real: usize,
        #[arg(long, default_value = "128")]
        res: Resolution,
        #[arg(long, default_value = "train")]
        split: Split,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Embed the grid patches of every real-world image into an exact L2 index.
    IndexBuild {
        #[arg(long)]
        real: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Preprocess resolution, WIDTHxHEIGHT or a single side.
        #[arg(long, default_value = "512")]
        res: Resolution,
        /// Patch side; defaults to the standard patch scaled to `--res`.
        #[arg(long)]
        patch: Option<usize>,
        #[arg(long, conflicts_with = "backbone_seed")]
        vgg_weights: Option<PathBuf>,
        /// Use a seeded random VGG-16 instead of ImageNet weights.
        #[arg(long)]
        backbone_seed: Option<u64>,
    },
    /// Train the generator and discriminator.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        mode: Option<TrainingMode>,
        #[arg(long)]
        index: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        max_steps: Option<u64>,
    },
    /// Enhance every image in a directory with a trained generator.
    Enhance {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Resize to this resolution instead of reflect-padding to a multiple of 8.
        #[arg(long)]
        resize: Option<Resolution>,
    },
    /// Time the generator's forward pass at the given resolutions.
    Benchmark {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1280x720,1920x1080")]
        res: Vec<Resolution>,
        #[arg(long, default_value_t = 100)]
        runs: usize,
        #[arg(long, default_value_t = 10)]
        warmup: usize,
        /// Text table destination; a JSON copy is written alongside.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Kernel Inception Distance between two image directories.
    EvalKid {
        #[arg(long)]
        set_a: PathBuf,
        #[arg(long)]
        set_b: PathBuf,
        #[arg(long, default_value_t = 100)]
        subset: usize,
        #[arg(long, default_value_t = 100)]
        subsets: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, conflicts_with = "extractor_seed")]
        inception_weights: Option<PathBuf>,
        /// Use a seeded random InceptionV3 (smoke tests only; not comparable to published values).
        #[arg(long)]
        extractor_seed: Option<u64>,
        #[arg(long)]
        cache: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Contact sheets of generated patches and their nearest real patches.
    MatchReport {
        /// Generator checkpoint; without it the input patches themselves are matched.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        vgg_weights: Option<PathBuf>,
    },
    /// Write a freshly initialised generator checkpoint.
    InitCkpt {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn backbone(weights: Option<&Path>, seed: Option<u64>) -> Result<Vgg16Features> {
    Ok(match (weights, seed) {
        (Some(p), _) => Vgg16Features::from_safetensors(p)?,
        (None, Some(s)) => Vgg16Features::random(s)?,
        (None, None) => bail!("pass --vgg-weights <file> (ImageNet VGG-16, safetensors) or --backbone-seed <n>"),
    })
}

fn matcher(index_dir: &Path, weights: Option<&Path>) -> Result<PatchMatcher> {
    let index = PatchIndex::load(index_dir).with_context(|| format!("loading index {}", index_dir.display()))?;
    let vgg = Vgg16Features::for_index(&index.meta().backbone_id, weights)?;
    Ok(PatchMatcher::new(vgg, Arc::new(index))?)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Fixtures {
            out,
            pairs,
            real,
            res,
            split,
            seed,
        } => {
            let layout = fixtures::write_fixture_datasets(&out, split, pairs, real, res, seed)?;
            println!("{}", serde_json::to_string_pretty(&layout)?);
        }
        Command::IndexBuild {
            real,
            out,
            res,
            patch,
            vgg_weights,
            backbone_seed,
        } => {
            let vgg = backbone(vgg_weights.as_deref(), backbone_seed)?;
            let geometry = match patch {
                Some(p) => PatchGeometry::new(res, p)?,
                None => PatchGeometry::scaled(res)?,
            };
            let spec = DatasetSpec::new(&real, DatasetKind::Real, Split::Train);
            let index = build_index(&spec, &vgg, &geometry)?;
            index.save(&out)?;
            println!(
                "indexed {} patches (dim {}) from {} with {}",
                index.len(),
                index.dim(),
                real.display(),
                vgg.id()
            );
        }
        Command::Train {
            config,
            mode,
            index,
            out,
            max_steps,
        } => {
            let mut cfg = TrainingConfig::from_file(&config)?;
            if let Some(m) = mode {
                cfg.mode = m;
            }
            if max_steps.is_some() {
                cfg.max_steps = max_steps;
            }
            cfg.validate()?;
            let (Some(syn), Some(enh)) = (cfg.synthetic_dir.clone(), cfg.enhanced_dir.clone()) else {
                bail!("config must set synthetic_dir and enhanced_dir");
            };
            let matcher = match (cfg.mode, index) {
                (TrainingMode::Hybrid, None) => bail!("hybrid mode requires --index"),
                (TrainingMode::Hybrid, Some(dir)) => Some(matcher(&dir, cfg.vgg_weights.as_deref())?),
                (TrainingMode::EnhancedOnly, _) => None,
            };
            let split = load_paired_split(
                &DatasetSpec::new(syn, DatasetKind::Synthetic, cfg.split),
                &DatasetSpec::new(enh, DatasetKind::Enhanced, cfg.split),
                cfg.split,
            )?;
            for w in &split.report.warnings {
                log::warn!("{w}");
            }
            let mut trainer = Trainer::new(cfg, matcher)?;
            let summary = trainer.train(&split, &out)?;
            if let (Some(first), Some(last)) = (summary.records.first(), summary.records.last()) {
                println!(
                    "trained {} steps: l1 {:.4} -> {:.4}, loss_d {:.4} -> {:.4}",
                    summary.records.len(),
                    first.loss_g_l1,
                    last.loss_g_l1,
                    first.loss_d,
                    last.loss_d
                );
            }
            println!("run directory: {}", out.display());
        }
        Command::Enhance {
            ckpt,
            input,
            out,
            resize,
        } => {
            let ckpt = GeneratorCheckpoint::load(&ckpt, &GeneratorConfig::default())?;
            let inputs = evaluation::list_image_files(&input)?;
            if inputs.is_empty() {
                bail!("no images in {}", input.display());
            }
            let policy = resize.map_or(ResolutionPolicy::ReflectPad, ResolutionPolicy::Resize);
            let done = inference::enhance(&ckpt, &inputs, &out, policy)?;
            println!("enhanced {} images into {}", done.len(), out.display());
        }
        Command::Benchmark {
            ckpt,
            res,
            runs,
            warmup,
            report,
        } => {
            let ckpt = GeneratorCheckpoint::load(&ckpt, &GeneratorConfig::default())?;
            let cfg = BenchmarkConfig {
                runs,
                warmup,
                ..Default::default()
            };
            let result = inference::benchmark(&ckpt.generator, &res, &cfg)?;
            let table = result.to_table();
            print!("{table}");
            if !result.latency_monotonic() {
                log::warn!("mean latency is not monotonic in the requested resolution order");
            }
            if let Some(path) = report {
                std::fs::write(&path, &table).with_context(|| format!("writing {}", path.display()))?;
                let json = path.with_extension("json");
                std::fs::write(&json, result.to_json()?).with_context(|| format!("writing {}", json.display()))?;
            }
        }
        Command::EvalKid {
            set_a,
            set_b,
            subset,
            subsets,
            seed,
            inception_weights,
            extractor_seed,
            cache,
            out,
        } => {
            let net = match (inception_weights, extractor_seed) {
                (Some(p), _) => InceptionV3::from_safetensors(&p)?,
                (None, Some(s)) => InceptionV3::random(s)?,
                (None, None) => bail!("pass --inception-weights <file> or --extractor-seed <n>"),
            };
            let cache = cache.map(FeatureCache::new);
            let a = evaluation::cached_features(&net, &evaluation::list_image_files(&set_a)?, cache.as_ref(), 8)?;
            let b = evaluation::cached_features(&net, &evaluation::list_image_files(&set_b)?, cache.as_ref(), 8)?;
            let kid = evaluation::compute_kid(
                &a,
                &b,
                &KidConfig {
                    subset_size: subset,
                    n_subsets: subsets,
                    seed,
                },
            )?;
            let text = format!(
                "extractor: {}\n{}",
                a.extractor_id(),
                kid.to_text(&set_a.display().to_string(), &set_b.display().to_string())
            );
            print!("{text}");
            if let Some(path) = out {
                std::fs::write(&path, &text).with_context(|| format!("writing {}", path.display()))?;
            }
        }
        Command::MatchReport {
            ckpt,
            index,
            images,
            out,
            vgg_weights,
        } => {
            let m = matcher(&index, vgg_weights.as_deref())?;
            let generator = ckpt
                .map(|c| GeneratorCheckpoint::load(&c, &GeneratorConfig::default()))
                .transpose()?;
            let inputs = evaluation::list_image_files(&images)?;
            let sheets = evaluation::match_report(generator.as_ref().map(|g| &g.generator), &m, &inputs, &out)?;
            for s in &sheets {
                let d: Vec<String> = s.entries.iter().map(|e| e.label.clone()).collect();
                println!("{} -> {} [{}]", s.input.display(), s.sheet.display(), d.join(", "));
            }
        }
        Command::InitCkpt { out, seed } => {
            let manifest = write_initial_generator(&out, &GeneratorConfig::default(), seed)?;
            println!(
                "wrote untrained generator ({} parameters, config {}) to {}",
                manifest.generator_parameter_count,
                &manifest.generator_config_hash[..12],
                out.display()
            );
        }
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
