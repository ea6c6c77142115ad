//! Command-line entry point: manifest tooling, spectral preprocessing,
//! two-stage training, evaluation, and the synthetic dataset generator.

use std::fs;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use streid::data::imageio::{load_image, resize, save_image};
use streid::data::manifest::{load_manifest, scan_tree, write_manifest, Split};
use streid::error::{Error, Result};
use streid::evaluator::{evaluate, evaluate_subsampled, extract_features, DEFAULT_MAX_RANK};
use streid::spectral::{build_mask, dct2, derive_seed, extract_dii, make_spi, MaskParams};
use streid::synth::{generate, SynthSpec};
use streid::trainer::{parse_config, train_stage1, train_stage2, TrainConfig};

#[derive(Parser)]
#[command(
    name = "streid",
    about = "Two-stage domain-generalizable re-identification trainer",
    version
)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct GlobalArgs {
    /// Master random seed; overrides the config file's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Flat key = value training config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Force fully deterministic single-worker execution (always on in this
    /// build; accepted for interface stability).
    #[arg(long, global = true)]
    deterministic: bool,
    /// Append JSON-lines logs to this file instead of stdout.
    #[arg(long, global = true)]
    log: Option<PathBuf>,
    /// Suppress progress logging.
    #[arg(long, global = true)]
    quiet: bool,
    /// Extra diagnostics.
    #[arg(long, global = true)]
    verbose: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Scan an `<id>/<camera>_<seq>.<ext>` tree into a JSONL manifest.
    MakeManifest {
        #[arg(long)]
        root: PathBuf,
        #[arg(long, value_parser = parse_split)]
        split: Split,
        #[arg(long)]
        out: PathBuf,
    },
    /// Materialize DII or SPI images to disk for a manifest.
    Preprocess {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// "dii" or "spi".
        #[arg(long)]
        mode: String,
        /// Square working size for the spectral transform.
        #[arg(long, default_value_t = 48)]
        size: usize,
    },
    /// Report the band-energy split of one image under the band-pass mask.
    InspectSpectrum {
        #[arg(long)]
        image: PathBuf,
        #[arg(long, default_value_t = 48)]
        size: usize,
    },
    /// Run one training stage.
    Train {
        #[arg(long)]
        stage: u8,
        #[arg(long)]
        manifest: PathBuf,
        /// Stage-1 checkpoint (required for stage 2).
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint under the single-query protocol.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        query_manifest: PathBuf,
        #[arg(long)]
        gallery_manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_MAX_RANK)]
        max_rank: usize,
        /// Subsampled-gallery preset: gallery size per trial.
        #[arg(long)]
        subsample_size: Option<usize>,
        #[arg(long, default_value_t = 10)]
        subsample_trials: usize,
    },
    /// Generate the synthetic two-style domain-shift dataset.
    SynthDataset {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        ids: usize,
        #[arg(long, default_value_t = 4)]
        cameras: usize,
        #[arg(long, default_value_t = 4)]
        images_per: usize,
        #[arg(long, default_value_t = 2)]
        styles: usize,
        #[arg(long, default_value_t = 32)]
        image_size: usize,
    },
}

fn parse_split(s: &str) -> std::result::Result<Split, String> {
    match s {
        "source" => Ok(Split::Source),
        "target" => Ok(Split::Target),
        other => Err(format!("expected \"source\" or \"target\", got {other:?}")),
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            // Help/version are successes; bad usage is a validation failure.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    match run(cli) {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.exit_code());
        }
    }
}

fn load_train_config(global: &GlobalArgs) -> Result<TrainConfig> {
    let mut cfg = match &global.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            parse_config(&text)?
        }
        None => TrainConfig::default(),
    };
    if let Some(seed) = global.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn fnv_hash(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

fn run(cli: Cli) -> Result<()> {
    let global = &cli.global;
    match cli.command {
        Command::MakeManifest { root, split, out } => {
            let (entries, skipped) = scan_tree(&root, split)?;
            if entries.is_empty() {
                return Err(Error::validation(format!(
                    "no images found under {}",
                    root.display()
                )));
            }
            write_manifest(&out, &entries)?;
            if !global.quiet {
                println!(
                    "{}",
                    serde_json::json!({
                        "manifest": out,
                        "records": entries.len(),
                        "skipped": skipped.len(),
                    })
                );
            }
            Ok(())
        }
        Command::Preprocess {
            manifest,
            out_dir,
            mode,
            size,
        } => {
            if mode != "dii" && mode != "spi" {
                return Err(Error::validation(format!(
                    "mode must be \"dii\" or \"spi\", got {mode:?}"
                )));
            }
            let dataset = load_manifest(&manifest)?;
            let mask = build_mask(size, size, MaskParams::default())?;
            let seed = global.seed.unwrap_or(0);
            let mut entries = Vec::new();
            for (i, rec) in dataset.records.iter().enumerate() {
                let img = resize(&load_image(&rec.path)?, size, size);
                let processed = if mode == "dii" {
                    extract_dii(&img, &mask, true)?
                } else {
                    let spi = make_spi(&img, &mask, derive_seed(seed, 0, i as u64))?;
                    spi.mapv(|v| v.clamp(0.0, 1.0))
                };
                let rel = format!("{mode}/{i:06}.png");
                let path = out_dir.join(&rel);
                fs::create_dir_all(path.parent().unwrap()).map_err(|e| Error::io(&path, e))?;
                save_image(&path, &processed)?;
                entries.push(streid::data::manifest::ManifestEntry {
                    path: rel,
                    id: rec.raw_id,
                    camera: rec.raw_camera,
                    split: rec.split,
                });
            }
            let out_manifest = out_dir.join(format!("{mode}.jsonl"));
            write_manifest(&out_manifest, &entries)?;
            if !global.quiet {
                println!(
                    "{}",
                    serde_json::json!({"manifest": out_manifest, "records": entries.len()})
                );
            }
            Ok(())
        }
        Command::InspectSpectrum { image, size } => {
            let img = resize(&load_image(&image)?, size, size);
            let mask = build_mask(size, size, MaskParams::default())?;
            let (v1, v2, v3) = mask.cutoffs;
            let mut low = 0.0;
            let mut mid = 0.0;
            let mut high = 0.0;
            for c in 0..3 {
                let spec = dct2(&img.index_axis(ndarray::Axis(0), c).to_owned())?;
                for i in 0..size {
                    for j in 0..size {
                        let e = spec[(i, j)] * spec[(i, j)];
                        let r = i.max(j);
                        if r <= v1 {
                            low += e;
                        } else if r <= v2 {
                            mid += e;
                        } else {
                            high += e;
                        }
                    }
                }
            }
            let total = (low + mid + high).max(1e-300);
            println!(
                "{}",
                serde_json::json!({
                    "image": image,
                    "size": size,
                    "cutoffs": {"v1": v1, "v2": v2, "v3": v3},
                    "energy_fraction": {
                        "low": low / total,
                        "causal_mid": mid / total,
                        "high": high / total,
                    },
                })
            );
            Ok(())
        }
        Command::Train {
            stage,
            manifest,
            resume,
            out,
        } => {
            let cfg = load_train_config(global)?;
            let dataset = load_manifest(&manifest)?;
            fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            let mut log_file: Option<fs::File> = match &global.log {
                Some(p) => Some(
                    fs::OpenOptions::new()
                        .create(true)
                        .append(true)
                        .open(p)
                        .map_err(|e| Error::io(p, e))?,
                ),
                None => None,
            };
            let mut stdout = std::io::stdout();
            let log: Option<&mut dyn Write> = match (&mut log_file, global.quiet) {
                (Some(f), _) => Some(f),
                (None, false) => Some(&mut stdout),
                (None, true) => None,
            };
            match stage {
                1 => {
                    let ckpt = out.join("stage1.ckpt");
                    let outcome = train_stage1(&cfg, &dataset, &ckpt, log)?;
                    if !global.quiet {
                        println!(
                            "{}",
                            serde_json::json!({"checkpoint": ckpt, "steps": outcome.steps})
                        );
                    }
                    Ok(())
                }
                2 => {
                    let resume = resume.ok_or_else(|| {
                        Error::validation("stage 2 requires --resume <stage-1 checkpoint>")
                    })?;
                    let ckpt = out.join("stage2.ckpt");
                    let outcome = train_stage2(&cfg, &dataset, &resume, &ckpt, log)?;
                    if !global.quiet {
                        println!(
                            "{}",
                            serde_json::json!({"checkpoint": ckpt, "steps": outcome.steps})
                        );
                    }
                    Ok(())
                }
                other => Err(Error::validation(format!(
                    "--stage must be 1 or 2, got {other}"
                ))),
            }
        }
        Command::Eval {
            checkpoint,
            query_manifest,
            gallery_manifest,
            out,
            max_rank,
            subsample_size,
            subsample_trials,
        } => {
            if !checkpoint.exists() {
                return Err(Error::validation(format!(
                    "checkpoint not found: {}",
                    checkpoint.display()
                )));
            }
            let query_ds = load_manifest(&query_manifest)?;
            let gallery_ds = load_manifest(&gallery_manifest)?;
            let (query, cfg, warn) = extract_features(&checkpoint, &query_ds)?;
            let (gallery, _, _) = extract_features(&checkpoint, &gallery_ds)?;
            if warn {
                eprintln!(
                    "warning: evaluating a stage-1 checkpoint; features come from the \
                     untrained-for-retrieval image encoder"
                );
            }
            let report = match subsample_size {
                Some(size) => evaluate_subsampled(
                    &query,
                    &gallery,
                    size,
                    subsample_trials,
                    max_rank,
                    global.seed.unwrap_or(cfg.seed),
                )?,
                None => evaluate(&query, &gallery, max_rank)?,
            };
            let cfg_json =
                serde_json::to_string(&cfg).map_err(|e| Error::runtime(e.to_string()))?;
            let doc = serde_json::json!({
                "map": report.map,
                "cmc": report.cmc,
                "rank1": report.cmc.first(),
                "num_queries": report.num_queries,
                "dropped_queries": report.dropped_queries,
                "skipped_images": query.skipped + gallery.skipped,
                "protocol": report.protocol,
                "config_hash": format!("{:016x}", fnv_hash(cfg_json.as_bytes())),
            });
            fs::write(&out, serde_json::to_string_pretty(&doc).unwrap())
                .map_err(|e| Error::io(&out, e))?;
            if !global.quiet {
                println!("{doc}");
            }
            Ok(())
        }
        Command::SynthDataset {
            out,
            ids,
            cameras,
            images_per,
            styles,
            image_size,
        } => {
            let spec = SynthSpec {
                num_ids: ids,
                num_cameras: cameras,
                images_per_id_per_camera: images_per,
                num_source_styles: styles,
                image_size,
                seed: global.seed.unwrap_or(7),
            };
            let result = generate(&spec, &out)?;
            if !global.quiet {
                println!(
                    "{}",
                    serde_json::json!({
                        "source_manifest": result.source_manifest,
                        "query_manifest": result.query_manifest,
                        "gallery_manifest": result.gallery_manifest,
                        "source_images": result.source_images,
                        "query_images": result.query_images,
                        "gallery_images": result.gallery_images,
                    })
                );
            }
            Ok(())
        }
    }
}

