//! `vdd` command-line runner: corpus generation, training (with ablation
//! switches), evaluation and feature-map dumps. Every run echoes its
//! effective configuration and the content hashes of its inputs into the
//! output directory so results are reproducible from the artifacts alone.

mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use vdd_core::eval::evaluate_corpus_with_dump;
use vdd_core::model::{file_digest, hex_digest, write_file, Detector};
use vdd_core::synth::{build_corpus, corpus_digest, png_bytes_to_image};
use vdd_core::train::Trainer;
use vdd_core::viz::viz_features;

use config::{apply_ablations, load_effective_config, FileConfig};

#[derive(Parser)]
#[command(name = "vdd", version, about = "Domain-adaptive detection experiments on a synthetic corpus")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// JSON config file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set train.lr_phase1=0.0005`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Master seed shorthand (sets corpus.master_seed and train.seed).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic source/target corpus.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train a detector (VDD by default; see --ablation and --set).
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Corpus directory produced by gen-data.
        #[arg(long)]
        corpus: PathBuf,
        /// Comma-separated ablation switches:
        /// one-step,no-ortho,grl,eq6-literal.
        #[arg(long, value_delimiter = ',')]
        ablation: Vec<String>,
    },
    /// Evaluate a checkpoint on an annotated split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Split name, e.g. target_eval, target_eval_dusk, source_train.
        #[arg(long)]
        split: String,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Dump selected-channel feature maps and the detection overlay.
    VizFeatures {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}

fn echo_config(out: &PathBuf, cfg: &FileConfig) -> Result<String> {
    let json = serde_json::to_string_pretty(cfg)?;
    write_file(&out.join("config_echo.json"), json.as_bytes())?;
    Ok(hex_digest(json.as_bytes()))
}

fn write_run_info(out: &PathBuf, entries: &[(&str, String)]) -> Result<()> {
    let map: serde_json::Map<String, serde_json::Value> = entries
        .iter()
        .map(|(k, v)| (k.to_string(), serde_json::Value::String(v.clone())))
        .collect();
    let json = serde_json::to_string_pretty(&serde_json::Value::Object(map))?;
    write_file(&out.join("run_info.json"), json.as_bytes())?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { cfg } => {
            let mut effective = load_effective_config(cfg.config.as_deref(), &cfg.set)?;
            if let Some(seed) = cfg.seed {
                effective.corpus.master_seed = seed;
            }
            let config_sha = echo_config(&cfg.out, &effective)?;
            let manifest = build_corpus(&effective.corpus, &cfg.out)?;
            write_run_info(
                &cfg.out,
                &[
                    ("config_sha256", config_sha),
                    ("corpus_sha256", corpus_digest(&cfg.out)?),
                ],
            )?;
            println!(
                "corpus written to {} ({} files)",
                cfg.out.display(),
                manifest.files.len()
            );
            Ok(())
        }
        Command::Train {
            cfg,
            corpus,
            ablation,
        } => {
            let mut effective = load_effective_config(cfg.config.as_deref(), &cfg.set)?;
            if let Some(seed) = cfg.seed {
                effective.train.seed = seed;
            }
            apply_ablations(&mut effective.train, &ablation)?;
            let config_sha = echo_config(&cfg.out, &effective)?;
            write_run_info(
                &cfg.out,
                &[
                    ("config_sha256", config_sha),
                    ("corpus_sha256", corpus_digest(&corpus)?),
                ],
            )?;
            let mut trainer = Trainer::new(effective.train.clone(), &corpus)?;
            let final_ckpt = trainer.run(&cfg.out)?;
            println!("final checkpoint: {}", final_ckpt.display());
            Ok(())
        }
        Command::Eval {
            checkpoint,
            corpus,
            split,
            out,
        } => {
            let detector = Detector::load_checkpoint(&checkpoint)?;
            let (table, dump) = evaluate_corpus_with_dump(&detector, &corpus, &split)?;
            let table_json = serde_json::to_string_pretty(&table)?;
            write_file(&out.join(format!("eval_{split}.json")), table_json.as_bytes())?;
            write_file(
                &out.join(format!("eval_{split}.txt")),
                table.render_text().as_bytes(),
            )?;
            let mut lines = String::new();
            for rec in &dump {
                lines.push_str(&serde_json::to_string(rec)?);
                lines.push('\n');
            }
            write_file(&out.join(format!("detections_{split}.jsonl")), lines.as_bytes())?;
            write_run_info(
                &out,
                &[
                    ("checkpoint_sha256", file_digest(&checkpoint)?),
                    ("corpus_sha256", corpus_digest(&corpus)?),
                    ("split", split.clone()),
                ],
            )?;
            print!("{}", table.render_text());
            println!("mAP: {:.4}", table.map);
            Ok(())
        }
        Command::VizFeatures {
            checkpoint,
            image,
            out,
        } => {
            let detector = Detector::load_checkpoint(&checkpoint)?;
            let bytes = std::fs::read(&image)
                .with_context(|| format!("reading {}", image.display()))?;
            let img = png_bytes_to_image(&bytes)?;
            let (_, h, w) = img.dim();
            if h != detector.cfg.image_size || w != detector.cfg.image_size {
                bail!(
                    "image is {w}x{h} but the checkpoint was trained for {0}x{0}",
                    detector.cfg.image_size
                );
            }
            let stem = image
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or("image")
                .to_string();
            let paths = viz_features(&detector, &img, &out, &stem)?;
            for p in paths {
                println!("wrote {}", p.display());
            }
            Ok(())
        }
    }
}
