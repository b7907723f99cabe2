use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use triplet_core::config::{default_keys, parse_with_overrides};
use triplet_core::dataset::Dataset;
use triplet_core::decoder::export_predictions;
use triplet_core::eval::evaluate_files;
use triplet_core::pipeline::{ablate, ablation_table, load_inputs, predict};
use triplet_core::synth::generate_synthetic_dataset;
use triplet_core::train::{train, Checkpoint};
use triplet_core::{Error, Result, RunConfig};

/// Overrides the configured output directory for every subcommand.
const OUTPUT_ROOT_ENV: &str = "TRIPLET_OUTPUT_ROOT";

#[derive(Parser)]
#[command(name = "triplet", version, about = "Instrument-verb-target triplet detection")]
#[command(after_long_help = config_help())]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// TOML run configuration; unspecified keys keep their defaults.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set model.d=64`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Random seed (overrides `seed`).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with oracle detections.
    Synth {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Number of frames (overrides `synth.frames`).
        #[arg(long)]
        frames: Option<usize>,
        /// Output directory [default: <output root>/data].
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overwrite a non-empty output directory.
        #[arg(long)]
        force: bool,
    },
    /// Train one stage on the training videos of a dataset.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        stage: u8,
        /// Dataset directory [default: `data.dataset` or <output root>/data].
        #[arg(long)]
        data: Option<PathBuf>,
        /// Checkpoint directory [default: <output root>/train].
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a checkpoint over detections and images and write predictions.json.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        detections: PathBuf,
        /// Directory holding `<frame_id>.png`.
        #[arg(long)]
        images: PathBuf,
        /// Output file [default: <output root>/predictions.json].
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score predictions against annotations.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        annotations: PathBuf,
        /// Also write the report as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare GAT, GCN and SAGE message passing on the held-out videos.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Output directory [default: <output root>/ablation].
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn config_help() -> String {
    let mut s = String::from("Configuration keys and defaults (full-scale values):\n");
    for k in default_keys() {
        s.push_str("  ");
        s.push_str(&k);
        s.push('\n');
    }
    s.push_str(&format!("\nEnvironment:\n  {OUTPUT_ROOT_ENV}  output root, overrides `output_dir`\n"));
    s.push_str("\nExit codes: 0 success, 2 configuration error, 3 data error, 1 other failure\n");
    s
}

fn load_config(args: &ConfigArgs) -> Result<RunConfig> {
    let text = match &args.config {
        Some(p) => std::fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?,
        None => String::new(),
    };
    let mut cfg = parse_with_overrides(&text, &args.overrides)?;
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Ok(root) = std::env::var(OUTPUT_ROOT_ENV) {
        cfg.output_dir = PathBuf::from(root);
    }
    Ok(cfg)
}

fn output_root() -> PathBuf {
    std::env::var(OUTPUT_ROOT_ENV).map(PathBuf::from).unwrap_or_else(|_| PathBuf::from("runs"))
}

fn dataset_dir(cfg: &RunConfig, flag: Option<PathBuf>) -> PathBuf {
    flag.or_else(|| cfg.data.dataset.clone())
        .unwrap_or_else(|| cfg.output_dir.join("data"))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { cfg, frames, out, force } => {
            let mut c = load_config(&cfg)?;
            if let Some(f) = frames {
                c.synth.frames = f;
            }
            let out = out.unwrap_or_else(|| c.output_dir.join("data"));
            if out.exists() && !force {
                let non_empty = std::fs::read_dir(&out)
                    .map(|mut d| d.next().is_some())
                    .unwrap_or(true);
                if non_empty {
                    return Err(Error::Config(format!(
                        "{} is not empty; pass --force to overwrite",
                        out.display()
                    )));
                }
            }
            if out.exists() && force {
                std::fs::remove_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            }
            let data = generate_synthetic_dataset(&c.synth, c.seed)?;
            data.save(&out)?;
            println!("wrote {} frames to {}", data.len(), out.display());
        }
        Command::Train { cfg, stage, data, out } => {
            let c = load_config(&cfg)?;
            let dir = dataset_dir(&c, data);
            let dataset = Dataset::load(&dir)?;
            let (train_set, _) = dataset.split_by_video(c.data.held_out_videos)?;
            let out = out.unwrap_or_else(|| c.output_dir.join("train"));
            let outcome = train(stage, &train_set, &c, &out)?;
            if let Some(last) = outcome.epochs.last() {
                println!(
                    "stage {stage}: {} epochs, final loss {:.4} (L_t {:.4}, L_e {:.4}, L_v {:.4})",
                    outcome.epochs.len(),
                    last.total,
                    last.l_t,
                    last.l_e,
                    last.l_v
                );
            }
            println!("checkpoint: {}", outcome.checkpoint.display());
        }
        Command::Predict { checkpoint, detections, images, out } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let frames = load_inputs(&detections, &images, &ck.vocab)?;
            let (preds, summary) = predict(&ck, &frames, &ck.config.decode)?;
            let out = out.unwrap_or_else(|| output_root().join("predictions.json"));
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
            export_predictions(&preds.frames, &out)?;
            println!(
                "{} frames in {:.2}s ({:.1} frames/s) -> {}",
                summary.frames,
                summary.seconds,
                summary.frames_per_second,
                out.display()
            );
        }
        Command::Eval { cfg, predictions, annotations, out } => {
            let c = load_config(&cfg)?;
            let report = evaluate_files(&predictions, &annotations, &c.eval)?;
            print!("{}", report.to_table());
            if let Some(out) = out {
                write_text(&out, &report.to_json()?)?;
            }
        }
        Command::Ablate { cfg, data, out } => {
            let c = load_config(&cfg)?;
            let dataset = Dataset::load(dataset_dir(&c, data))?;
            let (train_set, test_set) = dataset.split_by_video(c.data.held_out_videos)?;
            let out = out.unwrap_or_else(|| c.output_dir.join("ablation"));
            let rows = ablate(&c, &train_set, &test_set, &out)?;
            let table = ablation_table(&rows);
            write_text(&out.join("ablation.txt"), &table)?;
            write_text(&out.join("ablation.json"), &(serde_json::to_string_pretty(&rows)? + "\n"))?;
            print!("{table}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
