use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use mutualforce_cli::ablate;
use mutualforce_cli::commands::{self, EvalArgs, GenDataArgs, InferArgs, TrainArgs};
use mutualforce_cli::exit_code;
use mutualforce_core::data::Dataset;
use mutualforce_core::Result;

#[derive(Parser)]
#[command(name = "mutualforce", version, about = "Radar-LiDAR fusion detector on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset directory.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 250)]
        frames: u64,
        #[arg(long, env = "MF_SEED", default_value_t = 0)]
        seed: u64,
        /// Scene generator settings (JSON); defaults otherwise.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, default_value_t = 0.2)]
        val_fraction: f64,
        #[arg(long)]
        force: bool,
    },
    /// Train a model and write config.json, train_log.jsonl and checkpoint/.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Two-region AP/mAP report for a trained run or a detections file.
    Eval {
        /// Training output directory.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "val")]
        split: String,
        /// all or corridor; both when omitted.
        #[arg(long)]
        region: Option<String>,
        /// JSON-lines detections to score instead of running the model.
        #[arg(long)]
        detections: Option<PathBuf>,
        /// Print JSON instead of the table.
        #[arg(long)]
        json: bool,
    },
    /// Detect objects in one frame file; prints JSON lines.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        frame: PathBuf,
        /// Write per-class shape heatmaps as PGM files here.
        #[arg(long)]
        heatmaps: Option<PathBuf>,
    },
    /// Finite-difference gradient checks of every op, module and the full loss.
    GradCheck {
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train and evaluate a set of variants and print a comparison table.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        /// modules, indicative or tau.
        #[arg(long, conflicts_with = "configs")]
        preset: Option<String>,
        /// Variant config files; each row is named after its file.
        #[arg(long, num_args = 1..)]
        configs: Vec<PathBuf>,
        /// Base config for presets.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "0")]
        seeds: Vec<u64>,
        #[arg(long, default_value = "train")]
        train_split: String,
        #[arg(long, default_value = "val")]
        val_split: String,
        /// Writes ablation.json and ablation.txt here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::GenData { out, frames, seed, spec, val_fraction, force } => {
            commands::gen_data(&GenDataArgs { out, frames, seed, spec, val_fraction, force })
        }
        Cmd::Train { config, data, out, force } => commands::train(&TrainArgs { config, data, out, force }).map(drop),
        Cmd::Eval { ckpt, data, split, region, detections, json } => {
            let r = commands::eval(&EvalArgs { ckpt, data, split, region, detections })?;
            if json {
                println!("{}", r.to_json());
            } else {
                print!("{}", r.to_table());
            }
            Ok(())
        }
        Cmd::Infer { ckpt, frame, heatmaps } => {
            for d in commands::infer(&InferArgs { ckpt, frame, heatmaps })? {
                println!("{}", serde_json::to_string(&d).expect("record serializes"));
            }
            Ok(())
        }
        Cmd::GradCheck { config } => commands::grad_check(config.as_deref()).map(drop),
        Cmd::Ablate { data, preset, configs, config, seeds, train_split, val_split, out } => {
            let variants = match preset {
                Some(p) => ablate::preset(&p, &commands::load_config(config.as_deref())?)?,
                None if !configs.is_empty() => ablate::variants_from_files(&configs)?,
                None => return Err(mutualforce_core::Error::Config("ablate needs --preset or --configs".into())),
            };
            let ds = Dataset::open(&data)?;
            let (train, val) = (ds.read_split(&train_split)?, ds.read_split(&val_split)?);
            let report = ablate::run(&variants, &train, &val, &seeds, |name, seed, _| {
                log::info!("finished {name} seed {seed}");
            })?;
            print!("{}", report.to_table());
            if let Some(dir) = out {
                report.save(&dir)?;
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
