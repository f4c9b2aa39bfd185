//! One function per subcommand. Each returns the core error type; `main` maps it to an exit code.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use mutualforce_core::data::{read_frame, write_dataset, Dataset};
use mutualforce_core::eval::{evaluate, EvalConfig, EvalReport, FrameDetections};
use mutualforce_core::gradsuite::{run_suite, CaseResult};
use mutualforce_core::head::DetectionRecord;
use mutualforce_core::synth::{default_splits, generate_frame, SceneSpec};
use mutualforce_core::tensor::{load_checkpoint, save_checkpoint, Tensor};
use mutualforce_core::train::{frame_labels, StepLog, Trainer};
use mutualforce_core::{Config, Error, Model, ObjectClass, Result};

pub const CONFIG_FILE: &str = "config.json";
pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const TRAIN_LOG: &str = "train_log.jsonl";

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::Io { path: path.to_path_buf(), source: e }
}

fn parse_err(path: &Path, e: impl ToString) -> Error {
    Error::Parse { path: path.to_path_buf(), message: e.to_string() }
}

fn dir_is_empty(dir: &Path) -> Result<bool> {
    if !dir.exists() {
        return Ok(true);
    }
    Ok(fs::read_dir(dir).map_err(io_err(dir))?.next().is_none())
}

/// Clears `dir` for a fresh run, refusing to touch a populated one unless `force`.
fn prepare_out_dir(dir: &Path, force: bool) -> Result<()> {
    if !dir_is_empty(dir)? {
        if !force {
            return Err(Error::Config(format!("{} is not empty; pass --force to overwrite", dir.display())));
        }
        fs::remove_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::create_dir_all(dir).map_err(io_err(dir))
}

/// Config from a file, or defaults, with `MF_SEED` applied on top.
pub fn load_config(path: Option<&Path>) -> Result<Config> {
    let mut cfg = match path {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    if let Some(seed) = crate::env_seed()? {
        cfg.train.seed = seed;
    }
    Ok(cfg)
}

#[derive(Clone, Debug)]
pub struct GenDataArgs {
    pub out: PathBuf,
    pub frames: u64,
    pub seed: u64,
    pub spec: Option<PathBuf>,
    pub val_fraction: f64,
    pub force: bool,
}

pub fn gen_data(a: &GenDataArgs) -> Result<()> {
    let mut spec = match &a.spec {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(io_err(p))?;
            serde_json::from_str::<SceneSpec>(&text).map_err(|e| parse_err(p, e))?
        }
        None => SceneSpec::default(),
    };
    spec.seed = a.seed;
    spec.validate()?;
    if !(0.0..=1.0).contains(&a.val_fraction) {
        return Err(Error::Config(format!("--val-fraction {} must lie in [0, 1]", a.val_fraction)));
    }
    prepare_out_dir(&a.out, a.force)?;
    let echo = serde_json::to_value(&spec).expect("spec serializes");
    let frames = (0..a.frames).map(|id| generate_frame(&spec, id));
    let m = write_dataset(&a.out, spec.seed, echo, default_splits(a.frames, a.val_fraction), frames)?;
    log::info!("wrote {} frames to {}", m.frames.len(), a.out.display());
    Ok(())
}

#[derive(Clone, Debug)]
pub struct TrainArgs {
    pub config: Option<PathBuf>,
    pub data: PathBuf,
    pub out: PathBuf,
    pub force: bool,
}

/// Trains on the configured split and writes `config.json`, `train_log.jsonl`
/// and `checkpoint/` into `out`. A non-finite step stops training; the
/// parameters from before that step are still saved.
pub fn train(a: &TrainArgs) -> Result<Model> {
    let cfg = load_config(a.config.as_deref())?;
    let data = Dataset::open(&a.data)?;
    let frames = data.read_split(&cfg.train.split)?;
    prepare_out_dir(&a.out, a.force)?;
    cfg.save(&a.out.join(CONFIG_FILE))?;

    let model = Model::new(&cfg, cfg.train.seed)?;
    let mut trainer = Trainer::new(model, &frames)?;
    let log_path = a.out.join(TRAIN_LOG);
    let mut log_file = BufWriter::new(File::create(&log_path).map_err(io_err(&log_path))?);
    let every = cfg.train.log_every.max(1);
    let last = cfg.train.steps.saturating_sub(1);
    let mut write_err = None;
    let result = trainer.run(|s: &StepLog| {
        if s.step % every == 0 || s.step == last {
            log::info!(
                "step {:>5} lr {:.4} loss {:.4} rpn {:.4} focal {:.4} mccont {:.4}",
                s.step, s.lr, s.total, s.rpn, s.shape_focal, s.mccont
            );
            let line = serde_json::to_string(s).expect("log serializes");
            if let Err(e) = writeln!(log_file, "{line}") {
                write_err.get_or_insert(e);
            }
        }
    });
    log_file.flush().map_err(io_err(&log_path))?;
    if let Some(e) = write_err {
        return Err(io_err(&log_path)(e));
    }
    save_checkpoint(&trainer.model.params, &a.out.join(CHECKPOINT_DIR))?;
    if let Err(e) = result {
        log::error!("training stopped at step {}: {e}; saved the last good checkpoint", trainer.step_index());
        return Err(e);
    }
    Ok(trainer.model)
}

/// Loads a training output directory (`config.json` + `checkpoint/`).
pub fn load_run(dir: &Path) -> Result<Model> {
    let cfg = Config::load(&dir.join(CONFIG_FILE))?;
    let params = load_checkpoint(&dir.join(CHECKPOINT_DIR))?;
    Model::with_params(&cfg, params)
}

#[derive(Clone, Debug)]
pub struct EvalArgs {
    pub ckpt: Option<PathBuf>,
    pub data: PathBuf,
    pub split: String,
    pub region: Option<String>,
    /// Score this detections file instead of running a model.
    pub detections: Option<PathBuf>,
}

pub fn read_detections(path: &Path) -> Result<FrameDetections> {
    let f = File::open(path).map_err(io_err(path))?;
    let mut out = FrameDetections::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let r: DetectionRecord =
            serde_json::from_str(&line).map_err(|e| parse_err(path, format!("line {}: {e}", i + 1)))?;
        out.entry(r.frame_id).or_default().push(r.detection());
    }
    Ok(out)
}

pub fn eval(a: &EvalArgs) -> Result<EvalReport> {
    let data = Dataset::open(&a.data)?;
    let frames = data.read_split(&a.split)?;
    let model = a.ckpt.as_deref().map(load_run).transpose()?;
    let cfg: EvalConfig = model.as_ref().map(|m| m.cfg.eval.clone()).unwrap_or_default();
    let dets = match (&a.detections, &model) {
        (Some(p), _) => read_detections(p)?,
        (None, Some(m)) => mutualforce_core::train::detect_frames(m, &frames)?,
        (None, None) => return Err(Error::Config("eval needs --ckpt or --detections".into())),
    };
    let mut report = evaluate(&dets, &frame_labels(&frames), &cfg);
    if let Some(r) = &a.region {
        if !report.regions.contains_key(r) {
            return Err(Error::Config(format!("unknown region {r:?}; use all or corridor")));
        }
        report.regions.retain(|k, _| k == r);
    }
    Ok(report)
}

/// Binary greyscale image, one pixel per cell, row 0 first.
pub fn write_pgm(path: &Path, rows: usize, cols: usize, values: &[f64]) -> Result<()> {
    let mut bytes = format!("P5\n{cols} {rows}\n255\n").into_bytes();
    bytes.extend(values.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    fs::write(path, bytes).map_err(io_err(path))
}

#[derive(Clone, Debug)]
pub struct InferArgs {
    pub ckpt: PathBuf,
    pub frame: PathBuf,
    pub heatmaps: Option<PathBuf>,
}

/// Detections for one frame file; optionally writes one PGM shape heatmap per class.
pub fn infer(a: &InferArgs) -> Result<Vec<DetectionRecord>> {
    let model = load_run(&a.ckpt)?;
    let frame = read_frame(&a.frame)?;
    let x = model.prepare(&frame)?;
    let (dets, heat) = model.detect_with_heatmaps(&x)?;
    if let Some(dir) = &a.heatmaps {
        let heat: Tensor = heat.ok_or_else(|| Error::Config("--heatmaps needs a model with SALC enabled".into()))?;
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let (rows, cols) = (model.cfg.grid.rows(), model.cfg.grid.cols());
        for (class, plane) in ObjectClass::ALL.iter().zip(heat.data().chunks_exact(rows * cols)) {
            let name = format!("{:06}_{}.pgm", frame.frame_id, class.name().to_lowercase());
            write_pgm(&dir.join(name), rows, cols, plane)?;
        }
    }
    Ok(dets.iter().map(|d| DetectionRecord::new(frame.frame_id, d)).collect())
}

/// Runs the finite-difference suite; the error is numeric when any case fails.
pub fn grad_check(config: Option<&Path>) -> Result<Vec<CaseResult>> {
    let cfg = load_config(config)?;
    let results = run_suite(&cfg, cfg.train.seed)?;
    for r in &results {
        println!(
            "{} {:<18} max_rel_err {:.3e} over {} coords (worst {}[{}])",
            if r.passed() { "ok  " } else { "FAIL" },
            r.name,
            r.report.max_rel_error,
            r.report.coords_checked,
            r.report.worst_param,
            r.report.worst_index
        );
    }
    if results.iter().any(|r| !r.passed()) {
        let n = results.iter().filter(|r| !r.passed()).count();
        return Err(Error::Numeric(format!("{n} gradient check case(s) above tolerance")));
    }
    Ok(results)
}
