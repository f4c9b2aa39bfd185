//! Momentum-SGD training loop and model evaluation over frames.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::data::Frame;
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalReport, FrameDetections, FrameLabels};
use crate::model::{FrameInputs, FrameTargets, Model};
use crate::tensor::{Graph, Tensor};

/// Loss components of one step, averaged over the batch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub lr: f64,
    pub total: f64,
    pub rpn: f64,
    pub shape_focal: f64,
    pub mccont: f64,
    pub grad_norm: f64,
}

/// Learning rate at `step`: linear warmup, then cosine decay to the final fraction.
pub fn lr_at(cfg: &TrainConfig, step: usize) -> f64 {
    let base = cfg.learning_rate;
    if step < cfg.warmup_steps {
        return base * (step + 1) as f64 / cfg.warmup_steps as f64;
    }
    let span = cfg.steps.saturating_sub(cfg.warmup_steps).max(1) as f64;
    let t = ((step - cfg.warmup_steps) as f64 / span).min(1.0);
    let floor = base * cfg.final_lr_fraction;
    floor + (base - floor) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Per-frame gradient of the final loss plus its logged components.
pub fn frame_gradients(
    model: &Model,
    x: &FrameInputs,
    t: &FrameTargets,
    seed: u64,
) -> Result<(BTreeMap<String, Tensor>, [f64; 4])> {
    let mut g = Graph::new();
    let p = model.params.bind(&mut g);
    let (_, loss) = model.loss(&mut g, &p, x, t, seed)?;
    let parts = [
        g.value(loss.total).item(),
        g.value(loss.rpn.total).item(),
        loss.shape.map_or(0.0, |s| g.value(s.focal).item()),
        loss.shape.map_or(0.0, |s| g.value(s.mccont).item()),
    ];
    if parts.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("loss"));
    }
    g.backward(loss.total)?;
    Ok((model.params.collect_grads(&g, &p), parts))
}

pub struct Trainer {
    pub model: Model,
    data: Vec<(FrameInputs, FrameTargets)>,
    velocity: BTreeMap<String, Tensor>,
    order: Vec<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
    step: usize,
}

impl Trainer {
    pub fn new(model: Model, frames: &[Frame]) -> Result<Self> {
        if frames.is_empty() {
            return Err(Error::Config("no training frames".into()));
        }
        let data = frames
            .iter()
            .map(|f| Ok((model.prepare(f)?, model.targets(f))))
            .collect::<Result<Vec<_>>>()?;
        let velocity = model.params.iter().map(|(n, t)| (n.clone(), Tensor::zeros(t.shape().to_vec()))).collect();
        let rng = ChaCha8Rng::seed_from_u64(model.cfg.train.seed);
        Ok(Self { model, data, velocity, order: Vec::new(), cursor: 0, rng, step: 0 })
    }

    pub fn step_index(&self) -> usize {
        self.step
    }

    fn next_frame(&mut self) -> usize {
        if self.cursor >= self.order.len() {
            self.order = (0..self.data.len()).collect();
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        self.cursor += 1;
        self.order[self.cursor - 1]
    }

    /// One optimizer step. On a non-finite loss or gradient the parameters are left untouched.
    pub fn step(&mut self) -> Result<StepLog> {
        let cfg = self.model.cfg.train.clone();
        let batch = cfg.batch_size;
        let mut grads: BTreeMap<String, Tensor> = BTreeMap::new();
        let mut parts = [0.0; 4];
        for k in 0..batch {
            let i = self.next_frame();
            let seed = cfg.seed ^ ((self.step * batch + k) as u64).wrapping_mul(0x2545_f491_4f6c_dd1d);
            let (gr, p) = frame_gradients(&self.model, &self.data[i].0, &self.data[i].1, seed)?;
            parts.iter_mut().zip(p).for_each(|(a, b)| *a += b / batch as f64);
            for (name, t) in gr {
                match grads.get_mut(&name) {
                    Some(acc) => acc.data_mut().iter_mut().zip(t.data()).for_each(|(a, b)| *a += b),
                    None => {
                        grads.insert(name, t);
                    }
                }
            }
        }
        let inv = 1.0 / batch as f64;
        let mut sq = 0.0;
        for t in grads.values_mut() {
            t.data_mut().iter_mut().for_each(|v| {
                *v *= inv;
                sq += *v * *v;
            });
        }
        let norm = sq.sqrt();
        if !norm.is_finite() {
            return Err(Error::NonFinite("gradient"));
        }
        let clip = if cfg.grad_clip > 0.0 && norm > cfg.grad_clip { cfg.grad_clip / norm } else { 1.0 };
        let lr = lr_at(&cfg, self.step);
        for (name, param) in self.model.params.iter_mut() {
            let (Some(gr), Some(vel)) = (grads.get(name), self.velocity.get_mut(name)) else { continue };
            for ((p, v), g) in param.data_mut().iter_mut().zip(vel.data_mut()).zip(gr.data()) {
                *v = cfg.momentum * *v + clip * g;
                *p -= lr * *v;
            }
        }
        let log = StepLog {
            step: self.step,
            lr,
            total: parts[0],
            rpn: parts[1],
            shape_focal: parts[2],
            mccont: parts[3],
            grad_norm: norm,
        };
        self.step += 1;
        Ok(log)
    }

    /// Runs the configured number of steps, reporting every step to `on_step`.
    pub fn run(&mut self, mut on_step: impl FnMut(&StepLog)) -> Result<Vec<StepLog>> {
        let mut history = Vec::new();
        while self.step < self.model.cfg.train.steps {
            let log = self.step()?;
            on_step(&log);
            history.push(log);
        }
        Ok(history)
    }
}

/// Detections for every frame, keyed by frame id.
pub fn detect_frames(model: &Model, frames: &[Frame]) -> Result<FrameDetections> {
    frames.iter().map(|f| Ok((f.frame_id, model.detect(f)?))).collect()
}

pub fn frame_labels(frames: &[Frame]) -> FrameLabels {
    frames.iter().map(|f| (f.frame_id, f.labels.clone())).collect()
}

pub fn evaluate_model(model: &Model, frames: &[Frame]) -> Result<EvalReport> {
    let dets = detect_frames(model, frames)?;
    Ok(evaluate(&dets, &frame_labels(frames), &model.cfg.eval))
}
