// Small hand-built setups shared by the property tests and the acceptance run.
#![allow(dead_code)]

use mutualforce_core::salc::{self, ShapeTargets};
use mutualforce_core::{Graph, Result, Tensor};

/// Loss and contrast margin before and after one descent step.
#[derive(Clone, Copy, Debug)]
pub struct PushPull {
    pub loss_before: f64,
    pub loss_after: f64,
    pub margin_before: f64,
    pub margin_after: f64,
}

/// Smallest positive-pair similarity minus largest negative-pair similarity.
///
/// `emb[h][m]` is instance `m` of class `h`; the partner of instance `m` is
/// instance `m + 1` of the same row (wrapping).
pub fn contrast_margin(emb: &[Vec<Vec<f64>>]) -> f64 {
    let m = emb[0].len();
    let d = |a: usize, b: usize| -> f64 {
        let mut acc = 0.0;
        for j in 0..m {
            acc += emb[a][j].iter().zip(&emb[b][(j + 1) % m]).map(|(x, y)| x * y).sum::<f64>();
        }
        acc / (m * m) as f64
    };
    let n = emb.len();
    let pos = (0..n).map(|h| d(h, h)).fold(f64::INFINITY, f64::min);
    let neg = (0..n).flat_map(|h| (0..n).filter(move |&w| w != h).map(move |w| (h, w))).map(|(h, w)| d(h, w)).fold(f64::NEG_INFINITY, f64::max);
    pos - neg
}

/// Runs one plain gradient step of size `lr` on the contrastive loss alone.
///
/// `emb[h][m]` holds `n_cls`-dim embeddings; they are laid out in a
/// `[n_cls, 1, n_cls * m]` logit map with class `h` centers in its own columns.
pub fn push_pull_step(emb: &[Vec<Vec<f64>>], lr: f64) -> Result<PushPull> {
    let (n, m) = (emb.len(), emb[0].len());
    let cols = n * m;
    let mut logits = Tensor::zeros([n, 1, cols]);
    for h in 0..n {
        for j in 0..m {
            for (c, &v) in emb[h][j].iter().enumerate() {
                logits.set(&[c, 0, h * m + j], v);
            }
        }
    }
    let targets = ShapeTargets {
        heatmap: Tensor::zeros([n, 1, cols]),
        centers: (0..n).map(|h| (0..m).map(|j| (0, h * m + j)).collect()).collect(),
    };
    let eval = |t: &Tensor| -> Result<(f64, Option<Tensor>)> {
        let mut g = Graph::new();
        let v = g.param(t.clone());
        let im = salc::gather_instance_indicators(&mut g, v, &targets, 0)?.expect("centers present");
        let l = salc::mccont_loss(&mut g, &im)?;
        g.backward(l)?;
        Ok((g.value(l).item(), g.grad(v)))
    };
    let (loss_before, grad) = eval(&logits)?;
    let grad = grad.expect("logits receive a gradient");
    let mut stepped = logits.clone();
    for (x, d) in stepped.data_mut().iter_mut().zip(grad.data()) {
        *x -= lr * d;
    }
    let (loss_after, _) = eval(&stepped)?;
    let read = |t: &Tensor| -> Vec<Vec<Vec<f64>>> {
        (0..n).map(|h| (0..m).map(|j| (0..n).map(|c| t.at(&[c, 0, h * m + j])).collect()).collect()).collect()
    };
    Ok(PushPull {
        loss_before,
        loss_after,
        margin_before: contrast_margin(&read(&logits)),
        margin_after: contrast_margin(&read(&stepped)),
    })
}

/// The two-class, two-instance toy: loosely clustered but not yet separated.
pub fn toy_embeddings() -> Vec<Vec<Vec<f64>>> {
    vec![
        vec![vec![0.9, 0.3], vec![0.6, 0.5]],
        vec![vec![0.4, 0.8], vec![0.7, 0.6]],
    ]
}
