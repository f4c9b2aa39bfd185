// Naive re-implementations used as test oracles. Plain loops and nested Vecs
// only; nothing here calls into the graph or the library's own geometry.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mutualforce_core::{Box3D, Detection};

pub type Mat = Vec<Vec<f64>>;

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `x · W + b` with `W: [in][out]`.
pub fn dense(x: &[f64], w: &Mat, b: &[f64]) -> Vec<f64> {
    let mut out = b.to_vec();
    for (i, xi) in x.iter().enumerate() {
        for (o, acc) in out.iter_mut().enumerate() {
            *acc += xi * w[i][o];
        }
    }
    out
}

pub fn relu(v: Vec<f64>) -> Vec<f64> {
    v.into_iter().map(|x| if x > 0.0 { x } else { 0.0 }).collect()
}

/// Radar-radar gate for one point: `sigmoid(MLP(p_c ++ f_s)) * f_s` with `f_s = relu(W_s p_s + b_s)`.
pub fn gated_point(ps: &[f64], pc: &[f64], ws: &Mat, bs: &[f64], ww: &Mat, bw: &[f64]) -> Vec<f64> {
    let fs = relu(dense(ps, ws, bs));
    let mut cat = pc.to_vec();
    cat.extend(&fs);
    let w = dense(&cat, ww, bw);
    w.iter().zip(&fs).map(|(a, f)| sigmoid(*a) * f).collect()
}

/// `l_i + sum_j a_ij r_j`, `a = softmax_j(q_i · r_j / sqrt(d))` or the raw scaled score.
pub fn attention(lidar: &Mat, radar: &Mat, wq: &Mat, bq: &[f64], softmax: bool) -> Mat {
    let d = radar[0].len() as f64;
    lidar
        .iter()
        .map(|l| {
            let q = dense(l, wq, bq);
            let mut a: Vec<f64> = radar.iter().map(|r| q.iter().zip(r).map(|(x, y)| x * y).sum::<f64>() / d.sqrt()).collect();
            if softmax {
                let m = a.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = a.iter().map(|v| (v - m).exp()).sum();
                a = a.iter().map(|v| (v - m).exp() / z).collect();
            }
            let mut out = l.clone();
            for (aj, r) in a.iter().zip(radar) {
                for (o, rv) in out.iter_mut().zip(r) {
                    *o += aj * rv;
                }
            }
            out
        })
        .collect()
}

/// Multi-class contrastive loss over rows of `s`, `sp` (`[N][M][C]`).
pub fn mccont(s: &[Mat], sp: &[Mat]) -> f64 {
    let n = s.len();
    if n < 2 {
        return 0.0;
    }
    let m = s[0].len() as f64;
    let d = |a: &Mat, b: &Mat| -> f64 {
        let mut acc = 0.0;
        for (ra, rb) in a.iter().zip(b) {
            for (x, y) in ra.iter().zip(rb) {
                acc += x * y;
            }
        }
        acc / (m * m)
    };
    let mut total = 0.0;
    for h in 0..n {
        let pos = d(&s[h], &sp[h]).exp();
        let neg: f64 = (0..n).filter(|&w| w != h).map(|w| d(&s[h], &sp[w]).exp()).sum();
        total += -(pos / neg).ln();
    }
    total / n as f64
}

/// Penalty-reduced focal loss over flat score/target arrays.
pub fn shape_focal(scores: &[f64], targets: &[f64], n_inst: usize) -> f64 {
    let mut acc = 0.0;
    for (&g, &t) in scores.iter().zip(targets) {
        let g = g.clamp(1e-6, 1.0 - 1e-6);
        if t == 1.0 {
            acc += (1.0 - g) * (1.0 - g) * g.ln();
        } else {
            acc += (1.0 - t).powi(4) * g * g * (1.0 - g).ln();
        }
    }
    -acc / n_inst.max(1) as f64
}

/// Sigmoid focal classification term of the RPN loss for one anchor.
pub fn rpn_focal(x: f64, label: i8, alpha: f64, gamma: i32) -> f64 {
    let p = sigmoid(x);
    match label {
        1 => -alpha * (1.0 - p).powi(gamma) * p.ln(),
        0 => -(1.0 - alpha) * p.powi(gamma) * (1.0 - p).ln(),
        _ => 0.0,
    }
}

pub fn smooth_l1(x: f64, beta: f64) -> f64 {
    if x.abs() < beta {
        0.5 * x * x / beta
    } else {
        x.abs() - 0.5 * beta
    }
}

fn inside(b: &Box3D, x: f64, y: f64) -> bool {
    // Rotate the point into the box frame.
    let (dx, dy) = (x - b.cx, y - b.cy);
    let (s, c) = (-b.yaw).sin_cos();
    let u = dx * c - dy * s;
    let v = dx * s + dy * c;
    2.0 * u.abs() <= b.l && 2.0 * v.abs() <= b.w
}

/// Monte Carlo BEV IoU from `n` uniform samples over the union's bounding square.
pub fn mc_iou(a: &Box3D, b: &Box3D, n: usize, seed: u64) -> f64 {
    let ra = 0.5 * (a.l * a.l + a.w * a.w).sqrt();
    let rb = 0.5 * (b.l * b.l + b.w * b.w).sqrt();
    let x0 = (a.cx - ra).min(b.cx - rb);
    let x1 = (a.cx + ra).max(b.cx + rb);
    let y0 = (a.cy - ra).min(b.cy - rb);
    let y1 = (a.cy + ra).max(b.cy + rb);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut inter, mut union) = (0usize, 0usize);
    for _ in 0..n {
        let x = rng.random_range(x0..x1);
        let y = rng.random_range(y0..y1);
        let (ia, ib) = (inside(a, x, y), inside(b, x, y));
        inter += usize::from(ia && ib);
        union += usize::from(ia || ib);
    }
    if union == 0 { 0.0 } else { inter as f64 / union as f64 }
}

/// Monte Carlo BEV area from `n` uniform samples over the circumscribing square.
pub fn mc_area(b: &Box3D, n: usize, seed: u64) -> f64 {
    let r = 0.5 * (b.l * b.l + b.w * b.w).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut hits = 0usize;
    for _ in 0..n {
        let x = rng.random_range(b.cx - r..b.cx + r);
        let y = rng.random_range(b.cy - r..b.cy + r);
        hits += usize::from(inside(b, x, y));
    }
    4.0 * r * r * hits as f64 / n as f64
}

/// `n` uniform points inside the box footprint.
pub fn sample_in_box(b: &Box3D, n: usize, seed: u64) -> Vec<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (s, c) = b.yaw.sin_cos();
    (0..n)
        .map(|_| {
            let u = rng.random_range(-0.5..0.5) * b.l;
            let v = rng.random_range(-0.5..0.5) * b.w;
            (b.cx + c * u - s * v, b.cy + s * u + c * v)
        })
        .collect()
}

/// NMS through a precomputed pairwise suppression matrix.
pub fn nms_reference(dets: &[Detection], iou: impl Fn(&Box3D, &Box3D) -> f64, thr: f64, max_keep: usize) -> Vec<usize> {
    let n = dets.len();
    let mut overlap = vec![vec![false; n]; n];
    for i in 0..n {
        for j in 0..n {
            overlap[i][j] = i != j && iou(&dets[i].bbox, &dets[j].bbox) >= thr;
        }
    }
    let mut alive = vec![true; n];
    let mut keep = Vec::new();
    for i in 0..n {
        if !alive[i] {
            continue;
        }
        if keep.len() == max_keep {
            break;
        }
        keep.push(i);
        for j in i + 1..n {
            if overlap[i][j] {
                alive[j] = false;
            }
        }
    }
    keep
}

/// Exhaustive assignment: full IoU matrix, then threshold and forced best anchors.
pub fn assign_reference(
    anchors: &[Box3D],
    gt: &[Box3D],
    iou: impl Fn(&Box3D, &Box3D) -> f64,
    match_iou: &[f64],
    unmatch_iou: &[f64],
) -> (Vec<i8>, Vec<Option<usize>>) {
    let m: Mat = anchors
        .iter()
        .map(|a| gt.iter().map(|g| if g.class == a.class { iou(a, g) } else { 0.0 }).collect())
        .collect();
    let mut labels = vec![0i8; anchors.len()];
    let mut matched = vec![None; anchors.len()];
    for (a, row) in m.iter().enumerate() {
        let mut best = (0.0, None);
        for (j, &v) in row.iter().enumerate() {
            if v > best.0 {
                best = (v, Some(j));
            }
        }
        let c = anchors[a].class.id();
        if best.0 >= match_iou[c] {
            labels[a] = 1;
            matched[a] = best.1;
        } else if best.0 >= unmatch_iou[c] {
            labels[a] = -1;
        }
    }
    for j in 0..gt.len() {
        let mut best = (0.0, None);
        for (a, row) in m.iter().enumerate() {
            if row[j] > best.0 {
                best = (row[j], Some(a));
            }
        }
        if let Some(a) = best.1 {
            labels[a] = 1;
            matched[a] = Some(j);
        }
    }
    (labels, matched)
}

/// AP by rebuilding the PR point of every detection-list prefix from scratch.
///
/// `ious[d][g]` holds detection-to-ground-truth overlaps for one class in one
/// frame; `scores` must already be sorted descending.
pub fn brute_force_ap(ious: &Mat, n_gt: usize, thr: f64, points: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let n = ious.len();
    let mut pr = Vec::new();
    for k in 1..=n {
        let mut used = vec![false; n_gt];
        let mut tp = 0;
        for row in ious.iter().take(k) {
            let mut best: Option<(usize, f64)> = None;
            for (g, &v) in row.iter().enumerate() {
                if !used[g] && v >= thr && best.map_or(true, |(_, b)| v > b) {
                    best = Some((g, v));
                }
            }
            if let Some((g, _)) = best {
                used[g] = true;
                tp += 1;
            }
        }
        pr.push((tp as f64 / n_gt as f64, tp as f64 / k as f64));
    }
    let mut sum = 0.0;
    for i in 0..points {
        let r = i as f64 / (points - 1) as f64;
        let best = pr.iter().filter(|(rec, _)| *rec >= r - 1e-12).map(|(_, p)| *p).fold(0.0, f64::max);
        sum += best;
    }
    sum / points as f64
}
