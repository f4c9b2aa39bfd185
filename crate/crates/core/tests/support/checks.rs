// Library-vs-oracle comparisons, each driven by a seed. The property tests
// sweep seeds through proptest; the acceptance run calls the same functions.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mutualforce_core::boxes::rotated_iou_bev;
use mutualforce_core::eval::{self, FrameDetections, FrameLabels};
use mutualforce_core::head::{self, AnchorConfig, HeadOutput, LossWeights};
use mutualforce_core::irb::{self, IrbConfig};
use mutualforce_core::salc::{self, InstanceMatrix, ShapeHeatmaps, ShapeTargets};
use mutualforce_core::tensor::{ParamStore, Tensor};
use mutualforce_core::{Box3D, Detection, Graph, ObjectClass};

use super::oracles::{self, Mat};

pub const EQ_TOL: f64 = 1e-10;

/// Scaled deviation `|a - b| / (1 + |b|)`.
pub fn dev(a: f64, b: f64) -> f64 {
    (a - b).abs() / (1.0 + b.abs())
}

fn worst(pairs: impl IntoIterator<Item = (f64, f64)>) -> f64 {
    pairs.into_iter().map(|(a, b)| if a.is_finite() && b.is_finite() { dev(a, b) } else { f64::INFINITY }).fold(0.0, f64::max)
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

fn to_mat(t: &Tensor) -> Mat {
    let cols = t.shape()[1];
    t.data().chunks(cols).map(<[f64]>::to_vec).collect()
}

/// IRB params with non-zero biases so the bias path is exercised too.
fn irb_params(rng: &mut ChaCha8Rng, d: usize) -> ParamStore {
    let mut p = ParamStore::new();
    irb::init_params(&mut p, &IrbConfig { d, attention_softmax: true }, 9, 10, rng);
    for (name, t) in p.iter_mut() {
        if name.ends_with(".b") {
            t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
        }
    }
    p
}

/// Radar-radar gate on random pillars.
pub fn radar_gate(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, pts, d) = (rng.random_range(1..4), rng.random_range(1..4), rng.random_range(2..6));
    let p = irb_params(&mut rng, d);
    let ps = rand_tensor(&mut rng, &[n, pts, 9]);
    let pc = rand_tensor(&mut rng, &[n, pts, 3]);
    let mut g = Graph::new();
    let b = p.bind(&mut g);
    let (sv, cv) = (g.constant(ps.clone()), g.constant(pc.clone()));
    let out = irb::rr_branch(&mut g, &b, sv, cv).unwrap();

    let get = |k: &str| p.get(k).unwrap();
    let (ws, bs) = (to_mat(get("irb.radar_spatial.w")), get("irb.radar_spatial.b").data().to_vec());
    let (ww, bw) = (to_mat(get("irb.weight.w")), get("irb.weight.b").data().to_vec());
    let mut want = Vec::new();
    for (s_row, c_row) in ps.data().chunks(9).zip(pc.data().chunks(3)) {
        want.extend(oracles::gated_point(s_row, c_row, &ws, &bs, &ww, &bw));
    }
    let got = g.value(out.gated).data();
    if got.len() != want.len() {
        return f64::INFINITY;
    }
    worst(got.iter().copied().zip(want))
}

/// Radar-LiDAR attention with or without the row softmax.
pub fn lidar_attention(seed: u64, softmax: bool) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (m, n, d) = (rng.random_range(1..5), rng.random_range(1..4), 4);
    let p = irb_params(&mut rng, d);
    let lidar = rand_tensor(&mut rng, &[m, d]);
    let radar = rand_tensor(&mut rng, &[n, d]);
    let mut g = Graph::new();
    let b = p.bind(&mut g);
    let (lv, rv) = (g.constant(lidar.clone()), g.constant(radar.clone()));
    let y = irb::rl_branch(&mut g, &b, lv, rv, softmax).unwrap();
    let want = oracles::attention(
        &to_mat(&lidar),
        &to_mat(&radar),
        &to_mat(p.get("irb.query.w").unwrap()),
        p.get("irb.query.b").unwrap().data(),
        softmax,
    );
    worst(g.value(y).data().iter().copied().zip(want.into_iter().flatten()))
}

/// Contrastive loss on arbitrary `S`, `S'`.
pub fn contrastive(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, m, c) = (rng.random_range(2..5), rng.random_range(1..4), rng.random_range(1..4));
    let s = rand_tensor(&mut rng, &[n, m, c]);
    let sp = rand_tensor(&mut rng, &[n, m, c]);
    let mut g = Graph::new();
    let im = InstanceMatrix {
        s: g.constant(s.clone()),
        s_prime: g.constant(sp.clone()),
        classes: (0..n).collect(),
        cells: vec![vec![0; m]; n],
        max_centers: m,
        valid: vec![true; n],
    };
    let l = salc::mccont_loss(&mut g, &im).unwrap();
    let nest = |t: &Tensor| -> Vec<Mat> {
        t.data().chunks(m * c).map(|row| row.chunks(c).map(<[f64]>::to_vec).collect()).collect()
    };
    dev(g.value(l).item(), oracles::mccont(&nest(&s), &nest(&sp)))
}

/// Penalty-reduced focal loss with some exact-one targets.
pub fn shape_focal(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scores = Tensor::from_fn([3, 4, 4], |_| rng.random_range(0.0..1.0));
    let mut heat = Tensor::from_fn([3, 4, 4], |_| if rng.random_bool(0.5) { 0.0 } else { rng.random_range(0.0..1.0) });
    let mut centers = vec![Vec::new(); 3];
    for _ in 0..rng.random_range(0..4) {
        let (k, r, c) = (rng.random_range(0..3), rng.random_range(0..4), rng.random_range(0..4));
        heat.set(&[k, r, c], 1.0);
        centers[k].push((r, c));
    }
    let t = ShapeTargets { heatmap: heat.clone(), centers };
    let mut g = Graph::new();
    let sv = g.constant(scores.clone());
    let l = salc::focal_shape_loss(&mut g, sv, &t).unwrap();
    dev(g.value(l).item(), oracles::shape_focal(scores.data(), heat.data(), t.num_instances()))
}

/// Shape loss as focal plus contrast, and the final loss as rpn plus alpha times shape.
pub fn loss_composition(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bounded = rng.random_bool(0.5);
    let alpha = rng.random_range(0.0..3.0);
    let (rows, cols, n_cls, m) = (4, 5, 3, 2);
    let logits = rand_tensor(&mut rng, &[n_cls, rows, cols]);
    // Every class has exactly M distinct centers, so no padding is drawn.
    let mut cells: Vec<(usize, usize)> = (0..rows).flat_map(|r| (0..cols).map(move |c| (r, c))).collect();
    for i in (1..cells.len()).rev() {
        cells.swap(i, rng.random_range(0..=i));
    }
    let centers: Vec<Vec<(usize, usize)>> = (0..n_cls).map(|k| cells[k * m..(k + 1) * m].to_vec()).collect();
    let mut heat = Tensor::from_fn([n_cls, rows, cols], |_| rng.random_range(0.0..0.9));
    for (k, cs) in centers.iter().enumerate() {
        for &(r, c) in cs {
            heat.set(&[k, r, c], 1.0);
        }
    }
    let t = ShapeTargets { heatmap: heat.clone(), centers: centers.clone() };

    let mut g = Graph::new();
    let lv = g.constant(logits.clone());
    let sv = g.sigmoid(lv).unwrap();
    let sl = salc::shape_loss(&mut g, &ShapeHeatmaps { logits: lv, scores: sv }, &t, seed, bounded).unwrap();
    let rpn_value = rng.random_range(0.0..5.0);
    let rpn = g.constant(Tensor::scalar(rpn_value));
    let fin = head::final_loss(&mut g, rpn, Some(sl.total), alpha).unwrap();

    let squash = |x: f64| if bounded { x.tanh() } else { x };
    let embed = |r: usize, c: usize| -> Vec<f64> { (0..n_cls).map(|k| squash(logits.at(&[k, r, c]))).collect() };
    let s: Vec<Mat> = centers.iter().map(|cs| cs.iter().map(|&(r, c)| embed(r, c)).collect()).collect();
    let sp: Vec<Mat> = centers
        .iter()
        .map(|cs| (0..m).map(|j| embed(cs[(j + 1) % m].0, cs[(j + 1) % m].1)).collect())
        .collect();
    let probs: Vec<f64> = logits.data().iter().map(|&x| oracles::sigmoid(x)).collect();
    let focal = oracles::shape_focal(&probs, heat.data(), n_cls * m);
    let contrast = oracles::mccont(&s, &sp);
    worst([
        (g.value(sl.focal).item(), focal),
        (g.value(sl.mccont).item(), contrast),
        (g.value(sl.total).item(), focal + contrast),
        (g.value(fin).item(), rpn_value + alpha * (focal + contrast)),
    ])
}

/// RPN loss on a three-anchor toy with one ground-truth car.
pub fn rpn_toy(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let anchors = vec![
        Box3D::new(2.0, 0.0, 0.8, 3.9, 1.6, 1.56, 0.0, ObjectClass::Car),
        Box3D::new(2.0, 0.0, 0.8, 3.9, 1.6, 1.56, PI / 2.0, ObjectClass::Car),
        Box3D::new(9.0, 3.0, 0.8, 3.9, 1.6, 1.56, 0.0, ObjectClass::Car),
    ];
    let flip = if rng.random_bool(0.5) { PI } else { 0.0 };
    let gt = vec![Box3D::new(
        2.0 + rng.random_range(-0.2..0.2),
        rng.random_range(-0.2..0.2),
        0.8,
        4.0,
        1.7,
        1.5,
        rng.random_range(-0.3..0.3) + flip,
        ObjectClass::Car,
    )];
    let t = head::assign_targets(&anchors, &gt, &AnchorConfig::default());
    if t.positives.is_empty() {
        return f64::INFINITY;
    }
    let cls = rand_tensor(&mut rng, &[3]);
    let reg = rand_tensor(&mut rng, &[3, 7]);
    let dir = rand_tensor(&mut rng, &[3, 2]);
    let w = LossWeights::default();
    let mut g = Graph::new();
    let out = HeadOutput { cls: g.constant(cls.clone()), reg: g.constant(reg.clone()), dir: g.constant(dir.clone()) };
    let l = head::rpn_loss(&mut g, &out, &t, &w).unwrap().total;

    let norm = t.positives.len().max(1) as f64;
    let l_cls: f64 = (0..3).map(|a| oracles::rpn_focal(cls.data()[a], t.labels[a], w.focal_alpha, w.focal_gamma)).sum();
    let (mut l_box, mut l_dir) = (0.0, 0.0);
    for (k, &a) in t.positives.iter().enumerate() {
        let pred = &reg.data()[a * 7..a * 7 + 7];
        for j in 0..6 {
            l_box += oracles::smooth_l1(pred[j] - t.reg[k][j], w.smooth_l1_beta);
        }
        l_box += oracles::smooth_l1((pred[6] - t.reg[k][6]).sin(), w.smooth_l1_beta);
        let (z0, z1) = (dir.data()[a * 2], dir.data()[a * 2 + 1]);
        l_dir += (z0.exp() + z1.exp()).ln() - if t.dir[k] == 0 { z0 } else { z1 };
    }
    dev(g.value(l).item(), (w.cls * l_cls + w.bbox * l_box + w.dir * l_dir) / norm)
}

pub fn random_box(rng: &mut ChaCha8Rng, spread: f64, class: ObjectClass) -> Box3D {
    Box3D::new(
        rng.random_range(-spread..spread),
        rng.random_range(-spread..spread),
        rng.random_range(0.0..1.5),
        rng.random_range(0.4..5.0),
        rng.random_range(0.4..2.5),
        rng.random_range(0.5..2.0),
        rng.random_range(-PI..PI),
        class,
    )
}

/// Largest gap between the polygon IoU and a Monte Carlo estimate over `pairs` overlapping pairs.
pub fn iou_vs_monte_carlo(seed: u64, pairs: usize, samples: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..pairs)
        .map(|i| {
            let a = random_box(&mut rng, 1.0, ObjectClass::Car);
            let b = random_box(&mut rng, 1.0, ObjectClass::Car);
            (rotated_iou_bev(&a, &b) - oracles::mc_iou(&a, &b, samples, seed ^ (i as u64 + 1))).abs()
        })
        .fold(0.0, f64::max)
}

/// NMS on 50 random boxes against the matrix reference.
pub fn nms_agrees(seed: u64) -> bool {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dets: Vec<Detection> = (0..50)
        .map(|_| Detection { bbox: random_box(&mut rng, 4.0, ObjectClass::Car), score: rng.random_range(0.0..1.0) })
        .collect();
    dets.sort_by(|a, b| b.score.total_cmp(&a.score));
    let thr = rng.random_range(0.05..0.7);
    let max_keep = rng.random_range(1..60);
    head::nms(&dets, thr, max_keep) == oracles::nms_reference(&dets, rotated_iou_bev, thr, max_keep)
}

/// Anchor assignment on 40 anchors and up to four boxes against the exhaustive reference.
pub fn assignment_agrees(seed: u64) -> bool {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = AnchorConfig::default();
    let anchors: Vec<Box3D> = (0..40)
        .map(|_| {
            let class = ObjectClass::ALL[rng.random_range(0..3)];
            let s = cfg.sizes[class.id()];
            let yaw = head::ANCHOR_YAWS[rng.random_range(0..2)];
            Box3D::new(rng.random_range(-4.0..4.0), rng.random_range(-4.0..4.0), 0.8, s[0], s[1], s[2], yaw, class)
        })
        .collect();
    let gt: Vec<Box3D> = (0..rng.random_range(0..5))
        .map(|_| {
            let class = ObjectClass::ALL[rng.random_range(0..3)];
            random_box(&mut rng, 4.0, class)
        })
        .collect();
    let t = head::assign_targets(&anchors, &gt, &cfg);
    let (labels, matched) = oracles::assign_reference(&anchors, &gt, rotated_iou_bev, &cfg.match_iou, &cfg.unmatch_iou);
    t.labels == labels && (0..anchors.len()).all(|a| labels[a] != 1 || t.matched[a] == matched[a])
}

fn car(x: f64, y: f64, yaw: f64) -> Box3D {
    Box3D::new(x, y, 0.8, 4.2, 1.8, 1.6, yaw, ObjectClass::Car)
}

/// One frame of ground-truth cars with jittered hits, duplicates and clutter, sorted by score.
pub fn ap_scene(rng: &mut ChaCha8Rng) -> (Vec<Box3D>, Vec<Detection>) {
    let n_gt = rng.random_range(1..6);
    let gt: Vec<Box3D> = (0..n_gt).map(|i| car(8.0 * i as f64, rng.random_range(-3.0..3.0), rng.random_range(-0.5..0.5))).collect();
    let mut dets = Vec::new();
    for g in &gt {
        for _ in 0..rng.random_range(0..3) {
            let mut b = *g;
            b.cx += rng.random_range(-1.2..1.2);
            b.cy += rng.random_range(-0.8..0.8);
            b.yaw += rng.random_range(-0.3..0.3);
            dets.push(Detection { bbox: b, score: rng.random_range(0.0..1.0) });
        }
    }
    for _ in 0..rng.random_range(0..4) {
        let b = car(rng.random_range(-5.0..40.0), rng.random_range(-10.0..10.0), 0.0);
        dets.push(Detection { bbox: b, score: rng.random_range(0.0..1.0) });
    }
    dets.sort_by(|a, b| b.score.total_cmp(&a.score));
    (gt, dets)
}

/// The hand-built case: hit, miss, hit, duplicate, hit against three cars.
pub fn five_three_case() -> (Vec<Box3D>, Vec<Detection>, f64) {
    let gt = vec![car(0.0, 0.0, 0.0), car(10.0, 0.0, 0.0), car(20.0, 0.0, 0.0)];
    let dets = [(0.0, 0.9), (40.0, 0.8), (10.0, 0.7), (0.1, 0.6), (20.0, 0.5)]
        .into_iter()
        .map(|(x, s)| Detection { bbox: car(x, 0.0, 0.0), score: s })
        .collect();
    // Recall steps at 1/3, 2/3 and 1 with best precision 1, 2/3 and 3/5.
    let want = (0..41)
        .map(|i| i as f64 / 40.0)
        .map(|r| if r <= 1.0 / 3.0 { 1.0 } else if r <= 2.0 / 3.0 { 2.0 / 3.0 } else { 0.6 })
        .sum::<f64>()
        / 41.0;
    (gt, dets, want)
}

pub fn library_ap(gt: &[Box3D], dets: &[Detection], thr: f64, points: usize) -> f64 {
    let d: FrameDetections = BTreeMap::from([(0, dets.to_vec())]);
    let g: FrameLabels = BTreeMap::from([(0, gt.to_vec())]);
    let (m, n_gt) = eval::match_detections(&d, &g, ObjectClass::Car, thr);
    eval::interpolated_ap(&m, n_gt, points)
}

pub fn brute_ap(gt: &[Box3D], dets: &[Detection], thr: f64, points: usize) -> f64 {
    let ious: Vec<Vec<f64>> = dets.iter().map(|d| gt.iter().map(|g| rotated_iou_bev(&d.bbox, g)).collect()).collect();
    oracles::brute_force_ap(&ious, gt.len(), thr, points)
}

/// Largest AP gap to the brute-force evaluator on ten scenes at three IoU thresholds.
pub fn ap_vs_brute_force(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gap: f64 = 0.0;
    for _ in 0..10 {
        let (gt, dets) = ap_scene(&mut rng);
        for thr in [0.25, 0.5, 0.7] {
            gap = gap.max((library_ap(&gt, &dets, thr, 41) - brute_ap(&gt, &dets, thr, 41)).abs());
        }
    }
    gap
}
