//! Anchor-based detection head, RPN loss, box coding and rotated NMS.
//!
//! Every grid cell carries one anchor per class and yaw hypothesis; anchor
//! `a = ((cls * 2 + k) * H + row) * W + col` where `k` indexes the yaw.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bev::BevFeatureMap;
use crate::boxes::{normalize_yaw, rotated_iou_bev, Box3D, Detection, ObjectClass, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::nn;
use crate::pillarize::GridConfig;
use crate::tensor::{BoundParams, Graph, ParamStore, Tensor, Var};

pub const BOX_DOF: usize = 7;
pub const YAWS_PER_CELL: usize = 2;
pub const ANCHOR_YAWS: [f64; YAWS_PER_CELL] = [0.0, PI / 2.0];
const PRIOR_PROB: f64 = 0.01;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnchorConfig {
    /// `[l, w, h]` per class, in class-id order.
    pub sizes: [[f64; 3]; NUM_CLASSES],
    pub match_iou: [f64; NUM_CLASSES],
    pub unmatch_iou: [f64; NUM_CLASSES],
}

impl Default for AnchorConfig {
    fn default() -> Self {
        Self {
            sizes: [[4.2, 1.8, 1.6], [0.6, 0.6, 1.7], [1.8, 0.6, 1.7]],
            match_iou: [0.6, 0.5, 0.5],
            unmatch_iou: [0.45, 0.35, 0.35],
        }
    }
}

impl AnchorConfig {
    pub fn validate(&self) -> Result<()> {
        for c in 0..NUM_CLASSES {
            if self.sizes[c].iter().any(|&s| !(s > 0.0)) {
                return Err(Error::Config(format!("anchor size {:?} must be positive", self.sizes[c])));
            }
            let (m, u) = (self.match_iou[c], self.unmatch_iou[c]);
            if !(0.0 < u && u < m && m <= 1.0) {
                return Err(Error::Config(format!(
                    "class {c}: need 0 < unmatch_iou ({u}) < match_iou ({m}) <= 1"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeConfig {
    pub score_thr: f64,
    pub nms_iou: f64,
    pub max_dets: usize,
    /// Candidates kept (by score) before NMS.
    pub pre_nms: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self { score_thr: 0.1, nms_iou: 0.25, max_dets: 100, pre_nms: 1000 }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("score_thr", self.score_thr), ("nms_iou", self.nms_iou)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::Config(format!("{name} {v} must lie in (0, 1)")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub cls: f64,
    pub bbox: f64,
    pub dir: f64,
    pub focal_alpha: f64,
    pub focal_gamma: i32,
    pub smooth_l1_beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { cls: 1.0, bbox: 2.0, dir: 0.2, focal_alpha: 0.25, focal_gamma: 2, smooth_l1_beta: 1.0 / 9.0 }
    }
}

pub fn num_anchors(rows: usize, cols: usize) -> usize {
    NUM_CLASSES * YAWS_PER_CELL * rows * cols
}

/// All anchors of the grid, in anchor-index order. Anchors sit on the ground (`cz = h / 2`).
pub fn make_anchors(grid: &GridConfig, cfg: &AnchorConfig) -> Vec<Box3D> {
    let (rows, cols) = (grid.rows(), grid.cols());
    let mut out = Vec::with_capacity(num_anchors(rows, cols));
    for class in ObjectClass::ALL {
        let [l, w, h] = cfg.sizes[class.id()];
        for yaw in ANCHOR_YAWS {
            for r in 0..rows {
                for c in 0..cols {
                    let (x, y) = grid.cell_center(r, c);
                    out.push(Box3D::new(x, y, h / 2.0, l, w, h, yaw, class));
                }
            }
        }
    }
    out
}

pub fn init_params(store: &mut ParamStore, in_channels: usize, rng: &mut impl Rng) {
    let k = NUM_CLASSES * YAWS_PER_CELL;
    nn::init_conv1(store, "head.cls", in_channels, k, 0.01, rng);
    nn::init_conv1(store, "head.reg", in_channels, k * BOX_DOF, 0.01, rng);
    nn::init_conv1(store, "head.dir", in_channels, k * 2, 0.01, rng);
    let prior = -((1.0 - PRIOR_PROB) / PRIOR_PROB).ln();
    if let Some(b) = store.get_mut("head.cls.b") {
        b.data_mut().iter_mut().for_each(|v| *v = prior);
    }
}

/// Raw head outputs in anchor order.
#[derive(Clone, Copy, Debug)]
pub struct HeadOutput {
    /// `[A]` class logits, one per anchor (for the anchor's own class).
    pub cls: Var,
    /// `[A, 7]` box deltas.
    pub reg: Var,
    /// `[A, 2]` direction logits.
    pub dir: Var,
}

/// Rearranges a `[K * n, H, W]` conv output into `[K * H * W, n]`.
fn per_anchor(g: &mut Graph, x: Var, n: usize, plane: usize) -> Result<Var> {
    let k = NUM_CLASSES * YAWS_PER_CELL;
    let idx: Vec<usize> = (0..k)
        .flat_map(|a| (0..plane).flat_map(move |rc| (0..n).map(move |j| (a * n + j) * plane + rc)))
        .collect();
    g.gather(x, &idx, [k * plane, n])
}

pub fn head_forward(g: &mut Graph, p: &BoundParams, fused: &BevFeatureMap) -> Result<HeadOutput> {
    let plane = fused.rows * fused.cols;
    let cls = nn::conv1(g, p, "head.cls", fused.features)?;
    let cls = g.reshape(cls, [NUM_CLASSES * YAWS_PER_CELL * plane])?;
    let reg = nn::conv1(g, p, "head.reg", fused.features)?;
    let reg = per_anchor(g, reg, BOX_DOF, plane)?;
    let dir = nn::conv1(g, p, "head.dir", fused.features)?;
    let dir = per_anchor(g, dir, 2, plane)?;
    Ok(HeadOutput { cls, reg, dir })
}

/// Wraps `angle` into `[0, period)`.
pub fn limit_period(angle: f64, period: f64) -> f64 {
    angle - (angle / period).floor() * period
}

/// Heading bin: 1 when the yaw points into the lower half-turn `[pi, 2pi)`.
pub fn direction_bin(yaw: f64) -> usize {
    usize::from(yaw.rem_euclid(2.0 * PI) >= PI)
}

/// Delta encoding of `gt` relative to `anchor`: centers scaled by the anchor
/// diagonal (height for z), log size ratios, raw yaw difference.
pub fn encode_box(anchor: &Box3D, gt: &Box3D) -> ([f64; BOX_DOF], usize) {
    let diag = anchor.l.hypot(anchor.w);
    let deltas = [
        (gt.cx - anchor.cx) / diag,
        (gt.cy - anchor.cy) / diag,
        (gt.cz - anchor.cz) / anchor.h,
        (gt.l / anchor.l).ln(),
        (gt.w / anchor.w).ln(),
        (gt.h / anchor.h).ln(),
        gt.yaw - anchor.yaw,
    ];
    (deltas, direction_bin(gt.yaw))
}

/// Inverse of [`encode_box`]; the yaw's half-turn comes from `dir_bin`.
pub fn decode_box(anchor: &Box3D, d: &[f64], dir_bin: usize) -> Box3D {
    let diag = anchor.l.hypot(anchor.w);
    let yaw = limit_period(anchor.yaw + d[6], PI) + PI * dir_bin as f64;
    Box3D::new(
        anchor.cx + d[0] * diag,
        anchor.cy + d[1] * diag,
        anchor.cz + d[2] * anchor.h,
        anchor.l * d[3].exp(),
        anchor.w * d[4].exp(),
        anchor.h * d[5].exp(),
        normalize_yaw(yaw),
        anchor.class,
    )
}

pub const LABEL_IGNORE: i8 = -1;

/// Per-anchor training targets.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorTargets {
    /// 1 positive, 0 negative, -1 ignored.
    pub labels: Vec<i8>,
    /// Ground-truth index for positives.
    pub matched: Vec<Option<usize>>,
    /// Positive anchor indices, ascending.
    pub positives: Vec<usize>,
    /// Regression targets for `positives`, same order.
    pub reg: Vec<[f64; BOX_DOF]>,
    pub dir: Vec<usize>,
}

impl AnchorTargets {
    pub fn num_positive(&self) -> usize {
        self.positives.len()
    }
}

/// Matches anchors to same-class ground truth by rotated BEV IoU.
///
/// An anchor is positive if its best IoU reaches the class match threshold,
/// negative if below the unmatch threshold, ignored otherwise. In addition,
/// the highest-IoU anchor of every ground-truth box (first index on ties,
/// IoU > 0) is forced positive for that box.
pub fn assign_targets(anchors: &[Box3D], gt: &[Box3D], cfg: &AnchorConfig) -> AnchorTargets {
    let n = anchors.len();
    let mut best_iou = vec![0.0f64; n];
    let mut best_gt: Vec<Option<usize>> = vec![None; n];
    let mut gt_best: Vec<(f64, Option<usize>)> = vec![(0.0, None); gt.len()];
    for (a, anchor) in anchors.iter().enumerate() {
        for (j, b) in gt.iter().enumerate() {
            if b.class != anchor.class || b.is_degenerate() {
                continue;
            }
            let reach = anchor.bev_radius() + b.bev_radius();
            if (anchor.cx - b.cx).abs() > reach || (anchor.cy - b.cy).abs() > reach {
                continue;
            }
            let iou = rotated_iou_bev(anchor, b);
            if iou > best_iou[a] {
                best_iou[a] = iou;
                best_gt[a] = Some(j);
            }
            if iou > gt_best[j].0 {
                gt_best[j] = (iou, Some(a));
            }
        }
    }
    let mut labels = vec![0i8; n];
    let mut matched = vec![None; n];
    for a in 0..n {
        let c = anchors[a].class.id();
        if best_iou[a] >= cfg.match_iou[c] {
            labels[a] = 1;
            matched[a] = best_gt[a];
        } else if best_iou[a] >= cfg.unmatch_iou[c] {
            labels[a] = LABEL_IGNORE;
        }
    }
    for (j, &(_, a)) in gt_best.iter().enumerate() {
        if let Some(a) = a {
            labels[a] = 1;
            matched[a] = Some(j);
        }
    }
    let positives: Vec<usize> = (0..n).filter(|&a| labels[a] == 1).collect();
    let (reg, dir) = positives
        .iter()
        .map(|&a| encode_box(&anchors[a], &gt[matched[a].expect("positive has a match")]))
        .unzip();
    AnchorTargets { labels, matched, positives, reg, dir }
}

#[derive(Clone, Copy, Debug)]
pub struct RpnLoss {
    pub total: Var,
    pub cls: Var,
    pub bbox: Var,
    pub dir: Var,
}

/// Sigmoid focal classification over non-ignored anchors, Smooth-L1 box
/// regression (sin of the yaw difference) and direction cross-entropy over
/// positives. Every term is divided by `max(1, #positives)`.
pub fn rpn_loss(g: &mut Graph, out: &HeadOutput, t: &AnchorTargets, w: &LossWeights) -> Result<RpnLoss> {
    let n = g.shape(out.cls)[0];
    if t.labels.len() != n {
        return Err(Error::dim(format!("{} anchor logits vs {} targets", n, t.labels.len())));
    }
    let norm = 1.0 / t.num_positive().max(1) as f64;
    let zero = g.constant(Tensor::scalar(0.0));
    let negatives: Vec<usize> = (0..n).filter(|&a| t.labels[a] == 0).collect();

    let mut cls = zero;
    if !t.positives.is_empty() {
        // -alpha (1-p)^gamma log p
        let x = g.gather(out.cls, &t.positives, [t.positives.len()])?;
        let neg_x = g.scale(x, -1.0)?;
        let q = g.sigmoid(neg_x)?;
        let mw = g.powi(q, w.focal_gamma)?;
        let lp = g.log_sigmoid(x)?;
        let term = g.mul(mw, lp)?;
        let s = g.sum(term)?;
        let s = g.scale(s, -w.focal_alpha)?;
        cls = g.add(cls, s)?;
    }
    if !negatives.is_empty() {
        // -(1-alpha) p^gamma log(1-p)
        let x = g.gather(out.cls, &negatives, [negatives.len()])?;
        let p = g.sigmoid(x)?;
        let mw = g.powi(p, w.focal_gamma)?;
        let neg_x = g.scale(x, -1.0)?;
        let lq = g.log_sigmoid(neg_x)?;
        let term = g.mul(mw, lq)?;
        let s = g.sum(term)?;
        let s = g.scale(s, -(1.0 - w.focal_alpha))?;
        cls = g.add(cls, s)?;
    }
    let cls = g.scale(cls, norm)?;

    let (bbox, dir) = if t.positives.is_empty() {
        (zero, zero)
    } else {
        let np = t.positives.len();
        let lin_idx: Vec<usize> = t.positives.iter().flat_map(|&a| (0..6).map(move |j| a * BOX_DOF + j)).collect();
        let yaw_idx: Vec<usize> = t.positives.iter().map(|&a| a * BOX_DOF + 6).collect();
        let lin = g.gather(out.reg, &lin_idx, [np, 6])?;
        let lin_t = g.constant(Tensor::new([np, 6], t.reg.iter().flat_map(|r| r[..6].to_vec()).collect())?);
        let diff = g.sub(lin, lin_t)?;
        let l_lin = g.smooth_l1(diff, w.smooth_l1_beta)?;
        let l_lin = g.sum(l_lin)?;
        let yaw = g.gather(out.reg, &yaw_idx, [np])?;
        let yaw_t = g.constant(Tensor::new([np], t.reg.iter().map(|r| r[6]).collect())?);
        let dyaw = g.sub(yaw, yaw_t)?;
        let dyaw = g.sin(dyaw)?;
        let l_yaw = g.smooth_l1(dyaw, w.smooth_l1_beta)?;
        let l_yaw = g.sum(l_yaw)?;
        let bbox = g.add(l_lin, l_yaw)?;
        let bbox = g.scale(bbox, norm)?;

        let dir_idx: Vec<usize> = t.positives.iter().flat_map(|&a| [a * 2, a * 2 + 1]).collect();
        let logits = g.gather(out.dir, &dir_idx, [np, 2])?;
        let lse = g.logsumexp(logits, 1)?;
        let picked: Vec<usize> = t.positives.iter().zip(&t.dir).map(|(&a, &b)| a * 2 + b).collect();
        let picked = g.gather(out.dir, &picked, [np])?;
        let ce = g.sub(lse, picked)?;
        let ce = g.sum(ce)?;
        (bbox, g.scale(ce, norm)?)
    };

    let a = g.scale(cls, w.cls)?;
    let b = g.scale(bbox, w.bbox)?;
    let c = g.scale(dir, w.dir)?;
    let total = g.add(a, b)?;
    let total = g.add(total, c)?;
    Ok(RpnLoss { total, cls, bbox, dir })
}

/// `L_RPN + alpha * L_shape`; without a shape term the RPN loss is returned as is.
pub fn final_loss(g: &mut Graph, rpn: Var, shape: Option<Var>, alpha: f64) -> Result<Var> {
    match shape {
        Some(s) => {
            let s = g.scale(s, alpha)?;
            g.add(rpn, s)
        }
        None => Ok(rpn),
    }
}

/// Greedy rotated-BEV NMS over detections already sorted by descending score.
/// Returns the indices kept.
pub fn nms(dets: &[Detection], iou_thr: f64, max_keep: usize) -> Vec<usize> {
    let mut keep: Vec<usize> = Vec::new();
    for (i, d) in dets.iter().enumerate() {
        if keep.len() >= max_keep {
            break;
        }
        if keep.iter().all(|&k| rotated_iou_bev(&dets[k].bbox, &d.bbox) < iou_thr) {
            keep.push(i);
        }
    }
    keep
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Scores, thresholds, decodes and suppresses head outputs. Class-agnostic NMS.
pub fn decode_and_nms(
    cls: &Tensor,
    reg: &Tensor,
    dir: &Tensor,
    anchors: &[Box3D],
    cfg: &DecodeConfig,
) -> Result<Vec<Detection>> {
    let n = anchors.len();
    if cls.numel() != n || reg.numel() != n * BOX_DOF || dir.numel() != n * 2 {
        return Err(Error::dim(format!(
            "head outputs {:?}/{:?}/{:?} do not match {} anchors",
            cls.shape(),
            reg.shape(),
            dir.shape(),
            n
        )));
    }
    let mut cand: Vec<(usize, f64)> = cls
        .data()
        .iter()
        .enumerate()
        .map(|(a, &x)| (a, sigmoid(x)))
        .filter(|&(_, s)| s >= cfg.score_thr)
        .collect();
    cand.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    cand.truncate(cfg.pre_nms);
    let dets: Vec<Detection> = cand
        .iter()
        .map(|&(a, score)| {
            let d = &reg.data()[a * BOX_DOF..(a + 1) * BOX_DOF];
            let bin = usize::from(dir.data()[a * 2 + 1] > dir.data()[a * 2]);
            Detection { bbox: decode_box(&anchors[a], d, bin), score }
        })
        .collect();
    Ok(nms(&dets, cfg.nms_iou, cfg.max_dets).into_iter().map(|i| dets[i]).collect())
}

/// One line of a detections file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub frame_id: u64,
    pub class: ObjectClass,
    pub score: f64,
    pub cx: f64,
    pub cy: f64,
    pub cz: f64,
    pub l: f64,
    pub w: f64,
    pub h: f64,
    pub yaw: f64,
}

impl DetectionRecord {
    pub fn new(frame_id: u64, d: &Detection) -> Self {
        let b = &d.bbox;
        Self {
            frame_id,
            class: b.class,
            score: d.score,
            cx: b.cx,
            cy: b.cy,
            cz: b.cz,
            l: b.l,
            w: b.w,
            h: b.h,
            yaw: b.yaw,
        }
    }

    pub fn detection(&self) -> Detection {
        Detection {
            bbox: Box3D::new(self.cx, self.cy, self.cz, self.l, self.w, self.h, self.yaw, self.class),
            score: self.score,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_grid() -> GridConfig {
        GridConfig { x_range: [0.0, 8.0], y_range: [-4.0, 4.0], pillar_size: 1.0, ..GridConfig::default() }
    }

    #[test]
    fn anchor_layout_and_count() {
        let g = small_grid();
        let a = make_anchors(&g, &AnchorConfig::default());
        assert_eq!(a.len(), num_anchors(8, 8));
        let idx = ((2 * 2 + 1) * 8 + 3) * 8 + 5;
        assert_eq!(a[idx].class, ObjectClass::Cyclist);
        assert_eq!(a[idx].yaw, PI / 2.0);
        assert_eq!((a[idx].cx, a[idx].cy), g.cell_center(3, 5));
    }

    #[test]
    fn zero_params_give_half_scores() {
        let mut s = ParamStore::new();
        init_params(&mut s, 5, &mut ChaCha8Rng::seed_from_u64(0));
        s.iter_mut().for_each(|(_, t)| t.data_mut().iter_mut().for_each(|v| *v = 0.0));
        let mut g = Graph::new();
        let p = s.bind(&mut g);
        let x = g.constant(Tensor::from_fn([5, 4, 4], |i| i as f64));
        let m = BevFeatureMap::from_var(&g, x, crate::pillarize::Modality::Lidar).unwrap();
        let out = head_forward(&mut g, &p, &m).unwrap();
        assert_eq!(g.shape(out.cls), &[num_anchors(4, 4)]);
        assert_eq!(g.shape(out.reg), &[num_anchors(4, 4), 7]);
        assert!(g.value(out.cls).data().iter().all(|&v| sigmoid(v) == 0.5));
    }

    #[test]
    fn reg_rearrangement_matches_channel_layout() {
        let mut s = ParamStore::new();
        init_params(&mut s, 1, &mut ChaCha8Rng::seed_from_u64(0));
        let mut g = Graph::new();
        let p = s.bind(&mut g);
        let x = g.constant(Tensor::from_fn([1, 2, 4], |i| 1.0 + i as f64));
        let m = BevFeatureMap::from_var(&g, x, crate::pillarize::Modality::Lidar).unwrap();
        let out = head_forward(&mut g, &p, &m).unwrap();
        let w = s.get("head.reg.w").unwrap();
        // Anchor type 4, cell (1, 2), delta 3 reads channel 4*7+3.
        let a = (4 * 2 + 1) * 4 + 2;
        let want = w.at(&[4 * 7 + 3, 0]) * x_val(1, 2);
        assert!((g.value(out.reg).at(&[a, 3]) - want).abs() < 1e-12);
        fn x_val(r: usize, c: usize) -> f64 {
            1.0 + (r * 4 + c) as f64
        }
    }

    #[test]
    fn identical_anchor_is_positive_with_zero_deltas() {
        let g = small_grid();
        let cfg = AnchorConfig::default();
        let anchors = make_anchors(&g, &cfg);
        let gt = anchors[100];
        let t = assign_targets(&anchors, &[gt], &cfg);
        assert!(t.positives.contains(&100));
        let k = t.positives.iter().position(|&a| a == 100).unwrap();
        assert!(t.reg[k].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn no_ground_truth_means_all_negative() {
        let anchors = make_anchors(&small_grid(), &AnchorConfig::default());
        let t = assign_targets(&anchors, &[], &AnchorConfig::default());
        assert_eq!(t.num_positive(), 0);
        assert!(t.labels.iter().all(|&l| l == 0));
    }

    #[test]
    fn encode_decode_round_trip() {
        let anchor = Box3D::new(3.0, -1.0, 0.8, 4.2, 1.8, 1.6, PI / 2.0, ObjectClass::Car);
        for yaw in [-2.9, -1.0, 0.0, 0.3, 1.7, 3.0] {
            let gt = Box3D::new(3.4, -0.6, 0.9, 3.9, 1.7, 1.5, yaw, ObjectClass::Car);
            let (d, bin) = encode_box(&anchor, &gt);
            let back = decode_box(&anchor, &d, bin);
            for (a, b) in [(back.cx, gt.cx), (back.cy, gt.cy), (back.cz, gt.cz), (back.l, gt.l), (back.yaw, gt.yaw)] {
                assert!((a - b).abs() < 1e-9, "yaw {yaw}: {a} vs {b}");
            }
        }
        let zero = decode_box(&anchor, &[0.0; 7], direction_bin(anchor.yaw));
        assert!((zero.yaw - anchor.yaw).abs() < 1e-12 && zero.cx == anchor.cx && zero.l == anchor.l);
    }

    #[test]
    fn nms_keeps_higher_of_two_identical() {
        let b = Box3D::new(0.0, 0.0, 0.0, 2.0, 1.0, 1.0, 0.0, ObjectClass::Car);
        let dets = [Detection { bbox: b, score: 0.9 }, Detection { bbox: b, score: 0.4 }];
        assert_eq!(nms(&dets, 0.25, 100), vec![0]);
    }

    #[test]
    fn final_loss_alpha_zero_is_rpn() {
        let mut g = Graph::new();
        let r = g.constant(Tensor::scalar(1.25));
        let s = g.constant(Tensor::scalar(3.0));
        let f0 = final_loss(&mut g, r, Some(s), 0.0).unwrap();
        let f1 = final_loss(&mut g, r, Some(s), 1.0).unwrap();
        assert_eq!(g.value(f0).item(), 1.25);
        assert_eq!(g.value(f1).item(), 4.25);
    }

    #[test]
    fn perfect_predictions_have_tiny_loss() {
        let anchors = make_anchors(&small_grid(), &AnchorConfig::default());
        let gt = [anchors[70]];
        let t = assign_targets(&anchors, &gt, &AnchorConfig::default());
        let n = anchors.len();
        let mut cls = vec![-20.0; n];
        let mut reg = vec![0.0; n * 7];
        let mut dir = vec![0.0; n * 2];
        for (k, &a) in t.positives.iter().enumerate() {
            cls[a] = 20.0;
            reg[a * 7..a * 7 + 7].copy_from_slice(&t.reg[k]);
            dir[a * 2 + t.dir[k]] = 20.0;
        }
        let mut g = Graph::new();
        let out = HeadOutput {
            cls: g.constant(Tensor::new([n], cls).unwrap()),
            reg: g.constant(Tensor::new([n, 7], reg).unwrap()),
            dir: g.constant(Tensor::new([n, 2], dir).unwrap()),
        };
        let l = rpn_loss(&mut g, &out, &t, &LossWeights::default()).unwrap();
        assert!(g.value(l.total).item() < 1e-3);
    }
}
