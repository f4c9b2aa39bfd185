//! Class-wise average precision and mAP over BEV IoU, per evaluation region.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::boxes::{rotated_iou_bev, Box3D, Detection, ObjectClass, NUM_CLASSES};
use crate::error::{Error, Result};

/// Axis-aligned planar region; boxes belong to it by their center.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Region {
    pub x_range: [f64; 2],
    pub y_range: [f64; 2],
}

impl Region {
    pub fn contains(&self, b: &Box3D) -> bool {
        (self.x_range[0]..=self.x_range[1]).contains(&b.cx) && (self.y_range[0]..=self.y_range[1]).contains(&b.cy)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Matching IoU per class id.
    pub iou_thresholds: [f64; NUM_CLASSES],
    pub corridor: Region,
    pub recall_points: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iou_thresholds: [0.5, 0.25, 0.25],
            corridor: Region { x_range: [0.0, 25.6], y_range: [-4.0, 4.0] },
            recall_points: 41,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if let Some(t) = self.iou_thresholds.iter().find(|&&t| !(t > 0.0 && t <= 1.0)) {
            return Err(Error::Config(format!("IoU threshold {t} must lie in (0, 1]")));
        }
        if self.recall_points < 2 {
            return Err(Error::Config("recall_points must be at least 2".into()));
        }
        Ok(())
    }
}

/// Per-frame detections and ground truth, keyed by frame id.
pub type FrameDetections = BTreeMap<u64, Vec<Detection>>;
pub type FrameLabels = BTreeMap<u64, Vec<Box3D>>;

/// Greedy matching result for one class: `(score, is_true_positive)` in
/// descending score order, and the ground-truth count.
pub fn match_detections(
    dets: &FrameDetections,
    gts: &FrameLabels,
    class: ObjectClass,
    iou_thr: f64,
) -> (Vec<(f64, bool)>, usize) {
    let mut order: Vec<(u64, &Detection)> = dets
        .iter()
        .flat_map(|(&f, ds)| ds.iter().filter(|d| d.bbox.class == class).map(move |d| (f, d)))
        .collect();
    order.sort_by(|a, b| b.1.score.total_cmp(&a.1.score));
    let class_gt: BTreeMap<u64, Vec<&Box3D>> = gts
        .iter()
        .map(|(&f, bs)| (f, bs.iter().filter(|b| b.class == class).collect()))
        .collect();
    let n_gt = class_gt.values().map(Vec::len).sum();
    let mut used: BTreeMap<u64, Vec<bool>> = class_gt.iter().map(|(&f, v)| (f, vec![false; v.len()])).collect();
    let mut out = Vec::with_capacity(order.len());
    for (f, d) in order {
        let mut best: Option<(usize, f64)> = None;
        if let (Some(cands), Some(taken)) = (class_gt.get(&f), used.get(&f)) {
            for (j, g) in cands.iter().enumerate() {
                if taken[j] {
                    continue;
                }
                let iou = rotated_iou_bev(&d.bbox, g);
                if iou >= iou_thr && best.is_none_or(|(_, b)| iou > b) {
                    best = Some((j, iou));
                }
            }
        }
        if let Some((j, _)) = best {
            used.get_mut(&f).expect("frame present")[j] = true;
        }
        out.push((d.score, best.is_some()));
    }
    (out, n_gt)
}

/// Interpolated AP: the mean over `points` evenly spaced recall levels in
/// `[0, 1]` of the best precision at recall at least that level.
pub fn interpolated_ap(matches: &[(f64, bool)], n_gt: usize, points: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let mut tp = 0usize;
    let mut curve = Vec::with_capacity(matches.len());
    for (k, &(_, hit)) in matches.iter().enumerate() {
        tp += usize::from(hit);
        curve.push((tp as f64 / n_gt as f64, tp as f64 / (k + 1) as f64));
    }
    // Suffix max of precision so lookups are monotone.
    for i in (0..curve.len().saturating_sub(1)).rev() {
        curve[i].1 = curve[i].1.max(curve[i + 1].1);
    }
    let mut sum = 0.0;
    for i in 0..points {
        let r = i as f64 / (points - 1) as f64;
        if let Some(&(_, p)) = curve.iter().find(|&&(rec, _)| rec >= r - 1e-12) {
            sum += p;
        }
    }
    sum / points as f64
}

/// AP of one class, `None` when the class has no ground truth.
pub fn average_precision(
    dets: &FrameDetections,
    gts: &FrameLabels,
    class: ObjectClass,
    cfg: &EvalConfig,
) -> Option<f64> {
    let (m, n_gt) = match_detections(dets, gts, class, cfg.iou_thresholds[class.id()]);
    if n_gt == 0 {
        log::warn!("no {class} ground truth; AP undefined and left out of mAP");
        return None;
    }
    Some(interpolated_ap(&m, n_gt, cfg.recall_points))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionReport {
    /// AP per class name; `null` when undefined.
    pub ap: BTreeMap<String, Option<f64>>,
    #[serde(rename = "mAP")]
    pub map: Option<f64>,
}

pub fn map_over_classes(dets: &FrameDetections, gts: &FrameLabels, cfg: &EvalConfig) -> RegionReport {
    let mut ap = BTreeMap::new();
    let mut defined = Vec::new();
    for class in ObjectClass::ALL {
        let v = average_precision(dets, gts, class, cfg);
        if let Some(x) = v {
            defined.push(x);
        }
        ap.insert(class.name().to_string(), v);
    }
    let map = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
    if map.is_none() {
        log::warn!("no ground truth in region; report is empty");
    }
    RegionReport { ap, map }
}

pub fn filter_region(dets: &FrameDetections, gts: &FrameLabels, region: &Region) -> (FrameDetections, FrameLabels) {
    let d = dets
        .iter()
        .map(|(&f, v)| (f, v.iter().filter(|d| region.contains(&d.bbox)).copied().collect()))
        .collect();
    let g = gts.iter().map(|(&f, v)| (f, v.iter().filter(|b| region.contains(b)).copied().collect())).collect();
    (d, g)
}

/// Report over the whole area and the driving corridor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EvalReport {
    pub regions: BTreeMap<String, RegionReport>,
}

pub fn evaluate(dets: &FrameDetections, gts: &FrameLabels, cfg: &EvalConfig) -> EvalReport {
    let mut regions = BTreeMap::new();
    regions.insert("all".to_string(), map_over_classes(dets, gts, cfg));
    let (d, g) = filter_region(dets, gts, &cfg.corridor);
    regions.insert("corridor".to_string(), map_over_classes(&d, &g, cfg));
    EvalReport { regions }
}

impl EvalReport {
    pub fn map(&self, region: &str) -> Option<f64> {
        self.regions.get(region).and_then(|r| r.map)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Plain-text table, one row per region.
    pub fn to_table(&self) -> String {
        let cell = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{:.2}", 100.0 * x));
        let mut s = format!("{:<10}", "region");
        for c in ObjectClass::ALL {
            let _ = write!(s, " {:>10}", c.name());
        }
        let _ = writeln!(s, " {:>8}", "mAP");
        for (name, r) in &self.regions {
            let _ = write!(s, "{name:<10}");
            for c in ObjectClass::ALL {
                let _ = write!(s, " {:>10}", cell(r.ap.get(c.name()).copied().flatten()));
            }
            let _ = writeln!(s, " {:>8}", cell(r.map));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn car(x: f64, y: f64) -> Box3D {
        Box3D::new(x, y, 0.8, 4.0, 2.0, 1.6, 0.0, ObjectClass::Car)
    }

    fn det(b: Box3D, score: f64) -> Detection {
        Detection { bbox: b, score }
    }

    #[test]
    fn perfect_detections_give_one() {
        let gts = FrameLabels::from([(0, vec![car(5.0, 0.0), car(15.0, 3.0)])]);
        let dets = FrameDetections::from([(0, vec![det(car(5.0, 0.0), 1.0), det(car(15.0, 3.0), 1.0)])]);
        let r = map_over_classes(&dets, &gts, &EvalConfig::default());
        assert_eq!(r.ap["Car"], Some(1.0));
        assert_eq!(r.ap["Pedestrian"], None);
        assert_eq!(r.map, Some(1.0));
    }

    #[test]
    fn no_detections_give_zero() {
        let gts = FrameLabels::from([(0, vec![car(5.0, 0.0)])]);
        let r = map_over_classes(&FrameDetections::new(), &gts, &EvalConfig::default());
        assert_eq!(r.ap["Car"], Some(0.0));
    }

    #[test]
    fn empty_region_gives_empty_report() {
        let gts = FrameLabels::from([(0, vec![car(5.0, 8.0)])]);
        let r = evaluate(&FrameDetections::new(), &gts, &EvalConfig::default());
        assert_eq!(r.map("corridor"), None);
        assert_eq!(r.map("all"), Some(0.0));
        assert!(r.to_table().contains("corridor"));
    }

    #[test]
    fn detection_in_other_frame_does_not_match() {
        let gts = FrameLabels::from([(0, vec![car(5.0, 0.0)]), (1, vec![])]);
        let dets = FrameDetections::from([(1, vec![det(car(5.0, 0.0), 0.9)])]);
        let (m, n) = match_detections(&dets, &gts, ObjectClass::Car, 0.5);
        assert_eq!((m, n), (vec![(0.9, false)], 1));
    }

    #[test]
    fn half_recall_at_full_precision() {
        // 21 of 41 recall levels (0..=0.5) reach precision 1.
        let ap = interpolated_ap(&[(0.9, true)], 2, 41);
        assert!((ap - 21.0 / 41.0).abs() < 1e-12);
    }
}
