//! Shape-aware LiDAR-driven contrastive fusion.
//!
//! A small conv stack turns the LiDAR BEV map into per-class shape heatmaps.
//! The heatmaps are supervised with a penalty-reduced focal loss against
//! Gaussian-over-footprint targets, and the pre-sigmoid vectors at object
//! centers act as instance embeddings for a multi-class contrastive loss.
//! Finally the heatmaps are concatenated onto the radar BEV map and mixed in
//! by one 3x3 convolution, after cells scoring below `tau` are zeroed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bev::BevFeatureMap;
use crate::boxes::Box3D;
use crate::error::{Error, Result};
use crate::nn;
use crate::pillarize::GridConfig;
use crate::tensor::{BoundParams, Graph, ParamStore, Tensor, Var};

pub const FOCAL_GAMMA: i32 = 2;
pub const FOCAL_BETA: i32 = 4;
pub const PROB_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SalcConfig {
    /// Hidden channels of the shape network.
    pub hidden: usize,
    /// Background threshold on heatmap scores.
    pub tau: f64,
    /// Pass instance embeddings through tanh before the contrastive loss.
    /// On raw logits the loss has no lower bound and training diverges.
    pub bounded_embeddings: bool,
}

impl Default for SalcConfig {
    fn default() -> Self {
        Self { hidden: 8, tau: 0.1, bounded_embeddings: true }
    }
}

pub fn init_params(
    store: &mut ParamStore,
    cfg: &SalcConfig,
    lidar_channels: usize,
    radar_channels: usize,
    n_classes: usize,
    rng: &mut impl Rng,
) {
    nn::init_conv3(store, "salc.shape1", lidar_channels, cfg.hidden, rng);
    nn::init_conv3(store, "salc.shape2", cfg.hidden, cfg.hidden, rng);
    nn::init_conv3(store, "salc.shape3", cfg.hidden, n_classes, rng);
    // Start the heatmaps near a 0.1 foreground prior.
    if let Some(b) = store.get_mut("salc.shape3.b") {
        b.data_mut().iter_mut().for_each(|v| *v = -(9.0f64).ln());
    }
    nn::init_conv3(store, "salc.fuse", radar_channels + n_classes, radar_channels, rng);
}

#[derive(Clone, Copy, Debug)]
pub struct ShapeHeatmaps {
    /// Pre-sigmoid scores `[N_cls, H, W]`.
    pub logits: Var,
    /// `sigmoid(logits)`.
    pub scores: Var,
}

/// conv-ReLU-conv-ReLU-conv-sigmoid at input resolution.
pub fn shape_network(g: &mut Graph, p: &BoundParams, lidar: &BevFeatureMap) -> Result<ShapeHeatmaps> {
    let h = nn::conv3(g, p, "salc.shape1", lidar.features, 1)?;
    let h = g.relu(h)?;
    let h = nn::conv3(g, p, "salc.shape2", h, 1)?;
    let h = g.relu(h)?;
    let logits = nn::conv3(g, p, "salc.shape3", h, 1)?;
    let scores = g.sigmoid(logits)?;
    Ok(ShapeHeatmaps { logits, scores })
}

/// Heatmap supervision: `[N_cls, H, W]` targets plus the center cell of every instance.
#[derive(Clone, Debug, PartialEq)]
pub struct ShapeTargets {
    pub heatmap: Tensor,
    /// Per class, `(row, col)` of each instance center, in label order.
    pub centers: Vec<Vec<(usize, usize)>>,
}

impl ShapeTargets {
    pub fn num_instances(&self) -> usize {
        self.centers.iter().map(Vec::len).sum()
    }
}

/// Rasterizes class-wise shape targets.
///
/// A cell belongs to a box footprint when its center lies inside the box or
/// it is the box's center cell. Footprint cells get
/// `max(0.5, exp(-r^2 / (2 sigma^2)))` with `r` the distance from the cell
/// center to the box center and `sigma` one sixth of the BEV diagonal; the
/// center cell is exactly 1. Overlaps take the per-cell max.
pub fn make_shape_targets(labels: &[Box3D], grid: &GridConfig, n_classes: usize) -> ShapeTargets {
    let (rows, cols) = (grid.rows(), grid.cols());
    let mut heatmap = Tensor::zeros([n_classes, rows, cols]);
    let mut centers = vec![Vec::new(); n_classes];
    let mut forced = Vec::new();
    for b in labels {
        let cls = b.class.id();
        if cls >= n_classes {
            continue;
        }
        if b.is_degenerate() {
            log::warn!("skipping degenerate {} box at ({:.2}, {:.2})", b.class, b.cx, b.cy);
            continue;
        }
        let sigma = b.l.hypot(b.w) / 6.0;
        let reach = b.bev_radius();
        let r_lo = ((b.cx - reach - grid.x_range[0]) / grid.pillar_size).floor().max(0.0) as usize;
        let r_hi = (((b.cx + reach - grid.x_range[0]) / grid.pillar_size).ceil().max(0.0) as usize).min(rows);
        let c_lo = ((b.cy - reach - grid.y_range[0]) / grid.pillar_size).floor().max(0.0) as usize;
        let c_hi = (((b.cy + reach - grid.y_range[0]) / grid.pillar_size).ceil().max(0.0) as usize).min(cols);
        for r in r_lo..r_hi {
            for c in c_lo..c_hi {
                let (x, y) = grid.cell_center(r, c);
                if !b.contains_bev(x, y) {
                    continue;
                }
                let d2 = (x - b.cx).powi(2) + (y - b.cy).powi(2);
                let v = (-d2 / (2.0 * sigma * sigma)).exp().max(0.5);
                let cur = heatmap.at(&[cls, r, c]);
                heatmap.set(&[cls, r, c], cur.max(v));
            }
        }
        if let Some(cell) = grid.cell_of_xy(b.cx, b.cy) {
            if !centers[cls].contains(&cell) {
                centers[cls].push(cell);
            }
            forced.push((cls, cell));
        }
    }
    for (cls, (r, c)) in forced {
        heatmap.set(&[cls, r, c], 1.0);
    }
    ShapeTargets { heatmap, centers }
}

/// Cells whose score is at least `tau`.
pub fn threshold_filter(scores: &Tensor, tau: f64) -> Vec<bool> {
    scores.data().iter().map(|&v| v >= tau).collect()
}

/// Penalty-reduced focal loss over the heatmap, normalized by the instance count.
///
/// `-(1-G)^2 log G` at cells where `T == 1`, `-(1-T)^4 G^2 log(1-G)` elsewhere,
/// with `G` clamped to `[1e-6, 1-1e-6]`.
pub fn focal_shape_loss(g: &mut Graph, scores: Var, targets: &ShapeTargets) -> Result<Var> {
    if g.shape(scores) != targets.heatmap.shape() {
        return Err(Error::dim(format!(
            "heatmap {:?} vs targets {:?}",
            g.shape(scores),
            targets.heatmap.shape()
        )));
    }
    let t = targets.heatmap.data();
    let (pos, neg): (Vec<usize>, Vec<usize>) = (0..t.len()).partition(|&i| t[i] == 1.0);
    let clamped = g.clamp(scores, PROB_EPS, 1.0 - PROB_EPS)?;
    let mut terms = Vec::with_capacity(2);
    if !pos.is_empty() {
        let gp = g.gather(clamped, &pos, [pos.len()])?;
        let one_minus = g.affine(gp, -1.0, 1.0)?;
        let w = g.powi(one_minus, FOCAL_GAMMA)?;
        let lg = g.log(gp)?;
        let term = g.mul(w, lg)?;
        terms.push(g.sum(term)?);
    }
    if !neg.is_empty() {
        let gn = g.gather(clamped, &neg, [neg.len()])?;
        let penalty = g.constant(Tensor::new(
            [neg.len()],
            neg.iter().map(|&i| (1.0 - t[i]).powi(FOCAL_BETA)).collect(),
        )?);
        let gw = g.powi(gn, FOCAL_GAMMA)?;
        let one_minus = g.affine(gn, -1.0, 1.0)?;
        let lg = g.log(one_minus)?;
        let term = g.mul(gw, lg)?;
        let term = g.mul(term, penalty)?;
        terms.push(g.sum(term)?);
    }
    let norm = targets.num_instances().max(1) as f64;
    let total = match terms.as_slice() {
        [a] => *a,
        [a, b] => g.add(*a, *b)?,
        _ => g.constant(Tensor::scalar(0.0)),
    };
    g.scale(total, -1.0 / norm)
}

/// Instance embeddings arranged by class for the contrastive loss.
#[derive(Clone, Debug)]
pub struct InstanceMatrix {
    /// `[N_valid, M, N_cls]`: row `h` holds the center embeddings of `classes[h]`.
    pub s: Var,
    /// Same layout with the columns rotated by one.
    pub s_prime: Var,
    /// Class id of each valid row.
    pub classes: Vec<usize>,
    /// Flat cell index (`row * W + col`) behind each entry of `s`.
    pub cells: Vec<Vec<usize>>,
    /// `M`, the widest class row.
    pub max_centers: usize,
    /// Per class, whether it has a row.
    pub valid: Vec<bool>,
}

/// Gathers the pre-sigmoid vector `F[:, r, c]` at every instance center.
///
/// Rows shorter than `M` are padded with seeded random repeats of their own
/// centers; `S'` is `S` with its columns rotated by one. Returns `None` when
/// no class has a center.
pub fn gather_instance_indicators(
    g: &mut Graph,
    logits: Var,
    targets: &ShapeTargets,
    seed: u64,
) -> Result<Option<InstanceMatrix>> {
    let s = g.shape(logits).to_vec();
    if s.len() != 3 || s[0] != targets.centers.len() {
        return Err(Error::dim(format!(
            "logits {:?} vs {} target classes",
            s,
            targets.centers.len()
        )));
    }
    let (n_cls, rows, cols) = (s[0], s[1], s[2]);
    let max_centers = targets.centers.iter().map(Vec::len).max().unwrap_or(0);
    if max_centers == 0 {
        return Ok(None);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut classes = Vec::new();
    let mut cells = Vec::new();
    for (cls, centers) in targets.centers.iter().enumerate() {
        if centers.is_empty() {
            continue;
        }
        let mut row: Vec<usize> = centers.iter().map(|&(r, c)| r * cols + c).collect();
        while row.len() < max_centers {
            let pick = row[rng.random_range(0..centers.len())];
            row.push(pick);
        }
        classes.push(cls);
        cells.push(row);
    }
    let plane = rows * cols;
    let embed_idx = |cell: usize| (0..n_cls).map(move |ch| ch * plane + cell);
    let idx_s: Vec<usize> = cells.iter().flatten().flat_map(|&c| embed_idx(c)).collect();
    let idx_sp: Vec<usize> = cells
        .iter()
        .flat_map(|row| (0..max_centers).map(move |m| row[(m + 1) % max_centers]))
        .flat_map(embed_idx)
        .collect();
    let shape = [classes.len(), max_centers, n_cls];
    let s_var = g.gather(logits, &idx_s, shape)?;
    let sp_var = g.gather(logits, &idx_sp, shape)?;
    let mut valid = vec![false; n_cls];
    classes.iter().for_each(|&c| valid[c] = true);
    Ok(Some(InstanceMatrix { s: s_var, s_prime: sp_var, classes, cells, max_centers, valid }))
}

/// Multi-class contrastive loss.
///
/// With `d(A, B) = sum(A * B)` over a whole row and `M` the row width,
/// `L = -(1/N) sum_h log( exp(d(S_h, S'_h)/M^2) / sum_{w != h} exp(d(S_h, S'_w)/M^2) )`.
/// Fewer than two valid rows give a constant zero.
pub fn mccont_loss(g: &mut Graph, m: &InstanceMatrix) -> Result<Var> {
    let n = m.classes.len();
    if n < 2 {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let width = g.value(m.s).numel() / n;
    let s = g.reshape(m.s, [n, width])?;
    let sp = g.reshape(m.s_prime, [n, width])?;
    let spt = g.transpose(sp)?;
    let sim = g.matmul(s, spt)?;
    let sim = g.scale(sim, 1.0 / (m.max_centers * m.max_centers) as f64)?;
    let diag: Vec<usize> = (0..n).map(|h| h * n + h).collect();
    let off: Vec<usize> = (0..n)
        .flat_map(|h| (0..n).filter(move |&w| w != h).map(move |w| h * n + w))
        .collect();
    let pos = g.gather(sim, &diag, [n])?;
    let neg = g.gather(sim, &off, [n, n - 1])?;
    let lse = g.logsumexp(neg, 1)?;
    let per_row = g.sub(lse, pos)?;
    g.mean(per_row)
}

/// `tanh(x) = 2 sigmoid(2x) - 1`.
pub fn tanh(g: &mut Graph, x: Var) -> Result<Var> {
    let x2 = g.scale(x, 2.0)?;
    let s = g.sigmoid(x2)?;
    g.affine(s, 2.0, -1.0)
}

#[derive(Clone, Copy, Debug)]
pub struct ShapeLoss {
    pub total: Var,
    pub focal: Var,
    pub mccont: Var,
}

/// Focal heatmap loss plus the contrastive instance loss.
pub fn shape_loss(
    g: &mut Graph,
    heat: &ShapeHeatmaps,
    targets: &ShapeTargets,
    seed: u64,
    bounded_embeddings: bool,
) -> Result<ShapeLoss> {
    let focal = focal_shape_loss(g, heat.scores, targets)?;
    let mccont = match gather_instance_indicators(g, heat.logits, targets, seed)? {
        Some(mut m) => {
            if bounded_embeddings {
                m.s = tanh(g, m.s)?;
                m.s_prime = tanh(g, m.s_prime)?;
            }
            mccont_loss(g, &m)?
        }
        None => g.constant(Tensor::scalar(0.0)),
    };
    let total = g.add(focal, mccont)?;
    Ok(ShapeLoss { total, focal, mccont })
}

/// `G` with every cell below `tau` zeroed. The mask is treated as a constant.
pub fn background_filter(g: &mut Graph, scores: Var, tau: f64) -> Result<Var> {
    let shape = g.shape(scores).to_vec();
    let keep = threshold_filter(g.value(scores), tau);
    let mask = g.constant(Tensor::new(shape, keep.into_iter().map(|k| if k { 1.0 } else { 0.0 }).collect())?);
    g.mul(scores, mask)
}

/// Filters the heatmaps at `tau`, concatenates them onto the radar map and
/// mixes them in with one 3x3 conv + ReLU.
pub fn fuse_radar_bev(
    g: &mut Graph,
    p: &BoundParams,
    radar: &BevFeatureMap,
    heat: &ShapeHeatmaps,
    tau: f64,
) -> Result<BevFeatureMap> {
    let hs = g.shape(heat.scores).to_vec();
    if hs.len() != 3 || hs[1] != radar.rows || hs[2] != radar.cols {
        return Err(Error::dim(format!(
            "heatmaps {:?} vs radar map {}x{}",
            hs, radar.rows, radar.cols
        )));
    }
    let shapes = background_filter(g, heat.scores, tau)?;
    let cat = g.concat(&[radar.features, shapes], 0)?;
    let y = nn::conv3(g, p, "salc.fuse", cat, 1)?;
    let y = g.relu(y)?;
    BevFeatureMap::from_var(g, y, radar.modality)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::boxes::ObjectClass;

    fn grid(n: usize) -> GridConfig {
        GridConfig {
            x_range: [0.0, n as f64],
            y_range: [0.0, n as f64],
            pillar_size: 1.0,
            ..GridConfig::default()
        }
    }

    #[test]
    fn axis_aligned_two_by_two_box() {
        let g = grid(8);
        let b = Box3D::new(4.0, 4.0, 0.5, 2.0, 2.0, 1.0, 0.0, ObjectClass::Car);
        let t = make_shape_targets(&[b], &g, 3);
        let car = &t.heatmap.data()[..64];
        // Cell centers at 3.5/4.5 in each axis fall inside.
        assert_eq!(car.iter().filter(|&&v| v >= 0.5).count(), 4);
        assert_eq!(car.iter().filter(|&&v| v == 1.0).count(), 1);
        assert!(t.heatmap.data()[64..].iter().all(|&v| v == 0.0));
        assert_eq!(t.centers[0], vec![(4, 4)]);
    }

    #[test]
    fn overlapping_same_class_boxes_take_max() {
        let g = grid(10);
        let a = Box3D::new(4.0, 4.0, 0.5, 4.0, 2.0, 1.0, 0.0, ObjectClass::Cyclist);
        let b = Box3D::new(5.0, 4.0, 0.5, 4.0, 2.0, 1.0, 0.0, ObjectClass::Cyclist);
        let ta = make_shape_targets(&[a], &g, 3);
        let tb = make_shape_targets(&[b], &g, 3);
        let both = make_shape_targets(&[a, b], &g, 3);
        for i in 0..both.heatmap.numel() {
            let want = ta.heatmap.data()[i].max(tb.heatmap.data()[i]);
            assert_eq!(both.heatmap.data()[i], want, "cell {i}");
        }
    }

    #[test]
    fn degenerate_box_is_skipped() {
        let g = grid(8);
        let b = Box3D::new(4.0, 4.0, 0.5, 0.0, 2.0, 1.0, 0.0, ObjectClass::Car);
        let t = make_shape_targets(&[b], &g, 3);
        assert_eq!(t.num_instances(), 0);
        assert!(t.heatmap.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn threshold_all_true_at_half() {
        let s = Tensor::full([3, 4, 4], 0.5);
        assert!(threshold_filter(&s, 0.1).into_iter().all(|b| b));
    }

    #[test]
    fn focal_closed_form_single_cell() {
        let t = ShapeTargets { heatmap: Tensor::full([1, 1, 1], 1.0), centers: vec![vec![(0, 0)]] };
        let mut g = Graph::new();
        let s = g.constant(Tensor::full([1, 1, 1], 0.5));
        let l = focal_shape_loss(&mut g, s, &t).unwrap();
        let want = -(0.5f64).powi(2) * 0.5f64.ln();
        assert!((g.value(l).item() - want).abs() < 1e-15);
        assert!((want - 0.1733).abs() < 1e-4);
    }

    #[test]
    fn focal_perfect_prediction_is_near_zero() {
        let mut heat = Tensor::zeros([1, 3, 3]);
        heat.set(&[0, 1, 1], 1.0);
        let t = ShapeTargets { heatmap: heat.clone(), centers: vec![vec![(1, 1)]] };
        let mut g = Graph::new();
        let s = g.constant(heat);
        let l = focal_shape_loss(&mut g, s, &t).unwrap();
        assert!(g.value(l).item().abs() < 1e-9);
    }

    #[test]
    fn single_instance_matrix_has_no_negatives() {
        let mut heat = Tensor::zeros([2, 3, 3]);
        heat.set(&[0, 1, 1], 1.0);
        let t = ShapeTargets { heatmap: heat, centers: vec![vec![(1, 1)], vec![]] };
        let mut g = Graph::new();
        let f = g.constant(Tensor::from_fn([2, 3, 3], |i| i as f64));
        let m = gather_instance_indicators(&mut g, f, &t, 0).unwrap().unwrap();
        assert_eq!(g.shape(m.s), &[1, 1, 2]);
        assert_eq!(g.value(m.s).data(), &[4.0, 13.0]);
        let l = mccont_loss(&mut g, &m).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
    }

    #[test]
    fn no_centers_gives_none() {
        let t = ShapeTargets { heatmap: Tensor::zeros([2, 2, 2]), centers: vec![vec![], vec![]] };
        let mut g = Graph::new();
        let f = g.constant(Tensor::zeros([2, 2, 2]));
        assert!(gather_instance_indicators(&mut g, f, &t, 0).unwrap().is_none());
    }

    #[test]
    fn orthogonal_unit_embeddings_give_minus_one() {
        // Two classes, one instance each: e1 at class 0's center, e2 at class 1's.
        let mut f = Tensor::zeros([2, 1, 2]);
        f.set(&[0, 0, 0], 1.0);
        f.set(&[1, 0, 1], 1.0);
        let t = ShapeTargets { heatmap: Tensor::zeros([2, 1, 2]), centers: vec![vec![(0, 0)], vec![(0, 1)]] };
        let mut g = Graph::new();
        let fv = g.constant(f);
        let m = gather_instance_indicators(&mut g, fv, &t, 0).unwrap().unwrap();
        let l = mccont_loss(&mut g, &m).unwrap();
        assert!((g.value(l).item() + 1.0).abs() < 1e-15);
    }

    #[test]
    fn identical_embeddings_give_log_n_minus_one() {
        let f = Tensor::full([3, 1, 3], 0.7);
        let t = ShapeTargets {
            heatmap: Tensor::zeros([3, 1, 3]),
            centers: vec![vec![(0, 0)], vec![(0, 1)], vec![(0, 2)]],
        };
        let mut g = Graph::new();
        let fv = g.constant(f);
        let m = gather_instance_indicators(&mut g, fv, &t, 0).unwrap().unwrap();
        let l = mccont_loss(&mut g, &m).unwrap();
        assert!((g.value(l).item() - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn padding_only_repeats_own_centers() {
        let t = ShapeTargets {
            heatmap: Tensor::zeros([3, 4, 4]),
            centers: vec![vec![(0, 0), (1, 1), (2, 2), (3, 3)], vec![(0, 3)], vec![(3, 0), (2, 1)]],
        };
        let mut g = Graph::new();
        let f = g.constant(Tensor::zeros([3, 4, 4]));
        for seed in 0..20 {
            let m = gather_instance_indicators(&mut g, f, &t, seed).unwrap().unwrap();
            assert_eq!(m.max_centers, 4);
            for (row, &cls) in m.cells.iter().zip(&m.classes) {
                let own: Vec<usize> = t.centers[cls].iter().map(|&(r, c)| r * 4 + c).collect();
                assert!(row.iter().all(|c| own.contains(c)));
                assert!(own.iter().all(|c| row.contains(c)));
            }
        }
    }

    #[test]
    fn fuse_rejects_spatial_mismatch() {
        let mut s = ParamStore::new();
        init_params(&mut s, &SalcConfig::default(), 4, 2, 3, &mut ChaCha8Rng::seed_from_u64(0));
        let mut g = Graph::new();
        let p = s.bind(&mut g);
        let r = g.constant(Tensor::zeros([2, 4, 4]));
        let radar = BevFeatureMap::from_var(&g, r, crate::pillarize::Modality::Radar).unwrap();
        let logits = g.constant(Tensor::zeros([3, 4, 8]));
        let scores = g.sigmoid(logits).unwrap();
        let heat = ShapeHeatmaps { logits, scores };
        assert!(matches!(fuse_radar_bev(&mut g, &p, &radar, &heat, 0.1), Err(Error::Dimension(_))));
    }
}
