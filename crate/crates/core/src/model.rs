//! The full detector: pillarization, IRB, two backbones, SALC and the head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::bev::{self, BevFeatureMap};
use crate::boxes::{Box3D, Detection, NUM_CLASSES};
use crate::config::{Config, IndicativeMask, Toggles};
use crate::data::Frame;
use crate::error::Result;
use crate::head::{self, AnchorTargets, HeadOutput, RpnLoss};
use crate::irb;
use crate::pillarize::{build_pillars, Modality, PillarSet, LIDAR_CHANNELS, RADAR_SPATIAL_CHANNELS};
use crate::salc::{self, ShapeHeatmaps, ShapeLoss, ShapeTargets};
use crate::tensor::{BoundParams, Graph, ParamStore, Tensor, Var};

/// Per-channel input scaling so every feature is O(1).
fn spatial_scale(modality: Modality, pillar: f64) -> Vec<f64> {
    let offsets = [1.0 / pillar, 1.0 / pillar, 0.5, 1.0 / pillar, 1.0 / pillar, 0.5];
    let mut s = vec![0.1, 0.1, 0.5];
    if modality == Modality::Lidar {
        s.push(1.0);
    }
    s.extend(offsets);
    s
}

const INDICATIVE_SCALE: [f64; 3] = [0.2, 0.2, 0.1];

fn scale_channels(t: &mut Tensor, scale: &[f64]) {
    for row in t.data_mut().chunks_exact_mut(scale.len()) {
        row.iter_mut().zip(scale).for_each(|(v, s)| *v *= s);
    }
}

/// Network-ready tensors for one frame.
#[derive(Clone, Debug)]
pub struct FrameInputs {
    pub radar: PillarSet,
    pub lidar: PillarSet,
    /// `[N, P, 9]`
    pub radar_spatial: Tensor,
    /// `[N, P, 3]`, masked channels zeroed.
    pub radar_indicative: Tensor,
    /// `[M, P, 10]`
    pub lidar_features: Tensor,
}

pub fn prepare_inputs(frame: &Frame, cfg: &Config, seed: u64) -> Result<FrameInputs> {
    let radar = build_pillars(&frame.radar, &cfg.grid, seed)?;
    let lidar = build_pillars(&frame.lidar, &cfg.grid, seed ^ 0x9e37_79b9_7f4a_7c15)?;
    let mut radar_spatial = radar.spatial_slice();
    scale_channels(&mut radar_spatial, &spatial_scale(Modality::Radar, cfg.grid.pillar_size));
    let mut radar_indicative = radar.indicative_slice()?;
    let mask = cfg.indicative.as_array();
    let ind_scale: Vec<f64> = (0..3).map(|i| if mask[i] { INDICATIVE_SCALE[i] } else { 0.0 }).collect();
    scale_channels(&mut radar_indicative, &ind_scale);
    let mut lidar_features = lidar.spatial_slice();
    scale_channels(&mut lidar_features, &spatial_scale(Modality::Lidar, cfg.grid.pillar_size));
    Ok(FrameInputs { radar, lidar, radar_spatial, radar_indicative, lidar_features })
}

/// Supervision for one frame, computed once and reused across steps.
#[derive(Clone, Debug)]
pub struct FrameTargets {
    pub anchors: AnchorTargets,
    pub shape: ShapeTargets,
}

#[derive(Clone, Copy, Debug)]
pub struct ForwardOutput {
    pub head: HeadOutput,
    pub heat: Option<ShapeHeatmaps>,
    /// Fused BEV map fed to the head.
    pub fused: Var,
    /// LiDAR pillar vectors after the R-L branch (or plain pooling).
    pub lidar_pillars: Var,
    /// Pooled LiDAR point features before the R-L branch.
    pub lidar_pooled: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct LossOutput {
    pub total: Var,
    pub rpn: RpnLoss,
    pub shape: Option<ShapeLoss>,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: Config,
    pub params: ParamStore,
    pub anchors: Vec<Box3D>,
}

impl Model {
    /// Fresh parameters for every module, whatever the toggles say, so
    /// ablations share one initialization and one checkpoint layout.
    pub fn new(cfg: &Config, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let m = &cfg.model;
        let d = m.irb.d;
        irb::init_params(&mut params, &m.irb, RADAR_SPATIAL_CHANNELS, LIDAR_CHANNELS, &mut rng);
        bev::init_backbone(&mut params, "radar_bb", d, &m.radar_backbone, &mut rng);
        bev::init_backbone(&mut params, "lidar_bb", d, &m.lidar_backbone, &mut rng);
        let (cr, cl) = (m.radar_backbone.out_channels(d), m.lidar_backbone.out_channels(d));
        salc::init_params(&mut params, &m.salc, cl, cr, NUM_CLASSES, &mut rng);
        head::init_params(&mut params, cr + cl, &mut rng);
        let anchors = head::make_anchors(&cfg.grid, &cfg.anchors);
        Ok(Self { cfg: cfg.clone(), params, anchors })
    }

    /// Rebuilds a model around loaded parameters after checking their shapes.
    pub fn with_params(cfg: &Config, params: ParamStore) -> Result<Self> {
        let mut m = Self::new(cfg, 0)?;
        params.check_compatible(&m.params)?;
        m.params = params;
        Ok(m)
    }

    pub fn toggles(&self) -> Toggles {
        self.cfg.toggles
    }

    pub fn indicative_mask(&self) -> IndicativeMask {
        self.cfg.indicative
    }

    pub fn prepare(&self, frame: &Frame) -> Result<FrameInputs> {
        prepare_inputs(frame, &self.cfg, frame.frame_id)
    }

    pub fn targets(&self, frame: &Frame) -> FrameTargets {
        FrameTargets {
            anchors: head::assign_targets(&self.anchors, &frame.labels, &self.cfg.anchors),
            shape: salc::make_shape_targets(&frame.labels, &self.cfg.grid, NUM_CLASSES),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &BoundParams, x: &FrameInputs) -> Result<ForwardOutput> {
        let t = self.cfg.toggles;
        let (rows, cols) = (self.cfg.grid.rows(), self.cfg.grid.cols());

        // Radar pillars.
        let rs = g.constant(x.radar_spatial.clone());
        let ri = g.constant(x.radar_indicative.clone());
        let (radar_points, radar_weight) = if t.irb_rr || t.irb_rl {
            let rr = irb::rr_branch(g, p, rs, ri)?;
            let feats = if t.irb_rr { rr.gated } else { rr.spatial };
            (feats, Some(rr.weight))
        } else {
            let f = crate::nn::linear(g, p, "irb.radar_spatial", rs)?;
            (g.relu(f)?, None)
        };
        let radar_pillars = irb::pool_pillars(g, radar_points, &x.radar.num_points)?;

        // LiDAR pillars.
        let lf = g.constant(x.lidar_features.clone());
        let lidar_points = irb::lidar_point_features(g, p, lf)?;
        let lidar_pooled = irb::pool_pillars(g, lidar_points, &x.lidar.num_points)?;
        let lidar_pillars = match radar_weight {
            Some(w) if t.irb_rl => {
                let w = irb::pool_pillars(g, w, &x.radar.num_points)?;
                irb::rl_branch(g, p, lidar_pooled, w, self.cfg.model.irb.attention_softmax)?
            }
            _ => lidar_pooled,
        };

        let radar_bev = bev::scatter_to_bev(g, radar_pillars, &x.radar.coords, rows, cols, Modality::Radar)?;
        let lidar_bev = bev::scatter_to_bev(g, lidar_pillars, &x.lidar.coords, rows, cols, Modality::Lidar)?;
        let mut radar_bev = bev::backbone_forward(g, p, "radar_bb", &radar_bev)?;
        let lidar_bev = bev::backbone_forward(g, p, "lidar_bb", &lidar_bev)?;

        let heat = if t.salc {
            let heat = salc::shape_network(g, p, &lidar_bev)?;
            radar_bev = salc::fuse_radar_bev(g, p, &radar_bev, &heat, self.cfg.model.salc.tau)?;
            Some(heat)
        } else {
            None
        };
        let fused = g.concat(&[radar_bev.features, lidar_bev.features], 0)?;
        let fused_map = BevFeatureMap::from_var(g, fused, Modality::Lidar)?;
        let head = head::head_forward(g, p, &fused_map)?;
        Ok(ForwardOutput { head, heat, fused, lidar_pillars, lidar_pooled })
    }

    /// `L_RPN + alpha * L_shape`, the shape term only when SALC is on.
    pub fn loss(
        &self,
        g: &mut Graph,
        p: &BoundParams,
        x: &FrameInputs,
        targets: &FrameTargets,
        seed: u64,
    ) -> Result<(ForwardOutput, LossOutput)> {
        let out = self.forward(g, p, x)?;
        let rpn = head::rpn_loss(g, &out.head, &targets.anchors, &self.cfg.loss)?;
        let shape = match out.heat {
            Some(h) => Some(salc::shape_loss(g, &h, &targets.shape, seed, self.cfg.model.salc.bounded_embeddings)?),
            None => None,
        };
        let total = head::final_loss(g, rpn.total, shape.map(|s| s.total), self.cfg.model.alpha)?;
        Ok((out, LossOutput { total, rpn, shape }))
    }

    /// Detections for one prepared frame, plus the shape scores when SALC is on.
    pub fn detect_with_heatmaps(&self, x: &FrameInputs) -> Result<(Vec<Detection>, Option<Tensor>)> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g);
        let out = self.forward(&mut g, &p, x)?;
        let dets = head::decode_and_nms(
            g.value(out.head.cls),
            g.value(out.head.reg),
            g.value(out.head.dir),
            &self.anchors,
            &self.cfg.decode,
        )?;
        Ok((dets, out.heat.map(|h| g.value(h.scores).clone())))
    }

    pub fn detect(&self, frame: &Frame) -> Result<Vec<Detection>> {
        let x = self.prepare(frame)?;
        Ok(self.detect_with_heatmaps(&x)?.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_frame, SceneSpec};

    fn tiny() -> Config {
        let mut c = Config::default();
        c.model.irb.d = 4;
        c.model.radar_backbone = crate::bev::BackboneConfig { block1: 4, block2: 4 };
        c.model.lidar_backbone = c.model.radar_backbone.clone();
        c.model.salc.hidden = 4;
        c
    }

    #[test]
    fn forward_shapes() {
        let cfg = tiny();
        let m = Model::new(&cfg, 0).unwrap();
        let f = generate_frame(&SceneSpec::default(), 0);
        let x = m.prepare(&f).unwrap();
        let mut g = Graph::new();
        let p = m.params.bind(&mut g);
        let t = m.targets(&f);
        let (out, loss) = m.loss(&mut g, &p, &x, &t, 0).unwrap();
        assert_eq!(g.shape(out.head.cls), &[m.anchors.len()]);
        assert_eq!(g.shape(out.fused), &[24, 32, 32]);
        assert!(g.value(loss.total).item().is_finite());
        assert!(loss.shape.is_some());
    }

    #[test]
    fn masked_indicative_channels_are_zero() {
        let mut cfg = tiny();
        cfg.indicative = IndicativeMask { v_r: false, v_a: true, rcs: false };
        let f = generate_frame(&SceneSpec::default(), 2);
        let x = prepare_inputs(&f, &cfg, 0).unwrap();
        for (k, row) in x.radar_indicative.data().chunks_exact(3).enumerate() {
            assert_eq!(row[0], 0.0, "row {k}");
            assert_eq!(row[2], 0.0, "row {k}");
        }
        assert!(x.radar_indicative.data().chunks_exact(3).any(|r| r[1] != 0.0));
    }

    #[test]
    fn baseline_has_no_shape_loss() {
        let mut cfg = tiny();
        cfg.toggles = Toggles::BASELINE;
        let m = Model::new(&cfg, 0).unwrap();
        let f = generate_frame(&SceneSpec::default(), 0);
        let x = m.prepare(&f).unwrap();
        let mut g = Graph::new();
        let p = m.params.bind(&mut g);
        let (_, loss) = m.loss(&mut g, &p, &x, &m.targets(&f), 0).unwrap();
        assert!(loss.shape.is_none());
    }
}
