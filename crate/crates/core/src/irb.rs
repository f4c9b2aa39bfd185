//! Indicative radar-driven bidirectional fusion.
//!
//! The radar-radar branch gates the radar geometric features with weights
//! computed from the indicative channels; the radar-LiDAR branch injects the
//! same weights into LiDAR pillars through cross-attention with a residual.
//!
//! Parameters (all dense layers, see [`crate::nn`]):
//! - `irb.radar_spatial`: radar point MLP, `C1 -> d`, ReLU
//! - `irb.weight`: indicative weight, `(3 + d) -> d`, no activation
//! - `irb.lidar_point`: LiDAR point MLP, `C2 -> d`, ReLU
//! - `irb.query`: attention query projection on pooled LiDAR pillars, `d -> d`

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn;
use crate::pillarize::INDICATIVE_CHANNELS;
use crate::tensor::{BoundParams, Graph, ParamStore, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IrbConfig {
    /// Pillar embedding width; also the attention dimension `d_k`.
    pub d: usize,
    /// Row-softmax over the scaled attention scores. `false` runs the bare
    /// `p_l^s + (Q K^T / sqrt(d_k)) V` form.
    pub attention_softmax: bool,
}

impl Default for IrbConfig {
    fn default() -> Self {
        Self { d: 16, attention_softmax: true }
    }
}

pub fn init_params(store: &mut ParamStore, cfg: &IrbConfig, radar_spatial: usize, lidar: usize, rng: &mut impl Rng) {
    let d = cfg.d;
    nn::init_linear(store, "irb.radar_spatial", radar_spatial, d, rng);
    nn::init_linear(store, "irb.weight", INDICATIVE_CHANNELS + d, d, rng);
    nn::init_linear(store, "irb.lidar_point", lidar, d, rng);
    nn::init_linear(store, "irb.query", d, d, rng);
}

/// Output of the radar-radar branch, all `[N, P, d]`.
#[derive(Clone, Copy, Debug)]
pub struct RadarBranch {
    /// Radar geometric features `MLP(p_r^s)`.
    pub spatial: Var,
    /// Indicative weights `MLP(p_r^c ++ f_r^s)`.
    pub weight: Var,
    /// Gated radar features `sigmoid(w_r^c) * f_r^s`.
    pub gated: Var,
}

/// Radar-radar branch.
pub fn rr_branch(g: &mut Graph, p: &BoundParams, radar_spatial: Var, indicative: Var) -> Result<RadarBranch> {
    let (ss, si) = (g.shape(radar_spatial).to_vec(), g.shape(indicative).to_vec());
    if ss.len() != 3 || si.len() != 3 || ss[..2] != si[..2] || si[2] != INDICATIVE_CHANNELS {
        return Err(Error::dim(format!(
            "rr_branch: spatial {:?} and indicative {:?} are not aligned",
            ss, si
        )));
    }
    let f = nn::linear(g, p, "irb.radar_spatial", radar_spatial)?;
    let spatial = g.relu(f)?;
    let cat = g.concat(&[indicative, spatial], 2)?;
    let weight = nn::linear(g, p, "irb.weight", cat)?;
    let gate = g.sigmoid(weight)?;
    let gated = g.mul(gate, spatial)?;
    Ok(RadarBranch { spatial, weight, gated })
}

/// LiDAR point MLP producing `p_l^s` point features, `[M, P, d]`.
pub fn lidar_point_features(g: &mut Graph, p: &BoundParams, lidar: Var) -> Result<Var> {
    let f = nn::linear(g, p, "irb.lidar_point", lidar)?;
    g.relu(f)
}

/// Radar-LiDAR branch on pooled pillar vectors.
///
/// `lidar: [M, d]`, `radar_weight: [N, d]`. With no radar pillars the LiDAR
/// input is returned unchanged.
pub fn rl_branch(
    g: &mut Graph,
    p: &BoundParams,
    lidar: Var,
    radar_weight: Var,
    attention_softmax: bool,
) -> Result<Var> {
    let (sl, sr) = (g.shape(lidar).to_vec(), g.shape(radar_weight).to_vec());
    if sl.len() != 2 || sr.len() != 2 || sl[1] != sr[1] {
        return Err(Error::dim(format!("rl_branch: lidar {:?} vs radar {:?}", sl, sr)));
    }
    if sr[0] == 0 || sl[0] == 0 {
        return Ok(lidar);
    }
    let d_k = sr[1] as f64;
    let q = nn::linear(g, p, "irb.query", lidar)?;
    let kt = g.transpose(radar_weight)?;
    let scores = g.matmul(q, kt)?;
    let mut attn = g.scale(scores, 1.0 / d_k.sqrt())?;
    if attention_softmax {
        attn = g.softmax(attn, 1)?;
    }
    let ctx = g.matmul(attn, radar_weight)?;
    g.add(lidar, ctx)
}

/// Per-pillar max over the valid points of `features: [n, P, d]`; empty pillars give zeros.
pub fn pool_pillars(g: &mut Graph, features: Var, num_points: &[usize]) -> Result<Var> {
    g.masked_max(features, num_points)
}
