//! Pseudo-image scatter and the per-modality 2D backbone.

use std::collections::HashSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn;
use crate::pillarize::Modality;
use crate::tensor::{BoundParams, Graph, ParamStore, Var};

/// A `[C, H, W]` feature image on the detection grid.
#[derive(Clone, Copy, Debug)]
pub struct BevFeatureMap {
    pub features: Var,
    pub channels: usize,
    pub rows: usize,
    pub cols: usize,
    pub modality: Modality,
}

impl BevFeatureMap {
    pub fn from_var(g: &Graph, features: Var, modality: Modality) -> Result<Self> {
        let s = g.shape(features);
        if s.len() != 3 {
            return Err(Error::dim(format!("BEV map must be [C, H, W], got {:?}", s)));
        }
        Ok(Self { features, channels: s[0], rows: s[1], cols: s[2], modality })
    }
}

fn scatter_indices(n: usize, d: usize, coords: &[(usize, usize)], rows: usize, cols: usize) -> Result<Vec<usize>> {
    if coords.len() != n {
        return Err(Error::dim(format!("{} pillar embeddings but {} coordinates", n, coords.len())));
    }
    let mut seen = HashSet::with_capacity(n);
    let plane = rows * cols;
    let mut idx = Vec::with_capacity(n * d);
    for &(r, c) in coords {
        if r >= rows || c >= cols {
            return Err(Error::Index(format!("pillar ({r}, {c}) outside {rows}x{cols} grid")));
        }
        if !seen.insert((r, c)) {
            return Err(Error::contract(format!("duplicate pillar coordinate ({r}, {c})")));
        }
        idx.extend((0..d).map(|ch| ch * plane + r * cols + c));
    }
    Ok(idx)
}

/// Writes each pillar embedding (`[n, d]`) into its grid cell of a zeroed `[d, H, W]` map.
pub fn scatter_to_bev(
    g: &mut Graph,
    embeddings: Var,
    coords: &[(usize, usize)],
    rows: usize,
    cols: usize,
    modality: Modality,
) -> Result<BevFeatureMap> {
    let s = g.shape(embeddings).to_vec();
    if s.len() != 2 {
        return Err(Error::dim(format!("pillar embeddings must be [n, d], got {:?}", s)));
    }
    let idx = scatter_indices(s[0], s[1], coords, rows, cols)?;
    let map = g.scatter_add(embeddings, &idx, [s[1], rows, cols])?;
    BevFeatureMap::from_var(g, map, modality)
}

/// Reads the embedding at each coordinate back out of a map; the adjoint of [`scatter_to_bev`].
pub fn gather_from_bev(g: &mut Graph, map: &BevFeatureMap, coords: &[(usize, usize)]) -> Result<Var> {
    let idx = scatter_indices(coords.len(), map.channels, coords, map.rows, map.cols)?;
    g.gather(map.features, &idx, [coords.len(), map.channels])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    /// Channels of the stride-2 block.
    pub block1: usize,
    /// Channels of the stride-4 block.
    pub block2: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self { block1: 16, block2: 16 }
    }
}

impl BackboneConfig {
    /// Output channels given `d` input channels.
    pub fn out_channels(&self, d: usize) -> usize {
        d + self.block1 + self.block2
    }
}

pub fn init_backbone(store: &mut ParamStore, prefix: &str, d: usize, cfg: &BackboneConfig, rng: &mut impl Rng) {
    nn::init_conv3(store, &format!("{prefix}.block1"), d, cfg.block1, rng);
    nn::init_conv3(store, &format!("{prefix}.block2"), cfg.block1, cfg.block2, rng);
}

/// Two stride-2 conv+ReLU blocks, each upsampled back to `H x W` and
/// concatenated with the input map: `d + block1 + block2` output channels.
pub fn backbone_forward(g: &mut Graph, p: &BoundParams, prefix: &str, bev: &BevFeatureMap) -> Result<BevFeatureMap> {
    if bev.rows % 4 != 0 || bev.cols % 4 != 0 {
        return Err(Error::dim(format!(
            "backbone needs H and W divisible by 4, got {}x{}",
            bev.rows, bev.cols
        )));
    }
    let b1 = nn::conv3(g, p, &format!("{prefix}.block1"), bev.features, 2)?;
    let b1 = g.relu(b1)?;
    let b2 = nn::conv3(g, p, &format!("{prefix}.block2"), b1, 2)?;
    let b2 = g.relu(b2)?;
    let u1 = g.upsample_nearest(b1, 2)?;
    let u2 = g.upsample_nearest(b2, 4)?;
    let out = g.concat(&[bev.features, u1, u2], 0)?;
    BevFeatureMap::from_var(g, out, bev.modality)
}
