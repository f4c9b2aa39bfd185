//! Grouping raw radar and LiDAR points into vertical pillars on the BEV grid.
//!
//! Every retained point becomes one feature row laid out as
//! `[x, y, z, <modality extras>, dx_c, dy_c, dz_c, dx_m, dy_m, dz_m]`, where the
//! `_c` offsets are to the pillar's geometric center and the `_m` offsets to
//! the mean of the pillar's retained points. Radar extras are
//! `(v_r, v_a, rcs)`, LiDAR extras are `(intensity)`.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Number of radar indicative channels `(v_r, v_a, rcs)`.
pub const INDICATIVE_CHANNELS: usize = 3;
pub const RADAR_CHANNELS: usize = 3 + INDICATIVE_CHANNELS + 6;
pub const LIDAR_CHANNELS: usize = 3 + 1 + 6;
/// Radar channels with the indicative triple removed.
pub const RADAR_SPATIAL_CHANNELS: usize = RADAR_CHANNELS - INDICATIVE_CHANNELS;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RadarPoint {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    /// Radial velocity relative to the ego vehicle, m/s.
    pub v_r: f64,
    /// Ego-motion-compensated radial velocity, m/s.
    pub v_a: f64,
    /// Radar cross-section, dBsm.
    pub rcs: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LidarPoint {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub intensity: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Radar,
    Lidar,
}

/// A point type that can be pillarized.
pub trait PillarPoint {
    const MODALITY: Modality;
    /// Raw channels: xyz followed by modality extras.
    const RAW: usize;

    fn xyz(&self) -> [f64; 3];
    fn write_raw(&self, out: &mut [f64]);
}

impl PillarPoint for RadarPoint {
    const MODALITY: Modality = Modality::Radar;
    const RAW: usize = 6;

    fn xyz(&self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    fn write_raw(&self, out: &mut [f64]) {
        out.copy_from_slice(&[self.x, self.y, self.z, self.v_r, self.v_a, self.rcs]);
    }
}

impl PillarPoint for LidarPoint {
    const MODALITY: Modality = Modality::Lidar;
    const RAW: usize = 4;

    fn xyz(&self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    fn write_raw(&self, out: &mut [f64]) {
        out.copy_from_slice(&[self.x, self.y, self.z, self.intensity]);
    }
}

/// BEV grid geometry and pillar capacity.
///
/// Rows index x (forward), columns index y (left).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub x_range: [f64; 2],
    pub y_range: [f64; 2],
    pub z_range: [f64; 2],
    pub pillar_size: f64,
    pub max_pillars: usize,
    pub max_points_per_pillar: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            x_range: [0.0, 25.6],
            y_range: [-12.8, 12.8],
            z_range: [-1.0, 3.0],
            pillar_size: 0.8,
            max_pillars: 1024,
            max_points_per_pillar: 16,
        }
    }
}

fn cells_along(range: [f64; 2], size: f64) -> Option<usize> {
    let n = (range[1] - range[0]) / size;
    let r = n.round();
    ((n - r).abs() < 1e-6 && r >= 1.0).then_some(r as usize)
}

impl GridConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.pillar_size > 0.0) {
            return bad(format!("pillar_size {} must be positive", self.pillar_size));
        }
        for (name, r) in [("x_range", self.x_range), ("y_range", self.y_range), ("z_range", self.z_range)] {
            if !(r[0] < r[1]) || !r[0].is_finite() || !r[1].is_finite() {
                return bad(format!("{name} {:?} is not an increasing finite interval", r));
            }
        }
        for (name, r) in [("x_range", self.x_range), ("y_range", self.y_range)] {
            if cells_along(r, self.pillar_size).is_none() {
                return bad(format!("{name} {:?} is not a multiple of pillar_size {}", r, self.pillar_size));
            }
        }
        if self.max_points_per_pillar == 0 || self.max_pillars == 0 {
            return bad("max_points_per_pillar and max_pillars must be >= 1".into());
        }
        Ok(())
    }

    /// Cells along x.
    pub fn rows(&self) -> usize {
        cells_along(self.x_range, self.pillar_size).expect("validated grid")
    }

    /// Cells along y.
    pub fn cols(&self) -> usize {
        cells_along(self.y_range, self.pillar_size).expect("validated grid")
    }

    pub fn contains(&self, x: f64, y: f64, z: f64) -> bool {
        (self.x_range[0]..self.x_range[1]).contains(&x)
            && (self.y_range[0]..self.y_range[1]).contains(&y)
            && (self.z_range[0]..self.z_range[1]).contains(&z)
    }

    /// Cell containing the planar point, ignoring z.
    pub fn cell_of_xy(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        if !(self.x_range[0]..self.x_range[1]).contains(&x) || !(self.y_range[0]..self.y_range[1]).contains(&y) {
            return None;
        }
        let r = (((x - self.x_range[0]) / self.pillar_size) as usize).min(self.rows() - 1);
        let c = (((y - self.y_range[0]) / self.pillar_size) as usize).min(self.cols() - 1);
        Some((r, c))
    }

    pub fn cell_of(&self, x: f64, y: f64, z: f64) -> Option<(usize, usize)> {
        if !self.contains(x, y, z) {
            return None;
        }
        self.cell_of_xy(x, y)
    }

    /// Planar center of a cell.
    pub fn cell_center(&self, row: usize, col: usize) -> (f64, f64) {
        (
            self.x_range[0] + (row as f64 + 0.5) * self.pillar_size,
            self.y_range[0] + (col as f64 + 0.5) * self.pillar_size,
        )
    }

    pub fn z_center(&self) -> f64 {
        0.5 * (self.z_range[0] + self.z_range[1])
    }
}

/// Padded per-pillar point features for one modality.
#[derive(Clone, Debug, PartialEq)]
pub struct PillarSet {
    /// `[num_pillars, P, C]`, rows past `num_points` zero.
    pub features: Tensor,
    /// `(row, col)` per pillar, unique, in increasing row-major order.
    pub coords: Vec<(usize, usize)>,
    pub num_points: Vec<usize>,
    pub modality: Modality,
}

impl PillarSet {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn points_per_pillar(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.features.shape()[2]
    }

    fn select_channels(&self, keep: impl Fn(usize) -> bool) -> Tensor {
        let s = self.features.shape();
        let (n, p, c) = (s[0], s[1], s[2]);
        let cols: Vec<usize> = (0..c).filter(|&i| keep(i)).collect();
        let mut out = Vec::with_capacity(n * p * cols.len());
        for row in self.features.data().chunks_exact(c) {
            out.extend(cols.iter().map(|&i| row[i]));
        }
        Tensor::new(vec![n, p, cols.len()], out).expect("channel selection")
    }

    /// Radar indicative features `(v_r, v_a, rcs)` as `[N, P, 3]`.
    pub fn indicative_slice(&self) -> Result<Tensor> {
        if self.modality != Modality::Radar {
            return Err(Error::contract("indicative_slice called on a LiDAR pillar set"));
        }
        Ok(self.select_channels(|i| (3..3 + INDICATIVE_CHANNELS).contains(&i)))
    }

    /// Geometric channels: everything for LiDAR, radar without the indicative triple.
    pub fn spatial_slice(&self) -> Tensor {
        match self.modality {
            Modality::Radar => self.select_channels(|i| !(3..3 + INDICATIVE_CHANNELS).contains(&i)),
            Modality::Lidar => self.features.clone(),
        }
    }
}

/// Per-pillar RNG stream so subsampling one pillar never depends on another.
fn pillar_rng(seed: u64, cell: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(cell as u64);
    rng
}

/// Groups `points` into pillars.
///
/// Out-of-range and non-finite points are dropped. Pillars holding more than
/// `P` points keep a seeded uniform subsample; beyond `max_pillars` the
/// sparsest pillars are dropped.
pub fn build_pillars<T: PillarPoint>(points: &[T], grid: &GridConfig, seed: u64) -> Result<PillarSet> {
    grid.validate()?;
    let p_max = grid.max_points_per_pillar;
    let raw = T::RAW;
    let channels = raw + 6;
    let cols = grid.cols();

    let mut cells: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, pt) in points.iter().enumerate() {
        let [x, y, z] = pt.xyz();
        if let Some((r, c)) = grid.cell_of(x, y, z) {
            let mut buf = vec![0.0; raw];
            pt.write_raw(&mut buf);
            if buf.iter().all(|v| v.is_finite()) {
                cells.entry(r * cols + c).or_default().push(i);
            }
        }
    }

    let mut kept: Vec<(usize, Vec<usize>)> = cells.into_iter().collect();
    if kept.len() > grid.max_pillars {
        kept.sort_by(|a, b| b.1.len().cmp(&a.1.len()).then(a.0.cmp(&b.0)));
        kept.truncate(grid.max_pillars);
        kept.sort_by_key(|(cell, _)| *cell);
    }

    let n = kept.len();
    let mut data = vec![0.0; n * p_max * channels];
    let mut coords = Vec::with_capacity(n);
    let mut num_points = Vec::with_capacity(n);
    let mut row_buf = vec![0.0; raw];
    for (k, (cell, mut members)) in kept.into_iter().enumerate() {
        if members.len() > p_max {
            let mut rng = pillar_rng(seed, cell);
            let mut pick: Vec<usize> = sample(&mut rng, members.len(), p_max)
                .into_iter()
                .map(|j| members[j])
                .collect();
            pick.sort_unstable();
            members = pick;
        }
        let (r, c) = (cell / cols, cell % cols);
        let (cx, cy) = grid.cell_center(r, c);
        let cz = grid.z_center();
        let m = members.len() as f64;
        let mut mean = [0.0; 3];
        for &i in &members {
            let p = points[i].xyz();
            (0..3).for_each(|d| mean[d] += p[d] / m);
        }
        for (j, &i) in members.iter().enumerate() {
            let off = (k * p_max + j) * channels;
            let row = &mut data[off..off + channels];
            points[i].write_raw(&mut row_buf);
            row[..raw].copy_from_slice(&row_buf);
            let [x, y, z] = points[i].xyz();
            row[raw..raw + 3].copy_from_slice(&[x - cx, y - cy, z - cz]);
            row[raw + 3..].copy_from_slice(&[x - mean[0], y - mean[1], z - mean[2]]);
        }
        coords.push((r, c));
        num_points.push(members.len());
    }

    Ok(PillarSet {
        features: Tensor::new(vec![n, p_max, channels], data)?,
        coords,
        num_points,
        modality: T::MODALITY,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn radar(x: f64, y: f64, z: f64, v_r: f64, v_a: f64, rcs: f64) -> RadarPoint {
        RadarPoint { x, y, z, v_r, v_a, rcs }
    }

    #[test]
    fn default_grid_is_valid() {
        let g = GridConfig::default();
        g.validate().unwrap();
        assert_eq!((g.rows(), g.cols()), (32, 32));
    }

    #[test]
    fn indivisible_range_is_rejected() {
        let g = GridConfig { pillar_size: 0.7, ..GridConfig::default() };
        assert!(matches!(g.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn point_at_pillar_center_has_zero_offsets() {
        let g = GridConfig::default();
        let (cx, cy) = g.cell_center(3, 7);
        let ps = build_pillars(&[radar(cx, cy, g.z_center(), -2.0, 0.5, 10.0)], &g, 0).unwrap();
        assert_eq!(ps.len(), 1);
        assert_eq!(ps.coords, vec![(3, 7)]);
        let row = &ps.features.data()[..RADAR_CHANNELS];
        assert!(row[6..].iter().all(|&v| v == 0.0), "{row:?}");
    }

    #[test]
    fn indicative_slice_passes_values_through() {
        let g = GridConfig::default();
        let ps = build_pillars(&[radar(5.0, 1.0, 0.5, -2.0, 0.5, 10.0)], &g, 0).unwrap();
        let s = ps.indicative_slice().unwrap();
        assert_eq!(s.shape(), &[1, g.max_points_per_pillar, INDICATIVE_CHANNELS]);
        assert_eq!(&s.data()[..3], &[-2.0, 0.5, 10.0]);
        assert!(s.data()[3..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn lidar_has_no_indicative_slice() {
        let g = GridConfig::default();
        let pts = [LidarPoint { x: 1.0, y: 0.0, z: 0.0, intensity: 0.3 }];
        let ps = build_pillars(&pts, &g, 0).unwrap();
        assert_eq!(ps.channels(), LIDAR_CHANNELS);
        assert!(matches!(ps.indicative_slice(), Err(Error::Contract(_))));
    }

    #[test]
    fn empty_and_out_of_range_inputs_give_empty_sets() {
        let g = GridConfig::default();
        let ps = build_pillars::<RadarPoint>(&[], &g, 0).unwrap();
        assert!(ps.is_empty());
        assert_eq!(ps.features.shape(), &[0, 16, RADAR_CHANNELS]);
        let far = build_pillars(&[radar(-5.0, 0.0, 0.0, 0.0, 0.0, 0.0)], &g, 0).unwrap();
        assert!(far.is_empty());
    }

    #[test]
    fn subsampling_caps_points_and_is_seeded() {
        let g = GridConfig { max_points_per_pillar: 4, ..GridConfig::default() };
        let pts: Vec<LidarPoint> = (0..10)
            .map(|i| LidarPoint { x: 1.0 + 0.01 * i as f64, y: 0.1, z: 0.0, intensity: i as f64 / 10.0 })
            .collect();
        let a = build_pillars(&pts, &g, 7).unwrap();
        let b = build_pillars(&pts, &g, 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.num_points, vec![4]);
        let c = build_pillars(&pts, &g, 8).unwrap();
        assert_ne!(a.features, c.features);
    }

    #[test]
    fn densest_pillars_survive_the_cap() {
        let g = GridConfig { max_pillars: 2, ..GridConfig::default() };
        let mut pts = vec![LidarPoint { x: 0.1, y: 0.1, z: 0.0, intensity: 0.0 }];
        pts.extend((0..3).map(|_| LidarPoint { x: 5.1, y: 0.1, z: 0.0, intensity: 0.0 }));
        pts.extend((0..2).map(|_| LidarPoint { x: 9.1, y: 0.1, z: 0.0, intensity: 0.0 }));
        let ps = build_pillars(&pts, &g, 0).unwrap();
        assert_eq!(ps.num_points.iter().sum::<usize>(), 5);
        assert_eq!(ps.len(), 2);
    }
}
