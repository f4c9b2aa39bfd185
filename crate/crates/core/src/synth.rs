//! Deterministic synthetic radar/LiDAR scenes.
//!
//! Class-conditional radar statistics only aim at the qualitative shape of
//! real 4D radar data: cars are the fastest movers, often parked, and reflect
//! most strongly; pedestrians are slow and reflect weakly; cyclists sit in
//! between. Unlabeled static "distractor" objects (signposts, bollards,
//! parked bikes) share the LiDAR footprint of pedestrians and cyclists but
//! are stationary and metallic, so only the radar indicative channels tell
//! them apart.
//!
//! The sensor sits at the origin, ground is `z = 0`, ego motion is along +x.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::boxes::{intersection_area_bev, Box3D, ObjectClass, NUM_CLASSES};
use crate::data::{q32, Frame};
use crate::error::{Error, Result};
use crate::pillarize::{LidarPoint, RadarPoint};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    pub seed: u64,
    /// Inclusive object-count ranges.
    pub cars: [u32; 2],
    pub pedestrians: [u32; 2],
    pub cyclists: [u32; 2],
    pub distractors: [u32; 2],
    /// Ego speed range along +x, m/s.
    pub ego_speed: [f64; 2],
    /// Box footprints are kept inside this planar region.
    pub x_range: [f64; 2],
    pub y_range: [f64; 2],
    /// Minimum planar distance between object centers, m.
    pub min_separation: f64,
    /// LiDAR returns on a car-sized object at 10 m; scales with surface area and 1/range.
    pub lidar_points_at_10m: f64,
    pub ground_points: u32,
    /// Mean radar returns per object: `base + per_m2 * footprint`.
    pub radar_points_base: f64,
    pub radar_points_per_m2: f64,
    /// Mean number of static background radar returns.
    pub clutter_rate: f64,
    pub lidar_noise: f64,
    pub radar_pos_noise: f64,
    pub velocity_noise: f64,
    /// Fraction of cars that are parked.
    pub car_stationary_fraction: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            cars: [1, 3],
            pedestrians: [1, 3],
            cyclists: [1, 2],
            distractors: [1, 3],
            ego_speed: [0.0, 10.0],
            x_range: [3.0, 24.0],
            y_range: [-11.0, 11.0],
            min_separation: 1.5,
            lidar_points_at_10m: 120.0,
            ground_points: 200,
            radar_points_base: 1.5,
            radar_points_per_m2: 0.8,
            clutter_rate: 6.0,
            lidar_noise: 0.02,
            radar_pos_noise: 0.05,
            velocity_noise: 0.1,
            car_stationary_fraction: 0.4,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        for (name, r) in [
            ("cars", self.cars),
            ("pedestrians", self.pedestrians),
            ("cyclists", self.cyclists),
            ("distractors", self.distractors),
        ] {
            if r[0] > r[1] {
                return bad(format!("{name} range {:?} is decreasing", r));
            }
        }
        for (name, r) in [("ego_speed", self.ego_speed), ("x_range", self.x_range), ("y_range", self.y_range)] {
            if !(r[0] <= r[1]) || !r[0].is_finite() || !r[1].is_finite() {
                return bad(format!("{name} {:?} is not a finite interval", r));
            }
        }
        if self.ego_speed[0] < 0.0 {
            return bad("ego_speed must be non-negative".into());
        }
        let nonneg = [
            ("min_separation", self.min_separation),
            ("lidar_points_at_10m", self.lidar_points_at_10m),
            ("radar_points_base", self.radar_points_base),
            ("radar_points_per_m2", self.radar_points_per_m2),
            ("clutter_rate", self.clutter_rate),
            ("lidar_noise", self.lidar_noise),
            ("radar_pos_noise", self.radar_pos_noise),
            ("velocity_noise", self.velocity_noise),
        ];
        for (name, v) in nonneg {
            if !(v >= 0.0) || !v.is_finite() {
                return bad(format!("{name} {v} must be finite and non-negative"));
            }
        }
        if !(0.0..=1.0).contains(&self.car_stationary_fraction) {
            return bad("car_stationary_fraction must lie in [0, 1]".into());
        }
        Ok(())
    }

    fn count_range(&self, class: ObjectClass) -> [u32; 2] {
        match class {
            ObjectClass::Car => self.cars,
            ObjectClass::Pedestrian => self.pedestrians,
            ObjectClass::Cyclist => self.cyclists,
        }
    }
}

/// Mean extent `[l, w, h]` per class.
pub const SIZE_PRIORS: [[f64; 3]; NUM_CLASSES] = [[4.2, 1.8, 1.6], [0.6, 0.6, 1.7], [1.8, 0.6, 1.7]];
/// Mean and standard deviation of RCS (dBsm) per class.
pub const RCS_PRIORS: [[f64; 2]; NUM_CLASSES] = [[12.0, 3.0], [-4.0, 3.0], [3.0, 3.0]];
const DISTRACTOR_RCS: [f64; 2] = [9.0, 3.0];
const CLUTTER_RCS: [f64; 2] = [-8.0, 4.0];
const PLACEMENT_RETRIES: usize = 50;

fn car_surface() -> f64 {
    surface(&SIZE_PRIORS[0])
}

fn surface(s: &[f64; 3]) -> f64 {
    s[0] * s[1] + 2.0 * (s[0] + s[1]) * s[2]
}

/// Where a radar return came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RadarSource {
    /// Index into `Frame::labels`.
    Object(usize),
    Distractor,
    Clutter,
}

struct Placed {
    bbox: Box3D,
    labeled: bool,
    rcs: [f64; 2],
}

fn normal(rng: &mut impl Rng, mean: f64, sd: f64) -> f64 {
    let z: f64 = StandardNormal.sample(rng);
    mean + sd * z
}

fn sample_speed(class: ObjectClass, spec: &SceneSpec, rng: &mut impl Rng) -> f64 {
    match class {
        ObjectClass::Car => {
            if rng.random::<f64>() < spec.car_stationary_fraction {
                0.0
            } else {
                rng.random_range(2.0..15.0)
            }
        }
        ObjectClass::Pedestrian => rng.random_range(0.0..2.0),
        ObjectClass::Cyclist => rng.random_range(1.0..8.0),
    }
}

fn try_place(
    class: ObjectClass,
    spec: &SceneSpec,
    placed: &[Placed],
    rng: &mut impl Rng,
) -> Option<Box3D> {
    let prior = SIZE_PRIORS[class.id()];
    for _ in 0..PLACEMENT_RETRIES {
        let size = prior.map(|s| q32(s * (1.0 + 0.05 * normal(rng, 0.0, 1.0)).clamp(0.85, 1.15)));
        let cx = q32(rng.random_range(spec.x_range[0]..=spec.x_range[1]));
        let cy = q32(rng.random_range(spec.y_range[0]..=spec.y_range[1]));
        // Stay clear of +-pi so the stored f32 yaw remains inside (-pi, pi].
        let yaw = q32(rng.random_range(-3.14..3.14));
        let b = Box3D::new(cx, cy, q32(size[2] / 2.0), size[0], size[1], size[2], yaw, class);
        let inside = b.corners_bev().iter().all(|&[x, y]| {
            (spec.x_range[0]..=spec.x_range[1]).contains(&x) && (spec.y_range[0]..=spec.y_range[1]).contains(&y)
        });
        if !inside {
            continue;
        }
        let clear = placed.iter().all(|p| {
            (p.bbox.cx - b.cx).hypot(p.bbox.cy - b.cy) >= spec.min_separation
                && intersection_area_bev(&p.bbox, &b) == 0.0
        });
        if clear {
            return Some(b);
        }
    }
    None
}

fn lidar_on_object(b: &Box3D, spec: &SceneSpec, rng: &mut impl Rng, out: &mut Vec<LidarPoint>) {
    let range = b.cx.hypot(b.cy).max(1.0);
    let n = (spec.lidar_points_at_10m * surface(&[b.l, b.w, b.h]) / car_surface() * 10.0 / range).round() as usize;
    let n = n.max(4);
    let (s, c) = b.yaw.sin_cos();
    // Faces in box coordinates: (normal u, normal v, area). Top is u = v = 0.
    let faces = [(1.0, 0.0, b.w * b.h), (-1.0, 0.0, b.w * b.h), (0.0, 1.0, b.l * b.h), (0.0, -1.0, b.l * b.h)];
    let to_sensor = [-b.cx, -b.cy];
    let mut weights: Vec<(Option<(f64, f64)>, f64)> = vec![(None, b.l * b.w)];
    for (nu, nv, area) in faces {
        let (nx, ny) = (c * nu - s * nv, s * nu + c * nv);
        if nx * to_sensor[0] + ny * to_sensor[1] > 0.0 {
            weights.push((Some((nu, nv)), area));
        }
    }
    let total: f64 = weights.iter().map(|w| w.1).sum();
    let local = |u: f64, v: f64| (b.cx + c * u - s * v, b.cy + s * u + c * v);
    for k in 0..n {
        let mut pick = rng.random::<f64>() * total;
        let mut face = weights[0].0;
        for &(f, w) in &weights {
            face = f;
            if pick < w {
                break;
            }
            pick -= w;
        }
        // The first point always lands on the top face so every box holds a return.
        if k == 0 {
            face = None;
        }
        let (u, v, z) = match face {
            None => (
                rng.random_range(-0.45..0.45) * b.l,
                rng.random_range(-0.45..0.45) * b.w,
                b.h,
            ),
            Some((nu, nv)) => {
                let t = rng.random_range(-0.5..0.5);
                let z = rng.random_range(0.05..1.0) * b.h;
                if nu != 0.0 {
                    (nu * b.l / 2.0, t * b.w, z)
                } else {
                    (t * b.l, nv * b.w / 2.0, z)
                }
            }
        };
        let (x, y) = local(u, v);
        let mut jitter = || normal(rng, 0.0, spec.lidar_noise);
        let (x, y, z) = (x + jitter(), y + jitter(), z + jitter());
        out.push(LidarPoint { x: q32(x), y: q32(y), z: q32(z), intensity: q32(rng.random_range(0.1..0.9)) });
    }
}

fn radar_point(
    x: f64,
    y: f64,
    z: f64,
    velocity: [f64; 2],
    ego: [f64; 2],
    rcs: [f64; 2],
    spec: &SceneSpec,
    rng: &mut impl Rng,
) -> RadarPoint {
    let r = x.hypot(y).max(1e-6);
    let los = [x / r, y / r];
    let v_true = velocity[0] * los[0] + velocity[1] * los[1];
    let ego_los = ego[0] * los[0] + ego[1] * los[1];
    let v_a = v_true + normal(rng, 0.0, spec.velocity_noise);
    let v_r = v_true - ego_los + normal(rng, 0.0, spec.velocity_noise);
    RadarPoint { x: q32(x), y: q32(y), z: q32(z), v_r: q32(v_r), v_a: q32(v_a), rcs: q32(normal(rng, rcs[0], rcs[1])) }
}

/// Frame generator state derived from `(spec.seed, frame_id)`.
fn frame_rng(seed: u64, frame_id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(frame_id);
    rng
}

pub fn generate_frame(spec: &SceneSpec, frame_id: u64) -> Frame {
    generate_frame_detailed(spec, frame_id).0
}

/// Generates a frame and reports the origin of every radar point.
pub fn generate_frame_detailed(spec: &SceneSpec, frame_id: u64) -> (Frame, Vec<RadarSource>) {
    let mut rng = frame_rng(spec.seed, frame_id);
    let ego = [q32(rng.random_range(spec.ego_speed[0]..=spec.ego_speed[1])), 0.0];

    let mut placed: Vec<Placed> = Vec::new();
    for class in [ObjectClass::Car, ObjectClass::Cyclist, ObjectClass::Pedestrian] {
        let [lo, hi] = spec.count_range(class);
        let n = rng.random_range(lo..=hi);
        for _ in 0..n {
            match try_place(class, spec, &placed, &mut rng) {
                Some(mut b) => {
                    let speed = sample_speed(class, spec, &mut rng);
                    b.velocity = [q32(speed * b.yaw.cos()), q32(speed * b.yaw.sin())];
                    placed.push(Placed { bbox: b, labeled: true, rcs: RCS_PRIORS[class.id()] });
                }
                None => log::warn!("frame {frame_id}: no room for another {class}, placing fewer"),
            }
        }
    }
    let n_distract = rng.random_range(spec.distractors[0]..=spec.distractors[1]);
    for _ in 0..n_distract {
        let look = if rng.random::<bool>() { ObjectClass::Pedestrian } else { ObjectClass::Cyclist };
        if let Some(b) = try_place(look, spec, &placed, &mut rng) {
            placed.push(Placed { bbox: b, labeled: false, rcs: DISTRACTOR_RCS });
        }
    }

    let mut lidar = Vec::new();
    for p in &placed {
        lidar_on_object(&p.bbox, spec, &mut rng, &mut lidar);
    }
    for _ in 0..spec.ground_points {
        let x = rng.random_range(spec.x_range[0]..=spec.x_range[1]);
        let y = rng.random_range(spec.y_range[0]..=spec.y_range[1]);
        let keep = (8.0 / x.hypot(y)).min(1.0);
        let z = normal(&mut rng, 0.0, spec.lidar_noise);
        let i = rng.random_range(0.0..0.3);
        if rng.random::<f64>() < keep {
            lidar.push(LidarPoint { x: q32(x), y: q32(y), z: q32(z), intensity: q32(i) });
        }
    }

    let mut radar = Vec::new();
    let mut sources = Vec::new();
    let mut label_idx = 0;
    for p in &placed {
        let b = &p.bbox;
        let mean = spec.radar_points_base + spec.radar_points_per_m2 * b.area_bev();
        let n = if mean > 0.0 { Poisson::new(mean).expect("positive mean").sample(&mut rng) as usize } else { 0 };
        let (s, c) = b.yaw.sin_cos();
        for _ in 0..n {
            let u = rng.random_range(-0.5..0.5) * b.l;
            let v = rng.random_range(-0.5..0.5) * b.w;
            let z = rng.random_range(0.2..0.9) * b.h;
            let x = b.cx + c * u - s * v + normal(&mut rng, 0.0, spec.radar_pos_noise);
            let y = b.cy + s * u + c * v + normal(&mut rng, 0.0, spec.radar_pos_noise);
            radar.push(radar_point(x, y, z, b.velocity, ego, p.rcs, spec, &mut rng));
            sources.push(if p.labeled { RadarSource::Object(label_idx) } else { RadarSource::Distractor });
        }
        if p.labeled {
            label_idx += 1;
        }
    }
    let n_clutter = if spec.clutter_rate > 0.0 {
        Poisson::new(spec.clutter_rate).expect("positive rate").sample(&mut rng) as usize
    } else {
        0
    };
    for _ in 0..n_clutter {
        let x = rng.random_range(spec.x_range[0]..=spec.x_range[1]);
        let y = rng.random_range(spec.y_range[0]..=spec.y_range[1]);
        let z = rng.random_range(0.0..2.5);
        radar.push(radar_point(x, y, z, [0.0, 0.0], ego, CLUTTER_RCS, spec, &mut rng));
        sources.push(RadarSource::Clutter);
    }

    let labels = placed.iter().filter(|p| p.labeled).map(|p| p.bbox).collect();
    (Frame { frame_id, ego_velocity: ego, radar, lidar, labels }, sources)
}

/// Train/val split: the last `round(n * val_fraction)` frames are validation.
pub fn default_splits(n_frames: u64, val_fraction: f64) -> BTreeMap<String, Vec<u64>> {
    let n_val = ((n_frames as f64) * val_fraction.clamp(0.0, 1.0)).round() as u64;
    let n_train = n_frames - n_val;
    BTreeMap::from([
        ("train".to_string(), (0..n_train).collect()),
        ("val".to_string(), (n_train..n_frames).collect()),
    ])
}
