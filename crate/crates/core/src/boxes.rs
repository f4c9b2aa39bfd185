//! Oriented boxes, detections and rotated bird's-eye-view overlap.

use std::f64::consts::PI;
use std::fmt;

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ObjectClass {
    Car,
    Pedestrian,
    Cyclist,
}

pub const NUM_CLASSES: usize = 3;

impl ObjectClass {
    pub const ALL: [ObjectClass; NUM_CLASSES] = [ObjectClass::Car, ObjectClass::Pedestrian, ObjectClass::Cyclist];

    pub fn id(self) -> usize {
        self as usize
    }

    pub fn from_id(id: usize) -> Option<Self> {
        Self::ALL.get(id).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            ObjectClass::Car => "Car",
            ObjectClass::Pedestrian => "Pedestrian",
            ObjectClass::Cyclist => "Cyclist",
        }
    }
}

impl fmt::Display for ObjectClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Wraps an angle into `(-pi, pi]`.
pub fn normalize_yaw(yaw: f64) -> f64 {
    let mut a = yaw.rem_euclid(2.0 * PI);
    if a > PI {
        a -= 2.0 * PI;
    }
    a
}

/// Oriented 3D box: center and extents in meters, yaw about +z.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Box3D {
    pub cx: f64,
    pub cy: f64,
    pub cz: f64,
    /// Extent along the heading.
    pub l: f64,
    pub w: f64,
    pub h: f64,
    pub yaw: f64,
    pub class: ObjectClass,
    /// Planar velocity, ground truth only.
    #[serde(default)]
    pub velocity: [f64; 2],
}

impl Box3D {
    #[allow(clippy::too_many_arguments)]
    pub fn new(cx: f64, cy: f64, cz: f64, l: f64, w: f64, h: f64, yaw: f64, class: ObjectClass) -> Self {
        Self { cx, cy, cz, l, w, h, yaw: normalize_yaw(yaw), class, velocity: [0.0; 2] }
    }

    pub fn area_bev(&self) -> f64 {
        self.l * self.w
    }

    /// BEV corners in counter-clockwise order.
    pub fn corners_bev(&self) -> [[f64; 2]; 4] {
        let (s, c) = self.yaw.sin_cos();
        let (hl, hw) = (self.l / 2.0, self.w / 2.0);
        [(hl, hw), (-hl, hw), (-hl, -hw), (hl, -hw)].map(|(dx, dy)| {
            [self.cx + c * dx - s * dy, self.cy + s * dx + c * dy]
        })
    }

    /// Whether `(x, y)` lies inside the BEV footprint.
    pub fn contains_bev(&self, x: f64, y: f64) -> bool {
        let (s, c) = self.yaw.sin_cos();
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        u.abs() <= self.l / 2.0 && v.abs() <= self.w / 2.0
    }

    /// Radius of the circle circumscribing the footprint.
    pub fn bev_radius(&self) -> f64 {
        0.5 * self.l.hypot(self.w)
    }

    pub fn is_degenerate(&self) -> bool {
        !(self.l > 0.0 && self.w > 0.0 && self.h > 0.0)
    }
}

/// Scored box produced by the detector.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: Box3D,
    pub score: f64,
}

fn cross(o: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

/// Shoelace area of a simple polygon (positive for counter-clockwise).
pub fn polygon_area(poly: &[[f64; 2]]) -> f64 {
    let n = poly.len();
    if n < 3 {
        return 0.0;
    }
    let mut s = 0.0;
    for i in 0..n {
        let (p, q) = (poly[i], poly[(i + 1) % n]);
        s += p[0] * q[1] - q[0] * p[1];
    }
    0.5 * s
}

/// Sutherland–Hodgman clip of `subject` against the convex counter-clockwise `clip`.
pub fn clip_convex(subject: &[[f64; 2]], clip: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut out: Vec<[f64; 2]> = subject.to_vec();
    for i in 0..clip.len() {
        if out.is_empty() {
            break;
        }
        let (a, b) = (clip[i], clip[(i + 1) % clip.len()]);
        let input = std::mem::take(&mut out);
        for j in 0..input.len() {
            let cur = input[j];
            let prev = input[(j + input.len() - 1) % input.len()];
            let (dc, dp) = (cross(a, b, cur), cross(a, b, prev));
            if dc >= 0.0 {
                if dp < 0.0 {
                    out.push(intersect(prev, cur, dp, dc));
                }
                out.push(cur);
            } else if dp >= 0.0 {
                out.push(intersect(prev, cur, dp, dc));
            }
        }
    }
    out
}

fn intersect(p: [f64; 2], q: [f64; 2], dp: f64, dq: f64) -> [f64; 2] {
    let t = dp / (dp - dq);
    [p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]
}

/// Intersection area of two BEV footprints.
pub fn intersection_area_bev(a: &Box3D, b: &Box3D) -> f64 {
    let (dx, dy) = (a.cx - b.cx, a.cy - b.cy);
    let reach = a.bev_radius() + b.bev_radius();
    if dx * dx + dy * dy >= reach * reach {
        return 0.0;
    }
    polygon_area(&clip_convex(&a.corners_bev(), &b.corners_bev())).max(0.0)
}

/// Rotated BEV intersection-over-union in `[0, 1]`.
pub fn rotated_iou_bev(a: &Box3D, b: &Box3D) -> f64 {
    let inter = intersection_area_bev(a, b);
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area_bev() + b.area_bev() - inter;
    (inter / union).clamp(0.0, 1.0)
}
