//! Oriented 3D boxes: containment, rotated BEV / 3D IoU and greedy NMS.
//!
//! Box convention: `dims = [w, h, l]` where `l` runs along the heading
//! `yaw`, `w` is the lateral extent and `h` the vertical extent. The center
//! is the geometric center of the box.

use serde::{Deserialize, Serialize};

use crate::lidar_geom::{normalize_angle, Vec3};

const EDGE_EPS: f64 = 1e-9;
const DEGENERATE_AREA: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Box3D {
    pub center: Vec3,
    #[serde(rename = "dims_whl")]
    pub dims: [f64; 3],
    pub yaw: f64,
    pub velocity: [f64; 2],
    #[serde(rename = "class")]
    pub class_id: u32,
    pub score: f64,
}

impl Box3D {
    /// Class 0, score 1, zero velocity; `yaw` is normalized.
    pub fn new(center: Vec3, dims_whl: [f64; 3], yaw: f64) -> Self {
        Box3D {
            center,
            dims: dims_whl,
            yaw: normalize_angle(yaw),
            velocity: [0.0; 2],
            class_id: 0,
            score: 1.0,
        }
    }

    pub fn with_velocity(mut self, v: [f64; 2]) -> Self {
        self.velocity = v;
        self
    }

    pub fn with_class(mut self, class_id: u32) -> Self {
        self.class_id = class_id;
        self
    }

    pub fn with_score(mut self, score: f64) -> Self {
        self.score = score;
        self
    }

    /// Every field finite and every dimension positive.
    pub fn is_well_formed(&self) -> bool {
        let finite = self
            .center
            .iter()
            .chain(&self.dims)
            .chain(&self.velocity)
            .chain([&self.yaw, &self.score])
            .all(|v| v.is_finite());
        finite && self.dims.iter().all(|&d| d > 0.0)
    }

    pub fn width(&self) -> f64 {
        self.dims[0]
    }

    pub fn height(&self) -> f64 {
        self.dims[1]
    }

    pub fn length(&self) -> f64 {
        self.dims[2]
    }

    pub fn is_valid(&self) -> bool {
        self.dims.iter().all(|d| *d > 0.0 && d.is_finite())
            && self.center.iter().all(|c| c.is_finite())
            && self.yaw.is_finite()
    }

    pub fn bev_area(&self) -> f64 {
        self.width() * self.length()
    }

    pub fn volume(&self) -> f64 {
        self.dims.iter().product()
    }

    pub fn z_range(&self) -> (f64, f64) {
        let half = 0.5 * self.height();
        (self.center[2] - half, self.center[2] + half)
    }

    /// Point in box coordinates: x along heading, y lateral, z up.
    pub fn to_local(&self, p: Vec3) -> Vec3 {
        let (s, c) = self.yaw.sin_cos();
        let dx = p[0] - self.center[0];
        let dy = p[1] - self.center[1];
        [c * dx + s * dy, -s * dx + c * dy, p[2] - self.center[2]]
    }

    /// BEV corners in counter-clockwise order.
    pub fn bev_corners(&self) -> [[f64; 2]; 4] {
        let (s, c) = self.yaw.sin_cos();
        let hl = 0.5 * self.length();
        let hw = 0.5 * self.width();
        let [cx, cy, _] = self.center;
        let corner = |a: f64, b: f64| [cx + a * hl * c - b * hw * s, cy + a * hl * s + b * hw * c];
        [
            corner(1.0, 1.0),
            corner(-1.0, 1.0),
            corner(-1.0, -1.0),
            corner(1.0, -1.0),
        ]
    }

    fn bev_radius(&self) -> f64 {
        0.5 * self.width().hypot(self.length())
    }
}

/// Inside test with the boundary counted as inside.
pub fn contains_point(b: &Box3D, p: Vec3) -> bool {
    let [x, y, z] = b.to_local(p);
    x.abs() <= 0.5 * b.length() && y.abs() <= 0.5 * b.width() && z.abs() <= 0.5 * b.height()
}

fn cross(o: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

/// Shoelace area (absolute).
pub fn polygon_area(poly: &[[f64; 2]]) -> f64 {
    if poly.len() < 3 {
        return 0.0;
    }
    let mut twice = 0.0;
    for i in 0..poly.len() {
        let a = poly[i];
        let b = poly[(i + 1) % poly.len()];
        twice += a[0] * b[1] - a[1] * b[0];
    }
    0.5 * twice.abs()
}

/// Clips convex `subject` against the convex counter-clockwise `clip`.
pub fn clip_convex(subject: &[[f64; 2]], clip: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut out: Vec<[f64; 2]> = subject.to_vec();
    for i in 0..clip.len() {
        if out.is_empty() {
            break;
        }
        let e0 = clip[i];
        let e1 = clip[(i + 1) % clip.len()];
        let input = std::mem::take(&mut out);
        let inside = |p: [f64; 2]| cross(e0, e1, p) >= -EDGE_EPS;
        for j in 0..input.len() {
            let cur = input[j];
            let prev = input[(j + input.len() - 1) % input.len()];
            let (ci, pi) = (inside(cur), inside(prev));
            if ci != pi {
                let dp = cross(e0, e1, prev);
                let dc = cross(e0, e1, cur);
                let t = dp / (dp - dc);
                out.push([
                    prev[0] + t * (cur[0] - prev[0]),
                    prev[1] + t * (cur[1] - prev[1]),
                ]);
            }
            if ci {
                out.push(cur);
            }
        }
    }
    out
}

/// Intersection area of the two BEV rectangles.
pub fn bev_intersection_area(a: &Box3D, b: &Box3D) -> f64 {
    let dx = a.center[0] - b.center[0];
    let dy = a.center[1] - b.center[1];
    let reach = a.bev_radius() + b.bev_radius();
    if dx * dx + dy * dy > reach * reach {
        return 0.0;
    }
    polygon_area(&clip_convex(&a.bev_corners(), &b.bev_corners()))
}

pub fn bev_iou(a: &Box3D, b: &Box3D) -> f64 {
    let (aa, ab) = (a.bev_area(), b.bev_area());
    if !(aa > DEGENERATE_AREA && ab > DEGENERATE_AREA) {
        return 0.0;
    }
    let inter = bev_intersection_area(a, b);
    if inter <= 0.0 {
        return 0.0;
    }
    (inter / (aa + ab - inter)).clamp(0.0, 1.0)
}

fn z_overlap(a: &Box3D, b: &Box3D) -> f64 {
    let (a0, a1) = a.z_range();
    let (b0, b1) = b.z_range();
    (a1.min(b1) - a0.max(b0)).max(0.0)
}

pub fn iou_3d(a: &Box3D, b: &Box3D) -> f64 {
    let (va, vb) = (a.volume(), b.volume());
    if !(a.bev_area() > DEGENERATE_AREA && b.bev_area() > DEGENERATE_AREA && va > 0.0 && vb > 0.0) {
        return 0.0;
    }
    let dz = z_overlap(a, b);
    if dz <= 0.0 {
        return 0.0;
    }
    let inter = bev_intersection_area(a, b) * dz;
    if inter <= 0.0 {
        return 0.0;
    }
    (inter / (va + vb - inter)).clamp(0.0, 1.0)
}

pub fn center_distance_bev(a: &Box3D, b: &Box3D) -> f64 {
    (a.center[0] - b.center[0]).hypot(a.center[1] - b.center[1])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OverlapMetric {
    #[default]
    Iou3d,
    Bev,
}

impl OverlapMetric {
    pub fn eval(self, a: &Box3D, b: &Box3D) -> f64 {
        match self {
            OverlapMetric::Iou3d => iou_3d(a, b),
            OverlapMetric::Bev => bev_iou(a, b),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NmsConfig {
    pub iou_threshold: f64,
    pub metric: OverlapMetric,
    /// Stop after this many boxes survive.
    pub max_keep: Option<usize>,
}

impl Default for NmsConfig {
    fn default() -> Self {
        NmsConfig {
            iou_threshold: 0.2,
            metric: OverlapMetric::Iou3d,
            max_keep: None,
        }
    }
}

/// Input indices sorted by descending score, ties by index.
pub fn score_order(dets: &[Box3D]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&i, &j| dets[j].score.total_cmp(&dets[i].score).then(i.cmp(&j)));
    order
}

/// Class-wise greedy NMS. Returns indices of kept boxes in descending score
/// order; a box survives iff its overlap with every previously kept box of
/// its class is at most the threshold.
pub fn nms_3d(dets: &[Box3D], cfg: &NmsConfig) -> Vec<usize> {
    let order = score_order(dets);
    let mut classes: Vec<u32> = dets.iter().map(|d| d.class_id).collect();
    classes.sort_unstable();
    classes.dedup();
    let limit = cfg.max_keep.unwrap_or(usize::MAX);
    if limit == 0 {
        return Vec::new();
    }

    // Classes are independent, so each can be suppressed on its own and
    // the survivors merged back in global score order.
    let per_class: Vec<Vec<usize>> = crate::parallel::map(&classes, |&cls| {
        let mut kept: Vec<usize> = Vec::new();
        for &i in order.iter().filter(|&&i| dets[i].class_id == cls) {
            if kept.len() >= limit {
                break;
            }
            let d = &dets[i];
            if kept
                .iter()
                .all(|&k| cfg.metric.eval(d, &dets[k]) <= cfg.iou_threshold)
            {
                kept.push(i);
            }
        }
        kept
    });

    let rank: Vec<usize> = {
        let mut r = vec![0; dets.len()];
        for (pos, &i) in order.iter().enumerate() {
            r[i] = pos;
        }
        r
    };
    let mut merged: Vec<usize> = per_class.into_iter().flatten().collect();
    merged.sort_unstable_by_key(|&i| rank[i]);
    merged.truncate(limit);
    merged
}

/// `n` random scored boxes of three classes with centers in a square of
/// half-side `extent`, clustered so that overlaps are common.
pub fn random_boxes(seed: u64, n: usize, extent: f64) -> Vec<Box3D> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let clusters = (n / 8).max(1);
    let centers: Vec<[f64; 2]> = (0..clusters)
        .map(|_| {
            [
                rng.gen_range(-extent..extent),
                rng.gen_range(-extent..extent),
            ]
        })
        .collect();
    (0..n)
        .map(|_| {
            let c = centers[rng.gen_range(0..clusters)];
            Box3D::new(
                [
                    c[0] + rng.gen_range(-1.5..1.5),
                    c[1] + rng.gen_range(-1.5..1.5),
                    rng.gen_range(-0.5..0.5),
                ],
                [
                    rng.gen_range(0.5..2.5),
                    rng.gen_range(0.5..2.0),
                    rng.gen_range(0.5..5.0),
                ],
                rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI),
            )
            .with_class(rng.gen_range(0..3))
            .with_score(rng.gen_range(0.0..1.0))
        })
        .collect()
}
