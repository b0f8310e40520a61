//! Synthetic scenes and a LiDAR raycaster.
//!
//! Rays leave the sensor origin at each beam's exact inclination and each
//! column's center azimuth, so a single static frame projects back into
//! the range image without a single collision.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::boxes::Box3D;
use crate::error::{Error, Result};
use crate::lidar_geom::{normalize_angle, LidarSpec, Point, PointCloud, RigidTransform, Vec3};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassProfile {
    pub class_id: u32,
    /// Relative sampling weight.
    pub weight: f64,
    pub dims_min: [f64; 3],
    pub dims_max: [f64; 3],
    pub speed_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneParams {
    pub num_boxes: usize,
    pub classes: Vec<ClassProfile>,
    pub field_radius: f64,
    /// Keep-out radius around the sensor.
    pub min_radius: f64,
    /// Ground height below the sensor; boxes rest on it.
    pub sensor_height: f64,
    pub max_attempts: usize,
}

impl Default for SceneParams {
    fn default() -> Self {
        let profile = |class_id, weight, dims_min, dims_max, speed_max| ClassProfile {
            class_id,
            weight,
            dims_min,
            dims_max,
            speed_max,
        };
        SceneParams {
            num_boxes: 12,
            classes: vec![
                profile(0, 0.6, [1.6, 1.4, 3.8], [2.1, 1.9, 5.2], 12.0),
                profile(1, 0.25, [0.5, 1.6, 0.5], [0.8, 1.9, 0.8], 1.5),
                profile(2, 0.15, [0.6, 1.2, 1.5], [0.9, 1.8, 1.9], 6.0),
            ],
            field_radius: 40.0,
            min_radius: 4.0,
            sensor_height: 1.8,
            max_attempts: 10_000,
        }
    }
}

impl SceneParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.num_boxes > 0 && self.classes.is_empty() {
            return bad("scene needs at least one class profile".into());
        }
        if !(self.field_radius > self.min_radius && self.min_radius >= 0.0) {
            return bad(format!(
                "field radius {} must exceed keep-out radius {}",
                self.field_radius, self.min_radius
            ));
        }
        for c in &self.classes {
            if c.weight.is_nan()
                || c.weight <= 0.0
                || c.speed_max.is_nan()
                || c.speed_max < 0.0
                || (0..3).any(|k| !(c.dims_min[k] > 0.0 && c.dims_min[k] <= c.dims_max[k]))
            {
                return bad(format!("invalid profile for class {}", c.class_id));
            }
        }
        Ok(())
    }
}

fn bev_radius(b: &Box3D) -> f64 {
    0.5 * b.width().hypot(b.length())
}

/// Places `num_boxes` boxes whose BEV circumcircles are disjoint, which
/// guarantees zero pairwise BEV overlap.
pub fn generate_scene(seed: u64, params: &SceneParams) -> Result<Vec<Box3D>> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total_weight: f64 = params.classes.iter().map(|c| c.weight).sum();
    let mut boxes: Vec<Box3D> = Vec::with_capacity(params.num_boxes);
    let mut attempts = 0;
    while boxes.len() < params.num_boxes {
        attempts += 1;
        if attempts > params.max_attempts {
            return Err(Error::SceneGeneration(format!(
                "placed {} of {} boxes in {} attempts",
                boxes.len(),
                params.num_boxes,
                params.max_attempts
            )));
        }
        let mut pick = rng.gen_range(0.0..total_weight);
        let profile = params
            .classes
            .iter()
            .find(|c| {
                pick -= c.weight;
                pick < 0.0
            })
            .unwrap_or(&params.classes[params.classes.len() - 1]);
        let dims: [f64; 3] = std::array::from_fn(|k| {
            if profile.dims_min[k] == profile.dims_max[k] {
                profile.dims_min[k]
            } else {
                rng.gen_range(profile.dims_min[k]..profile.dims_max[k])
            }
        });
        let r = rng.gen_range(params.min_radius..params.field_radius);
        let a = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
        let yaw = normalize_angle(rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI));
        let speed = if profile.speed_max > 0.0 {
            rng.gen_range(0.0..profile.speed_max)
        } else {
            0.0
        };
        let center = [
            r * a.cos(),
            r * a.sin(),
            -params.sensor_height + 0.5 * dims[1],
        ];
        let cand = Box3D::new(center, dims, yaw)
            .with_class(profile.class_id)
            .with_velocity([speed * yaw.cos(), speed * yaw.sin()]);
        let rad = bev_radius(&cand);
        let dist = center[0].hypot(center[1]);
        if dist - rad < params.min_radius || dist + rad > params.field_radius {
            continue;
        }
        let clear = boxes.iter().all(|b| {
            (b.center[0] - center[0]).hypot(b.center[1] - center[1]) > bev_radius(b) + rad
        });
        if clear {
            boxes.push(cand);
        }
    }
    Ok(boxes)
}

/// Expresses world-frame boxes in an ego frame given the ego-to-world pose.
/// The pose is assumed to rotate about z only.
pub fn boxes_in_ego(boxes: &[Box3D], ego_pose: &RigidTransform) -> Vec<Box3D> {
    let inv = ego_pose.inverse();
    let yaw = inv.yaw();
    boxes
        .iter()
        .map(|b| {
            let v = inv.rotate([b.velocity[0], b.velocity[1], 0.0]);
            Box3D {
                center: inv.apply(b.center),
                yaw: normalize_angle(b.yaw + yaw),
                velocity: [v[0], v[1]],
                ..*b
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RaycastParams {
    /// Ground plane at `z = −sensor_height` in the ego frame when set.
    pub ground: Option<f64>,
    pub max_range: f64,
    pub frame_age: u16,
    pub timestamp: f64,
    pub point_id_offset: u32,
}

impl Default for RaycastParams {
    fn default() -> Self {
        RaycastParams {
            ground: Some(1.8),
            max_range: 80.0,
            frame_age: 0,
            timestamp: 0.0,
            point_id_offset: 0,
        }
    }
}

const BOX_INTENSITY: f32 = 0.6;
const GROUND_INTENSITY: f32 = 0.15;

/// Distance along the unit ray `dir` from `origin` to the first entry into
/// `b`, by the slab method in the box frame.
pub fn ray_box_hit(origin: Vec3, dir: Vec3, b: &Box3D) -> Option<f64> {
    let o = b.to_local(origin);
    let (s, c) = b.yaw.sin_cos();
    let d = [c * dir[0] + s * dir[1], -s * dir[0] + c * dir[1], dir[2]];
    let half = [0.5 * b.length(), 0.5 * b.width(), 0.5 * b.height()];
    let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
    for k in 0..3 {
        if d[k].abs() < 1e-15 {
            if o[k].abs() > half[k] {
                return None;
            }
            continue;
        }
        let a = (-half[k] - o[k]) / d[k];
        let z = (half[k] - o[k]) / d[k];
        t0 = t0.max(a.min(z));
        t1 = t1.min(a.max(z));
    }
    (t0 <= t1 && t0 > 1e-9).then_some(t0)
}

/// Casts one ray per (beam, column) against `scene` (world frame) from an
/// ego at `ego_pose` and returns the hits in the ego frame. Points are
/// numbered in row-major ray order starting at `point_id_offset`.
pub fn raycast(
    scene: &[Box3D],
    spec: &LidarSpec,
    ego_pose: &RigidTransform,
    params: &RaycastParams,
) -> PointCloud {
    let local = boxes_in_ego(scene, ego_pose);
    let n = spec.azimuth_steps();
    let dirs: Vec<(f64, f64, f64)> = (0..n)
        .map(|c| {
            let (s, co) = spec.column_center(c).sin_cos();
            (co, s, 0.0)
        })
        .collect();
    let rows: Vec<usize> = (0..spec.beam_count()).collect();
    let per_row: Vec<Vec<(usize, Vec3, f32)>> = crate::parallel::map(&rows, |&row| {
        let phi = spec.beam_inclinations()[row];
        let (sp, cp) = phi.sin_cos();
        let mut hits = Vec::new();
        for (col, &(ct, st, _)) in dirs.iter().enumerate() {
            let dir = [cp * ct, cp * st, sp];
            let mut best: Option<(f64, f32)> = None;
            for b in &local {
                if let Some(t) = ray_box_hit([0.0; 3], dir, b) {
                    if best.is_none_or(|(bt, _)| t < bt) {
                        best = Some((t, BOX_INTENSITY));
                    }
                }
            }
            if let Some(h) = params.ground {
                if dir[2] < 0.0 {
                    let t = -h / dir[2];
                    if best.is_none_or(|(bt, _)| t < bt) {
                        best = Some((t, GROUND_INTENSITY));
                    }
                }
            }
            if let Some((t, intensity)) = best.filter(|&(t, _)| t <= params.max_range) {
                hits.push((
                    row * n + col,
                    [t * dir[0], t * dir[1], t * dir[2]],
                    intensity,
                ));
            }
        }
        hits
    });
    let points = per_row
        .into_iter()
        .flatten()
        .map(|(ray, position, intensity)| Point {
            position,
            intensity,
            timestamp: params.timestamp,
            frame_age: params.frame_age,
            point_id: params.point_id_offset.wrapping_add(ray as u32),
        })
        .collect();
    PointCloud::new(points, params.timestamp)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SequenceParams {
    pub frames: usize,
    pub dt: f64,
    /// Ego velocity in the world frame.
    pub ego_velocity: [f64; 2],
    pub ego_yaw_rate: f64,
    pub ground: Option<f64>,
    pub max_range: f64,
}

impl Default for SequenceParams {
    fn default() -> Self {
        SequenceParams {
            frames: 10,
            dt: 0.05,
            ego_velocity: [0.0, 0.0],
            ego_yaw_rate: 0.0,
            ground: Some(1.8),
            max_range: 80.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimFrame {
    /// Hits in this frame's ego coordinates.
    #[serde(skip)]
    pub cloud: PointCloud,
    /// Ego-to-world pose.
    pub pose: RigidTransform,
    /// World-frame boxes at this frame's time.
    pub boxes: Vec<Box3D>,
    pub timestamp: f64,
    pub frame_age: u16,
}

/// Simulates `frames` sweeps, oldest first; the last frame is the current
/// one. Boxes move by `velocity · dt` per frame and the ego follows a
/// constant velocity and yaw rate from the world origin.
pub fn simulate_sequence(
    scene: &[Box3D],
    spec: &LidarSpec,
    params: &SequenceParams,
) -> Result<Vec<SimFrame>> {
    if params.frames == 0 {
        return Err(Error::InvalidArgument(
            "a sequence needs at least one frame".into(),
        ));
    }
    if params.frames > u16::MAX as usize + 1 {
        return Err(Error::InvalidArgument("too many frames".into()));
    }
    let rays = spec.pixel_count() as u64;
    if rays * params.frames as u64 > u32::MAX as u64 {
        return Err(Error::InvalidArgument("point ids would overflow".into()));
    }
    let idx: Vec<usize> = (0..params.frames).collect();
    Ok(crate::parallel::map(&idx, |&t| {
        let time = t as f64 * params.dt;
        let boxes: Vec<Box3D> = scene
            .iter()
            .map(|b| Box3D {
                center: [
                    b.center[0] + b.velocity[0] * time,
                    b.center[1] + b.velocity[1] * time,
                    b.center[2],
                ],
                ..*b
            })
            .collect();
        let pose = RigidTransform::from_yaw(
            params.ego_yaw_rate * time,
            [
                params.ego_velocity[0] * time,
                params.ego_velocity[1] * time,
                0.0,
            ],
        );
        let frame_age = (params.frames - 1 - t) as u16;
        let cloud = raycast(
            &boxes,
            spec,
            &pose,
            &RaycastParams {
                ground: params.ground,
                max_range: params.max_range,
                frame_age,
                timestamp: time,
                point_id_offset: (t as u64 * rays) as u32,
            },
        );
        SimFrame {
            cloud,
            pose,
            boxes,
            timestamp: time,
            frame_age,
        }
    }))
}

/// `n_points` random points spread over `frames` sweeps, all inside the
/// beam fan of `spec` at ranges up to `max_range`. Used for benchmarks
/// and collision studies where scene realism does not matter.
pub fn random_cloud(
    seed: u64,
    n_points: usize,
    frames: u16,
    spec: &LidarSpec,
    max_range: f64,
) -> PointCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let frames = frames.max(1);
    let inc = spec.beam_inclinations();
    let (lo, hi) = inc
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| {
            (a.min(v), b.max(v))
        });
    let points = (0..n_points)
        .map(|i| {
            let age: u16 = rng.gen_range(0..frames);
            let r = rng.gen_range(1.0..max_range.max(1.0 + 1e-9));
            let theta = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
            let phi = if lo < hi { rng.gen_range(lo..hi) } else { lo };
            Point {
                position: crate::lidar_geom::spherical_to_cart(r, theta, phi),
                intensity: rng.gen_range(0.0..1.0),
                timestamp: -0.05 * age as f64,
                frame_age: age,
                point_id: i as u32,
            }
        })
        .collect();
    PointCloud::new(points, 0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::boxes::{bev_iou, contains_point};
    use crate::lidar_geom::{fuse_sweeps, pixel_of};
    use crate::mrv::{project_mrv, project_round};
    use approx::assert_abs_diff_eq;

    fn small_spec() -> LidarSpec {
        LidarSpec::evenly_spaced(16, 256, -25.0, 5.0).unwrap()
    }

    #[test]
    fn scene_generation() {
        let p = SceneParams {
            num_boxes: 0,
            ..Default::default()
        };
        assert!(generate_scene(1, &p).unwrap().is_empty());
        let p = SceneParams::default();
        let a = generate_scene(7, &p).unwrap();
        assert_eq!(a, generate_scene(7, &p).unwrap());
        assert_ne!(a, generate_scene(8, &p).unwrap());
        assert_eq!(a.len(), p.num_boxes);
        for i in 0..a.len() {
            assert!(a[i].is_valid());
            for j in i + 1..a.len() {
                assert_eq!(bev_iou(&a[i], &a[j]), 0.0);
            }
        }
        let crowded = SceneParams {
            num_boxes: 500,
            field_radius: 8.0,
            max_attempts: 2000,
            ..Default::default()
        };
        assert!(matches!(
            generate_scene(1, &crowded),
            Err(Error::SceneGeneration(_))
        ));
    }

    #[test]
    fn empty_scene_without_ground_is_empty() {
        let p = RaycastParams {
            ground: None,
            ..Default::default()
        };
        assert!(raycast(&[], &small_spec(), &RigidTransform::identity(), &p).is_empty());
    }

    #[test]
    fn facing_face_at_range_ten() {
        let spec = small_spec();
        let b = Box3D::new([11.0, 0.0, 0.0], [4.0, 3.0, 2.0], 0.0);
        let p = RaycastParams {
            ground: None,
            ..Default::default()
        };
        let cloud = raycast(&[b], &spec, &RigidTransform::identity(), &p);
        assert!(!cloud.is_empty());
        for pt in &cloud.points {
            assert_abs_diff_eq!(pt.position[0], 10.0, epsilon = 1e-9);
            assert!(contains_point(&b, pt.position));
        }
    }

    #[test]
    fn hits_lie_on_surfaces() {
        let spec = small_spec();
        let scene = generate_scene(3, &SceneParams::default()).unwrap();
        let cloud = raycast(
            &scene,
            &spec,
            &RigidTransform::identity(),
            &RaycastParams::default(),
        );
        assert!(cloud.len() > 100);
        for pt in &cloud.points {
            let on_ground = (pt.position[2] + 1.8).abs() < 1e-6;
            let on_box = scene.iter().any(|b| {
                let l = b.to_local(pt.position);
                let half = [0.5 * b.length(), 0.5 * b.width(), 0.5 * b.height()];
                let inside = (0..3).all(|k| l[k].abs() <= half[k] + 1e-6);
                inside && (0..3).any(|k| (l[k].abs() - half[k]).abs() < 1e-6)
            });
            assert!(on_ground || on_box);
        }
    }

    #[test]
    fn single_frame_reprojects_without_collisions() {
        let spec = small_spec();
        let scene = generate_scene(4, &SceneParams::default()).unwrap();
        let cloud = raycast(
            &scene,
            &spec,
            &RigidTransform::identity(),
            &RaycastParams::default(),
        );
        let n = spec.azimuth_steps() as u32;
        for pt in &cloud.points {
            let want = ((pt.point_id / n) as usize, (pt.point_id % n) as usize);
            assert_eq!(pixel_of(pt.position, &spec), Some(want));
        }
        let (img, rejected, out) = project_round(&cloud.points, &spec, 0.0);
        assert!(rejected.is_empty() && out.is_empty());
        assert_eq!(img.occupied(0), cloud.len());
    }

    #[test]
    fn static_sequence_collides_almost_everywhere() {
        let spec = small_spec();
        let mut scene = generate_scene(5, &SceneParams::default()).unwrap();
        scene.iter_mut().for_each(|b| b.velocity = [0.0; 2]);
        let frames = simulate_sequence(&scene, &spec, &SequenceParams::default()).unwrap();
        assert_eq!(frames.len(), 10);
        assert_eq!(frames[9].frame_age, 0);
        let sweeps: Vec<_> = frames.iter().map(|f| (f.cloud.clone(), f.pose)).collect();
        let fused = fuse_sweeps(&sweeps).unwrap();
        let (_, stats) = project_mrv(&fused, &spec, 1).unwrap();
        let kept = stats.kept() as f64 / stats.total_points as f64;
        assert_abs_diff_eq!(kept, 0.1, epsilon = 1e-12);

        let moving = SequenceParams {
            ego_velocity: [8.0, 1.0],
            ..Default::default()
        };
        let frames = simulate_sequence(&scene, &spec, &moving).unwrap();
        let sweeps: Vec<_> = frames.iter().map(|f| (f.cloud.clone(), f.pose)).collect();
        let (_, s2) = project_mrv(&fuse_sweeps(&sweeps).unwrap(), &spec, 1).unwrap();
        assert!(s2.kept() as f64 / s2.total_points as f64 > kept);
    }

    #[test]
    fn single_frame_sequence() {
        let spec = small_spec();
        let scene = generate_scene(6, &SceneParams::default()).unwrap();
        let p = SequenceParams {
            frames: 1,
            ..Default::default()
        };
        let f = simulate_sequence(&scene, &spec, &p).unwrap();
        assert_eq!(f.len(), 1);
        assert_eq!(f[0].boxes, scene);
        assert!(simulate_sequence(&scene, &spec, &SequenceParams { frames: 0, ..p }).is_err());
    }

    #[test]
    fn boxes_move_with_velocity() {
        let spec = small_spec();
        let b = Box3D::new([10.0, 0.0, -1.0], [1.0, 1.0, 1.0], 0.0).with_velocity([2.0, -1.0]);
        let p = SequenceParams {
            frames: 3,
            dt: 0.5,
            ..Default::default()
        };
        let f = simulate_sequence(&[b], &spec, &p).unwrap();
        assert_abs_diff_eq!(f[2].boxes[0].center[0], 12.0, epsilon = 1e-12);
        assert_abs_diff_eq!(f[2].boxes[0].center[1], -1.0, epsilon = 1e-12);
    }
}
