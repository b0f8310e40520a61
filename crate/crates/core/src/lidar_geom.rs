//! Sensor geometry, spherical coordinates, angle binning, rigid transforms
//! and global point-cloud augmentation.

use std::f64::consts::{PI, TAU};

use serde::{Deserialize, Serialize};

use crate::boxes::Box3D;
use crate::error::{Error, Result};

pub type Vec3 = [f64; 3];

/// Wraps an angle into (−π, π].
pub fn normalize_angle(a: f64) -> f64 {
    let mut w = a.rem_euclid(TAU);
    if w > PI {
        w -= TAU;
    }
    if w <= -PI {
        w += TAU;
    }
    w
}

// atan(t) / t as a polynomial in t² on [0, tan(π/8)]
const ATAN_POLY: [f32; 5] = [
    0.999_999_94,
    -0.333_323_06,
    0.199_638_6,
    -0.137_683_56,
    0.077_676_1,
];

/// Single-precision atan2 with absolute error below 5e-7 rad for normal
/// inputs. Branch-free so that loops over it vectorize.
#[inline(always)]
pub(crate) fn atan2_f32(y: f32, x: f32) -> f32 {
    use std::f32::consts::{FRAC_PI_2, FRAC_PI_4, PI};
    let (ax, ay) = (x.abs(), y.abs());
    let swap = ay > ax;
    let n = if swap { ax } else { ay };
    let d = if swap { ay } else { ax };
    let big = n > d * 0.414_213_57;
    let u = if big { n - d } else { n } / if big { n + d } else { d };
    let s = u * u;
    let p = (((ATAN_POLY[4] * s + ATAN_POLY[3]) * s + ATAN_POLY[2]) * s + ATAN_POLY[1]) * s
        + ATAN_POLY[0];
    let a = u * p + if big { FRAC_PI_4 } else { 0.0 };
    let a = if swap { FRAC_PI_2 - a } else { a };
    let a = if x < 0.0 { PI - a } else { a };
    f32::from_bits(a.to_bits() | (y.to_bits() & 0x8000_0000))
}

/// Cartesian to (range, azimuth, inclination). The origin maps to (0, 0, 0).
pub fn cart_to_spherical(p: Vec3) -> (f64, f64, f64) {
    let [x, y, z] = p;
    let planar = (x * x + y * y).sqrt();
    let r = (planar * planar + z * z).sqrt();
    let theta = y.atan2(x);
    // atan2 yields −π for (−0.0 y, negative x); fold it onto +π
    let theta = if theta == -PI { PI } else { theta };
    (r, theta, z.atan2(planar))
}

pub fn spherical_to_cart(r: f64, theta: f64, phi: f64) -> Vec3 {
    let planar = r * phi.cos();
    [planar * theta.cos(), planar * theta.sin(), r * phi.sin()]
}

/// Beam layout of a spinning LiDAR.
///
/// Rows of a range image follow the order of `beam_inclinations_deg`; the
/// built-in presets list the top beam (largest inclination) first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "LidarSpecFile", into = "LidarSpecFile")]
pub struct LidarSpec {
    azimuth_steps: usize,
    beam_inclinations_deg: Vec<f64>,
    slack_deg: Option<f64>,
    // derived
    beams_rad: Vec<f64>,
    ascending_rad: Vec<f64>,
    descending: bool,
}

#[derive(Serialize, Deserialize)]
struct LidarSpecFile {
    m: usize,
    n: usize,
    beam_inclinations_deg: Vec<f64>,
    #[serde(default)]
    slack_deg: Option<f64>,
}

impl TryFrom<LidarSpecFile> for LidarSpec {
    type Error = Error;

    fn try_from(f: LidarSpecFile) -> Result<Self> {
        if f.m != f.beam_inclinations_deg.len() {
            return Err(Error::InvalidSpec(format!(
                "m = {} but {} beam inclinations given",
                f.m,
                f.beam_inclinations_deg.len()
            )));
        }
        LidarSpec::new(f.beam_inclinations_deg, f.n, f.slack_deg)
    }
}

impl From<LidarSpec> for LidarSpecFile {
    fn from(s: LidarSpec) -> Self {
        LidarSpecFile {
            m: s.beam_count(),
            n: s.azimuth_steps,
            beam_inclinations_deg: s.beam_inclinations_deg,
            slack_deg: s.slack_deg,
        }
    }
}

impl LidarSpec {
    /// `slack_deg = None` uses half the local inter-beam spacing.
    pub fn new(
        beam_inclinations_deg: Vec<f64>,
        azimuth_steps: usize,
        slack_deg: Option<f64>,
    ) -> Result<Self> {
        if beam_inclinations_deg.is_empty() {
            return Err(Error::InvalidSpec("at least one beam required".into()));
        }
        if azimuth_steps == 0 {
            return Err(Error::InvalidSpec("azimuth_steps must be positive".into()));
        }
        if beam_inclinations_deg
            .iter()
            .any(|a| !a.is_finite() || a.abs() >= 90.0)
        {
            return Err(Error::InvalidSpec(
                "beam inclinations must lie in (-90, 90) degrees".into(),
            ));
        }
        if let Some(s) = slack_deg {
            if !(s.is_finite() && s > 0.0) {
                return Err(Error::InvalidSpec("slack_deg must be positive".into()));
            }
        }
        let increasing = beam_inclinations_deg.windows(2).all(|w| w[0] < w[1]);
        let decreasing = beam_inclinations_deg.windows(2).all(|w| w[0] > w[1]);
        if !(increasing || decreasing) {
            return Err(Error::InvalidSpec(
                "beam inclinations must be strictly monotonic".into(),
            ));
        }
        let beams_rad: Vec<f64> = beam_inclinations_deg
            .iter()
            .map(|d| d.to_radians())
            .collect();
        let descending = beams_rad.len() > 1 && decreasing;
        let mut ascending_rad = beams_rad.clone();
        if descending {
            ascending_rad.reverse();
        }
        Ok(LidarSpec {
            azimuth_steps,
            beam_inclinations_deg,
            slack_deg,
            beams_rad,
            ascending_rad,
            descending,
        })
    }

    /// `m` beams evenly spaced from `top_deg` down to `bottom_deg`, inclusive.
    pub fn evenly_spaced(m: usize, n: usize, bottom_deg: f64, top_deg: f64) -> Result<Self> {
        if m == 0 {
            return Err(Error::InvalidSpec("at least one beam required".into()));
        }
        let beams = if m == 1 {
            vec![top_deg]
        } else {
            let step = (top_deg - bottom_deg) / (m - 1) as f64;
            (0..m).map(|k| top_deg - step * k as f64).collect()
        };
        LidarSpec::new(beams, n, None)
    }

    /// 32 beams from −30.67° to 10.67°, 1086 azimuth steps.
    pub fn nuscenes() -> Self {
        Self::evenly_spaced(32, 1086, -30.67, 10.67).expect("valid preset")
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "nuscenes" => Some(Self::nuscenes()),
            _ => None,
        }
    }

    pub fn beam_count(&self) -> usize {
        self.beams_rad.len()
    }

    pub fn azimuth_steps(&self) -> usize {
        self.azimuth_steps
    }

    pub fn beam_inclinations(&self) -> &[f64] {
        &self.beams_rad
    }

    pub fn beam_inclinations_deg(&self) -> &[f64] {
        &self.beam_inclinations_deg
    }

    pub fn slack_deg(&self) -> Option<f64> {
        self.slack_deg
    }

    pub fn azimuth_bin_width(&self) -> f64 {
        TAU / self.azimuth_steps as f64
    }

    /// Azimuth of the center of column `col`.
    pub fn column_center(&self, col: usize) -> f64 {
        -PI + (col as f64 + 0.5) * self.azimuth_bin_width()
    }

    pub fn pixel_count(&self) -> usize {
        self.beam_count() * self.azimuth_steps
    }
}

/// Column index of azimuth `theta`; total over (−π, π], clamped at the edges.
pub fn azimuth_bin(theta: f64, spec: &LidarSpec) -> usize {
    let n = spec.azimuth_steps;
    let c = ((theta + PI) / TAU * n as f64).floor();
    if c.is_nan() || c < 0.0 {
        0
    } else if c >= n as f64 {
        n - 1
    } else {
        c as usize
    }
}

/// Row of the beam nearest to `phi`, or `None` when `phi` lies outside the
/// fan by more than the allowed slack.
pub fn inclination_bin(phi: f64, spec: &LidarSpec) -> Option<usize> {
    let asc = &spec.ascending_rad;
    let m = asc.len();
    let hi = asc.partition_point(|&b| b < phi);
    let idx = if hi == 0 {
        0
    } else if hi == m {
        m - 1
    } else if phi - asc[hi - 1] <= asc[hi] - phi {
        hi - 1
    } else {
        hi
    };
    let dev = phi - asc[idx];
    let slack = match spec.slack_deg {
        Some(s) => s.to_radians(),
        None => {
            if m == 1 {
                f64::INFINITY
            } else if dev >= 0.0 {
                let j = if idx + 1 < m { idx + 1 } else { idx - 1 };
                0.5 * (asc[j] - asc[idx]).abs()
            } else {
                let j = if idx > 0 { idx - 1 } else { idx + 1 };
                0.5 * (asc[j] - asc[idx]).abs()
            }
        }
    };
    if dev.abs() > slack || dev.is_nan() {
        return None;
    }
    Some(if spec.descending { m - 1 - idx } else { idx })
}

/// Range-image pixel `(row, col)` of a Cartesian point.
pub fn pixel_of(p: Vec3, spec: &LidarSpec) -> Option<(usize, usize)> {
    let (_, theta, phi) = cart_to_spherical(p);
    inclination_bin(phi, spec).map(|row| (row, azimuth_bin(theta, spec)))
}

/// Boundary margin inside which [`FastBinner`] defers to the exact path;
/// well above the error of [`atan2_f32`].
const BIN_MARGIN: f64 = 2e-6;
const OUT: u32 = u32::MAX;
const BATCH: usize = 256;

/// Spherical attributes and pixel of a point as seen by [`FastBinner`].
#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct Binned {
    /// Row-major pixel index, `None` outside the fan.
    pub pixel: Option<u32>,
    /// Exact range, used for collision priority.
    pub range: f64,
    pub theta: f32,
    pub phi: f32,
}

/// Pixel lookup that agrees exactly with [`pixel_of`]. Angles come from
/// [`atan2_f32`]; points within [`BIN_MARGIN`] of a bin boundary, and
/// inputs outside the comfortable single-precision range, take the exact
/// path instead.
#[derive(Debug, Clone)]
pub(crate) struct FastBinner {
    // inclination boundaries padded with ∓∞; the open interval between
    // edges[k] and edges[k + 1] belongs to row labels[k]
    edges: Vec<f64>,
    labels: Vec<u32>,
    // uniform grid over φ giving, per cell, the interval holding its start
    lut: Vec<u32>,
    lut_lo: f64,
    lut_scale: f64,
    lut_last: f64,
    cols_per_rad: f64,
    n: usize,
    spec: LidarSpec,
}

impl FastBinner {
    pub fn new(spec: &LidarSpec) -> Self {
        let asc = &spec.ascending_rad;
        let m = asc.len();
        let mut cand: Vec<f64> = asc.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect();
        if m > 1 {
            cand.push(asc[0] - 0.5 * (asc[1] - asc[0]));
            cand.push(asc[m - 1] + 0.5 * (asc[m - 1] - asc[m - 2]));
        }
        if let Some(s) = spec.slack_deg {
            let s = s.to_radians();
            cand.extend(asc.iter().flat_map(|&b| [b - s, b + s]));
        }
        cand.retain(|c| c.is_finite());
        cand.sort_by(f64::total_cmp);
        cand.dedup();
        let label = |phi: f64| inclination_bin(phi, spec).map_or(OUT, |r| r as u32);
        let mut edges = vec![f64::NEG_INFINITY];
        let mut labels = vec![label(cand.first().map_or(0.0, |c| c - 1.0))];
        for (k, &c) in cand.iter().enumerate() {
            let above = match cand.get(k + 1) {
                Some(&next) => label(0.5 * (c + next)),
                None => label(c + 1.0),
            };
            if above != *labels.last().unwrap() {
                edges.push(c);
                labels.push(above);
            }
        }
        edges.push(f64::INFINITY);

        let inner = &edges[1..edges.len() - 1];
        let (lo, hi) = match (inner.first(), inner.last()) {
            (Some(&a), Some(&b)) if b > a => (a, b),
            (Some(&a), _) => (a, a + 1.0),
            _ => (0.0, 1.0),
        };
        let min_gap = inner
            .windows(2)
            .map(|w| w[1] - w[0])
            .fold(hi - lo, f64::min);
        // cells narrower than the closest pair of edges hold at most one edge
        let cells = (((hi - lo) / min_gap).ceil() as usize * 2).clamp(16, 1 << 16);
        let lut_scale = cells as f64 / (hi - lo);
        let lut = (0..cells)
            .map(|c| (edges.partition_point(|&e| e <= lo + c as f64 / lut_scale) - 1) as u32)
            .collect();
        let n = spec.azimuth_steps();
        FastBinner {
            edges,
            labels,
            lut,
            lut_lo: lo,
            lut_scale,
            lut_last: (cells - 1) as f64,
            cols_per_rad: n as f64 / TAU,
            n,
            spec: spec.clone(),
        }
    }

    fn exact(&self, p: Vec3) -> Binned {
        let (range, theta, phi) = cart_to_spherical(p);
        let pixel = inclination_bin(phi, &self.spec)
            .map(|row| (row * self.n + azimuth_bin(theta, &self.spec)) as u32);
        Binned {
            pixel,
            range,
            theta: theta as f32,
            phi: phi as f32,
        }
    }

    /// Bins every point, in input order.
    pub fn bin_points(&self, points: &[Point]) -> Vec<Binned> {
        let mut out = Vec::new();
        self.bin_points_into(points, &mut out);
        out
    }

    /// Like [`bin_points`](Self::bin_points) but reuses `out`'s allocation.
    pub fn bin_points_into(&self, points: &[Point], out: &mut Vec<Binned>) {
        out.resize(points.len(), Binned::default());
        crate::parallel::for_each_chunk_mut(out, BATCH, |k, chunk| {
            self.bin_batch(&points[k * BATCH..k * BATCH + chunk.len()], chunk);
        });
    }

    fn bin_batch(&self, points: &[Point], out: &mut [Binned]) {
        let len = points.len();
        let mut xyz = [[0f32; BATCH]; 3];
        for (i, p) in points.iter().enumerate() {
            for (axis, &v) in xyz.iter_mut().zip(&p.position) {
                axis[i] = v as f32;
            }
        }
        let (mut theta, mut phi) = ([0f32; BATCH], [0f32; BATCH]);
        for i in 0..len {
            let (x, y, z) = (xyz[0][i], xyz[1][i], xyz[2][i]);
            theta[i] = atan2_f32(y, x);
            phi[i] = atan2_f32(z, (x * x + y * y).sqrt());
        }
        for (i, p) in points.iter().enumerate() {
            out[i] = self.classify(p.position, theta[i], phi[i]);
        }
    }

    #[inline]
    fn classify(&self, p: Vec3, theta32: f32, phi32: f32) -> Binned {
        let [x, y, z] = p;
        let planar = (x * x + y * y).sqrt();
        let range = (planar * planar + z * z).sqrt();
        let (theta, phi) = (theta32 as f64, phi32 as f64);

        // NaN maps to cell 0 and is caught by the validity test below
        let cell = ((phi - self.lut_lo) * self.lut_scale)
            .max(0.0)
            .min(self.lut_last) as usize;
        let mut k = self.lut[cell] as usize;
        k += (self.edges[k + 1] < phi) as usize;
        while self.edges[k + 1] < phi {
            k += 1;
        }
        let row = self.labels[k];
        let near_phi =
            ((phi - self.edges[k]) < BIN_MARGIN) | ((self.edges[k + 1] - phi) < BIN_MARGIN);

        let u = (theta + PI) * self.cols_per_rad;
        // truncation equals floor for u >= 0 and avoids a libm call on
        // targets without SSE4.1
        let col = u as u32;
        let frac = u - col as f64;
        let margin = BIN_MARGIN * self.cols_per_rad;
        let near_theta =
            (frac < margin) | (frac > 1.0 - margin) | (u < 0.0) | (col as usize >= self.n);

        // keep squares of the coordinates normal and finite in f32
        let valid = (planar > 1e-15) & (range < 1e18);
        if !valid | near_phi | ((row != OUT) & near_theta) {
            return self.exact(p);
        }
        Binned {
            pixel: (row != OUT).then(|| row * self.n as u32 + col),
            range,
            theta: theta32,
            phi: phi32,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub position: Vec3,
    pub intensity: f32,
    pub timestamp: f64,
    /// 0 for the current sweep, k for the sweep k frames back.
    pub frame_age: u16,
    pub point_id: u32,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PointCloud {
    pub points: Vec<Point>,
    pub reference_timestamp: f64,
}

impl PointCloud {
    pub fn new(points: Vec<Point>, reference_timestamp: f64) -> Self {
        PointCloud {
            points,
            reference_timestamp,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Checks that point ids are unique.
    pub fn validate_ids(&self) -> Result<()> {
        let mut ids: Vec<u32> = self.points.iter().map(|p| p.point_id).collect();
        ids.sort_unstable();
        if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::InvalidArgument(format!(
                "duplicate point_id {}",
                w[0]
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform {
    pub rotation: [[f64; 3]; 3],
    pub translation: Vec3,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        RigidTransform {
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.0; 3],
        }
    }

    /// Validates orthonormality and a unit determinant (tolerance 1e-9).
    pub fn new(rotation: [[f64; 3]; 3], translation: Vec3) -> Result<Self> {
        let t = RigidTransform {
            rotation,
            translation,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        let r = &self.rotation;
        let det = r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1])
            - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
            + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0]);
        if (det - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "rotation determinant {det} != 1"
            )));
        }
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| r[i][k] * r[j][k]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                if (dot - want).abs() > 1e-9 {
                    return Err(Error::InvalidArgument("rotation is not orthonormal".into()));
                }
            }
        }
        if translation_is_finite(&self.translation) {
            Ok(())
        } else {
            Err(Error::InvalidArgument("translation must be finite".into()))
        }
    }

    /// Rotation by `yaw` about +z followed by `translation`.
    pub fn from_yaw(yaw: f64, translation: Vec3) -> Self {
        let (s, c) = yaw.sin_cos();
        RigidTransform {
            rotation: [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]],
            translation,
        }
    }

    pub fn apply(&self, p: Vec3) -> Vec3 {
        let mut out = self.rotate(p);
        for (o, t) in out.iter_mut().zip(self.translation) {
            *o += t;
        }
        out
    }

    pub fn rotate(&self, v: Vec3) -> Vec3 {
        let r = &self.rotation;
        [
            r[0][0] * v[0] + r[0][1] * v[1] + r[0][2] * v[2],
            r[1][0] * v[0] + r[1][1] * v[1] + r[1][2] * v[2],
            r[2][0] * v[0] + r[2][1] * v[1] + r[2][2] * v[2],
        ]
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        let mut rotation = [[0.0; 3]; 3];
        for (i, row) in rotation.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (0..3)
                    .map(|k| self.rotation[i][k] * other.rotation[k][j])
                    .sum();
            }
        }
        RigidTransform {
            rotation,
            translation: self.apply(other.translation),
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let mut rotation = [[0.0; 3]; 3];
        for (i, row) in rotation.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = self.rotation[j][i];
            }
        }
        let inv = RigidTransform {
            rotation,
            translation: [0.0; 3],
        };
        let t = inv.rotate(self.translation);
        RigidTransform {
            rotation,
            translation: [-t[0], -t[1], -t[2]],
        }
    }

    /// Heading change of the x axis, assuming rotation about z.
    pub fn yaw(&self) -> f64 {
        self.rotation[1][0].atan2(self.rotation[0][0])
    }
}

fn translation_is_finite(t: &Vec3) -> bool {
    t.iter().all(|v| v.is_finite())
}

/// Maps every point position through `t`; all other attributes are kept.
pub fn apply_transform(cloud: &PointCloud, t: &RigidTransform) -> PointCloud {
    let points = cloud
        .points
        .iter()
        .map(|p| Point {
            position: t.apply(p.position),
            ..*p
        })
        .collect();
    PointCloud {
        points,
        reference_timestamp: cloud.reference_timestamp,
    }
}

/// Merges sweeps into the ego frame of the last (current) sweep.
///
/// `sweeps[i]` pairs a cloud in its own ego frame with that frame's
/// ego-to-world pose. Sweeps are listed oldest first. Frame ages are
/// re-tagged from the list position and point ids renumbered sequentially.
pub fn fuse_sweeps(sweeps: &[(PointCloud, RigidTransform)]) -> Result<PointCloud> {
    let Some((current, current_pose)) = sweeps.last() else {
        return Ok(PointCloud::default());
    };
    if sweeps.len() > u16::MAX as usize + 1 {
        return Err(Error::InvalidArgument("too many sweeps".into()));
    }
    let world_to_current = current_pose.inverse();
    let last = sweeps.len() - 1;
    let mut points = Vec::with_capacity(sweeps.iter().map(|(c, _)| c.len()).sum());
    for (i, (cloud, pose)) in sweeps.iter().enumerate() {
        let to_current = world_to_current.compose(pose);
        let age = (last - i) as u16;
        for p in &cloud.points {
            points.push(Point {
                position: to_current.apply(p.position),
                frame_age: age,
                ..*p
            });
        }
    }
    if points.len() > u32::MAX as usize {
        return Err(Error::InvalidArgument("too many points".into()));
    }
    for (id, p) in points.iter_mut().enumerate() {
        p.point_id = id as u32;
    }
    Ok(PointCloud {
        points,
        reference_timestamp: current.reference_timestamp,
    })
}

/// Global augmentation, applied in the order flips, rotation, scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentParams {
    /// Mirror across the y-z plane (negates x).
    pub flip_x: bool,
    /// Mirror across the x-z plane (negates y).
    pub flip_y: bool,
    pub rotation: f64,
    pub scale: f64,
}

impl Default for AugmentParams {
    fn default() -> Self {
        AugmentParams {
            flip_x: false,
            flip_y: false,
            rotation: 0.0,
            scale: 1.0,
        }
    }
}

impl AugmentParams {
    fn map_vec2(&self, v: [f64; 2]) -> [f64; 2] {
        let mut x = if self.flip_x { -v[0] } else { v[0] };
        let mut y = if self.flip_y { -v[1] } else { v[1] };
        if self.rotation != 0.0 {
            let (s, c) = self.rotation.sin_cos();
            (x, y) = (c * x - s * y, s * x + c * y);
        }
        [x * self.scale, y * self.scale]
    }

    fn map_point(&self, p: Vec3) -> Vec3 {
        let [x, y] = self.map_vec2([p[0], p[1]]);
        [x, y, p[2] * self.scale]
    }

    fn map_yaw(&self, yaw: f64) -> f64 {
        let mut a = yaw;
        if self.flip_x {
            a = PI - a;
        }
        if self.flip_y {
            a = -a;
        }
        normalize_angle(a + self.rotation)
    }
}

/// Applies one global flip/rotate/scale transform to points and boxes.
pub fn augment(
    cloud: &PointCloud,
    boxes: &[Box3D],
    params: &AugmentParams,
) -> Result<(PointCloud, Vec<Box3D>)> {
    if !(params.scale > 0.0 && params.scale.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "scale must be positive, got {}",
            params.scale
        )));
    }
    let points = cloud
        .points
        .iter()
        .map(|p| Point {
            position: params.map_point(p.position),
            ..*p
        })
        .collect();
    let boxes = boxes
        .iter()
        .map(|b| Box3D {
            center: params.map_point(b.center),
            dims: b.dims.map(|d| d * params.scale),
            yaw: params.map_yaw(b.yaw),
            velocity: params.map_vec2(b.velocity),
            ..*b
        })
        .collect();
    Ok((
        PointCloud {
            points,
            reference_timestamp: cloud.reference_timestamp,
        },
        boxes,
    ))
}
