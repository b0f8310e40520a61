//! Range-image construction and multi-round range view (MRV) projection.
//!
//! Every round projects the points rejected by the previous round with the
//! same collision rule. A pixel collision is resolved by [`priority_order`]:
//! current-frame points beat past-frame points, then the nearer point wins,
//! then the smaller point id.
//!
//! [`project_mrv`] does not literally loop over rounds. It buckets points by
//! pixel with a counting sort and orders each bucket once; the k-th point of
//! a bucket is exactly the point that round k would keep, because the
//! comparator is a total order re-applied unchanged to the leftovers.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lidar_geom::{cart_to_spherical, Binned, FastBinner, LidarSpec, Point, PointCloud};
use crate::net::FeatureMap;
use crate::parallel;

pub const CHANNELS_PER_ROUND: usize = 9;

/// Per-round channel layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Channel {
    X = 0,
    Y = 1,
    Z = 2,
    Range = 3,
    Azimuth = 4,
    Inclination = 5,
    Intensity = 6,
    Existence = 7,
    RelTime = 8,
}

pub const CHANNEL_NAMES: [&str; CHANNELS_PER_ROUND] = [
    "x",
    "y",
    "z",
    "r",
    "theta",
    "phi",
    "intensity",
    "existence",
    "rel_time",
];

impl Channel {
    pub const ALL: [Channel; CHANNELS_PER_ROUND] = [
        Channel::X,
        Channel::Y,
        Channel::Z,
        Channel::Range,
        Channel::Azimuth,
        Channel::Inclination,
        Channel::Intensity,
        Channel::Existence,
        Channel::RelTime,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        CHANNEL_NAMES[self.index()]
    }
}

/// Collision rule between points landing on the same pixel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorityRule {
    /// Current-frame points first, then nearest range, then smallest id.
    #[default]
    CurrentFrameFirst,
    /// Nearest range, then smallest id; frame age is ignored.
    NearestOnly,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate {
    pub frame_age: u16,
    pub range: f64,
    pub point_id: u32,
}

impl Candidate {
    pub fn of(p: &Point) -> Self {
        Candidate {
            frame_age: p.frame_age,
            range: cart_to_spherical(p.position).0,
            point_id: p.point_id,
        }
    }
}

/// `Less` means `a` wins the pixel.
pub fn priority_order(a: &Candidate, b: &Candidate) -> Ordering {
    priority_order_with(PriorityRule::CurrentFrameFirst, a, b)
}

pub fn priority_order_with(rule: PriorityRule, a: &Candidate, b: &Candidate) -> Ordering {
    let stale = |c: &Candidate| rule == PriorityRule::CurrentFrameFirst && c.frame_age != 0;
    stale(a)
        .cmp(&stale(b))
        .then_with(|| a.range.total_cmp(&b.range))
        .then_with(|| a.point_id.cmp(&b.point_id))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub point_id: u32,
    pub frame_age: u16,
}

/// Dense `rounds × 9` channel stack over an `height × width` grid.
///
/// Channel data is stored in (round, channel, row, col) order. Provenance is
/// kept as two parallel (round, row, col) arrays with −1 marking an empty
/// pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct RangeImage {
    pub spec: LidarSpec,
    /// Vertical replication factor applied by [`upscale_vertical`].
    pub row_repeat: usize,
    pub height: usize,
    pub width: usize,
    pub rounds: usize,
    pub data: Vec<f32>,
    pub point_ids: Vec<i32>,
    pub frame_ages: Vec<i32>,
}

impl RangeImage {
    pub fn empty(spec: &LidarSpec, rounds: usize) -> Self {
        let (height, width) = (spec.beam_count(), spec.azimuth_steps());
        let plane = height * width;
        RangeImage {
            spec: spec.clone(),
            row_repeat: 1,
            height,
            width,
            rounds,
            data: vec![0.0; rounds * CHANNELS_PER_ROUND * plane],
            point_ids: vec![-1; rounds * plane],
            frame_ages: vec![-1; rounds * plane],
        }
    }

    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    pub fn channel_count(&self) -> usize {
        self.rounds * CHANNELS_PER_ROUND
    }

    pub fn plane(&self, round: usize, ch: Channel) -> &[f32] {
        let pl = self.plane_len();
        let start = (round * CHANNELS_PER_ROUND + ch.index()) * pl;
        &self.data[start..start + pl]
    }

    pub fn get(&self, round: usize, ch: Channel, row: usize, col: usize) -> f32 {
        self.plane(round, ch)[row * self.width + col]
    }

    pub fn provenance(&self, round: usize, row: usize, col: usize) -> Option<Provenance> {
        let i = round * self.plane_len() + row * self.width + col;
        let id = self.point_ids[i];
        (id >= 0).then(|| Provenance {
            point_id: id as u32,
            frame_age: self.frame_ages[i] as u16,
        })
    }

    pub fn exists(&self, round: usize, row: usize, col: usize) -> bool {
        self.get(round, Channel::Existence, row, col) != 0.0
    }

    /// Stored Cartesian point of a round-0 pixel.
    pub fn first_round_point(&self, row: usize, col: usize) -> Option<[f64; 3]> {
        self.exists(0, row, col).then(|| {
            [
                self.get(0, Channel::X, row, col) as f64,
                self.get(0, Channel::Y, row, col) as f64,
                self.get(0, Channel::Z, row, col) as f64,
            ]
        })
    }

    pub fn occupied(&self, round: usize) -> usize {
        self.plane(round, Channel::Existence)
            .iter()
            .filter(|&&e| e != 0.0)
            .count()
    }

    /// Checks the structural invariants: binary existence, zero-filled
    /// empty pixels, provenance agreement, spherical consistency within
    /// `tol` and non-negative relative time.
    pub fn check_invariants(&self, tol: f64) -> Result<()> {
        let pl = self.plane_len();
        if self.data.len() != self.channel_count() * pl
            || self.point_ids.len() != self.rounds * pl
            || self.frame_ages.len() != self.rounds * pl
        {
            return Err(Error::Shape(
                "range image buffers do not match dimensions".into(),
            ));
        }
        for round in 0..self.rounds {
            for row in 0..self.height {
                for col in 0..self.width {
                    let e = self.get(round, Channel::Existence, row, col);
                    let prov = self.provenance(round, row, col);
                    let at = format!("round {round} pixel ({row}, {col})");
                    if e == 0.0 {
                        if prov.is_some()
                            || Channel::ALL
                                .iter()
                                .any(|&c| self.get(round, c, row, col) != 0.0)
                        {
                            return Err(Error::Shape(format!("{at}: empty pixel carries data")));
                        }
                        continue;
                    }
                    if e != 1.0 {
                        return Err(Error::Shape(format!("{at}: existence {e} is not binary")));
                    }
                    let Some(prov) = prov else {
                        return Err(Error::Shape(format!(
                            "{at}: filled pixel without provenance"
                        )));
                    };
                    let g = |c| self.get(round, c, row, col) as f64;
                    let (r, t, p) =
                        cart_to_spherical([g(Channel::X), g(Channel::Y), g(Channel::Z)]);
                    if (r - g(Channel::Range)).abs() > tol
                        || (t - g(Channel::Azimuth)).abs() > tol
                        || (p - g(Channel::Inclination)).abs() > tol
                    {
                        return Err(Error::Shape(format!(
                            "{at}: spherical channels disagree with xyz"
                        )));
                    }
                    let rel = g(Channel::RelTime);
                    if rel < 0.0 || (prov.frame_age == 0 && rel != 0.0) {
                        return Err(Error::Shape(format!("{at}: bad relative time {rel}")));
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ProjectionStats {
    pub total_points: usize,
    pub kept_per_round: Vec<usize>,
    pub dropped_out_of_fan: usize,
    pub residual_rejected: usize,
}

impl ProjectionStats {
    pub fn kept(&self) -> usize {
        self.kept_per_round.iter().sum()
    }

    /// Fraction of all points kept after each round, cumulatively.
    pub fn cumulative_kept_fraction(&self) -> Vec<f64> {
        let total = self.total_points.max(1) as f64;
        self.kept_per_round
            .iter()
            .scan(0usize, |acc, &k| {
                *acc += k;
                Some(*acc as f64 / total)
            })
            .collect()
    }

    pub fn is_consistent(&self) -> bool {
        self.total_points == self.kept() + self.dropped_out_of_fan + self.residual_rejected
    }
}

/// One point ready to be written: priority key, destination pixel and the
/// channel values that are not derived at write time.
#[derive(Clone, Copy, Default)]
struct Slot {
    // stale flag in the top bit, range bits below; ranges are non-negative
    // so the bit pattern sorts like the value
    key: u64,
    id: u32,
    pixel: u32,
    age: u16,
    // x, y, z, azimuth, inclination, intensity, rel_time
    vals: [f32; 7],
}

impl Slot {
    #[inline]
    fn rank(&self) -> u128 {
        ((self.key as u128) << 32) | self.id as u128
    }

    /// All nine channel values in channel order.
    #[inline]
    fn channels(&self) -> [f32; CHANNELS_PER_ROUND] {
        let v = &self.vals;
        // range from the stored single-precision coordinates keeps the r
        // channel consistent with x, y, z to half an ulp
        let r = (v[..3].iter().map(|&c| (c as f64) * (c as f64)).sum::<f64>()).sqrt() as f32;
        [v[0], v[1], v[2], r, v[3], v[4], v[5], 1.0, v[6]]
    }
}

const STALE_BIT: u64 = 1 << 63;

#[inline]
fn make_slot(p: &Point, b: &Binned, rule: PriorityRule, ref_time: f64) -> Slot {
    let rel = if p.frame_age == 0 {
        0.0
    } else {
        (ref_time - p.timestamp).max(0.0) as f32
    };
    let stale = rule == PriorityRule::CurrentFrameFirst && p.frame_age != 0;
    Slot {
        key: b.range.to_bits() | if stale { STALE_BIT } else { 0 },
        id: p.point_id,
        pixel: b.pixel.unwrap_or(u32::MAX),
        age: p.frame_age,
        vals: [
            p.position[0] as f32,
            p.position[1] as f32,
            p.position[2] as f32,
            b.theta,
            b.phi,
            p.intensity,
            rel,
        ],
    }
}

/// Writes one slot into the nine planes of a round.
#[inline]
fn write_slot(planes: &mut [f32], plane_len: usize, pixel: usize, s: &Slot) {
    for (c, v) in s.channels().into_iter().enumerate() {
        planes[c * plane_len + pixel] = v;
    }
}

/// Projects one round: per pixel the highest-priority point is stored.
/// Returns the image plus the rejected (collision losers) and out-of-fan
/// points, both in input order.
pub fn project_round(
    points: &[Point],
    spec: &LidarSpec,
    ref_time: f64,
) -> (RangeImage, Vec<Point>, Vec<Point>) {
    project_round_with(points, spec, ref_time, PriorityRule::CurrentFrameFirst)
}

pub fn project_round_with(
    points: &[Point],
    spec: &LidarSpec,
    ref_time: f64,
    rule: PriorityRule,
) -> (RangeImage, Vec<Point>, Vec<Point>) {
    let mut img = RangeImage::empty(spec, 1);
    let plane_len = img.plane_len();
    let binned = FastBinner::new(spec).bin_points(points);
    let slots: Vec<(Option<u32>, Slot)> = parallel::map_range(points.len(), |i| {
        (
            binned[i].pixel,
            make_slot(&points[i], &binned[i], rule, ref_time),
        )
    });
    let mut winner: Vec<Option<usize>> = vec![None; plane_len];
    let mut out_of_fan = Vec::new();
    for (i, (pixel, s)) in slots.iter().enumerate() {
        let Some(pixel) = *pixel else {
            out_of_fan.push(points[i]);
            continue;
        };
        let w = &mut winner[pixel as usize];
        match *w {
            Some(j) if slots[j].1.rank() <= s.rank() => {}
            _ => *w = Some(i),
        }
    }
    let mut is_winner = vec![false; points.len()];
    for (pixel, w) in winner.iter().enumerate() {
        if let Some(i) = *w {
            is_winner[i] = true;
            write_slot(&mut img.data, plane_len, pixel, &slots[i].1);
            img.point_ids[pixel] = points[i].point_id as i32;
            img.frame_ages[pixel] = points[i].frame_age as i32;
        }
    }
    let rejected = points
        .iter()
        .zip(&slots)
        .zip(&is_winner)
        .filter(|((_, (pixel, _)), &w)| !w && pixel.is_some())
        .map(|((p, _), _)| *p)
        .collect();
    (img, rejected, out_of_fan)
}

/// Multi-round projection with current-frame priority.
pub fn project_mrv(
    cloud: &PointCloud,
    spec: &LidarSpec,
    rounds: usize,
) -> Result<(RangeImage, ProjectionStats)> {
    project_mrv_with(cloud, spec, rounds, PriorityRule::CurrentFrameFirst)
}

pub fn project_mrv_with(
    cloud: &PointCloud,
    spec: &LidarSpec,
    rounds: usize,
    rule: PriorityRule,
) -> Result<(RangeImage, ProjectionStats)> {
    MrvProjector::new(spec, rule).project(cloud, rounds)
}

/// Multi-round projector that keeps its scratch buffers between calls.
///
/// Projecting a stream of frames through one projector (and one output
/// image via [`project_into`](Self::project_into)) avoids reallocating and
/// re-faulting tens of megabytes per frame.
pub struct MrvProjector {
    spec: LidarSpec,
    rule: PriorityRule,
    binner: FastBinner,
    binned: Vec<Binned>,
    rows: Vec<RowScratch>,
}

/// Per image row: points staged in input order, the same points grouped by
/// column, and the column offsets.
#[derive(Default)]
struct RowScratch {
    staged: Vec<Slot>,
    grouped: Vec<Slot>,
    starts: Vec<u32>,
    kept_per_round: Vec<usize>,
    residual: usize,
}

/// One row's slices of the output image: nine channel rows per round, then
/// the id and age rows per round.
struct RowOut<'a> {
    channels: Vec<&'a mut [f32]>,
    ids: Vec<&'a mut [i32]>,
    ages: Vec<&'a mut [i32]>,
}

impl MrvProjector {
    pub fn new(spec: &LidarSpec, rule: PriorityRule) -> Self {
        MrvProjector {
            spec: spec.clone(),
            rule,
            binner: FastBinner::new(spec),
            binned: Vec::new(),
            rows: Vec::new(),
        }
    }

    pub fn spec(&self) -> &LidarSpec {
        &self.spec
    }

    /// Projects into a freshly allocated image.
    pub fn project(
        &mut self,
        cloud: &PointCloud,
        rounds: usize,
    ) -> Result<(RangeImage, ProjectionStats)> {
        let mut img = RangeImage::empty(&self.spec, rounds.max(1));
        let stats = self.project_into(cloud, rounds, &mut img)?;
        Ok((img, stats))
    }

    /// Projects into `img`, overwriting every value. The image is replaced
    /// by a fresh one if its shape does not match this projector.
    pub fn project_into(
        &mut self,
        cloud: &PointCloud,
        rounds: usize,
        img: &mut RangeImage,
    ) -> Result<ProjectionStats> {
        if rounds == 0 {
            return Err(Error::InvalidArgument("rounds must be at least 1".into()));
        }
        let points = &cloud.points;
        if points.iter().any(|p| p.point_id > i32::MAX as u32) {
            return Err(Error::InvalidArgument(
                "point ids must fit in 31 bits".into(),
            ));
        }
        let (height, width) = (self.spec.beam_count(), self.spec.azimuth_steps());
        let (rule, ref_time) = (self.rule, cloud.reference_timestamp);
        self.binner.bin_points_into(points, &mut self.binned);

        // stage by row first: a handful of sequential write streams instead
        // of random writes over the whole image
        self.rows.resize_with(height, RowScratch::default);
        for row in &mut self.rows {
            row.staged.clear();
        }
        let mut dropped = 0usize;
        for (p, b) in points.iter().zip(&self.binned) {
            match b.pixel {
                Some(px) => {
                    let row = px as usize / width;
                    self.rows[row].staged.push(make_slot(p, b, rule, ref_time));
                }
                None => dropped += 1,
            }
        }

        if img.spec != self.spec
            || img.rounds != rounds
            || img.height != height
            || img.width != width
            || img.row_repeat != 1
        {
            *img = RangeImage::empty(&self.spec, rounds);
        }
        let mut outs: Vec<RowOut> = (0..height)
            .map(|_| RowOut {
                channels: Vec::with_capacity(rounds * CHANNELS_PER_ROUND),
                ids: Vec::with_capacity(rounds),
                ages: Vec::with_capacity(rounds),
            })
            .collect();
        let plane_len = height * width;
        for plane in img.data.chunks_mut(plane_len) {
            for (out, r) in outs.iter_mut().zip(plane.chunks_mut(width)) {
                out.channels.push(r);
            }
        }
        for plane in img.point_ids.chunks_mut(plane_len) {
            for (out, r) in outs.iter_mut().zip(plane.chunks_mut(width)) {
                out.ids.push(r);
            }
        }
        for plane in img.frame_ages.chunks_mut(plane_len) {
            for (out, r) in outs.iter_mut().zip(plane.chunks_mut(width)) {
                out.ages.push(r);
            }
        }

        // each row's points fit in cache: group by column, order every
        // pixel's bucket, write all rounds
        let mut tasks: Vec<(usize, &mut RowScratch, RowOut)> = self
            .rows
            .iter_mut()
            .zip(outs)
            .enumerate()
            .map(|(row, (scratch, out))| (row, scratch, out))
            .collect();
        parallel::for_each_mut(&mut tasks, |(row, scratch, out)| {
            fill_row(*row * width, width, rounds, scratch, out);
        });

        let mut kept_per_round = vec![0usize; rounds];
        let mut residual = 0usize;
        for row in &self.rows {
            for (k, n) in kept_per_round.iter_mut().zip(&row.kept_per_round) {
                *k += n;
            }
            residual += row.residual;
        }
        Ok(ProjectionStats {
            total_points: points.len(),
            kept_per_round,
            dropped_out_of_fan: dropped,
            residual_rejected: residual,
        })
    }
}

fn fill_row(first_pixel: usize, width: usize, rounds: usize, s: &mut RowScratch, out: &mut RowOut) {
    let starts = &mut s.starts;
    starts.clear();
    starts.resize(width + 1, 0);
    for slot in &s.staged {
        starts[slot.pixel as usize - first_pixel + 1] += 1;
    }
    for i in 0..width {
        starts[i + 1] += starts[i];
    }
    let grouped = &mut s.grouped;
    grouped.resize(s.staged.len(), Slot::default());
    {
        // starts[c] doubles as the write cursor, then is restored by shifting
        for slot in &s.staged {
            let c = slot.pixel as usize - first_pixel;
            grouped[starts[c] as usize] = *slot;
            starts[c] += 1;
        }
        for i in (1..=width).rev() {
            starts[i] = starts[i - 1];
        }
        starts[0] = 0;
    }

    s.kept_per_round.clear();
    s.kept_per_round.resize(rounds, 0);
    s.residual = 0;
    for col in 0..width {
        let (lo, hi) = (starts[col] as usize, starts[col + 1] as usize);
        let bucket = &mut grouped[lo..hi];
        insertion_sort(bucket);
        for (round, k) in s.kept_per_round.iter_mut().enumerate() {
            let channels = &mut out.channels[round * CHANNELS_PER_ROUND..][..CHANNELS_PER_ROUND];
            match bucket.get(round) {
                Some(slot) => {
                    *k += 1;
                    for (plane, v) in channels.iter_mut().zip(slot.channels()) {
                        plane[col] = v;
                    }
                    out.ids[round][col] = slot.id as i32;
                    out.ages[round][col] = slot.age as i32;
                }
                None => {
                    for plane in channels.iter_mut() {
                        plane[col] = 0.0;
                    }
                    out.ids[round][col] = -1;
                    out.ages[round][col] = -1;
                }
            }
        }
        s.residual += bucket.len().saturating_sub(rounds);
    }
}

fn insertion_sort(v: &mut [Slot]) {
    if v.len() > 32 {
        v.sort_unstable_by_key(Slot::rank);
        return;
    }
    // shift instead of swap: one copy per displaced slot
    for i in 1..v.len() {
        let cur = v[i];
        let rank = cur.rank();
        let mut j = i;
        while j > 0 && v[j - 1].rank() > rank {
            v[j] = v[j - 1];
            j -= 1;
        }
        if j != i {
            v[j] = cur;
        }
    }
}

/// Replicates every row `factor` times (nearest-neighbour upsampling).
pub fn upscale_vertical(img: &RangeImage, factor: usize) -> Result<RangeImage> {
    if factor == 0 {
        return Err(Error::InvalidArgument(
            "upscale factor must be at least 1".into(),
        ));
    }
    if factor == 1 {
        return Ok(img.clone());
    }
    let (h, w) = (img.height, img.width);
    let new_h = h * factor;
    let stretch = |src: &[f32], planes: usize| -> Vec<f32> {
        let mut out = Vec::with_capacity(planes * new_h * w);
        for plane in src.chunks(h * w) {
            for row in plane.chunks(w) {
                for _ in 0..factor {
                    out.extend_from_slice(row);
                }
            }
        }
        out
    };
    let stretch_i = |src: &[i32]| -> Vec<i32> {
        let mut out = Vec::with_capacity(img.rounds * new_h * w);
        for plane in src.chunks(h * w) {
            for row in plane.chunks(w) {
                for _ in 0..factor {
                    out.extend_from_slice(row);
                }
            }
        }
        out
    };
    Ok(RangeImage {
        spec: img.spec.clone(),
        row_repeat: img.row_repeat * factor,
        height: new_h,
        width: w,
        rounds: img.rounds,
        data: stretch(&img.data, img.channel_count()),
        point_ids: stretch_i(&img.point_ids),
        frame_ages: stretch_i(&img.frame_ages),
    })
}

/// Channel index in the type-grouped layout for `(round, channel)`.
pub fn grouped_channel_index(rounds: usize, round: usize, ch: Channel) -> usize {
    ch.index() * rounds + round
}

/// Regroups channels so the `rounds` planes of each channel type are
/// adjacent: `[x_0..x_{R-1}, y_0..y_{R-1}, ..., t_0..t_{R-1}]`.
pub fn rearrange_by_type(img: &RangeImage) -> FeatureMap {
    let pl = img.plane_len();
    let r = img.rounds;
    let mut data = vec![0.0f32; img.data.len()];
    for round in 0..r {
        for ch in Channel::ALL {
            let src = (round * CHANNELS_PER_ROUND + ch.index()) * pl;
            let dst = grouped_channel_index(r, round, ch) * pl;
            data[dst..dst + pl].copy_from_slice(&img.data[src..src + pl]);
        }
    }
    FeatureMap {
        channels: r * CHANNELS_PER_ROUND,
        height: img.height,
        width: img.width,
        data,
    }
}

/// Inverse of [`rearrange_by_type`]: back to round-major channel data.
pub fn restore_round_major(grouped: &FeatureMap, rounds: usize) -> Result<Vec<f32>> {
    if grouped.channels != rounds * CHANNELS_PER_ROUND {
        return Err(Error::Shape(format!(
            "{} channels cannot hold {rounds} rounds of {CHANNELS_PER_ROUND}",
            grouped.channels
        )));
    }
    let pl = grouped.height * grouped.width;
    let mut data = vec![0.0f32; grouped.data.len()];
    for round in 0..rounds {
        for ch in Channel::ALL {
            let dst = (round * CHANNELS_PER_ROUND + ch.index()) * pl;
            let src = grouped_channel_index(rounds, round, ch) * pl;
            data[dst..dst + pl].copy_from_slice(&grouped.data[src..src + pl]);
        }
    }
    Ok(data)
}
