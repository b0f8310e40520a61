//! End-to-end glue: cloud to detections, and cloud plus annotations to
//! training targets.

use serde::{Deserialize, Serialize};

use crate::boxes::{iou_3d, nms_3d, Box3D, NmsConfig, OverlapMetric};
use crate::error::{Error, Result};
use crate::lidar_geom::{LidarSpec, PointCloud};
use crate::mrv::{project_mrv, upscale_vertical, RangeImage};
use crate::net::{forward, NetWeights, PredictionSet, LEVEL_STRIDES};
use crate::targets::{
    containing_gts, cross_entropy, decode_box, dynamic_k_assign, encode_targets, owner_gt,
    AssignmentResult, DynamicKProblem, PixelAnchor, PixelPrediction, RegressionTarget,
    DEFAULT_TOP_Q,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectConfig {
    pub rounds: usize,
    pub upscale: usize,
    pub score_threshold: f64,
    pub nms_threshold: f64,
    pub top_k: usize,
    pub nms_metric: OverlapMetric,
}

impl Default for DetectConfig {
    fn default() -> Self {
        DetectConfig {
            rounds: 5,
            upscale: 2,
            score_threshold: 0.01,
            nms_threshold: 0.2,
            top_k: 500,
            nms_metric: OverlapMetric::Iou3d,
        }
    }
}

impl DetectConfig {
    pub fn nms(&self) -> NmsConfig {
        NmsConfig {
            iou_threshold: self.nms_threshold,
            metric: self.nms_metric,
            max_keep: Some(self.top_k),
        }
    }
}

/// Range image of `cloud` as fed to the network: MRV followed by vertical
/// upscaling.
pub fn prepare_image(
    cloud: &PointCloud,
    spec: &LidarSpec,
    cfg: &DetectConfig,
) -> Result<RangeImage> {
    let (img, _) = project_mrv(cloud, spec, cfg.rounds)?;
    upscale_vertical(&img, cfg.upscale)
}

pub fn detect(
    cloud: &PointCloud,
    spec: &LidarSpec,
    cfg: &DetectConfig,
    weights: &NetWeights,
) -> Result<Vec<Box3D>> {
    detect_image(&prepare_image(cloud, spec, cfg)?, cfg, weights)
}

pub fn detect_image(
    img: &RangeImage,
    cfg: &DetectConfig,
    weights: &NetWeights,
) -> Result<Vec<Box3D>> {
    let preds = forward(img, weights)?;
    decode_predictions(img, &preds, cfg)
}

/// Range-image pixel backing level location `(y, x)` at `stride`.
pub fn anchor_pixel(stride: usize, y: usize, x: usize) -> (usize, usize) {
    (y * stride, x * stride)
}

/// Scores every (location, class) pair, keeps those above the score
/// threshold, decodes them at their first-round anchors and runs NMS.
pub fn decode_predictions(
    img: &RangeImage,
    preds: &PredictionSet,
    cfg: &DetectConfig,
) -> Result<Vec<Box3D>> {
    let mut cells = Vec::new();
    for (lvl, level) in preds.levels.iter().enumerate() {
        for y in 0..level.height() {
            for x in 0..level.width() {
                cells.push((lvl, y, x));
            }
        }
    }
    let per_cell: Vec<Vec<Box3D>> = crate::parallel::map(&cells, |&(lvl, y, x)| {
        let level = &preds.levels[lvl];
        let (row, col) = anchor_pixel(level.stride, y, x);
        if row >= img.height || col >= img.width {
            return Vec::new();
        }
        let Some(anchor) = PixelAnchor::from_image(img, row, col, lvl) else {
            return Vec::new();
        };
        (0..level.num_classes())
            .filter_map(|c| {
                let score = level.class_prob(c, y, x) as f64 * level.iou_estimate(c, y, x) as f64;
                if score <= cfg.score_threshold {
                    return None;
                }
                let mut b = decode_box(&level.regression(c, y, x), &anchor);
                b.class_id = c as u32;
                b.score = score;
                // overflowing regressions (e.g. from untrained weights) are
                // not boxes
                b.is_well_formed().then_some(b)
            })
            .collect()
    });
    let dets: Vec<Box3D> = per_cell.into_iter().flatten().collect();
    let keep = nms_3d(&dets, &cfg.nms());
    Ok(keep.into_iter().map(|i| dets[i]).collect())
}

/// One feature location across the pyramid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Location {
    pub level: usize,
    pub y: usize,
    pub x: usize,
    pub row: usize,
    pub col: usize,
}

/// Grid size of each pyramid level for an `height × width` image, halving
/// with ceil rounding.
pub fn level_shapes(height: usize, width: usize) -> Vec<(usize, usize, usize)> {
    LEVEL_STRIDES
        .iter()
        .map(|&s| (height.div_ceil(s), width.div_ceil(s), s))
        .collect()
}

/// All locations in (level, y, x) order.
pub fn locations(height: usize, width: usize) -> Vec<Location> {
    let mut out = Vec::new();
    for (level, (h, w, s)) in level_shapes(height, width).into_iter().enumerate() {
        for y in 0..h {
            for x in 0..w {
                let (row, col) = anchor_pixel(s, y, x);
                out.push(Location {
                    level,
                    y,
                    x,
                    row,
                    col,
                });
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PositiveSample {
    pub location: Location,
    pub target: RegressionTarget,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GtTargets {
    pub gt_index: usize,
    pub class: u32,
    pub candidates: usize,
    /// Dynamic K, or the candidate count in static mode.
    pub k: usize,
    pub positives: Vec<PositiveSample>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetSet {
    pub dynamic: bool,
    pub num_locations: usize,
    pub num_positives: usize,
    pub per_gt: Vec<GtTargets>,
    pub gts_without_candidates: Vec<usize>,
    /// Per-location labels over [`locations`] order.
    #[serde(skip)]
    pub assignment: Option<AssignmentResult>,
}

pub fn build_targets(
    cloud: &PointCloud,
    gts: &[Box3D],
    spec: &LidarSpec,
    cfg: &DetectConfig,
    preds: Option<&PredictionSet>,
) -> Result<TargetSet> {
    build_targets_from_image(&prepare_image(cloud, spec, cfg)?, gts, preds)
}

/// Static containment candidates and, when predictions are supplied,
/// dynamic-K refinement over every pyramid location.
pub fn build_targets_from_image(
    img: &RangeImage,
    gts: &[Box3D],
    preds: Option<&PredictionSet>,
) -> Result<TargetSet> {
    let locs = locations(img.height, img.width);
    if let Some(p) = preds {
        let shapes = level_shapes(img.height, img.width);
        if p.levels.len() != shapes.len()
            || p.levels
                .iter()
                .zip(&shapes)
                .any(|(l, &(h, w, _))| l.height() != h || l.width() != w)
        {
            return Err(Error::Shape(
                "prediction levels do not match the image pyramid".into(),
            ));
        }
    }
    let anchors: Vec<Option<PixelAnchor>> = crate::parallel::map(&locs, |l| {
        PixelAnchor::from_image(img, l.row, l.col, l.level)
    });
    let contained: Vec<Vec<usize>> = crate::parallel::map(&anchors, |a| match a {
        Some(a) => containing_gts(a.point, gts),
        None => Vec::new(),
    });

    let mut candidates = vec![Vec::new(); gts.len()];
    for (i, js) in contained.iter().enumerate() {
        for &j in js {
            candidates[j].push(i);
        }
    }

    let assignment = match preds {
        None => {
            let matched_gt: Vec<Option<usize>> =
                crate::parallel::map(&anchors, |a| a.and_then(|a| owner_gt(a.point, gts)));
            AssignmentResult {
                labels: matched_gt
                    .iter()
                    .map(|g| g.map(|j| gts[j].class_id))
                    .collect(),
                matched_gt,
                k_per_gt: candidates.iter().map(Vec::len).collect(),
                gts_without_candidates: (0..gts.len())
                    .filter(|&j| candidates[j].is_empty())
                    .collect(),
            }
        }
        Some(p) => dynamic_assignment(&locs, &anchors, &candidates, gts, p)?,
    };

    let mut per_gt: Vec<GtTargets> = gts
        .iter()
        .enumerate()
        .map(|(j, g)| GtTargets {
            gt_index: j,
            class: g.class_id,
            candidates: candidates[j].len(),
            k: assignment.k_per_gt[j],
            positives: Vec::new(),
        })
        .collect();
    for (i, j) in assignment.positives() {
        let anchor = anchors[i].expect("positives always have an anchor");
        per_gt[j].positives.push(PositiveSample {
            location: locs[i],
            target: encode_targets(&gts[j], &anchor)?,
        });
    }
    Ok(TargetSet {
        dynamic: preds.is_some(),
        num_locations: locs.len(),
        num_positives: assignment.positives().count(),
        per_gt,
        gts_without_candidates: assignment.gts_without_candidates.clone(),
        assignment: Some(assignment),
    })
}

fn dynamic_assignment(
    locs: &[Location],
    anchors: &[Option<PixelAnchor>],
    candidates: &[Vec<usize>],
    gts: &[Box3D],
    preds: &PredictionSet,
) -> Result<AssignmentResult> {
    // Work on the compacted set of candidate locations only.
    let mut pool: Vec<usize> = candidates.iter().flatten().copied().collect();
    pool.sort_unstable();
    pool.dedup();
    let local = |i: usize| pool.binary_search(&i).expect("candidate is pooled");
    if let Some(g) = gts
        .iter()
        .find(|g| g.class_id as usize >= preds.num_classes)
    {
        return Err(Error::InvalidArgument(format!(
            "gt class {} outside the {} predicted classes",
            g.class_id, preds.num_classes
        )));
    }

    let rows: Vec<(Vec<f64>, Vec<f64>)> = crate::parallel::map(&pool, |&i| {
        let l = locs[i];
        let level = &preds.levels[l.level];
        let anchor = anchors[i].expect("candidates have anchors");
        let probs: Vec<f64> = (0..=level.num_classes())
            .map(|c| level.class_prob(c, l.y, l.x) as f64)
            .collect();
        gts.iter()
            .map(|g| {
                let c = g.class_id as usize;
                let iou = iou_3d(&decode_box(&level.regression(c, l.y, l.x), &anchor), g);
                (cross_entropy(&probs, c) - iou, iou)
            })
            .unzip()
    });
    let (cost, iou): (Vec<Vec<f64>>, Vec<Vec<f64>>) = rows.into_iter().unzip();
    let problem = DynamicKProblem {
        num_pixels: pool.len(),
        candidates: candidates
            .iter()
            .map(|c| c.iter().map(|&i| local(i)).collect())
            .collect(),
        cost,
        iou,
        gt_classes: gts.iter().map(|g| g.class_id).collect(),
        top_q: DEFAULT_TOP_Q,
    };
    let compact = dynamic_k_assign(&problem)?;

    let mut labels = vec![None; locs.len()];
    let mut matched_gt = vec![None; locs.len()];
    for (p, j) in compact.positives() {
        matched_gt[pool[p]] = Some(j);
        labels[pool[p]] = compact.labels[p];
    }
    Ok(AssignmentResult {
        labels,
        matched_gt,
        k_per_gt: compact.k_per_gt,
        gts_without_candidates: compact.gts_without_candidates,
    })
}

/// Gathers per-location predictions in [`locations`] order, for
/// [`crate::targets::losses`]. Locations without a first-round point get a
/// zero anchor; they can only ever be background.
pub fn pixel_predictions(img: &RangeImage, preds: &PredictionSet) -> Vec<PixelPrediction> {
    let locs = locations(img.height, img.width);
    crate::parallel::map(&locs, |l| {
        let level = &preds.levels[l.level];
        let c = level.num_classes();
        PixelPrediction {
            class_probs: (0..=c)
                .map(|k| level.class_prob(k, l.y, l.x) as f64)
                .collect(),
            regression: (0..c).map(|k| level.regression(k, l.y, l.x)).collect(),
            iou: (0..level.iou.channels)
                .map(|k| level.iou.get(k, l.y, l.x) as f64)
                .collect(),
            anchor: PixelAnchor::from_image(img, l.row, l.col, l.level).unwrap_or(PixelAnchor {
                row: l.row,
                col: l.col,
                point: [0.0; 3],
                azimuth: 0.0,
                fpn_level: l.level,
            }),
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lidar_geom::Point;
    use crate::net::{init_weights, NetConfig};

    fn spec() -> LidarSpec {
        LidarSpec::evenly_spaced(8, 64, -15.0, 5.0).unwrap()
    }

    fn point(p: [f64; 3], id: u32) -> Point {
        Point {
            position: p,
            intensity: 0.5,
            timestamp: 0.0,
            frame_age: 0,
            point_id: id,
        }
    }

    fn toy_cfg(rounds: usize) -> DetectConfig {
        DetectConfig {
            rounds,
            upscale: 1,
            ..Default::default()
        }
    }

    #[test]
    fn empty_cloud_gives_no_detections() {
        let w = init_weights(&NetConfig::toy(2, 3), 1).unwrap();
        let d = detect(&PointCloud::new(vec![], 0.0), &spec(), &toy_cfg(2), &w).unwrap();
        assert!(d.is_empty());
    }

    #[test]
    fn detections_respect_thresholds_and_cap() {
        let mut pts = Vec::new();
        for i in 0..400u32 {
            let a = i as f64 * 0.05;
            pts.push(point(
                [10.0 * a.cos(), 10.0 * a.sin(), -0.5 - (i % 7) as f64 * 0.2],
                i,
            ));
        }
        let cloud = PointCloud::new(pts, 0.0);
        let w = init_weights(&NetConfig::toy(2, 3), 5).unwrap();
        let mut cfg = toy_cfg(2);
        cfg.top_k = 7;
        cfg.score_threshold = 0.0;
        let d = detect(&cloud, &spec(), &cfg, &w).unwrap();
        assert!(d.len() <= 7);
        assert!(d.windows(2).all(|p| p[0].score >= p[1].score));
        assert!(d.iter().all(|b| b.score > 0.0));
        let again = detect(&cloud, &spec(), &cfg, &w).unwrap();
        assert_eq!(d, again);
    }

    #[test]
    fn location_mapping_is_injective_per_level() {
        let locs = locations(9, 13);
        let shapes = level_shapes(9, 13);
        assert_eq!(shapes[1], (5, 7, 2));
        assert_eq!(shapes[5], (1, 1, 32));
        for lvl in 0..shapes.len() {
            let mut px: Vec<(usize, usize)> = locs
                .iter()
                .filter(|l| l.level == lvl)
                .map(|l| (l.row, l.col))
                .collect();
            let n = px.len();
            px.sort_unstable();
            px.dedup();
            assert_eq!(px.len(), n);
        }
    }

    #[test]
    fn static_targets() {
        let s = spec();
        let pts: Vec<Point> = (0..5u32)
            .map(|i| point([8.0, -0.4 + 0.2 * i as f64, -1.0], i))
            .collect();
        let cloud = PointCloud::new(pts, 0.0);
        let img = prepare_image(&cloud, &s, &toy_cfg(1)).unwrap();
        let t = build_targets_from_image(&img, &[], None).unwrap();
        assert_eq!(t.num_positives, 0);

        let gt = Box3D::new([8.0, 0.0, -1.0], [2.0, 1.0, 1.0], 0.0).with_class(2);
        let t = build_targets_from_image(&img, &[gt], None).unwrap();
        let level0: Vec<&PositiveSample> = t.per_gt[0]
            .positives
            .iter()
            .filter(|p| p.location.level == 0)
            .collect();
        assert_eq!(level0.len(), img.occupied(0));
        assert_eq!(t.per_gt[0].candidates, t.num_positives);
        for p in &t.per_gt[0].positives {
            assert!(img.exists(0, p.location.row, p.location.col));
        }
    }

    #[test]
    fn dynamic_targets_respect_k() {
        let s = spec();
        let pts: Vec<Point> = (0..12u32)
            .map(|i| point([8.0, -1.1 + 0.2 * i as f64, -1.0], i))
            .collect();
        let cloud = PointCloud::new(pts, 0.0);
        let img = prepare_image(&cloud, &s, &toy_cfg(1)).unwrap();
        let gts = [Box3D::new([8.0, 0.0, -1.0], [3.0, 1.0, 1.0], 0.0).with_class(1)];
        let w = init_weights(&NetConfig::toy(1, 3), 9).unwrap();
        let preds = forward(&img, &w).unwrap();
        let t = build_targets_from_image(&img, &gts, Some(&preds)).unwrap();
        assert!(t.dynamic);
        assert!(t.per_gt[0].k >= 1);
        assert_eq!(t.per_gt[0].positives.len(), t.per_gt[0].k);

        let pp = pixel_predictions(&img, &preds);
        let r = crate::targets::losses(
            &pp,
            t.assignment.as_ref().unwrap(),
            &gts,
            &Default::default(),
        )
        .unwrap();
        assert!(r.cls_ce > 0.0 && r.box_l1 >= 0.0 && !r.no_positives);
    }
}
