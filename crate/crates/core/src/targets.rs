//! Per-pixel training targets: box encoding relative to the pixel's own 3D
//! point, static containment labels, dynamic-K positive selection and the
//! evaluation-only loss terms.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::boxes::{contains_point, iou_3d, Box3D};
use crate::error::{Error, Result};
use crate::lidar_geom::{normalize_angle, Vec3};
use crate::mrv::{Channel, RangeImage};

/// Number of top IoUs summed to obtain a ground truth's dynamic K.
pub const DEFAULT_TOP_Q: usize = 20;

const PROB_EPS: f64 = 1e-12;

/// First-round point backing a feature location.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PixelAnchor {
    pub row: usize,
    pub col: usize,
    pub point: Vec3,
    /// Azimuth of `point`.
    pub azimuth: f64,
    pub fpn_level: usize,
}

impl PixelAnchor {
    pub fn from_point(point: Vec3, row: usize, col: usize, fpn_level: usize) -> Self {
        PixelAnchor {
            row,
            col,
            point,
            azimuth: crate::lidar_geom::cart_to_spherical(point).1,
            fpn_level,
        }
    }

    /// Anchor at a round-0 pixel, using the stored point and azimuth.
    pub fn from_image(img: &RangeImage, row: usize, col: usize, fpn_level: usize) -> Option<Self> {
        img.first_round_point(row, col).map(|point| PixelAnchor {
            row,
            col,
            point,
            azimuth: img.get(0, Channel::Azimuth, row, col) as f64,
            fpn_level,
        })
    }
}

/// The 10-dimensional regression vector of one pixel.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RegressionTarget {
    pub delta_center: Vec3,
    /// `(ln w, ln h, ln l)`.
    pub log_dims: Vec3,
    /// `(sin Δα, cos Δα)` of the yaw relative to the pixel azimuth.
    pub yaw_sin_cos: [f64; 2],
    pub velocity: [f64; 2],
}

impl RegressionTarget {
    pub fn to_array(&self) -> [f64; 10] {
        let mut a = [0.0; 10];
        a[0..3].copy_from_slice(&self.delta_center);
        a[3..6].copy_from_slice(&self.log_dims);
        a[6..8].copy_from_slice(&self.yaw_sin_cos);
        a[8..10].copy_from_slice(&self.velocity);
        a
    }

    pub fn from_array(a: [f64; 10]) -> Self {
        RegressionTarget {
            delta_center: [a[0], a[1], a[2]],
            log_dims: [a[3], a[4], a[5]],
            yaw_sin_cos: [a[6], a[7]],
            velocity: [a[8], a[9]],
        }
    }
}

pub fn encode_targets(gt: &Box3D, anchor: &PixelAnchor) -> Result<RegressionTarget> {
    if gt.dims.iter().any(|&d| d.is_nan() || d <= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "box dims must be positive, got {:?}",
            gt.dims
        )));
    }
    let delta = normalize_angle(gt.yaw - anchor.azimuth);
    Ok(RegressionTarget {
        delta_center: [0, 1, 2].map(|k| gt.center[k] - anchor.point[k]),
        log_dims: gt.dims.map(f64::ln),
        yaw_sin_cos: [delta.sin(), delta.cos()],
        velocity: gt.velocity,
    })
}

/// Inverts [`encode_targets`]. Raw `(sin, cos)` pairs need not be unit
/// length; the angle comes from `atan2`. Class 0 and score 1 are filled in.
pub fn decode_box(t: &RegressionTarget, anchor: &PixelAnchor) -> Box3D {
    let center = [0, 1, 2].map(|k| anchor.point[k] + t.delta_center[k]);
    let yaw = normalize_angle(anchor.azimuth + t.yaw_sin_cos[0].atan2(t.yaw_sin_cos[1]));
    Box3D {
        center,
        dims: t.log_dims.map(f64::exp),
        yaw,
        velocity: t.velocity,
        class_id: 0,
        score: 1.0,
    }
}

/// Indices of every ground truth containing `p`.
pub fn containing_gts(p: Vec3, gts: &[Box3D]) -> Vec<usize> {
    gts.iter()
        .enumerate()
        .filter(|(_, g)| contains_point(g, p))
        .map(|(j, _)| j)
        .collect()
}

/// Ground truth owning `p`: the containing box of minimum BEV area, ties by
/// index.
pub fn owner_gt(p: Vec3, gts: &[Box3D]) -> Option<usize> {
    containing_gts(p, gts).into_iter().min_by(|&a, &b| {
        gts[a]
            .bev_area()
            .total_cmp(&gts[b].bev_area())
            .then(a.cmp(&b))
    })
}

/// Static per-pixel labels from round-0 containment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StaticLabels {
    pub height: usize,
    pub width: usize,
    /// Owning ground-truth index per pixel; `None` is negative.
    pub gt_index: Vec<Option<usize>>,
}

impl StaticLabels {
    pub fn get(&self, row: usize, col: usize) -> Option<usize> {
        self.gt_index[row * self.width + col]
    }

    pub fn positives(&self) -> usize {
        self.gt_index.iter().filter(|g| g.is_some()).count()
    }
}

pub fn static_assign(img: &RangeImage, gts: &[Box3D]) -> StaticLabels {
    let gt_index = crate::parallel::map_range(img.plane_len(), |i| {
        let (row, col) = (i / img.width, i % img.width);
        img.first_round_point(row, col)
            .and_then(|p| owner_gt(p, gts))
    });
    StaticLabels {
        height: img.height,
        width: img.width,
        gt_index,
    }
}

/// Decoded prediction with its class distribution (background last).
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredBox {
    pub bbox: Box3D,
    pub class_probs: Vec<f64>,
}

pub fn cross_entropy(probs: &[f64], label: usize) -> f64 {
    -probs.get(label).copied().unwrap_or(0.0).max(PROB_EPS).ln()
}

/// Binary cross-entropy with the `0 · ln 0 = 0` convention.
pub fn binary_cross_entropy(pred: f64, target: f64) -> f64 {
    let term = |w: f64, p: f64| {
        if w == 0.0 {
            0.0
        } else {
            w * p.max(PROB_EPS).ln()
        }
    };
    -(term(target, pred) + term(1.0 - target, 1.0 - pred))
}

/// `cost[i][j] = CE(probs_i, class_j) − IoU3D(box_i, gt_j)`.
pub fn cost_matrix(preds: &[ScoredBox], gts: &[Box3D]) -> Vec<Vec<f64>> {
    crate::parallel::map(preds, |p| {
        gts.iter()
            .map(|g| cross_entropy(&p.class_probs, g.class_id as usize) - iou_3d(&p.bbox, g))
            .collect()
    })
}

/// Inputs of a dynamic-K assignment over `num_pixels` locations.
#[derive(Debug, Clone, PartialEq)]
pub struct DynamicKProblem {
    pub num_pixels: usize,
    /// Candidate pixel indices per ground truth.
    pub candidates: Vec<Vec<usize>>,
    /// `cost[pixel][gt]`; only candidate entries are read.
    pub cost: Vec<Vec<f64>>,
    /// `iou[pixel][gt]`; only candidate entries are read.
    pub iou: Vec<Vec<f64>>,
    pub gt_classes: Vec<u32>,
    pub top_q: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssignmentResult {
    /// Class per pixel; `None` is background.
    pub labels: Vec<Option<u32>>,
    pub matched_gt: Vec<Option<usize>>,
    /// K per ground truth (0 when it had no candidates).
    pub k_per_gt: Vec<usize>,
    /// Ground truths that received no candidate pixel.
    pub gts_without_candidates: Vec<usize>,
}

impl AssignmentResult {
    pub fn positives(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.matched_gt
            .iter()
            .enumerate()
            .filter_map(|(p, g)| g.map(|g| (p, g)))
    }

    pub fn positives_of(&self, gt: usize) -> Vec<usize> {
        self.positives()
            .filter(|&(_, g)| g == gt)
            .map(|(p, _)| p)
            .collect()
    }
}

/// `K = max(1, round(Σ top-Q IoUs))`, capped by the candidate count; 0 for
/// an empty candidate set.
pub fn dynamic_k(ious: &[f64], top_q: usize) -> usize {
    if ious.is_empty() {
        return 0;
    }
    let mut sorted = ious.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let sum: f64 = sorted.iter().take(top_q).sum();
    (sum.round() as usize).max(1).min(ious.len())
}

/// Picks the K lowest-cost candidates per ground truth; a pixel claimed by
/// several ground truths goes to its lowest-cost one (ties by index) and
/// the losing claims are dropped without refill.
pub fn dynamic_k_assign(prob: &DynamicKProblem) -> Result<AssignmentResult> {
    let n_gt = prob.candidates.len();
    if prob.gt_classes.len() != n_gt
        || prob.cost.len() != prob.num_pixels
        || prob.iou.len() != prob.num_pixels
    {
        return Err(Error::Shape("dynamic-K inputs disagree on sizes".into()));
    }
    let mut claims: Vec<Vec<usize>> = vec![Vec::new(); prob.num_pixels];
    let mut k_per_gt = vec![0usize; n_gt];
    let mut missing = Vec::new();
    for (j, cands) in prob.candidates.iter().enumerate() {
        let cands: Vec<usize> = cands
            .iter()
            .copied()
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        if let Some(&bad) = cands.iter().find(|&&p| p >= prob.num_pixels) {
            return Err(Error::InvalidArgument(format!(
                "candidate pixel {bad} out of range"
            )));
        }
        if cands.is_empty() {
            missing.push(j);
            continue;
        }
        let ious: Vec<f64> = cands.iter().map(|&p| prob.iou[p][j]).collect();
        let k = dynamic_k(&ious, prob.top_q);
        k_per_gt[j] = k;
        let mut ranked = cands;
        ranked.sort_by(|&a, &b| prob.cost[a][j].total_cmp(&prob.cost[b][j]).then(a.cmp(&b)));
        for &p in ranked.iter().take(k) {
            claims[p].push(j);
        }
    }
    let mut labels = vec![None; prob.num_pixels];
    let mut matched_gt = vec![None; prob.num_pixels];
    for (p, js) in claims.iter().enumerate() {
        if let Some(&j) = js
            .iter()
            .min_by(|&&a, &&b| prob.cost[p][a].total_cmp(&prob.cost[p][b]).then(a.cmp(&b)))
        {
            matched_gt[p] = Some(j);
            labels[p] = Some(prob.gt_classes[j]);
        }
    }
    Ok(AssignmentResult {
        labels,
        matched_gt,
        k_per_gt,
        gts_without_candidates: missing,
    })
}

/// One location's network outputs, already gathered per class.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelPrediction {
    /// `C + 1` probabilities, background last.
    pub class_probs: Vec<f64>,
    /// One regression vector per class.
    pub regression: Vec<RegressionTarget>,
    /// Per-class IoU estimates, or a single shared one.
    pub iou: Vec<f64>,
    pub anchor: PixelAnchor,
}

impl PixelPrediction {
    fn iou_for(&self, class: usize) -> f64 {
        if self.iou.len() == 1 {
            self.iou[0]
        } else {
            self.iou[class]
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub l1: f64,
    pub iou: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { l1: 1.0, iou: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub cls_ce: f64,
    pub box_l1: f64,
    pub box_iou_loss: f64,
    pub iou_bce: f64,
    pub total: f64,
    pub positives: usize,
    /// Set when there were no positives and the box terms are zero.
    pub no_positives: bool,
}

pub fn losses(
    preds: &[PixelPrediction],
    assignment: &AssignmentResult,
    gts: &[Box3D],
    weights: &LossWeights,
) -> Result<LossReport> {
    if preds.len() != assignment.labels.len() {
        return Err(Error::Shape(format!(
            "{} predictions but {} assigned pixels",
            preds.len(),
            assignment.labels.len()
        )));
    }
    let mut cls = 0.0;
    for (p, label) in preds.iter().zip(&assignment.labels) {
        let background = p.class_probs.len().saturating_sub(1);
        cls += cross_entropy(&p.class_probs, label.map_or(background, |c| c as usize));
    }
    let cls_ce = if preds.is_empty() {
        0.0
    } else {
        cls / preds.len() as f64
    };

    let (mut l1, mut iou_l, mut bce, mut n) = (0.0, 0.0, 0.0, 0usize);
    for (p, j) in assignment.positives() {
        let gt = gts.get(j).ok_or_else(|| {
            Error::InvalidArgument(format!("assignment refers to missing gt {j}"))
        })?;
        let class = gt.class_id as usize;
        let pred = &preds[p];
        let reg = pred
            .regression
            .get(class)
            .ok_or_else(|| Error::Shape(format!("no regression output for class {class}")))?;
        let target = encode_targets(gt, &pred.anchor)?;
        let diff: f64 = reg
            .to_array()
            .iter()
            .zip(target.to_array())
            .map(|(a, b)| (a - b).abs())
            .sum();
        l1 += diff / 10.0;
        let iou = iou_3d(&decode_box(reg, &pred.anchor), gt);
        iou_l += 1.0 - iou;
        bce += binary_cross_entropy(pred.iou_for(class), iou);
        n += 1;
    }
    let mean = |v: f64| if n == 0 { 0.0 } else { v / n as f64 };
    let (box_l1, box_iou_loss, iou_bce) = (mean(l1), mean(iou_l), mean(bce));
    Ok(LossReport {
        cls_ce,
        box_l1,
        box_iou_loss,
        iou_bce,
        total: cls_ce + weights.l1 * box_l1 + weights.iou * box_iou_loss + iou_bce,
        positives: n,
        no_positives: n == 0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::{FRAC_PI_2, LN_2, PI};

    fn anchor(point: Vec3) -> PixelAnchor {
        PixelAnchor::from_point(point, 0, 0, 0)
    }

    #[test]
    fn encode_examples() {
        let a = anchor([4.0, 3.0, -1.0]);
        let gt = Box3D::new([4.0, 3.0, -1.0], [1.0, 1.0, 1.0], a.azimuth + FRAC_PI_2);
        let t = encode_targets(&gt, &a).unwrap();
        assert_eq!(t.delta_center, [0.0; 3]);
        assert_eq!(t.log_dims, [0.0; 3]);
        assert_abs_diff_eq!(t.yaw_sin_cos[0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(t.yaw_sin_cos[1], 0.0, epsilon = 1e-12);
        let bad = Box3D {
            dims: [1.0, 0.0, 1.0],
            ..gt
        };
        assert!(encode_targets(&bad, &a).is_err());
    }

    #[test]
    fn decode_examples() {
        let a = anchor([10.0, -2.0, 0.5]);
        let b = decode_box(
            &RegressionTarget {
                yaw_sin_cos: [0.0, 1.0],
                ..Default::default()
            },
            &a,
        );
        assert_eq!(b.center, a.point);
        assert_eq!(b.dims, [1.0; 3]);
        assert_abs_diff_eq!(b.yaw, a.azimuth, epsilon = 1e-12);
        let raw = RegressionTarget {
            yaw_sin_cos: [0.6, 0.8],
            ..Default::default()
        };
        assert_abs_diff_eq!(
            decode_box(&raw, &a).yaw,
            normalize_angle(a.azimuth + 0.6f64.atan2(0.8)),
            epsilon = 1e-12
        );
        let loud = RegressionTarget {
            yaw_sin_cos: [3.0, 4.0],
            ..Default::default()
        };
        assert_abs_diff_eq!(
            decode_box(&loud, &a).yaw,
            decode_box(&raw, &a).yaw,
            epsilon = 1e-12
        );
    }

    #[test]
    fn owner_prefers_smaller_box() {
        let big = Box3D::new([0.0; 3], [4.0, 4.0, 4.0], 0.0).with_class(1);
        let small = Box3D::new([0.5, 0.0, 0.0], [1.0, 1.0, 1.0], 0.3).with_class(2);
        assert_eq!(owner_gt([0.5, 0.0, 0.0], &[big, small]), Some(1));
        assert_eq!(owner_gt([1.8, 1.8, 0.0], &[big, small]), Some(0));
        assert_eq!(owner_gt([9.0, 0.0, 0.0], &[big, small]), None);
        assert_eq!(owner_gt([0.0; 3], &[]), None);
    }

    #[test]
    fn cost_examples() {
        let gt = Box3D::new([0.0; 3], [1.0, 1.0, 1.0], 0.0).with_class(1);
        let perfect = ScoredBox {
            bbox: gt,
            class_probs: vec![0.0, 1.0, 0.0],
        };
        let far = ScoredBox {
            bbox: Box3D::new([50.0, 0.0, 0.0], [1.0; 3], 0.0),
            class_probs: vec![0.25; 4],
        };
        let m = cost_matrix(&[perfect, far], &[gt, gt]);
        assert_eq!((m.len(), m[0].len()), (2, 2));
        assert_abs_diff_eq!(m[0][0], -1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(m[1][1], -(0.25f64).ln(), epsilon = 1e-12);
    }

    fn problem(
        n: usize,
        cands: Vec<Vec<usize>>,
        cost: Vec<Vec<f64>>,
        iou: Vec<Vec<f64>>,
    ) -> DynamicKProblem {
        DynamicKProblem {
            num_pixels: n,
            gt_classes: (0..cands.len() as u32).collect(),
            candidates: cands,
            cost,
            iou,
            top_q: DEFAULT_TOP_Q,
        }
    }

    #[test]
    fn dynamic_k_examples() {
        let r = dynamic_k_assign(&problem(
            1,
            vec![vec![0]],
            vec![vec![-0.9]],
            vec![vec![0.9]],
        ))
        .unwrap();
        assert_eq!(r.k_per_gt, vec![1]);
        assert_eq!(r.matched_gt, vec![Some(0)]);

        let n = 30;
        let cost: Vec<Vec<f64>> = (0..n).map(|i| vec![i as f64 * 0.01]).collect();
        let r = dynamic_k_assign(&problem(
            n,
            vec![(0..n).collect()],
            cost,
            vec![vec![0.1]; n],
        ))
        .unwrap();
        assert_eq!(r.k_per_gt, vec![2]);
        assert_eq!(r.positives_of(0), vec![0, 1]);

        // pixel 0 is claimed by both; gt 0 is cheaper
        let r = dynamic_k_assign(&problem(
            1,
            vec![vec![0], vec![0]],
            vec![vec![-0.9, -0.1]],
            vec![vec![0.9, 0.9]],
        ))
        .unwrap();
        assert_eq!(r.matched_gt, vec![Some(0)]);
        assert!(r.positives_of(1).is_empty());

        let r = dynamic_k_assign(&problem(
            2,
            vec![vec![], vec![1]],
            vec![vec![0.0; 2]; 2],
            vec![vec![0.5; 2]; 2],
        ))
        .unwrap();
        assert_eq!(r.gts_without_candidates, vec![0]);
        assert_eq!(r.k_per_gt, vec![0, 1]);
    }

    #[test]
    fn dynamic_k_floor_and_rounding() {
        assert_eq!(dynamic_k(&[0.1, 0.1], 20), 1);
        assert_eq!(dynamic_k(&[0.9; 40], 20), 18);
        assert_eq!(dynamic_k(&[1.0; 3], 20), 3);
        assert_eq!(dynamic_k(&[], 20), 0);
    }

    fn pixel_pred(
        probs: Vec<f64>,
        reg: RegressionTarget,
        iou: f64,
        a: PixelAnchor,
    ) -> PixelPrediction {
        PixelPrediction {
            class_probs: probs,
            regression: vec![reg; 2],
            iou: vec![iou; 2],
            anchor: a,
        }
    }

    #[test]
    fn loss_examples() {
        let a = anchor([5.0, 1.0, 0.0]);
        let gt = Box3D::new([5.5, 1.0, 0.2], [1.5, 1.2, 3.0], 0.4)
            .with_class(1)
            .with_velocity([1.0, 0.0]);
        let t = encode_targets(&gt, &a).unwrap();
        let assign = AssignmentResult {
            labels: vec![Some(1), None],
            matched_gt: vec![Some(0), None],
            k_per_gt: vec![1],
            gts_without_candidates: vec![],
        };
        let preds = vec![
            pixel_pred(vec![0.0, 1.0, 0.0], t, 1.0, a),
            pixel_pred(vec![0.0, 0.0, 1.0], t, 1.0, a),
        ];
        let r = losses(&preds, &assign, &[gt], &LossWeights::default()).unwrap();
        assert_abs_diff_eq!(r.cls_ce, 0.0, epsilon = 1e-9);
        assert_abs_diff_eq!(r.box_l1, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(r.box_iou_loss, 0.0, epsilon = 1e-9);
        assert_abs_diff_eq!(r.iou_bce, 0.0, epsilon = 1e-9);

        let uniform = vec![pixel_pred(vec![1.0 / 3.0; 3], t, 0.5, a); 2];
        let r = losses(&uniform, &assign, &[gt], &LossWeights::default()).unwrap();
        assert_abs_diff_eq!(r.cls_ce, 3f64.ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(binary_cross_entropy(0.5, 0.5), LN_2, epsilon = 1e-15);

        let none = AssignmentResult {
            labels: vec![None; 2],
            matched_gt: vec![None; 2],
            k_per_gt: vec![0],
            gts_without_candidates: vec![0],
        };
        let r = losses(&preds, &none, &[gt], &LossWeights::default()).unwrap();
        assert!(r.no_positives && r.box_l1 == 0.0 && r.iou_bce == 0.0);
    }

    #[test]
    fn box_losses_vanish_along_convergent_sequence() {
        let a = anchor([12.0, -3.0, 0.1]);
        let gt = Box3D::new([12.4, -2.5, 0.3], [1.8, 1.5, 4.2], -0.9).with_class(0);
        let t = encode_targets(&gt, &a).unwrap().to_array();
        let assign = AssignmentResult {
            labels: vec![Some(0)],
            matched_gt: vec![Some(0)],
            k_per_gt: vec![1],
            gts_without_candidates: vec![],
        };
        let mut prev = (f64::INFINITY, f64::INFINITY);
        for step in 0..8 {
            let eps = 0.5f64.powi(step);
            let mut p = t;
            for (k, v) in p.iter_mut().enumerate() {
                *v += eps * if k % 2 == 0 { 0.3 } else { -0.2 };
            }
            let pred = pixel_pred(vec![1.0, 0.0], RegressionTarget::from_array(p), 1.0, a);
            let r = losses(&[pred], &assign, &[gt], &LossWeights::default()).unwrap();
            assert!(r.box_l1 >= 0.0 && r.box_iou_loss >= 0.0 && r.iou_bce >= 0.0);
            assert!(r.box_l1 < prev.0 && r.box_iou_loss < prev.1);
            prev = (r.box_l1, r.box_iou_loss);
        }
        assert!(prev.0 < 1e-2 && prev.1 < 1e-2);
    }

    /// Brute-force assigner: K from a full sort of the IoUs, candidate rank
    /// by counting cheaper competitors, conflicts by scanning every claim.
    fn oracle_assign(p: &DynamicKProblem) -> (Vec<Option<usize>>, Vec<usize>) {
        let mut k = vec![0; p.candidates.len()];
        let mut claims = vec![Vec::new(); p.num_pixels];
        for (j, c) in p.candidates.iter().enumerate() {
            if c.is_empty() {
                continue;
            }
            let mut ious: Vec<f64> = c.iter().map(|&i| p.iou[i][j]).collect();
            ious.sort_by(|a, b| b.partial_cmp(a).unwrap());
            let s: f64 = ious.iter().take(p.top_q).sum();
            k[j] = ((s.round() as usize).max(1)).min(c.len());
            for &i in c {
                let rank = c
                    .iter()
                    .filter(|&&o| {
                        p.cost[o][j] < p.cost[i][j] || (p.cost[o][j] == p.cost[i][j] && o < i)
                    })
                    .count();
                if rank < k[j] {
                    claims[i].push(j);
                }
            }
        }
        let matched = claims
            .iter()
            .enumerate()
            .map(|(i, js)| {
                let mut best: Option<usize> = None;
                for &j in js {
                    best = match best {
                        Some(b)
                            if p.cost[i][b] < p.cost[i][j]
                                || (p.cost[i][b] == p.cost[i][j] && b < j) =>
                        {
                            Some(b)
                        }
                        _ => Some(j),
                    };
                }
                best
            })
            .collect();
        (matched, k)
    }

    #[test]
    fn dynamic_k_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(91);
        for _ in 0..300 {
            let n_gt = rng.gen_range(1..=5);
            let n = rng.gen_range(1..=40);
            let candidates: Vec<Vec<usize>> = (0..n_gt)
                .map(|_| (0..n).filter(|_| rng.gen_bool(0.4)).collect())
                .collect();
            // coarse costs so ties occur
            let cost = (0..n)
                .map(|_| {
                    (0..n_gt)
                        .map(|_| rng.gen_range(-10..10) as f64 / 10.0)
                        .collect()
                })
                .collect();
            let iou = (0..n)
                .map(|_| (0..n_gt).map(|_| rng.gen_range(0.0..1.0)).collect())
                .collect();
            let p = problem(n, candidates, cost, iou);
            let r = dynamic_k_assign(&p).unwrap();
            let (matched, k) = oracle_assign(&p);
            assert_eq!(r.matched_gt, matched);
            assert_eq!(r.k_per_gt, k);
            for (px, j) in r.positives() {
                assert!(p.candidates[j].contains(&px));
                assert_eq!(r.labels[px], Some(j as u32));
            }
            for j in 0..n_gt {
                assert!(r.positives_of(j).len() <= r.k_per_gt[j]);
            }
        }
    }

    proptest! {
        #[test]
        fn decode_inverts_encode(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = [rng.gen_range(-60.0..60.0), rng.gen_range(-60.0..60.0), rng.gen_range(-3.0..3.0)];
            let a = anchor(p);
            let gt = Box3D::new(
                [p[0] + rng.gen_range(-3.0..3.0), p[1] + rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)],
                [rng.gen_range(0.2..4.0), rng.gen_range(0.2..4.0), rng.gen_range(0.2..12.0)],
                rng.gen_range(-PI..PI),
            ).with_velocity([rng.gen_range(-20.0..20.0), rng.gen_range(-20.0..20.0)]);
            let t = encode_targets(&gt, &a).unwrap();
            prop_assert!((t.yaw_sin_cos[0].hypot(t.yaw_sin_cos[1]) - 1.0).abs() < 1e-6);
            let b = decode_box(&t, &a);
            for k in 0..3 {
                prop_assert!((b.center[k] - gt.center[k]).abs() < 1e-6);
                prop_assert!((b.dims[k] - gt.dims[k]).abs() < 1e-6);
            }
            prop_assert!(normalize_angle(b.yaw - gt.yaw).abs() < 1e-6);
            prop_assert_eq!(b.velocity, gt.velocity);
        }
    }
}
