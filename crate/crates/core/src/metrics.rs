//! nuScenes-style detection metrics: greedy BEV center-distance matching,
//! floored 101-point AP, true-positive errors and NDS without the
//! attribute term.

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::boxes::{center_distance_bev, score_order, Box3D};
use crate::error::{Error, Result};
use crate::lidar_geom::normalize_angle;

const RECALL_POINTS: usize = 101;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub distance_thresholds: Vec<f64>,
    pub tp_threshold: f64,
    pub recall_floor: f64,
    pub precision_floor: f64,
    /// Classes to evaluate; empty means every class present in the gts.
    pub classes: Vec<u32>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            distance_thresholds: vec![0.5, 1.0, 2.0, 4.0],
            tp_threshold: 2.0,
            recall_floor: 0.1,
            precision_floor: 0.1,
            classes: Vec::new(),
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        let t = &self.distance_thresholds;
        if t.is_empty()
            || t.iter().any(|&d| d.is_nan() || d <= 0.0)
            || t.windows(2).any(|w| w[0] >= w[1])
        {
            return Err(Error::InvalidArgument(format!(
                "distance thresholds must be positive and ascending, got {t:?}"
            )));
        }
        if self.tp_threshold.is_nan() || self.tp_threshold <= 0.0 {
            return Err(Error::InvalidArgument(
                "tp threshold must be positive".into(),
            ));
        }
        for (name, v) in [
            ("recall", self.recall_floor),
            ("precision", self.precision_floor),
        ] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::InvalidArgument(format!(
                    "{name} floor {v} outside [0, 1)"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    /// `(det, gt)` pairs in detection score order.
    pub pairs: Vec<(usize, usize)>,
    pub unmatched_dets: Vec<usize>,
    pub unmatched_gts: Vec<usize>,
}

/// Greedy one-to-one matching: each detection in score order takes the
/// nearest unmatched gt of its class within `d` metres (ties by gt index).
pub fn match_detections(dets: &[Box3D], gts: &[Box3D], d: f64) -> MatchResult {
    let mut taken = vec![false; gts.len()];
    let mut pairs = Vec::new();
    let mut unmatched_dets = Vec::new();
    for i in score_order(dets) {
        let best = gts
            .iter()
            .enumerate()
            .filter(|(j, g)| !taken[*j] && g.class_id == dets[i].class_id)
            .map(|(j, g)| (center_distance_bev(&dets[i], g), j))
            .filter(|&(dist, _)| dist <= d)
            .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        match best {
            Some((_, j)) => {
                taken[j] = true;
                pairs.push((i, j));
            }
            None => unmatched_dets.push(i),
        }
    }
    MatchResult {
        pairs,
        unmatched_dets,
        unmatched_gts: (0..gts.len()).filter(|&j| !taken[j]).collect(),
    }
}

/// One scene's detections and ground truth. Matching never crosses
/// samples.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalSample {
    pub dets: Vec<Box3D>,
    pub gts: Vec<Box3D>,
}

/// Precision interpolated at recall `0, 0.01, ..., 1`. Below the first
/// recall value the first precision is used, beyond the last recall the
/// precision is 0 and among repeated recall values the last one wins.
pub fn interpolated_precision(recall: &[f64], precision: &[f64]) -> Vec<f64> {
    (0..RECALL_POINTS)
        .map(|k| {
            let r = k as f64 / (RECALL_POINTS - 1) as f64;
            let Some(&last) = recall.last() else {
                return 0.0;
            };
            if r > last {
                return 0.0;
            }
            if r <= recall[0] {
                // leftmost plateau: take the last entry sharing recall[0] when exact
                return if r == recall[0] {
                    precision[recall.iter().rposition(|&x| x == r).unwrap_or(0)]
                } else {
                    precision[0]
                };
            }
            let hi = recall.partition_point(|&x| x < r);
            if recall[hi] == r {
                let last_eq = recall.partition_point(|&x| x <= r) - 1;
                return precision[last_eq];
            }
            let (r0, r1) = (recall[hi - 1], recall[hi]);
            let (p0, p1) = (precision[hi - 1], precision[hi]);
            p0 + (p1 - p0) * (r - r0) / (r1 - r0)
        })
        .collect()
}

/// Floored AP from an interpolated precision curve.
pub fn floored_ap(interp: &[f64], recall_floor: f64, precision_floor: f64) -> f64 {
    let first = (100.0 * recall_floor).round() as usize + 1;
    let tail = &interp[first.min(interp.len())..];
    if tail.is_empty() {
        return 0.0;
    }
    let mean = tail
        .iter()
        .map(|&p| (p - precision_floor).max(0.0))
        .sum::<f64>()
        / tail.len() as f64;
    // summation rounding can push a perfect curve a few ulps above 1
    (mean / (1.0 - precision_floor)).min(1.0)
}

/// Per-detection TP flags in global score order for one class.
fn tp_flags(samples: &[EvalSample], class: u32, d: f64) -> (Vec<(f64, bool)>, usize) {
    let mut flags = Vec::new();
    let mut n_gt = 0;
    for (s, sample) in samples.iter().enumerate() {
        let dets: Vec<Box3D> = sample
            .dets
            .iter()
            .filter(|b| b.class_id == class)
            .copied()
            .collect();
        let gts: Vec<Box3D> = sample
            .gts
            .iter()
            .filter(|b| b.class_id == class)
            .copied()
            .collect();
        n_gt += gts.len();
        let m = match_detections(&dets, &gts, d);
        let mut tp = vec![false; dets.len()];
        for &(i, _) in &m.pairs {
            tp[i] = true;
        }
        for i in score_order(&dets) {
            flags.push((dets[i].score, s, i, tp[i]));
        }
    }
    flags.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    (
        flags.into_iter().map(|(sc, _, _, tp)| (sc, tp)).collect(),
        n_gt,
    )
}

/// AP of one class at one distance threshold; `None` when the class has no
/// ground truth.
pub fn average_precision(
    samples: &[EvalSample],
    class: u32,
    d: f64,
    cfg: &EvalConfig,
) -> Option<f64> {
    let (flags, n_gt) = tp_flags(samples, class, d);
    if n_gt == 0 {
        return None;
    }
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut recall = Vec::with_capacity(flags.len());
    let mut precision = Vec::with_capacity(flags.len());
    for &(_, is_tp) in &flags {
        if is_tp {
            tp += 1;
        } else {
            fp += 1;
        }
        recall.push(tp as f64 / n_gt as f64);
        precision.push(tp as f64 / (tp + fp) as f64);
    }
    Some(floored_ap(
        &interpolated_precision(&recall, &precision),
        cfg.recall_floor,
        cfg.precision_floor,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TpErrors {
    pub ate: f64,
    pub ase: f64,
    pub aoe: f64,
    pub ave: f64,
}

impl TpErrors {
    pub const WORST: TpErrors = TpErrors {
        ate: 1.0,
        ase: 1.0,
        aoe: 1.0,
        ave: 1.0,
    };

    pub fn as_array(&self) -> [f64; 4] {
        [self.ate, self.ase, self.aoe, self.ave]
    }
}

/// `1 − IoU` of the two boxes after aligning centers and yaw.
pub fn scale_error(det: &Box3D, gt: &Box3D) -> f64 {
    let inter: f64 = (0..3).map(|k| det.dims[k].min(gt.dims[k])).product();
    let union = det.volume() + gt.volume() - inter;
    if union <= 0.0 {
        return 1.0;
    }
    1.0 - inter / union
}

/// Smallest absolute yaw difference, in `[0, π]`.
pub fn orientation_error(det: &Box3D, gt: &Box3D) -> f64 {
    normalize_angle(det.yaw - gt.yaw).abs().min(PI)
}

pub fn velocity_error(det: &Box3D, gt: &Box3D) -> f64 {
    (det.velocity[0] - gt.velocity[0]).hypot(det.velocity[1] - gt.velocity[1])
}

/// Mean errors over matched `(det, gt)` pairs; every error is 1 when
/// there are none.
pub fn tp_errors(pairs: &[(Box3D, Box3D)]) -> TpErrors {
    if pairs.is_empty() {
        return TpErrors::WORST;
    }
    let n = pairs.len() as f64;
    let mean =
        |f: &dyn Fn(&Box3D, &Box3D) -> f64| pairs.iter().map(|(d, g)| f(d, g)).sum::<f64>() / n;
    TpErrors {
        ate: mean(&center_distance_bev),
        ase: mean(&scale_error),
        aoe: mean(&orientation_error),
        ave: mean(&velocity_error),
    }
}

/// Matched pairs of one class across all samples at `d`.
pub fn matched_pairs(samples: &[EvalSample], class: u32, d: f64) -> Vec<(Box3D, Box3D)> {
    let mut out = Vec::new();
    for s in samples {
        let dets: Vec<Box3D> = s
            .dets
            .iter()
            .filter(|b| b.class_id == class)
            .copied()
            .collect();
        let gts: Vec<Box3D> = s
            .gts
            .iter()
            .filter(|b| b.class_id == class)
            .copied()
            .collect();
        out.extend(
            match_detections(&dets, &gts, d)
                .pairs
                .into_iter()
                .map(|(i, j)| (dets[i], gts[j])),
        );
    }
    out
}

/// `(5·mAP + Σ (1 − min(1, e))) / 9` over ATE, ASE, AOE and AVE.
pub fn nds(map: f64, errors: &TpErrors) -> f64 {
    let tp: f64 = errors.as_array().iter().map(|&e| 1.0 - e.min(1.0)).sum();
    (5.0 * map + tp) / 9.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub class: u32,
    pub num_gts: usize,
    pub num_dets: usize,
    pub ap_per_threshold: Vec<f64>,
    pub ap: f64,
    pub errors: TpErrors,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub distance_thresholds: Vec<f64>,
    pub tp_threshold: f64,
    pub classes: Vec<ClassReport>,
    pub map: f64,
    pub errors: TpErrors,
    pub nds: f64,
    pub note: String,
}

pub fn evaluate(samples: &[EvalSample], cfg: &EvalConfig) -> Result<EvalReport> {
    cfg.validate()?;
    let classes: Vec<u32> = if cfg.classes.is_empty() {
        samples
            .iter()
            .flat_map(|s| s.gts.iter().map(|g| g.class_id))
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    } else {
        cfg.classes.clone()
    };
    let reports: Vec<Option<ClassReport>> = crate::parallel::map(&classes, |&c| {
        let aps: Option<Vec<f64>> = cfg
            .distance_thresholds
            .iter()
            .map(|&d| average_precision(samples, c, d, cfg))
            .collect();
        let aps = aps?;
        Some(ClassReport {
            class: c,
            num_gts: samples
                .iter()
                .map(|s| s.gts.iter().filter(|g| g.class_id == c).count())
                .sum(),
            num_dets: samples
                .iter()
                .map(|s| s.dets.iter().filter(|g| g.class_id == c).count())
                .sum(),
            ap: aps.iter().sum::<f64>() / aps.len() as f64,
            ap_per_threshold: aps,
            errors: tp_errors(&matched_pairs(samples, c, cfg.tp_threshold)),
        })
    });
    let reports: Vec<ClassReport> = reports.into_iter().flatten().collect();
    let (map, errors) = if reports.is_empty() {
        (0.0, TpErrors::WORST)
    } else {
        let n = reports.len() as f64;
        let m = |f: fn(&TpErrors) -> f64| reports.iter().map(|r| f(&r.errors)).sum::<f64>() / n;
        (
            reports.iter().map(|r| r.ap).sum::<f64>() / n,
            TpErrors {
                ate: m(|e| e.ate),
                ase: m(|e| e.ase),
                aoe: m(|e| e.aoe),
                ave: m(|e| e.ave),
            },
        )
    };
    Ok(EvalReport {
        distance_thresholds: cfg.distance_thresholds.clone(),
        tp_threshold: cfg.tp_threshold,
        nds: nds(map, &errors),
        classes: reports,
        map,
        errors,
        note: "NDS omits the attribute error; remaining weights renormalized to 9".into(),
    })
}

impl EvalReport {
    /// Plain-text summary table, one row per class plus the overall line.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = write!(s, "{:<8}{:>7}", "class", "AP");
        for d in &self.distance_thresholds {
            let _ = write!(s, "{:>9}", format!("AP@{d}"));
        }
        let _ = writeln!(s, "{:>8}{:>8}{:>8}{:>8}", "ATE", "ASE", "AOE", "AVE");
        for c in &self.classes {
            let _ = write!(s, "{:<8}{:>7.4}", c.class, c.ap);
            for a in &c.ap_per_threshold {
                let _ = write!(s, "{a:>9.4}");
            }
            let e = c.errors;
            let _ = writeln!(
                s,
                "{:>8.4}{:>8.4}{:>8.4}{:>8.4}",
                e.ate, e.ase, e.aoe, e.ave
            );
        }
        let e = self.errors;
        let _ = writeln!(
            s,
            "mAP {:.4}  NDS {:.4}  mATE {:.4}  mASE {:.4}  mAOE {:.4}  mAVE {:.4}",
            self.map, self.nds, e.ate, e.ase, e.aoe, e.ave
        );
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn b(x: f64, y: f64, score: f64) -> Box3D {
        Box3D::new([x, y, 0.0], [1.0, 1.0, 1.0], 0.0).with_score(score)
    }

    fn one(dets: Vec<Box3D>, gts: Vec<Box3D>) -> Vec<EvalSample> {
        vec![EvalSample { dets, gts }]
    }

    #[test]
    fn match_examples() {
        let gts = vec![b(0.0, 0.0, 1.0), b(10.0, 0.0, 1.0)];
        let m = match_detections(&gts, &gts, 0.5);
        assert_eq!(m.pairs.len(), 2);
        let m = match_detections(&[b(5.0, 0.0, 0.9)], &[b(0.0, 0.0, 1.0)], 4.0);
        assert_eq!(m.unmatched_dets, vec![0]);
        let m = match_detections(
            &[b(0.3, 0.0, 0.8), b(0.1, 0.0, 0.9)],
            &[b(0.0, 0.0, 1.0)],
            1.0,
        );
        assert_eq!(m.pairs, vec![(1, 0)]);
        assert_eq!(m.unmatched_dets, vec![0]);
        let other = b(0.0, 0.0, 1.0).with_class(4);
        assert!(match_detections(&[b(0.0, 0.0, 0.9)], &[other], 1.0)
            .pairs
            .is_empty());
    }

    #[test]
    fn ap_examples() {
        let cfg = EvalConfig::default();
        let gts = vec![b(0.0, 0.0, 1.0), b(20.0, 0.0, 1.0)];
        assert_abs_diff_eq!(
            average_precision(&one(gts.clone(), gts.clone()), 0, 0.5, &cfg).unwrap(),
            1.0,
            epsilon = 1e-12
        );
        assert_eq!(
            average_precision(&one(vec![], gts.clone()), 0, 0.5, &cfg),
            Some(0.0)
        );
        assert_eq!(average_precision(&one(vec![], vec![]), 0, 0.5, &cfg), None);
        // recall 0.5 at precision 1, then a false positive at the same recall
        let ap = average_precision(
            &one(vec![b(0.0, 0.0, 0.9), b(50.0, 0.0, 0.8)], gts),
            0,
            2.0,
            &cfg,
        )
        .unwrap();
        assert_abs_diff_eq!(ap, 35.5 / 81.0, epsilon = 1e-9);
    }

    #[test]
    fn interpolation_conventions() {
        let p = interpolated_precision(&[0.5, 0.5], &[1.0, 0.5]);
        assert_eq!(p[0], 1.0);
        assert_eq!(p[49], 1.0);
        assert_eq!(p[50], 0.5);
        assert_eq!(p[51], 0.0);
        let p = interpolated_precision(&[0.2, 0.6], &[1.0, 0.5]);
        assert_abs_diff_eq!(p[40], 0.75, epsilon = 1e-12);
        assert!(interpolated_precision(&[], &[]).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn tp_error_examples() {
        let g = Box3D::new([0.0; 3], [1.0, 1.0, 1.0], 0.3);
        assert_eq!(tp_errors(&[(g, g)]).as_array(), [0.0; 4]);
        let flipped = Box3D {
            yaw: normalize_angle(0.3 + PI),
            ..g
        };
        assert_abs_diff_eq!(orientation_error(&flipped, &g), PI, epsilon = 1e-12);
        let big = Box3D {
            dims: [2.0, 2.0, 2.0],
            ..g
        };
        assert_abs_diff_eq!(scale_error(&big, &g), 0.875, epsilon = 1e-12);
        assert_eq!(tp_errors(&[]), TpErrors::WORST);
    }

    #[test]
    fn nds_examples() {
        assert_eq!(
            nds(
                1.0,
                &TpErrors {
                    ate: 0.0,
                    ase: 0.0,
                    aoe: 0.0,
                    ave: 0.0
                }
            ),
            1.0
        );
        assert_eq!(
            nds(
                0.0,
                &TpErrors {
                    ate: 1.0,
                    ase: 2.0,
                    aoe: 3.0,
                    ave: 1.0
                }
            ),
            0.0
        );
        let e = TpErrors {
            ate: 0.3,
            ase: 0.25,
            aoe: 0.4,
            ave: 1.5,
        };
        let want = (5.0 * 0.5708 + 0.7 + 0.75 + 0.6 + 0.0) / 9.0;
        assert_abs_diff_eq!(nds(0.5708, &e), want, epsilon = 1e-12);
    }

    #[test]
    fn self_evaluation_is_perfect() {
        let gts: Vec<Box3D> = (0..6)
            .map(|i| {
                b(i as f64 * 7.0, 1.0, 1.0)
                    .with_class(i % 3)
                    .with_velocity([1.0, -0.5])
            })
            .collect();
        let r = evaluate(&one(gts.clone(), gts), &EvalConfig::default()).unwrap();
        assert_eq!(r.classes.len(), 3);
        assert_abs_diff_eq!(r.map, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(r.nds, 1.0, epsilon = 1e-12);
        assert!(r.to_table().contains("NDS 1.0000"));
    }

    #[test]
    fn ap_is_monotone_in_threshold() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = EvalConfig::default();
        for _ in 0..30 {
            let gts: Vec<Box3D> = (0..rng.gen_range(1..10))
                .map(|_| b(rng.gen_range(-40.0..40.0), rng.gen_range(-40.0..40.0), 1.0))
                .collect();
            let dets: Vec<Box3D> = gts
                .iter()
                .map(|g| {
                    b(
                        g.center[0] + rng.gen_range(-3.0..3.0),
                        g.center[1] + rng.gen_range(-3.0..3.0),
                        rng.gen_range(0.0..1.0),
                    )
                })
                .collect();
            let s = one(dets, gts);
            let aps: Vec<f64> = cfg
                .distance_thresholds
                .iter()
                .map(|&d| average_precision(&s, 0, d, &cfg).unwrap())
                .collect();
            assert!(aps.windows(2).all(|w| w[0] <= w[1] + 1e-12), "{aps:?}");
        }
    }

    #[test]
    fn config_validation() {
        let bad = EvalConfig {
            distance_thresholds: vec![2.0, 1.0],
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        assert!(evaluate(&[], &bad).is_err());
        let r = evaluate(&[], &EvalConfig::default()).unwrap();
        assert_eq!((r.map, r.nds), (0.0, 0.0));
    }
}
