//! Forward-only range-view detector: modality-wise multi-dilation stem, a
//! residual backbone without early downsampling, an FPN producing six
//! levels (strides 1..32) and untied per-level detection heads.
//!
//! There is no normalization layer; every conv carries an explicit bias and
//! a ReLU follows every conv except the final prediction convs.

mod conv;

pub use conv::{conv2d, ConvLayer, FeatureMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mrv::{rearrange_by_type, RangeImage, CHANNELS_PER_ROUND};
use crate::targets::RegressionTarget;

pub const FPN_LEVELS: usize = 6;
/// Stride of each pyramid level P2..P7 relative to the stem output.
pub const LEVEL_STRIDES: [usize; FPN_LEVELS] = [1, 2, 4, 8, 16, 32];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetConfig {
    /// MRV rounds in the input image (9 channels each).
    pub input_rounds: usize,
    pub stem_convs_per_branch: usize,
    pub stem_dilations: Vec<usize>,
    /// Feature width per channel type inside the stem.
    pub stem_type_width: usize,
    /// Width after the 1x1 merge conv.
    pub stem_out_width: usize,
    pub stage_blocks: [usize; 4],
    pub stage_widths: [usize; 4],
    /// Bottleneck inner width = stage width / divisor.
    pub bottleneck_divisor: usize,
    pub fpn_width: usize,
    pub head_convs: usize,
    pub head_width: usize,
    pub num_classes: usize,
    /// One IoU estimate per class instead of a single shared one.
    pub class_specific_iou: bool,
    pub weight_seed: u64,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            input_rounds: 5,
            stem_convs_per_branch: 2,
            stem_dilations: vec![1, 3, 6],
            stem_type_width: 32,
            stem_out_width: 64,
            stage_blocks: [4, 4, 1, 1],
            stage_widths: [256, 512, 512, 512],
            bottleneck_divisor: 4,
            fpn_width: 128,
            head_convs: 4,
            head_width: 64,
            num_classes: 10,
            class_specific_iou: true,
            weight_seed: 0,
        }
    }
}

impl NetConfig {
    /// Small configuration for tests and quick runs.
    pub fn toy(input_rounds: usize, num_classes: usize) -> Self {
        NetConfig {
            input_rounds,
            stem_convs_per_branch: 2,
            stem_dilations: vec![1, 3, 6],
            stem_type_width: 2,
            stem_out_width: 8,
            stage_blocks: [1, 1, 1, 1],
            stage_widths: [8, 8, 8, 8],
            bottleneck_divisor: 4,
            fpn_width: 8,
            head_convs: 1,
            head_width: 8,
            num_classes,
            class_specific_iou: true,
            weight_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.input_rounds,
            self.stem_convs_per_branch,
            self.stem_type_width,
            self.stem_out_width,
            self.bottleneck_divisor,
            self.fpn_width,
            self.head_width,
            self.num_classes,
        ];
        if positive.contains(&0)
            || self.stem_dilations.is_empty()
            || self.stem_dilations.contains(&0)
            || self.stage_blocks.contains(&0)
            || self.stage_widths.contains(&0)
        {
            return Err(Error::InvalidArgument(
                "network config values must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn input_channels(&self) -> usize {
        self.input_rounds * CHANNELS_PER_ROUND
    }

    pub fn iou_channels(&self) -> usize {
        if self.class_specific_iou {
            self.num_classes
        } else {
            1
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bottleneck {
    pub reduce: ConvLayer,
    pub spatial: ConvLayer,
    pub expand: ConvLayer,
    pub shortcut: Option<ConvLayer>,
}

impl Bottleneck {
    fn zeros(in_ch: usize, out_ch: usize, stride: usize, divisor: usize) -> Self {
        let mid = (out_ch / divisor).max(1);
        Bottleneck {
            reduce: ConvLayer::zeros(in_ch, mid, 1, 1, 1, 1, 0),
            spatial: ConvLayer::zeros(mid, mid, 3, stride, 1, 1, 1),
            expand: ConvLayer::zeros(mid, out_ch, 1, 1, 1, 1, 0),
            shortcut: (in_ch != out_ch || stride != 1)
                .then(|| ConvLayer::zeros(in_ch, out_ch, 1, stride, 1, 1, 0)),
        }
    }

    fn forward(&self, x: &FeatureMap) -> Result<FeatureMap> {
        let h = conv2d(x, &self.reduce)?.relu();
        let h = conv2d(&h, &self.spatial)?.relu();
        let mut out = conv2d(&h, &self.expand)?;
        match &self.shortcut {
            Some(s) => out.add_assign(&conv2d(x, s)?)?,
            None => out.add_assign(x)?,
        }
        Ok(out.relu())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FpnWeights {
    pub lateral: Vec<ConvLayer>,
    pub output: Vec<ConvLayer>,
    pub p6: ConvLayer,
    pub p7: ConvLayer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadWeights {
    pub cls_tower: Vec<ConvLayer>,
    pub cls_out: ConvLayer,
    pub reg_tower: Vec<ConvLayer>,
    pub offsets: ConvLayer,
    pub sizes: ConvLayer,
    pub yaw: ConvLayer,
    pub velocity: ConvLayer,
    pub iou: ConvLayer,
}

impl HeadWeights {
    fn zeros(cfg: &NetConfig) -> Self {
        let tower = |n: usize| -> Vec<ConvLayer> {
            (0..n)
                .map(|i| {
                    let input = if i == 0 {
                        cfg.fpn_width
                    } else {
                        cfg.head_width
                    };
                    ConvLayer::same(input, cfg.head_width, 3, 1, 1)
                })
                .collect()
        };
        let tower_out = if cfg.head_convs == 0 {
            cfg.fpn_width
        } else {
            cfg.head_width
        };
        let c = cfg.num_classes;
        let pred = |out: usize| ConvLayer::same(tower_out, out, 3, 1, 1);
        HeadWeights {
            cls_tower: tower(cfg.head_convs),
            cls_out: pred(c + 1),
            reg_tower: tower(cfg.head_convs),
            offsets: pred(3 * c),
            sizes: pred(3 * c),
            yaw: pred(2 * c),
            velocity: pred(2 * c),
            iou: pred(cfg.iou_channels()),
        }
    }
}

/// All parameters of the network, laid out to mirror the architecture.
#[derive(Debug, Clone, PartialEq)]
pub struct NetWeights {
    pub config: NetConfig,
    /// One list of grouped convs per stem dilation.
    pub stem_branches: Vec<Vec<ConvLayer>>,
    pub stem_merge: ConvLayer,
    pub stages: Vec<Vec<Bottleneck>>,
    pub fpn: FpnWeights,
    /// Untied: one head per pyramid level.
    pub heads: Vec<HeadWeights>,
}

impl NetWeights {
    /// Zero weights and biases with the shapes implied by `cfg`.
    pub fn zeros(cfg: &NetConfig) -> Result<Self> {
        cfg.validate()?;
        let groups = CHANNELS_PER_ROUND;
        let type_feats = groups * cfg.stem_type_width;
        let stem_branches = cfg
            .stem_dilations
            .iter()
            .map(|&d| {
                (0..cfg.stem_convs_per_branch)
                    .map(|i| {
                        let input = if i == 0 {
                            cfg.input_channels()
                        } else {
                            type_feats
                        };
                        ConvLayer::same(input, type_feats, 3, d, groups)
                    })
                    .collect()
            })
            .collect();
        let stem_merge = ConvLayer::zeros(type_feats, cfg.stem_out_width, 1, 1, 1, 1, 0);
        let mut stages = Vec::with_capacity(4);
        let mut in_ch = cfg.stem_out_width;
        for (s, (&blocks, &width)) in cfg.stage_blocks.iter().zip(&cfg.stage_widths).enumerate() {
            let mut stage = Vec::with_capacity(blocks);
            for b in 0..blocks {
                let stride = if s > 0 && b == 0 { 2 } else { 1 };
                stage.push(Bottleneck::zeros(
                    in_ch,
                    width,
                    stride,
                    cfg.bottleneck_divisor,
                ));
                in_ch = width;
            }
            stages.push(stage);
        }
        let f = cfg.fpn_width;
        let fpn = FpnWeights {
            lateral: cfg
                .stage_widths
                .iter()
                .map(|&w| ConvLayer::zeros(w, f, 1, 1, 1, 1, 0))
                .collect(),
            output: (0..4).map(|_| ConvLayer::same(f, f, 3, 1, 1)).collect(),
            p6: ConvLayer::zeros(f, f, 3, 2, 1, 1, 1),
            p7: ConvLayer::zeros(f, f, 3, 2, 1, 1, 1),
        };
        let heads = (0..FPN_LEVELS).map(|_| HeadWeights::zeros(cfg)).collect();
        Ok(NetWeights {
            config: cfg.clone(),
            stem_branches,
            stem_merge,
            stages,
            fpn,
            heads,
        })
    }

    /// Every layer with a stable hierarchical name, in storage order.
    pub fn layers(&self) -> Vec<(String, &ConvLayer)> {
        let mut out: Vec<(String, &ConvLayer)> = Vec::new();
        for (b, branch) in self.stem_branches.iter().enumerate() {
            for (i, l) in branch.iter().enumerate() {
                out.push((format!("stem.branch{b}.conv{i}"), l));
            }
        }
        out.push(("stem.merge".into(), &self.stem_merge));
        for (s, stage) in self.stages.iter().enumerate() {
            for (b, blk) in stage.iter().enumerate() {
                let p = format!("stage{}.block{b}", s + 1);
                out.push((format!("{p}.reduce"), &blk.reduce));
                out.push((format!("{p}.spatial"), &blk.spatial));
                out.push((format!("{p}.expand"), &blk.expand));
                if let Some(sc) = &blk.shortcut {
                    out.push((format!("{p}.shortcut"), sc));
                }
            }
        }
        for (i, l) in self.fpn.lateral.iter().enumerate() {
            out.push((format!("fpn.lateral{}", i + 2), l));
        }
        for (i, l) in self.fpn.output.iter().enumerate() {
            out.push((format!("fpn.output{}", i + 2), l));
        }
        out.push(("fpn.p6".into(), &self.fpn.p6));
        out.push(("fpn.p7".into(), &self.fpn.p7));
        for (lvl, h) in self.heads.iter().enumerate() {
            let p = format!("head.p{}", lvl + 2);
            for (i, l) in h.cls_tower.iter().enumerate() {
                out.push((format!("{p}.cls_tower{i}"), l));
            }
            out.push((format!("{p}.cls_out"), &h.cls_out));
            for (i, l) in h.reg_tower.iter().enumerate() {
                out.push((format!("{p}.reg_tower{i}"), l));
            }
            out.push((format!("{p}.offsets"), &h.offsets));
            out.push((format!("{p}.sizes"), &h.sizes));
            out.push((format!("{p}.yaw"), &h.yaw));
            out.push((format!("{p}.velocity"), &h.velocity));
            out.push((format!("{p}.iou"), &h.iou));
        }
        out
    }

    /// Mutable counterpart of [`NetWeights::layers`], same order.
    pub fn layers_mut(&mut self) -> Vec<&mut ConvLayer> {
        let mut out: Vec<&mut ConvLayer> = Vec::new();
        for branch in &mut self.stem_branches {
            out.extend(branch.iter_mut());
        }
        out.push(&mut self.stem_merge);
        for stage in &mut self.stages {
            for blk in stage.iter_mut() {
                out.push(&mut blk.reduce);
                out.push(&mut blk.spatial);
                out.push(&mut blk.expand);
                if let Some(sc) = &mut blk.shortcut {
                    out.push(sc);
                }
            }
        }
        out.extend(self.fpn.lateral.iter_mut());
        out.extend(self.fpn.output.iter_mut());
        out.push(&mut self.fpn.p6);
        out.push(&mut self.fpn.p7);
        for h in &mut self.heads {
            out.extend(h.cls_tower.iter_mut());
            out.push(&mut h.cls_out);
            out.extend(h.reg_tower.iter_mut());
            out.push(&mut h.offsets);
            out.push(&mut h.sizes);
            out.push(&mut h.yaw);
            out.push(&mut h.velocity);
            out.push(&mut h.iou);
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.layers()
            .iter()
            .map(|(_, l)| l.weights.len() + l.bias.len())
            .sum()
    }
}

/// Seeded He-uniform initialization; the same seed gives identical bytes.
///
/// The last conv of every residual branch starts at zero so each block is
/// the identity at init, and head output layers start small with zero bias.
/// Without normalization layers this keeps untrained outputs in a range
/// where decoded boxes stay finite.
pub fn init_weights(cfg: &NetConfig, seed: u64) -> Result<NetWeights> {
    let mut w = NetWeights::zeros(cfg)?;
    let names: Vec<String> = w.layers().into_iter().map(|(n, _)| n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (name, layer) in names.iter().zip(w.layers_mut()) {
        let fan_in = (layer.in_channels / layer.groups) * layer.kernel.0 * layer.kernel.1;
        let is_output = name.starts_with("head.") && !name.contains("_tower");
        let bound = if is_output {
            0.01
        } else {
            (6.0 / fan_in as f64).sqrt() as f32
        };
        // draws happen for every layer so one layer's rule never shifts
        // another layer's values
        for v in &mut layer.weights {
            *v = rng.gen_range(-bound..bound);
        }
        for v in &mut layer.bias {
            *v = rng.gen_range(-0.1f32..0.1);
        }
        if name.ends_with(".expand") {
            layer.weights.fill(0.0);
        }
        if is_output || name.ends_with(".expand") {
            layer.bias.fill(0.0);
        }
    }
    Ok(w)
}

/// One stem branch on the type-grouped input: grouped convs with ReLU.
pub fn stem_branch(grouped: &FeatureMap, branch: &[ConvLayer]) -> Result<FeatureMap> {
    let mut x = grouped.clone();
    for l in branch {
        x = conv2d(&x, l)?.relu();
    }
    Ok(x)
}

/// Sum of all stem branches, before the merge conv. Channel block
/// `[t·W, (t+1)·W)` belongs to channel type `t`.
pub fn stem_branch_sum(grouped: &FeatureMap, w: &NetWeights) -> Result<FeatureMap> {
    if !grouped.channels.is_multiple_of(CHANNELS_PER_ROUND) {
        return Err(Error::Shape(format!(
            "stem input has {} channels, not a multiple of {CHANNELS_PER_ROUND}",
            grouped.channels
        )));
    }
    let mut sum: Option<FeatureMap> = None;
    for branch in &w.stem_branches {
        let out = stem_branch(grouped, branch)?;
        match &mut sum {
            Some(s) => s.add_assign(&out)?,
            None => sum = Some(out),
        }
    }
    sum.ok_or_else(|| Error::Shape("stem has no branches".into()))
}

/// Modality-wise stem on a range image.
pub fn modality_stem(img: &RangeImage, w: &NetWeights) -> Result<FeatureMap> {
    stem_from_grouped(&rearrange_by_type(img), w)
}

pub fn stem_from_grouped(grouped: &FeatureMap, w: &NetWeights) -> Result<FeatureMap> {
    let sum = stem_branch_sum(grouped, w)?;
    Ok(conv2d(&sum, &w.stem_merge)?.relu())
}

/// Residual stages; returns C2..C5 at strides 1, 2, 4, 8.
pub fn backbone_forward(stem_out: &FeatureMap, w: &NetWeights) -> Result<[FeatureMap; 4]> {
    let mut x = stem_out.clone();
    let mut outs: Vec<FeatureMap> = Vec::with_capacity(4);
    for stage in &w.stages {
        for blk in stage {
            x = blk.forward(&x)?;
        }
        outs.push(x.clone());
    }
    outs.try_into()
        .map_err(|_| Error::Shape("backbone must have four stages".into()))
}

/// Top-down FPN; returns P2..P7.
pub fn fpn_forward(c: &[FeatureMap; 4], w: &NetWeights) -> Result<Vec<FeatureMap>> {
    let mut inner: Vec<FeatureMap> = Vec::with_capacity(4);
    for (i, ci) in c.iter().enumerate() {
        inner.push(conv2d(ci, &w.fpn.lateral[i])?);
    }
    for i in (0..3).rev() {
        let up = inner[i + 1].upsample2_to(inner[i].height, inner[i].width);
        inner[i].add_assign(&up)?;
    }
    let mut p = Vec::with_capacity(FPN_LEVELS);
    for (i, m) in inner.iter().enumerate() {
        p.push(conv2d(m, &w.fpn.output[i])?);
    }
    let p6 = conv2d(&p[3], &w.fpn.p6)?;
    let p7 = conv2d(&p6.clone().relu(), &w.fpn.p7)?;
    p.push(p6);
    p.push(p7);
    Ok(p)
}

/// Head outputs of one pyramid level.
///
/// Class-specific channels are class-major: class `c` owns offsets
/// `[3c, 3c+3)`, sizes `[3c, 3c+3)`, yaw `[2c, 2c+2)` and velocity
/// `[2c, 2c+2)`. `class_probs` has `C + 1` channels with background last.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelPrediction {
    pub stride: usize,
    pub class_probs: FeatureMap,
    pub offsets: FeatureMap,
    pub sizes: FeatureMap,
    pub yaw: FeatureMap,
    pub velocity: FeatureMap,
    pub iou: FeatureMap,
}

impl LevelPrediction {
    pub fn height(&self) -> usize {
        self.class_probs.height
    }

    pub fn width(&self) -> usize {
        self.class_probs.width
    }

    pub fn num_classes(&self) -> usize {
        self.class_probs.channels - 1
    }

    pub fn class_prob(&self, class: usize, y: usize, x: usize) -> f32 {
        self.class_probs.get(class, y, x)
    }

    pub fn background_prob(&self, y: usize, x: usize) -> f32 {
        self.class_probs.get(self.num_classes(), y, x)
    }

    pub fn iou_estimate(&self, class: usize, y: usize, x: usize) -> f32 {
        let c = if self.iou.channels == 1 { 0 } else { class };
        self.iou.get(c, y, x)
    }

    pub fn regression(&self, class: usize, y: usize, x: usize) -> RegressionTarget {
        let g = |m: &FeatureMap, base: usize, k: usize| m.get(base + k, y, x) as f64;
        RegressionTarget {
            delta_center: [0, 1, 2].map(|k| g(&self.offsets, 3 * class, k)),
            log_dims: [0, 1, 2].map(|k| g(&self.sizes, 3 * class, k)),
            yaw_sin_cos: [0, 1].map(|k| g(&self.yaw, 2 * class, k)),
            velocity: [0, 1].map(|k| g(&self.velocity, 2 * class, k)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSet {
    pub num_classes: usize,
    pub levels: Vec<LevelPrediction>,
}

fn tower(x: &FeatureMap, layers: &[ConvLayer]) -> Result<FeatureMap> {
    let mut h = x.clone();
    for l in layers {
        h = conv2d(&h, l)?.relu();
    }
    Ok(h)
}

/// Runs the level's own head on each pyramid feature.
pub fn heads_forward(p: &[FeatureMap], w: &NetWeights) -> Result<PredictionSet> {
    if p.len() != w.heads.len() {
        return Err(Error::Shape(format!(
            "{} pyramid levels but {} heads",
            p.len(),
            w.heads.len()
        )));
    }
    let mut levels = Vec::with_capacity(p.len());
    for (lvl, (feat, head)) in p.iter().zip(&w.heads).enumerate() {
        let cls = tower(feat, &head.cls_tower)?;
        let mut class_probs = conv2d(&cls, &head.cls_out)?;
        class_probs.softmax_channels();
        let reg = tower(feat, &head.reg_tower)?;
        let mut iou = conv2d(&reg, &head.iou)?;
        iou.sigmoid_inplace();
        levels.push(LevelPrediction {
            stride: LEVEL_STRIDES.get(lvl).copied().unwrap_or(1 << lvl),
            class_probs,
            offsets: conv2d(&reg, &head.offsets)?,
            sizes: conv2d(&reg, &head.sizes)?,
            yaw: conv2d(&reg, &head.yaw)?,
            velocity: conv2d(&reg, &head.velocity)?,
            iou,
        });
    }
    Ok(PredictionSet {
        num_classes: w.config.num_classes,
        levels,
    })
}

/// Full forward pass from a range image.
pub fn forward(img: &RangeImage, w: &NetWeights) -> Result<PredictionSet> {
    if img.rounds != w.config.input_rounds {
        return Err(Error::Shape(format!(
            "image has {} rounds, network expects {}",
            img.rounds, w.config.input_rounds
        )));
    }
    let stem = modality_stem(img, w)?;
    let c = backbone_forward(&stem, w)?;
    let p = fpn_forward(&c, w)?;
    heads_forward(&p, w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lidar_geom::LidarSpec;
    use crate::mrv::Channel;
    use rand::Rng;

    fn random_image(rounds: usize, m: usize, n: usize, seed: u64) -> RangeImage {
        let spec = LidarSpec::evenly_spaced(m, n, -10.0, 10.0).unwrap();
        let mut img = RangeImage::empty(&spec, rounds);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        img.data
            .iter_mut()
            .for_each(|v| *v = rng.gen_range(-1.0..1.0));
        img
    }

    #[test]
    fn init_is_deterministic() {
        let cfg = NetConfig::toy(1, 3);
        let a = init_weights(&cfg, 7).unwrap();
        assert_eq!(a, init_weights(&cfg, 7).unwrap());
        assert_ne!(a, init_weights(&cfg, 8).unwrap());
        for (name, l) in a.layers() {
            assert_eq!(l.weights.len(), l.weight_count(), "{name}");
            assert_eq!(l.bias.len(), l.out_channels, "{name}");
            l.check_buffers().unwrap();
        }
        assert_eq!(a.layers().len(), a.clone().layers_mut().len());
    }

    #[test]
    fn stem_zero_and_linearity() {
        let mut cfg = NetConfig::toy(2, 2);
        cfg.stem_dilations = vec![1, 1, 1];
        let zeros = NetWeights::zeros(&cfg).unwrap();
        let img = random_image(2, 4, 8, 1);
        let out = modality_stem(&img, &zeros).unwrap();
        assert!(out.data.iter().all(|&v| v == 0.0));
        assert_eq!(out.channels, cfg.stem_out_width);

        let mut w = init_weights(&cfg, 3).unwrap();
        for l in w.layers_mut() {
            l.bias.fill(0.0);
        }
        let first = w.stem_branches[0].clone();
        for b in &mut w.stem_branches {
            *b = first.clone();
        }
        let grouped = rearrange_by_type(&img);
        let sum = stem_branch_sum(&grouped, &w).unwrap();
        let single = stem_branch(&grouped, &first).unwrap();
        for (s, x) in sum.data.iter().zip(&single.data) {
            assert_eq!(*s, 3.0 * x);
        }
        // doubling the input doubles the bias-free branch output
        let mut doubled = grouped.clone();
        doubled.data.iter_mut().for_each(|v| *v *= 2.0);
        let s2 = stem_branch_sum(&doubled, &w).unwrap();
        for (a, b) in s2.data.iter().zip(&sum.data) {
            assert!((a - 2.0 * b).abs() <= 1e-5 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn stem_groups_are_isolated() {
        let cfg = NetConfig::toy(2, 2);
        let w = init_weights(&cfg, 9).unwrap();
        let img = random_image(2, 4, 8, 2);
        let base = stem_branch_sum(&rearrange_by_type(&img), &w).unwrap();
        let mut muted = img.clone();
        let pl = img.plane_len();
        for round in 0..2 {
            let s = (round * CHANNELS_PER_ROUND + Channel::Intensity.index()) * pl;
            muted.data[s..s + pl].fill(0.0);
        }
        let changed = stem_branch_sum(&rearrange_by_type(&muted), &w).unwrap();
        let width = cfg.stem_type_width;
        let t = Channel::Intensity.index();
        for c in 0..base.channels {
            let same = base.channel(c) == changed.channel(c);
            if c / width == t {
                assert!(!same, "intensity feature {c} should change");
            } else {
                assert!(same, "feature {c} of type {} changed", c / width);
            }
        }
        assert!(stem_branch_sum(&FeatureMap::zeros(10, 2, 2), &w).is_err());
    }

    #[test]
    fn pyramid_shapes() {
        let cfg = NetConfig::toy(1, 3);
        let w = init_weights(&cfg, 1).unwrap();
        let img = random_image(1, 64, 70, 4);
        let stem = modality_stem(&img, &w).unwrap();
        let c = backbone_forward(&stem, &w).unwrap();
        let hw: Vec<(usize, usize)> = c.iter().map(|m| (m.height, m.width)).collect();
        assert_eq!(hw, vec![(64, 70), (32, 35), (16, 18), (8, 9)]);
        let p = fpn_forward(&c, &w).unwrap();
        let heights: Vec<usize> = p.iter().map(|m| m.height).collect();
        assert_eq!(heights, vec![64, 32, 16, 8, 4, 2]);
        assert!(p.iter().all(|m| m.channels == cfg.fpn_width));
        let preds = heads_forward(&p, &w).unwrap();
        for (lvl, l) in preds.levels.iter().enumerate() {
            assert_eq!(l.stride, LEVEL_STRIDES[lvl]);
            assert_eq!(l.class_probs.channels, 4);
            assert_eq!(
                l.offsets.channels + l.sizes.channels + l.yaw.channels + l.velocity.channels,
                30
            );
            assert_eq!(l.iou.channels, 3);
            for y in 0..l.height() {
                for x in 0..l.width() {
                    let s: f32 = (0..4).map(|k| l.class_probs.get(k, y, x)).sum();
                    assert!((s - 1.0).abs() < 1e-5);
                    assert!((0.0..=1.0).contains(&l.iou_estimate(1, y, x)));
                }
            }
        }
    }

    #[test]
    fn zero_weights_give_zero_features() {
        let cfg = NetConfig::toy(1, 2);
        let w = NetWeights::zeros(&cfg).unwrap();
        let stem = modality_stem(&random_image(1, 8, 8, 5), &w).unwrap();
        let c = backbone_forward(&stem, &w).unwrap();
        assert!(c.iter().all(|m| m.data.iter().all(|&v| v == 0.0)));
        let p = fpn_forward(&c, &w).unwrap();
        assert!(p.iter().all(|m| m.data.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn heads_are_untied() {
        let cfg = NetConfig::toy(1, 2);
        let w = init_weights(&cfg, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let f = FeatureMap::from_vec(
            cfg.fpn_width,
            4,
            4,
            (0..cfg.fpn_width * 16)
                .map(|_| rng.gen_range(-1.0..1.0))
                .collect(),
        )
        .unwrap();
        let preds = heads_forward(&vec![f; FPN_LEVELS], &w).unwrap();
        assert_ne!(preds.levels[0].class_probs, preds.levels[1].class_probs);
        assert_ne!(preds.levels[0].offsets, preds.levels[1].offsets);
    }

    #[test]
    fn shared_iou_option() {
        let cfg = NetConfig {
            class_specific_iou: false,
            ..NetConfig::toy(1, 3)
        };
        let w = init_weights(&cfg, 2).unwrap();
        let preds = forward(&random_image(1, 8, 8, 3), &w).unwrap();
        assert_eq!(preds.levels[0].iou.channels, 1);
        assert_eq!(
            preds.levels[0].iou_estimate(2, 0, 0),
            preds.levels[0].iou_estimate(0, 0, 0)
        );
    }

    #[test]
    fn forward_rejects_wrong_rounds() {
        let cfg = NetConfig::toy(2, 2);
        let w = init_weights(&cfg, 2).unwrap();
        assert!(forward(&random_image(1, 8, 8, 3), &w).is_err());
    }
}
