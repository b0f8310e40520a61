use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::parallel;

/// Dense feature tensor in (channel, row, col) order.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl FeatureMap {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        FeatureMap {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::Shape(format!(
                "{} values cannot fill {channels}x{height}x{width}",
                data.len()
            )));
        }
        Ok(FeatureMap {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let pl = self.plane_len();
        &self.data[c * pl..(c + 1) * pl]
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    /// Channels `[start, end)` as a new map.
    pub fn slice_channels(&self, start: usize, end: usize) -> FeatureMap {
        let pl = self.plane_len();
        FeatureMap {
            channels: end - start,
            height: self.height,
            width: self.width,
            data: self.data[start * pl..end * pl].to_vec(),
        }
    }

    pub fn concat_channels(parts: &[FeatureMap]) -> Result<FeatureMap> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape("nothing to concatenate".into()))?;
        if parts
            .iter()
            .any(|p| p.height != first.height || p.width != first.width)
        {
            return Err(Error::Shape("spatial sizes differ".into()));
        }
        Ok(FeatureMap {
            channels: parts.iter().map(|p| p.channels).sum(),
            height: first.height,
            width: first.width,
            data: parts.iter().flat_map(|p| p.data.iter().copied()).collect(),
        })
    }

    pub fn relu_inplace(&mut self) {
        for v in &mut self.data {
            *v = v.max(0.0);
        }
    }

    pub fn relu(mut self) -> Self {
        self.relu_inplace();
        self
    }

    pub fn add_assign(&mut self, other: &FeatureMap) -> Result<()> {
        if (self.channels, self.height, self.width) != (other.channels, other.height, other.width) {
            return Err(Error::Shape(format!(
                "cannot add {}x{}x{} and {}x{}x{}",
                self.channels, self.height, self.width, other.channels, other.height, other.width
            )));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// Nearest-neighbour 2x upsampling cropped to `height × width`.
    pub fn upsample2_to(&self, height: usize, width: usize) -> FeatureMap {
        let mut out = FeatureMap::zeros(self.channels, height, width);
        for c in 0..self.channels {
            for y in 0..height {
                let sy = (y / 2).min(self.height - 1);
                for x in 0..width {
                    let sx = (x / 2).min(self.width - 1);
                    out.data[(c * height + y) * width + x] = self.get(c, sy, sx);
                }
            }
        }
        out
    }

    /// In-place softmax across channels at every pixel.
    pub fn softmax_channels(&mut self) {
        let pl = self.plane_len();
        for i in 0..pl {
            let max = (0..self.channels)
                .map(|c| self.data[c * pl + i])
                .fold(f32::NEG_INFINITY, f32::max);
            let mut sum = 0.0f64;
            for c in 0..self.channels {
                let e = ((self.data[c * pl + i] - max) as f64).exp();
                self.data[c * pl + i] = e as f32;
                sum += e;
            }
            for c in 0..self.channels {
                self.data[c * pl + i] = (self.data[c * pl + i] as f64 / sum) as f32;
            }
        }
    }

    pub fn sigmoid_inplace(&mut self) {
        for v in &mut self.data {
            *v = (1.0 / (1.0 + (-(*v as f64)).exp())) as f32;
        }
    }
}

/// 2D convolution layer with stride, dilation, zero padding and groups.
/// Weights are laid out as `[out][in / groups][kh][kw]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvLayer {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: usize,
    pub dilation: usize,
    pub groups: usize,
    pub padding: (usize, usize),
    #[serde(skip)]
    pub weights: Vec<f32>,
    #[serde(skip)]
    pub bias: Vec<f32>,
}

impl ConvLayer {
    /// Zero-initialized layer; panics if the channel counts are not
    /// divisible by `groups` (layer shapes come from validated configs).
    pub fn zeros(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        dilation: usize,
        groups: usize,
        padding: usize,
    ) -> Self {
        let layer = ConvLayer {
            in_channels,
            out_channels,
            kernel: (kernel, kernel),
            stride,
            dilation,
            groups,
            padding: (padding, padding),
            weights: Vec::new(),
            bias: Vec::new(),
        };
        layer.check_shape().expect("valid layer shape");
        ConvLayer {
            weights: vec![0.0; layer.weight_count()],
            bias: vec![0.0; out_channels],
            ..layer
        }
    }

    /// Square `k×k` conv whose padding keeps the spatial size at stride 1.
    pub fn same(
        in_channels: usize,
        out_channels: usize,
        k: usize,
        dilation: usize,
        groups: usize,
    ) -> Self {
        Self::zeros(
            in_channels,
            out_channels,
            k,
            1,
            dilation,
            groups,
            dilation * (k - 1) / 2,
        )
    }

    pub fn weight_count(&self) -> usize {
        self.out_channels * (self.in_channels / self.groups.max(1)) * self.kernel.0 * self.kernel.1
    }

    pub fn check_shape(&self) -> Result<()> {
        if self.groups == 0
            || self.stride == 0
            || self.dilation == 0
            || self.kernel.0 == 0
            || self.kernel.1 == 0
        {
            return Err(Error::Shape(
                "groups, stride, dilation and kernel must be positive".into(),
            ));
        }
        if !self.in_channels.is_multiple_of(self.groups)
            || !self.out_channels.is_multiple_of(self.groups)
        {
            return Err(Error::Shape(format!(
                "channels {}->{} not divisible by {} groups",
                self.in_channels, self.out_channels, self.groups
            )));
        }
        Ok(())
    }

    pub fn check_buffers(&self) -> Result<()> {
        self.check_shape()?;
        if self.weights.len() != self.weight_count() || self.bias.len() != self.out_channels {
            return Err(Error::Shape(format!(
                "layer expects {} weights and {} biases, has {} and {}",
                self.weight_count(),
                self.out_channels,
                self.weights.len(),
                self.bias.len()
            )));
        }
        Ok(())
    }

    pub fn output_size(&self, height: usize, width: usize) -> Result<(usize, usize)> {
        let dim = |n: usize, k: usize, p: usize| -> Option<usize> {
            let span = self.dilation * (k - 1) + 1;
            (n + 2 * p).checked_sub(span).map(|v| v / self.stride + 1)
        };
        match (
            dim(height, self.kernel.0, self.padding.0),
            dim(width, self.kernel.1, self.padding.1),
        ) {
            (Some(h), Some(w)) => Ok((h, w)),
            _ => Err(Error::Shape(format!(
                "input {height}x{width} smaller than the dilated kernel"
            ))),
        }
    }
}

/// Cross-correlation with zero padding. Each output element is accumulated
/// in the fixed order bias, then input channel, kernel row, kernel column,
/// so results do not depend on how output channels are scheduled.
pub fn conv2d(input: &FeatureMap, layer: &ConvLayer) -> Result<FeatureMap> {
    layer.check_buffers()?;
    if input.channels != layer.in_channels {
        return Err(Error::Shape(format!(
            "conv expects {} input channels, got {}",
            layer.in_channels, input.channels
        )));
    }
    let (oh, ow) = layer.output_size(input.height, input.width)?;
    let (h, w) = (input.height, input.width);
    let (kh, kw) = layer.kernel;
    let (s, d) = (layer.stride, layer.dilation);
    let (ph, pw) = (layer.padding.0 as isize, layer.padding.1 as isize);
    let in_per_group = layer.in_channels / layer.groups;
    let out_per_group = layer.out_channels / layer.groups;
    let mut out = FeatureMap::zeros(layer.out_channels, oh, ow);

    parallel::for_each_chunk_mut(&mut out.data, oh * ow, |o, plane| {
        plane.fill(layer.bias[o]);
        let group = o / out_per_group;
        for icl in 0..in_per_group {
            let ic = group * in_per_group + icl;
            let src = &input.data[ic * h * w..(ic + 1) * h * w];
            for ky in 0..kh {
                for kx in 0..kw {
                    let wv = layer.weights[((o * in_per_group + icl) * kh + ky) * kw + kx];
                    let x_off = (kx * d) as isize - pw;
                    // output columns whose input column lands inside the row
                    let lo = if x_off >= 0 {
                        0
                    } else {
                        ((-x_off) as usize).div_ceil(s)
                    };
                    let hi = {
                        let lim = w as isize - x_off;
                        if lim <= 0 {
                            0
                        } else {
                            (((lim as usize) - 1) / s + 1).min(ow)
                        }
                    };
                    if lo >= hi {
                        continue;
                    }
                    for oy in 0..oh {
                        let iy = (oy * s + ky * d) as isize - ph;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let row_in = &src[iy as usize * w..(iy as usize + 1) * w];
                        let row_out = &mut plane[oy * ow..(oy + 1) * ow];
                        if s == 1 {
                            let start = (lo as isize + x_off) as usize;
                            for (dst, &v) in row_out[lo..hi]
                                .iter_mut()
                                .zip(&row_in[start..start + (hi - lo)])
                            {
                                *dst += wv * v;
                            }
                        } else {
                            for (ox, dst) in row_out.iter_mut().enumerate().take(hi).skip(lo) {
                                *dst += wv * row_in[((ox * s) as isize + x_off) as usize];
                            }
                        }
                    }
                }
            }
        }
    });
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Direct six-loop reference.
    fn naive(input: &FeatureMap, l: &ConvLayer) -> FeatureMap {
        let (oh, ow) = l.output_size(input.height, input.width).unwrap();
        let ipg = l.in_channels / l.groups;
        let opg = l.out_channels / l.groups;
        let mut out = FeatureMap::zeros(l.out_channels, oh, ow);
        for o in 0..l.out_channels {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = l.bias[o] as f64;
                    for icl in 0..ipg {
                        let ic = (o / opg) * ipg + icl;
                        for ky in 0..l.kernel.0 {
                            for kx in 0..l.kernel.1 {
                                let iy = (oy * l.stride + ky * l.dilation) as isize
                                    - l.padding.0 as isize;
                                let ix = (ox * l.stride + kx * l.dilation) as isize
                                    - l.padding.1 as isize;
                                if iy >= 0
                                    && ix >= 0
                                    && (iy as usize) < input.height
                                    && (ix as usize) < input.width
                                {
                                    let wv = l.weights
                                        [((o * ipg + icl) * l.kernel.0 + ky) * l.kernel.1 + kx];
                                    acc +=
                                        wv as f64 * input.get(ic, iy as usize, ix as usize) as f64;
                                }
                            }
                        }
                    }
                    out.data[(o * oh + oy) * ow + ox] = acc as f32;
                }
            }
        }
        out
    }

    fn random_map(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> FeatureMap {
        FeatureMap::from_vec(
            c,
            h,
            w,
            (0..c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    fn randomize(rng: &mut ChaCha8Rng, l: &mut ConvLayer) {
        l.weights
            .iter_mut()
            .for_each(|v| *v = rng.gen_range(-1.0..1.0));
        l.bias
            .iter_mut()
            .for_each(|v| *v = rng.gen_range(-1.0..1.0));
    }

    #[test]
    fn identity_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_map(&mut rng, 3, 5, 7);
        let mut l = ConvLayer::zeros(3, 3, 1, 1, 1, 1, 0);
        for c in 0..3 {
            l.weights[c * 3 + c] = 1.0;
        }
        assert_eq!(conv2d(&x, &l).unwrap(), x);
    }

    #[test]
    fn ones_kernel_on_impulse() {
        let mut x = FeatureMap::zeros(1, 5, 5);
        x.data[12] = 1.0;
        let mut l = ConvLayer::same(1, 1, 3, 1, 1);
        l.weights.fill(1.0);
        let y = conv2d(&x, &l).unwrap();
        for r in 0..5 {
            for c in 0..5 {
                let inside = (1..=3).contains(&r) && (1..=3).contains(&c);
                assert_eq!(y.get(0, r, c), if inside { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn output_size_formula() {
        let l = ConvLayer::zeros(1, 1, 3, 2, 1, 1, 1);
        assert_eq!(l.output_size(1086, 64).unwrap(), (543, 32));
        assert_eq!(l.output_size(543, 543).unwrap(), (272, 272));
        let d = ConvLayer::same(1, 1, 3, 6, 1);
        assert_eq!(d.output_size(4, 9).unwrap(), (4, 9));
        assert!(ConvLayer::zeros(1, 1, 5, 1, 1, 1, 0)
            .output_size(3, 3)
            .is_err());
    }

    #[test]
    fn shape_errors() {
        let l = ConvLayer::same(4, 4, 3, 1, 2);
        assert!(conv2d(&FeatureMap::zeros(3, 4, 4), &l).is_err());
        let mut bad = l.clone();
        bad.weights.pop();
        assert!(conv2d(&FeatureMap::zeros(4, 4, 4), &bad).is_err());
        let uneven = ConvLayer { groups: 3, ..l };
        assert!(uneven.check_shape().is_err());
    }

    #[test]
    fn matches_naive_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(c_in, c_out, k, s, d, g, p, h, w) in &[
            (3, 4, 3, 1, 1, 1, 1, 6, 9),
            (6, 6, 3, 2, 1, 3, 1, 7, 11),
            (4, 8, 3, 1, 3, 2, 3, 9, 10),
            (2, 2, 1, 2, 1, 1, 0, 5, 5),
            (9, 18, 3, 1, 6, 9, 6, 8, 20),
        ] {
            let x = random_map(&mut rng, c_in, h, w);
            let mut l = ConvLayer::zeros(c_in, c_out, k, s, d, g, p);
            randomize(&mut rng, &mut l);
            let a = conv2d(&x, &l).unwrap();
            let b = naive(&x, &l);
            assert_eq!(
                (a.channels, a.height, a.width),
                (b.channels, b.height, b.width)
            );
            for (u, v) in a.data.iter().zip(&b.data) {
                assert!((u - v).abs() <= 1e-4 * (1.0 + v.abs()), "{u} vs {v}");
            }
        }
    }

    #[test]
    fn grouped_equals_per_group_full_convs() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (g, ipg, opg) = (3, 2, 4);
        let x = random_map(&mut rng, g * ipg, 6, 8);
        let mut grouped = ConvLayer::zeros(g * ipg, g * opg, 3, 1, 2, g, 2);
        randomize(&mut rng, &mut grouped);
        let y = conv2d(&x, &grouped).unwrap();
        let k = 9;
        let parts: Vec<FeatureMap> = (0..g)
            .map(|gi| {
                let mut full = ConvLayer::zeros(ipg, opg, 3, 1, 2, 1, 2);
                full.weights =
                    grouped.weights[gi * opg * ipg * k..(gi + 1) * opg * ipg * k].to_vec();
                full.bias = grouped.bias[gi * opg..(gi + 1) * opg].to_vec();
                conv2d(&x.slice_channels(gi * ipg, (gi + 1) * ipg), &full).unwrap()
            })
            .collect();
        let cat = FeatureMap::concat_channels(&parts).unwrap();
        for (a, b) in y.data.iter().zip(&cat.data) {
            assert!((a - b).abs() <= 1e-5 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn softmax_and_upsample() {
        let mut m = FeatureMap::from_vec(3, 1, 2, vec![1.0, 0.0, 2.0, 0.0, 3.0, 0.0]).unwrap();
        m.softmax_channels();
        for i in 0..2 {
            let s: f32 = (0..3).map(|c| m.data[c * 2 + i]).sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
        let src = FeatureMap::from_vec(1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let up = src.upsample2_to(3, 4);
        assert_eq!(
            up.data,
            vec![1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0]
        );
    }
}
