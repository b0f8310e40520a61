//! File formats.
//!
//! * `.rvpc` point clouds: magic `RVPC`, `u16` version, `u64` count, then
//!   per point `f32 x, y, z, intensity, timestamp`, `u16 frame_age`,
//!   `u32 point_id`. Little-endian throughout.
//! * Range images: `f32` channel data in (round, channel, row, col) order
//!   followed by `i32` point ids and `i32` frame ages (−1 when empty), with
//!   a JSON sidecar at `<path>.json`.
//! * Boxes as JSON lines.
//! * Network weights: `f32` blob with a JSON manifest at `<path>.json`.
//! * Prediction sets: `f32` blob with a JSON manifest at `<path>.json`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::boxes::Box3D;
use crate::error::{Error, Result};
use crate::lidar_geom::{LidarSpec, Point, PointCloud};
use crate::mrv::{RangeImage, CHANNELS_PER_ROUND, CHANNEL_NAMES};
use crate::net::{FeatureMap, LevelPrediction, NetConfig, NetWeights, PredictionSet};

pub const RVPC_MAGIC: &[u8; 4] = b"RVPC";
pub const RVPC_VERSION: u16 = 1;
const RVPC_HEADER: usize = 4 + 2 + 8;
const RVPC_RECORD: usize = 5 * 4 + 2 + 4;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn read_text(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    fs::read_to_string(path).map_err(io_err(path))
}

fn read_bytes(path: impl AsRef<Path>) -> Result<Vec<u8>> {
    let path = path.as_ref();
    fs::read(path).map_err(io_err(path))
}

fn write_bytes(path: impl AsRef<Path>, data: impl AsRef<[u8]>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, data).map_err(io_err(path))
}

/// Deserializes JSON, reporting the path of the offending field.
pub fn from_json_str<T: DeserializeOwned>(text: &str, what: &'static str) -> Result<T> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| Error::Json {
        what,
        path: e.path().to_string(),
        reason: e.into_inner().to_string(),
    })
}

pub fn read_json<T: DeserializeOwned>(path: &Path, what: &'static str) -> Result<T> {
    from_json_str(&read_text(path)?, what)
}

pub fn to_json_pretty<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable value");
    s.push('\n');
    s
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_bytes(path, to_json_pretty(value))
}

/// `<path>.json`, the sidecar next to a binary file.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8], what: &'static str) -> Self {
        Reader { buf, pos: 0, what }
    }

    fn fail<T>(&self, reason: impl Into<String>) -> Result<T> {
        Err(Error::Format {
            what: self.what,
            offset: self.pos as u64,
            reason: reason.into(),
        })
    }

    fn take<const N: usize>(&mut self) -> Result<[u8; N]> {
        match self.buf.get(self.pos..self.pos + N) {
            Some(b) => {
                self.pos += N;
                Ok(b.try_into().expect("slice of length N"))
            }
            None => self.fail(format!(
                "truncated: needed {N} more bytes, {} left",
                self.buf.len() - self.pos
            )),
        }
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take()?))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take()?))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take()?))
    }
    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take()?))
    }
}

pub fn encode_rvpc(cloud: &PointCloud) -> Vec<u8> {
    let mut out = Vec::with_capacity(RVPC_HEADER + RVPC_RECORD * cloud.len());
    out.extend_from_slice(RVPC_MAGIC);
    out.extend_from_slice(&RVPC_VERSION.to_le_bytes());
    out.extend_from_slice(&(cloud.len() as u64).to_le_bytes());
    for p in &cloud.points {
        for v in [p.position[0], p.position[1], p.position[2]] {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        out.extend_from_slice(&p.intensity.to_le_bytes());
        out.extend_from_slice(&(p.timestamp as f32).to_le_bytes());
        out.extend_from_slice(&p.frame_age.to_le_bytes());
        out.extend_from_slice(&p.point_id.to_le_bytes());
    }
    out
}

/// Parses an `.rvpc` buffer. The reference timestamp, which the format
/// does not store, is the latest timestamp among current-frame points
/// (falling back to the latest overall, then 0).
pub fn decode_rvpc(buf: &[u8]) -> Result<PointCloud> {
    let mut r = Reader::new(buf, "point cloud");
    if &r.take::<4>()? != RVPC_MAGIC {
        r.pos = 0;
        return r.fail("bad magic, expected RVPC");
    }
    let version = r.u16()?;
    if version != RVPC_VERSION {
        r.pos -= 2;
        return r.fail(format!("unsupported version {version}"));
    }
    let count = r.u64()?;
    let expected = (count as u128) * RVPC_RECORD as u128 + RVPC_HEADER as u128;
    if expected != buf.len() as u128 {
        r.pos = RVPC_HEADER.min(buf.len());
        if expected > buf.len() as u128 {
            r.pos = buf.len();
            return r.fail(format!("truncated: header declares {count} points"));
        }
        r.pos = expected as usize;
        return r.fail(format!(
            "{} trailing bytes after {count} points",
            buf.len() as u128 - expected
        ));
    }
    let mut points = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let start = r.pos;
        let (x, y, z) = (r.f32()?, r.f32()?, r.f32()?);
        let intensity = r.f32()?;
        let timestamp = r.f32()?;
        let frame_age = r.u16()?;
        let point_id = r.u32()?;
        if !(x.is_finite() && y.is_finite() && z.is_finite() && timestamp.is_finite()) {
            r.pos = start;
            return r.fail("non-finite coordinate or timestamp");
        }
        points.push(Point {
            position: [x as f64, y as f64, z as f64],
            intensity,
            timestamp: timestamp as f64,
            frame_age,
            point_id,
        });
    }
    let latest = |f: &dyn Fn(&&Point) -> bool| {
        points
            .iter()
            .filter(f)
            .map(|p| p.timestamp)
            .reduce(f64::max)
    };
    let reference = latest(&|p| p.frame_age == 0)
        .or_else(|| latest(&|_| true))
        .unwrap_or(0.0);
    Ok(PointCloud::new(points, reference))
}

pub fn write_rvpc(path: &Path, cloud: &PointCloud) -> Result<()> {
    write_bytes(path, encode_rvpc(cloud))
}

pub fn read_rvpc(path: &Path) -> Result<PointCloud> {
    decode_rvpc(&read_bytes(path)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RangeImageHeader {
    pub m: usize,
    pub n: usize,
    pub rounds: usize,
    pub channel_order: Vec<String>,
    pub spec: LidarSpec,
    pub row_repeat: usize,
    pub layout: String,
}

impl RangeImageHeader {
    fn of(img: &RangeImage) -> Self {
        RangeImageHeader {
            m: img.height,
            n: img.width,
            rounds: img.rounds,
            channel_order: CHANNEL_NAMES.iter().map(|s| s.to_string()).collect(),
            spec: img.spec.clone(),
            row_repeat: img.row_repeat,
            layout: "f32 data[round][channel][row][col]; i32 point_id[round][row][col]; i32 frame_age[round][row][col]"
                .into(),
        }
    }
}

pub fn encode_range_image(img: &RangeImage) -> (Vec<u8>, String) {
    let mut out = Vec::with_capacity(4 * (img.data.len() + 2 * img.point_ids.len()));
    for v in &img.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for v in img.point_ids.iter().chain(&img.frame_ages) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    (out, to_json_pretty(&RangeImageHeader::of(img)))
}

pub fn decode_range_image(buf: &[u8], header_json: &str) -> Result<RangeImage> {
    let h: RangeImageHeader = from_json_str(header_json, "range image header")?;
    if h.channel_order != CHANNEL_NAMES {
        return Err(Error::Json {
            what: "range image header",
            path: "channel_order".into(),
            reason: format!("expected {CHANNEL_NAMES:?}"),
        });
    }
    if h.row_repeat == 0
        || h.m != h.spec.beam_count() * h.row_repeat
        || h.n != h.spec.azimuth_steps()
    {
        return Err(Error::Json {
            what: "range image header",
            path: "m".into(),
            reason: "dimensions disagree with the embedded spec".into(),
        });
    }
    let plane = h.m * h.n;
    let n_data = h.rounds * CHANNELS_PER_ROUND * plane;
    let n_prov = h.rounds * plane;
    let mut r = Reader::new(buf, "range image");
    let want = 4 * (n_data + 2 * n_prov);
    if buf.len() != want {
        r.pos = buf.len().min(want);
        return r.fail(format!("expected {want} bytes, found {}", buf.len()));
    }
    let data = (0..n_data).map(|_| r.f32()).collect::<Result<Vec<_>>>()?;
    let mut ints = (0..2 * n_prov).map(|_| r.take::<4>().map(i32::from_le_bytes));
    let point_ids = ints.by_ref().take(n_prov).collect::<Result<Vec<_>>>()?;
    let frame_ages = ints.collect::<Result<Vec<_>>>()?;
    let img = RangeImage {
        spec: h.spec,
        row_repeat: h.row_repeat,
        height: h.m,
        width: h.n,
        rounds: h.rounds,
        data,
        point_ids,
        frame_ages,
    };
    if let Some(i) = img
        .frame_ages
        .iter()
        .position(|&a| a < -1 || a > u16::MAX as i32)
    {
        let mut r = Reader::new(buf, "range image");
        r.pos = 4 * (n_data + n_prov + i);
        return r.fail("frame age out of range");
    }
    Ok(img)
}

pub fn write_range_image(path: &Path, img: &RangeImage) -> Result<()> {
    let (bin, header) = encode_range_image(img);
    write_bytes(path, bin)?;
    write_bytes(sidecar_path(path), header)?;
    Ok(())
}

pub fn read_range_image(path: &Path) -> Result<RangeImage> {
    let header = read_text(sidecar_path(path))?;
    decode_range_image(&read_bytes(path)?, &header)
}

pub fn boxes_to_jsonl(boxes: &[Box3D]) -> String {
    let mut s = String::new();
    for b in boxes {
        s.push_str(&serde_json::to_string(b).expect("box serializes"));
        s.push('\n');
    }
    s
}

/// Parses JSON lines; blank lines are skipped. Errors name the line and
/// field path.
pub fn boxes_from_jsonl(text: &str) -> Result<Vec<Box3D>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let b: Box3D = from_json_str(line, "box list").map_err(|e| match e {
            Error::Json { what, path, reason } => Error::Json {
                what,
                path: format!("line {}: {path}", i + 1),
                reason,
            },
            other => other,
        })?;
        out.push(b);
    }
    Ok(out)
}

pub fn write_boxes(path: &Path, boxes: &[Box3D]) -> Result<()> {
    write_bytes(path, boxes_to_jsonl(boxes))
}

pub fn read_boxes(path: &Path) -> Result<Vec<Box3D>> {
    boxes_from_jsonl(&read_text(path)?)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerEntry {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: usize,
    pub dilation: usize,
    pub groups: usize,
    pub padding: (usize, usize),
    /// Offsets and lengths count `f32` elements, not bytes.
    pub weight_offset: usize,
    pub weight_len: usize,
    pub bias_offset: usize,
    pub bias_len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightManifest {
    pub config: NetConfig,
    pub total_floats: usize,
    pub layers: Vec<LayerEntry>,
}

pub fn encode_weights(w: &NetWeights) -> (Vec<u8>, WeightManifest) {
    let mut blob = Vec::new();
    let mut layers = Vec::new();
    let mut offset = 0;
    for (name, l) in w.layers() {
        let weight_offset = offset;
        offset += l.weights.len();
        let bias_offset = offset;
        offset += l.bias.len();
        for v in l.weights.iter().chain(&l.bias) {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        layers.push(LayerEntry {
            name,
            in_channels: l.in_channels,
            out_channels: l.out_channels,
            kernel: l.kernel,
            stride: l.stride,
            dilation: l.dilation,
            groups: l.groups,
            padding: l.padding,
            weight_offset,
            weight_len: l.weights.len(),
            bias_offset,
            bias_len: l.bias.len(),
        });
    }
    let manifest = WeightManifest {
        config: w.config.clone(),
        total_floats: offset,
        layers,
    };
    (blob, manifest)
}

/// Builds weights for `cfg` and fills every layer by name from the blob,
/// checking each layer's shape against the manifest.
pub fn decode_weights(
    blob: &[u8],
    manifest: &WeightManifest,
    cfg: &NetConfig,
) -> Result<NetWeights> {
    if blob.len() != 4 * manifest.total_floats {
        return Err(Error::Format {
            what: "weight blob",
            offset: blob.len().min(4 * manifest.total_floats) as u64,
            reason: format!(
                "expected {} bytes, found {}",
                4 * manifest.total_floats,
                blob.len()
            ),
        });
    }
    let mut w = NetWeights::zeros(cfg)?;
    let names: Vec<String> = w.layers().into_iter().map(|(n, _)| n).collect();
    let floats = |off: usize, len: usize| -> Result<Vec<f32>> {
        let bytes = blob
            .get(4 * off..4 * (off + len))
            .ok_or_else(|| Error::Format {
                what: "weight blob",
                offset: 4 * off as u64,
                reason: "layer extends past the end of the blob".into(),
            })?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    };
    for (name, layer) in names.iter().zip(w.layers_mut()) {
        let (idx, e) = manifest
            .layers
            .iter()
            .enumerate()
            .find(|(_, e)| &e.name == name)
            .ok_or_else(|| Error::Json {
                what: "weight manifest",
                path: "layers".into(),
                reason: format!("missing layer {name}"),
            })?;
        let same = e.in_channels == layer.in_channels
            && e.out_channels == layer.out_channels
            && e.kernel == layer.kernel
            && e.stride == layer.stride
            && e.dilation == layer.dilation
            && e.groups == layer.groups
            && e.padding == layer.padding
            && e.weight_len == layer.weight_count()
            && e.bias_len == layer.out_channels;
        if !same {
            return Err(Error::Json {
                what: "weight manifest",
                path: format!("layers[{idx}]"),
                reason: format!("shape of {name} does not match the network config"),
            });
        }
        layer.weights = floats(e.weight_offset, e.weight_len)?;
        layer.bias = floats(e.bias_offset, e.bias_len)?;
    }
    Ok(w)
}

pub fn write_weights(path: &Path, w: &NetWeights) -> Result<()> {
    let (blob, manifest) = encode_weights(w);
    write_bytes(path, blob)?;
    write_json(&sidecar_path(path), &manifest)
}

/// Loads a weight blob; `cfg` defaults to the config in the manifest.
pub fn read_weights(path: &Path, cfg: Option<&NetConfig>) -> Result<NetWeights> {
    let manifest: WeightManifest = read_json(&sidecar_path(path), "weight manifest")?;
    let cfg = cfg.unwrap_or(&manifest.config).clone();
    decode_weights(&read_bytes(path)?, &manifest, &cfg)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LevelEntry {
    pub stride: usize,
    pub height: usize,
    pub width: usize,
    /// Channel counts of class_probs, offsets, sizes, yaw, velocity, iou.
    pub channels: [usize; 6],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionManifest {
    pub num_classes: usize,
    pub levels: Vec<LevelEntry>,
}

fn level_maps(l: &LevelPrediction) -> [&FeatureMap; 6] {
    [
        &l.class_probs,
        &l.offsets,
        &l.sizes,
        &l.yaw,
        &l.velocity,
        &l.iou,
    ]
}

pub fn encode_predictions(p: &PredictionSet) -> (Vec<u8>, PredictionManifest) {
    let mut blob = Vec::new();
    let mut levels = Vec::new();
    for l in &p.levels {
        let maps = level_maps(l);
        for m in maps {
            for v in &m.data {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
        levels.push(LevelEntry {
            stride: l.stride,
            height: l.height(),
            width: l.width(),
            channels: maps.map(|m| m.channels),
        });
    }
    (
        blob,
        PredictionManifest {
            num_classes: p.num_classes,
            levels,
        },
    )
}

pub fn decode_predictions(blob: &[u8], manifest: &PredictionManifest) -> Result<PredictionSet> {
    let mut r = Reader::new(blob, "prediction blob");
    let mut levels = Vec::new();
    for e in &manifest.levels {
        let plane = e.height * e.width;
        let mut maps = Vec::with_capacity(6);
        for &c in &e.channels {
            let data = (0..c * plane)
                .map(|_| r.f32())
                .collect::<Result<Vec<_>>>()?;
            maps.push(FeatureMap::from_vec(c, e.height, e.width, data)?);
        }
        let mut it = maps.into_iter();
        let mut next = || it.next().expect("six maps per level");
        levels.push(LevelPrediction {
            stride: e.stride,
            class_probs: next(),
            offsets: next(),
            sizes: next(),
            yaw: next(),
            velocity: next(),
            iou: next(),
        });
    }
    if r.pos != blob.len() {
        return r.fail("trailing bytes after the last level");
    }
    Ok(PredictionSet {
        num_classes: manifest.num_classes,
        levels,
    })
}

pub fn write_predictions(path: &Path, p: &PredictionSet) -> Result<()> {
    let (blob, manifest) = encode_predictions(p);
    write_bytes(path, blob)?;
    write_json(&sidecar_path(path), &manifest)
}

pub fn read_predictions(path: &Path) -> Result<PredictionSet> {
    let manifest: PredictionManifest = read_json(&sidecar_path(path), "prediction manifest")?;
    decode_predictions(&read_bytes(path)?, &manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mrv::project_mrv;
    use crate::net::{forward, init_weights};

    fn cloud() -> PointCloud {
        let points = (0..50u32)
            .map(|i| Point {
                position: [
                    5.0 + i as f64 * 0.25,
                    (i as f64 * 0.7).sin() * 3.0,
                    -1.0 + i as f64 * 0.01,
                ],
                intensity: 0.1 * (i % 10) as f32,
                timestamp: if i < 25 { 0.5 } else { 0.25 },
                frame_age: if i < 25 { 0 } else { 1 },
                point_id: i,
            })
            .collect();
        PointCloud::new(points, 0.5)
    }

    #[test]
    fn rvpc_round_trip_is_byte_identical() {
        let bytes = encode_rvpc(&cloud());
        assert_eq!(bytes.len(), RVPC_HEADER + 50 * RVPC_RECORD);
        let back = decode_rvpc(&bytes).unwrap();
        assert_eq!(back.reference_timestamp, 0.5);
        assert_eq!(back.points[3].point_id, 3);
        assert_eq!(encode_rvpc(&back), bytes);
    }

    #[test]
    fn rvpc_errors_carry_offsets() {
        let bytes = encode_rvpc(&cloud());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            decode_rvpc(&bad),
            Err(Error::Format { offset: 0, .. })
        ));
        let truncated = &bytes[..bytes.len() - 3];
        assert!(matches!(decode_rvpc(truncated), Err(Error::Format { .. })));
        let mut ver = bytes.clone();
        ver[4] = 9;
        assert!(matches!(
            decode_rvpc(&ver),
            Err(Error::Format { offset: 4, .. })
        ));
        let mut nan = bytes;
        nan[RVPC_HEADER + RVPC_RECORD..RVPC_HEADER + RVPC_RECORD + 4]
            .copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(
            decode_rvpc(&nan),
            Err(Error::Format { offset, .. }) if offset == (RVPC_HEADER + RVPC_RECORD) as u64
        ));
    }

    #[test]
    fn range_image_round_trip() {
        let spec = LidarSpec::evenly_spaced(8, 32, -20.0, 5.0).unwrap();
        let (img, _) = project_mrv(&cloud(), &spec, 3).unwrap();
        let img = crate::mrv::upscale_vertical(&img, 2).unwrap();
        let (bin, header) = encode_range_image(&img);
        let back = decode_range_image(&bin, &header).unwrap();
        assert_eq!(back, img);
        let (bin2, header2) = encode_range_image(&back);
        assert_eq!((bin2, header2), (bin.clone(), header.clone()));
        assert!(matches!(
            decode_range_image(&bin[..bin.len() - 4], &header),
            Err(Error::Format { .. })
        ));
        let broken = header.replace("\"rounds\": 3", "\"rounds\": \"three\"");
        assert!(
            matches!(decode_range_image(&bin, &broken), Err(Error::Json { path, .. }) if path == "rounds")
        );
    }

    #[test]
    fn jsonl_round_trip_and_errors() {
        let boxes = vec![
            Box3D::new([1.0, 2.0, 3.0], [1.5, 1.6, 4.1], 0.3)
                .with_class(2)
                .with_score(0.7),
            Box3D::new([-1.0, 0.1, 0.0], [0.5, 0.5, 0.5], -3.0).with_velocity([0.2, -0.1]),
        ];
        let text = boxes_to_jsonl(&boxes);
        let back = boxes_from_jsonl(&text).unwrap();
        assert_eq!(back, boxes);
        assert_eq!(boxes_to_jsonl(&back), text);
        let bad = text.replacen("[1.0,2.0,3.0]", "[1.0,\"x\",3.0]", 1);
        match boxes_from_jsonl(&bad) {
            Err(Error::Json { path, .. }) => assert_eq!(path, "line 1: center[1]"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn weights_round_trip() {
        let cfg = NetConfig::toy(2, 3);
        let w = init_weights(&cfg, 11).unwrap();
        let (blob, manifest) = encode_weights(&w);
        let back = decode_weights(&blob, &manifest, &cfg).unwrap();
        assert_eq!(back, w);
        assert_eq!(encode_weights(&back).0, blob);
        let other = NetConfig {
            head_width: 16,
            ..cfg.clone()
        };
        assert!(matches!(
            decode_weights(&blob, &manifest, &other),
            Err(Error::Json { .. })
        ));
        assert!(matches!(
            decode_weights(&blob[4..], &manifest, &cfg),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn predictions_round_trip() {
        let cfg = NetConfig::toy(1, 2);
        let w = init_weights(&cfg, 2).unwrap();
        let spec = LidarSpec::evenly_spaced(8, 32, -20.0, 5.0).unwrap();
        let (img, _) = project_mrv(&cloud(), &spec, 1).unwrap();
        let p = forward(&img, &w).unwrap();
        let (blob, manifest) = encode_predictions(&p);
        assert_eq!(decode_predictions(&blob, &manifest).unwrap(), p);
    }
}
