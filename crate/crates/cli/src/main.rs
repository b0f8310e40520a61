use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

use rvkit::boxes::{nms_3d, NmsConfig, OverlapMetric};
use rvkit::io;
use rvkit::lidar_geom::{fuse_sweeps, LidarSpec, RigidTransform};
use rvkit::metrics::{evaluate, EvalConfig, EvalSample};
use rvkit::mrv::{project_mrv, upscale_vertical, MrvProjector, PriorityRule, RangeImage};
use rvkit::net::{conv2d, forward, init_weights, ConvLayer, FeatureMap, NetConfig};
use rvkit::pipeline::{build_targets_from_image, decode_predictions, DetectConfig};
use rvkit::simgen::{self, SceneParams, SequenceParams};

#[derive(Parser)]
#[command(name = "rvkit", version, about = "Range-view LiDAR detection toolkit")]
struct Cli {
    /// Worker thread cap.
    #[arg(long, global = true, env = "RVKIT_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum Metric {
    Iou3d,
    Bev,
}

impl From<Metric> for OverlapMetric {
    fn from(m: Metric) -> Self {
        match m {
            Metric::Iou3d => OverlapMetric::Iou3d,
            Metric::Bev => OverlapMetric::Bev,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum BenchOp {
    Mrv,
    Conv,
    Nms,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a scene and raycast a sweep sequence.
    Simulate {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 10)]
        frames: usize,
        #[arg(long)]
        out: PathBuf,
        /// Preset name or path to a JSON spec.
        #[arg(long, default_value = "nuscenes")]
        spec: String,
        #[arg(long, default_value_t = 12)]
        boxes: usize,
        #[arg(long, default_value_t = 0.05)]
        dt: f64,
        /// Ego velocity `vx,vy` in m/s.
        #[arg(long, value_delimiter = ',', num_args = 2, default_values_t = [0.0, 0.0])]
        ego_velocity: Vec<f64>,
        #[arg(long, default_value_t = 0.0)]
        yaw_rate: f64,
        #[arg(long)]
        no_ground: bool,
        /// Freeze all boxes.
        #[arg(long)]
        static_boxes: bool,
    },
    /// Merge sweeps (oldest first) into the ego frame of the last one.
    Fuse {
        #[arg(long, num_args = 1.., required = true)]
        frames: Vec<PathBuf>,
        /// JSON list of ego-to-world poses, one per frame.
        #[arg(long)]
        poses: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Multi-round range-view projection.
    Project {
        #[arg(long, default_value = "nuscenes")]
        spec: String,
        #[arg(long, default_value_t = 5)]
        rounds: usize,
        #[arg(long, default_value_t = 1)]
        upscale: usize,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write the stats JSON here.
        #[arg(long)]
        stats: Option<PathBuf>,
    },
    /// Training targets for an image and its annotations.
    Targets {
        #[arg(long)]
        img: PathBuf,
        #[arg(long)]
        gts: PathBuf,
        /// Prediction dump enabling dynamic-K assignment.
        #[arg(long)]
        preds: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write seeded network weights.
    InitWeights {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the network and decode detections.
    Infer {
        #[arg(long)]
        img: PathBuf,
        #[arg(long)]
        weights: PathBuf,
        /// Network config; defaults to the one in the weight manifest.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.01)]
        score_threshold: f64,
        #[arg(long, default_value_t = 0.2)]
        nms_threshold: f64,
        #[arg(long, default_value_t = 500)]
        top_k: usize,
        #[arg(long, value_enum, default_value_t = Metric::Iou3d)]
        nms_metric: Metric,
        /// Also dump raw head outputs for `targets --preds`.
        #[arg(long)]
        dump_preds: Option<PathBuf>,
    },
    /// Class-wise greedy NMS over a detection list.
    Nms {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value_t = 0.2)]
        iou: f64,
        #[arg(long, value_enum, default_value_t = Metric::Iou3d)]
        metric: Metric,
        #[arg(long)]
        top_k: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Center-distance mAP, TP errors and NDS.
    Eval {
        #[arg(long)]
        dets: PathBuf,
        #[arg(long)]
        gts: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Time one kernel.
    Bench {
        #[arg(long, value_enum)]
        op: BenchOp,
        /// Points for mrv, image width for conv, boxes for nms.
        #[arg(long, default_value_t = 240_000)]
        size: usize,
        #[arg(long, default_value_t = 11)]
        repeat: usize,
        #[arg(long, default_value_t = 5)]
        rounds: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn spec_from_arg(s: &str) -> Result<LidarSpec> {
    if let Some(spec) = LidarSpec::preset(s) {
        return Ok(spec);
    }
    let path = Path::new(s);
    if !path.exists() {
        bail!("unknown spec preset or missing file: {s}");
    }
    Ok(io::read_json(path, "lidar spec")?)
}

fn print_json<T: Serialize>(v: &T) {
    print!("{}", io::to_json_pretty(v));
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let idx = ((sorted.len() - 1) as f64 * q).round() as usize;
    sorted[idx]
}

fn time_ms<F: FnMut()>(repeat: usize, mut f: F) -> (f64, f64) {
    let mut t: Vec<f64> = (0..repeat.max(1))
        .map(|_| {
            let s = Instant::now();
            f();
            s.elapsed().as_secs_f64() * 1e3
        })
        .collect();
    t.sort_by(f64::total_cmp);
    (percentile(&t, 0.5), percentile(&t, 0.95))
}

fn machine() -> serde_json::Value {
    json!({
        "os": std::env::consts::OS,
        "arch": std::env::consts::ARCH,
        "available_parallelism": std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
        "threads": rvkit::parallel::current_threads(),
    })
}

/// FNV-1a of the serialized config, for run manifests.
fn config_hash<T: Serialize>(v: &T) -> String {
    let bytes = serde_json::to_vec(v).expect("config serializes");
    let h = bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    });
    format!("{h:016x}")
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Simulate {
            seed,
            frames,
            out,
            spec,
            boxes,
            dt,
            ego_velocity,
            yaw_rate,
            no_ground,
            static_boxes,
        } => {
            let spec = spec_from_arg(&spec)?;
            let params = SceneParams {
                num_boxes: boxes,
                ..Default::default()
            };
            let mut scene = simgen::generate_scene(seed, &params)?;
            if static_boxes {
                scene.iter_mut().for_each(|b| b.velocity = [0.0; 2]);
            }
            let seq = SequenceParams {
                frames,
                dt,
                ego_velocity: [ego_velocity[0], ego_velocity[1]],
                ego_yaw_rate: yaw_rate,
                ground: (!no_ground).then_some(params.sensor_height),
                ..Default::default()
            };
            let sim = simgen::simulate_sequence(&scene, &spec, &seq)?;
            std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            let mut files = Vec::new();
            for (t, f) in sim.iter().enumerate() {
                let name = format!("frame_{t:03}.rvpc");
                io::write_rvpc(&out.join(&name), &f.cloud)?;
                files.push(name);
            }
            let poses: Vec<RigidTransform> = sim.iter().map(|f| f.pose).collect();
            io::write_json(&out.join("poses.json"), &poses)?;
            io::write_json(&out.join("spec.json"), &spec)?;
            let current = sim.last().expect("at least one frame");
            let gts = simgen::boxes_in_ego(&current.boxes, &current.pose);
            io::write_boxes(&out.join("gts.jsonl"), &gts)?;
            io::write_json(
                &out.join("scene.json"),
                &json!({ "seed": seed, "params": params, "sequence": seq, "boxes": scene, "frames": sim, "files": files }),
            )?;
            print_json(&json!({
                "frames": files,
                "points": sim.iter().map(|f| f.cloud.len()).collect::<Vec<_>>(),
                "boxes": scene.len(),
            }));
        }
        Cmd::Fuse { frames, poses, out } => {
            let poses: Vec<RigidTransform> = io::read_json(&poses, "pose list")?;
            if poses.len() != frames.len() {
                bail!("{} frames but {} poses", frames.len(), poses.len());
            }
            for p in &poses {
                p.validate()?;
            }
            let sweeps = frames
                .iter()
                .zip(poses)
                .map(|(f, p)| {
                    Ok((
                        io::read_rvpc(f).with_context(|| format!("reading {}", f.display()))?,
                        p,
                    ))
                })
                .collect::<Result<Vec<_>>>()?;
            let fused = fuse_sweeps(&sweeps)?;
            io::write_rvpc(&out, &fused)?;
            print_json(&json!({ "points": fused.len(), "sweeps": sweeps.len() }));
        }
        Cmd::Project {
            spec,
            rounds,
            upscale,
            input,
            out,
            stats,
        } => {
            let spec = spec_from_arg(&spec)?;
            let cloud = io::read_rvpc(&input)?;
            let start = Instant::now();
            let (img, st) = project_mrv(&cloud, &spec, rounds)?;
            let elapsed = start.elapsed().as_secs_f64() * 1e3;
            let img = upscale_vertical(&img, upscale)?;
            io::write_range_image(&out, &img)?;
            let report = json!({
                "stats": st,
                "kept": st.kept(),
                "cumulative_kept_fraction": st.cumulative_kept_fraction(),
                "rejected": st.total_points - st.kept() - st.dropped_out_of_fan,
                "mrv_ms": elapsed,
                "image": { "height": img.height, "width": img.width, "rounds": img.rounds },
            });
            if let Some(p) = stats {
                io::write_json(&p, &report)?;
            }
            print_json(&report);
        }
        Cmd::Targets {
            img,
            gts,
            preds,
            out,
        } => {
            let img = io::read_range_image(&img)?;
            let gts = io::read_boxes(&gts)?;
            let preds = preds.map(|p| io::read_predictions(&p)).transpose()?;
            let t = build_targets_from_image(&img, &gts, preds.as_ref())?;
            io::write_json(&out, &t)?;
            print_json(&json!({
                "dynamic": t.dynamic,
                "positives": t.num_positives,
                "k_per_gt": t.per_gt.iter().map(|g| g.k).collect::<Vec<_>>(),
                "gts_without_candidates": t.gts_without_candidates,
            }));
        }
        Cmd::InitWeights { config, seed, out } => {
            let cfg: NetConfig = match config {
                Some(p) => io::read_json(&p, "network config")?,
                None => NetConfig::default(),
            };
            let w = init_weights(&cfg, seed)?;
            io::write_weights(&out, &w)?;
            print_json(
                &json!({ "parameters": w.parameter_count(), "config_hash": config_hash(&cfg), "seed": seed }),
            );
        }
        Cmd::Infer {
            img,
            weights,
            config,
            out,
            score_threshold,
            nms_threshold,
            top_k,
            nms_metric,
            dump_preds,
        } => {
            let cfg: Option<NetConfig> = config
                .map(|p| io::read_json(&p, "network config"))
                .transpose()?;
            let w = io::read_weights(&weights, cfg.as_ref())?;
            let img = io::read_range_image(&img)?;
            let dcfg = DetectConfig {
                rounds: img.rounds,
                upscale: img.row_repeat,
                score_threshold,
                nms_threshold,
                top_k,
                nms_metric: nms_metric.into(),
            };
            let t0 = Instant::now();
            let preds = forward(&img, &w)?;
            let t1 = Instant::now();
            let dets = decode_predictions(&img, &preds, &dcfg)?;
            let t2 = Instant::now();
            io::write_boxes(&out, &dets)?;
            if let Some(p) = dump_preds {
                io::write_predictions(&p, &preds)?;
            }
            let manifest = json!({
                "config_hash": config_hash(&w.config),
                "seed": w.config.weight_seed,
                "detect": dcfg,
                "detections": dets.len(),
                "timings_ms": {
                    "forward": (t1 - t0).as_secs_f64() * 1e3,
                    "decode_nms": (t2 - t1).as_secs_f64() * 1e3,
                },
                "machine": machine(),
            });
            io::write_json(&with_suffix(&out, ".manifest.json"), &manifest)?;
            print_json(&manifest);
        }
        Cmd::Nms {
            input,
            iou,
            metric,
            top_k,
            out,
        } => {
            let dets = io::read_boxes(&input)?;
            let keep = nms_3d(
                &dets,
                &NmsConfig {
                    iou_threshold: iou,
                    metric: metric.into(),
                    max_keep: top_k,
                },
            );
            let kept: Vec<_> = keep.iter().map(|&i| dets[i]).collect();
            io::write_boxes(&out, &kept)?;
            print_json(&json!({ "input": dets.len(), "kept": kept.len() }));
        }
        Cmd::Eval {
            dets,
            gts,
            out,
            config,
        } => {
            let cfg: EvalConfig = match config {
                Some(p) => io::read_json(&p, "eval config")?,
                None => EvalConfig::default(),
            };
            let sample = EvalSample {
                dets: io::read_boxes(&dets)?,
                gts: io::read_boxes(&gts)?,
            };
            let report = evaluate(&[sample], &cfg)?;
            io::write_json(&out, &report)?;
            let table = with_suffix(&out, ".txt");
            std::fs::write(&table, report.to_table())
                .with_context(|| format!("writing {}", table.display()))?;
            print!("{}", report.to_table());
        }
        Cmd::Bench {
            op,
            size,
            repeat,
            rounds,
            seed,
        } => bench(op, size, repeat, rounds, seed)?,
    }
    Ok(())
}

fn bench(op: BenchOp, size: usize, repeat: usize, rounds: usize, seed: u64) -> Result<()> {
    let report = match op {
        BenchOp::Mrv => {
            let spec = LidarSpec::nuscenes();
            let cloud = simgen::random_cloud(seed, size, 10, &spec, 60.0);
            let (_, stats) = project_mrv(&cloud, &spec, rounds)?;
            let cumulative: Vec<f64> = (1..=rounds)
                .map(|r| Ok(time_ms(repeat, || drop(project_mrv(&cloud, &spec, r))).0))
                .collect::<Result<_>>()?;
            let (median, p95) = time_ms(repeat, || drop(project_mrv(&cloud, &spec, rounds)));
            let mut proj = MrvProjector::new(&spec, PriorityRule::CurrentFrameFirst);
            let mut img = RangeImage::empty(&spec, rounds);
            proj.project_into(&cloud, rounds, &mut img)?;
            let (reused_median, reused_p95) = time_ms(repeat, || {
                proj.project_into(&cloud, rounds, &mut img)
                    .map(drop)
                    .unwrap_or(())
            });
            json!({
                "op": "mrv", "points": size, "rounds": rounds,
                "median_ms": median, "p95_ms": p95,
                "reused_median_ms": reused_median, "reused_p95_ms": reused_p95,
                "median_ms_by_rounds": cumulative,
                "kept_per_round": stats.kept_per_round,
            })
        }
        BenchOp::Conv => {
            let mut layer = ConvLayer::same(64, 64, 3, 1, 1);
            layer
                .weights
                .iter_mut()
                .enumerate()
                .for_each(|(i, v)| *v = ((i % 7) as f32 - 3.0) * 0.01);
            let input = FeatureMap::from_vec(
                64,
                32,
                size,
                (0..64 * 32 * size)
                    .map(|i| ((i % 13) as f32) * 0.1)
                    .collect(),
            )?;
            let (median, p95) = time_ms(repeat, || drop(conv2d(&input, &layer)));
            json!({ "op": "conv", "shape": [64, 32, size], "median_ms": median, "p95_ms": p95 })
        }
        BenchOp::Nms => {
            let dets = rvkit::boxes::random_boxes(seed, size, 50.0);
            let cfg = NmsConfig::default();
            let kept = nms_3d(&dets, &cfg).len();
            let (median, p95) = time_ms(repeat, || drop(nms_3d(&dets, &cfg)));
            json!({ "op": "nms", "boxes": size, "kept": kept, "median_ms": median, "p95_ms": p95 })
        }
    };
    let mut report = report;
    report["repeat"] = json!(repeat);
    report["machine"] = machine();
    print_json(&report);
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let threads = cli.threads;
    let result = match threads {
        Some(0) => Err(anyhow::anyhow!("--threads must be at least 1")),
        Some(n) => rvkit::parallel::with_threads(n, || run(cli.cmd)),
        None => run(cli.cmd),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = e
                .downcast_ref::<rvkit::Error>()
                .map_or("error", rvkit::Error::kind);
            // sources already quoted by their parent message are skipped
            let mut chain: Vec<String> = Vec::new();
            for c in e.chain() {
                let text = c.to_string();
                if !chain.last().is_some_and(|prev| prev.ends_with(&text)) {
                    chain.push(text);
                }
            }
            eprintln!(
                "{}",
                json!({ "error": { "kind": kind, "message": chain.join(": ") } })
            );
            ExitCode::FAILURE
        }
    }
}
