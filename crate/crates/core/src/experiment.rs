//! Experiment driver: flat key=value configs, sweep cross-products, and
//! deterministic CSV/JSON report emission.
//!
//! A config names a scene, a trajectory, pipeline flags and optional sweep
//! lists; each sweep combination runs the full frame loop and appends one
//! CSV row per frame plus one aggregate object. Identical config + scene
//! always produce byte-identical outputs.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde_json::{json, Value};
use thiserror::Error;

use crate::pipeline::{FrameMetrics, PipelineConfig, PipelineError, Simulation};
use crate::scene::{load_scene, Scene, SceneError};
use crate::trajectory::{
    gen_trajectory, load_trajectory, MotionMode, TrajError, Trajectory, TrajectoryParams,
};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("config line {line}: {msg}")]
    Config { line: usize, msg: String },
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Traj(#[from] TrajError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Image(#[from] crate::img::ImgError),
}

fn cfg_err(line: usize, msg: impl Into<String>) -> ExperimentError {
    ExperimentError::Config { line, msg: msg.into() }
}

/// One sweepable knob.
#[derive(Debug, Clone, PartialEq)]
pub enum SweepAxis {
    GridN(Vec<usize>),
    Buckets(Vec<usize>),
    Block(Vec<u32>),
    Udt(Vec<f64>),
    TrajMode(Vec<MotionMode>),
}

impl SweepAxis {
    fn len(&self) -> usize {
        match self {
            Self::GridN(v) => v.len(),
            Self::Buckets(v) => v.len(),
            Self::Block(v) => v.len(),
            Self::Udt(v) => v.len(),
            Self::TrajMode(v) => v.len(),
        }
    }

    fn apply(&self, idx: usize, pipeline: &mut PipelineConfig, traj: &mut TrajectoryParams) {
        match self {
            Self::GridN(v) => pipeline.grid_n = v[idx],
            Self::Buckets(v) => pipeline.n_buckets = v[idx],
            Self::Block(v) => pipeline.block_side = v[idx],
            Self::Udt(v) => pipeline.udt = v[idx],
            Self::TrajMode(v) => traj.mode = v[idx],
        }
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub scene: PathBuf,
    pub out_dir: PathBuf,
    pub traj: TrajectoryParams,
    pub traj_file: Option<PathBuf>,
    pub pipeline: PipelineConfig,
    pub emit_images: bool,
    pub psnr_vs_baseline: bool,
    pub sweeps: Vec<SweepAxis>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            scene: PathBuf::new(),
            out_dir: PathBuf::from("."),
            traj: TrajectoryParams::default(),
            traj_file: None,
            pipeline: PipelineConfig::default(),
            emit_images: false,
            psnr_vs_baseline: false,
            sweeps: Vec::new(),
        }
    }
}

/// Parses the documented flat key=value format ('#' starts a comment).
pub fn parse_config(text: &str) -> Result<ExperimentConfig, ExperimentError> {
    let mut cfg = ExperimentConfig::default();
    let mut scene_seen = false;
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| cfg_err(line_no, format!("expected `key = value`, got `{line}`")))?;
        let key = key.trim();
        let value = value.trim();
        let bad_value =
            |msg: &str| cfg_err(line_no, format!("key `{key}`: {msg} (got `{value}`)"));
        let parse_bool = || -> Result<bool, ExperimentError> {
            value.parse().map_err(|_| bad_value("expected true/false"))
        };
        let parse_f64 = || -> Result<f64, ExperimentError> {
            value.parse().map_err(|_| bad_value("expected a number"))
        };
        let parse_usize = || -> Result<usize, ExperimentError> {
            value.parse().map_err(|_| bad_value("expected an integer"))
        };
        match key {
            "scene" => {
                cfg.scene = PathBuf::from(value);
                scene_seen = true;
            }
            "out_dir" => cfg.out_dir = PathBuf::from(value),
            "emit_images" => cfg.emit_images = parse_bool()?,
            "psnr_vs_baseline" => cfg.psnr_vs_baseline = parse_bool()?,
            "traj.mode" => {
                cfg.traj.mode = value.parse().map_err(|e: String| cfg_err(line_no, e))?
            }
            "traj.frames" => cfg.traj.frames = parse_usize()?,
            "traj.fps" => cfg.traj.frame_rate = parse_f64()?,
            "traj.radius" => cfg.traj.orbit_radius = parse_f64()?,
            "traj.yaw_rate" => cfg.traj.yaw_rate_deg = parse_f64()?,
            "traj.pitch_rate" => cfg.traj.pitch_rate_deg = parse_f64()?,
            "traj.start_yaw" => cfg.traj.start_yaw_deg = parse_f64()?,
            "traj.start_pitch" => cfg.traj.start_pitch_deg = parse_f64()?,
            "traj.width" => cfg.traj.width = parse_usize()? as u32,
            "traj.height" => cfg.traj.height = parse_usize()? as u32,
            "traj.fx" => cfg.traj.fx = parse_f64()?,
            "traj.fy" => cfg.traj.fy = parse_f64()?,
            "traj.near" => cfg.traj.near = parse_f64()?,
            "traj.far" => cfg.traj.far = parse_f64()?,
            "traj.dynamic" => cfg.traj.dynamic_time = parse_bool()?,
            "traj.file" => cfg.traj_file = Some(PathBuf::from(value)),
            "pipeline.dr_fc" => cfg.pipeline.dr_fc = parse_bool()?,
            "pipeline.atg" => cfg.pipeline.atg = parse_bool()?,
            "pipeline.aii" => cfg.pipeline.aii = parse_bool()?,
            "pipeline.lut_exp" => cfg.pipeline.lut_exp = parse_bool()?,
            "pipeline.grid_n" => cfg.pipeline.grid_n = parse_usize()?,
            "pipeline.buckets" => cfg.pipeline.n_buckets = parse_usize()?,
            "pipeline.tile" => cfg.pipeline.tile_px = parse_usize()? as u32,
            "pipeline.block" => cfg.pipeline.block_side = parse_usize()? as u32,
            "pipeline.udt" => cfg.pipeline.udt = parse_f64()?,
            "pipeline.k" => cfg.pipeline.k_extremes = parse_usize()?,
            "pipeline.max_group" => {
                cfg.pipeline.max_group = if value == "auto" {
                    None
                } else {
                    Some(parse_usize()?)
                }
            }
            "pipeline.term_eps" => cfg.pipeline.term_eps = parse_f64()?,
            "pipeline.quantize16" => cfg.pipeline.quantize_f16 = parse_bool()?,
            "pipeline.lut_entries" => {
                cfg.pipeline.lut_mode = match value {
                    "exact" => crate::exp_lut::EntryMode::Exact,
                    "half" => crate::exp_lut::EntryMode::Half,
                    _ => return Err(bad_value("expected exact/half")),
                }
            }
            "pipeline.buffer_bytes" => cfg.pipeline.buffer_bytes = parse_usize()? as u64,
            "pipeline.burst_bytes" => cfg.pipeline.burst_bytes = parse_usize()? as u64,
            "pipeline.margin_px" => cfg.pipeline.cull_margin_px = parse_f64()?,
            "sweep.grid_n" | "sweep.buckets" => {
                let values: Result<Vec<usize>, _> =
                    value.split(',').map(|s| s.trim().parse::<usize>()).collect();
                let values = values.map_err(|_| bad_value("expected a list of integers"))?;
                cfg.sweeps.push(if key == "sweep.grid_n" {
                    SweepAxis::GridN(values)
                } else {
                    SweepAxis::Buckets(values)
                });
            }
            "sweep.block" => {
                let values: Result<Vec<u32>, _> =
                    value.split(',').map(|s| s.trim().parse::<u32>()).collect();
                cfg.sweeps
                    .push(SweepAxis::Block(values.map_err(|_| bad_value("expected a list of integers"))?));
            }
            "sweep.udt" => {
                let values: Result<Vec<f64>, _> =
                    value.split(',').map(|s| s.trim().parse::<f64>()).collect();
                cfg.sweeps
                    .push(SweepAxis::Udt(values.map_err(|_| bad_value("expected a list of numbers"))?));
            }
            "sweep.traj.mode" => {
                let values: Result<Vec<MotionMode>, String> =
                    value.split(',').map(|s| s.trim().parse()).collect();
                cfg.sweeps
                    .push(SweepAxis::TrajMode(values.map_err(|e| cfg_err(line_no, e))?));
            }
            other => return Err(cfg_err(line_no, format!("unknown key `{other}`"))),
        }
    }
    if !scene_seen {
        return Err(cfg_err(0, "missing required key `scene`"));
    }
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig, ExperimentError> {
    parse_config(&std::fs::read_to_string(path)?)
}

/// Everything one experiment run produced, with the file bytes retained so
/// callers can compare runs without re-reading.
#[derive(Debug)]
pub struct ExperimentOutcome {
    pub csv_path: PathBuf,
    pub json_path: PathBuf,
    pub image_paths: Vec<PathBuf>,
    pub csv_bytes: Vec<u8>,
    pub aggregate: Value,
    pub per_frame: Vec<(ComboLabel, FrameMetrics)>,
}

/// The swept knob values a row belongs to.
#[derive(Debug, Clone, PartialEq)]
pub struct ComboLabel {
    pub combo: usize,
    pub dr_fc: bool,
    pub atg: bool,
    pub aii: bool,
    pub lut_exp: bool,
    pub grid_n: usize,
    pub buckets: usize,
    pub block: u32,
    pub udt: f64,
    pub traj_mode: MotionMode,
}

impl ComboLabel {
    const CSV_HEADER: [&'static str; 10] = [
        "combo", "dr_fc", "atg", "aii", "lut_exp", "grid_n", "buckets", "block", "udt",
        "traj_mode",
    ];

    fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{:?},{}",
            self.combo,
            self.dr_fc,
            self.atg,
            self.aii,
            self.lut_exp,
            self.grid_n,
            self.buckets,
            self.block,
            self.udt,
            self.traj_mode
        )
    }
}

fn trajectory_for(cfg: &ExperimentConfig, traj: &TrajectoryParams, scene: &Scene) -> Result<Trajectory, ExperimentError> {
    if let Some(path) = &cfg.traj_file {
        Ok(load_trajectory(path)?)
    } else {
        let mut params = traj.clone();
        params.dynamic_time = params.dynamic_time && scene.dynamic;
        Ok(gen_trajectory(&params, scene.centroid())?)
    }
}

/// Runs every sweep combination and writes `run.csv`, `aggregate.json` and
/// (optionally) per-frame PPM images under `cfg.out_dir`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutcome, ExperimentError> {
    let (scene, embedded_layout) = load_scene(&cfg.scene)?;
    std::fs::create_dir_all(&cfg.out_dir)?;

    let combo_count: usize = cfg.sweeps.iter().map(SweepAxis::len).product::<usize>().max(1);
    let mut csv = String::new();
    csv.push_str(&ComboLabel::CSV_HEADER.join(","));
    csv.push(',');
    csv.push_str(&FrameMetrics::CSV_HEADER.join(","));
    csv.push('\n');

    let mut aggregates = Vec::new();
    let mut per_frame = Vec::new();
    let mut image_paths = Vec::new();

    for combo in 0..combo_count {
        let mut pipeline = cfg.pipeline.clone();
        let mut traj_params = cfg.traj.clone();
        let mut rem = combo;
        for axis in &cfg.sweeps {
            let idx = rem % axis.len();
            rem /= axis.len();
            axis.apply(idx, &mut pipeline, &mut traj_params);
        }
        let label = ComboLabel {
            combo,
            dr_fc: pipeline.dr_fc,
            atg: pipeline.atg,
            aii: pipeline.aii,
            lut_exp: pipeline.lut_exp,
            grid_n: pipeline.grid_n,
            buckets: pipeline.n_buckets,
            block: pipeline.block_side,
            udt: pipeline.udt,
            traj_mode: traj_params.mode,
        };

        let trajectory = trajectory_for(cfg, &traj_params, &scene)?;
        let mut sim = Simulation::with_layout(scene.clone(), embedded_layout.clone(), pipeline.clone())?;
        let mut reference = if cfg.psnr_vs_baseline {
            let base = PipelineConfig {
                dr_fc: false,
                atg: false,
                aii: false,
                lut_exp: false,
                quantize_f16: false,
                ..pipeline.clone()
            };
            Some(Simulation::new(scene.clone(), base)?)
        } else {
            None
        };

        let mut rows: Vec<FrameMetrics> = Vec::with_capacity(trajectory.frames.len());
        for (k, (cam, t)) in trajectory.frames.iter().enumerate() {
            let (image, mut metrics) = sim.render_frame(cam, *t)?;
            if let Some(ref_sim) = &mut reference {
                let (ref_image, _) = ref_sim.render_frame(cam, *t)?;
                metrics.psnr_vs_reference =
                    Some(crate::img::compare_images(&image, &ref_image).expect("same dims"));
            }
            if cfg.emit_images {
                let name = format!("combo{combo:02}_frame{k:04}.ppm");
                let path = cfg.out_dir.join(&name);
                image.write_ppm(&path)?;
                image_paths.push(path);
            }
            csv.push_str(&label.csv_row());
            csv.push(',');
            csv.push_str(&metrics.csv_row());
            csv.push('\n');
            rows.push(metrics.clone());
            per_frame.push((label.clone(), metrics));
        }
        aggregates.push(aggregate_combo(&label, &rows));
    }

    let aggregate = Value::Array(aggregates);
    let csv_path = cfg.out_dir.join("run.csv");
    let json_path = cfg.out_dir.join("aggregate.json");
    std::fs::write(&csv_path, csv.as_bytes())?;
    let mut jf = std::io::BufWriter::new(std::fs::File::create(&json_path)?);
    serde_json::to_writer_pretty(&mut jf, &aggregate)?;
    jf.write_all(b"\n")?;
    jf.flush()?;

    Ok(ExperimentOutcome {
        csv_path,
        json_path,
        image_paths,
        csv_bytes: csv.into_bytes(),
        aggregate,
        per_frame,
    })
}

/// Sums and means of every numeric per-frame field.
fn aggregate_combo(label: &ComboLabel, rows: &[FrameMetrics]) -> Value {
    let mut totals = serde_json::Map::new();
    let mut psnr_values = Vec::new();
    for row in rows {
        let obj = serde_json::to_value(row).expect("metrics serialize");
        for (key, value) in obj.as_object().unwrap() {
            match value {
                Value::Number(n) => {
                    let add = n.as_f64().unwrap_or(f64::NAN);
                    let slot = totals.entry(key.clone()).or_insert(json!(0.0));
                    *slot = json!(slot.as_f64().unwrap() + add);
                }
                Value::Null => {}
                _ => {}
            }
        }
        if let Some(p) = row.psnr_vs_reference {
            psnr_values.push(p);
        }
    }
    let frames = rows.len().max(1) as f64;
    let means: serde_json::Map<String, Value> = totals
        .iter()
        .map(|(k, v)| (k.clone(), json!(v.as_f64().unwrap() / frames)))
        .collect();
    let psnr_mean = if psnr_values.is_empty() {
        Value::Null
    } else {
        // +∞ sentinels (identical frames) propagate through the mean.
        json!(psnr_values.iter().sum::<f64>() / psnr_values.len() as f64)
    };
    json!({
        "combo": label.combo,
        "params": {
            "dr_fc": label.dr_fc,
            "atg": label.atg,
            "aii": label.aii,
            "lut_exp": label.lut_exp,
            "grid_n": label.grid_n,
            "buckets": label.buckets,
            "block": label.block,
            "udt": label.udt,
            "traj_mode": label.traj_mode.to_string(),
        },
        "frames": rows.len(),
        "totals": Value::Object(totals),
        "means": Value::Object(means),
        "psnr_mean": psnr_mean,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{gen_synthetic, save_scene, SynthSpec};

    fn write_demo_scene(dir: &Path) -> PathBuf {
        let scene = gen_synthetic(&SynthSpec {
            count: 250,
            extent: 60.0,
            seed: 77,
            ..Default::default()
        });
        let path = dir.join("demo.g4ds");
        save_scene(&path, &scene, None).unwrap();
        path
    }

    #[test]
    fn parse_rejects_unknown_keys_with_line_numbers() {
        let err = parse_config("scene = x.g4ds\nnot_a_key = 3\n").unwrap_err();
        match err {
            ExperimentError::Config { line, msg } => {
                assert_eq!(line, 2);
                assert!(msg.contains("not_a_key"));
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(parse_config("pipeline.udt = 0.5\n").is_err(), "scene is required");
        let err = parse_config("scene = x\npipeline.udt = yes\n").unwrap_err();
        assert!(matches!(err, ExperimentError::Config { line: 2, .. }));
    }

    #[test]
    fn parse_reads_flags_and_sweeps() {
        let cfg = parse_config(
            "scene = s.g4ds\n\
             out_dir = out\n\
             pipeline.dr_fc = true\n\
             pipeline.udt = 0.3   # comment\n\
             sweep.grid_n = 4, 8, 16\n\
             sweep.traj.mode = average, extreme\n",
        )
        .unwrap();
        assert!(cfg.pipeline.dr_fc);
        assert_eq!(cfg.pipeline.udt, 0.3);
        assert_eq!(cfg.sweeps.len(), 2);
        assert_eq!(cfg.sweeps[0], SweepAxis::GridN(vec![4, 8, 16]));
        assert_eq!(
            cfg.sweeps[1],
            SweepAxis::TrajMode(vec![MotionMode::Average, MotionMode::Extreme])
        );
    }

    #[test]
    fn sweep_row_count_is_product_of_axes_times_frames() {
        let dir = tempfile::tempdir().unwrap();
        let scene_path = write_demo_scene(dir.path());
        let mut cfg = ExperimentConfig {
            scene: scene_path,
            out_dir: dir.path().join("out"),
            ..Default::default()
        };
        cfg.traj.frames = 2;
        cfg.sweeps.push(SweepAxis::GridN(vec![2, 4, 8]));
        cfg.pipeline.dr_fc = true;
        let outcome = run_experiment(&cfg).unwrap();
        assert_eq!(outcome.per_frame.len(), 3 * 2);
        let lines: Vec<&str> = std::str::from_utf8(&outcome.csv_bytes).unwrap().lines().collect();
        assert_eq!(lines.len(), 1 + 6);
        assert!(lines[0].starts_with("combo,"));
        assert!(lines[0].ends_with("psnr_vs_reference"));
    }

    #[test]
    fn rerun_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let scene_path = write_demo_scene(dir.path());
        let make = |out: &str| ExperimentConfig {
            scene: scene_path.clone(),
            out_dir: dir.path().join(out),
            emit_images: true,
            traj: TrajectoryParams { frames: 2, ..Default::default() },
            pipeline: PipelineConfig { dr_fc: true, atg: true, aii: true, ..Default::default() },
            ..Default::default()
        };
        let a = run_experiment(&make("a")).unwrap();
        let b = run_experiment(&make("b")).unwrap();
        assert_eq!(a.csv_bytes, b.csv_bytes);
        assert_eq!(a.image_paths.len(), b.image_paths.len());
        for (pa, pb) in a.image_paths.iter().zip(&b.image_paths) {
            assert_eq!(std::fs::read(pa).unwrap(), std::fs::read(pb).unwrap());
        }
        assert_eq!(a.aggregate, b.aggregate);
    }

    #[test]
    fn aggregates_match_independent_recomputation() {
        let dir = tempfile::tempdir().unwrap();
        let scene_path = write_demo_scene(dir.path());
        let cfg = ExperimentConfig {
            scene: scene_path,
            out_dir: dir.path().join("agg"),
            traj: TrajectoryParams { frames: 3, ..Default::default() },
            ..Default::default()
        };
        let outcome = run_experiment(&cfg).unwrap();
        let total_fetched: u64 = outcome.per_frame.iter().map(|(_, m)| m.fetched_records).sum();
        let agg = outcome.aggregate.as_array().unwrap();
        assert_eq!(agg.len(), 1);
        assert_eq!(
            agg[0]["totals"]["fetched_records"].as_f64().unwrap(),
            total_fetched as f64
        );
        assert_eq!(
            agg[0]["means"]["fetched_records"].as_f64().unwrap(),
            total_fetched as f64 / 3.0
        );
        assert_eq!(agg[0]["frames"].as_u64().unwrap(), 3);
    }

    #[test]
    fn psnr_against_baseline_is_infinite_for_lossless_flags() {
        let dir = tempfile::tempdir().unwrap();
        let scene_path = write_demo_scene(dir.path());
        let cfg = ExperimentConfig {
            scene: scene_path,
            out_dir: dir.path().join("psnr"),
            psnr_vs_baseline: true,
            traj: TrajectoryParams { frames: 2, ..Default::default() },
            pipeline: PipelineConfig { dr_fc: true, atg: true, aii: true, ..Default::default() },
            ..Default::default()
        };
        let outcome = run_experiment(&cfg).unwrap();
        for (_, m) in &outcome.per_frame {
            assert_eq!(m.psnr_vs_reference, Some(f64::INFINITY));
        }
    }
}
