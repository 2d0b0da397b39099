use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nalgebra::Vector3;

use gsplatsim::exp_lut::{exp_e, sweep_frac_error, EntryMode, LutBank};
use gsplatsim::experiment::{load_config, run_experiment, ExperimentConfig, SweepAxis};
use gsplatsim::frustum_grid::build_layout_with_depth;
use gsplatsim::img::{compare_images, Image};
use gsplatsim::pipeline::PipelineConfig;
use gsplatsim::scene::{gen_synthetic, load_scene, save_scene, SynthSpec};
use gsplatsim::trajectory::{gen_trajectory, save_trajectory, MotionMode, TrajectoryParams};

#[derive(Parser)]
#[command(
    name = "gsplatsim",
    version,
    about = "Gaussian-splatting renderer with an access-exact memory cost model"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a seeded synthetic scene file.
    GenScene(GenSceneArgs),
    /// Generate an orbit trajectory file.
    GenTraj(GenTrajArgs),
    /// Render one configuration over a trajectory and write reports.
    Render(RenderArgs),
    /// Run a sweep experiment from a config file.
    Sweep(SweepArgs),
    /// Dump the exponential LUT tables and their measured error bounds.
    LutAudit(LutAuditArgs),
    /// PSNR between two PPM images.
    Compare(CompareArgs),
}

#[derive(Args)]
struct GenSceneArgs {
    /// Output scene path (.g4ds).
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 10_000)]
    count: usize,
    /// Side length of the populated cube (scene units).
    #[arg(long, default_value_t = 100.0)]
    extent: f64,
    #[arg(long, default_value_t = 0.8)]
    base_scale: f64,
    #[arg(long, default_value_t = 1.0)]
    scale_jitter: f64,
    /// Vertical stretch factor (1 = isotropic).
    #[arg(long, default_value_t = 1.0)]
    elongation: f64,
    /// Peak drift speed (scene units per unit time).
    #[arg(long, default_value_t = 5.0)]
    motion: f64,
    /// Generate a static scene (time-independent).
    #[arg(long = "static", default_value_t = false)]
    static_scene: bool,
    #[arg(long, default_value_t = 1)]
    sh_degree: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Embed a culling layout built at this grid resolution.
    #[arg(long)]
    grid_n: Option<usize>,
}

#[derive(Args)]
struct GenTrajArgs {
    #[arg(long)]
    out: PathBuf,
    /// Scene whose centroid the orbit targets (origin when omitted).
    #[arg(long)]
    scene: Option<PathBuf>,
    #[arg(long, default_value = "average")]
    mode: MotionMode,
    #[arg(long, default_value_t = 30)]
    frames: usize,
    #[arg(long, default_value_t = 30.0)]
    fps: f64,
    #[arg(long, default_value_t = 120.0)]
    radius: f64,
    /// Yaw rate in °/s (custom mode).
    #[arg(long, default_value_t = 0.0)]
    yaw_rate: f64,
    /// Pitch rate in °/s (custom mode).
    #[arg(long, default_value_t = 0.0)]
    pitch_rate: f64,
    #[arg(long, default_value_t = 256)]
    width: u32,
    #[arg(long, default_value_t = 256)]
    height: u32,
    #[arg(long, default_value_t = 300.0)]
    fx: f64,
    #[arg(long, default_value_t = 300.0)]
    fy: f64,
    #[arg(long, default_value_t = 0.1)]
    near: f64,
    #[arg(long, default_value_t = 1e4)]
    far: f64,
    /// Pin the query time at 0.5 instead of sweeping [0, 1].
    #[arg(long, default_value_t = false)]
    still_time: bool,
}

#[derive(Args)]
struct PipelineArgs {
    #[arg(long, default_value_t = false)]
    dr_fc: bool,
    #[arg(long, default_value_t = false)]
    atg: bool,
    #[arg(long, default_value_t = false)]
    aii: bool,
    #[arg(long, default_value_t = false)]
    lut_exp: bool,
    #[arg(long, default_value_t = 4)]
    grid_n: usize,
    #[arg(long, default_value_t = 8)]
    buckets: usize,
    #[arg(long, default_value_t = 16)]
    tile: u32,
    #[arg(long, default_value_t = 4)]
    block: u32,
    #[arg(long, default_value_t = 0.5)]
    udt: f64,
    #[arg(long, default_value_t = 4)]
    k_extremes: usize,
    /// Group size cap in blocks ("auto" derives it from the buffer).
    #[arg(long, default_value = "auto")]
    max_group: String,
    #[arg(long, default_value_t = 1e-4)]
    term_eps: f64,
    #[arg(long, default_value_t = false)]
    quantize16: bool,
    /// LUT entry precision: exact or half.
    #[arg(long, default_value = "exact")]
    lut_entries: String,
    #[arg(long, default_value_t = 262_144)]
    buffer_bytes: u64,
    #[arg(long, default_value_t = 64)]
    burst_bytes: u64,
    #[arg(long, default_value_t = 8.0)]
    margin_px: f64,
}

impl PipelineArgs {
    fn to_config(&self) -> Result<PipelineConfig, String> {
        let max_group = match self.max_group.as_str() {
            "auto" => None,
            s => Some(s.parse::<usize>().map_err(|_| format!("bad max_group `{s}`"))?),
        };
        let lut_mode = match self.lut_entries.as_str() {
            "exact" => EntryMode::Exact,
            "half" => EntryMode::Half,
            s => return Err(format!("bad lut_entries `{s}` (exact/half)")),
        };
        Ok(PipelineConfig {
            dr_fc: self.dr_fc,
            atg: self.atg,
            aii: self.aii,
            lut_exp: self.lut_exp,
            grid_n: self.grid_n,
            n_buckets: self.buckets,
            tile_px: self.tile,
            block_side: self.block,
            udt: self.udt,
            k_extremes: self.k_extremes,
            max_group,
            term_eps: self.term_eps,
            quantize_f16: self.quantize16,
            lut_mode,
            buffer_bytes: self.buffer_bytes,
            burst_bytes: self.burst_bytes,
            cull_margin_px: self.margin_px,
            ..Default::default()
        })
    }
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    scene: PathBuf,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
    #[arg(long, default_value = "average")]
    traj_mode: MotionMode,
    #[arg(long, default_value_t = 30)]
    frames: usize,
    #[arg(long, default_value_t = 120.0)]
    radius: f64,
    /// Use a saved trajectory file instead of generating an orbit.
    #[arg(long)]
    traj_file: Option<PathBuf>,
    /// Write a PPM image per frame.
    #[arg(long, default_value_t = false)]
    images: bool,
    /// Also render the all-off baseline and record per-frame PSNR.
    #[arg(long, default_value_t = false)]
    psnr_vs_baseline: bool,
    #[command(flatten)]
    pipeline: PipelineArgs,
}

#[derive(Args)]
struct SweepArgs {
    /// Experiment config file (flat key = value lines).
    #[arg(long)]
    config: PathBuf,
}

#[derive(Args)]
struct LutAuditArgs {
    /// Random probes for the continuous-input bound.
    #[arg(long, default_value_t = 100_000)]
    probes: u64,
}

#[derive(Args)]
struct CompareArgs {
    a: PathBuf,
    b: PathBuf,
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<(), String> {
    match cli.command {
        Command::GenScene(args) => gen_scene(args),
        Command::GenTraj(args) => gen_traj(args),
        Command::Render(args) => render(args),
        Command::Sweep(args) => sweep(args),
        Command::LutAudit(args) => lut_audit(args),
        Command::Compare(args) => {
            let a = Image::read_ppm(&args.a).map_err(|e| e.to_string())?;
            let b = Image::read_ppm(&args.b).map_err(|e| e.to_string())?;
            let psnr = compare_images(&a, &b).map_err(|e| e.to_string())?;
            println!("{psnr:?}");
            Ok(())
        }
    }
}

fn gen_scene(args: GenSceneArgs) -> Result<(), String> {
    let spec = SynthSpec {
        count: args.count,
        extent: args.extent,
        base_scale: args.base_scale,
        scale_jitter: args.scale_jitter,
        elongation: args.elongation,
        motion_amplitude: args.motion,
        dynamic: !args.static_scene,
        sh_degree: args.sh_degree,
        seed: args.seed,
        ..Default::default()
    };
    if args.sh_degree > 3 {
        return Err(format!("sh_degree {} not supported (0..=3)", args.sh_degree));
    }
    let scene = gen_synthetic(&spec);
    let layout = match args.grid_n {
        Some(n) if !scene.is_empty() => {
            let t_cells = if scene.dynamic { n } else { 1 };
            Some(
                build_layout_with_depth(&scene.gaussians, n, t_cells)
                    .map_err(|e| e.to_string())?,
            )
        }
        _ => None,
    };
    save_scene(&args.out, &scene, layout.as_ref()).map_err(|e| e.to_string())?;
    println!(
        "wrote {} ({} records, sh degree {}, {}{})",
        args.out.display(),
        scene.len(),
        scene.sh_degree,
        if scene.dynamic { "dynamic" } else { "static" },
        layout
            .as_ref()
            .map(|l| format!(", layout {}³×{}", l.grid_n, l.t_cells))
            .unwrap_or_default()
    );
    Ok(())
}

fn gen_traj(args: GenTrajArgs) -> Result<(), String> {
    let centroid = match &args.scene {
        Some(path) => load_scene(path).map_err(|e| e.to_string())?.0.centroid(),
        None => Vector3::zeros(),
    };
    let params = TrajectoryParams {
        mode: args.mode,
        yaw_rate_deg: args.yaw_rate,
        pitch_rate_deg: args.pitch_rate,
        frame_rate: args.fps,
        orbit_radius: args.radius,
        frames: args.frames,
        dynamic_time: !args.still_time,
        width: args.width,
        height: args.height,
        fx: args.fx,
        fy: args.fy,
        near: args.near,
        far: args.far,
        ..Default::default()
    };
    let traj = gen_trajectory(&params, centroid).map_err(|e| e.to_string())?;
    save_trajectory(&args.out, &traj, centroid).map_err(|e| e.to_string())?;
    println!("wrote {} ({} frames)", args.out.display(), traj.frames.len());
    Ok(())
}

fn render(args: RenderArgs) -> Result<(), String> {
    let pipeline = args.pipeline.to_config()?;
    let cfg = ExperimentConfig {
        scene: args.scene,
        out_dir: args.out_dir,
        traj: TrajectoryParams {
            mode: args.traj_mode,
            frames: args.frames,
            orbit_radius: args.radius,
            ..Default::default()
        },
        traj_file: args.traj_file,
        pipeline,
        emit_images: args.images,
        psnr_vs_baseline: args.psnr_vs_baseline,
        sweeps: Vec::new(),
    };
    let outcome = run_experiment(&cfg).map_err(|e| e.to_string())?;
    print_outcome_summary(&outcome);
    Ok(())
}

fn sweep(args: SweepArgs) -> Result<(), String> {
    let cfg = load_config(&args.config).map_err(|e| e.to_string())?;
    if cfg.sweeps.is_empty() {
        // Plain single run; still a valid config.
        let outcome = run_experiment(&cfg).map_err(|e| e.to_string())?;
        print_outcome_summary(&outcome);
        return Ok(());
    }
    describe_sweeps(&cfg.sweeps);
    let outcome = run_experiment(&cfg).map_err(|e| e.to_string())?;
    print_outcome_summary(&outcome);
    Ok(())
}

fn describe_sweeps(sweeps: &[SweepAxis]) {
    for axis in sweeps {
        match axis {
            SweepAxis::GridN(v) => println!("sweep grid_n: {v:?}"),
            SweepAxis::Buckets(v) => println!("sweep buckets: {v:?}"),
            SweepAxis::Block(v) => println!("sweep block: {v:?}"),
            SweepAxis::Udt(v) => println!("sweep udt: {v:?}"),
            SweepAxis::TrajMode(v) => {
                let names: Vec<String> = v.iter().map(|m| m.to_string()).collect();
                println!("sweep traj.mode: {names:?}");
            }
        }
    }
}

fn print_outcome_summary(outcome: &gsplatsim::experiment::ExperimentOutcome) {
    println!("wrote {}", outcome.csv_path.display());
    println!("wrote {}", outcome.json_path.display());
    if !outcome.image_paths.is_empty() {
        println!("wrote {} images", outcome.image_paths.len());
    }
    for combo in outcome.aggregate.as_array().into_iter().flatten() {
        let c = combo["combo"].as_u64().unwrap_or(0);
        let fetched = combo["totals"]["fetched_records"].as_f64().unwrap_or(0.0);
        let misses = combo["totals"]["buffer_misses"].as_f64().unwrap_or(0.0);
        let stages = combo["totals"]["sort_stages"].as_f64().unwrap_or(0.0);
        let ce = combo["totals"]["sort_compare_exchanges"].as_f64().unwrap_or(0.0);
        println!(
            "combo {c}: fetched={fetched:.0} buffer_misses={misses:.0} sort_stages={stages:.0} compare_exchanges={ce:.0}"
        );
    }
}

fn lut_audit(args: LutAuditArgs) -> Result<(), String> {
    use rand::prelude::*;
    let mut out = serde_json::Map::new();
    for (name, mode) in [("exact", EntryMode::Exact), ("half", EntryMode::Half)] {
        let bank = LutBank::new(mode);
        let tables: Vec<Vec<f64>> =
            (0..4).map(|k| (0..8).map(|j| bank.entry(k, j)).collect()).collect();
        let sweep = sweep_frac_error(&bank);
        let mut continuous_max = 0.0f64;
        let mut continuous_arg = 0.0f64;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(12345);
        for _ in 0..args.probes {
            let x = rng.random_range(-20.0..0.0);
            let got = exp_e(x, &bank);
            let rel = ((got - x.exp()) / x.exp()).abs();
            if rel > continuous_max {
                continuous_max = rel;
                continuous_arg = x;
            }
        }
        out.insert(
            name.to_string(),
            serde_json::json!({
                "tables": tables,
                "grid_sweep_max_rel_error": sweep.max_rel_error,
                "grid_sweep_worst_frac12": sweep.worst_frac12,
                "continuous_max_rel_error": continuous_max,
                "continuous_worst_x": continuous_arg,
            }),
        );
    }
    println!("{}", serde_json::to_string_pretty(&serde_json::Value::Object(out)).unwrap());
    Ok(())
}
