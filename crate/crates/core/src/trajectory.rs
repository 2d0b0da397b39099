//! Head-motion camera trajectories: an orbit around the scene centroid with
//! per-frame yaw/pitch increments derived from measured viewing speeds.
//!
//! The `Average` preset uses the median screen-viewing head speeds
//! (14.8°/s latitude, 27.6°/s longitude); `Extreme` drives both axes at the
//! 180°/s maximum.

use std::io::{BufRead, Write};
use std::path::Path;

use nalgebra::Vector3;
use thiserror::Error;

use crate::gaussian::{Camera, MathError};

pub const AVERAGE_PITCH_DEG_PER_S: f64 = 14.8;
pub const AVERAGE_YAW_DEG_PER_S: f64 = 27.6;
pub const EXTREME_DEG_PER_S: f64 = 180.0;
const PITCH_CLAMP_DEG: f64 = 85.0;

#[derive(Debug, Error)]
pub enum TrajError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Camera(#[from] MathError),
    #[error("malformed trajectory file: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MotionMode {
    Average,
    Extreme,
    /// Explicit yaw/pitch rates from the params.
    Custom,
}

impl std::str::FromStr for MotionMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "average" => Ok(Self::Average),
            "extreme" => Ok(Self::Extreme),
            "custom" => Ok(Self::Custom),
            other => Err(format!("unknown motion mode `{other}`")),
        }
    }
}

impl std::fmt::Display for MotionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Average => "average",
            Self::Extreme => "extreme",
            Self::Custom => "custom",
        })
    }
}

#[derive(Debug, Clone)]
pub struct TrajectoryParams {
    pub mode: MotionMode,
    /// Used only in `Custom` mode (degrees per second).
    pub yaw_rate_deg: f64,
    pub pitch_rate_deg: f64,
    pub frame_rate: f64,
    pub orbit_radius: f64,
    pub frames: usize,
    pub start_yaw_deg: f64,
    pub start_pitch_deg: f64,
    /// Query times advance linearly over [0, 1] when true; pinned at 0.5
    /// otherwise.
    pub dynamic_time: bool,
    pub width: u32,
    pub height: u32,
    pub fx: f64,
    pub fy: f64,
    pub near: f64,
    pub far: f64,
}

impl Default for TrajectoryParams {
    fn default() -> Self {
        Self {
            mode: MotionMode::Average,
            yaw_rate_deg: 0.0,
            pitch_rate_deg: 0.0,
            frame_rate: 30.0,
            orbit_radius: 120.0,
            frames: 30,
            start_yaw_deg: 0.0,
            start_pitch_deg: 5.0,
            dynamic_time: true,
            width: 256,
            height: 256,
            fx: 300.0,
            fy: 300.0,
            near: 0.1,
            far: 1e4,
        }
    }
}

impl TrajectoryParams {
    pub fn rates_deg_per_s(&self) -> (f64, f64) {
        match self.mode {
            MotionMode::Average => (AVERAGE_YAW_DEG_PER_S, AVERAGE_PITCH_DEG_PER_S),
            MotionMode::Extreme => (EXTREME_DEG_PER_S, EXTREME_DEG_PER_S),
            MotionMode::Custom => (self.yaw_rate_deg, self.pitch_rate_deg),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    pub frames: Vec<(Camera, f64)>,
}

/// Orbit cameras around `centroid`, yaw and pitch advancing by rate/fps per
/// frame, pitch clamped to ±85°, query time advancing linearly.
pub fn gen_trajectory(params: &TrajectoryParams, centroid: Vector3<f64>) -> Result<Trajectory, TrajError> {
    let (yaw_rate, pitch_rate) = params.rates_deg_per_s();
    assert!(yaw_rate >= 0.0 && pitch_rate >= 0.0 && params.frame_rate > 0.0);
    let mut frames = Vec::with_capacity(params.frames);
    for k in 0..params.frames {
        let step = k as f64 / params.frame_rate;
        let yaw = (params.start_yaw_deg + yaw_rate * step).to_radians();
        let pitch = (params.start_pitch_deg + pitch_rate * step)
            .clamp(-PITCH_CLAMP_DEG, PITCH_CLAMP_DEG)
            .to_radians();
        let dir = Vector3::new(pitch.cos() * yaw.sin(), pitch.sin(), pitch.cos() * yaw.cos());
        let eye = centroid + dir * params.orbit_radius;
        let cam = Camera::look_at(
            eye,
            centroid,
            params.fx,
            params.fy,
            params.width,
            params.height,
            params.near,
            params.far,
        )?;
        let t = if params.dynamic_time {
            if params.frames > 1 { k as f64 / (params.frames - 1) as f64 } else { 0.0 }
        } else {
            0.5
        };
        frames.push((cam, t));
    }
    Ok(Trajectory { frames })
}

/// Writes the trajectory as a line-oriented text file (shared intrinsics
/// header followed by per-frame time and eye position; every camera looks at
/// the recorded centroid).
pub fn save_trajectory(
    path: &Path,
    traj: &Trajectory,
    centroid: Vector3<f64>,
) -> Result<(), TrajError> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "G4TRAJ 1")?;
    let (cam0, _) = traj
        .frames
        .first()
        .ok_or_else(|| TrajError::Malformed("empty trajectory".into()))?;
    writeln!(
        w,
        "{} {} {:?} {:?} {:?} {:?}",
        cam0.width, cam0.height, cam0.fx, cam0.fy, cam0.near, cam0.far
    )?;
    writeln!(w, "{:?} {:?} {:?}", centroid.x, centroid.y, centroid.z)?;
    writeln!(w, "{}", traj.frames.len())?;
    for (cam, t) in &traj.frames {
        let eye = cam.position();
        writeln!(w, "{:?} {:?} {:?} {:?}", t, eye.x, eye.y, eye.z)?;
    }
    Ok(())
}

pub fn load_trajectory(path: &Path) -> Result<Trajectory, TrajError> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut lines = f.lines();
    let mut next = || -> Result<String, TrajError> {
        lines
            .next()
            .ok_or_else(|| TrajError::Malformed("truncated file".into()))?
            .map_err(TrajError::from)
    };
    if next()?.trim() != "G4TRAJ 1" {
        return Err(TrajError::Malformed("bad header".into()));
    }
    let intr = next()?;
    let fields: Vec<f64> = intr
        .split_whitespace()
        .map(|s| s.parse::<f64>().map_err(|_| TrajError::Malformed(format!("number `{s}`"))))
        .collect::<Result<_, _>>()?;
    if fields.len() != 6 {
        return Err(TrajError::Malformed("intrinsics line".into()));
    }
    let (width, height, fx, fy, near, far) =
        (fields[0] as u32, fields[1] as u32, fields[2], fields[3], fields[4], fields[5]);
    let cline = next()?;
    let c: Vec<f64> = cline
        .split_whitespace()
        .map(|s| s.parse::<f64>().map_err(|_| TrajError::Malformed(format!("number `{s}`"))))
        .collect::<Result<_, _>>()?;
    if c.len() != 3 {
        return Err(TrajError::Malformed("centroid line".into()));
    }
    let centroid = Vector3::new(c[0], c[1], c[2]);
    let count: usize = next()?
        .trim()
        .parse()
        .map_err(|_| TrajError::Malformed("frame count".into()))?;
    let mut frames = Vec::with_capacity(count);
    for _ in 0..count {
        let line = next()?;
        let v: Vec<f64> = line
            .split_whitespace()
            .map(|s| s.parse::<f64>().map_err(|_| TrajError::Malformed(format!("number `{s}`"))))
            .collect::<Result<_, _>>()?;
        if v.len() != 4 {
            return Err(TrajError::Malformed("frame line".into()));
        }
        let cam = Camera::look_at(
            Vector3::new(v[1], v[2], v[3]),
            centroid,
            fx,
            fy,
            width,
            height,
            near,
            far,
        )?;
        frames.push((cam, v[0]));
    }
    Ok(Trajectory { frames })
}
