//! Scene container: a little-endian binary format holding 4D Gaussian
//! records (raw covariances or scale+rotor specs), with an optional embedded
//! grid layout so the offline culling phase can be cached, plus the seeded
//! synthetic scene generator used by the regression experiments.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{Matrix3, Matrix4, Vector3, Vector4};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::frustum_grid::{Aabb3, CubicCell, GridLayout, RecordRange, SpillRun};
use crate::gaussian::{build_cov4, Gaussian4D, MathError};

pub const SCENE_MAGIC: [u8; 4] = *b"G4DS";
pub const SCENE_VERSION: u32 = 1;
const GRID_MAGIC: [u8; 4] = *b"GRID";

#[derive(Debug, Error)]
pub enum SceneError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("bad magic (not a scene container)")]
    BadMagic,
    #[error("unsupported container version {0}")]
    BadVersion(u32),
    #[error("record {index}: {source}")]
    Record { index: usize, source: MathError },
    #[error("malformed container: {0}")]
    Malformed(String),
}

/// On-disk covariance spec, kept verbatim so save(load(f)) is byte-exact.
#[derive(Debug, Clone, PartialEq)]
pub enum CovPayload {
    /// Upper triangle of the symmetric 4×4 in row order:
    /// (00, 01, 02, 03, 11, 12, 13, 22, 23, 33).
    Raw([f32; 10]),
    /// Four positive scales plus two quaternions assembling the 4D rotation
    /// as the left-isoclinic × right-isoclinic product.
    Rotor { scales: [f32; 4], q_left: [f32; 4], q_right: [f32; 4] },
}

#[derive(Debug, Clone)]
pub struct Scene {
    pub gaussians: Vec<Gaussian4D>,
    /// Parallel to `gaussians`: the covariance spec each record arrived with.
    pub cov_payloads: Vec<CovPayload>,
    pub sh_degree: usize,
    pub dynamic: bool,
}

impl Scene {
    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    pub fn centroid(&self) -> Vector3<f64> {
        if self.gaussians.is_empty() {
            return Vector3::zeros();
        }
        let sum: Vector3<f64> = self.gaussians.iter().map(|g| g.mean.xyz()).sum();
        sum / self.gaussians.len() as f64
    }

    pub fn spatial_extent(&self) -> f64 {
        let mut lo = Vector3::repeat(f64::INFINITY);
        let mut hi = Vector3::repeat(f64::NEG_INFINITY);
        for g in &self.gaussians {
            for i in 0..3 {
                lo[i] = lo[i].min(g.mean[i]);
                hi[i] = hi[i].max(g.mean[i]);
            }
        }
        (0..3).map(|i| hi[i] - lo[i]).fold(0.0, f64::max)
    }

    /// Rounds every loaded parameter through 16-bit floats, measuring the
    /// storage precision the cost model prices.
    pub fn quantize_f16(&mut self) {
        let q = |v: f64| f64::from(half::f16::from_f64(v));
        for g in &mut self.gaussians {
            g.mean = g.mean.map(q);
            g.cov = g.cov.map(q);
            g.opacity = q(g.opacity).clamp(0.0, 1.0);
            for coeff in &mut g.sh {
                for c in coeff {
                    *c = q(*c);
                }
            }
        }
    }
}

/// Left-isoclinic rotation matrix of a unit quaternion (a, b, c, d).
fn left_isoclinic(q: [f64; 4]) -> Matrix4<f64> {
    let [a, b, c, d] = q;
    Matrix4::new(
        a, -b, -c, -d,
        b, a, -d, c,
        c, d, a, -b,
        d, -c, b, a,
    )
}

/// Right-isoclinic rotation matrix of a unit quaternion (p, q, r, s).
fn right_isoclinic(q: [f64; 4]) -> Matrix4<f64> {
    let [p, qq, r, s] = q;
    Matrix4::new(
        p, -qq, -r, -s,
        qq, p, s, -r,
        r, -s, p, qq,
        s, r, -qq, p,
    )
}

fn normalize_quat(q: [f32; 4]) -> Result<[f64; 4], MathError> {
    let v = [f64::from(q[0]), f64::from(q[1]), f64::from(q[2]), f64::from(q[3])];
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm < 1e-12 {
        return Err(MathError::NotOrthonormal(f64::INFINITY));
    }
    Ok([v[0] / norm, v[1] / norm, v[2] / norm, v[3] / norm])
}

/// Expands a covariance payload into the dense symmetric matrix.
pub fn expand_cov(payload: &CovPayload) -> Result<Matrix4<f64>, MathError> {
    match payload {
        CovPayload::Raw(tri) => {
            let t: Vec<f64> = tri.iter().map(|&v| f64::from(v)).collect();
            Ok(Matrix4::new(
                t[0], t[1], t[2], t[3],
                t[1], t[4], t[5], t[6],
                t[2], t[5], t[7], t[8],
                t[3], t[6], t[8], t[9],
            ))
        }
        CovPayload::Rotor { scales, q_left, q_right } => {
            let u = left_isoclinic(normalize_quat(*q_left)?) * right_isoclinic(normalize_quat(*q_right)?);
            let s = Vector4::new(
                f64::from(scales[0]),
                f64::from(scales[1]),
                f64::from(scales[2]),
                f64::from(scales[3]),
            );
            build_cov4(&u, &s)
        }
    }
}

fn cov_to_raw(cov: &Matrix4<f64>) -> [f32; 10] {
    [
        cov[(0, 0)] as f32,
        cov[(0, 1)] as f32,
        cov[(0, 2)] as f32,
        cov[(0, 3)] as f32,
        cov[(1, 1)] as f32,
        cov[(1, 2)] as f32,
        cov[(1, 3)] as f32,
        cov[(2, 2)] as f32,
        cov[(2, 3)] as f32,
        cov[(3, 3)] as f32,
    ]
}

// --- binary helpers ---------------------------------------------------------

fn w_u32(w: &mut impl Write, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn w_f32(w: &mut impl Write, v: f32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn w_f64(w: &mut impl Write, v: f64) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn r_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn r_f32(r: &mut impl Read) -> std::io::Result<f32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(f32::from_le_bytes(b))
}

fn r_f64(r: &mut impl Read) -> std::io::Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

// --- save / load -------------------------------------------------------------

pub fn save_scene(path: &Path, scene: &Scene, layout: Option<&GridLayout>) -> Result<(), SceneError> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(&SCENE_MAGIC)?;
    w_u32(&mut w, SCENE_VERSION)?;
    w_u32(&mut w, scene.gaussians.len() as u32)?;
    w_u32(&mut w, scene.sh_degree as u32)?;
    w_u32(&mut w, u32::from(scene.dynamic))?;
    for (g, payload) in scene.gaussians.iter().zip(&scene.cov_payloads) {
        for i in 0..4 {
            w_f32(&mut w, g.mean[i] as f32)?;
        }
        match payload {
            CovPayload::Raw(tri) => {
                w_u32(&mut w, 0)?;
                for v in tri {
                    w_f32(&mut w, *v)?;
                }
            }
            CovPayload::Rotor { scales, q_left, q_right } => {
                w_u32(&mut w, 1)?;
                for v in scales.iter().chain(q_left).chain(q_right) {
                    w_f32(&mut w, *v)?;
                }
            }
        }
        w_f32(&mut w, g.opacity as f32)?;
        for coeff in &g.sh {
            for c in coeff {
                w_f32(&mut w, *c as f32)?;
            }
        }
    }
    if let Some(layout) = layout {
        w.write_all(&GRID_MAGIC)?;
        w_u32(&mut w, layout.grid_n as u32)?;
        w_u32(&mut w, layout.t_cells as u32)?;
        for i in 0..3 {
            w_f64(&mut w, layout.scene_aabb.min[i])?;
        }
        for i in 0..3 {
            w_f64(&mut w, layout.scene_aabb.max[i])?;
        }
        for cell in &layout.cells {
            w_u32(&mut w, cell.home.start)?;
            w_u32(&mut w, cell.home.end)?;
            w_u32(&mut w, cell.spills.len() as u32)?;
            for run in &cell.spills {
                w_u32(&mut w, run.owner)?;
                w_u32(&mut w, run.range.start)?;
                w_u32(&mut w, run.range.end)?;
            }
        }
        for id in &layout.record_to_id {
            w_u32(&mut w, *id)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_scene(path: &Path) -> Result<(Scene, Option<GridLayout>), SceneError> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if magic != SCENE_MAGIC {
        return Err(SceneError::BadMagic);
    }
    let version = r_u32(&mut r)?;
    if version != SCENE_VERSION {
        return Err(SceneError::BadVersion(version));
    }
    let count = r_u32(&mut r)? as usize;
    let sh_degree = r_u32(&mut r)? as usize;
    if sh_degree > 3 {
        return Err(SceneError::Malformed(format!("sh degree {sh_degree}")));
    }
    let dynamic = r_u32(&mut r)? != 0;
    let coeffs = (sh_degree + 1) * (sh_degree + 1);

    let mut gaussians = Vec::with_capacity(count);
    let mut payloads = Vec::with_capacity(count);
    for index in 0..count {
        let mut mean = Vector4::zeros();
        for i in 0..4 {
            mean[i] = f64::from(r_f32(&mut r)?);
        }
        let tag = r_u32(&mut r)?;
        let payload = match tag {
            0 => {
                let mut tri = [0f32; 10];
                for v in &mut tri {
                    *v = r_f32(&mut r)?;
                }
                CovPayload::Raw(tri)
            }
            1 => {
                let mut buf = [0f32; 12];
                for v in &mut buf {
                    *v = r_f32(&mut r)?;
                }
                CovPayload::Rotor {
                    scales: buf[0..4].try_into().unwrap(),
                    q_left: buf[4..8].try_into().unwrap(),
                    q_right: buf[8..12].try_into().unwrap(),
                }
            }
            other => return Err(SceneError::Malformed(format!("record {index}: cov tag {other}"))),
        };
        let cov = expand_cov(&payload).map_err(|source| SceneError::Record { index, source })?;
        let opacity = f64::from(r_f32(&mut r)?);
        let mut sh = Vec::with_capacity(coeffs);
        for _ in 0..coeffs {
            let mut rgb = [0f64; 3];
            for c in &mut rgb {
                *c = f64::from(r_f32(&mut r)?);
            }
            sh.push(rgb);
        }
        let g = Gaussian4D { id: index as u32, mean, cov, opacity, sh };
        g.validate().map_err(|source| SceneError::Record { index, source })?;
        gaussians.push(g);
        payloads.push(payload);
    }
    let scene = Scene { gaussians, cov_payloads: payloads, sh_degree, dynamic };

    // Optional layout appendix.
    let mut grid_magic = [0u8; 4];
    match r.read_exact(&mut grid_magic) {
        Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => return Ok((scene, None)),
        Err(e) => return Err(e.into()),
        Ok(()) => {}
    }
    if grid_magic != GRID_MAGIC {
        return Err(SceneError::Malformed("unexpected trailing bytes".into()));
    }
    let grid_n = r_u32(&mut r)? as usize;
    let t_cells = r_u32(&mut r)? as usize;
    if grid_n == 0 || t_cells == 0 {
        return Err(SceneError::Malformed("zero grid resolution".into()));
    }
    let mut min = Vector3::zeros();
    let mut max = Vector3::zeros();
    for i in 0..3 {
        min[i] = r_f64(&mut r)?;
    }
    for i in 0..3 {
        max[i] = r_f64(&mut r)?;
    }
    let scene_aabb = Aabb3 { min, max };
    let t_edges: Vec<f64> = (0..=t_cells).map(|k| k as f64 / t_cells as f64).collect();
    let cell_count = t_cells * grid_n * grid_n * grid_n;
    let cell_w = Vector3::from_fn(|i, _| (max[i] - min[i]) / grid_n as f64);
    let mut cells = Vec::with_capacity(cell_count);
    for ti in 0..t_cells {
        for zi in 0..grid_n {
            for yi in 0..grid_n {
                for xi in 0..grid_n {
                    let home = RecordRange { start: r_u32(&mut r)?, end: r_u32(&mut r)? };
                    let n_spills = r_u32(&mut r)? as usize;
                    let mut spills = Vec::with_capacity(n_spills);
                    for _ in 0..n_spills {
                        spills.push(SpillRun {
                            owner: r_u32(&mut r)?,
                            range: RecordRange { start: r_u32(&mut r)?, end: r_u32(&mut r)? },
                        });
                    }
                    let cmin = Vector3::new(
                        min[0] + cell_w[0] * xi as f64,
                        min[1] + cell_w[1] * yi as f64,
                        min[2] + cell_w[2] * zi as f64,
                    );
                    let cmax = Vector3::new(
                        min[0] + cell_w[0] * (xi + 1) as f64,
                        min[1] + cell_w[1] * (yi + 1) as f64,
                        min[2] + cell_w[2] * (zi + 1) as f64,
                    );
                    cells.push(CubicCell {
                        aabb: Aabb3 { min: cmin, max: cmax },
                        t_span: (t_edges[ti], t_edges[ti + 1]),
                        home,
                        spills,
                    });
                }
            }
        }
    }
    let mut record_to_id = Vec::with_capacity(count);
    for _ in 0..count {
        record_to_id.push(r_u32(&mut r)?);
    }
    let mut id_to_record = vec![0u32; count];
    for (rec, id) in record_to_id.iter().enumerate() {
        let slot = id_to_record
            .get_mut(*id as usize)
            .ok_or_else(|| SceneError::Malformed(format!("record id {id} out of range")))?;
        *slot = rec as u32;
    }
    let layout = GridLayout {
        grid_n,
        t_cells,
        t_edges,
        scene_aabb,
        cells,
        record_to_id,
        id_to_record,
    };
    Ok((scene, Some(layout)))
}

// --- synthetic scenes ---------------------------------------------------------

/// Parameters for the seeded synthetic scene generator.
#[derive(Debug, Clone)]
pub struct SynthSpec {
    pub count: usize,
    /// Side length of the cube positions are drawn from.
    pub extent: f64,
    /// Typical per-axis standard deviation in scene units.
    pub base_scale: f64,
    /// Log2 jitter applied to each axis scale.
    pub scale_jitter: f64,
    /// Vertical stretch factor; 1.0 disables the elongation mode.
    pub elongation: f64,
    /// Peak drift velocity magnitude (scene units per unit time); controls
    /// the space-time covariance coupling.
    pub motion_amplitude: f64,
    /// Temporal standard deviation range for dynamic scenes.
    pub temporal_sigma: (f64, f64),
    pub opacity_range: (f64, f64),
    pub dynamic: bool,
    pub sh_degree: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            count: 10_000,
            extent: 100.0,
            base_scale: 0.8,
            scale_jitter: 1.0,
            elongation: 1.0,
            motion_amplitude: 5.0,
            temporal_sigma: (0.05, 0.2),
            opacity_range: (0.3, 0.95),
            dynamic: true,
            sh_degree: 1,
            seed: 1,
        }
    }
}

/// Seeded, reproducible scene. All parameters are rounded through the 32-bit
/// on-disk grid, so saving and re-loading reproduces the scene exactly.
pub fn gen_synthetic(spec: &SynthSpec) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let coeffs = (spec.sh_degree + 1) * (spec.sh_degree + 1);
    let mut gaussians = Vec::with_capacity(spec.count);
    let mut payloads = Vec::with_capacity(spec.count);
    let half = spec.extent * 0.5;
    for id in 0..spec.count {
        let pos = Vector3::from_fn(|_, _| rng.random_range(-half..half));
        let mu_t = if spec.dynamic { rng.random_range(0.0..1.0) } else { 0.5 };

        let mut s = Vector3::from_fn(|_, _| {
            spec.base_scale * rng.random_range(-spec.scale_jitter..spec.scale_jitter).exp2()
        });
        s.y *= spec.elongation;
        let rot = if spec.elongation > 1.0 {
            Matrix3::identity()
        } else {
            random_rotation3(&mut rng)
        };
        let cov3 = rot * Matrix3::from_diagonal(&s.map(|v| v * v)) * rot.transpose();

        let (sigma_t, velocity) = if spec.dynamic {
            let sigma_t = rng.random_range(spec.temporal_sigma.0..spec.temporal_sigma.1);
            let dir = random_unit3(&mut rng);
            let speed = rng.random_range(0.0..spec.motion_amplitude);
            (sigma_t, dir * speed)
        } else {
            (1.0, Vector3::zeros())
        };
        // cov4 = [[Σ₃ + σt² v vᵀ, σt² v], [σt² vᵀ, σt²]]: the Schur
        // complement is Σ₃ itself, so positive definiteness is inherited and
        // the sliced mean drifts with velocity v.
        let vt2 = sigma_t * sigma_t;
        let mut cov4 = Matrix4::zeros();
        let spatial = cov3 + velocity * velocity.transpose() * vt2;
        for i in 0..3 {
            for j in 0..3 {
                cov4[(i, j)] = spatial[(i, j)];
            }
            cov4[(i, 3)] = vt2 * velocity[i];
            cov4[(3, i)] = vt2 * velocity[i];
        }
        cov4[(3, 3)] = vt2;

        // Round through the on-disk grid before constructing the record.
        let raw = cov_to_raw(&cov4);
        let payload = CovPayload::Raw(raw);
        let cov = expand_cov(&payload).expect("generated covariance is symmetric");
        let mean = Vector4::new(
            f64::from(pos.x as f32),
            f64::from(pos.y as f32),
            f64::from(pos.z as f32),
            f64::from(mu_t as f32),
        );
        let opacity = f64::from(rng.random_range(spec.opacity_range.0..spec.opacity_range.1) as f32);
        let sh: Vec<[f64; 3]> = (0..coeffs)
            .map(|k| {
                let amp = if k == 0 { 0.7 } else { 0.15 };
                [
                    f64::from(rng.random_range(-amp..amp) as f32),
                    f64::from(rng.random_range(-amp..amp) as f32),
                    f64::from(rng.random_range(-amp..amp) as f32),
                ]
            })
            .collect();
        let g = Gaussian4D { id: id as u32, mean, cov, opacity, sh };
        debug_assert!(g.validate().is_ok(), "generator produced an invalid record");
        gaussians.push(g);
        payloads.push(payload);
    }
    Scene {
        gaussians,
        cov_payloads: payloads,
        sh_degree: spec.sh_degree,
        dynamic: spec.dynamic,
    }
}

fn random_unit3(rng: &mut ChaCha8Rng) -> Vector3<f64> {
    loop {
        let v = Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0));
        let n = v.norm();
        if n > 1e-3 && n <= 1.0 {
            return v / n;
        }
    }
}

fn random_rotation3(rng: &mut ChaCha8Rng) -> Matrix3<f64> {
    let axis = random_unit3(rng);
    let angle = rng.random_range(0.0..std::f64::consts::TAU);
    nalgebra::Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(axis), angle).into_inner()
}
