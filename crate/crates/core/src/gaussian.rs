//! Continuous math of the splatting pipeline: Gaussian kernels, 4D→3D
//! temporal slicing, 3D→2D perspective projection, spherical-harmonics
//! shading and front-to-back alpha blending.
//!
//! Everything here is a pure function over immutable inputs; the pipeline
//! invokes these data-parallel across Gaussians and pixels.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Matrix4, SMatrix, SVector, Vector2, Vector3, Vector4};
use thiserror::Error;

/// Alpha values are clamped here so a single splat can never fully occlude.
pub const ALPHA_MAX: f64 = 0.99;
/// Contributions below one 8-bit step are skipped during blending.
pub const ALPHA_SKIP: f64 = 1.0 / 255.0;
/// Diagonal floor (px²) added to projected covariances before inversion.
pub const COV2_BLUR: f64 = 0.3;
/// Splats are truncated at 3σ: evaluations with combined Mahalanobis² above
/// this never contribute. Keeps the rendered support inside the bounds that
/// [`extent4`] reports, which is what makes grid culling exactly lossless.
pub const SUPPORT_Q_MAX: f64 = 9.0;

#[derive(Debug, Error, PartialEq)]
pub enum MathError {
    #[error("rotation factor is not orthonormal (max deviation {0:.3e})")]
    NotOrthonormal(f64),
    #[error("scale component {index} is not positive ({value})")]
    NonPositiveScale { index: usize, value: f64 },
    #[error("unsupported SH coefficient count {0} (expected 1, 4, 9 or 16)")]
    UnsupportedShDegree(usize),
    #[error("covariance is not symmetric (max asymmetry {0:.3e})")]
    NotSymmetric(f64),
    #[error("covariance is not positive definite (min eigenvalue {0:.3e})")]
    NotPositiveDefinite(f64),
    #[error("opacity {0} outside [0, 1]")]
    OpacityOutOfRange(f64),
    #[error("camera intrinsics invalid: {0}")]
    BadIntrinsics(String),
}

/// One scene primitive: a 4D (space × time) anisotropic Gaussian with
/// opacity and per-channel SH coefficients.
#[derive(Debug, Clone)]
pub struct Gaussian4D {
    pub id: u32,
    /// (x, y, z, t) with t normalized to [0, 1].
    pub mean: Vector4<f64>,
    /// Symmetric positive-definite 4×4 covariance.
    pub cov: Matrix4<f64>,
    pub opacity: f64,
    /// `(degree + 1)²` coefficients, each an RGB triple.
    pub sh: Vec<[f64; 3]>,
}

impl Gaussian4D {
    pub fn sh_degree(&self) -> usize {
        match self.sh.len() {
            1 => 0,
            4 => 1,
            9 => 2,
            16 => 3,
            n => panic!("invalid SH coefficient count {n}"),
        }
    }

    /// Checks the type invariants: symmetry within 1e-6, positive-definite
    /// covariance, opacity in [0, 1], supported SH degree.
    pub fn validate(&self) -> Result<(), MathError> {
        let asym = max_abs_asymmetry4(&self.cov);
        if asym > 1e-6 {
            return Err(MathError::NotSymmetric(asym));
        }
        let eig = self.cov.symmetric_eigenvalues();
        let min_eig = eig.min();
        if min_eig <= 0.0 {
            return Err(MathError::NotPositiveDefinite(min_eig));
        }
        if !(0.0..=1.0).contains(&self.opacity) {
            return Err(MathError::OpacityOutOfRange(self.opacity));
        }
        if !matches!(self.sh.len(), 1 | 4 | 9 | 16) {
            return Err(MathError::UnsupportedShDegree(self.sh.len()));
        }
        Ok(())
    }
}

fn max_abs_asymmetry4(m: &Matrix4<f64>) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..4 {
        for j in (i + 1)..4 {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

/// Unnormalized Gaussian kernel `exp(-(x-μ)ᵀ Σ⁻¹ (x-μ) / 2)`.
///
/// `cov_inv` is the precision matrix; the result is in (0, 1] whenever it is
/// positive semidefinite.
pub fn gaussian_kernel<const N: usize>(
    x: &SVector<f64, N>,
    mu: &SVector<f64, N>,
    cov_inv: &SMatrix<f64, N, N>,
) -> f64 {
    let d = x - mu;
    let q = (d.transpose() * cov_inv * d)[(0, 0)];
    (-0.5 * q).exp()
}

/// Assembles `U · diag(S²) · Uᵀ` from an orthonormal factor and positive
/// per-axis scales. Rejects non-orthonormal `U` (tolerance 1e-6) and
/// non-positive scales.
pub fn build_cov4(u: &Matrix4<f64>, scales: &Vector4<f64>) -> Result<Matrix4<f64>, MathError> {
    let gram = u.transpose() * u;
    let dev = (gram - Matrix4::identity()).abs().max();
    if dev > 1e-6 {
        return Err(MathError::NotOrthonormal(dev));
    }
    for (index, &value) in scales.iter().enumerate() {
        if value <= 0.0 {
            return Err(MathError::NonPositiveScale { index, value });
        }
    }
    let d = Matrix4::from_diagonal(&scales.map(|s| s * s));
    let cov = u * d * u.transpose();
    // Products of symmetric factors pick up rounding asymmetry; re-symmetrize.
    Ok((cov + cov.transpose()) * 0.5)
}

/// A 4D Gaussian conditioned on a query time: spatial mean/covariance of the
/// slice plus the scalar temporal weight.
#[derive(Debug, Clone)]
pub struct Sliced3D {
    pub mean: Vector3<f64>,
    pub cov: Matrix3<f64>,
    /// `exp(-temporal_q / 2)`, in (0, 1].
    pub w_t: f64,
    /// Temporal Mahalanobis²: `(t - μ_t)² / Σ₄₄`. Carried separately so the
    /// blend stage can merge it with the spatial exponent into one exp.
    pub temporal_q: f64,
}

/// Conditions `g` on time `t`.
///
/// With `λ = 1/Σ₄₄`: mean shifts by `Σ₁:₃,₄ · λ · (t - μ_t)`, covariance
/// drops the rank-one term `λ · Σ₁:₃,₄ Σ₄,₁:₃`, and the temporal weight is
/// the 1D kernel `exp(-λ (t - μ_t)² / 2)`.
pub fn slice_at_time(g: &Gaussian4D, t: f64) -> Sliced3D {
    let var_t = g.cov[(3, 3)];
    assert!(var_t > 0.0, "temporal variance must be positive");
    let lambda = 1.0 / var_t;
    let cross = Vector3::new(g.cov[(0, 3)], g.cov[(1, 3)], g.cov[(2, 3)]);
    let dt = t - g.mean[3];

    let mean = g.mean.xyz() + cross * (lambda * dt);
    let spatial = g.cov.fixed_view::<3, 3>(0, 0).into_owned();
    let cov = spatial - cross * cross.transpose() * lambda;
    let temporal_q = lambda * dt * dt;
    Sliced3D { mean, cov, w_t: (-0.5 * temporal_q).exp(), temporal_q }
}

/// Pinhole camera: world-to-camera rigid transform plus pixel intrinsics.
#[derive(Debug, Clone)]
pub struct Camera {
    /// World-to-camera rotation (orthonormal).
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    pub near: f64,
    pub far: f64,
}

impl Camera {
    pub fn new(
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: u32,
        height: u32,
        near: f64,
        far: f64,
    ) -> Result<Self, MathError> {
        let dev = (rotation * rotation.transpose() - Matrix3::identity()).abs().max();
        if dev > 1e-6 {
            return Err(MathError::NotOrthonormal(dev));
        }
        if !(fx > 0.0 && fy > 0.0) {
            return Err(MathError::BadIntrinsics(format!("fx={fx}, fy={fy}")));
        }
        if !(0.0 < near && near < far) {
            return Err(MathError::BadIntrinsics(format!("near={near}, far={far}")));
        }
        Ok(Self { rotation, translation, fx, fy, cx, cy, width, height, near, far })
    }

    /// Camera looking from `eye` toward `target`, +v down the image, with the
    /// principal point at the image center.
    pub fn look_at(
        eye: Vector3<f64>,
        target: Vector3<f64>,
        fx: f64,
        fy: f64,
        width: u32,
        height: u32,
        near: f64,
        far: f64,
    ) -> Result<Self, MathError> {
        let forward = (target - eye).normalize();
        let world_up = Vector3::new(0.0, 1.0, 0.0);
        let right = world_up.cross(&forward);
        if right.norm() < 1e-9 {
            return Err(MathError::BadIntrinsics("view direction parallel to up".into()));
        }
        let right = right.normalize();
        let down = right.cross(&forward);
        let rotation = Matrix3::from_rows(&[
            right.transpose(),
            down.transpose(),
            forward.transpose(),
        ]);
        let translation = -rotation * eye;
        Self::new(
            rotation,
            translation,
            fx,
            fy,
            f64::from(width) * 0.5,
            f64::from(height) * 0.5,
            width,
            height,
            near,
            far,
        )
    }

    /// Camera center in world coordinates.
    pub fn position(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }
}

/// Projection byproducts: the perspective Jacobian at the camera-space mean.
#[derive(Debug, Clone)]
pub struct ProjectionContext {
    pub jacobian: Matrix2x3<f64>,
    pub cam_mean: Vector3<f64>,
    pub depth: f64,
}

/// Image-plane footprint of a projected slice (geometry only; shading is
/// attached by the pipeline).
#[derive(Debug, Clone)]
pub struct SplatGeometry {
    /// Pixel coordinates (u, v).
    pub center: Vector2<f64>,
    /// Projected covariance in px², including the [`COV2_BLUR`] floor.
    pub cov: Matrix2<f64>,
    pub depth: f64,
    /// 3σ pixel extent.
    pub radius: f64,
}

/// Projects a slice through `cam`. Returns `None` (the culled signal) when
/// the camera-space mean is in front of the near plane.
pub fn project(s: &Sliced3D, cam: &Camera) -> Option<(ProjectionContext, SplatGeometry)> {
    let cam_mean = cam.rotation * s.mean + cam.translation;
    let z = cam_mean.z;
    if z < cam.near {
        return None;
    }
    let x = cam_mean.x;
    let y = cam_mean.y;
    let center = Vector2::new(cam.fx * x / z + cam.cx, cam.fy * y / z + cam.cy);
    let z2 = z * z;
    let jacobian = Matrix2x3::new(
        cam.fx / z, 0.0, -cam.fx * x / z2,
        0.0, cam.fy / z, -cam.fy * y / z2,
    );
    let m = jacobian * cam.rotation;
    let cov_raw = m * s.cov * m.transpose();
    let cov = cov_raw + Matrix2::identity() * COV2_BLUR;
    let radius = splat_extent(&cov);
    Some((
        ProjectionContext { jacobian, cam_mean, depth: z },
        SplatGeometry { center, cov, depth: z, radius },
    ))
}

// Real SH basis constants, degree 0..3, in the ordering
// [Y00, Y1-1, Y10, Y11, Y2-2 .. Y22, Y3-3 .. Y33].
const SH_C0: f64 = 0.282_094_791_773_878_14;
const SH_C1: f64 = 0.488_602_511_902_919_9;
const SH_C2: [f64; 5] = [
    1.092_548_430_592_079_2,
    1.092_548_430_592_079_2,
    0.315_391_565_252_520_05,
    1.092_548_430_592_079_2,
    0.546_274_215_296_039_6,
];
const SH_C3: [f64; 7] = [
    0.590_043_589_926_643_5,
    2.890_611_442_640_554,
    0.457_045_799_464_465_8,
    0.373_176_332_590_115_4,
    0.457_045_799_464_465_8,
    1.445_305_721_320_277,
    0.590_043_589_926_643_5,
];

/// Evaluates the real SH basis for the coefficient layout above and returns
/// the view-dependent color `Σ c_lm Y_lm + 0.5`, clamped at zero.
///
/// `dir` must be unit length; the degree is inferred from `coeffs.len()`.
pub fn eval_sh(coeffs: &[[f64; 3]], dir: &Vector3<f64>) -> Result<[f64; 3], MathError> {
    let degree = match coeffs.len() {
        1 => 0,
        4 => 1,
        9 => 2,
        16 => 3,
        n => return Err(MathError::UnsupportedShDegree(n)),
    };
    let (x, y, z) = (dir.x, dir.y, dir.z);
    let mut basis = [0.0f64; 16];
    basis[0] = SH_C0;
    if degree >= 1 {
        basis[1] = SH_C1 * y;
        basis[2] = SH_C1 * z;
        basis[3] = SH_C1 * x;
    }
    if degree >= 2 {
        let (xx, yy, zz) = (x * x, y * y, z * z);
        basis[4] = SH_C2[0] * x * y;
        basis[5] = SH_C2[1] * y * z;
        basis[6] = SH_C2[2] * (3.0 * zz - 1.0);
        basis[7] = SH_C2[3] * x * z;
        basis[8] = SH_C2[4] * (xx - yy);
        if degree >= 3 {
            basis[9] = SH_C3[0] * y * (3.0 * xx - yy);
            basis[10] = SH_C3[1] * x * y * z;
            basis[11] = SH_C3[2] * y * (5.0 * zz - 1.0);
            basis[12] = SH_C3[3] * z * (5.0 * zz - 3.0);
            basis[13] = SH_C3[4] * x * (5.0 * zz - 1.0);
            basis[14] = SH_C3[5] * z * (xx - yy);
            basis[15] = SH_C3[6] * x * (xx - 3.0 * yy);
        }
    }
    let mut rgb = [0.5f64; 3];
    for (i, coeff) in coeffs.iter().enumerate() {
        for ch in 0..3 {
            rgb[ch] += basis[i] * coeff[ch];
        }
    }
    for c in &mut rgb {
        *c = c.max(0.0);
    }
    Ok(rgb)
}

/// Spatial Mahalanobis² of `pixel` under the splat's inverse covariance.
pub fn spatial_q(conic: &Matrix2<f64>, center: &Vector2<f64>, pixel: &Vector2<f64>) -> f64 {
    let d = pixel - center;
    (d.transpose() * conic * d)[(0, 0)]
}

/// Two-exp alpha path: `min(0.99, alpha_base · exp(-q/2))` with
/// `alpha_base = opacity · w_t` already folded by the caller.
pub fn eval_alpha(
    alpha_base: f64,
    conic: &Matrix2<f64>,
    center: &Vector2<f64>,
    pixel: &Vector2<f64>,
) -> f64 {
    let q = spatial_q(conic, center, pixel);
    (alpha_base * (-0.5 * q).exp()).min(ALPHA_MAX)
}

/// Merged-exp alpha path: the temporal exponent is pre-folded so exactly one
/// exp evaluates both Gaussian factors.
pub fn eval_alpha_merged(
    opacity: f64,
    temporal_q: f64,
    conic: &Matrix2<f64>,
    center: &Vector2<f64>,
    pixel: &Vector2<f64>,
) -> f64 {
    let q = spatial_q(conic, center, pixel) + temporal_q;
    (opacity * (-0.5 * q).exp()).min(ALPHA_MAX)
}

/// Front-to-back compositing of `(α, rgb)` entries already sorted by depth.
///
/// Accumulates `Σ αᵢ cᵢ Tᵢ` with `T₁ = 1`, `Tᵢ₊₁ = Tᵢ (1 - αᵢ)`, stopping
/// once the transmittance drops below `term_eps`. The background composite
/// (`+ T_final · bg`) is the caller's concern.
pub fn blend_pixel(sorted: &[(f64, [f64; 3])], term_eps: f64) -> [f64; 3] {
    let mut out = [0.0f64; 3];
    let mut transmittance = 1.0f64;
    for &(alpha, color) in sorted {
        if transmittance < term_eps {
            break;
        }
        let w = alpha * transmittance;
        for ch in 0..3 {
            out[ch] += w * color[ch];
        }
        transmittance *= 1.0 - alpha;
    }
    out
}

/// 3σ pixel footprint bound: `3·sqrt(λ_max)` via the closed-form 2×2
/// eigenvalue.
pub fn splat_extent(cov2: &Matrix2<f64>) -> f64 {
    let a = cov2[(0, 0)];
    let b = cov2[(0, 1)];
    let c = cov2[(1, 1)];
    let mid = 0.5 * (a + c);
    let disc = (0.5 * (a - c)).powi(2) + b * b;
    let lambda_max = mid + disc.sqrt();
    3.0 * lambda_max.max(0.0).sqrt()
}

/// Conservative 3σ support of a 4D Gaussian from its marginal variances:
/// per-axis spatial half-widths and the temporal half-width.
pub fn extent4(g: &Gaussian4D) -> (Vector3<f64>, f64) {
    let half = Vector3::new(
        3.0 * g.cov[(0, 0)].max(0.0).sqrt(),
        3.0 * g.cov[(1, 1)].max(0.0).sqrt(),
        3.0 * g.cov[(2, 2)].max(0.0).sqrt(),
    );
    (half, 3.0 * g.cov[(3, 3)].max(0.0).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::{Matrix4, Vector1, Vector4};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_spd4(rng: &mut ChaCha8Rng) -> Matrix4<f64> {
        let a = Matrix4::from_fn(|_, _| rng.random_range(-1.0..1.0));
        a.transpose() * a + Matrix4::identity() * 0.1
    }

    fn random_orthonormal4(rng: &mut ChaCha8Rng) -> Matrix4<f64> {
        let a = Matrix4::from_fn(|_, _| rng.random_range(-1.0..1.0));
        let qr = a.qr();
        qr.q()
    }

    fn test_gaussian(cov: Matrix4<f64>, mean: Vector4<f64>) -> Gaussian4D {
        Gaussian4D { id: 0, mean, cov, opacity: 0.8, sh: vec![[0.0; 3]; 4] }
    }

    #[test]
    fn kernel_is_one_at_mean() {
        let x = Vector3::new(1.5, -2.0, 0.25);
        let inv = Matrix3::new(2.0, 0.1, 0.0, 0.1, 1.0, 0.2, 0.0, 0.2, 3.0);
        assert_eq!(gaussian_kernel(&x, &x, &inv), 1.0);
    }

    #[test]
    fn kernel_1d_unit_case() {
        let v = gaussian_kernel(&Vector1::new(1.0), &Vector1::new(0.0), &SMatrix::<f64, 1, 1>::new(2.0));
        assert_relative_eq!(v, (-1.0f64).exp(), epsilon = 1e-15);
    }

    #[test]
    fn kernel_matches_literal_matrix_arithmetic() {
        let mut r = rng(11);
        for _ in 0..200 {
            let a = Matrix3::from_fn(|_, _| r.random_range(-1.0..1.0));
            let spd = a.transpose() * a + Matrix3::identity() * 0.2;
            let inv = spd.try_inverse().unwrap();
            let x = Vector3::from_fn(|_, _| r.random_range(-2.0..2.0));
            let mu = Vector3::from_fn(|_, _| r.random_range(-2.0..2.0));

            // Brute-force oracle: expand the quadratic form element by element.
            let d = x - mu;
            let mut q = 0.0;
            for i in 0..3 {
                for j in 0..3 {
                    q += d[i] * inv[(i, j)] * d[j];
                }
            }
            let expected = (-q / 2.0).exp();
            assert_relative_eq!(gaussian_kernel(&x, &mu, &inv), expected, epsilon = 1e-12);
        }
    }

    #[test]
    fn build_cov4_identity_cases() {
        let i = Matrix4::identity();
        assert_eq!(build_cov4(&i, &Vector4::new(1.0, 1.0, 1.0, 1.0)).unwrap(), i);
        let d = build_cov4(&i, &Vector4::new(2.0, 1.0, 1.0, 1.0)).unwrap();
        assert_eq!(d, Matrix4::from_diagonal(&Vector4::new(4.0, 1.0, 1.0, 1.0)));
    }

    #[test]
    fn build_cov4_rejects_bad_inputs() {
        let skew = Matrix4::identity() * 1.1;
        assert!(matches!(
            build_cov4(&skew, &Vector4::new(1.0, 1.0, 1.0, 1.0)),
            Err(MathError::NotOrthonormal(_))
        ));
        assert!(matches!(
            build_cov4(&Matrix4::identity(), &Vector4::new(1.0, -0.5, 1.0, 1.0)),
            Err(MathError::NonPositiveScale { index: 1, .. })
        ));
    }

    #[test]
    fn build_cov4_eigenvalues_equal_squared_scales() {
        let mut r = rng(17);
        for _ in 0..50 {
            let u = random_orthonormal4(&mut r);
            let s = Vector4::from_fn(|_, _| r.random_range(0.2..3.0));
            let cov = build_cov4(&u, &s).unwrap();
            let mut eig: Vec<f64> = cov.symmetric_eigenvalues().iter().copied().collect();
            let mut expect: Vec<f64> = s.iter().map(|v| v * v).collect();
            eig.sort_by(f64::total_cmp);
            expect.sort_by(f64::total_cmp);
            for (e, x) in eig.iter().zip(&expect) {
                assert_relative_eq!(e, x, epsilon = 1e-9, max_relative = 1e-9);
            }
        }
    }

    #[test]
    fn slice_block_diagonal_passes_through() {
        let mut cov = Matrix4::identity();
        cov[(0, 0)] = 2.0;
        let g = test_gaussian(cov, Vector4::new(1.0, 2.0, 3.0, 0.5));
        let s = slice_at_time(&g, 0.9);
        assert_eq!(s.mean, Vector3::new(1.0, 2.0, 3.0));
        assert_eq!(s.cov, g.cov.fixed_view::<3, 3>(0, 0).into_owned());
    }

    #[test]
    fn slice_at_temporal_mean_has_unit_weight() {
        let mut r = rng(23);
        let g = test_gaussian(random_spd4(&mut r), Vector4::new(0.0, 1.0, -1.0, 0.37));
        let s = slice_at_time(&g, 0.37);
        assert_eq!(s.w_t, 1.0);
        assert_eq!(s.mean, g.mean.xyz());
    }

    /// Independent conditional-Gaussian oracle going through the precision
    /// matrix: cov = (Λ₁₁)⁻¹ and mean = μ₁ - Λ₁₁⁻¹ Λ₁₂ (t - μ_t) for
    /// Λ = Σ⁻¹, an algebraically different route than the direct slice.
    fn conditional_oracle(cov: &Matrix4<f64>, mean: &Vector4<f64>, t: f64) -> (Vector3<f64>, Matrix3<f64>) {
        let prec = cov.try_inverse().expect("SPD input");
        let l11 = prec.fixed_view::<3, 3>(0, 0).into_owned();
        let l12 = Vector3::new(prec[(0, 3)], prec[(1, 3)], prec[(2, 3)]);
        let cond_cov = l11.try_inverse().unwrap();
        let cond_mean = mean.xyz() - cond_cov * l12 * (t - mean[3]);
        (cond_mean, cond_cov)
    }

    #[test]
    fn slice_matches_conditional_oracle() {
        let mut r = rng(29);
        for _ in 0..300 {
            let cov = random_spd4(&mut r);
            let mean = Vector4::from_fn(|_, _| r.random_range(-2.0..2.0));
            let g = test_gaussian(cov, mean);
            let t = r.random_range(-1.0..2.0);
            let s = slice_at_time(&g, t);
            let (om, oc) = conditional_oracle(&cov, &mean, t);
            assert_relative_eq!(s.mean, om, epsilon = 1e-9, max_relative = 1e-9);
            assert_relative_eq!(s.cov, oc, epsilon = 1e-9, max_relative = 1e-9);
        }
    }

    #[test]
    fn slice_covariance_stays_psd() {
        let mut r = rng(31);
        for _ in 0..300 {
            let g = test_gaussian(random_spd4(&mut r), Vector4::zeros());
            let s = slice_at_time(&g, r.random_range(-1.0..1.0));
            assert!(s.cov.symmetric_eigenvalues().min() >= -1e-9);
        }
    }

    #[test]
    fn temporal_weight_is_symmetric() {
        let mut r = rng(37);
        let g = test_gaussian(random_spd4(&mut r), Vector4::new(0.0, 0.0, 0.0, 0.4));
        for _ in 0..100 {
            let delta = r.random_range(0.0..1.0);
            let a = slice_at_time(&g, 0.4 + delta).w_t;
            let b = slice_at_time(&g, 0.4 - delta).w_t;
            assert_eq!(a, b);
        }
    }

    fn axis_camera(f: f64) -> Camera {
        Camera::new(
            Matrix3::identity(),
            Vector3::zeros(),
            f,
            f,
            0.0,
            0.0,
            256,
            256,
            0.1,
            1e4,
        )
        .unwrap()
    }

    #[test]
    fn project_on_axis_point() {
        let s = Sliced3D {
            mean: Vector3::new(0.0, 0.0, 4.0),
            cov: Matrix3::identity(),
            w_t: 1.0,
            temporal_q: 0.0,
        };
        let cam = axis_camera(100.0);
        let (ctx, geom) = project(&s, &cam).unwrap();
        assert_eq!(geom.center, Vector2::new(0.0, 0.0));
        assert_eq!(ctx.depth, 4.0);
        let expected_j = Matrix2x3::new(25.0, 0.0, 0.0, 0.0, 25.0, 0.0);
        assert_eq!(ctx.jacobian, expected_j);
    }

    #[test]
    fn project_isotropic_on_axis_covariance() {
        let sigma2 = 0.5;
        let s = Sliced3D {
            mean: Vector3::new(0.0, 0.0, 2.0),
            cov: Matrix3::identity() * sigma2,
            w_t: 1.0,
            temporal_q: 0.0,
        };
        let cam = axis_camera(50.0);
        let (_, geom) = project(&s, &cam).unwrap();
        let scale = 50.0f64.powi(2) * sigma2 / 4.0;
        assert_relative_eq!(geom.cov[(0, 0)], scale + COV2_BLUR, epsilon = 1e-12);
        assert_relative_eq!(geom.cov[(1, 1)], scale + COV2_BLUR, epsilon = 1e-12);
        assert_relative_eq!(geom.cov[(0, 1)], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn project_behind_near_plane_is_culled() {
        let s = Sliced3D {
            mean: Vector3::new(0.0, 0.0, 0.05),
            cov: Matrix3::identity(),
            w_t: 1.0,
            temporal_q: 0.0,
        };
        assert!(project(&s, &axis_camera(100.0)).is_none());
    }

    #[test]
    fn project_covariance_matches_triple_product_oracle() {
        let mut r = rng(41);
        for _ in 0..200 {
            let a = Matrix3::from_fn(|_, _| r.random_range(-1.0..1.0));
            let cov3 = a.transpose() * a + Matrix3::identity() * 0.05;
            let axis = Vector3::from_fn(|_, _| r.random_range(-1.0..1.0)).normalize();
            let angle = r.random_range(-3.0..3.0);
            let rot = nalgebra::Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(axis), angle);
            let cam = Camera::new(
                rot.into_inner(),
                Vector3::from_fn(|_, _| r.random_range(-1.0..1.0)),
                r.random_range(50.0..500.0),
                r.random_range(50.0..500.0),
                128.0,
                128.0,
                256,
                256,
                0.1,
                1e4,
            )
            .unwrap();
            let mean_cam = Vector3::new(r.random_range(-1.0..1.0), r.random_range(-1.0..1.0), r.random_range(1.0..10.0));
            let mean_world = cam.rotation.transpose() * (mean_cam - cam.translation);
            let s = Sliced3D { mean: mean_world, cov: cov3, w_t: 1.0, temporal_q: 0.0 };
            let Some((ctx, geom)) = project(&s, &cam) else { continue };

            // Literal (JW) Σ (JW)ᵀ expansion.
            let jw = ctx.jacobian * cam.rotation;
            let mut oracle = Matrix2::zeros();
            for i in 0..2 {
                for j in 0..2 {
                    let mut acc = 0.0;
                    for k in 0..3 {
                        for l in 0..3 {
                            acc += jw[(i, k)] * cov3[(k, l)] * jw[(j, l)];
                        }
                    }
                    oracle[(i, j)] = acc;
                }
            }
            let raw = geom.cov - Matrix2::identity() * COV2_BLUR;
            assert_relative_eq!(raw, oracle, epsilon = 1e-9, max_relative = 1e-9);
        }
    }

    #[test]
    fn project_scales_with_focal_length() {
        let s = Sliced3D {
            mean: Vector3::new(0.3, -0.2, 5.0),
            cov: Matrix3::new(0.4, 0.1, 0.0, 0.1, 0.3, 0.05, 0.0, 0.05, 0.2),
            w_t: 1.0,
            temporal_q: 0.0,
        };
        let (_, g1) = project(&s, &axis_camera(100.0)).unwrap();
        let (_, g2) = project(&s, &axis_camera(200.0)).unwrap();
        assert_relative_eq!(g2.center, g1.center * 2.0, epsilon = 1e-12);
        let raw1 = g1.cov - Matrix2::identity() * COV2_BLUR;
        let raw2 = g2.cov - Matrix2::identity() * COV2_BLUR;
        assert_relative_eq!(raw2, raw1 * 4.0, epsilon = 1e-9);
    }

    #[test]
    fn sh_zero_coefficients_give_midgray() {
        let out = eval_sh(&[[0.0; 3]; 4], &Vector3::new(0.0, 0.0, 1.0)).unwrap();
        assert_eq!(out, [0.5, 0.5, 0.5]);
    }

    #[test]
    fn sh_degree0_is_constant_band() {
        let c0 = [0.7, -0.3, 0.2];
        let out = eval_sh(&[c0], &Vector3::new(0.6, 0.0, 0.8)).unwrap();
        for ch in 0..3 {
            let expected = (c0[ch] * 0.282_094_791_77 + 0.5).max(0.0);
            assert_relative_eq!(out[ch], expected, epsilon = 1e-9);
        }
    }

    #[test]
    fn sh_degree1_z_axis_selects_y10() {
        let mut coeffs = [[0.0; 3]; 4];
        coeffs[0] = [0.1, 0.1, 0.1];
        coeffs[1] = [9.0, 9.0, 9.0]; // must not contribute at dir = +z
        coeffs[2] = [0.4, 0.2, -0.1];
        coeffs[3] = [7.0, 7.0, 7.0]; // must not contribute at dir = +z
        let out = eval_sh(&coeffs, &Vector3::new(0.0, 0.0, 1.0)).unwrap();
        for ch in 0..3 {
            let expected = (0.5 + coeffs[0][ch] * SH_C0 + coeffs[2][ch] * SH_C1).max(0.0);
            assert_relative_eq!(out[ch], expected, epsilon = 1e-12);
        }
    }

    /// Basis-table oracle with constants derived analytically from π rather
    /// than typed literals.
    #[test]
    fn sh_matches_analytic_basis_table() {
        use std::f64::consts::PI;
        let c0 = 0.5 * (1.0 / PI).sqrt();
        let c1 = (3.0 / (4.0 * PI)).sqrt();
        let c2 = [
            0.5 * (15.0 / PI).sqrt(),
            0.5 * (15.0 / PI).sqrt(),
            0.25 * (5.0 / PI).sqrt(),
            0.5 * (15.0 / PI).sqrt(),
            0.25 * (15.0 / PI).sqrt(),
        ];
        let c3 = [
            0.25 * (35.0 / (2.0 * PI)).sqrt(),
            0.5 * (105.0 / PI).sqrt(),
            0.25 * (21.0 / (2.0 * PI)).sqrt(),
            0.25 * (7.0 / PI).sqrt(),
            0.25 * (21.0 / (2.0 * PI)).sqrt(),
            0.25 * (105.0 / PI).sqrt(),
            0.25 * (35.0 / (2.0 * PI)).sqrt(),
        ];
        let mut r = rng(43);
        for _ in 0..50 {
            let dir = Vector3::from_fn(|_, _| r.random_range(-1.0..1.0)).normalize();
            let coeffs: Vec<[f64; 3]> = (0..16)
                .map(|_| [r.random_range(-1.0..1.0), r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)])
                .collect();
            let (x, y, z) = (dir.x, dir.y, dir.z);
            let basis = [
                c0,
                c1 * y,
                c1 * z,
                c1 * x,
                c2[0] * x * y,
                c2[1] * y * z,
                c2[2] * (3.0 * z * z - 1.0),
                c2[3] * x * z,
                c2[4] * (x * x - y * y),
                c3[0] * y * (3.0 * x * x - y * y),
                c3[1] * x * y * z,
                c3[2] * y * (5.0 * z * z - 1.0),
                c3[3] * z * (5.0 * z * z - 3.0),
                c3[4] * x * (5.0 * z * z - 1.0),
                c3[5] * z * (x * x - y * y),
                c3[6] * x * (x * x - 3.0 * y * y),
            ];
            let out = eval_sh(&coeffs, &dir).unwrap();
            for ch in 0..3 {
                let mut expected = 0.5;
                for i in 0..16 {
                    expected += basis[i] * coeffs[i][ch];
                }
                assert_relative_eq!(out[ch], expected.max(0.0), epsilon = 1e-9, max_relative = 1e-9);
            }
        }
    }

    #[test]
    fn sh_rejects_unsupported_degree() {
        assert!(matches!(
            eval_sh(&[[0.0; 3]; 5], &Vector3::z()),
            Err(MathError::UnsupportedShDegree(5))
        ));
    }

    #[test]
    fn alpha_peak_is_clamped() {
        let conic = Matrix2::identity();
        let p = Vector2::new(3.0, 4.0);
        assert_eq!(eval_alpha(1.0, &conic, &p, &p), ALPHA_MAX);
    }

    #[test]
    fn alpha_at_mahalanobis_two() {
        // conic = I/2 and |d|² = 4 gives q = 2.
        let conic = Matrix2::identity() * 0.5;
        let center = Vector2::new(0.0, 0.0);
        let pixel = Vector2::new(2.0, 0.0);
        assert_relative_eq!(eval_alpha(1.0, &conic, &center, &pixel), (-1.0f64).exp(), epsilon = 1e-15);
    }

    /// Merged-exponent vs two-exp cross-check. Both paths are computed in
    /// f64 and compared after rounding to the f32 the renderer quantizes to;
    /// they must land within one ULP of each other there.
    #[test]
    fn alpha_merged_matches_two_exp_within_f32_ulp() {
        let mut r = rng(47);
        for _ in 0..2000 {
            let opacity = r.random_range(0.05..1.0);
            let tq: f64 = r.random_range(0.0..9.0);
            let a = r.random_range(0.05..2.0);
            let c = r.random_range(0.05..2.0);
            let b = r.random_range(-0.9..0.9) * (a * c).sqrt() * 0.9;
            let conic = Matrix2::new(a, b, b, c);
            let center = Vector2::new(r.random_range(-4.0..4.0), r.random_range(-4.0..4.0));
            let pixel = Vector2::new(r.random_range(-4.0..4.0), r.random_range(-4.0..4.0));

            let merged = eval_alpha_merged(opacity, tq, &conic, &center, &pixel);
            let two_exp = eval_alpha(opacity * (-0.5 * tq).exp(), &conic, &center, &pixel);
            let m32 = merged as f32;
            let t32 = two_exp as f32;
            let ulp_gap = (m32.to_bits() as i64 - t32.to_bits() as i64).abs();
            assert!(
                ulp_gap <= 1,
                "paths diverge: merged={merged:e} two_exp={two_exp:e} ulp_gap={ulp_gap}"
            );
        }
    }

    #[test]
    fn blend_single_and_pair() {
        let c1 = [1.0, 0.5, 0.25];
        let out = blend_pixel(&[(0.99, c1)], 0.0);
        for ch in 0..3 {
            assert_relative_eq!(out[ch], 0.99 * c1[ch], epsilon = 1e-15);
        }
        let c2 = [0.0, 1.0, 0.0];
        let out = blend_pixel(&[(0.5, c1), (0.5, c2)], 0.0);
        for ch in 0..3 {
            assert_relative_eq!(out[ch], 0.5 * c1[ch] + 0.25 * c2[ch], epsilon = 1e-15);
        }
    }

    #[test]
    fn blend_matches_bruteforce_product_oracle() {
        let mut r = rng(53);
        for _ in 0..50 {
            let entries: Vec<(f64, [f64; 3])> = (0..20)
                .map(|_| {
                    (
                        r.random_range(0.0..0.99),
                        [r.random(), r.random(), r.random()],
                    )
                })
                .collect();
            let out = blend_pixel(&entries, 0.0);
            // Oracle recomputes each transmittance product from scratch.
            for ch in 0..3 {
                let mut expected = 0.0;
                for i in 0..entries.len() {
                    let mut t = 1.0;
                    for e in entries.iter().take(i) {
                        t *= 1.0 - e.0;
                    }
                    expected += entries[i].0 * entries[i].1[ch] * t;
                }
                assert_relative_eq!(out[ch], expected, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn blend_output_bounded_for_unit_colors() {
        let mut r = rng(59);
        for _ in 0..200 {
            let n = r.random_range(1..40);
            let entries: Vec<(f64, [f64; 3])> = (0..n)
                .map(|_| (r.random_range(0.0..0.99), [r.random(), r.random(), r.random()]))
                .collect();
            let out = blend_pixel(&entries, 0.0);
            for ch in 0..3 {
                assert!((0.0..=1.0).contains(&out[ch]), "channel escaped [0,1]: {out:?}");
            }
        }
    }

    #[test]
    fn blend_is_order_sensitive() {
        let a = (0.6, [1.0, 0.0, 0.0]);
        let b = (0.6, [0.0, 1.0, 0.0]);
        assert_ne!(blend_pixel(&[a, b], 0.0), blend_pixel(&[b, a], 0.0));
    }

    #[test]
    fn extent_examples() {
        assert_eq!(splat_extent(&Matrix2::identity()), 3.0);
        assert_eq!(splat_extent(&Matrix2::new(4.0, 0.0, 0.0, 1.0)), 6.0);
    }

    #[test]
    fn extent_matches_eigen_oracle() {
        let mut r = rng(61);
        for _ in 0..200 {
            let a = Matrix2::from_fn(|_, _| r.random_range(-2.0..2.0));
            let cov = a.transpose() * a;
            let lmax = cov.symmetric_eigenvalues().max();
            assert_relative_eq!(splat_extent(&cov), 3.0 * lmax.sqrt(), epsilon = 1e-9, max_relative = 1e-9);
        }
    }

    #[test]
    fn extent4_examples() {
        let g = test_gaussian(Matrix4::identity(), Vector4::zeros());
        assert_eq!(extent4(&g), (Vector3::new(3.0, 3.0, 3.0), 3.0));
        let g = test_gaussian(
            Matrix4::from_diagonal(&Vector4::new(4.0, 1.0, 1.0, 9.0)),
            Vector4::zeros(),
        );
        assert_eq!(extent4(&g), (Vector3::new(6.0, 3.0, 3.0), 9.0));
    }

    #[test]
    fn extent4_matches_marginal_oracle() {
        let mut r = rng(67);
        for _ in 0..100 {
            let cov = random_spd4(&mut r);
            let g = test_gaussian(cov, Vector4::zeros());
            let (half, th) = extent4(&g);
            for i in 0..3 {
                assert_relative_eq!(half[i], 3.0 * cov[(i, i)].sqrt(), epsilon = 1e-12);
            }
            assert_relative_eq!(th, 3.0 * cov[(3, 3)].sqrt(), epsilon = 1e-12);
        }
    }

    #[test]
    fn validate_catches_violations() {
        let mut g = test_gaussian(Matrix4::identity(), Vector4::zeros());
        assert!(g.validate().is_ok());
        g.opacity = 1.5;
        assert!(matches!(g.validate(), Err(MathError::OpacityOutOfRange(_))));
        g.opacity = 0.5;
        g.cov[(0, 1)] = 0.1; // asymmetric
        assert!(matches!(g.validate(), Err(MathError::NotSymmetric(_))));
        g.cov[(1, 0)] = 0.1;
        g.cov[(0, 0)] = -1.0;
        assert!(matches!(g.validate(), Err(MathError::NotPositiveDefinite(_))));
    }
}
