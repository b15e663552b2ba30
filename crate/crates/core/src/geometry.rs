//! Rigid poses, pinhole projection and their analytic derivatives.
//!
//! A pose is stored as a rotation vector `w` and a translation `t`; a world
//! point maps to the camera frame as `x_c = R(w) x_w + t`. Pixel coordinates
//! follow the convention that pixel `(i, j)` has its center at `(i, j)`.

use nalgebra::{Matrix3, SMatrix, Vector2, Vector3, Vector6};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec2 = Vector2<f64>;
pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Derivative of one projected image point with respect to the pose.
///
/// Rows are the image coordinates `(u, v)`, columns are `(w1, w2, w3, t1, t2, t3)`.
pub type PixelJacobian = SMatrix<f64, 2, 6>;

/// Below this rotation-vector norm the Taylor branches are used.
pub const SMALL_ANGLE: f64 = 1e-6;

/// Camera-frame depth at or below which a point is considered behind the camera.
pub const MIN_DEPTH: f64 = 1e-9;

const ORTHO_TOL: f64 = 1e-6;

/// 6-DoF pose as rotation vector and translation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "PoseRepr", into = "PoseRepr")]
pub struct Pose6 {
    pub w: Vec3,
    pub t: Vec3,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PoseRepr {
    w: [f64; 3],
    t: [f64; 3],
}

impl From<PoseRepr> for Pose6 {
    fn from(r: PoseRepr) -> Self {
        Pose6::new(Vec3::from(r.w), Vec3::from(r.t))
    }
}

impl From<Pose6> for PoseRepr {
    fn from(p: Pose6) -> Self {
        PoseRepr {
            w: p.w.into(),
            t: p.t.into(),
        }
    }
}

impl Pose6 {
    pub fn new(w: Vec3, t: Vec3) -> Self {
        Pose6 { w, t }
    }

    pub fn identity() -> Self {
        Pose6::new(Vec3::zeros(), Vec3::zeros())
    }

    pub fn from_rotation(r: &Rotation, t: Vec3) -> Self {
        Pose6::new(r.to_rotvec(), t)
    }

    pub fn is_finite(&self) -> bool {
        self.w.iter().chain(self.t.iter()).all(|v| v.is_finite())
    }

    pub fn to_vector(&self) -> Vector6<f64> {
        Vector6::new(self.w.x, self.w.y, self.w.z, self.t.x, self.t.y, self.t.z)
    }

    pub fn from_vector(v: &Vector6<f64>) -> Self {
        Pose6::new(Vec3::new(v[0], v[1], v[2]), Vec3::new(v[3], v[4], v[5]))
    }

    /// Same pose with the rotation vector wrapped to `‖w‖ ≤ π`.
    pub fn canonicalized(&self) -> Self {
        Pose6::new(canonical_rotvec(&self.w), self.t)
    }

    /// Additive update `P + ΔP` followed by rotation canonicalization.
    pub fn add_delta(&self, delta: &Vector6<f64>) -> Self {
        Pose6::from_vector(&(self.to_vector() + delta)).canonicalized()
    }

    pub fn rotation(&self) -> Result<Rotation> {
        rotvec_to_matrix(&self.w)
    }

    /// `R x + t`, with `R` already evaluated for this pose.
    #[inline]
    pub fn apply(&self, r: &Rotation, x: &Vec3) -> Vec3 {
        r.0 * x + self.t
    }
}

/// A proper rotation matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rotation(Mat3);

impl Rotation {
    pub fn identity() -> Self {
        Rotation(Mat3::identity())
    }

    /// Validates orthonormality and unit determinant within `1e-6`.
    pub fn from_matrix(m: Mat3) -> Result<Self> {
        if !m.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("rotation matrix has non-finite entries"));
        }
        let ortho = (m.transpose() * m - Mat3::identity()).abs().max();
        let det = m.determinant();
        if ortho > ORTHO_TOL || (det - 1.0).abs() > ORTHO_TOL {
            return Err(Error::invalid(format!(
                "matrix is not a rotation (orthogonality error {ortho:.3e}, det {det})"
            )));
        }
        Ok(Rotation(m))
    }

    pub fn matrix(&self) -> &Mat3 {
        &self.0
    }

    pub fn to_rotvec(&self) -> Vec3 {
        log_unchecked(&self.0)
    }

    pub fn transpose(&self) -> Rotation {
        Rotation(self.0.transpose())
    }

    pub fn compose(&self, other: &Rotation) -> Rotation {
        Rotation(self.0 * other.0)
    }
}

/// Pinhole intrinsics; `width × height` is the image size in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub px: f64,
    pub py: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, px: f64, py: f64, width: usize, height: usize) -> Result<Self> {
        let k = CameraIntrinsics {
            fx,
            fy,
            px,
            py,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0 && self.fx.is_finite() && self.fy.is_finite()) {
            return Err(Error::invalid("focal lengths must be positive and finite"));
        }
        if !(self.px.is_finite() && self.py.is_finite()) {
            return Err(Error::invalid("principal point must be finite"));
        }
        if self.width < 1 || self.height < 1 {
            return Err(Error::invalid("image size must be at least 1x1"));
        }
        Ok(())
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }
}

pub fn skew(v: &Vec3) -> Mat3 {
    Mat3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

fn vee(m: &Mat3) -> Vec3 {
    Vec3::new(m[(2, 1)], m[(0, 2)], m[(1, 0)])
}

/// Rodrigues formula `exp([w]×)`.
pub fn rotvec_to_matrix(w: &Vec3) -> Result<Rotation> {
    if !w.iter().all(|v| v.is_finite()) {
        return Err(Error::invalid("rotation vector must be finite"));
    }
    Ok(Rotation(exp_unchecked(w)))
}

fn exp_unchecked(w: &Vec3) -> Mat3 {
    let theta = w.norm();
    let k = skew(w);
    if theta < SMALL_ANGLE {
        return Mat3::identity() + k + 0.5 * k * k;
    }
    let a = theta.sin() / theta;
    let b = (1.0 - theta.cos()) / (theta * theta);
    Mat3::identity() + a * k + b * k * k
}

/// Inverse of [`rotvec_to_matrix`]; the result satisfies `‖w‖ ≤ π`.
pub fn matrix_to_rotvec(r: &Mat3) -> Result<Vec3> {
    Ok(Rotation::from_matrix(*r)?.to_rotvec())
}

fn log_unchecked(r: &Mat3) -> Vec3 {
    let c = 0.5 * (r.trace() - 1.0);
    let v = 0.5 * vee(&(r - r.transpose()));
    let s = v.norm();
    let theta = s.atan2(c);
    if c > 0.0 {
        if s < 1e-300 {
            return v;
        }
        return v * (theta / s);
    }
    // Near π the antisymmetric part vanishes; recover the axis from the
    // symmetric part (R + Rᵀ)/2 − cos θ I = (1 − cos θ) k kᵀ.
    let b = 0.5 * (r + r.transpose()) - Mat3::identity() * c;
    let diag = b.diagonal();
    let i = diag.imax();
    let mut k = b.column(i) / (diag[i] * (1.0 - c)).sqrt();
    if k.dot(&v) < 0.0 {
        k = -k;
    }
    k.normalize() * theta
}

/// Wraps a rotation vector to the equivalent one with `‖w‖ ≤ π`.
pub fn canonical_rotvec(w: &Vec3) -> Vec3 {
    let theta = w.norm();
    if theta <= std::f64::consts::PI || !theta.is_finite() {
        return *w;
    }
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut wrapped = theta.rem_euclid(two_pi);
    if wrapped > std::f64::consts::PI {
        wrapped -= two_pi;
    }
    w * (wrapped / theta)
}

/// `R x_w + t`.
pub fn transform_point(pose: &Pose6, x_w: &Vec3) -> Result<Vec3> {
    if !pose.is_finite() || !x_w.iter().all(|v| v.is_finite()) {
        return Err(Error::invalid("pose and point must be finite"));
    }
    Ok(pose.apply(&pose.rotation()?, x_w))
}

/// Pinhole projection of a camera-frame point to pixel coordinates.
pub fn project(k: &CameraIntrinsics, x_c: &Vec3) -> Result<Vec2> {
    if x_c.z <= MIN_DEPTH {
        return Err(Error::BehindCamera { z: x_c.z });
    }
    Ok(Vec2::new(
        k.fx * x_c.x / x_c.z + k.px,
        k.fy * x_c.y / x_c.z + k.py,
    ))
}

/// `∂R/∂w_i` for `i = 1..3`, each a 3×3 matrix.
pub fn rotation_jacobian(w: &Vec3) -> [Mat3; 3] {
    let theta2 = w.norm_squared();
    let basis = [Vec3::x(), Vec3::y(), Vec3::z()];
    if theta2.sqrt() < SMALL_ANGLE {
        return basis.map(|e| skew(&e));
    }
    let r = exp_unchecked(w);
    let wx = skew(w);
    let id_minus_r = Mat3::identity() - r;
    basis.map(|e| {
        let i = e.imax();
        let inner = w.cross(&(id_minus_r * e));
        (w[i] * wx + skew(&inner)) / theta2 * r
    })
}

/// `∂x/∂R` for the row-major vectorized rotation: a 2×9 block (the
/// transpose of the 9×2 stacked form).
fn projection_rotation_block(k: &CameraIntrinsics, x_w: &Vec3, x_c: &Vec3) -> SMatrix<f64, 2, 9> {
    let inv_z = 1.0 / x_c.z;
    let inv_z2 = inv_z * inv_z;
    let mut block = SMatrix::<f64, 2, 9>::zeros();
    for c in 0..3 {
        block[(0, c)] = k.fx * x_w[c] * inv_z;
        block[(1, 3 + c)] = k.fy * x_w[c] * inv_z;
        block[(0, 6 + c)] = -k.fx * x_c.x * x_w[c] * inv_z2;
        block[(1, 6 + c)] = -k.fy * x_c.y * x_w[c] * inv_z2;
    }
    block
}

/// Analytic `∂x/∂P` of the projected world point `x_w`.
pub fn pixel_jacobian(pose: &Pose6, x_w: &Vec3, k: &CameraIntrinsics) -> Result<PixelJacobian> {
    let r = pose.rotation()?;
    let dr = rotation_jacobian(&pose.w);
    pixel_jacobian_with(&r, &dr, pose, x_w, k)
}

/// [`pixel_jacobian`] with the rotation and its derivatives precomputed.
pub fn pixel_jacobian_with(
    r: &Rotation,
    dr: &[Mat3; 3],
    pose: &Pose6,
    x_w: &Vec3,
    k: &CameraIntrinsics,
) -> Result<PixelJacobian> {
    let x_c = pose.apply(r, x_w);
    if x_c.z <= MIN_DEPTH {
        return Err(Error::BehindCamera { z: x_c.z });
    }
    let block = projection_rotation_block(k, x_w, &x_c);
    let mut jac = PixelJacobian::zeros();
    for (i, dri) in dr.iter().enumerate() {
        for row in 0..2 {
            let mut acc = 0.0;
            for a in 0..3 {
                for b in 0..3 {
                    acc += dri[(a, b)] * block[(row, 3 * a + b)];
                }
            }
            jac[(row, i)] = acc;
        }
    }
    let inv_z = 1.0 / x_c.z;
    jac[(0, 3)] = k.fx * inv_z;
    jac[(0, 5)] = -k.fx * x_c.x * inv_z * inv_z;
    jac[(1, 4)] = k.fy * inv_z;
    jac[(1, 5)] = -k.fy * x_c.y * inv_z * inv_z;
    Ok(jac)
}

/// Uniformly distributed unit vector.
pub fn random_unit_vector<R: rand::Rng + ?Sized>(rng: &mut R) -> Vec3 {
    use rand_distr::{Distribution, StandardNormal};
    loop {
        let v = Vec3::new(
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
        );
        let n = v.norm();
        if n > 1e-12 {
            return v / n;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn series_exp(w: &Vec3) -> Mat3 {
        let k = skew(w);
        let mut term = Mat3::identity();
        let mut sum = Mat3::identity();
        for n in 1..=20 {
            term = term * k / n as f64;
            sum += term;
        }
        sum
    }

    fn fd_rotation(w: &Vec3, i: usize, h: f64) -> Mat3 {
        let mut wp = *w;
        let mut wm = *w;
        wp[i] += h;
        wm[i] -= h;
        (exp_unchecked(&wp) - exp_unchecked(&wm)) / (2.0 * h)
    }

    fn quarter_z() -> Mat3 {
        Mat3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0)
    }

    #[test]
    fn zero_rotation_is_identity() {
        let r = rotvec_to_matrix(&Vec3::zeros()).unwrap();
        assert_eq!(*r.matrix(), Mat3::identity());
    }

    #[test]
    fn quarter_turn_about_z() {
        let r = rotvec_to_matrix(&Vec3::new(0.0, 0.0, FRAC_PI_2)).unwrap();
        assert!((r.matrix() - quarter_z()).abs().max() < 1e-15);
        let w = matrix_to_rotvec(&quarter_z()).unwrap();
        assert!((w - Vec3::new(0.0, 0.0, FRAC_PI_2)).norm() < 1e-15);
    }

    #[test]
    fn rodrigues_matches_series() {
        let w = Vec3::new(0.1, 0.2, 0.3);
        let r = rotvec_to_matrix(&w).unwrap();
        assert!((r.matrix() - series_exp(&w)).abs().max() < 1e-12);
    }

    #[test]
    fn non_finite_rotvec_rejected() {
        assert!(rotvec_to_matrix(&Vec3::new(f64::NAN, 0.0, 0.0)).is_err());
    }

    #[test]
    fn identity_log_is_zero() {
        assert_eq!(matrix_to_rotvec(&Mat3::identity()).unwrap(), Vec3::zeros());
    }

    #[test]
    fn non_orthogonal_rejected() {
        let mut m = Mat3::identity();
        m[(0, 1)] = 1e-3;
        assert!(matches!(
            matrix_to_rotvec(&m),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn roundtrip_random_samples() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let angle = rng.random_range(1e-9..PI - 1e-6);
            let w = random_unit_vector(&mut rng) * angle;
            let r = rotvec_to_matrix(&w).unwrap();
            let back = r.to_rotvec();
            assert!(back.norm() <= PI);
            let r2 = rotvec_to_matrix(&back).unwrap();
            assert!((r.matrix() - r2.matrix()).abs().max() < 1e-9);
            assert!((back - w).norm() < 1e-9, "{w:?} -> {back:?}");
        }
    }

    #[test]
    fn canonicalization_wraps_past_pi() {
        let axis = Vec3::new(1.0, 2.0, -1.0).normalize();
        let w = axis * (PI + 0.3);
        let c = canonical_rotvec(&w);
        assert!(c.norm() <= PI);
        let a = rotvec_to_matrix(&w).unwrap();
        let b = rotvec_to_matrix(&c).unwrap();
        assert!((a.matrix() - b.matrix()).abs().max() < 1e-12);
        let far = axis * (5.0 * PI + 0.1);
        assert!((canonical_rotvec(&far) - axis * (PI + 0.1 - 2.0 * PI)).norm() < 1e-12);
    }

    #[test]
    fn transform_examples() {
        let p = Pose6::identity();
        assert_eq!(
            transform_point(&p, &Vec3::new(1.0, 2.0, 3.0)).unwrap(),
            Vec3::new(1.0, 2.0, 3.0)
        );
        let p = Pose6::new(Vec3::zeros(), Vec3::new(0.0, 0.0, 5.0));
        assert_eq!(
            transform_point(&p, &Vec3::zeros()).unwrap(),
            Vec3::new(0.0, 0.0, 5.0)
        );
        let p = Pose6::new(Vec3::new(0.0, 0.0, FRAC_PI_2), Vec3::zeros());
        let x = transform_point(&p, &Vec3::new(1.0, 0.0, 0.0)).unwrap();
        assert!((x - Vec3::new(0.0, 1.0, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn projection_examples() {
        let k = CameraIntrinsics::new(100.0, 100.0, 0.0, 0.0, 10, 10).unwrap();
        assert_eq!(project(&k, &Vec3::new(0.0, 0.0, 1.0)).unwrap(), Vec2::zeros());
        let k = CameraIntrinsics::new(100.0, 100.0, 320.0, 240.0, 640, 480).unwrap();
        assert_eq!(
            project(&k, &Vec3::new(1.0, 2.0, 2.0)).unwrap(),
            Vec2::new(370.0, 340.0)
        );
        assert!(matches!(
            project(&k, &Vec3::new(0.0, 0.0, -1.0)),
            Err(Error::BehindCamera { .. })
        ));
    }

    #[test]
    fn intrinsics_validation() {
        assert!(CameraIntrinsics::new(0.0, 1.0, 0.0, 0.0, 1, 1).is_err());
        assert!(CameraIntrinsics::new(1.0, 1.0, 0.0, 0.0, 0, 1).is_err());
    }

    #[test]
    fn rotation_jacobian_at_identity() {
        let d = rotation_jacobian(&Vec3::zeros());
        let expected = Mat3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0);
        assert_eq!(d[2], expected);
    }

    #[test]
    fn rotation_jacobian_matches_fd() {
        let w = Vec3::new(0.2, -0.1, 0.4);
        let d = rotation_jacobian(&w);
        for i in 0..3 {
            assert!((d[i] - fd_rotation(&w, i, 1e-6)).abs().max() < 1e-6);
        }
    }

    #[test]
    fn rotation_jacobian_near_wrap() {
        let w = Vec3::new(1.0, -2.0, 0.5).normalize() * (PI - 1e-9);
        let d = rotation_jacobian(&w);
        for i in 0..3 {
            assert!(d[i].iter().all(|v| v.is_finite()));
            assert!((d[i] - fd_rotation(&w, i, 1e-6)).abs().max() < 1e-5);
        }
    }

    #[test]
    fn translation_block_on_axis() {
        let k = CameraIntrinsics::new(100.0, 100.0, 0.0, 0.0, 10, 10).unwrap();
        let j = pixel_jacobian(&Pose6::identity(), &Vec3::new(0.0, 0.0, 1.0), &k).unwrap();
        let t = j.fixed_view::<2, 3>(0, 3);
        assert_eq!(t[(0, 0)], 100.0);
        assert_eq!(t[(0, 1)], 0.0);
        assert_eq!(t[(0, 2)], 0.0);
        assert_eq!(t[(1, 0)], 0.0);
        assert_eq!(t[(1, 1)], 100.0);
        assert_eq!(t[(1, 2)], 0.0);
    }

    #[test]
    fn doubling_depth_halves_translation_entries() {
        let k = CameraIntrinsics::new(120.0, 90.0, 5.0, 3.0, 10, 10).unwrap();
        let x = Vec3::new(0.3, -0.2, 0.0);
        let near = Pose6::new(Vec3::zeros(), Vec3::new(0.0, 0.0, 2.0));
        let far = Pose6::new(Vec3::zeros(), Vec3::new(0.0, 0.0, 4.0));
        let jn = pixel_jacobian(&near, &x, &k).unwrap();
        let jf = pixel_jacobian(&far, &x, &k).unwrap();
        assert!((jf[(0, 3)] - 0.5 * jn[(0, 3)]).abs() < 1e-12);
        assert!((jf[(1, 4)] - 0.5 * jn[(1, 4)]).abs() < 1e-12);
    }

    #[test]
    fn pixel_jacobian_behind_camera() {
        let k = CameraIntrinsics::new(1.0, 1.0, 0.0, 0.0, 1, 1).unwrap();
        assert!(pixel_jacobian(&Pose6::identity(), &Vec3::new(0.0, 0.0, -1.0), &k).is_err());
    }

    proptest! {
        #[test]
        fn projection_is_ray_invariant(
            x in -2.0..2.0f64, y in -2.0..2.0f64, z in 0.1..5.0f64, lambda in 0.01..100.0f64
        ) {
            let k = CameraIntrinsics::new(500.0, 480.0, 320.0, 240.0, 640, 480).unwrap();
            let a = project(&k, &Vec3::new(x, y, z)).unwrap();
            let b = project(&k, &(Vec3::new(x, y, z) * lambda)).unwrap();
            prop_assert!((a - b).norm() < 1e-9 * (1.0 + a.norm()));
        }

        #[test]
        fn constructed_rotations_are_orthonormal(
            wx in -4.0..4.0f64, wy in -4.0..4.0f64, wz in -4.0..4.0f64
        ) {
            let r = rotvec_to_matrix(&Vec3::new(wx, wy, wz)).unwrap();
            let m = r.matrix();
            prop_assert!((m.transpose() * m - Mat3::identity()).abs().max() < 1e-9);
            prop_assert!((m.determinant() - 1.0).abs() < 1e-9);
        }
    }
}
