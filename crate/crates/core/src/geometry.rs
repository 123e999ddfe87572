//! Rotation representations, pose error metrics, pinhole projection, and
//! the lab-to-model position calibration.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::Real;

/// 3-vector in meters (or unitless where noted).
pub type Vec3 = [Real; 3];

/// 3×3 matrix, row-major: `m[row][col]`.
pub type Mat3 = [[Real; 3]; 3];

const DEGENERACY_EPS: Real = 1e-9;

/// Unit quaternion, Hamilton convention, scalar first. Normalization
/// canonicalizes the sign so that `w ≥ 0`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Quaternion {
    pub w: Real,
    pub x: Real,
    pub y: Real,
    pub z: Real,
}

impl Quaternion {
    pub const IDENTITY: Self = Self {
        w: 1.0,
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    pub fn new(w: Real, x: Real, y: Real, z: Real) -> Self {
        Self { w, x, y, z }
    }

    pub fn norm(self) -> Real {
        (self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    /// Scales to unit norm and flips the sign so the scalar part is
    /// non-negative. Errors on a zero-norm input.
    pub fn normalized(self) -> Result<Self> {
        let n = self.norm();
        if n < DEGENERACY_EPS {
            return Err(Error::DegenerateRotation(format!(
                "quaternion norm {} too small to normalize",
                n
            )));
        }
        let sign = if self.w < 0.0 { -1.0 } else { 1.0 };
        let s = sign / n;
        Ok(Self {
            w: self.w * s,
            x: self.x * s,
            y: self.y * s,
            z: self.z * s,
        })
    }

    /// Conjugate; equals the inverse for unit quaternions.
    pub fn conjugate(self) -> Self {
        Self {
            w: self.w,
            x: -self.x,
            y: -self.y,
            z: -self.z,
        }
    }

    /// Rotation of `angle` radians about `axis`.
    pub fn from_axis_angle(axis: Vec3, angle: Real) -> Result<Self> {
        let n = (axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]).sqrt();
        if n < DEGENERACY_EPS {
            return Err(Error::DegenerateRotation(
                "axis norm too small for axis-angle".into(),
            ));
        }
        let half = angle / 2.0;
        let s = half.sin() / n;
        Self::new(half.cos(), axis[0] * s, axis[1] * s, axis[2] * s).normalized()
    }

    /// Composition of rotations about the body axes, applied x, then y,
    /// then z.
    pub fn from_euler_xyz(rx: Real, ry: Real, rz: Real) -> Self {
        let qx = Self::from_axis_angle([1.0, 0.0, 0.0], rx).expect("unit axis");
        let qy = Self::from_axis_angle([0.0, 1.0, 0.0], ry).expect("unit axis");
        let qz = Self::from_axis_angle([0.0, 0.0, 1.0], rz).expect("unit axis");
        let yx = quat_multiply(qy, qx).expect("unit operands");
        quat_multiply(qz, yx).expect("unit operands")
    }

    /// Uniformly distributed unit quaternion (normalized 4-D Gaussian).
    pub fn random_uniform(rng: &mut impl Rng) -> Self {
        loop {
            let sample: [f64; 4] = [
                standard_normal(rng),
                standard_normal(rng),
                standard_normal(rng),
                standard_normal(rng),
            ];
            let q = Self::new(
                sample[0] as Real,
                sample[1] as Real,
                sample[2] as Real,
                sample[3] as Real,
            );
            if let Ok(unit) = q.normalized() {
                return unit;
            }
        }
    }

    pub fn to_array(self) -> [Real; 4] {
        [self.w, self.x, self.y, self.z]
    }
}

fn standard_normal(rng: &mut impl Rng) -> f64 {
    use rand_distr::{Distribution, StandardNormal};
    <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)
}

/// First two columns of a rotation matrix, column-major:
/// `[a1x, a1y, a1z, a2x, a2y, a2z]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rotation6D(pub [Real; 6]);

/// Pinhole camera intrinsics in pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: Real,
    pub fy: Real,
    pub cx: Real,
    pub cy: Real,
}

impl CameraIntrinsics {
    pub fn new(fx: Real, fy: Real, cx: Real, cy: Real) -> Result<Self> {
        if fx <= 0.0 || fy <= 0.0 {
            return Err(Error::param(
                "focal length",
                format!("fx {} and fy {} must be positive", fx, fy),
            ));
        }
        Ok(Self { fx, fy, cx, cy })
    }

    /// Camera used for synthetic training scenes.
    pub fn synthetic_default() -> Self {
        Self {
            fx: 640.0,
            fy: 360.0,
            cx: 240.0,
            cy: 135.0,
        }
    }

    /// Wide-angle camera for the 120x90 desk-scale renders; keeps every
    /// standard trajectory, including the corner starts, inside the frame.
    pub fn desk_default() -> Self {
        Self {
            fx: 100.0,
            fy: 75.0,
            cx: 60.0,
            cy: 45.0,
        }
    }

    /// Stereo camera used for the lab captures.
    pub fn lab_default() -> Self {
        Self {
            fx: 1400.41,
            fy: 1400.41,
            cx: 956.29,
            cy: 557.258,
        }
    }
}

/// Scalar mapping between lab-frame positions and the model's metric frame.
/// The scale either comes from a recorded anchor pair (a lab range and the
/// model range it must land on) or is composed from the camera quantities.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LabCalibration {
    pub model_focal: Real,
    pub model_cx: Real,
    pub lab_focal: Real,
    pub lab_cx: Real,
    /// Real target size over lab mock-up size.
    pub scale_factor: Real,
    pub image_width_model: Real,
    fitted_scale: Option<Real>,
}

impl LabCalibration {
    fn validate(self) -> Result<Self> {
        let fields = [
            ("model_focal", self.model_focal),
            ("model_cx", self.model_cx),
            ("lab_focal", self.lab_focal),
            ("lab_cx", self.lab_cx),
            ("scale_factor", self.scale_factor),
            ("image_width_model", self.image_width_model),
        ];
        for (name, v) in fields {
            if v <= 0.0 {
                return Err(Error::param(name, format!("{} must be positive", v)));
            }
        }
        Ok(self)
    }

    /// Calibration whose scale is fit from one anchor pair: a distance in
    /// the lab frame and the model-frame distance it must map to.
    #[allow(clippy::too_many_arguments)]
    pub fn fitted(
        model_focal: Real,
        model_cx: Real,
        lab_focal: Real,
        lab_cx: Real,
        scale_factor: Real,
        image_width_model: Real,
        anchor_lab: Real,
        anchor_model: Real,
    ) -> Result<Self> {
        if anchor_lab <= 0.0 || anchor_model <= 0.0 {
            return Err(Error::param(
                "anchor",
                format!("pair ({}, {}) must be positive", anchor_lab, anchor_model),
            ));
        }
        Self {
            model_focal,
            model_cx,
            lab_focal,
            lab_cx,
            scale_factor,
            image_width_model,
            fitted_scale: Some(anchor_model / anchor_lab),
        }
        .validate()
    }

    /// Calibration whose scale is composed from the camera quantities:
    /// `lab_focal · model_cx / (lab_cx · scale_factor · image_width_model)`.
    pub fn composed(
        model_focal: Real,
        model_cx: Real,
        lab_focal: Real,
        lab_cx: Real,
        scale_factor: Real,
        image_width_model: Real,
    ) -> Result<Self> {
        Self {
            model_focal,
            model_cx,
            lab_focal,
            lab_cx,
            scale_factor,
            image_width_model,
            fitted_scale: None,
        }
        .validate()
    }

    /// The default bench rig: synthetic and lab camera constants with the
    /// 1/9-scale mock-up, anchored on the recorded 3.122 m → 51.180 m
    /// range pair.
    pub fn default_rig() -> Self {
        Self::fitted(640.0, 240.0, 1400.41, 956.29, 9.0, 640.0, 3.122, 51.180)
            .expect("constants are positive")
    }

    /// The scalar multiplying lab positions.
    pub fn scale(&self) -> Real {
        match self.fitted_scale {
            Some(c) => c,
            None => {
                self.lab_focal * self.model_cx
                    / (self.lab_cx * self.scale_factor * self.image_width_model)
            }
        }
    }
}

/// Relative pose ground truth: target position in the camera frame plus the
/// target attitude.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PoseLabel {
    pub position: Vec3,
    pub attitude: Quaternion,
}

/// Hamilton product of two unit quaternions, renormalized.
pub fn quat_multiply(q1: Quaternion, q2: Quaternion) -> Result<Quaternion> {
    let w = q1.w * q2.w - q1.x * q2.x - q1.y * q2.y - q1.z * q2.z;
    let x = q1.w * q2.x + q1.x * q2.w + q1.y * q2.z - q1.z * q2.y;
    let y = q1.w * q2.y - q1.x * q2.z + q1.y * q2.w + q1.z * q2.x;
    let z = q1.w * q2.z + q1.x * q2.y - q1.y * q2.x + q1.z * q2.w;
    Quaternion::new(w, x, y, z).normalized()
}

/// Rotation matrix for a unit quaternion; maps body-frame vectors to the
/// camera frame.
pub fn quat_to_matrix(q: Quaternion) -> Mat3 {
    let (w, x, y, z) = (q.w, q.x, q.y, q.z);
    [
        [
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
        ],
        [
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
        ],
        [
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        ],
    ]
}

/// Quaternion for a rotation matrix, by the largest-pivot branch.
pub fn matrix_to_quat(m: &Mat3) -> Result<Quaternion> {
    let tr = m[0][0] + m[1][1] + m[2][2];
    let q = if tr > 0.0 {
        let s = (tr + 1.0).sqrt() * 2.0;
        Quaternion::new(
            s / 4.0,
            (m[2][1] - m[1][2]) / s,
            (m[0][2] - m[2][0]) / s,
            (m[1][0] - m[0][1]) / s,
        )
    } else if m[0][0] >= m[1][1] && m[0][0] >= m[2][2] {
        let s = (1.0 + m[0][0] - m[1][1] - m[2][2]).sqrt() * 2.0;
        Quaternion::new(
            (m[2][1] - m[1][2]) / s,
            s / 4.0,
            (m[0][1] + m[1][0]) / s,
            (m[0][2] + m[2][0]) / s,
        )
    } else if m[1][1] >= m[2][2] {
        let s = (1.0 + m[1][1] - m[0][0] - m[2][2]).sqrt() * 2.0;
        Quaternion::new(
            (m[0][2] - m[2][0]) / s,
            (m[0][1] + m[1][0]) / s,
            s / 4.0,
            (m[1][2] + m[2][1]) / s,
        )
    } else {
        let s = (1.0 + m[2][2] - m[0][0] - m[1][1]).sqrt() * 2.0;
        Quaternion::new(
            (m[1][0] - m[0][1]) / s,
            (m[0][2] + m[2][0]) / s,
            (m[1][2] + m[2][1]) / s,
            s / 4.0,
        )
    };
    q.normalized()
}

/// First two rotation-matrix columns of a unit quaternion. Antipodal
/// quaternions map to the identical vector.
pub fn quat_to_6d(q: Quaternion) -> Rotation6D {
    let m = quat_to_matrix(q);
    Rotation6D([m[0][0], m[1][0], m[2][0], m[0][1], m[1][1], m[2][1]])
}

/// Rebuilds a rotation matrix from two columns by Gram–Schmidt:
/// `b1 = a1/‖a1‖`, `b2 = normalize(a2 − (b1·a2)b1)`, `b3 = b1 × b2`.
pub fn sixd_to_matrix(r: Rotation6D) -> Result<Mat3> {
    let a1 = [r.0[0], r.0[1], r.0[2]];
    let a2 = [r.0[3], r.0[4], r.0[5]];
    let n1 = norm3(a1);
    if n1 < DEGENERACY_EPS {
        return Err(Error::DegenerateRotation(format!(
            "first column norm {} too small",
            n1
        )));
    }
    let b1 = scale3(a1, 1.0 / n1);
    let n2 = norm3(a2);
    if n2 < DEGENERACY_EPS {
        return Err(Error::DegenerateRotation(format!(
            "second column norm {} too small",
            n2
        )));
    }
    let d = dot3(b1, a2);
    if (d / n2).abs() > 1.0 - DEGENERACY_EPS {
        return Err(Error::DegenerateRotation(
            "columns are parallel".into(),
        ));
    }
    let ortho = sub3(a2, scale3(b1, d));
    let b2 = scale3(ortho, 1.0 / norm3(ortho));
    let b3 = cross3(b1, b2);
    Ok([
        [b1[0], b2[0], b3[0]],
        [b1[1], b2[1], b3[1]],
        [b1[2], b2[2], b3[2]],
    ])
}

/// Euclidean distance between predicted and true positions, in meters.
pub fn position_error(p_pred: Vec3, p_gt: Vec3) -> Real {
    norm3(sub3(p_pred, p_gt))
}

/// Geodesic angle between two attitudes in degrees:
/// `2·arccos(|w(q_pred⁻¹ ⊗ q_gt)|)`. Antipodal-invariant, in [0, 180].
/// Evaluated through `atan2` of the relative quaternion's vector and scalar
/// parts, which is exact at zero where `arccos` loses half the precision.
pub fn attitude_error(q_pred: Quaternion, q_gt: Quaternion) -> Real {
    let p = q_pred.conjugate();
    // Pairwise grouping: when q_gt = ±q_pred each parenthesized pair holds
    // bitwise-identical products of opposite sign, so the error is exactly 0.
    let w = p.w * q_gt.w - p.x * q_gt.x - p.y * q_gt.y - p.z * q_gt.z;
    let x = (p.w * q_gt.x + p.x * q_gt.w) + (p.y * q_gt.z - p.z * q_gt.y);
    let y = (p.w * q_gt.y + p.y * q_gt.w) + (p.z * q_gt.x - p.x * q_gt.z);
    let z = (p.w * q_gt.z + p.z * q_gt.w) + (p.x * q_gt.y - p.y * q_gt.x);
    let vec_norm = (x * x + y * y + z * z).sqrt();
    2.0 * vec_norm.atan2(w.abs()) * 180.0 / std::f64::consts::PI as Real
}

/// Pinhole projection of a camera-frame point to pixels:
/// `u = fx·x/z + cx`, `v = fy·y/z + cy`. The point must sit in front of
/// the camera.
pub fn project(k: &CameraIntrinsics, point: Vec3) -> Result<(Real, Real)> {
    let [x, y, z] = point;
    if z <= 0.0 {
        return Err(Error::BehindCamera { z: z as f64 });
    }
    Ok((k.fx * x / z + k.cx, k.fy * y / z + k.cy))
}

/// Maps a lab-frame relative position into the model's metric frame by the
/// calibration scale.
pub fn lab_to_model_position(pos_lab: Vec3, calib: &LabCalibration) -> Vec3 {
    scale3(pos_lab, calib.scale())
}

fn dot3(a: Vec3, b: Vec3) -> Real {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn norm3(a: Vec3) -> Real {
    dot3(a, a).sqrt()
}

fn sub3(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn scale3(a: Vec3, s: Real) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

fn cross3(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
        let mut out = [[0.0; 3]; 3];
        for (i, row) in out.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (0..3).map(|k| a[i][k] * b[k][j]).sum();
            }
        }
        out
    }

    fn max_abs_diff(a: &Mat3, b: &Mat3) -> Real {
        let mut worst: Real = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                worst = worst.max((a[i][j] - b[i][j]).abs());
            }
        }
        worst
    }

    #[test]
    fn identity_is_the_multiplicative_unit() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let q = Quaternion::random_uniform(&mut rng);
        let prod = quat_multiply(Quaternion::IDENTITY, q).unwrap();
        assert!(attitude_error(prod, q) < 1e-9);
    }

    #[test]
    fn quaternion_times_conjugate_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let q = Quaternion::random_uniform(&mut rng);
        let prod = quat_multiply(q, q.conjugate()).unwrap();
        assert!(attitude_error(prod, Quaternion::IDENTITY) < 1e-9);
    }

    #[test]
    fn product_matches_rotation_matrix_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let q1 = Quaternion::random_uniform(&mut rng);
            let q2 = Quaternion::random_uniform(&mut rng);
            let prod = quat_multiply(q1, q2).unwrap();
            let expected = mat_mul(&quat_to_matrix(q1), &quat_to_matrix(q2));
            assert!(max_abs_diff(&quat_to_matrix(prod), &expected) < 1e-12);
        }
    }

    #[test]
    fn normalize_rejects_zero_quaternion() {
        assert!(Quaternion::new(0.0, 0.0, 0.0, 0.0).normalized().is_err());
    }

    #[test]
    fn normalize_canonicalizes_sign() {
        let q = Quaternion::new(-0.5, 0.5, 0.5, 0.5).normalized().unwrap();
        assert!(q.w >= 0.0);
        assert!((q.norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn identity_quaternion_maps_to_identity_columns() {
        let r = quat_to_6d(Quaternion::IDENTITY);
        assert_eq!(r.0, [1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn antipodal_quaternions_share_one_6d_vector() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let q = Quaternion::random_uniform(&mut rng);
        let neg = Quaternion::new(-q.w, -q.x, -q.y, -q.z);
        assert_eq!(quat_to_6d(q), quat_to_6d(neg));
    }

    #[test]
    fn six_d_round_trip_is_tight() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let q = Quaternion::random_uniform(&mut rng);
            let m = sixd_to_matrix(quat_to_6d(q)).unwrap();
            let back = matrix_to_quat(&m).unwrap();
            assert!(attitude_error(back, q) < 1e-6);
        }
    }

    #[test]
    fn six_d_matrix_is_orthonormal_with_unit_determinant() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..50 {
            let r = Rotation6D([
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-2.0..2.0),
            ]);
            let m = match sixd_to_matrix(r) {
                Ok(m) => m,
                Err(_) => continue,
            };
            let mt = [
                [m[0][0], m[1][0], m[2][0]],
                [m[0][1], m[1][1], m[2][1]],
                [m[0][2], m[1][2], m[2][2]],
            ];
            let eye = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
            assert!(max_abs_diff(&mat_mul(&mt, &m), &eye) < 1e-9);
            let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
                - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
                + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
            assert!((det - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn degenerate_6d_inputs_are_rejected() {
        let zero_first = Rotation6D([0.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        assert!(sixd_to_matrix(zero_first).is_err());
        let parallel = Rotation6D([1.0, 0.0, 0.0, 2.0, 0.0, 0.0]);
        assert!(sixd_to_matrix(parallel).is_err());
        let zero_second = Rotation6D([1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        assert!(sixd_to_matrix(zero_second).is_err());
    }

    #[test]
    fn position_error_basics() {
        assert_eq!(position_error([1.0, 2.0, 3.0], [1.0, 2.0, 3.0]), 0.0);
        assert_eq!(position_error([1.0, 0.0, 0.0], [0.0, 0.0, 0.0]), 1.0);
        assert_eq!(position_error([3.0, 4.0, 0.0], [0.0, 0.0, 0.0]), 5.0);
    }

    #[test]
    fn attitude_error_basics() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let q = Quaternion::random_uniform(&mut rng);
        assert_eq!(attitude_error(q, q), 0.0);

        let ninety = Quaternion::from_axis_angle(
            [0.0, 0.0, 1.0],
            std::f64::consts::FRAC_PI_2 as Real,
        )
        .unwrap();
        let err = attitude_error(Quaternion::IDENTITY, ninety);
        assert!((err - 90.0).abs() < 1e-9);

        let neg = Quaternion::new(-q.w, -q.x, -q.y, -q.z);
        assert_eq!(attitude_error(q, neg), 0.0);
    }

    #[test]
    fn attitude_error_is_symmetric_and_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..50 {
            let a = Quaternion::random_uniform(&mut rng);
            let b = Quaternion::random_uniform(&mut rng);
            let ab = attitude_error(a, b);
            let ba = attitude_error(b, a);
            assert!((ab - ba).abs() < 1e-9);
            assert!((0.0..=180.0).contains(&ab));
        }
    }

    #[test]
    fn projection_hits_principal_point_on_axis() {
        let k = CameraIntrinsics::synthetic_default();
        assert_eq!(project(&k, [0.0, 0.0, 10.0]).unwrap(), (240.0, 135.0));
        assert_eq!(project(&k, [1.0, 0.0, 10.0]).unwrap(), (304.0, 135.0));
    }

    #[test]
    fn projection_rejects_points_behind_camera() {
        let k = CameraIntrinsics::synthetic_default();
        assert!(project(&k, [0.0, 0.0, 0.0]).is_err());
        assert!(project(&k, [1.0, 1.0, -3.0]).is_err());
    }

    #[test]
    fn projection_is_scale_invariant() {
        let k = CameraIntrinsics::lab_default();
        let p = [0.3, -0.2, 5.0];
        let (u, v) = project(&k, p).unwrap();
        let (u2, v2) = project(&k, scale3(p, 7.5)).unwrap();
        assert!((u - u2).abs() < 1e-9);
        assert!((v - v2).abs() < 1e-9);
    }

    #[test]
    fn intrinsics_reject_non_positive_focal() {
        assert!(CameraIntrinsics::new(0.0, 360.0, 240.0, 135.0).is_err());
        assert!(CameraIntrinsics::new(640.0, -1.0, 240.0, 135.0).is_err());
    }

    #[test]
    fn lab_scale_is_linear_and_zero_preserving() {
        let calib = LabCalibration::default_rig();
        assert_eq!(
            lab_to_model_position([0.0, 0.0, 0.0], &calib),
            [0.0, 0.0, 0.0]
        );
        let p = [0.1, -0.2, 2.0];
        let alpha = 3.5;
        let direct = lab_to_model_position(scale3(p, alpha), &calib);
        let scaled = scale3(lab_to_model_position(p, &calib), alpha);
        for i in 0..3 {
            assert!((direct[i] - scaled[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn fitted_scale_honors_recorded_range_pairs() {
        let calib = LabCalibration::default_rig();
        let model = lab_to_model_position([0.0, 0.0, 3.122], &calib);
        assert!((model[2] - 51.180).abs() < 1e-6);

        let other = lab_to_model_position([0.0, 0.0, 1.564], &calib);
        assert!((other[2] - 25.64).abs() / 25.64 < 0.02);
    }

    #[test]
    fn composed_scale_is_far_from_the_fitted_one() {
        let composed =
            LabCalibration::composed(640.0, 240.0, 1400.41, 956.29, 9.0, 640.0).unwrap();
        assert!((composed.scale() - 0.0610).abs() < 1e-3);
        assert!(LabCalibration::default_rig().scale() > 16.0);
    }

    #[test]
    fn matrix_round_trip_covers_all_pivot_branches() {
        let cases = [
            Quaternion::IDENTITY,
            Quaternion::from_axis_angle([1.0, 0.0, 0.0], 3.1).unwrap(),
            Quaternion::from_axis_angle([0.0, 1.0, 0.0], 3.1).unwrap(),
            Quaternion::from_axis_angle([0.0, 0.0, 1.0], 3.1).unwrap(),
        ];
        for q in cases {
            let back = matrix_to_quat(&quat_to_matrix(q)).unwrap();
            assert!(attitude_error(back, q) < 1e-9);
        }
    }

    #[test]
    fn euler_composition_matches_sequential_products() {
        let q = Quaternion::from_euler_xyz(0.3, -0.2, 0.5);
        let qx = Quaternion::from_axis_angle([1.0, 0.0, 0.0], 0.3).unwrap();
        let qy = Quaternion::from_axis_angle([0.0, 1.0, 0.0], -0.2).unwrap();
        let qz = Quaternion::from_axis_angle([0.0, 0.0, 1.0], 0.5).unwrap();
        let manual = quat_multiply(qz, quat_multiply(qy, qx).unwrap()).unwrap();
        assert!(attitude_error(q, manual) < 1e-9);
    }
}
