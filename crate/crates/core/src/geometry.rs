//! Camera models, quaternion rotations and projection operators.
//!
//! Rotations are carried as non-unit quaternions `(a, b, c, d)` with `a` the
//! scalar part. The rotation matrix is the homogeneous quadratic form divided
//! by `‖q‖²`, so any nonzero scaling of `q` describes the same rotation.

use nalgebra::{Matrix2x3, Matrix3, Rotation3, UnitQuaternion, Vector2, Vector3, Vector4};

use crate::error::{Error, Result};

pub type Vec2 = Vector2<f64>;
pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Pinhole intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub skew: f64,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        Self::with_skew(fx, fy, cx, cy, 0.0)
    }

    pub fn with_skew(fx: f64, fy: f64, cx: f64, cy: f64, skew: f64) -> Result<Self> {
        let k = Self { fx, fy, cx, cy, skew };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.fx, self.fy, self.cx, self.cy, self.skew]
            .iter()
            .all(|v| v.is_finite());
        if !finite || self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(Error::InvalidConfig(format!(
                "intrinsics require finite values and positive focal lengths, got fx={} fy={}",
                self.fx, self.fy
            )));
        }
        Ok(())
    }

    pub fn matrix(&self) -> Mat3 {
        Mat3::new(
            self.fx, self.skew, self.cx, //
            0.0, self.fy, self.cy, //
            0.0, 0.0, 1.0,
        )
    }

    /// Pixel coordinates of a camera-frame point. Fails for nonpositive depth.
    pub fn project_camera(&self, pc: &Vec3) -> Result<Vec2> {
        if !(pc.z > 0.0) {
            return Err(Error::BehindCamera { depth: pc.z });
        }
        Ok(self.project_unchecked(pc))
    }

    #[inline]
    pub(crate) fn project_unchecked(&self, pc: &Vec3) -> Vec2 {
        let iz = 1.0 / pc.z;
        Vec2::new(
            (self.fx * pc.x + self.skew * pc.y) * iz + self.cx,
            self.fy * pc.y * iz + self.cy,
        )
    }

    /// Derivative of the pixel projection with respect to the camera-frame point.
    #[inline]
    pub(crate) fn projection_jacobian(&self, pc: &Vec3) -> Matrix2x3<f64> {
        let iz = 1.0 / pc.z;
        let iz2 = iz * iz;
        Matrix2x3::new(
            self.fx * iz,
            self.skew * iz,
            -(self.fx * pc.x + self.skew * pc.y) * iz2,
            0.0,
            self.fy * iz,
            -self.fy * pc.y * iz2,
        )
    }
}

/// Rigid object-to-camera pose with a non-unit quaternion rotation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuatPose {
    /// `(a, b, c, d)`, scalar first. Need not be unit length.
    pub q: Vector4<f64>,
    /// Translation in meters.
    pub t: Vec3,
}

impl QuatPose {
    pub fn identity() -> Self {
        Self {
            q: Vector4::new(1.0, 0.0, 0.0, 0.0),
            t: Vec3::zeros(),
        }
    }

    pub fn new(q: Vector4<f64>, t: Vec3) -> Result<Self> {
        if !(q.norm() > 0.0) || !q.iter().all(|v| v.is_finite()) {
            return Err(Error::DegenerateInput("zero or non-finite quaternion".into()));
        }
        Ok(Self { q, t })
    }

    pub fn from_rotation(r: &Mat3, t: Vec3) -> Self {
        Self {
            q: rotation_to_quat(r),
            t,
        }
        .canonical()
    }

    pub fn rotation(&self) -> Result<Mat3> {
        quat_to_rotation(&self.q)
    }

    /// Unit-norm quaternion with non-negative scalar part.
    pub fn canonical(&self) -> Self {
        let n = self.q.norm();
        let mut q = if n > 0.0 { self.q / n } else { self.q };
        if q[0] < 0.0 {
            q = -q;
        }
        Self { q, t: self.t }
    }

    /// Object-frame point to camera frame.
    pub fn transform(&self, x: &Vec3) -> Result<Vec3> {
        Ok(self.rotation()? * x + self.t)
    }

    /// Camera center expressed in the object frame, `-Rᵀ t`.
    pub fn camera_center(&self) -> Result<Vec3> {
        Ok(-(self.rotation()?.transpose() * self.t))
    }
}

fn quat_unnormalized(q: &Vector4<f64>) -> Mat3 {
    let (a, b, c, d) = (q[0], q[1], q[2], q[3]);
    Mat3::new(
        a * a + b * b - c * c - d * d,
        2.0 * (b * c - a * d),
        2.0 * (b * d + a * c),
        2.0 * (b * c + a * d),
        a * a - b * b + c * c - d * d,
        2.0 * (c * d - a * b),
        2.0 * (b * d - a * c),
        2.0 * (c * d + a * b),
        a * a - b * b - c * c + d * d,
    )
}

/// Rotation matrix of a (possibly non-unit) quaternion.
pub fn quat_to_rotation(q: &Vector4<f64>) -> Result<Mat3> {
    let n2 = q.norm_squared();
    if !(n2 > 0.0) || !n2.is_finite() {
        return Err(Error::DegenerateInput("zero quaternion".into()));
    }
    Ok(quat_unnormalized(q) / n2)
}

/// Partial derivatives `∂R/∂q_k` of [`quat_to_rotation`], `k = a, b, c, d`.
pub(crate) fn quat_rotation_jacobian(q: &Vector4<f64>) -> [Mat3; 4] {
    let (a, b, c, d) = (q[0], q[1], q[2], q[3]);
    let n2 = q.norm_squared();
    let rt = quat_unnormalized(q);
    let dd = [
        Mat3::new(a, -d, c, d, a, -b, -c, b, a),
        Mat3::new(b, c, d, c, -b, -a, d, a, -b),
        Mat3::new(-c, b, a, b, c, d, -a, d, -c),
        Mat3::new(-d, -a, b, a, -d, c, b, c, d),
    ];
    let inv = 1.0 / n2;
    let inv2 = inv * inv;
    let mut out = [Mat3::zeros(); 4];
    for k in 0..4 {
        out[k] = dd[k] * (2.0 * inv) - rt * (2.0 * q[k] * inv2);
    }
    out
}

/// Unit quaternion `(a, b, c, d)` of a rotation matrix, with `a ≥ 0`.
pub fn rotation_to_quat(r: &Mat3) -> Vector4<f64> {
    let uq = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(*r));
    let mut q = Vector4::new(uq.w, uq.i, uq.j, uq.k);
    if q[0] < 0.0 {
        q = -q;
    }
    q
}

/// Pixel projection of an object-frame point under `pose`.
pub fn project(x: &Vec3, pose: &QuatPose, k: &Intrinsics) -> Result<Vec2> {
    k.project_camera(&pose.transform(x)?)
}

/// Scaled orthographic camera `c · R · (X + t)` with a row-orthonormal `R`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrthoCam {
    pub r: Matrix2x3<f64>,
    pub t: Vec3,
    pub c: f64,
}

impl OrthoCam {
    pub fn new(r: Matrix2x3<f64>, t: Vec3, c: f64) -> Result<Self> {
        let rrt = r * r.transpose();
        let err = (rrt - nalgebra::Matrix2::identity()).abs().max();
        if err > 1e-9 {
            return Err(Error::DegenerateInput(format!(
                "orthographic rotation rows are not orthonormal (error {err:.3e})"
            )));
        }
        if !(c > 0.0) {
            return Err(Error::DegenerateInput(format!("orthographic scale must be positive, got {c}")));
        }
        Ok(Self { r, t, c })
    }

    /// Viewing direction in the object frame (third row completing `R`).
    pub fn view_direction(&self) -> Vec3 {
        let r1 = Vec3::new(self.r[(0, 0)], self.r[(0, 1)], self.r[(0, 2)]);
        let r2 = Vec3::new(self.r[(1, 0)], self.r[(1, 1)], self.r[(1, 2)]);
        r1.cross(&r2)
    }
}

/// `c · R · (X + t)`. Translation sits inside the rotation.
pub fn ortho_project(x: &Vec3, cam: &OrthoCam) -> Vec2 {
    cam.r * (x + cam.t) * cam.c
}

/// Rotation about `axis` by `angle` radians.
pub fn axis_angle(axis: &Vec3, angle: f64) -> Mat3 {
    Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(*axis), angle).into_inner()
}

/// Geodesic distance on SO(3) in radians.
pub fn rotation_angle_between(a: &Mat3, b: &Mat3) -> f64 {
    let c = ((a.transpose() * b).trace() - 1.0) * 0.5;
    c.clamp(-1.0, 1.0).acos()
}

/// Yaw of `R = R_x(elevation) · R_y(azimuth) · …`, in radians.
pub fn azimuth(r: &Mat3) -> f64 {
    r[(0, 2)].atan2(r[(0, 0)])
}

/// Rotation for a viewpoint given azimuth (about the object's vertical axis)
/// followed by elevation (about the camera x axis), radians.
pub fn viewpoint_rotation(azimuth: f64, elevation: f64) -> Mat3 {
    axis_angle(&Vec3::x(), elevation) * axis_angle(&Vec3::y(), azimuth)
}

/// Closest matrix with orthonormal rows (polar factor), for 2×3 inputs.
pub(crate) fn nearest_row_orthonormal(m: &Matrix2x3<f64>) -> Matrix2x3<f64> {
    let svd = m.svd(true, true);
    let u = svd.u.expect("svd u");
    let vt = svd.v_t.expect("svd v_t");
    u * vt
}
