//! Rigid-body types and SE(3) algebra shared by every stage of the pipeline.
//!
//! Tangent vectors are ordered `[rho; phi]`: translational part first, then
//! the rotation vector. Pose perturbations throughout the crate are applied
//! on the right, `T * exp(delta)`.

use nalgebra::{Matrix3, Matrix6, Quaternion, Rotation3, UnitQuaternion, Vector3, Vector6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Point3 = nalgebra::Point3<f64>;

/// Tolerance used for the exact-algebra checks (orthonormality, inverse law).
pub const ALGEBRA_TOL: f64 = 1e-9;

const SMALL_ANGLE: f64 = 1e-8;
const ORTHO_DRIFT: f64 = 1e-12;
const LOG_CUT: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("rotation angle {angle} is too close to pi for a unique logarithm")]
    AngleNearPi { angle: f64 },
    #[error("rotation matrix is not orthonormal (error {error:e})")]
    NotOrthonormal { error: f64 },
}

/// Rigid transform `x -> R x + t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Builds a pose after checking that `rotation` is a proper rotation.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self, GeometryError> {
        let error = orthonormality_error(&rotation);
        if error > ALGEBRA_TOL || rotation.determinant() <= 0.0 {
            return Err(GeometryError::NotOrthonormal { error });
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: t,
        }
    }

    /// Rotation about `axis` by `angle` radians followed by translation `t`.
    pub fn from_axis_angle(axis: &Vector3<f64>, angle: f64, t: Vector3<f64>) -> Self {
        let rot = Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(*axis), angle);
        Self {
            rotation: *rot.matrix(),
            translation: t,
        }
    }

    /// Rotation about +z (yaw) with translation.
    pub fn from_yaw(yaw: f64, t: Vector3<f64>) -> Self {
        Self::from_axis_angle(&Vector3::z(), yaw, t)
    }

    pub fn from_quaternion(q: &UnitQuaternion<f64>, t: Vector3<f64>) -> Self {
        Self {
            rotation: *q.to_rotation_matrix().matrix(),
            translation: t,
        }
    }

    /// Quaternion from `(qx, qy, qz, qw)`; normalizes the input.
    pub fn from_xyzw(t: Vector3<f64>, qx: f64, qy: f64, qz: f64, qw: f64) -> Self {
        let q = UnitQuaternion::from_quaternion(Quaternion::new(qw, qx, qy, qz));
        Self::from_quaternion(&q, t)
    }

    pub fn quaternion(&self) -> UnitQuaternion<f64> {
        UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(self.rotation))
    }

    /// `self ∘ other`: applies `other` first, then `self`.
    pub fn compose(&self, other: &Pose) -> Pose {
        let mut rotation = self.rotation * other.rotation;
        if orthonormality_error(&rotation) > ORTHO_DRIFT {
            rotation = orthonormalize(&rotation);
        }
        Pose {
            rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    pub fn apply(&self, x: &Point3) -> Point3 {
        Point3::from(self.rotation * x.coords + self.translation)
    }

    /// `self⁻¹ ∘ other`, the pose of `other` expressed in the frame of `self`.
    pub fn between(&self, other: &Pose) -> Pose {
        self.inverse().compose(other)
    }

    /// Rotation angle in `[0, π]`.
    pub fn rotation_angle(&self) -> f64 {
        rotation_angle(&self.rotation)
    }

    pub fn is_valid(&self) -> bool {
        self.translation.iter().all(|v| v.is_finite())
            && orthonormality_error(&self.rotation) <= ALGEBRA_TOL
            && (self.rotation.determinant() - 1.0).abs() <= ALGEBRA_TOL
    }

    /// Largest absolute entry difference in rotation and translation.
    pub fn max_abs_diff(&self, other: &Pose) -> f64 {
        let r = (self.rotation - other.rotation).abs().max();
        let t = (self.translation - other.translation).abs().max();
        r.max(t)
    }

    pub fn exp(xi: &Vector6<f64>) -> Pose {
        se3_exp(xi)
    }

    pub fn log(&self) -> Result<Vector6<f64>, GeometryError> {
        se3_log(self)
    }

    /// Adjoint of the pose acting on `[rho; phi]` tangent vectors.
    pub fn adjoint(&self) -> Matrix6<f64> {
        let mut ad = Matrix6::zeros();
        let r = self.rotation;
        ad.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
        ad.fixed_view_mut::<3, 3>(0, 3)
            .copy_from(&(skew(&self.translation) * r));
        ad.fixed_view_mut::<3, 3>(3, 3).copy_from(&r);
        ad
    }
}

impl std::ops::Mul for Pose {
    type Output = Pose;
    fn mul(self, rhs: Pose) -> Pose {
        self.compose(&rhs)
    }
}

impl std::ops::Mul<&Pose> for &Pose {
    type Output = Pose;
    fn mul(self, rhs: &Pose) -> Pose {
        self.compose(rhs)
    }
}

/// A raster pixel with its stored intensity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Pixel {
    pub u: u32,
    pub v: u32,
    pub intensity: u8,
}

impl Pixel {
    pub fn new(u: u32, v: u32) -> Self {
        Self { u, v, intensity: 0 }
    }
}

/// Pinhole intrinsics of a virtual camera.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl Default for Intrinsics {
    fn default() -> Self {
        Self {
            fx: 200.0,
            fy: 200.0,
            cx: 159.5,
            cy: 79.5,
            width: 320,
            height: 160,
        }
    }
}

impl Intrinsics {
    pub fn is_valid(&self) -> bool {
        self.fx > 0.0 && self.fy > 0.0 && self.width > 0 && self.height > 0
    }

    /// Continuous projection of a camera-frame point; `None` behind the camera.
    pub fn project(&self, p: &Point3) -> Option<(f64, f64)> {
        if p.z <= 0.0 {
            return None;
        }
        Some((self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy))
    }

    /// Pixel that a camera-frame point lands in, if inside the image.
    pub fn pixel_of(&self, p: &Point3) -> Option<(u32, u32)> {
        let (u, v) = self.project(p)?;
        let (u, v) = (u.round(), v.round());
        if u < 0.0 || v < 0.0 || u >= self.width as f64 || v >= self.height as f64 {
            return None;
        }
        Some((u as u32, v as u32))
    }
}

/// One LIDAR sweep.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Point3>,
    pub frame_id: u64,
}

impl PointCloud {
    /// Drops any non-finite points.
    pub fn new(points: Vec<Point3>, frame_id: u64) -> Self {
        let points = points
            .into_iter()
            .filter(|p| p.coords.iter().all(|c| c.is_finite()))
            .collect();
        Self { points, frame_id }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn transformed(&self, pose: &Pose) -> PointCloud {
        PointCloud {
            points: self.points.iter().map(|p| pose.apply(p)).collect(),
            frame_id: self.frame_id,
        }
    }
}

pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

fn vee(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(m[(2, 1)], m[(0, 2)], m[(1, 0)])
}

pub fn orthonormality_error(r: &Matrix3<f64>) -> f64 {
    (r.transpose() * r - Matrix3::identity()).abs().max()
}

pub(crate) fn orthonormalize(r: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = r.svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut d = Matrix3::identity();
    d[(2, 2)] = (u * vt).determinant().signum();
    u * d * vt
}

pub fn rotation_angle(r: &Matrix3<f64>) -> f64 {
    let s = vee(&(r - r.transpose())).norm() * 0.5;
    let c = (r.trace() - 1.0) * 0.5;
    s.atan2(c)
}

/// Rodrigues map from a rotation vector.
pub fn so3_exp(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta = phi.norm();
    let k = skew(phi);
    if theta < SMALL_ANGLE {
        return Matrix3::identity() + k + 0.5 * k * k;
    }
    let (s, c) = theta.sin_cos();
    Matrix3::identity() + (s / theta) * k + ((1.0 - c) / (theta * theta)) * k * k
}

pub fn so3_log(r: &Matrix3<f64>) -> Result<Vector3<f64>, GeometryError> {
    let theta = rotation_angle(r);
    if theta > std::f64::consts::PI - LOG_CUT {
        return Err(GeometryError::AngleNearPi { angle: theta });
    }
    let w = vee(&(r - r.transpose()));
    if theta < SMALL_ANGLE {
        return Ok(0.5 * w);
    }
    Ok(w * (theta / (2.0 * theta.sin())))
}

/// Left Jacobian of SO(3).
pub fn so3_left_jacobian(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta = phi.norm();
    let k = skew(phi);
    let (a, b) = if theta < 1e-4 {
        let t2 = theta * theta;
        (0.5 - t2 / 24.0 + t2 * t2 / 720.0, 1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0)
    } else {
        let t2 = theta * theta;
        ((1.0 - theta.cos()) / t2, (theta - theta.sin()) / (t2 * theta))
    };
    Matrix3::identity() + a * k + b * k * k
}

pub fn so3_left_jacobian_inv(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta = phi.norm();
    let k = skew(phi);
    let c = if theta < 1e-4 {
        let t2 = theta * theta;
        1.0 / 12.0 + t2 / 720.0 + t2 * t2 / 30240.0
    } else {
        let half = 0.5 * theta;
        (1.0 - half / half.tan()) / (theta * theta)
    };
    Matrix3::identity() - 0.5 * k + c * k * k
}

/// Coupling block of the SE(3) left Jacobian.
fn se3_q_block(rho: &Vector3<f64>, phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta = phi.norm();
    let p = skew(phi);
    let r = skew(rho);
    let (c1, c2, c3) = if theta < 1e-3 {
        let t2 = theta * theta;
        (
            1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0,
            1.0 / 24.0 - t2 / 720.0 + t2 * t2 / 40320.0,
            1.0 / 120.0 - t2 / 2520.0 + t2 * t2 / 120960.0,
        )
    } else {
        let (s, c) = theta.sin_cos();
        let t2 = theta * theta;
        let t3 = t2 * theta;
        (
            (theta - s) / t3,
            (t2 + 2.0 * c - 2.0) / (2.0 * t2 * t2),
            (2.0 * theta - 3.0 * s + theta * c) / (2.0 * t2 * t3),
        )
    };
    0.5 * r
        + c1 * (p * r + r * p + p * r * p)
        + c2 * (p * p * r + r * p * p - 3.0 * p * r * p)
        + c3 * (p * r * p * p + p * p * r * p)
}

/// Left Jacobian of SE(3) for `[rho; phi]` tangent vectors.
pub fn se3_left_jacobian(xi: &Vector6<f64>) -> Matrix6<f64> {
    let rho = xi.fixed_rows::<3>(0).into_owned();
    let phi = xi.fixed_rows::<3>(3).into_owned();
    let jl = so3_left_jacobian(&phi);
    let mut j = Matrix6::zeros();
    j.fixed_view_mut::<3, 3>(0, 0).copy_from(&jl);
    j.fixed_view_mut::<3, 3>(0, 3).copy_from(&se3_q_block(&rho, &phi));
    j.fixed_view_mut::<3, 3>(3, 3).copy_from(&jl);
    j
}

pub fn se3_left_jacobian_inv(xi: &Vector6<f64>) -> Matrix6<f64> {
    let rho = xi.fixed_rows::<3>(0).into_owned();
    let phi = xi.fixed_rows::<3>(3).into_owned();
    let jinv = so3_left_jacobian_inv(&phi);
    let q = se3_q_block(&rho, &phi);
    let mut j = Matrix6::zeros();
    j.fixed_view_mut::<3, 3>(0, 0).copy_from(&jinv);
    j.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-jinv * q * jinv));
    j.fixed_view_mut::<3, 3>(3, 3).copy_from(&jinv);
    j
}

/// Inverse right Jacobian: `log(exp(xi) exp(d)) ≈ xi + Jr⁻¹(xi) d`.
pub fn se3_right_jacobian_inv(xi: &Vector6<f64>) -> Matrix6<f64> {
    se3_left_jacobian_inv(&(-xi))
}

pub fn se3_exp(xi: &Vector6<f64>) -> Pose {
    let rho = xi.fixed_rows::<3>(0).into_owned();
    let phi = xi.fixed_rows::<3>(3).into_owned();
    Pose {
        rotation: so3_exp(&phi),
        translation: so3_left_jacobian(&phi) * rho,
    }
}

pub fn se3_log(p: &Pose) -> Result<Vector6<f64>, GeometryError> {
    let phi = so3_log(&p.rotation)?;
    let rho = so3_left_jacobian_inv(&phi) * p.translation;
    Ok(Vector6::new(rho.x, rho.y, rho.z, phi.x, phi.y, phi.z))
}
