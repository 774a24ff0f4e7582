//! Poses, rigid transforms and point clouds.
//!
//! Points are stored one per row and mapped into a target frame with the
//! column-vector action `R * p + t`. A body-frame point `p` observed at pose
//! `k` therefore lands in the reference frame of pose `0` as
//! `R0^T (Rk p + tk - t0)`, which is exactly `transform_points(p,
//! relative_transform(pose0, posek))`.

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on `R^T R = I` and `det R = 1`.
pub const ORTHONORMAL_TOL: f64 = 1e-9;

fn check_rotation(r: &Matrix3<f64>) -> Result<()> {
    if r.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidPose("non-finite rotation entry".into()));
    }
    let err = (r.transpose() * r - Matrix3::identity()).amax();
    if err > ORTHONORMAL_TOL {
        return Err(Error::InvalidPose(format!(
            "rotation not orthonormal (max |R^T R - I| = {err:e})"
        )));
    }
    let det = r.determinant();
    if (det - 1.0).abs() > ORTHONORMAL_TOL {
        return Err(Error::InvalidPose(format!("rotation determinant {det}")));
    }
    Ok(())
}

/// Vehicle pose in the world frame (z up). `orientation` maps body vectors
/// into the world.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    orientation: Matrix3<f64>,
    // kept alongside the matrix so a quaternion given on input is returned unchanged
    quaternion: UnitQuaternion<f64>,
    position: Vector3<f64>,
    timestamp: f64,
}

impl Pose {
    pub fn new(orientation: Matrix3<f64>, position: Vector3<f64>, timestamp: f64) -> Result<Self> {
        check_rotation(&orientation)?;
        if !(timestamp.is_finite() && timestamp >= 0.0) {
            return Err(Error::InvalidPose(format!("timestamp {timestamp}")));
        }
        if position.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidPose("non-finite position".into()));
        }
        Ok(Self {
            orientation,
            quaternion: UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(orientation)),
            position,
            timestamp,
        })
    }

    pub fn from_quaternion(
        q: &UnitQuaternion<f64>,
        position: Vector3<f64>,
        timestamp: f64,
    ) -> Result<Self> {
        let pose = Self::new(q.to_rotation_matrix().into_inner(), position, timestamp)?;
        Ok(Self {
            quaternion: *q,
            ..pose
        })
    }

    pub fn identity() -> Self {
        Self {
            orientation: Matrix3::identity(),
            quaternion: UnitQuaternion::identity(),
            position: Vector3::zeros(),
            timestamp: 0.0,
        }
    }

    /// Level pose with the given heading (yaw about +z, radians).
    pub fn from_yaw(yaw: f64, position: Vector3<f64>, timestamp: f64) -> Result<Self> {
        Self::new(yaw_matrix(yaw), position, timestamp)
    }

    pub fn orientation(&self) -> &Matrix3<f64> {
        &self.orientation
    }

    pub fn position(&self) -> &Vector3<f64> {
        &self.position
    }

    pub fn timestamp(&self) -> f64 {
        self.timestamp
    }

    pub fn quaternion(&self) -> UnitQuaternion<f64> {
        self.quaternion
    }

    /// Applies `world` on the left: the pose as seen after moving the whole
    /// world by a rigid transform.
    pub fn transformed(&self, world: &RelativeTransform) -> Self {
        let orientation = world.rotation * self.orientation;
        Self {
            orientation,
            quaternion: UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(orientation)),
            position: world.rotation * self.position + world.translation,
            timestamp: self.timestamp,
        }
    }
}

/// Rotation about +z by `yaw` radians.
pub fn yaw_matrix(yaw: f64) -> Matrix3<f64> {
    let (s, c) = yaw.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

/// Rigid transform from one frame into another.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RelativeTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl RelativeTransform {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        check_rotation(&rotation)?;
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// `self` after `first`: maps x to `self(first(x))`.
    pub fn compose(&self, first: &RelativeTransform) -> RelativeTransform {
        RelativeTransform {
            rotation: self.rotation * first.rotation,
            translation: self.rotation * first.translation + self.translation,
        }
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }
}

/// Transform taking points expressed in `other`'s body frame into the body
/// frame of `reference`.
pub fn relative_transform(reference: &Pose, other: &Pose) -> Result<RelativeTransform> {
    check_rotation(&reference.orientation)?;
    check_rotation(&other.orientation)?;
    // R^T R is only identity to rounding; keep the identity path exact.
    let rotation = if reference.orientation == other.orientation {
        Matrix3::identity()
    } else {
        reference.orientation.transpose() * other.orientation
    };
    let inv = reference.orientation.transpose();
    Ok(RelativeTransform {
        rotation,
        translation: inv * (other.position - reference.position),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Frame {
    Sensor,
    Vehicle,
    World,
    SubmapReference,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Vector3<f64>>,
    pub frame: Frame,
}

impl PointCloud {
    pub fn new(points: Vec<Vector3<f64>>, frame: Frame) -> Result<Self> {
        if let Some(i) = points.iter().position(|p| p.iter().any(|v| !v.is_finite())) {
            return Err(Error::InvalidConfig(format!("point {i} is not finite")));
        }
        Ok(Self { points, frame })
    }

    pub fn empty(frame: Frame) -> Self {
        Self {
            points: Vec::new(),
            frame,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Maps every point through `xform`; the frame tag is left to the caller.
pub fn transform_points(cloud: &PointCloud, xform: &RelativeTransform, frame: Frame) -> PointCloud {
    PointCloud {
        points: cloud.points.iter().map(|p| xform.apply(p)).collect(),
        frame,
    }
}
