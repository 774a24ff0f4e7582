//! IMU/DVL dead reckoning.
//!
//! Orientation comes from a Madgwick MARG filter; position and world-frame
//! velocity come from a linear Kalman filter with a constant-velocity model
//! whose DVL measurement is the body velocity rotated by the current
//! orientation estimate. The two filters are loosely coupled: the Kalman
//! filter consumes the Madgwick orientation and never feeds back into it.
//!
//! Conventions: world frame is z-up, the accelerometer reads `(0, 0, -g)` at
//! rest, and magnetic north is the horizontal direction of world `+x`. When no
//! magnetometer is present, yaw is integrated from the gyro alone and drifts
//! with whatever bias the gyro has.

use log::warn;
use nalgebra::{
    Matrix3, Matrix3x4, Matrix3x6, Matrix6, Matrix6x3, Quaternion, SymmetricEigen, UnitQuaternion,
    Vector3, Vector4, Vector6,
};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Pose;

pub const GRAVITY: f64 = 9.80665;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImuSample {
    pub timestamp: f64,
    /// rad/s, body frame; the rate held over the interval ending at `timestamp`.
    pub angular_velocity: Vector3<f64>,
    /// m/s², body frame, gravity included.
    pub linear_acceleration: Vector3<f64>,
    /// Field direction in the body frame, if a magnetometer is fitted.
    pub magnetic_field: Option<Vector3<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DvlSample {
    pub timestamp: f64,
    /// m/s, body frame.
    pub velocity: Vector3<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FilterState {
    /// world <- body
    pub orientation: UnitQuaternion<f64>,
    pub position: Vector3<f64>,
    pub velocity: Vector3<f64>,
    /// Covariance over (position, velocity).
    pub covariance: Matrix6<f64>,
}

impl FilterState {
    pub fn new(orientation: UnitQuaternion<f64>, position: Vector3<f64>) -> Self {
        Self {
            orientation,
            position,
            velocity: Vector3::zeros(),
            covariance: Matrix6::from_diagonal(&Vector6::new(0.0, 0.0, 0.0, 1.0, 1.0, 1.0)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EkfNoise {
    /// White-acceleration process noise, (m/s²)² per axis.
    pub process: f64,
    /// DVL measurement noise, (m/s)² per axis.
    pub dvl: f64,
}

impl Default for EkfNoise {
    fn default() -> Self {
        Self {
            process: 1e-3,
            dvl: 1e-4,
        }
    }
}

/// Outcome of the covariance health check after a Kalman step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NumericalHealth {
    Ok,
    /// Negative eigenvalues were clamped to zero.
    Repaired { min_eigenvalue: f64 },
}

// Predicted body-frame direction R(q)^T d of a world reference direction d,
// and its Jacobian with respect to (w, x, y, z).
fn predicted_direction(q: &Quaternion<f64>, d: &Vector3<f64>) -> (Vector3<f64>, Matrix3x4<f64>) {
    let (w, x, y, z) = (q.w, q.i, q.j, q.k);
    let (dx, dy, dz) = (d.x, d.y, d.z);
    let f = Vector3::new(
        (1.0 - 2.0 * (y * y + z * z)) * dx + 2.0 * (x * y + w * z) * dy + 2.0 * (x * z - w * y) * dz,
        2.0 * (x * y - w * z) * dx + (1.0 - 2.0 * (x * x + z * z)) * dy + 2.0 * (y * z + w * x) * dz,
        2.0 * (x * z + w * y) * dx + 2.0 * (y * z - w * x) * dy + (1.0 - 2.0 * (x * x + y * y)) * dz,
    );
    #[rustfmt::skip]
    let j = Matrix3x4::new(
        2.0 * (z * dy - y * dz), 2.0 * (y * dy + z * dz), 2.0 * (-2.0 * y * dx + x * dy - w * dz), 2.0 * (-2.0 * z * dx + w * dy + x * dz),
        2.0 * (x * dz - z * dx), 2.0 * (y * dx - 2.0 * x * dy + w * dz), 2.0 * (x * dx + z * dz), 2.0 * (-w * dx - 2.0 * z * dy + y * dz),
        2.0 * (y * dx - x * dy), 2.0 * (z * dx - w * dy - 2.0 * x * dz), 2.0 * (w * dx + z * dy - 2.0 * y * dz), 2.0 * (x * dx + y * dy),
    );
    (f, j)
}

/// One Madgwick MARG step: exact gyro integration over `dt` followed by a
/// `beta`-scaled normalized gradient step on the accelerometer (and, when
/// present, magnetometer) alignment objective. Position and velocity are
/// untouched.
pub fn madgwick_update(state: &FilterState, imu: &ImuSample, dt: f64, beta: f64) -> FilterState {
    let q = state.orientation;
    let rotated = q * UnitQuaternion::from_scaled_axis(imu.angular_velocity * dt);
    let mut qv = *rotated.quaternion();

    let a = imu.linear_acceleration;
    if beta > 0.0 && a.norm() > 0.0 {
        let qc = q.quaternion();
        let (fg, jg) = predicted_direction(qc, &Vector3::new(0.0, 0.0, -1.0));
        let mut grad: Vector4<f64> = jg.transpose() * (fg - a.normalize());

        if let Some(m) = imu.magnetic_field.filter(|m| m.norm() > 0.0) {
            let m = m.normalize();
            let h = q * m;
            let b = Vector3::new((h.x * h.x + h.y * h.y).sqrt(), 0.0, h.z);
            let (fm, jm) = predicted_direction(qc, &b);
            grad += jm.transpose() * (fm - m);
        }

        let norm = grad.norm();
        if norm > 0.0 {
            // Vector4 is ordered (w, x, y, z); nalgebra stores quaternions as (x, y, z, w).
            let step = grad * (beta * dt / norm);
            qv = Quaternion::new(qv.w - step[0], qv.i - step[1], qv.j - step[2], qv.k - step[3]);
        }
    }

    FilterState {
        orientation: UnitQuaternion::new_normalize(qv),
        ..*state
    }
}

/// Constant-velocity prediction over `dt` seconds.
pub fn ekf_predict(state: &FilterState, dt: f64, noise: &EkfNoise) -> FilterState {
    if dt <= 0.0 {
        return *state;
    }
    let mut f = Matrix6::identity();
    f.fixed_view_mut::<3, 3>(0, 3).fill_diagonal(dt);
    let mut q = Matrix6::zeros();
    q.fixed_view_mut::<3, 3>(0, 0).fill_diagonal(noise.process * dt.powi(3) / 3.0);
    q.fixed_view_mut::<3, 3>(0, 3).fill_diagonal(noise.process * dt.powi(2) / 2.0);
    q.fixed_view_mut::<3, 3>(3, 0).fill_diagonal(noise.process * dt.powi(2) / 2.0);
    q.fixed_view_mut::<3, 3>(3, 3).fill_diagonal(noise.process * dt);
    FilterState {
        position: state.position + state.velocity * dt,
        covariance: f * state.covariance * f.transpose() + q,
        ..*state
    }
}

/// DVL velocity update (Joseph form).
pub fn ekf_update(
    state: &FilterState,
    dvl: &DvlSample,
    noise: &EkfNoise,
) -> (FilterState, NumericalHealth) {
    let mut h = Matrix3x6::zeros();
    h.fixed_view_mut::<3, 3>(0, 3).fill_diagonal(1.0);
    let r = Matrix3::from_diagonal_element(noise.dvl);
    let p = state.covariance;

    let s = h * p * h.transpose() + r;
    let s_inv = s
        .cholesky()
        .map(|c| c.inverse())
        .unwrap_or_else(|| s.pseudo_inverse(1e-15).unwrap_or_else(|_| Matrix3::zeros()));
    let k: Matrix6x3<f64> = p * h.transpose() * s_inv;

    let z = state.orientation * dvl.velocity;
    let innovation = z - state.velocity;
    let correction = k * innovation;

    let ikh = Matrix6::identity() - k * h;
    let cov = ikh * p * ikh.transpose() + k * r * k.transpose();
    let (cov, health) = repair_covariance(cov);

    let next = FilterState {
        position: state.position + correction.fixed_rows::<3>(0),
        velocity: state.velocity + correction.fixed_rows::<3>(3),
        covariance: cov,
        ..*state
    };
    (next, health)
}

/// Prediction over `dt` followed by an optional DVL update.
pub fn ekf_step(
    state: &FilterState,
    dvl: Option<&DvlSample>,
    dt: f64,
    noise: &EkfNoise,
) -> (FilterState, NumericalHealth) {
    let predicted = ekf_predict(state, dt, noise);
    match dvl {
        Some(m) => ekf_update(&predicted, m, noise),
        None => {
            let (cov, health) = repair_covariance(predicted.covariance);
            (
                FilterState {
                    covariance: cov,
                    ..predicted
                },
                health,
            )
        }
    }
}

fn repair_covariance(cov: Matrix6<f64>) -> (Matrix6<f64>, NumericalHealth) {
    let sym = (cov + cov.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let min = eig.eigenvalues.min();
    if min >= 0.0 {
        return (sym, NumericalHealth::Ok);
    }
    if min < -1e-9 {
        warn!("covariance lost positive semidefiniteness (min eigenvalue {min:e}); clamping");
    }
    let clamped = eig.eigenvalues.map(|v| v.max(0.0));
    let rebuilt = eig.eigenvectors * Matrix6::from_diagonal(&clamped) * eig.eigenvectors.transpose();
    (
        (rebuilt + rebuilt.transpose()) * 0.5,
        NumericalHealth::Repaired { min_eigenvalue: min },
    )
}

/// Orientation from a single accelerometer (and optional magnetometer)
/// reading. Without a magnetometer the heading is taken as zero.
pub fn initial_orientation(imu: &ImuSample) -> UnitQuaternion<f64> {
    let a = imu.linear_acceleration;
    if a.norm() == 0.0 {
        return UnitQuaternion::identity();
    }
    let up = -a.normalize();
    let reference = imu
        .magnetic_field
        .filter(|m| m.cross(&up).norm() > 1e-9)
        .unwrap_or_else(Vector3::x);
    let mut north = reference - up * reference.dot(&up);
    if north.norm() < 1e-9 {
        north = Vector3::y() - up * up.y;
    }
    let north = north.normalize();
    let west = up.cross(&north);
    // Rows are the world axes expressed in the body frame.
    let r = Matrix3::from_rows(&[north.transpose(), west.transpose(), up.transpose()]);
    UnitQuaternion::from_matrix(&r)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeadReckoningConfig {
    pub beta: f64,
    pub noise: EkfNoise,
    /// Initial velocity variance, (m/s)² per axis.
    pub initial_velocity_variance: f64,
    #[serde(skip)]
    pub initial_orientation: Option<UnitQuaternion<f64>>,
    #[serde(skip)]
    pub initial_position: Option<Vector3<f64>>,
}

impl Default for DeadReckoningConfig {
    fn default() -> Self {
        Self {
            beta: 0.1,
            noise: EkfNoise::default(),
            initial_velocity_variance: 1.0,
            initial_orientation: None,
            initial_position: None,
        }
    }
}

fn check_increasing(stream: &'static str, times: impl Iterator<Item = f64>) -> Result<()> {
    let mut last = f64::NEG_INFINITY;
    for t in times {
        if !t.is_finite() || t <= last {
            return Err(Error::OutOfOrder {
                stream,
                timestamp: t,
            });
        }
        last = t;
    }
    Ok(())
}

/// Fuses the two streams into one pose per IMU sample.
///
/// DVL samples are applied at their own timestamps using the most recent
/// orientation estimate; a DVL sample sharing a timestamp with an IMU sample
/// sees the orientation already updated by that IMU sample.
pub fn run_dead_reckoning(
    imu: &[ImuSample],
    dvl: &[DvlSample],
    config: &DeadReckoningConfig,
) -> Result<Vec<Pose>> {
    check_increasing("imu", imu.iter().map(|s| s.timestamp))?;
    check_increasing("dvl", dvl.iter().map(|s| s.timestamp))?;
    let Some(first) = imu.first() else {
        return Ok(Vec::new());
    };

    let orientation = config
        .initial_orientation
        .unwrap_or_else(|| initial_orientation(first));
    let mut state = FilterState::new(orientation, config.initial_position.unwrap_or_default());
    state
        .covariance
        .fixed_view_mut::<3, 3>(3, 3)
        .fill_diagonal(config.initial_velocity_variance);

    let mut now = first.timestamp;
    let mut repairs = 0usize;
    let mut dvl_iter = dvl.iter().peekable();
    let mut out = Vec::with_capacity(imu.len());

    for (k, sample) in imu.iter().enumerate() {
        if k > 0 {
            let dt = sample.timestamp - imu[k - 1].timestamp;
            // DVL samples strictly before this IMU sample see the previous orientation.
            while let Some(m) = dvl_iter.next_if(|m| m.timestamp < sample.timestamp) {
                let (next, health) = ekf_step(&state, Some(m), (m.timestamp - now).max(0.0), &config.noise);
                repairs += matches!(health, NumericalHealth::Repaired { .. }) as usize;
                state = next;
                now = now.max(m.timestamp);
            }
            state = madgwick_update(&state, sample, dt, config.beta);
        }
        while let Some(m) = dvl_iter.next_if(|m| m.timestamp <= sample.timestamp) {
            let (next, health) = ekf_step(&state, Some(m), (m.timestamp - now).max(0.0), &config.noise);
            repairs += matches!(health, NumericalHealth::Repaired { .. }) as usize;
            state = next;
            now = now.max(m.timestamp);
        }
        if sample.timestamp > now {
            state = ekf_predict(&state, sample.timestamp - now, &config.noise);
            now = sample.timestamp;
        }
        out.push(Pose::from_quaternion(
            &state.orientation,
            state.position,
            sample.timestamp.max(0.0),
        )?);
    }
    if repairs > 0 {
        log::debug!("dead reckoning: {repairs} covariance repair(s)");
    }
    Ok(out)
}
