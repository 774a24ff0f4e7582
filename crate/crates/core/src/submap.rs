//! Turning sonar pings into submaps: per-ping sensor points, accumulation of
//! `2n + 1` consecutive pings in the frame of the middle one, and cropping on
//! the x-y plane around that reference pose.

use log::warn;
use nalgebra::{Vector2, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{relative_transform, transform_points, Frame, PointCloud, Pose};

/// One multibeam return.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Beam {
    /// Across-track angle from nadir, rad. Positive angles point to port (+y).
    pub angle: f64,
    /// Slant range, m.
    pub range: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SonarPing {
    pub timestamp: f64,
    pub beams: Vec<Beam>,
}

/// Body frame is x forward, y port, z up; the transducer sits at the origin.
/// Beams with non-positive or non-finite range are dropped and counted.
pub fn ping_to_points(ping: &SonarPing) -> (PointCloud, usize) {
    let mut dropped = 0;
    let points = ping
        .beams
        .iter()
        .filter_map(|b| {
            if !(b.range > 0.0 && b.range.is_finite() && b.angle.is_finite()) {
                dropped += 1;
                return None;
            }
            let (s, c) = b.angle.sin_cos();
            Some(Vector3::new(0.0, b.range * s, -b.range * c))
        })
        .collect();
    (
        PointCloud {
            points,
            frame: Frame::Sensor,
        },
        dropped,
    )
}

/// Union of the sequences `reference_index - n ..= reference_index + n`,
/// each moved into the reference pose's body frame. Indices past either end
/// of `sequences` are skipped.
pub fn accumulate(
    sequences: &[(Pose, PointCloud)],
    reference_index: usize,
    n: usize,
) -> Result<PointCloud> {
    let Some((reference, _)) = sequences.get(reference_index) else {
        return Ok(PointCloud::empty(Frame::SubmapReference));
    };
    let lo = reference_index.saturating_sub(n);
    let hi = (reference_index + n).min(sequences.len() - 1);
    let mut points = Vec::new();
    for (pose, cloud) in &sequences[lo..=hi] {
        let xform = relative_transform(reference, pose)?;
        points.extend(transform_points(cloud, &xform, Frame::SubmapReference).points);
    }
    Ok(PointCloud {
        points,
        frame: Frame::SubmapReference,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CropMode {
    /// Chebyshev ball on x-y: `max(|dx|, |dy|) <= d`.
    #[default]
    Square,
    /// Euclidean disk on x-y: `hypot(dx, dy) <= d`.
    Cylinder,
}

impl std::str::FromStr for CropMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "square" => Ok(Self::Square),
            "cylinder" => Ok(Self::Cylinder),
            other => Err(Error::InvalidConfig(format!("unknown crop mode '{other}'"))),
        }
    }
}

impl std::fmt::Display for CropMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Square => "square",
            Self::Cylinder => "cylinder",
        })
    }
}

impl CropMode {
    pub fn contains(self, offset: Vector2<f64>, d: f64) -> bool {
        match self {
            Self::Square => offset.x.abs() <= d && offset.y.abs() <= d,
            Self::Cylinder => offset.x.hypot(offset.y) <= d,
        }
    }
}

/// Keeps points inside the crop region around `center`; z is unconstrained
/// and order is preserved.
pub fn crop(cloud: &PointCloud, center: Vector2<f64>, d: f64, mode: CropMode) -> PointCloud {
    PointCloud {
        points: cloud
            .points
            .iter()
            .filter(|p| mode.contains(Vector2::new(p.x - center.x, p.y - center.y), d))
            .copied()
            .collect(),
        frame: cloud.frame,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Submap {
    /// The pose the submap is expressed in; the crop center is its origin.
    pub reference_pose: Pose,
    /// Points in the reference pose's body frame.
    pub points: PointCloud,
    /// Index of the reference ping in the input ping list.
    pub sequence_index: usize,
    pub crop_mode: CropMode,
    pub crop_distance: f64,
    /// Fewer than the configured minimum number of points.
    pub sparse: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SubmapConfig {
    /// Half accumulation window.
    pub n: usize,
    /// Crop half-size, m.
    pub d: f64,
    pub stride: usize,
    pub mode: CropMode,
    pub min_points: usize,
}

impl Default for SubmapConfig {
    fn default() -> Self {
        Self {
            n: 10,
            d: 10.0,
            stride: 1,
            mode: CropMode::Square,
            min_points: 100,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SubmapStats {
    pub dropped_beams: usize,
    /// Pings with no trajectory pose within the association tolerance.
    pub unmatched_pings: usize,
    pub sparse_submaps: usize,
}

fn median_interval(pings: &[SonarPing]) -> Option<f64> {
    let mut gaps: Vec<f64> = pings
        .windows(2)
        .map(|w| w[1].timestamp - w[0].timestamp)
        .collect();
    if gaps.is_empty() {
        return None;
    }
    gaps.sort_by(f64::total_cmp);
    Some(gaps[gaps.len() / 2])
}

/// Pose nearest in time to `t` (trajectory sorted by timestamp).
fn nearest_pose(trajectory: &[Pose], t: f64) -> Option<&Pose> {
    let idx = trajectory.partition_point(|p| p.timestamp() < t);
    let after = trajectory.get(idx);
    let before = idx.checked_sub(1).and_then(|i| trajectory.get(i));
    match (before, after) {
        (Some(b), Some(a)) => {
            if t - b.timestamp() <= a.timestamp() - t {
                Some(b)
            } else {
                Some(a)
            }
        }
        (b, a) => b.or(a),
    }
}

/// Builds one submap per `stride`-th ping. Each ping is associated with the
/// trajectory pose nearest in time, within half the median ping interval.
pub fn build_submaps(
    trajectory: &[Pose],
    pings: &[SonarPing],
    config: &SubmapConfig,
) -> Result<(Vec<Submap>, SubmapStats)> {
    if !(config.d > 0.0) {
        return Err(Error::InvalidConfig(format!("crop distance {}", config.d)));
    }
    if config.stride == 0 {
        return Err(Error::InvalidConfig("stride must be positive".into()));
    }
    let tolerance = median_interval(pings).map_or(f64::INFINITY, |m| 0.5 * m);

    let mut stats = SubmapStats::default();
    // (ping index, pose, cloud) for every ping that found a pose
    let mut sequences: Vec<(Pose, PointCloud)> = Vec::with_capacity(pings.len());
    let mut ping_of_sequence = Vec::with_capacity(pings.len());
    for (i, ping) in pings.iter().enumerate() {
        match nearest_pose(trajectory, ping.timestamp)
            .filter(|p| (p.timestamp() - ping.timestamp).abs() <= tolerance)
        {
            Some(pose) => {
                let (cloud, dropped) = ping_to_points(ping);
                stats.dropped_beams += dropped;
                sequences.push((*pose, cloud));
                ping_of_sequence.push(i);
            }
            None => stats.unmatched_pings += 1,
        }
    }
    if stats.unmatched_pings > 0 {
        warn!(
            "{} ping(s) had no pose within {tolerance} s and were dropped",
            stats.unmatched_pings
        );
    }

    let submaps = (0..sequences.len())
        .into_par_iter()
        .filter(|k| ping_of_sequence[*k] % config.stride == 0)
        .map(|k| {
            let accumulated = accumulate(&sequences, k, config.n)?;
            let points = crop(&accumulated, Vector2::zeros(), config.d, config.mode);
            Ok(Submap {
                reference_pose: sequences[k].0,
                sparse: points.len() < config.min_points,
                points,
                sequence_index: ping_of_sequence[k],
                crop_mode: config.mode,
                crop_distance: config.d,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    stats.sparse_submaps = submaps.iter().filter(|s| s.sparse).count();
    Ok((submaps, stats))
}
