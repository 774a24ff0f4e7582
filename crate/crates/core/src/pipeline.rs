//! End-to-end detection and evaluation over an in-memory dataset.

use std::time::{Duration, Instant};

use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dead_reckoning::{run_dead_reckoning, DeadReckoningConfig};
use crate::detector::{decide, score_pairs, DetectorConfig, LoopCandidate, ScoredPair, SubmapRecord, DEFAULT_CAP, DEFAULT_EPSILON};
use crate::error::{Error, Result};
use crate::evaluation::{pr_curve, GroundTruthLabel, LabelConfig, PrPoint, Summary};
use crate::features::{compute_feature_set, DEFAULT_NEIGHBORS};
use crate::geometry::Pose;
use crate::io::Dataset;
use crate::submap::{build_submaps, CropMode, SonarPing, SubmapConfig, SubmapStats};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectConfig {
    pub n: usize,
    pub d: f64,
    #[serde(rename = "M")]
    pub m: usize,
    pub epsilon: f64,
    pub gamma: Option<f64>,
    pub crop: CropMode,
    /// `None` scores every point.
    pub cap: Option<usize>,
    /// Defaults to `2n + 5`.
    pub exclusion: Option<usize>,
    pub seed: u64,
    pub stride: usize,
    pub min_points: usize,
    pub dead_reckoning: DeadReckoningConfig,
}

impl Default for DetectConfig {
    fn default() -> Self {
        Self {
            n: 10,
            d: 10.0,
            m: DEFAULT_NEIGHBORS,
            epsilon: DEFAULT_EPSILON,
            gamma: None,
            crop: CropMode::Square,
            cap: Some(DEFAULT_CAP),
            exclusion: None,
            seed: 0,
            stride: 1,
            min_points: 100,
            dead_reckoning: DeadReckoningConfig::default(),
        }
    }
}

impl DetectConfig {
    pub fn exclusion(&self) -> usize {
        self.exclusion.unwrap_or(2 * self.n + 5)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.d > 0.0 && self.d.is_finite()) {
            return Err(Error::InvalidConfig(format!("d must be positive, got {}", self.d)));
        }
        if self.m == 0 {
            return Err(Error::InvalidConfig("M must be positive".into()));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::InvalidConfig(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if self.cap == Some(0) {
            return Err(Error::InvalidConfig("cap must be positive".into()));
        }
        if self.stride == 0 {
            return Err(Error::InvalidConfig("stride must be positive".into()));
        }
        if let Some(g) = self.gamma {
            if !g.is_finite() {
                return Err(Error::InvalidConfig(format!("gamma must be finite, got {g}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct StageTimings {
    pub dead_reckoning: Duration,
    pub submaps: Duration,
    pub features: Duration,
    pub scoring: Duration,
}

#[derive(Debug, Clone)]
pub struct Detection {
    pub scores: Vec<ScoredPair>,
    pub loops: Option<Vec<LoopCandidate>>,
    pub submaps: usize,
    /// Submaps with too few points for features.
    pub skipped: usize,
    pub stats: SubmapStats,
    pub timings: StageTimings,
}

/// A failure tagged with the pipeline stage it came from.
#[derive(Debug, thiserror::Error)]
#[error("{stage}: {source}")]
pub struct StageError {
    pub stage: &'static str,
    #[source]
    pub source: Error,
}

fn stage<T>(name: &'static str, r: Result<T>) -> std::result::Result<T, StageError> {
    r.map_err(|source| StageError { stage: name, source })
}

/// Dead reckoning, submaps, feature maps and pair scoring. Ground truth is
/// never consulted.
pub fn detect(dataset: &Dataset, config: &DetectConfig) -> std::result::Result<Detection, StageError> {
    stage("config", config.validate())?;
    let mut timings = StageTimings::default();

    let clock = Instant::now();
    let trajectory = stage(
        "dead reckoning",
        run_dead_reckoning(&dataset.imu, &dataset.dvl, &config.dead_reckoning),
    )?;
    timings.dead_reckoning = clock.elapsed();

    let clock = Instant::now();
    let submap_config = SubmapConfig {
        n: config.n,
        d: config.d,
        stride: config.stride,
        mode: config.crop,
        min_points: config.min_points,
    };
    let (submaps, stats) = stage("submaps", build_submaps(&trajectory, &dataset.pings, &submap_config))?;
    timings.submaps = clock.elapsed();

    let clock = Instant::now();
    let records: Vec<Option<SubmapRecord>> = stage(
        "features",
        submaps
            .par_iter()
            .map(|s| {
                if s.points.len() < 2 {
                    return Ok(None);
                }
                Ok(Some(SubmapRecord {
                    sequence_index: s.sequence_index,
                    reference_pose: s.reference_pose,
                    feature_set: compute_feature_set(&s.points.points, config.m)?,
                    point_count: s.points.len(),
                }))
            })
            .collect::<Result<Vec<_>>>(),
    )?;
    let skipped = records.iter().filter(|r| r.is_none()).count();
    let records: Vec<SubmapRecord> = records.into_iter().flatten().collect();
    timings.features = clock.elapsed();

    let clock = Instant::now();
    let detector = DetectorConfig {
        epsilon: config.epsilon,
        exclusion: config.exclusion(),
        cap: config.cap,
        seed: config.seed,
    };
    let scores = stage("scoring", score_pairs(&records, &detector))?;
    let loops = config.gamma.map(|g| decide(&scores, g));
    timings.scoring = clock.elapsed();

    info!(
        "{} submaps ({} skipped), {} pairs scored",
        submaps.len(),
        skipped,
        scores.len()
    );
    Ok(Detection {
        scores,
        loops,
        submaps: submaps.len(),
        skipped,
        stats,
        timings,
    })
}

/// Truth pose nearest in time to each ping.
pub fn ping_truth(truth: &[Pose], pings: &[SonarPing]) -> Result<Vec<Pose>> {
    if truth.is_empty() {
        return Err(Error::InvalidConfig("no truth poses".into()));
    }
    Ok(pings
        .iter()
        .map(|p| {
            let k = truth.partition_point(|q| q.timestamp() < p.timestamp);
            let before = k.checked_sub(1).map(|b| &truth[b]);
            match (before, truth.get(k)) {
                (Some(b), Some(a)) if p.timestamp - b.timestamp() <= a.timestamp() - p.timestamp => *b,
                (_, Some(a)) => *a,
                (Some(b), None) => *b,
                (None, None) => unreachable!("truth is non-empty"),
            }
        })
        .collect())
}

/// Labels each scored pair from the truth pose of its sequence indices.
pub fn label_scores(scores: &[ScoredPair], truth: &[Pose], config: &LabelConfig) -> Result<Vec<GroundTruthLabel>> {
    scores
        .iter()
        .map(|s| match (truth.get(s.i), truth.get(s.j)) {
            (Some(a), Some(b)) => Ok(config.label(s.i, s.j, a, b)),
            _ => Err(Error::UnlabeledPair { i: s.i, j: s.j }),
        })
        .collect()
}

/// PR curve and summary of `scores` against per-sequence truth poses.
pub fn evaluate(scores: &[ScoredPair], truth: &[Pose], config: &LabelConfig) -> Result<(Vec<PrPoint>, Summary)> {
    let labels = label_scores(scores, truth, config)?;
    let curve = pr_curve(scores, &labels)?;
    let summary = Summary::from_curve(&curve)?;
    Ok((curve, summary))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{Scenario, ScenarioName};

    #[test]
    fn config_validation() {
        assert!(DetectConfig::default().validate().is_ok());
        assert_eq!(DetectConfig::default().exclusion(), 25);
        let bad = DetectConfig { d: 0.0, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = DetectConfig { cap: Some(0), ..Default::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn ping_truth_picks_nearest() {
        let truth: Vec<_> = (0..5).map(|k| Pose::from_yaw(0.0, nalgebra::Vector3::new(k as f64, 0.0, 0.0), k as f64).unwrap()).collect();
        let pings = [0.4, 0.6, 3.0, 9.0].map(|t| SonarPing { timestamp: t, beams: vec![] });
        let got: Vec<f64> = ping_truth(&truth, &pings).unwrap().iter().map(|p| p.position().x).collect();
        assert_eq!(got, vec![0.0, 1.0, 3.0, 4.0]);
    }

    #[test]
    fn small_survey_end_to_end() {
        let mut s = Scenario::new(ScenarioName::Pond);
        s.plan.legs = 2;
        s.plan.leg_length = 60.0;
        s.plan.revisit_legs = 1;
        let survey = s.generate(0).unwrap();
        let dataset = Dataset {
            imu: survey.imu.clone(),
            dvl: survey.dvl.clone(),
            pings: survey.pings.clone(),
            truth: Some(survey.truth.clone()),
            metadata: crate::io::Metadata::new("small", Some(s.d)),
        };
        let config = DetectConfig { gamma: Some(0.5), ..Default::default() };
        let det = detect(&dataset, &config).unwrap();
        assert_eq!(det.submaps, survey.pings.len());
        assert!(!det.scores.is_empty());
        assert_eq!(det.loops.as_ref().unwrap().len(), det.scores.len());
        let truth = ping_truth(&survey.truth, &survey.pings).unwrap();
        let label = LabelConfig { d: s.d, exclusion: config.exclusion(), planar: false };
        let (curve, summary) = evaluate(&det.scores, &truth, &label).unwrap();
        assert!(!curve.is_empty());
        assert!(summary.positives > 0 && (0.0..=1.0).contains(&summary.ap));
    }
}
