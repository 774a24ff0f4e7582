//! Deterministic synthetic bathymetric surveys.
//!
//! A heightfield seafloor is surveyed by a vehicle at the surface that runs
//! a lawnmower pattern followed by revisit legs crossing it. The generator
//! emits exact truth poses, noisy IMU and DVL streams and multibeam pings
//! whose ranges come from ray casting against the terrain.

use std::f64::consts::{FRAC_PI_2, PI};
use std::str::FromStr;

use nalgebra::{Matrix3, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dead_reckoning::{DvlSample, ImuSample, GRAVITY};
use crate::error::{Error, Result};
use crate::evaluation::{label_pairs, GroundTruthLabel, LabelConfig};
use crate::geometry::{yaw_matrix, Pose};
use crate::submap::{Beam, SonarPing};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bump {
    pub center: [f64; 2],
    /// m; negative values are depressions.
    pub amplitude: f64,
    /// Gaussian standard deviation, m.
    pub width: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Wave {
    /// rad/m
    pub wavevector: [f64; 2],
    pub amplitude: f64,
    pub phase: f64,
}

/// Sum of plane waves whose amplitude is scaled by `exp` of a second,
/// slowly varying wave sum, so the texture strength changes across the
/// seafloor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextureLayer {
    pub waves: Vec<Wave>,
    pub envelope: Vec<Wave>,
}

fn wave_sum(waves: &[Wave], x: f64, y: f64) -> f64 {
    waves
        .iter()
        .map(|w| w.amplitude * (w.wavevector[0] * x + w.wavevector[1] * y + w.phase).sin())
        .sum()
}

impl TextureLayer {
    pub fn height(&self, x: f64, y: f64) -> f64 {
        if self.waves.is_empty() {
            return 0.0;
        }
        wave_sum(&self.waves, x, y) * wave_sum(&self.envelope, x, y).exp()
    }
}

/// Seafloor height `z = h(x, y)` (z up, the sea surface at z = 0).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Terrain {
    pub base_depth: f64,
    /// dz/dx, dz/dy
    pub slope: [f64; 2],
    pub bumps: Vec<Bump>,
    pub noise: Vec<TextureLayer>,
    pub seed: u64,
}

impl Terrain {
    pub fn flat(depth: f64) -> Self {
        Self {
            base_depth: depth,
            slope: [0.0; 2],
            bumps: Vec::new(),
            noise: Vec::new(),
            seed: 0,
        }
    }

    pub fn height(&self, x: f64, y: f64) -> f64 {
        let mut h = -self.base_depth + self.slope[0] * x + self.slope[1] * y;
        for b in &self.bumps {
            let r2 = (x - b.center[0]).powi(2) + (y - b.center[1]).powi(2);
            h += b.amplitude * (-0.5 * r2 / (b.width * b.width)).exp();
        }
        for layer in &self.noise {
            h += layer.height(x, y);
        }
        h
    }

    pub fn random(params: &TerrainParams, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let half = params.half_extent;
        let bumps = (0..params.bump_count)
            .map(|_| {
                let sign = if rng.random_bool(params.depression_fraction) { -1.0 } else { 1.0 };
                Bump {
                    center: [rng.random_range(-half..half), rng.random_range(-half..half)],
                    amplitude: sign * rng.random_range(params.bump_amplitude.0..=params.bump_amplitude.1),
                    width: rng.random_range(params.bump_width.0..=params.bump_width.1),
                }
            })
            .collect();
        let noise = params
            .texture
            .iter()
            .filter(|t| t.waves > 0)
            .map(|t| {
                let envelope_amplitude = t.envelope_log_sd * (2.0 / t.envelope_waves.max(1) as f64).sqrt();
                TextureLayer {
                    waves: random_waves(&mut rng, t.waves, t.wavelength, t.amplitude * 0.5, t.amplitude),
                    envelope: random_waves(&mut rng, t.envelope_waves, t.envelope_wavelength, envelope_amplitude, envelope_amplitude),
                }
            })
            .collect();
        Self {
            base_depth: params.base_depth,
            slope: params.slope,
            bumps,
            noise,
            seed,
        }
    }

    /// Distance along a ray from `origin` in direction `dir` (unit) to the
    /// seafloor, found by marching in `step` increments and bisecting to
    /// `1e-4` m. `None` when nothing is hit within `max_range`.
    pub fn cast(&self, origin: &Vector3<f64>, dir: &Vector3<f64>, step: f64, max_range: f64) -> Option<f64> {
        let above = |t: f64| {
            let p = origin + dir * t;
            p.z - self.height(p.x, p.y)
        };
        if above(0.0) <= 0.0 {
            return None;
        }
        let mut lo = 0.0;
        let mut hi = loop {
            let t = (lo + step).min(max_range);
            if above(t) <= 0.0 {
                break t;
            }
            if t >= max_range {
                return None;
            }
            lo = t;
        };
        while hi - lo > 1e-4 {
            let mid = 0.5 * (lo + hi);
            if above(mid) > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Some(0.5 * (lo + hi))
    }
}

fn random_waves(rng: &mut ChaCha8Rng, count: usize, wavelength: (f64, f64), amp_lo: f64, amp_hi: f64) -> Vec<Wave> {
    (0..count)
        .map(|_| {
            let k = 2.0 * PI / rng.random_range(wavelength.0..=wavelength.1);
            let heading = rng.random_range(0.0..PI);
            Wave {
                wavevector: [k * heading.cos(), k * heading.sin()],
                amplitude: if amp_hi > amp_lo { rng.random_range(amp_lo..amp_hi) } else { amp_lo },
                phase: rng.random_range(0.0..2.0 * PI),
            }
        })
        .collect()
}

/// Random texture layer: `waves` plane waves of the given wavelength band
/// and peak amplitude, modulated by `exp` of an envelope field with
/// standard deviation `envelope_log_sd`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TextureParams {
    pub waves: usize,
    pub amplitude: f64,
    pub wavelength: (f64, f64),
    pub envelope_waves: usize,
    pub envelope_wavelength: (f64, f64),
    pub envelope_log_sd: f64,
}

impl TextureParams {
    /// Same layer with every length multiplied by `s`.
    pub fn scaled(self, s: f64) -> Self {
        Self {
            amplitude: self.amplitude * s,
            wavelength: (self.wavelength.0 * s, self.wavelength.1 * s),
            envelope_wavelength: (self.envelope_wavelength.0 * s, self.envelope_wavelength.1 * s),
            ..self
        }
    }

    pub const NONE: TextureParams = TextureParams {
        waves: 0,
        amplitude: 0.0,
        wavelength: (1.0, 1.0),
        envelope_waves: 0,
        envelope_wavelength: (1.0, 1.0),
        envelope_log_sd: 0.0,
    };
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TerrainParams {
    pub base_depth: f64,
    pub slope: [f64; 2],
    pub half_extent: f64,
    pub bump_count: usize,
    pub bump_amplitude: (f64, f64),
    pub bump_width: (f64, f64),
    pub depression_fraction: f64,
    pub texture: [TextureParams; 2],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurveyPlan {
    pub legs: usize,
    pub leg_spacing: f64,
    pub leg_length: f64,
    pub revisit_legs: usize,
    pub revisit_spacing: f64,
    /// Heading of the revisit legs relative to the lawnmower legs, rad.
    pub revisit_heading_offset: f64,
    /// m/s
    pub speed: f64,
    pub max_yaw_rate: f64,
    /// Line-of-sight lookahead distance, m.
    pub lookahead: f64,
    pub imu_rate: f64,
    /// IMU ticks between consecutive pings.
    pub ping_every: usize,
    /// IMU ticks between consecutive DVL samples.
    pub dvl_every: usize,
    /// Full across-track fan angle, rad.
    pub swath: f64,
    pub beams: usize,
    /// Ray-march increment for the range solver, m.
    pub march_step: f64,
    pub max_range: f64,
}

impl SurveyPlan {
    /// Straight segments `(start, end)` in the order they are flown.
    pub fn legs_xy(&self) -> Vec<(Vector2<f64>, Vector2<f64>)> {
        let mut out = Vec::new();
        let half = 0.5 * self.leg_length;
        for k in 0..self.legs {
            let y = (k as f64 - 0.5 * (self.legs as f64 - 1.0)) * self.leg_spacing;
            let (a, b) = (Vector2::new(-half, y), Vector2::new(half, y));
            out.push(if k % 2 == 0 { (a, b) } else { (b, a) });
        }
        let rot = nalgebra::Rotation2::new(self.revisit_heading_offset);
        for k in 0..self.revisit_legs {
            let across = (k as f64 - 0.5 * (self.revisit_legs as f64 - 1.0)) * self.revisit_spacing;
            // along +x before rotation, offset along -y so the first revisit
            // leg is the one nearest the lawnmower's finishing side
            let a = rot * Vector2::new(-half, -across);
            let b = rot * Vector2::new(half, -across);
            out.push(if k % 2 == 0 { (a, b) } else { (b, a) });
        }
        out
    }

    /// Number of lawnmower/revisit leg intersections.
    pub fn crossings(&self) -> usize {
        let legs = self.legs_xy();
        let (lawn, revisit) = legs.split_at(self.legs);
        lawn.iter()
            .map(|a| revisit.iter().filter(|b| segments_intersect(a, b)).count())
            .sum()
    }
}

fn segments_intersect(a: &(Vector2<f64>, Vector2<f64>), b: &(Vector2<f64>, Vector2<f64>)) -> bool {
    let cross = |u: Vector2<f64>, v: Vector2<f64>| u.x * v.y - u.y * v.x;
    let (r, s) = (a.1 - a.0, b.1 - b.0);
    let denom = cross(r, s);
    if denom.abs() < 1e-12 {
        return false;
    }
    let t = cross(b.0 - a.0, s) / denom;
    let u = cross(b.0 - a.0, r) / denom;
    (0.0..=1.0).contains(&t) && (0.0..=1.0).contains(&u)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    /// Standard deviations per axis.
    pub gyro: f64,
    pub gyro_bias: [f64; 3],
    pub accel: f64,
    pub mag: f64,
    pub dvl: f64,
    pub range: f64,
    /// Range noise proportional to range.
    pub range_relative: f64,
    /// Field inclination below the horizon, rad.
    pub mag_inclination: f64,
}

impl NoiseConfig {
    pub fn noiseless() -> Self {
        Self {
            gyro: 0.0,
            gyro_bias: [0.0; 3],
            accel: 0.0,
            mag: 0.0,
            dvl: 0.0,
            range: 0.0,
            range_relative: 0.0,
            mag_inclination: 60f64.to_radians(),
        }
    }
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            gyro: 2e-3,
            gyro_bias: [2e-4, -1e-4, 3e-4],
            accel: 0.02,
            mag: 0.01,
            dvl: 0.01,
            range: 0.02,
            range_relative: 1e-3,
            mag_inclination: 60f64.to_radians(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScenarioName {
    Pond,
    Abyss,
    Flats,
}

impl ScenarioName {
    pub const ALL: [ScenarioName; 3] = [ScenarioName::Pond, ScenarioName::Abyss, ScenarioName::Flats];

    pub fn as_str(self) -> &'static str {
        match self {
            ScenarioName::Pond => "pond",
            ScenarioName::Abyss => "abyss",
            ScenarioName::Flats => "flats",
        }
    }
}

impl FromStr for ScenarioName {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|n| n.as_str() == s)
            .ok_or_else(|| Error::UnknownScenario(s.to_string()))
    }
}

impl std::fmt::Display for ScenarioName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Everything needed to generate a survey except the seed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: ScenarioName,
    /// Evaluation distance and crop half-size, m.
    pub d: f64,
    pub terrain: TerrainParams,
    pub plan: SurveyPlan,
    pub noise: NoiseConfig,
}

impl Scenario {
    pub fn new(name: ScenarioName) -> Self {
        let pond_terrain = TerrainParams {
            base_depth: 20.0,
            slope: [0.01, 0.02],
            half_extent: 100.0,
            bump_count: 8,
            bump_amplitude: (1.0, 4.0),
            bump_width: (4.0, 12.0),
            depression_fraction: 0.25,
            texture: [
                TextureParams {
                    waves: 16,
                    amplitude: 0.15,
                    wavelength: (2.5, 6.0),
                    envelope_waves: 6,
                    envelope_wavelength: (40.0, 120.0),
                    envelope_log_sd: 0.8,
                },
                TextureParams {
                    waves: 16,
                    amplitude: 0.5,
                    wavelength: (8.0, 25.0),
                    envelope_waves: 6,
                    envelope_wavelength: (40.0, 120.0),
                    envelope_log_sd: 0.8,
                },
            ],
        };
        let pond_plan = SurveyPlan {
            legs: 6,
            leg_spacing: 30.0,
            leg_length: 160.0,
            revisit_legs: 3,
            revisit_spacing: 40.0,
            revisit_heading_offset: FRAC_PI_2,
            speed: 2.0,
            max_yaw_rate: 0.2,
            lookahead: 8.0,
            imu_rate: 50.0,
            ping_every: 50,
            dvl_every: 10,
            swath: 120f64.to_radians(),
            beams: 64,
            march_step: 1.0,
            max_range: 100.0,
        };
        match name {
            ScenarioName::Pond => Self {
                name,
                d: 10.0,
                terrain: pond_terrain,
                plan: pond_plan,
                noise: NoiseConfig::default(),
            },
            ScenarioName::Flats => Self {
                name,
                d: 10.0,
                terrain: TerrainParams {
                    bump_count: 0,
                    texture: [TextureParams::NONE; 2],
                    ..pond_terrain
                },
                plan: pond_plan,
                noise: NoiseConfig::default(),
            },
            ScenarioName::Abyss => {
                let s = 10.0;
                Self {
                    name,
                    d: 100.0,
                    terrain: TerrainParams {
                        base_depth: 500.0,
                        half_extent: 1000.0,
                        bump_amplitude: (10.0, 40.0),
                        bump_width: (40.0, 120.0),
                        texture: pond_terrain.texture.map(|t| t.scaled(s)),
                        ..pond_terrain
                    },
                    plan: SurveyPlan {
                        leg_spacing: 30.0 * s,
                        leg_length: 160.0 * s,
                        revisit_spacing: 40.0 * s,
                        speed: 5.0,
                        max_yaw_rate: 0.05,
                        lookahead: 80.0,
                        imu_rate: 20.0,
                        ping_every: 40,
                        dvl_every: 4,
                        march_step: 10.0,
                        max_range: 2500.0,
                        ..pond_plan
                    },
                    noise: NoiseConfig {
                        range: 0.2,
                        ..NoiseConfig::default()
                    },
                }
            }
        }
    }

    pub fn generate(&self, seed: u64) -> Result<Survey> {
        generate_survey(self, seed)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Survey {
    pub scenario: Scenario,
    pub seed: u64,
    pub terrain: Terrain,
    /// One pose per IMU sample.
    pub truth: Vec<Pose>,
    pub imu: Vec<ImuSample>,
    pub dvl: Vec<DvlSample>,
    pub pings: Vec<SonarPing>,
    pub dropped_beams: usize,
}

impl Survey {
    /// Truth pose at each ping.
    pub fn ping_truth(&self) -> Vec<Pose> {
        let every = self.scenario.plan.ping_every;
        self.truth.iter().step_by(every).take(self.pings.len()).copied().collect()
    }
}

fn wrap(a: f64) -> f64 {
    (a + PI).rem_euclid(2.0 * PI) - PI
}

/// Yaw-rate commands for a unicycle following the plan's legs by line of
/// sight; returns `(position, heading, yaw rate over the next tick)` for
/// every tick until the last leg is finished.
fn fly(plan: &SurveyPlan) -> Vec<(Vector2<f64>, f64, f64)> {
    let legs = plan.legs_xy();
    let dt = 1.0 / plan.imu_rate;
    let v = plan.speed;
    let Some(first) = legs.first() else {
        return Vec::new();
    };
    // each leg is entered along its own direction after a lead-in of a few
    // turning radii, so turns are finished before the leg starts
    let lead_in = 2.5 * v / plan.max_yaw_rate;
    let mut segments = Vec::new();
    for (k, leg) in legs.iter().enumerate() {
        if k > 0 {
            let u = (leg.1 - leg.0).normalize();
            let entry = leg.0 - u * lead_in;
            segments.push((legs[k - 1].1, entry));
            segments.push((entry, leg.0));
        }
        segments.push(*leg);
    }
    let mut pos = first.0;
    let d0 = first.1 - first.0;
    let mut psi = d0.y.atan2(d0.x);
    let mut out = Vec::new();
    let mut seg = 0;
    let limit = (40.0 * segments.iter().map(|s| (s.1 - s.0).norm()).sum::<f64>() / (v * dt)) as usize;
    while seg < segments.len() && out.len() < limit {
        let (a, b) = segments[seg];
        let len = (b - a).norm();
        let u = (b - a) / len;
        let along = (pos - a).dot(&u);
        if along >= len {
            seg += 1;
            continue;
        }
        let normal = Vector2::new(-u.y, u.x);
        let cross = (pos - a).dot(&normal);
        let desired = u.y.atan2(u.x) - (cross / plan.lookahead).atan();
        let rate = (2.0 * wrap(desired - psi)).clamp(-plan.max_yaw_rate, plan.max_yaw_rate);
        out.push((pos, psi, rate));
        // exact arc over the tick
        let next = psi + rate * dt;
        if rate.abs() > 1e-12 {
            pos += Vector2::new(next.sin() - psi.sin(), psi.cos() - next.cos()) * (v / rate);
        } else {
            pos += Vector2::new(psi.cos(), psi.sin()) * (v * dt);
        }
        psi = next;
    }
    out
}

fn noisy(rng: &mut ChaCha8Rng, sigma: f64) -> f64 {
    if sigma > 0.0 {
        Normal::new(0.0, sigma).expect("finite sigma").sample(rng)
    } else {
        0.0
    }
}

fn noisy3(rng: &mut ChaCha8Rng, sigma: f64) -> Vector3<f64> {
    Vector3::new(noisy(rng, sigma), noisy(rng, sigma), noisy(rng, sigma))
}

/// Simulates the full sensor suite along the scenario's plan.
pub fn generate_survey(scenario: &Scenario, seed: u64) -> Result<Survey> {
    let plan = &scenario.plan;
    if !(plan.imu_rate > 0.0 && plan.speed > 0.0) || plan.ping_every == 0 || plan.dvl_every == 0 || plan.beams == 0 {
        return Err(Error::InvalidConfig("survey plan rates must be positive".into()));
    }
    let terrain = Terrain::random(&scenario.terrain, seed);
    let noise = &scenario.noise;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);

    let dt = 1.0 / plan.imu_rate;
    let g = Vector3::new(0.0, 0.0, -GRAVITY);
    let (si, ci) = noise.mag_inclination.sin_cos();
    let mag_world = Vector3::new(ci, 0.0, -si);
    let bias = Vector3::from(noise.gyro_bias);

    let track = fly(plan);
    let mut truth = Vec::with_capacity(track.len());
    let mut imu = Vec::with_capacity(track.len());
    let mut dvl = Vec::new();
    let mut pings = Vec::new();
    let mut dropped_beams = 0;
    let mut previous_rate = 0.0;

    for (k, &(pos, psi, rate)) in track.iter().enumerate() {
        let t = k as f64 * dt;
        let r: Matrix3<f64> = yaw_matrix(psi);
        let position = Vector3::new(pos.x, pos.y, 0.0);
        let pose = Pose::new(r, position, t)?;
        truth.push(pose);

        // gyro and accelerometer describe the interval ending at this tick
        let gyro = Vector3::new(0.0, 0.0, previous_rate) + bias + noisy3(&mut rng, noise.gyro);
        let a_world = Vector3::new(-psi.sin(), psi.cos(), 0.0) * (plan.speed * previous_rate);
        let accel = r.transpose() * (g - a_world) + noisy3(&mut rng, noise.accel);
        let mag = (r.transpose() * mag_world + noisy3(&mut rng, noise.mag)).normalize();
        imu.push(ImuSample {
            timestamp: t,
            angular_velocity: gyro,
            linear_acceleration: accel,
            magnetic_field: Some(mag),
        });
        previous_rate = rate;

        if k % plan.dvl_every == 0 {
            dvl.push(DvlSample {
                timestamp: t,
                velocity: Vector3::new(plan.speed, 0.0, 0.0) + noisy3(&mut rng, noise.dvl),
            });
        }

        if k % plan.ping_every == 0 {
            let mut beams = Vec::with_capacity(plan.beams);
            for b in 0..plan.beams {
                let angle = if plan.beams == 1 {
                    0.0
                } else {
                    -0.5 * plan.swath + plan.swath * b as f64 / (plan.beams - 1) as f64
                };
                let dir = r * Vector3::new(0.0, angle.sin(), -angle.cos());
                match terrain.cast(&position, &dir, plan.march_step, plan.max_range) {
                    Some(range) => {
                        let sigma = noise.range + noise.range_relative * range;
                        beams.push(Beam {
                            angle,
                            range: range + noisy(&mut rng, sigma),
                        });
                    }
                    None => dropped_beams += 1,
                }
            }
            pings.push(SonarPing { timestamp: t, beams });
        }
    }
    Ok(Survey {
        scenario: *scenario,
        seed,
        terrain,
        truth,
        imu,
        dvl,
        pings,
        dropped_beams,
    })
}

/// Ground-truth labels for every pair of truth poses.
pub fn truth_loops(truth: &[Pose], d: f64, exclusion: usize) -> Vec<GroundTruthLabel> {
    label_pairs(
        truth,
        &LabelConfig {
            d,
            exclusion,
            planar: false,
        },
    )
}
