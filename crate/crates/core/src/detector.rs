//! Structural similarity between submaps and the loop decision.
//!
//! The per-point similarity of two feature values is
//! `1 - |a - b| / (max(|a|, |b|) + eps)`; a map similarity averages it over
//! every cross pair of points, and the cloud similarity averages the six map
//! similarities.
//!
//! The all-pairs average is evaluated exactly without the `n * m` double
//! loop. Sort both maps by magnitude. For a pair where `|b| <= |a|` the term
//! is `(eps + sgn(a) b) / (|a| + eps)`, and symmetrically when `|a| < |b|`,
//! so one merge pass over the two sorted maps with running counts and sums
//! of the already-visited elements of the other map yields the whole sum.

use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{FeatureKind, FeatureSet};
use crate::geometry::Pose;

pub const DEFAULT_EPSILON: f64 = 1e-8;
pub const DEFAULT_CAP: usize = 2000;

/// Similarity of two feature values; 1 iff they are equal.
#[inline]
pub fn point_similarity(a: f64, b: f64, epsilon: f64) -> f64 {
    1.0 - (b - a).abs() / (a.abs().max(b.abs()) + epsilon)
}

/// Neumaier-compensated running sum; `sum + compensation` is the value.
#[derive(Debug, Clone, Copy, Default)]
struct CompensatedSum {
    sum: f64,
    compensation: f64,
}

impl CompensatedSum {
    #[inline]
    fn add(&mut self, x: f64) {
        let (t, e) = two_sum(self.sum, x);
        self.sum = t;
        self.compensation += e;
    }

    #[inline]
    fn value(&self) -> f64 {
        self.sum + self.compensation
    }
}

/// `a + b` and its exact rounding error.
#[inline]
fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

/// A feature map prepared for repeated similarity queries.
#[derive(Debug, Clone, PartialEq)]
pub struct SortedMap {
    /// Values ordered by `(|v|, v)`.
    values: Vec<f64>,
    /// `|v| + eps` as an unevaluated sum `(hi, lo)`.
    denominators: Vec<(f64, f64)>,
    epsilon: f64,
}

impl SortedMap {
    pub fn new(map: &[f64], epsilon: f64) -> Self {
        let mut values = map.to_vec();
        values.sort_by(|a, b| a.abs().total_cmp(&b.abs()).then(a.total_cmp(b)));
        let denominators = values.iter().map(|v| two_sum(v.abs(), epsilon)).collect();
        Self {
            values,
            denominators,
            epsilon,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Mean point similarity over all cross pairs.
    ///
    /// For `|b| <= |a|` the similarity is `(eps + sgn(a) b) / (|a| + eps)`,
    /// so each element contributes `(count * eps + sgn(v) * sum) / (|v| + eps)`
    /// over the elements of the other map already passed. Signed maps cancel
    /// heavily, so each contribution is formed in double-double arithmetic.
    pub fn similarity(&self, other: &SortedMap) -> Result<f64> {
        if self.is_empty() || other.is_empty() {
            return Err(Error::EmptyMap);
        }
        debug_assert_eq!(self.epsilon, other.epsilon);
        let eps = self.epsilon;
        let (a, b) = (&self.values, &other.values);
        let (mut i, mut j) = (0, 0);
        let (mut count_a, mut count_b) = (0.0, 0.0);
        let (mut sum_a, mut sum_b) = (CompensatedSum::default(), CompensatedSum::default());
        let mut total = CompensatedSum::default();
        let mut owner = |v: f64, (d_hi, d_lo): (f64, f64), count: f64, passed: &CompensatedSum| {
            let s = if v == 0.0 { 0.0 } else { v.signum() };
            let p = count * eps;
            let p_err = count.mul_add(eps, -p);
            let (n_hi, n_err) = two_sum(p, s * passed.sum);
            let n_lo = n_err + p_err + s * passed.compensation;
            let q1 = n_hi / d_hi;
            let r = (-q1).mul_add(d_hi, n_hi) + n_lo - q1 * d_lo;
            total.add(q1);
            total.add(r / d_hi);
        };
        while i < a.len() || j < b.len() {
            // On equal magnitudes take `b` first: an `a` element owns the pairs
            // with |b| <= |a|, a `b` element those with |a| < |b|.
            if j < b.len() && (i == a.len() || b[j].abs() <= a[i].abs()) {
                owner(b[j], other.denominators[j], count_a, &sum_a);
                count_b += 1.0;
                sum_b.add(b[j]);
                j += 1;
            } else {
                owner(a[i], self.denominators[i], count_b, &sum_b);
                count_a += 1.0;
                sum_a.add(a[i]);
                i += 1;
            }
        }
        Ok(total.value() / (a.len() as f64 * b.len() as f64))
    }
}

/// Mean of [`point_similarity`] over every pair `(x, y)` drawn from the two maps.
pub fn map_similarity(x: &[f64], y: &[f64], epsilon: f64) -> Result<f64> {
    SortedMap::new(x, epsilon).similarity(&SortedMap::new(y, epsilon))
}

/// Mean of the six map similarities.
pub fn cloud_similarity(a: &FeatureSet, b: &FeatureSet, epsilon: f64) -> Result<f64> {
    PreparedFeatures::new(a, epsilon).similarity(&PreparedFeatures::new(b, epsilon))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreparedFeatures {
    maps: [SortedMap; 6],
}

impl PreparedFeatures {
    pub fn new(features: &FeatureSet, epsilon: f64) -> Self {
        Self {
            maps: FeatureKind::ALL.map(|k| SortedMap::new(features.map(k), epsilon)),
        }
    }

    pub fn similarity(&self, other: &PreparedFeatures) -> Result<f64> {
        let mut total = 0.0;
        for (a, b) in self.maps.iter().zip(&other.maps) {
            total += a.similarity(b)?;
        }
        Ok(total / self.maps.len() as f64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubmapRecord {
    pub sequence_index: usize,
    pub reference_pose: Pose,
    pub feature_set: FeatureSet,
    pub point_count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub epsilon: f64,
    /// Pairs with `i - j <= exclusion` are never compared.
    pub exclusion: usize,
    /// Per-submap subsample size; `None` compares every point.
    pub cap: Option<usize>,
    pub seed: u64,
}

impl DetectorConfig {
    /// Defaults for a half accumulation window `n`.
    pub fn for_window(n: usize) -> Self {
        Self {
            epsilon: DEFAULT_EPSILON,
            exclusion: 2 * n + 5,
            cap: Some(DEFAULT_CAP),
            seed: 0,
        }
    }
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self::for_window(10)
    }
}

/// `(i, j, score)` with `j < i`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredPair {
    pub i: usize,
    pub j: usize,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LoopCandidate {
    pub i: usize,
    pub j: usize,
    pub score: f64,
    pub is_loop: bool,
}

/// Deterministic uniform subsample of at most `cap` point indices.
pub fn subsample_indices(len: usize, cap: usize, seed: u64, sequence_index: usize) -> Vec<usize> {
    if len <= cap {
        return (0..len).collect();
    }
    let stream = seed ^ (sequence_index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    let mut rng = ChaCha8Rng::seed_from_u64(stream);
    let mut picked = rand::seq::index::sample(&mut rng, len, cap).into_vec();
    picked.sort_unstable();
    picked
}

#[derive(Debug, Clone)]
struct Entry {
    sequence_index: usize,
    features: PreparedFeatures,
}

/// Stored submaps, each scored against every earlier one on insertion.
#[derive(Debug, Clone)]
pub struct LoopDatabase {
    config: DetectorConfig,
    entries: Vec<Entry>,
}

impl LoopDatabase {
    pub fn new(config: DetectorConfig) -> Self {
        Self {
            config,
            entries: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn prepare(&self, record: &SubmapRecord) -> Entry {
        let features = match self.config.cap {
            Some(cap) if record.feature_set.len() > cap => {
                let keep = subsample_indices(record.feature_set.len(), cap, self.config.seed, record.sequence_index);
                PreparedFeatures::new(&record.feature_set.select(&keep), self.config.epsilon)
            }
            _ => PreparedFeatures::new(&record.feature_set, self.config.epsilon),
        };
        Entry {
            sequence_index: record.sequence_index,
            features,
        }
    }

    fn score_against(&self, query: &Entry, earlier: &[Entry]) -> Result<Vec<ScoredPair>> {
        earlier
            .iter()
            .filter(|e| {
                e.sequence_index < query.sequence_index
                    && query.sequence_index - e.sequence_index > self.config.exclusion
            })
            .map(|e| {
                Ok(ScoredPair {
                    i: query.sequence_index,
                    j: e.sequence_index,
                    score: query.features.similarity(&e.features)?,
                })
            })
            .collect()
    }

    /// Scores `record` against everything stored so far, then stores it.
    pub fn insert(&mut self, record: &SubmapRecord) -> Result<Vec<ScoredPair>> {
        let entry = self.prepare(record);
        let scores = self.score_against(&entry, &self.entries)?;
        self.entries.push(entry);
        Ok(scores)
    }
}

/// Scores every admissible pair `j < i`. Output is ordered by `(i, j)`
/// whatever the thread count.
pub fn score_pairs(records: &[SubmapRecord], config: &DetectorConfig) -> Result<Vec<ScoredPair>> {
    let mut sorted: Vec<&SubmapRecord> = records.iter().collect();
    sorted.sort_by_key(|r| r.sequence_index);
    let db = LoopDatabase::new(*config);
    let entries: Vec<Entry> = sorted.par_iter().map(|r| db.prepare(r)).collect();
    let per_query: Vec<Vec<ScoredPair>> = (0..entries.len())
        .into_par_iter()
        .map(|k| db.score_against(&entries[k], &entries[..k]))
        .collect::<Result<_>>()?;
    Ok(per_query.concat())
}

/// Applies the loop decision `score > gamma` to every scored pair.
pub fn decide(scores: &[ScoredPair], gamma: f64) -> Vec<LoopCandidate> {
    scores
        .iter()
        .map(|s| LoopCandidate {
            i: s.i,
            j: s.j,
            score: s.score,
            is_loop: s.score > gamma,
        })
        .collect()
}

pub fn detect_loops(records: &[SubmapRecord], gamma: f64, config: &DetectorConfig) -> Result<Vec<LoopCandidate>> {
    Ok(decide(&score_pairs(records, config)?, gamma))
}

pub fn write_scores_csv<W: Write>(mut out: W, scores: &[ScoredPair]) -> Result<()> {
    writeln!(out, "i,j,gamma")?;
    for s in scores {
        writeln!(out, "{},{},{}", s.i, s.j, s.score)?;
    }
    Ok(())
}

pub fn write_loops_csv<W: Write>(mut out: W, loops: &[LoopCandidate], flagged_only: bool) -> Result<()> {
    writeln!(out, "i,j,gamma,is_loop")?;
    for l in loops.iter().filter(|l| l.is_loop || !flagged_only) {
        writeln!(out, "{},{},{},{}", l.i, l.j, l.score, l.is_loop)?;
    }
    Ok(())
}

/// Reads a file written by [`write_scores_csv`].
pub fn read_scores_csv(path: &Path) -> Result<Vec<ScoredPair>> {
    #[derive(Deserialize)]
    struct Row {
        i: usize,
        j: usize,
        gamma: f64,
    }
    let parse_error = |line: u64, message: String| Error::Parse {
        file: path.to_path_buf(),
        line,
        message,
    };
    if !path.is_file() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path).map_err(|e| parse_error(1, e.to_string()))?;
    let header = reader.headers().map_err(|e| parse_error(1, e.to_string()))?;
    if header.iter().collect::<Vec<_>>() != ["i", "j", "gamma"] {
        return Err(parse_error(1, format!("expected header i,j,gamma, found {}", header.iter().collect::<Vec<_>>().join(","))));
    }
    let mut scores = Vec::new();
    for row in reader.deserialize::<Row>() {
        let row = row.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_error(line, e.to_string())
        })?;
        scores.push(ScoredPair {
            i: row.i,
            j: row.j,
            score: row.gamma,
        });
    }
    Ok(scores)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::Rng;

    // Independent reference: the literal double loop, compensated summation.
    fn naive_map_similarity(x: &[f64], y: &[f64], eps: f64) -> f64 {
        let (mut sum, mut comp) = (0.0f64, 0.0f64);
        for &a in x {
            for &b in y {
                let term = 1.0 - (b - a).abs() / (a.abs().max(b.abs()) + eps);
                let t = sum + term;
                comp += if sum.abs() >= term.abs() { (sum - t) + term } else { (term - t) + sum };
                sum = t;
            }
        }
        (sum + comp) / (x.len() * y.len()) as f64
    }

    fn random_map(rng: &mut ChaCha8Rng, n: usize, signed: bool) -> Vec<f64> {
        (0..n)
            .map(|_| {
                let v: f64 = rng.random_range(0.0..3.0);
                match rng.random_range(0..10) {
                    0 => 0.0,
                    1 => 1.5, // repeated value -> ties
                    _ if signed && rng.random_bool(0.5) => -v,
                    _ => v,
                }
            })
            .collect()
    }

    #[test]
    fn point_similarity_examples() {
        assert_eq!(point_similarity(0.0, 0.0, 1e-8), 1.0);
        assert_relative_eq!(point_similarity(2.0, 4.0, 1e-8), 0.5, epsilon = 1e-7);
        assert_relative_eq!(point_similarity(1.0, -1.0, 1e-8), -1.0, epsilon = 1e-7);
        assert_eq!(point_similarity(3.0, 7.0, 1e-8), point_similarity(7.0, 3.0, 1e-8));
    }

    #[test]
    fn constant_equal_maps_are_identical() {
        assert_eq!(map_similarity(&[0.7; 10], &[0.7; 13], 1e-8).unwrap(), 1.0);
        assert_eq!(map_similarity(&[0.0; 4], &[0.0; 2], 1e-8).unwrap(), 1.0);
    }

    #[test]
    fn empty_map_is_an_error() {
        assert!(matches!(map_similarity(&[], &[1.0], 1e-8), Err(Error::EmptyMap)));
    }

    #[test]
    fn matches_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for round in 0..40 {
            let signed = round % 2 == 0;
            let x = random_map(&mut rng, 30, signed);
            let y = random_map(&mut rng, 40, signed);
            let fast = map_similarity(&x, &y, 1e-8).unwrap();
            let slow = naive_map_similarity(&x, &y, 1e-8);
            assert!((fast - slow).abs() <= 1e-12 * slow.abs().max(1e-300), "{fast} vs {slow}");
        }
    }

    #[test]
    fn permutation_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_map(&mut rng, 200, true);
        let y = random_map(&mut rng, 150, true);
        let mut xs = x.clone();
        xs.shuffle(&mut rng);
        assert_eq!(map_similarity(&x, &y, 1e-8).unwrap(), map_similarity(&xs, &y, 1e-8).unwrap());
    }

    #[test]
    fn subsample_is_deterministic_and_bounded() {
        let a = subsample_indices(5000, 2000, 3, 17);
        assert_eq!(a.len(), 2000);
        assert_eq!(a, subsample_indices(5000, 2000, 3, 17));
        assert_ne!(a, subsample_indices(5000, 2000, 3, 18));
        assert!(a.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(subsample_indices(10, 2000, 3, 1), (0..10).collect::<Vec<_>>());
    }

    fn record(seq: usize, features: FeatureSet) -> SubmapRecord {
        SubmapRecord {
            sequence_index: seq,
            reference_pose: Pose::identity(),
            point_count: features.len(),
            feature_set: features,
        }
    }

    fn random_features(rng: &mut ChaCha8Rng, n: usize) -> FeatureSet {
        FeatureSet::from_maps(std::array::from_fn(|k| random_map(rng, n, k == 4)))
    }

    #[test]
    fn high_threshold_flags_nothing() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let records: Vec<_> = (0..6).map(|i| record(i * 10, random_features(&mut rng, 50))).collect();
        let cfg = DetectorConfig { exclusion: 5, cap: None, ..Default::default() };
        let loops = detect_loops(&records, 1.01, &cfg).unwrap();
        assert_eq!(loops.len(), 15);
        assert!(loops.iter().all(|l| !l.is_loop));
    }

    #[test]
    fn duplicate_submap_is_flagged() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let f = random_features(&mut rng, 80);
        let other = random_features(&mut rng, 80);
        let self_score = cloud_similarity(&f, &f, 1e-8).unwrap();
        let records = vec![record(0, f.clone()), record(40, other), record(100, f)];
        let cfg = DetectorConfig { exclusion: 25, cap: None, ..Default::default() };
        let loops = detect_loops(&records, 0.9 * self_score, &cfg).unwrap();
        let hit = loops.iter().find(|l| l.i == 100 && l.j == 0).unwrap();
        assert!(hit.is_loop);
        assert_eq!(hit.score, self_score);
    }

    #[test]
    fn exclusion_window_and_ordering() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let records: Vec<_> = [30, 0, 10, 45].iter().map(|&s| record(s, random_features(&mut rng, 20))).collect();
        let cfg = DetectorConfig { exclusion: 10, cap: None, ..Default::default() };
        let pairs: Vec<_> = score_pairs(&records, &cfg).unwrap().iter().map(|p| (p.i, p.j)).collect();
        assert_eq!(pairs, vec![(30, 0), (30, 10), (45, 0), (45, 10), (45, 30)]);
    }

    #[test]
    fn database_matches_batch() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let records: Vec<_> = (0..8).map(|i| record(i * 7, random_features(&mut rng, 60))).collect();
        let cfg = DetectorConfig { exclusion: 10, cap: Some(40), ..Default::default() };
        let batch = score_pairs(&records, &cfg).unwrap();
        let mut db = LoopDatabase::new(cfg);
        let online: Vec<_> = records.iter().flat_map(|r| db.insert(r).unwrap()).collect();
        assert_eq!(batch, online);
        assert_eq!(db.len(), 8);
    }

    #[test]
    fn csv_outputs() {
        let scores = vec![ScoredPair { i: 40, j: 2, score: 0.5 }, ScoredPair { i: 41, j: 3, score: 0.25 }];
        let mut buf = Vec::new();
        write_scores_csv(&mut buf, &scores).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "i,j,gamma\n40,2,0.5\n41,3,0.25\n");
        let loops = decide(&scores, 0.3);
        let mut buf = Vec::new();
        write_loops_csv(&mut buf, &loops, true).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "i,j,gamma,is_loop\n40,2,0.5,true\n");
    }

    #[test]
    fn scores_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scores.csv");
        let scores = vec![ScoredPair { i: 40, j: 2, score: 0.1 + 0.2 }, ScoredPair { i: 41, j: 3, score: -1e-300 }];
        write_scores_csv(std::fs::File::create(&path).unwrap(), &scores).unwrap();
        assert_eq!(read_scores_csv(&path).unwrap(), scores);
        std::fs::write(&path, "i,j,gamma\n1,0,0.5\n2,x,0.5\n").unwrap();
        match read_scores_csv(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
    }

    proptest! {
        #[test]
        fn similarity_bounds_and_symmetry(
            x in prop::collection::vec(0.0f64..5.0, 1..60),
            y in prop::collection::vec(0.0f64..5.0, 1..60),
        ) {
            let xy = map_similarity(&x, &y, 1e-8).unwrap();
            let yx = map_similarity(&y, &x, 1e-8).unwrap();
            prop_assert!((xy - yx).abs() <= 1e-12);
            prop_assert!((-1e-12..=1.0 + 1e-12).contains(&xy));
            let slow = naive_map_similarity(&x, &y, 1e-8);
            prop_assert!((xy - slow).abs() <= 1e-12 * slow.abs().max(1e-12));
        }

        #[test]
        fn threshold_sets_are_nested(g1 in 0.0f64..1.0, dg in 0.0f64..0.5) {
            let mut rng = ChaCha8Rng::seed_from_u64(8);
            let scores: Vec<_> = (0..50).map(|k| ScoredPair { i: 100 + k, j: k, score: rng.random_range(0.0..1.0) }).collect();
            let low = decide(&scores, g1);
            let high = decide(&scores, g1 + dg);
            for (l, h) in low.iter().zip(&high) {
                prop_assert!(!h.is_loop || l.is_loop);
            }
        }
    }
}
