//! Ground-truth labelling of submap pairs and precision/recall scoring.

use std::collections::HashMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::detector::ScoredPair;
use crate::error::{Error, Result};
use crate::geometry::Pose;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Positive,
    Negative,
    Ignored,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthLabel {
    pub i: usize,
    pub j: usize,
    pub label: Label,
    pub pose_distance: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabelConfig {
    pub d: f64,
    pub exclusion: usize,
    /// Horizontal (x, y) distance instead of full 3D.
    pub planar: bool,
}

impl LabelConfig {
    /// Class for a pose distance: below `0.5 d` positive, above `2 d` negative.
    pub fn classify(&self, distance: f64) -> Label {
        if distance < 0.5 * self.d {
            Label::Positive
        } else if distance > 2.0 * self.d {
            Label::Negative
        } else {
            Label::Ignored
        }
    }

    pub fn label(&self, i: usize, j: usize, a: &Pose, b: &Pose) -> GroundTruthLabel {
        let delta = a.position() - b.position();
        let pose_distance = if self.planar { delta.xy().norm() } else { delta.norm() };
        let label = if i.abs_diff(j) <= self.exclusion {
            Label::Ignored
        } else {
            self.classify(pose_distance)
        };
        GroundTruthLabel {
            i,
            j,
            label,
            pose_distance,
        }
    }
}

/// Labels every pair `j < i` of `poses`, where a pose's slice index is its
/// sequence index.
pub fn label_pairs(poses: &[Pose], config: &LabelConfig) -> Vec<GroundTruthLabel> {
    let mut out = Vec::with_capacity(poses.len() * poses.len().saturating_sub(1) / 2);
    for (i, a) in poses.iter().enumerate() {
        for (j, b) in poses[..i].iter().enumerate() {
            out.push(config.label(i, j, a, b));
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

/// One point per distinct score, thresholds descending; a pair is predicted
/// a loop when its score is at least the threshold.
pub fn pr_curve(scores: &[ScoredPair], labels: &[GroundTruthLabel]) -> Result<Vec<PrPoint>> {
    let lookup: HashMap<(usize, usize), Label> = labels
        .iter()
        .flat_map(|l| [((l.i, l.j), l.label), ((l.j, l.i), l.label)])
        .collect();
    let mut ranked = Vec::with_capacity(scores.len());
    for s in scores {
        match lookup.get(&(s.i, s.j)) {
            None => return Err(Error::UnlabeledPair { i: s.i, j: s.j }),
            Some(Label::Ignored) => {}
            Some(label) => ranked.push((s.score, *label == Label::Positive)),
        }
    }
    curve_from_ranked(ranked)
}

/// PR curve over `(score, is_positive)` entries.
pub fn curve_from_ranked(mut ranked: Vec<(f64, bool)>) -> Result<Vec<PrPoint>> {
    let positives = ranked.iter().filter(|r| r.1).count();
    if positives == 0 {
        return Err(Error::NoPositives);
    }
    if let Some((score, _)) = ranked.iter().find(|r| !r.0.is_finite()) {
        return Err(Error::InvalidConfig(format!("non-finite score {score}")));
    }
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut curve = Vec::new();
    let (mut tp, mut fp) = (0, 0);
    let mut k = 0;
    while k < ranked.len() {
        let threshold = ranked[k].0;
        while k < ranked.len() && ranked[k].0 == threshold {
            if ranked[k].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            k += 1;
        }
        curve.push(PrPoint {
            threshold,
            precision: tp as f64 / (tp + fp) as f64,
            recall: tp as f64 / positives as f64,
            tp,
            fp,
            fn_: positives - tp,
        });
    }
    Ok(curve)
}

/// Step-interpolated area under the curve.
pub fn average_precision(curve: &[PrPoint]) -> Result<f64> {
    if curve.is_empty() {
        return Err(Error::NoPositives);
    }
    let mut ap = 0.0;
    let mut previous_recall = 0.0;
    for p in curve {
        ap += (p.recall - previous_recall) * p.precision;
        previous_recall = p.recall;
    }
    Ok(ap)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub ap: f64,
    pub pairs: usize,
    pub positives: usize,
}

impl Summary {
    pub fn from_curve(curve: &[PrPoint]) -> Result<Self> {
        let last = curve.last().ok_or(Error::NoPositives)?;
        Ok(Self {
            ap: average_precision(curve)?,
            pairs: last.tp + last.fp,
            positives: last.tp + last.fn_,
        })
    }
}

pub fn write_pr_csv<W: Write>(mut out: W, curve: &[PrPoint]) -> Result<()> {
    writeln!(out, "gamma,precision,recall,tp,fp,fn")?;
    for p in curve {
        writeln!(out, "{},{},{},{},{},{}", p.threshold, p.precision, p.recall, p.tp, p.fp, p.fn_)?;
    }
    Ok(())
}

const SVG_COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

/// Precision/recall plot with one polyline per named curve.
pub fn write_pr_svg<W: Write>(mut out: W, curves: &[(&str, &[PrPoint])]) -> Result<()> {
    let (w, h, m) = (480.0, 400.0, 50.0);
    let sx = |r: f64| m + r * (w - 2.0 * m);
    let sy = |p: f64| h - m - p * (h - 2.0 * m);
    writeln!(out, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#)?;
    writeln!(out, r#"<rect width="{w}" height="{h}" fill="white"/>"#)?;
    writeln!(out, r#"<path d="M{} {} H{} M{} {} V{}" stroke="black" fill="none"/>"#, sx(0.0), sy(0.0), sx(1.0), sx(0.0), sy(0.0), sy(1.0))?;
    for t in 0..=5 {
        let v = t as f64 / 5.0;
        writeln!(out, r#"<text x="{}" y="{}" text-anchor="middle">{v:.1}</text>"#, sx(v), sy(0.0) + 16.0)?;
        writeln!(out, r#"<text x="{}" y="{}" text-anchor="end">{v:.1}</text>"#, sx(0.0) - 6.0, sy(v) + 4.0)?;
    }
    writeln!(out, r#"<text x="{}" y="{}" text-anchor="middle">Recall</text>"#, w / 2.0, h - 12.0)?;
    writeln!(out, r#"<text x="14" y="{}" text-anchor="middle" transform="rotate(-90 14 {})">Precision</text>"#, h / 2.0, h / 2.0)?;
    for (k, (name, curve)) in curves.iter().enumerate() {
        let color = SVG_COLORS[k % SVG_COLORS.len()];
        let mut points = format!("{:.2},{:.2}", sx(0.0), sy(curve.first().map_or(1.0, |p| p.precision)));
        for p in curve.iter() {
            points.push_str(&format!(" {:.2},{:.2}", sx(p.recall), sy(p.precision)));
        }
        writeln!(out, r#"<polyline points="{points}" stroke="{color}" fill="none" stroke-width="1.5"/>"#)?;
        let ly = m + 16.0 * k as f64;
        writeln!(out, r#"<text x="{}" y="{}" fill="{color}" text-anchor="end">{}</text>"#, w - m, ly, xml_escape(name))?;
    }
    writeln!(out, "</svg>")?;
    Ok(())
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector3;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn at(x: f64) -> Pose {
        Pose::new(nalgebra::Matrix3::identity(), Vector3::new(x, 0.0, 0.0), 0.0).unwrap()
    }

    fn cfg() -> LabelConfig {
        LabelConfig { d: 10.0, exclusion: 0, planar: false }
    }

    #[test]
    fn label_thresholds() {
        assert_eq!(cfg().label(5, 0, &at(4.0), &at(0.0)).label, Label::Positive);
        assert_eq!(cfg().label(5, 0, &at(30.0), &at(0.0)).label, Label::Negative);
        assert_eq!(cfg().label(5, 0, &at(10.0), &at(0.0)).label, Label::Ignored);
        let c = LabelConfig { exclusion: 5, ..cfg() };
        assert_eq!(c.label(5, 0, &at(1.0), &at(0.0)).label, Label::Ignored);
    }

    #[test]
    fn planar_distance_ignores_depth() {
        let a = Pose::new(nalgebra::Matrix3::identity(), Vector3::new(0.0, 0.0, 30.0), 0.0).unwrap();
        let planar = LabelConfig { planar: true, ..cfg() };
        assert_eq!(planar.label(3, 1, &a, &at(0.0)).label, Label::Positive);
        assert_eq!(cfg().label(3, 1, &a, &at(0.0)).label, Label::Negative);
    }

    #[test]
    fn label_pairs_enumerates_lower_triangle() {
        let poses: Vec<_> = (0..4).map(|k| at(k as f64)).collect();
        let labels = label_pairs(&poses, &cfg());
        let idx: Vec<_> = labels.iter().map(|l| (l.i, l.j)).collect();
        assert_eq!(idx, vec![(1, 0), (2, 0), (2, 1), (3, 0), (3, 1), (3, 2)]);
    }

    fn ranked_curve(ranked: &[(f64, bool)]) -> Vec<PrPoint> {
        curve_from_ranked(ranked.to_vec()).unwrap()
    }

    #[test]
    fn perfect_ranking() {
        let curve = ranked_curve(&[(0.9, true), (0.8, true), (0.2, false), (0.1, false)]);
        assert!(curve.iter().any(|p| p.precision == 1.0 && p.recall == 1.0));
        assert_eq!(average_precision(&curve).unwrap(), 1.0);
    }

    #[test]
    fn all_equal_scores() {
        let curve = ranked_curve(&[(0.5, true), (0.5, false), (0.5, false), (0.5, true), (0.5, false)]);
        assert_eq!(curve.len(), 1);
        assert_eq!(curve[0].precision, 0.4);
        assert_eq!(curve[0].recall, 1.0);
    }

    #[test]
    fn hand_curve_four_positives_six_negatives() {
        // ranking: P N P N N P N P N N
        let labels = [true, false, true, false, false, true, false, true, false, false];
        let ranked: Vec<_> = labels.iter().enumerate().map(|(k, &l)| (1.0 - k as f64 / 10.0, l)).collect();
        let curve = ranked_curve(&ranked);
        let tp = [1, 1, 2, 2, 2, 3, 3, 4, 4, 4];
        for (k, p) in curve.iter().enumerate() {
            assert_eq!(p.tp, tp[k]);
            assert_eq!(p.fp, k + 1 - tp[k]);
            assert_eq!(p.fn_, 4 - tp[k]);
            assert_eq!(p.precision, tp[k] as f64 / (k + 1) as f64);
            assert_eq!(p.recall, tp[k] as f64 / 4.0);
        }
        let ap = average_precision(&curve).unwrap();
        let hand = (1.0 + 2.0 / 3.0 + 3.0 / 6.0 + 4.0 / 8.0) / 4.0;
        assert!((ap - hand).abs() < 1e-15);
    }

    #[test]
    fn reversed_ranking_five_and_five() {
        let ranked: Vec<_> = (0..10).map(|k| (10.0 - k as f64, k >= 5)).collect();
        let ap = average_precision(&ranked_curve(&ranked)).unwrap();
        let hand = (1.0 / 6.0 + 2.0 / 7.0 + 3.0 / 8.0 + 4.0 / 9.0 + 5.0 / 10.0) / 5.0;
        assert!((ap - hand).abs() < 1e-15);
        assert!((ap - 0.354365).abs() < 1e-6);
    }

    #[test]
    fn no_positives_is_an_error() {
        assert!(matches!(curve_from_ranked(vec![(0.3, false)]), Err(Error::NoPositives)));
    }

    #[test]
    fn unlabeled_pair_is_an_error() {
        let scores = [ScoredPair { i: 9, j: 1, score: 0.5 }];
        assert!(matches!(pr_curve(&scores, &[]), Err(Error::UnlabeledPair { i: 9, j: 1 })));
    }

    #[test]
    fn pr_curve_drops_ignored_pairs() {
        let labels = [
            GroundTruthLabel { i: 5, j: 0, label: Label::Positive, pose_distance: 1.0 },
            GroundTruthLabel { i: 6, j: 0, label: Label::Ignored, pose_distance: 10.0 },
            GroundTruthLabel { i: 7, j: 0, label: Label::Negative, pose_distance: 40.0 },
        ];
        let scores = [
            ScoredPair { i: 5, j: 0, score: 0.2 },
            ScoredPair { i: 6, j: 0, score: 0.9 },
            ScoredPair { i: 7, j: 0, score: 0.1 },
        ];
        let curve = pr_curve(&scores, &labels).unwrap();
        assert_eq!(average_precision(&curve).unwrap(), 1.0);
        let s = Summary::from_curve(&curve).unwrap();
        assert_eq!((s.pairs, s.positives), (2, 1));
    }

    // Oracle: AP as the mean of precision at each positive, with tied scores
    // treated as one block.
    fn brute_force_ap(ranked: &[(f64, bool)]) -> f64 {
        let positives = ranked.iter().filter(|r| r.1).count() as f64;
        let mut thresholds: Vec<f64> = ranked.iter().map(|r| r.0).collect();
        thresholds.sort_by(|a, b| b.total_cmp(a));
        thresholds.dedup();
        let mut ap = 0.0;
        let mut prev_tp = 0.0;
        for t in thresholds {
            let tp = ranked.iter().filter(|r| r.1 && r.0 >= t).count() as f64;
            let all = ranked.iter().filter(|r| r.0 >= t).count() as f64;
            ap += (tp - prev_tp) / positives * (tp / all);
            prev_tp = tp;
        }
        ap
    }

    #[test]
    fn random_scores_match_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let ranked: Vec<_> = (0..60)
                .map(|_| ((rng.random_range(0..30) as f64) / 30.0, rng.random_bool(0.3)))
                .chain(std::iter::once((0.5, true)))
                .collect();
            let ap = average_precision(&ranked_curve(&ranked)).unwrap();
            assert!((ap - brute_force_ap(&ranked)).abs() < 1e-12);
        }
    }

    #[test]
    fn csv_and_svg() {
        let curve = ranked_curve(&[(0.9, true), (0.5, false)]);
        let mut buf = Vec::new();
        write_pr_csv(&mut buf, &curve).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "gamma,precision,recall,tp,fp,fn\n0.9,1,1,1,0,0\n0.5,0.5,1,1,1,0\n");
        let mut svg = Vec::new();
        write_pr_svg(&mut svg, &[("square", &curve)]).unwrap();
        let svg = String::from_utf8(svg).unwrap();
        assert!(svg.starts_with("<svg") && svg.contains("<polyline") && svg.trim_end().ends_with("</svg>"));
        let json = serde_json::to_string(&Summary::from_curve(&curve).unwrap()).unwrap();
        assert_eq!(json, r#"{"ap":1.0,"pairs":2,"positives":1}"#);
    }

    proptest! {
        #[test]
        fn curve_invariants(entries in prop::collection::vec((0u8..20, any::<bool>()), 1..80), seed in any::<u64>()) {
            let mut ranked: Vec<(f64, bool)> = entries.iter().map(|&(s, l)| (s as f64 / 20.0, l)).collect();
            ranked.push((0.3, true));
            let curve = ranked_curve(&ranked);
            let positives = ranked.iter().filter(|r| r.1).count();
            let mut last_recall = 0.0;
            for p in &curve {
                prop_assert!((0.0..=1.0).contains(&p.precision) && (0.0..=1.0).contains(&p.recall));
                prop_assert_eq!(p.tp + p.fn_, positives);
                prop_assert!(p.recall >= last_recall);
                last_recall = p.recall;
            }
            let ap = average_precision(&curve).unwrap();
            prop_assert!((0.0..=1.0 + 1e-12).contains(&ap));

            // strictly monotone transform of the scores
            let warped: Vec<_> = ranked.iter().map(|&(s, l)| ((3.0 * s).exp() - 7.0, l)).collect();
            prop_assert_eq!(average_precision(&ranked_curve(&warped)).unwrap(), ap);

            // order of the input pairs
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut shuffled = ranked.clone();
            rand::seq::SliceRandom::shuffle(&mut shuffled[..], &mut rng);
            prop_assert_eq!(ranked_curve(&shuffled), curve);
        }
    }
}
