//! Rotation-invariant per-point feature maps.
//!
//! For every point we gather three neighbourhood quantities over its `M`
//! nearest neighbours: distances to them (geometry), folded angles between
//! its normal and theirs (normal), and their quadric-fit curvatures
//! (curvature). Each row is then reduced to a mean and a population
//! variance, giving six maps with one value per point.

pub mod knn;
pub mod surface;

use std::io::Write;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::Result;
pub use knn::{knn, NeighborIndex};
pub use surface::{curvature_per_point, estimate_normals, Curvature, Normals};

pub const DEFAULT_NEIGHBORS: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuantityKind {
    Geometry,
    Normal,
    Curvature,
}

/// `rows x cols` values, one row per point, one column per neighbour (in
/// neighbour order).
#[derive(Debug, Clone, PartialEq)]
pub struct QuantityMatrix {
    pub kind: QuantityKind,
    cols: usize,
    values: Vec<f64>,
}

impl QuantityMatrix {
    pub fn new(kind: QuantityKind, cols: usize, values: Vec<f64>) -> Self {
        assert!(cols == 0 || values.len().is_multiple_of(cols), "values do not fill whole rows");
        Self { kind, cols, values }
    }

    pub fn rows(&self) -> usize {
        self.values.len().checked_div(self.cols).unwrap_or(0)
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }
}

/// Distances from each point to its neighbours.
pub fn geometry_quantity(points: &[Vector3<f64>], nbrs: &NeighborIndex) -> QuantityMatrix {
    let values = (0..nbrs.len())
        .flat_map(|i| {
            nbrs.neighbors(i)
                .iter()
                .map(move |&j| knn::dist2(&points[i], &points[j as usize]).sqrt())
        })
        .collect();
    QuantityMatrix::new(QuantityKind::Geometry, nbrs.k(), values)
}

/// Angle between two normals, folded into `[0, pi/2]` so the sign of either
/// normal does not matter.
pub fn normal_angle(a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    let cos = (a.dot(b) / (a.norm() * b.norm())).clamp(-1.0, 1.0);
    let theta = cos.acos();
    theta.min(std::f64::consts::PI - theta)
}

pub fn normal_quantity(normals: &[Vector3<f64>], nbrs: &NeighborIndex) -> QuantityMatrix {
    let values = (0..nbrs.len())
        .flat_map(|i| {
            nbrs.neighbors(i)
                .iter()
                .map(move |&j| normal_angle(&normals[i], &normals[j as usize]))
        })
        .collect();
    QuantityMatrix::new(QuantityKind::Normal, nbrs.k(), values)
}

/// Row `p` holds the curvature of each of `p`'s neighbours.
pub fn curvature_quantity(rho: &[f64], nbrs: &NeighborIndex) -> QuantityMatrix {
    let values = (0..nbrs.len())
        .flat_map(|i| nbrs.neighbors(i).iter().map(|&j| rho[j as usize]))
        .collect();
    QuantityMatrix::new(QuantityKind::Curvature, nbrs.k(), values)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FeatureKind {
    GeometryMean,
    GeometryVariance,
    NormalMean,
    NormalVariance,
    CurvatureMean,
    CurvatureVariance,
}

impl FeatureKind {
    pub const ALL: [FeatureKind; 6] = [
        FeatureKind::GeometryMean,
        FeatureKind::GeometryVariance,
        FeatureKind::NormalMean,
        FeatureKind::NormalVariance,
        FeatureKind::CurvatureMean,
        FeatureKind::CurvatureVariance,
    ];

    pub fn column_name(self) -> &'static str {
        match self {
            Self::GeometryMean => "g_mean",
            Self::GeometryVariance => "g_var",
            Self::NormalMean => "n_mean",
            Self::NormalVariance => "n_var",
            Self::CurvatureMean => "c_mean",
            Self::CurvatureVariance => "c_var",
        }
    }
}

/// Counts of points whose estimates fell back to defaults.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureDiagnostics {
    pub flagged_normals: usize,
    pub flagged_curvatures: usize,
    /// The cloud had at most `M` points, so neighbour lists were shorter.
    pub saturated_neighbors: bool,
}

/// The six per-point feature maps, indexed by [`FeatureKind`].
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    maps: [Vec<f64>; 6],
    pub diagnostics: FeatureDiagnostics,
}

impl FeatureSet {
    pub fn from_maps(maps: [Vec<f64>; 6]) -> Self {
        assert!(maps.iter().all(|m| m.len() == maps[0].len()), "feature maps differ in length");
        Self {
            maps,
            diagnostics: FeatureDiagnostics::default(),
        }
    }

    pub fn len(&self) -> usize {
        self.maps[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps[0].is_empty()
    }

    pub fn map(&self, kind: FeatureKind) -> &[f64] {
        &self.maps[kind as usize]
    }

    pub fn maps(&self) -> &[Vec<f64>; 6] {
        &self.maps
    }

    /// A copy restricted to the given point indices, in that order.
    pub fn select(&self, indices: &[usize]) -> FeatureSet {
        let maps = std::array::from_fn(|k| indices.iter().map(|&i| self.maps[k][i]).collect());
        FeatureSet {
            maps,
            diagnostics: self.diagnostics,
        }
    }
}

fn mean_and_variance(row: &[f64]) -> (f64, f64) {
    if row.is_empty() {
        return (0.0, 0.0);
    }
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var)
}

/// Row-wise mean and population variance of each quantity.
pub fn quantities_to_feature_set(
    geometry: &QuantityMatrix,
    normal: &QuantityMatrix,
    curvature: &QuantityMatrix,
) -> FeatureSet {
    let rows = geometry.rows();
    assert!(
        normal.rows() == rows && curvature.rows() == rows,
        "quantity matrices disagree on point count"
    );
    let mut maps: [Vec<f64>; 6] = Default::default();
    for (k, q) in [geometry, normal, curvature].into_iter().enumerate() {
        let (means, vars): (Vec<f64>, Vec<f64>) = (0..rows).map(|i| mean_and_variance(q.row(i))).unzip();
        maps[2 * k] = means;
        maps[2 * k + 1] = vars;
    }
    FeatureSet::from_maps(maps)
}

/// kNN, normals and curvature, then the six feature maps.
pub fn compute_feature_set(points: &[Vector3<f64>], m: usize) -> Result<FeatureSet> {
    let nbrs = knn(points, m)?;
    let normals = estimate_normals(points, &nbrs);
    let curvature = curvature_per_point(points, &nbrs, &normals);
    let g = geometry_quantity(points, &nbrs);
    let n = normal_quantity(&normals.vectors, &nbrs);
    let c = curvature_quantity(&curvature.values, &nbrs);
    let mut features = quantities_to_feature_set(&g, &n, &c);
    features.diagnostics = FeatureDiagnostics {
        flagged_normals: normals.flagged_count(),
        flagged_curvatures: curvature.flagged_count(),
        saturated_neighbors: nbrs.degenerate,
    };
    Ok(features)
}

/// Debug dump: `x,y,z,g_mean,g_var,n_mean,n_var,c_mean,c_var`.
pub fn write_feature_csv<W: Write>(mut out: W, points: &[Vector3<f64>], features: &FeatureSet) -> Result<()> {
    let header: Vec<&str> = ["x", "y", "z"]
        .into_iter()
        .chain(FeatureKind::ALL.iter().map(|k| k.column_name()))
        .collect();
    writeln!(out, "{}", header.join(","))?;
    for (i, p) in points.iter().enumerate() {
        write!(out, "{},{},{}", p.x, p.y, p.z)?;
        for map in features.maps() {
            write!(out, ",{}", map[i])?;
        }
        writeln!(out)?;
    }
    Ok(())
}
