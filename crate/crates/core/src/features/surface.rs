//! Local surface estimates: plane-fit normals and quadric-fit curvature.

use nalgebra::{DMatrix, DVector, Matrix2, Matrix3, SymmetricEigen, Vector2, Vector3};
use rayon::prelude::*;

use super::knn::NeighborIndex;

/// Condition number of the quadric normal equations above which the fit is
/// rejected.
pub const MAX_QUADRIC_CONDITION: f64 = 1e12;

/// Unit normals, one per point. Points whose neighbourhood does not span a
/// plane get `(0, 0, 1)` and are flagged.
#[derive(Debug, Clone, PartialEq)]
pub struct Normals {
    pub vectors: Vec<Vector3<f64>>,
    pub flagged: Vec<bool>,
}

impl Normals {
    pub fn flagged_count(&self) -> usize {
        self.flagged.iter().filter(|f| **f).count()
    }
}

/// Flips `n` so that `n_z >= 0`, falling back to `n_y` then `n_x` on ties.
pub fn canonicalize(n: Vector3<f64>) -> Vector3<f64> {
    let flip = if n.z != 0.0 {
        n.z < 0.0
    } else if n.y != 0.0 {
        n.y < 0.0
    } else {
        n.x < 0.0
    };
    if flip {
        -n
    } else {
        n
    }
}

fn neighborhood_covariance(points: &[Vector3<f64>], center: usize, nbrs: &[u32]) -> Matrix3<f64> {
    let count = (nbrs.len() + 1) as f64;
    let mean = nbrs
        .iter()
        .fold(points[center], |acc, &j| acc + points[j as usize])
        / count;
    let mut cov = Matrix3::zeros();
    for p in std::iter::once(&points[center]).chain(nbrs.iter().map(|&j| &points[j as usize])) {
        let r = p - mean;
        cov += r * r.transpose();
    }
    cov / count
}

fn plane_normal(cov: &Matrix3<f64>) -> Option<Vector3<f64>> {
    let eig = SymmetricEigen::new(*cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let (lo, mid, hi) = (
        eig.eigenvalues[order[0]],
        eig.eigenvalues[order[1]],
        eig.eigenvalues[order[2]],
    );
    // coincident points, or all neighbours on one line
    if !(hi > 0.0) || mid <= 1e-12 * hi || !lo.is_finite() {
        return None;
    }
    Some(canonicalize(eig.eigenvectors.column(order[0]).normalize()))
}

/// Smallest-eigenvalue eigenvector of each point's neighbourhood covariance
/// (the point itself plus its neighbours).
pub fn estimate_normals(points: &[Vector3<f64>], nbrs: &NeighborIndex) -> Normals {
    let (vectors, flagged) = (0..points.len())
        .into_par_iter()
        .map(|i| {
            let list = nbrs.neighbors(i);
            if list.len() < 2 {
                return (Vector3::z(), true);
            }
            match plane_normal(&neighborhood_covariance(points, i, list)) {
                Some(n) => (n, false),
                None => (Vector3::z(), true),
            }
        })
        .unzip();
    Normals { vectors, flagged }
}

/// Coefficients of `w = a u² + b v² + c u v + d u + e v + f` in a local frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quadric {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
    pub e: f64,
    pub f: f64,
}

impl Quadric {
    /// Curvature of the fitted patch,
    /// `((1 + d²) a + (1 + e²) b - 4 a b c) / (1 + d² + e²)^(3/2)`.
    pub fn curvature(&self) -> f64 {
        let Self { a, b, c, d, e, .. } = *self;
        ((1.0 + d * d) * a + (1.0 + e * e) * b - 4.0 * a * b * c) / (1.0 + e * e + d * d).powf(1.5)
    }
}

/// In-plane axis for the local fitting frame: the dominant direction of the
/// neighbourhood projected onto the tangent plane. Reversing it (together
/// with the second axis) leaves the fitted curvature unchanged, so no sign
/// convention is needed.
fn tangent_axis(offsets: &[Vector3<f64>], normal: &Vector3<f64>) -> Vector3<f64> {
    let helper = if normal.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
    let t1 = normal.cross(&helper).normalize();
    let t2 = normal.cross(&t1);
    let mut cov = Matrix2::zeros();
    for r in offsets {
        let q = Vector2::new(r.dot(&t1), r.dot(&t2));
        cov += q * q.transpose();
    }
    let eig = SymmetricEigen::new(cov);
    let major = if eig.eigenvalues[0] >= eig.eigenvalues[1] { 0 } else { 1 };
    let v = eig.eigenvectors.column(major);
    (t1 * v[0] + t2 * v[1]).normalize()
}

/// Least-squares quadric through `p` and its neighbours, expressed in a frame
/// centred on `p` with `normal` as the height axis. Returns `None` when the
/// system is singular or worse conditioned than [`MAX_QUADRIC_CONDITION`].
pub fn fit_quadric(
    points: &[Vector3<f64>],
    center: usize,
    nbrs: &[u32],
    normal: &Vector3<f64>,
) -> Option<Quadric> {
    if nbrs.len() < 6 {
        return None;
    }
    let p = points[center];
    let offsets: Vec<Vector3<f64>> = nbrs.iter().map(|&j| points[j as usize] - p).collect();
    let e1 = tangent_axis(&offsets, normal);
    let e2 = normal.cross(&e1);

    let local: Vec<Vector3<f64>> = std::iter::once(Vector3::zeros())
        .chain(offsets.iter().map(|r| Vector3::new(r.dot(&e1), r.dot(&e2), r.dot(normal))))
        .collect();
    // Work in units of the neighbourhood radius so conditioning does not
    // depend on the cloud's scale.
    let scale = (local.iter().map(|q| q.x * q.x + q.y * q.y).sum::<f64>() / local.len() as f64).sqrt();
    if !(scale > 0.0) {
        return None;
    }

    let rows = local.len();
    let mut a = DMatrix::zeros(rows, 6);
    let mut w = DVector::zeros(rows);
    for (r, q) in local.iter().enumerate() {
        let (u, v) = (q.x / scale, q.y / scale);
        a[(r, 0)] = u * u;
        a[(r, 1)] = v * v;
        a[(r, 2)] = u * v;
        a[(r, 3)] = u;
        a[(r, 4)] = v;
        a[(r, 5)] = 1.0;
        w[r] = q.z / scale;
    }
    let svd = a.svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if !(smin > 0.0) || (smax / smin).powi(2) > MAX_QUADRIC_CONDITION {
        return None;
    }
    let x = svd.solve(&w, 0.0).ok()?;
    Some(Quadric {
        a: x[0] / scale,
        b: x[1] / scale,
        c: x[2] / scale,
        d: x[3],
        e: x[4],
        f: x[5] * scale,
    })
}

/// Per-point curvature values and which points fell back to zero.
#[derive(Debug, Clone, PartialEq)]
pub struct Curvature {
    pub values: Vec<f64>,
    pub flagged: Vec<bool>,
}

impl Curvature {
    pub fn flagged_count(&self) -> usize {
        self.flagged.iter().filter(|f| **f).count()
    }
}

/// Quadric-fit curvature at every point. Points with a flagged normal, fewer
/// than six neighbours or an ill-conditioned fit get zero and are flagged.
pub fn curvature_per_point(points: &[Vector3<f64>], nbrs: &NeighborIndex, normals: &Normals) -> Curvature {
    let (values, flagged) = (0..points.len())
        .into_par_iter()
        .map(|i| {
            if normals.flagged[i] {
                return (0.0, true);
            }
            match fit_quadric(points, i, nbrs.neighbors(i), &normals.vectors[i]) {
                Some(q) if q.curvature().is_finite() => (q.curvature(), false),
                _ => (0.0, true),
            }
        })
        .unzip();
    Curvature { values, flagged }
}
