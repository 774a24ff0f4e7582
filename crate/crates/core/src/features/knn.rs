//! Exact k-nearest-neighbour search over a static kd-tree.
//!
//! Neighbour lists are ordered by `(squared distance, index)`, so equal
//! distances always resolve to the lower point index regardless of how the
//! tree happened to be split.

use std::collections::BinaryHeap;

use nalgebra::Vector3;
use rayon::prelude::*;

use crate::error::{Error, Result};

const LEAF_SIZE: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq)]
struct Candidate {
    dist2: f64,
    index: u32,
}

impl Eq for Candidate {}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.dist2
            .total_cmp(&other.dist2)
            .then(self.index.cmp(&other.index))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

#[derive(Debug, Clone)]
enum Node {
    Leaf {
        start: usize,
        end: usize,
    },
    Split {
        dim: usize,
        value: f64,
        left: usize,
        right: usize,
    },
}

#[derive(Debug, Clone)]
pub struct KdTree<'a> {
    points: &'a [Vector3<f64>],
    order: Vec<u32>,
    nodes: Vec<Node>,
}

#[inline]
pub(crate) fn dist2(a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    let d = a - b;
    d.x * d.x + d.y * d.y + d.z * d.z
}

impl<'a> KdTree<'a> {
    pub fn build(points: &'a [Vector3<f64>]) -> Self {
        let mut tree = Self {
            points,
            order: (0..points.len() as u32).collect(),
            nodes: Vec::new(),
        };
        if !points.is_empty() {
            tree.build_node(0, points.len());
        }
        tree
    }

    fn build_node(&mut self, start: usize, end: usize) -> usize {
        let id = self.nodes.len();
        if end - start <= LEAF_SIZE {
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        let slice = &mut self.order[start..end];
        let mut lo = Vector3::repeat(f64::INFINITY);
        let mut hi = Vector3::repeat(f64::NEG_INFINITY);
        for &i in slice.iter() {
            let p = &self.points[i as usize];
            lo = lo.inf(p);
            hi = hi.sup(p);
        }
        let dim = (hi - lo).imax();
        let mid = slice.len() / 2;
        let pts = self.points;
        slice.select_nth_unstable_by(mid, |a, b| {
            pts[*a as usize][dim].total_cmp(&pts[*b as usize][dim])
        });
        let value = pts[slice[mid] as usize][dim];
        self.nodes.push(Node::Leaf { start, end });
        let left = self.build_node(start, start + mid);
        let right = self.build_node(start + mid, end);
        self.nodes[id] = Node::Split {
            dim,
            value,
            left,
            right,
        };
        id
    }

    /// The `k` nearest points to `query`, excluding `skip`, nearest first.
    pub fn nearest(&self, query: &Vector3<f64>, k: usize, skip: Option<u32>) -> Vec<u32> {
        if k == 0 || self.nodes.is_empty() {
            return Vec::new();
        }
        let mut heap = BinaryHeap::with_capacity(k + 1);
        self.search(0, query, k, skip, &mut heap);
        let mut found = heap.into_vec();
        found.sort_unstable();
        found.into_iter().map(|c| c.index).collect()
    }

    fn search(
        &self,
        node: usize,
        query: &Vector3<f64>,
        k: usize,
        skip: Option<u32>,
        heap: &mut BinaryHeap<Candidate>,
    ) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    if Some(i) == skip {
                        continue;
                    }
                    let c = Candidate {
                        dist2: dist2(query, &self.points[i as usize]),
                        index: i,
                    };
                    if heap.len() < k {
                        heap.push(c);
                    } else if c < *heap.peek().expect("heap is full") {
                        heap.pop();
                        heap.push(c);
                    }
                }
            }
            Node::Split {
                dim,
                value,
                left,
                right,
            } => {
                let delta = query[dim] - value;
                let (near, far) = if delta < 0.0 { (left, right) } else { (right, left) };
                self.search(near, query, k, skip, heap);
                // `<=` keeps equal-distance candidates with lower indices reachable.
                if heap.len() < k || delta * delta <= heap.peek().expect("heap is full").dist2 {
                    self.search(far, query, k, skip, heap);
                }
            }
        }
    }
}

/// Per-point neighbour lists, `k` entries each, self excluded.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborIndex {
    k: usize,
    indices: Vec<u32>,
    /// True when the cloud had fewer than `requested + 1` points and every
    /// list holds all other points instead.
    pub degenerate: bool,
}

impl NeighborIndex {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.indices.len().checked_div(self.k).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn neighbors(&self, point: usize) -> &[u32] {
        &self.indices[point * self.k..(point + 1) * self.k]
    }

    pub fn from_lists(lists: Vec<Vec<u32>>, degenerate: bool) -> Self {
        let k = lists.first().map_or(0, Vec::len);
        assert!(lists.iter().all(|l| l.len() == k), "ragged neighbour lists");
        Self {
            k,
            indices: lists.concat(),
            degenerate,
        }
    }
}

/// Exact `m`-nearest neighbours of every point.
pub fn knn(points: &[Vector3<f64>], m: usize) -> Result<NeighborIndex> {
    if points.len() < 2 {
        return Err(Error::DegenerateCloud {
            points: points.len(),
        });
    }
    let k = m.min(points.len() - 1);
    let tree = KdTree::build(points);
    let lists: Vec<Vec<u32>> = points
        .par_iter()
        .enumerate()
        .map(|(i, p)| tree.nearest(p, k, Some(i as u32)))
        .collect();
    Ok(NeighborIndex {
        k,
        indices: lists.concat(),
        degenerate: k < m,
    })
}
