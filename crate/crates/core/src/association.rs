//! Exact nearest-neighbour search and putative correspondence generation.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::error::{Error, Result};
use crate::geometry::Point3;
use crate::radar_model::RadarScan;

/// Static 3D k-d tree with median splits.
///
/// Queries are exact. Among equidistant candidates the lowest point index
/// wins, so results are identical to a linear scan that keeps the first
/// minimum.
#[derive(Debug, Clone)]
pub struct KdTree {
    points: Vec<Point3>,
    /// Point indices laid out so that each subtree occupies a contiguous
    /// range with its splitting point at the range midpoint.
    order: Vec<usize>,
    /// Split axis of the node stored at each position of `order`.
    axes: Vec<u8>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Candidate {
    dist_sq: f64,
    index: usize,
}

impl Candidate {
    fn better_than(&self, other: &Candidate) -> bool {
        self.dist_sq < other.dist_sq || (self.dist_sq == other.dist_sq && self.index < other.index)
    }
}

impl Eq for Candidate {}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.dist_sq
            .total_cmp(&other.dist_sq)
            .then(self.index.cmp(&other.index))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl KdTree {
    pub fn build(points: &[Point3]) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyInput("k-d tree needs at least one point"));
        }
        let mut tree = KdTree {
            points: points.to_vec(),
            order: (0..points.len()).collect(),
            axes: vec![0; points.len()],
        };
        tree.build_range(0, points.len());
        Ok(tree)
    }

    fn build_range(&mut self, lo: usize, hi: usize) {
        if hi - lo <= 1 {
            return;
        }
        let axis = self.widest_axis(lo, hi);
        let mid = lo + (hi - lo) / 2;
        let points = &self.points;
        self.order[lo..hi].select_nth_unstable_by(mid - lo, |&a, &b| {
            points[a][axis]
                .total_cmp(&points[b][axis])
                .then(a.cmp(&b))
        });
        self.axes[mid] = axis as u8;
        self.build_range(lo, mid);
        self.build_range(mid + 1, hi);
    }

    fn widest_axis(&self, lo: usize, hi: usize) -> usize {
        let mut min = [f64::INFINITY; 3];
        let mut max = [f64::NEG_INFINITY; 3];
        for &i in &self.order[lo..hi] {
            for a in 0..3 {
                min[a] = min[a].min(self.points[i][a]);
                max[a] = max[a].max(self.points[i][a]);
            }
        }
        (0..3)
            .max_by(|&a, &b| (max[a] - min[a]).total_cmp(&(max[b] - min[b])))
            .unwrap_or(0)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Point3] {
        &self.points
    }

    /// Index of and Euclidean distance to the closest point.
    pub fn nearest(&self, query: &Point3) -> (usize, f64) {
        let mut best = Candidate {
            dist_sq: f64::INFINITY,
            index: usize::MAX,
        };
        self.nearest_in(query, 0, self.points.len(), &mut best);
        (best.index, best.dist_sq.sqrt())
    }

    fn nearest_in(&self, query: &Point3, lo: usize, hi: usize, best: &mut Candidate) {
        if lo >= hi {
            return;
        }
        let mid = lo + (hi - lo) / 2;
        let index = self.order[mid];
        let candidate = Candidate {
            dist_sq: (self.points[index] - query).norm_squared(),
            index,
        };
        if candidate.better_than(best) {
            *best = candidate;
        }
        if hi - lo == 1 {
            return;
        }
        let axis = self.axes[mid] as usize;
        let diff = query[axis] - self.points[index][axis];
        let (near, far) = if diff < 0.0 {
            ((lo, mid), (mid + 1, hi))
        } else {
            ((mid + 1, hi), (lo, mid))
        };
        self.nearest_in(query, near.0, near.1, best);
        // `<=` keeps equidistant points with a lower index reachable.
        if diff * diff <= best.dist_sq {
            self.nearest_in(query, far.0, far.1, best);
        }
    }

    /// The `k` closest points as `(index, distance)`, nearest first.
    pub fn nearest_k(&self, query: &Point3, k: usize) -> Vec<(usize, f64)> {
        if k == 0 {
            return Vec::new();
        }
        let mut heap = BinaryHeap::with_capacity(k + 1);
        self.nearest_k_in(query, k, 0, self.points.len(), &mut heap);
        let mut found = heap.into_sorted_vec();
        found.truncate(k);
        found
            .into_iter()
            .map(|c| (c.index, c.dist_sq.sqrt()))
            .collect()
    }

    fn nearest_k_in(&self, query: &Point3, k: usize, lo: usize, hi: usize, heap: &mut BinaryHeap<Candidate>) {
        if lo >= hi {
            return;
        }
        let mid = lo + (hi - lo) / 2;
        let index = self.order[mid];
        let candidate = Candidate {
            dist_sq: (self.points[index] - query).norm_squared(),
            index,
        };
        if heap.len() < k {
            heap.push(candidate);
        } else if heap.peek().is_some_and(|worst| candidate < *worst) {
            heap.pop();
            heap.push(candidate);
        }
        if hi - lo == 1 {
            return;
        }
        let axis = self.axes[mid] as usize;
        let diff = query[axis] - self.points[index][axis];
        let (near, far) = if diff < 0.0 {
            ((lo, mid), (mid + 1, hi))
        } else {
            ((mid + 1, hi), (lo, mid))
        };
        self.nearest_k_in(query, k, near.0, near.1, heap);
        let bound = if heap.len() < k {
            f64::INFINITY
        } else {
            heap.peek().map_or(f64::INFINITY, |c| c.dist_sq)
        };
        if diff * diff <= bound {
            self.nearest_k_in(query, k, far.0, far.1, heap);
        }
    }
}

/// Free-function form of [`KdTree::build`].
pub fn build_index(points: &[Point3]) -> Result<KdTree> {
    KdTree::build(points)
}

/// A putative source → target pairing.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Association {
    pub source_index: usize,
    pub target_index: usize,
    /// Euclidean distance at generation time, meters.
    pub distance: f64,
}

/// Associations over a particular scan pair. At most one entry per source
/// index; target indices may repeat.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AssociationSet {
    associations: Vec<Association>,
    source_len: usize,
    target_len: usize,
}

impl AssociationSet {
    /// Validates indices against the scan sizes.
    pub fn new(associations: Vec<Association>, source_len: usize, target_len: usize) -> Result<Self> {
        for a in &associations {
            if a.source_index >= source_len || a.target_index >= target_len {
                return Err(Error::InvariantViolation(format!(
                    "association ({}, {}) out of range for scans of {source_len} and {target_len} points",
                    a.source_index, a.target_index
                )));
            }
            if !(a.distance >= 0.0) {
                return Err(Error::InvariantViolation(format!(
                    "negative association distance {}",
                    a.distance
                )));
            }
        }
        Ok(Self {
            associations,
            source_len,
            target_len,
        })
    }

    pub fn empty(source_len: usize, target_len: usize) -> Self {
        Self {
            associations: Vec::new(),
            source_len,
            target_len,
        }
    }

    pub fn len(&self) -> usize {
        self.associations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.associations.is_empty()
    }

    pub fn as_slice(&self) -> &[Association] {
        &self.associations
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Association> {
        self.associations.iter()
    }

    pub fn source_len(&self) -> usize {
        self.source_len
    }

    pub fn target_len(&self) -> usize {
        self.target_len
    }

    /// Keeps the entries at `positions` (ascending), preserving order.
    pub fn subset(&self, positions: &[usize]) -> AssociationSet {
        AssociationSet {
            associations: positions.iter().map(|&i| self.associations[i]).collect(),
            source_len: self.source_len,
            target_len: self.target_len,
        }
    }
}

impl<'a> IntoIterator for &'a AssociationSet {
    type Item = &'a Association;
    type IntoIter = std::slice::Iter<'a, Association>;

    fn into_iter(self) -> Self::IntoIter {
        self.associations.iter()
    }
}

/// For every source point, its nearest target point if it lies within
/// `max_distance` meters.
pub fn putative_correspondences(source: &RadarScan, target: &RadarScan, max_distance: f64) -> AssociationSet {
    match KdTree::build(target.points()) {
        Ok(index) => associate_with_index(source.points(), &index, max_distance),
        Err(_) => AssociationSet::empty(source.len(), 0),
    }
}

/// [`putative_correspondences`] against a prebuilt target index.
pub fn associate_with_index(source: &[Point3], target: &KdTree, max_distance: f64) -> AssociationSet {
    let associations = source
        .iter()
        .enumerate()
        .filter_map(|(i, p)| {
            let (j, distance) = target.nearest(p);
            (distance <= max_distance).then_some(Association {
                source_index: i,
                target_index: j,
                distance,
            })
        })
        .collect();
    AssociationSet {
        associations,
        source_len: source.len(),
        target_len: target.len(),
    }
}
