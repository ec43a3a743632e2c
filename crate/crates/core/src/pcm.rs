//! Pairwise consistency maximization over putative correspondences.
//!
//! For associations `a = (p, r)` and `b = (q, s)` a rigid motion preserves
//! distances, so `v = ‖p − q‖ − ‖r − s‖` vanishes for a correct pair. Two
//! scores test this:
//!
//! * raw: `|v|`, in meters, thresholded by `τ`;
//! * normalized: `v² / σ_v²`, unitless, thresholded by `α`, where
//!   `σ_v² = uᵀ(Σ_p + Σ_q)u + wᵀ(Σ_r + Σ_s)w` with `u`, `w` the unit vectors
//!   along `p − q` and `r − s` (first-order propagation of the per-point
//!   covariances onto the two distances).
//!
//! Associations become vertices of a consistency graph with an edge wherever
//! the score is strictly below the threshold and both endpoints differ on
//! each side. Inliers are the vertices of a large clique found by reversing a
//! smallest-last ordering and adding greedily.

use std::collections::BTreeSet;

use rayon::prelude::*;

use crate::association::{Association, AssociationSet};
use crate::error::{Error, Result};
use crate::geometry::Point3;
use crate::radar_model::RadarScan;

pub const DEFAULT_MIN_PAIR_SEPARATION: f64 = 1e-6;

/// Vertex-count limit of [`max_clique_exact`].
pub const EXACT_CLIQUE_LIMIT: usize = 64;

/// Graphs at least this large score their rows in parallel.
const PARALLEL_MIN_VERTICES: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ScoreKind {
    /// `|‖p−q‖ − ‖r−s‖|`, meters.
    Raw,
    /// `v² / σ_v²`, unitless.
    Normalized,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PcmConfig {
    pub score: ScoreKind,
    /// `τ` (meters) for [`ScoreKind::Raw`], `α` (unitless) for
    /// [`ScoreKind::Normalized`].
    pub threshold: f64,
    /// Pairs closer than this (meters) on either side never get an edge.
    pub min_pair_separation: f64,
}

impl PcmConfig {
    pub fn raw(tau: f64) -> Self {
        Self {
            score: ScoreKind::Raw,
            threshold: tau,
            min_pair_separation: DEFAULT_MIN_PAIR_SEPARATION,
        }
    }

    pub fn normalized(alpha: f64) -> Self {
        Self {
            score: ScoreKind::Normalized,
            threshold: alpha,
            min_pair_separation: DEFAULT_MIN_PAIR_SEPARATION,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0) {
            return Err(Error::Domain(format!(
                "PCM threshold must be positive, got {}",
                self.threshold
            )));
        }
        if !(self.min_pair_separation > 0.0) {
            return Err(Error::Domain(format!(
                "minimum pair separation must be positive, got {}",
                self.min_pair_separation
            )));
        }
        Ok(())
    }
}

struct PairGeometry<'a> {
    p: &'a Point3,
    q: &'a Point3,
    r: &'a Point3,
    s: &'a Point3,
}

impl<'a> PairGeometry<'a> {
    fn new(a: &Association, b: &Association, source: &'a RadarScan, target: &'a RadarScan) -> Self {
        let src = source.points();
        let tgt = target.points();
        Self {
            p: &src[a.source_index],
            q: &src[b.source_index],
            r: &tgt[a.target_index],
            s: &tgt[b.target_index],
        }
    }

    fn residual(&self) -> f64 {
        (self.p - self.q).norm() - (self.r - self.s).norm()
    }
}

pub fn score_raw(a: &Association, b: &Association, source: &RadarScan, target: &RadarScan) -> f64 {
    PairGeometry::new(a, b, source, target).residual().abs()
}

/// Propagated variance of the distance residual `v`.
pub fn sigma_v_squared(
    a: &Association,
    b: &Association,
    source: &RadarScan,
    target: &RadarScan,
    min_pair_separation: f64,
) -> Result<f64> {
    let g = PairGeometry::new(a, b, source, target);
    let src_cov = source.covariances();
    let tgt_cov = target.covariances();
    let d_src = g.p - g.q;
    let d_tgt = g.r - g.s;
    let n_src = d_src.norm_squared();
    let n_tgt = d_tgt.norm_squared();
    let min_sq = min_pair_separation * min_pair_separation;
    if n_src < min_sq || n_tgt < min_sq {
        return Err(Error::DegeneratePair {
            separation: n_src.min(n_tgt).sqrt(),
            min_separation: min_pair_separation,
        });
    }
    let sum_src = src_cov[a.source_index] + src_cov[b.source_index];
    let sum_tgt = tgt_cov[a.target_index] + tgt_cov[b.target_index];
    Ok(d_src.dot(&(sum_src * d_src)) / n_src + d_tgt.dot(&(sum_tgt * d_tgt)) / n_tgt)
}

/// `v² / σ_v²`. A zero propagated variance yields `+∞` unless `v = 0`.
pub fn score_normalized(
    a: &Association,
    b: &Association,
    source: &RadarScan,
    target: &RadarScan,
    min_pair_separation: f64,
) -> Result<f64> {
    let variance = sigma_v_squared(a, b, source, target, min_pair_separation)?;
    let v = PairGeometry::new(a, b, source, target).residual();
    if v == 0.0 {
        return Ok(0.0);
    }
    if variance <= 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(v * v / variance)
}

/// Undirected graph with one vertex per association.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConsistencyGraph {
    adjacency: Vec<Vec<usize>>,
    edge_count: usize,
    scored_pairs: usize,
}

impl ConsistencyGraph {
    /// Builds a graph from an explicit edge list. Self-loops and duplicate
    /// edges are ignored.
    pub fn from_edges(vertex_count: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let mut sets = vec![BTreeSet::new(); vertex_count];
        for &(u, v) in edges {
            if u >= vertex_count || v >= vertex_count {
                return Err(Error::InvariantViolation(format!(
                    "edge ({u}, {v}) out of range for {vertex_count} vertices"
                )));
            }
            if u != v {
                sets[u].insert(v);
                sets[v].insert(u);
            }
        }
        let adjacency: Vec<Vec<usize>> = sets.into_iter().map(|s| s.into_iter().collect()).collect();
        let edge_count = adjacency.iter().map(Vec::len).sum::<usize>() / 2;
        Ok(Self {
            adjacency,
            edge_count,
            scored_pairs: 0,
        })
    }

    pub fn vertex_count(&self) -> usize {
        self.adjacency.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edge_count
    }

    /// Number of pairwise scores evaluated while building the graph.
    pub fn scored_pairs(&self) -> usize {
        self.scored_pairs
    }

    /// Sorted neighbour list of `v`.
    pub fn neighbors(&self, v: usize) -> &[usize] {
        &self.adjacency[v]
    }

    pub fn degree(&self, v: usize) -> usize {
        self.adjacency[v].len()
    }

    pub fn are_adjacent(&self, u: usize, v: usize) -> bool {
        self.adjacency[u].binary_search(&v).is_ok()
    }

    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.adjacency
            .iter()
            .enumerate()
            .flat_map(|(u, nbrs)| nbrs.iter().filter(move |&&v| v > u).map(move |&v| (u, v)))
    }
}

fn pair_is_consistent(
    a: &Association,
    b: &Association,
    source: &RadarScan,
    target: &RadarScan,
    cfg: &PcmConfig,
) -> bool {
    if a.source_index == b.source_index || a.target_index == b.target_index {
        return false;
    }
    match cfg.score {
        ScoreKind::Raw => {
            let g = PairGeometry::new(a, b, source, target);
            let sep = cfg.min_pair_separation;
            (g.p - g.q).norm() >= sep
                && (g.r - g.s).norm() >= sep
                && score_raw(a, b, source, target) < cfg.threshold
        }
        ScoreKind::Normalized => {
            matches!(score_normalized(a, b, source, target, cfg.min_pair_separation), Ok(s) if s < cfg.threshold)
        }
    }
}

/// Scores all `n(n−1)/2` pairs and keeps those strictly below the threshold
/// whose source points and target points both differ.
pub fn build_consistency_graph(
    assoc: &AssociationSet,
    source: &RadarScan,
    target: &RadarScan,
    cfg: &PcmConfig,
) -> ConsistencyGraph {
    let list = assoc.as_slice();
    let n = list.len();
    let row = |i: usize| -> (Vec<usize>, usize) {
        let upper: Vec<usize> = ((i + 1)..n)
            .filter(|&j| pair_is_consistent(&list[i], &list[j], source, target, cfg))
            .collect();
        (upper, n - i - 1)
    };
    let rows: Vec<(Vec<usize>, usize)> = if n >= PARALLEL_MIN_VERTICES {
        (0..n).into_par_iter().map(row).collect()
    } else {
        (0..n).map(row).collect()
    };

    let mut adjacency = vec![Vec::new(); n];
    let mut scored_pairs = 0;
    let mut edge_count = 0;
    // Rows are visited in ascending order, so every list ends up sorted.
    for (i, (upper, scored)) in rows.into_iter().enumerate() {
        scored_pairs += scored;
        edge_count += upper.len();
        for j in upper {
            adjacency[i].push(j);
            adjacency[j].push(i);
        }
    }
    ConsistencyGraph {
        adjacency,
        edge_count,
        scored_pairs,
    }
}

/// Repeatedly removes a vertex of minimum residual degree (lowest index on
/// ties) and returns the removal order.
pub fn smallest_last_ordering(g: &ConsistencyGraph) -> Vec<usize> {
    let n = g.vertex_count();
    let mut degree: Vec<usize> = (0..n).map(|v| g.degree(v)).collect();
    let max_degree = degree.iter().copied().max().unwrap_or(0);
    let mut buckets = vec![BTreeSet::new(); max_degree + 1];
    for (v, &d) in degree.iter().enumerate() {
        buckets[d].insert(v);
    }
    let mut removed = vec![false; n];
    let mut order = Vec::with_capacity(n);
    let mut low = 0;
    while order.len() < n {
        while buckets[low].is_empty() {
            low += 1;
        }
        let v = buckets[low].pop_first().expect("non-empty bucket");
        removed[v] = true;
        order.push(v);
        for &u in g.neighbors(v) {
            if !removed[u] {
                buckets[degree[u]].remove(&u);
                degree[u] -= 1;
                buckets[degree[u]].insert(u);
            }
        }
        // A removal lowers neighbour degrees by at most one.
        low = low.saturating_sub(1);
    }
    order
}

/// A set of pairwise adjacent vertices, sorted ascending.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Clique(Vec<usize>);

impl Clique {
    pub fn new(mut vertices: Vec<usize>) -> Self {
        vertices.sort_unstable();
        vertices.dedup();
        Clique(vertices)
    }

    pub fn vertices(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_clique_of(&self, g: &ConsistencyGraph) -> bool {
        self.0.iter().enumerate().all(|(k, &u)| {
            u < g.vertex_count() && self.0[k + 1..].iter().all(|&v| g.are_adjacent(u, v))
        })
    }
}

/// Walks `order` back to front, adding each vertex adjacent to every vertex
/// already chosen.
pub fn greedy_clique(g: &ConsistencyGraph, order: &[usize]) -> Clique {
    debug_assert_eq!(order.len(), g.vertex_count(), "order must be a permutation");
    let mut members: Vec<usize> = Vec::new();
    for &v in order.iter().rev() {
        if members.iter().all(|&u| g.are_adjacent(u, v)) {
            members.push(v);
        }
    }
    let clique = Clique::new(members);
    debug_assert!(clique.is_clique_of(g));
    clique
}

/// Maximum clique by Bron–Kerbosch with Tomita pivoting and a size bound.
/// Intended as a test oracle; refuses graphs above [`EXACT_CLIQUE_LIMIT`].
pub fn max_clique_exact(g: &ConsistencyGraph) -> Result<Clique> {
    let n = g.vertex_count();
    if n > EXACT_CLIQUE_LIMIT {
        return Err(Error::TooLarge {
            vertices: n,
            limit: EXACT_CLIQUE_LIMIT,
        });
    }
    let adjacency: Vec<u64> = (0..n)
        .map(|v| g.neighbors(v).iter().fold(0u64, |m, &u| m | (1u64 << u)))
        .collect();
    let all = if n == 64 { u64::MAX } else { (1u64 << n) - 1 };
    let mut best = 0u64;
    expand(0, all, 0, &mut best, &adjacency);
    Ok(Clique::new(bits(best).collect()))
}

fn bits(mut set: u64) -> impl Iterator<Item = usize> {
    std::iter::from_fn(move || {
        (set != 0).then(|| {
            let v = set.trailing_zeros() as usize;
            set &= set - 1;
            v
        })
    })
}

fn expand(clique: u64, mut candidates: u64, mut excluded: u64, best: &mut u64, adjacency: &[u64]) {
    if candidates == 0 {
        if excluded == 0 && clique.count_ones() > best.count_ones() {
            *best = clique;
        }
        return;
    }
    if clique.count_ones() + candidates.count_ones() <= best.count_ones() {
        return;
    }
    let pivot = bits(candidates | excluded)
        .max_by_key(|&u| (candidates & adjacency[u]).count_ones())
        .expect("non-empty");
    for v in bits(candidates & !adjacency[pivot]) {
        let bit = 1u64 << v;
        expand(
            clique | bit,
            candidates & adjacency[v],
            excluded & adjacency[v],
            best,
            adjacency,
        );
        candidates &= !bit;
        excluded |= bit;
    }
}

/// Graph → smallest-last ordering → greedy clique; the associations at the
/// clique vertices in their original order.
pub fn select_inliers(
    assoc: &AssociationSet,
    source: &RadarScan,
    target: &RadarScan,
    cfg: &PcmConfig,
) -> AssociationSet {
    if assoc.is_empty() {
        return assoc.clone();
    }
    let graph = build_consistency_graph(assoc, source, target, cfg);
    let order = smallest_last_ordering(&graph);
    let clique = greedy_clique(&graph, &order);
    assoc.subset(clique.vertices())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{CovMatrix3, RigidTransform};
    use nalgebra::{Matrix3, Vector3};
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn assoc(i: usize, j: usize) -> Association {
        Association {
            source_index: i,
            target_index: j,
            distance: 0.0,
        }
    }

    fn points(v: &[(f64, f64, f64)]) -> Vec<Point3> {
        v.iter().map(|&(x, y, z)| Point3::new(x, y, z)).collect()
    }

    fn diag(a: f64, b: f64, c: f64) -> CovMatrix3 {
        Matrix3::from_diagonal(&Vector3::new(a, b, c))
    }

    fn random_spd(rng: &mut impl Rng) -> CovMatrix3 {
        let a = Matrix3::from_fn(|_, _| rng.random_range(-0.3..0.3));
        a * a.transpose() + Matrix3::identity() * 0.01
    }

    fn random_point(rng: &mut impl Rng, extent: f64) -> Point3 {
        Point3::new(
            rng.random_range(-extent..extent),
            rng.random_range(-extent..extent),
            rng.random_range(-extent..extent),
        )
    }

    /// Two-association fixture: source (p, q), target (r, s).
    fn pair_scans(pts: [Point3; 4], covs: [CovMatrix3; 4]) -> (RadarScan, RadarScan) {
        (
            RadarScan::new(vec![pts[0], pts[1]], vec![covs[0], covs[1]]).unwrap(),
            RadarScan::new(vec![pts[2], pts[3]], vec![covs[2], covs[3]]).unwrap(),
        )
    }

    /// The five-association toy: a1=(p1,r1) a2=(p1,r2) a3=(p2,r2) a4=(p2,r3)
    /// a5=(p3,r3) with collinear unit-spaced points on both sides.
    fn toy() -> (AssociationSet, RadarScan, RadarScan) {
        let pts = points(&[(0.0, 0.0, 0.0), (1.0, 0.0, 0.0), (2.0, 0.0, 0.0)]);
        let src = RadarScan::from_points(pts.clone()).unwrap();
        let tgt = RadarScan::from_points(pts).unwrap();
        let set = AssociationSet::new(
            vec![assoc(0, 0), assoc(0, 1), assoc(1, 1), assoc(1, 2), assoc(2, 2)],
            3,
            3,
        )
        .unwrap();
        (set, src, tgt)
    }

    fn toy_graph() -> ConsistencyGraph {
        let (set, src, tgt) = toy();
        build_consistency_graph(&set, &src, &tgt, &PcmConfig::raw(0.5))
    }

    #[test]
    fn raw_score_examples() {
        let o = Point3::origin();
        let (src, tgt) = pair_scans([o, Point3::new(1.0, 0.0, 0.0), o, Point3::new(1.0, 0.0, 0.0)], [CovMatrix3::zeros(); 4]);
        assert_eq!(score_raw(&assoc(0, 0), &assoc(1, 1), &src, &tgt), 0.0);
        let (src, tgt) = pair_scans([o, Point3::new(3.0, 0.0, 0.0), o, Point3::new(0.0, 5.0, 0.0)], [CovMatrix3::zeros(); 4]);
        assert_eq!(score_raw(&assoc(0, 0), &assoc(1, 1), &src, &tgt), 2.0);
    }

    #[test]
    fn sigma_v_isotropic_is_four_sigma_squared() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let pts = [0; 4].map(|_| random_point(&mut rng, 10.0));
            let (src, tgt) = pair_scans(pts, [Matrix3::identity() * 0.09; 4]);
            let v = sigma_v_squared(&assoc(0, 0), &assoc(1, 1), &src, &tgt, 1e-6).unwrap();
            assert!((v - 0.36).abs() < 1e-12);
        }
    }

    #[test]
    fn sigma_v_hand_example() {
        let (src, tgt) = pair_scans(
            [Point3::origin(), Point3::new(1.0, 0.0, 0.0), Point3::origin(), Point3::new(0.0, 1.0, 0.0)],
            [diag(0.01, 1.0, 1.0), diag(0.02, 1.0, 1.0), diag(1.0, 0.05, 1.0), diag(1.0, 0.05, 1.0)],
        );
        let v = sigma_v_squared(&assoc(0, 0), &assoc(1, 1), &src, &tgt, 1e-6).unwrap();
        assert!((v - 0.13).abs() < 1e-12);
        assert_eq!(score_normalized(&assoc(0, 0), &assoc(1, 1), &src, &tgt, 1e-6).unwrap(), 0.0);
    }

    /// Scalar re-evaluation of the normalized score, written out
    /// component-by-component.
    fn scalar_normalized_score(p: [f64; 3], q: [f64; 3], r: [f64; 3], s: [f64; 3], cov: [[[f64; 3]; 3]; 4]) -> f64 {
        let dist = |a: [f64; 3], b: [f64; 3]| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt();
        let quad = |d: [f64; 3], m1: [[f64; 3]; 3], m2: [[f64; 3]; 3]| {
            let mut acc = 0.0;
            for i in 0..3 {
                for j in 0..3 {
                    acc += d[i] * (m1[i][j] + m2[i][j]) * d[j];
                }
            }
            acc
        };
        let d1 = [p[0] - q[0], p[1] - q[1], p[2] - q[2]];
        let d2 = [r[0] - s[0], r[1] - s[1], r[2] - s[2]];
        let l1 = dist(p, q);
        let l2 = dist(r, s);
        let var = quad(d1, cov[0], cov[1]) / (l1 * l1) + quad(d2, cov[2], cov[3]) / (l2 * l2);
        (l1 - l2).powi(2) / var
    }

    fn to_rows(m: &CovMatrix3) -> [[f64; 3]; 3] {
        [[m[(0, 0)], m[(0, 1)], m[(0, 2)]], [m[(1, 0)], m[(1, 1)], m[(1, 2)]], [m[(2, 0)], m[(2, 1)], m[(2, 2)]]]
    }

    #[test]
    fn normalized_score_matches_scalar_oracle() {
        let covs = [diag(0.01, 1.0, 1.0), diag(0.02, 1.0, 1.0), diag(1.0, 0.05, 1.0), diag(1.0, 0.05, 1.0)];
        let (src, tgt) = pair_scans(
            [Point3::origin(), Point3::new(1.0, 0.0, 0.0), Point3::origin(), Point3::new(0.0, 1.36, 0.0)],
            covs,
        );
        let score = score_normalized(&assoc(0, 0), &assoc(1, 1), &src, &tgt, 1e-6).unwrap();
        let oracle = scalar_normalized_score(
            [0.0; 3],
            [1.0, 0.0, 0.0],
            [0.0; 3],
            [0.0, 1.36, 0.0],
            covs.map(|c| to_rows(&c)),
        );
        assert!((score - oracle).abs() < 1e-12, "{score} vs {oracle}");
        assert!((score - 0.36f64.powi(2) / 0.13).abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..100 {
            let pts = [0; 4].map(|_| random_point(&mut rng, 20.0));
            let covs = [0; 4].map(|_| random_spd(&mut rng));
            let (src, tgt) = pair_scans(pts, covs);
            let score = score_normalized(&assoc(0, 0), &assoc(1, 1), &src, &tgt, 1e-6).unwrap();
            let arr = |p: Point3| [p.x, p.y, p.z];
            let oracle = scalar_normalized_score(arr(pts[0]), arr(pts[1]), arr(pts[2]), arr(pts[3]), covs.map(|c| to_rows(&c)));
            assert!((score - oracle).abs() <= 1e-10 * oracle.max(1.0));
        }
    }

    #[test]
    fn normalized_score_is_inverse_homogeneous_in_covariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let pts = [0; 4].map(|_| random_point(&mut rng, 20.0));
            let covs = [0; 4].map(|_| random_spd(&mut rng));
            let c = rng.random_range(0.1..10.0);
            let (src, tgt) = pair_scans(pts, covs);
            let (src_c, tgt_c) = pair_scans(pts, covs.map(|m| m * c));
            let s1 = score_normalized(&assoc(0, 0), &assoc(1, 1), &src, &tgt, 1e-6).unwrap();
            let s2 = score_normalized(&assoc(0, 0), &assoc(1, 1), &src_c, &tgt_c, 1e-6).unwrap();
            assert!((s2 - s1 / c).abs() <= 1e-12 * s1.max(1.0));
        }
    }

    #[test]
    fn normalized_score_with_half_identity_is_half_raw_squared() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let pts = [0; 4].map(|_| random_point(&mut rng, 20.0));
            let (src, tgt) = pair_scans(pts, [Matrix3::identity() * 0.5; 4]);
            let raw = score_raw(&assoc(0, 0), &assoc(1, 1), &src, &tgt);
            let norm = score_normalized(&assoc(0, 0), &assoc(1, 1), &src, &tgt, 1e-6).unwrap();
            assert!((norm - raw * raw / 2.0).abs() < 1e-9);
        }
    }

    #[test]
    fn degenerate_pairs_are_rejected() {
        let p = Point3::new(1.0, 2.0, 3.0);
        let (src, tgt) = pair_scans([p, p, Point3::origin(), Point3::new(1.0, 0.0, 0.0)], [Matrix3::identity(); 4]);
        assert!(matches!(
            sigma_v_squared(&assoc(0, 0), &assoc(1, 1), &src, &tgt, 1e-6),
            Err(Error::DegeneratePair { .. })
        ));
        assert!(score_normalized(&assoc(0, 0), &assoc(1, 1), &src, &tgt, 1e-6).is_err());
    }

    #[test]
    fn sigma_v_matches_monte_carlo() {
        use rand_distr::{Distribution, StandardNormal};
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..3 {
            let pts = [0; 4].map(|_| random_point(&mut rng, 10.0));
            let covs = [0; 4].map(|_| random_spd(&mut rng) * 0.05);
            let (src, tgt) = pair_scans(pts, covs);
            let analytic = sigma_v_squared(&assoc(0, 0), &assoc(1, 1), &src, &tgt, 1e-6).unwrap();
            let chol: Vec<_> = covs.iter().map(|c| c.cholesky().unwrap().l()).collect();
            let n = 200_000;
            let (mut sum, mut sum_sq) = (0.0, 0.0);
            for _ in 0..n {
                let noisy: Vec<Point3> = (0..4)
                    .map(|k| {
                        let z = Vector3::from_fn(|_, _| StandardNormal.sample(&mut rng));
                        pts[k] + chol[k] * z
                    })
                    .collect();
                let v = (noisy[0] - noisy[1]).norm() - (noisy[2] - noisy[3]).norm();
                sum += v;
                sum_sq += v * v;
            }
            let mean = sum / n as f64;
            let var = sum_sq / n as f64 - mean * mean;
            assert!(((var - analytic) / analytic).abs() < 0.05, "{var} vs {analytic}");
        }
    }

    #[test]
    fn shared_target_gets_no_edge() {
        let src = RadarScan::from_points(points(&[(0.0, 0.0, 0.0), (1.0, 0.0, 0.0)])).unwrap();
        let tgt = RadarScan::from_points(points(&[(0.0, 0.0, 0.0)])).unwrap();
        let set = AssociationSet::new(vec![assoc(0, 0), assoc(1, 0)], 2, 1).unwrap();
        let g = build_consistency_graph(&set, &src, &tgt, &PcmConfig::raw(1e9));
        assert_eq!(g.edge_count(), 0);
        assert_eq!(g.scored_pairs(), 1);
    }

    #[test]
    fn coincident_points_with_distinct_indices_get_no_edge() {
        let src = RadarScan::from_points(points(&[(0.0, 0.0, 0.0), (0.0, 0.0, 1e-9)])).unwrap();
        let tgt = RadarScan::from_points(points(&[(5.0, 0.0, 0.0), (5.0, 0.0, 0.0)])).unwrap();
        let set = AssociationSet::new(vec![assoc(0, 0), assoc(1, 1)], 2, 2).unwrap();
        for cfg in [PcmConfig::raw(1.0), PcmConfig::normalized(1.0)] {
            assert_eq!(build_consistency_graph(&set, &src, &tgt, &cfg).edge_count(), 0);
        }
    }

    #[test]
    fn toy_graph_edges() {
        let g = toy_graph();
        let edges: Vec<_> = g.edges().collect();
        assert_eq!(edges, vec![(0, 2), (0, 4), (1, 3), (2, 4)]);
        assert_eq!(g.scored_pairs(), 10);
    }

    #[test]
    fn toy_ordering_and_clique() {
        let g = toy_graph();
        let order = smallest_last_ordering(&g);
        assert_eq!(order, vec![1, 3, 0, 2, 4]);
        assert_eq!(greedy_clique(&g, &order).vertices(), &[0, 2, 4]);
        assert_eq!(max_clique_exact(&g).unwrap().len(), 3);
        let (set, src, tgt) = toy();
        let inliers = select_inliers(&set, &src, &tgt, &PcmConfig::raw(0.5));
        assert_eq!(inliers.as_slice(), &[assoc(0, 0), assoc(1, 1), assoc(2, 2)]);
    }

    #[test]
    fn saturated_threshold_gives_complete_graph() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let pts: Vec<Point3> = (0..30).map(|_| random_point(&mut rng, 10.0)).collect();
        let src = RadarScan::from_points(pts.clone()).unwrap();
        let tgt = RadarScan::from_points(pts.iter().map(|p| Point3::new(-p.y, p.x * 2.0, p.z)).collect()).unwrap();
        let set = AssociationSet::new((0..30).map(|i| assoc(i, i)).collect(), 30, 30).unwrap();
        let g = build_consistency_graph(&set, &src, &tgt, &PcmConfig::raw(f64::INFINITY));
        assert_eq!(g.edge_count(), 30 * 29 / 2);
        let order = smallest_last_ordering(&g);
        assert_eq!(greedy_clique(&g, &order).len(), 30);
    }

    #[test]
    fn ordering_examples() {
        let empty = ConsistencyGraph::from_edges(4, &[]).unwrap();
        assert_eq!(smallest_last_ordering(&empty), vec![0, 1, 2, 3]);
        assert_eq!(greedy_clique(&empty, &[0, 1, 2, 3]).len(), 1);
        // After removing endpoint 0, vertices 1 and 2 both have residual
        // degree 1 and the lower index goes first.
        let path = ConsistencyGraph::from_edges(3, &[(0, 1), (1, 2)]).unwrap();
        assert_eq!(smallest_last_ordering(&path), vec![0, 1, 2]);
    }

    #[test]
    fn exact_clique_examples() {
        let k5: Vec<_> = (0..5).flat_map(|u| ((u + 1)..5).map(move |v| (u, v))).collect();
        let g = ConsistencyGraph::from_edges(5, &k5).unwrap();
        assert_eq!(max_clique_exact(&g).unwrap().vertices(), &[0, 1, 2, 3, 4]);
        assert!(matches!(
            max_clique_exact(&ConsistencyGraph::from_edges(65, &[]).unwrap()),
            Err(Error::TooLarge { .. })
        ));
        assert!(max_clique_exact(&ConsistencyGraph::from_edges(0, &[]).unwrap()).unwrap().is_empty());
    }

    fn random_graph(rng: &mut impl Rng, n: usize, p: f64) -> ConsistencyGraph {
        let mut edges = Vec::new();
        for u in 0..n {
            for v in (u + 1)..n {
                if rng.random_bool(p) {
                    edges.push((u, v));
                }
            }
        }
        ConsistencyGraph::from_edges(n, &edges).unwrap()
    }

    /// Exhaustive maximum clique over all vertex subsets.
    fn brute_force_clique_size(g: &ConsistencyGraph) -> usize {
        let n = g.vertex_count();
        (0u32..(1 << n))
            .filter(|&mask| {
                let vs: Vec<usize> = (0..n).filter(|&v| mask & (1 << v) != 0).collect();
                Clique(vs).is_clique_of(g)
            })
            .map(|mask| mask.count_ones() as usize)
            .max()
            .unwrap_or(0)
    }

    #[test]
    fn exact_clique_matches_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..60 {
            let n = rng.random_range(1..13);
            let density = rng.random_range(0.1..0.9);
            let g = random_graph(&mut rng, n, density);
            let c = max_clique_exact(&g).unwrap();
            assert!(c.is_clique_of(&g));
            assert_eq!(c.len(), brute_force_clique_size(&g));
        }
    }

    #[test]
    fn greedy_never_beats_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..200 {
            let g = random_graph(&mut rng, 20, 0.3);
            let greedy = greedy_clique(&g, &smallest_last_ordering(&g));
            assert!(greedy.is_clique_of(&g));
            assert!(!greedy.is_empty());
            assert!(greedy.len() <= max_clique_exact(&g).unwrap().len());
        }
    }

    #[test]
    fn contaminated_associations() {
        for seed in 0..50 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t = RigidTransform::from_rotation_vector(
                Vector3::new(0.0, 0.0, rng.random_range(-0.5..0.5)),
                Vector3::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), 0.0),
            );
            let mut src = Vec::new();
            let mut tgt = Vec::new();
            for _ in 0..20 {
                let p = random_point(&mut rng, 20.0);
                let noise = Vector3::from_fn(|_, _| rng.random_range(-0.02..0.02));
                src.push(p);
                tgt.push(t.apply(&p) + noise);
            }
            for _ in 0..20 {
                src.push(random_point(&mut rng, 20.0));
                tgt.push(random_point(&mut rng, 20.0));
            }
            let mut order: Vec<usize> = (0..40).collect();
            order.shuffle(&mut rng);
            let list: Vec<Association> = order.iter().enumerate().map(|(k, &i)| Association { source_index: k, target_index: i, distance: 0.0 }).collect();
            let src_perm: Vec<Point3> = order.iter().map(|&i| src[i]).collect();
            let set = AssociationSet::new(list, 40, 40).unwrap();
            let source = RadarScan::from_points(src_perm).unwrap();
            let target = RadarScan::from_points(tgt).unwrap();
            let inliers = select_inliers(&set, &source, &target, &PcmConfig::raw(0.25));
            assert!(inliers.iter().all(|a| set.as_slice().contains(a)));
            let kept = inliers.iter().filter(|a| a.target_index < 20).count();
            assert!(kept >= 18, "seed {seed}: kept {kept}");
        }
    }

    #[test]
    fn empty_selection() {
        let src = RadarScan::from_points(vec![Point3::origin()]).unwrap();
        let set = AssociationSet::empty(1, 1);
        assert!(select_inliers(&set, &src, &src, &PcmConfig::raw(1.0)).is_empty());
    }

    #[test]
    fn fully_consistent_set_is_kept() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let pts: Vec<Point3> = (0..25).map(|_| random_point(&mut rng, 15.0)).collect();
        let t = RigidTransform::rot_z(0.7).compose(&RigidTransform::from_translation(4.0, -1.0, 2.0));
        let src = RadarScan::from_points(pts.clone()).unwrap();
        let tgt = RadarScan::from_points(pts.iter().map(|p| t.apply(p)).collect()).unwrap();
        let set = AssociationSet::new((0..25).map(|i| assoc(i, i)).collect(), 25, 25).unwrap();
        assert_eq!(select_inliers(&set, &src, &tgt, &PcmConfig::raw(0.1)).len(), 25);
    }

    #[test]
    fn graph_is_equivariant_under_association_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..20 {
            let n = 12;
            let src = RadarScan::from_points((0..n).map(|_| random_point(&mut rng, 5.0)).collect()).unwrap();
            let tgt = RadarScan::from_points((0..n).map(|_| random_point(&mut rng, 5.0)).collect()).unwrap();
            let list: Vec<Association> = (0..n).map(|i| assoc(i, rng.random_range(0..n))).collect();
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut rng);
            let permuted: Vec<Association> = perm.iter().map(|&k| list[k]).collect();
            let cfg = PcmConfig::raw(1.5);
            let g = build_consistency_graph(&AssociationSet::new(list.clone(), n, n).unwrap(), &src, &tgt, &cfg);
            let h = build_consistency_graph(&AssociationSet::new(permuted, n, n).unwrap(), &src, &tgt, &cfg);
            assert_eq!(g.edge_count(), h.edge_count());
            for a in 0..n {
                for b in 0..n {
                    if a != b {
                        assert_eq!(h.are_adjacent(a, b), g.are_adjacent(perm[a], perm[b]));
                    }
                }
            }
            assert_eq!(max_clique_exact(&g).unwrap().len(), max_clique_exact(&h).unwrap().len());
        }
    }

    #[test]
    fn parallel_and_serial_builds_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let n = 300;
        let pts: Vec<Point3> = (0..n).map(|_| random_point(&mut rng, 20.0)).collect();
        let src = RadarScan::from_points(pts.clone()).unwrap();
        let tgt = RadarScan::from_points(pts.iter().map(|p| p + Vector3::from_fn(|_, _| rng.random_range(-0.3..0.3))).collect()).unwrap();
        let set = AssociationSet::new((0..n).map(|i| assoc(i, i)).collect(), n, n).unwrap();
        let cfg = PcmConfig::raw(0.25);
        let g = build_consistency_graph(&set, &src, &tgt, &cfg);
        assert_eq!(g.scored_pairs(), n * (n - 1) / 2);
        let (big_edges, big_adj): (Vec<_>, Vec<_>) = (g.edges().collect::<Vec<_>>(), (0..n).map(|v| g.neighbors(v).to_vec()).collect::<Vec<_>>());
        // Recompute the same graph serially via the edge predicate.
        let mut expected = Vec::new();
        for i in 0..n {
            for j in (i + 1)..n {
                if pair_is_consistent(&set.as_slice()[i], &set.as_slice()[j], &src, &tgt, &cfg) {
                    expected.push((i, j));
                }
            }
        }
        assert_eq!(big_edges, expected);
        assert_eq!(ConsistencyGraph::from_edges(n, &expected).unwrap().adjacency, big_adj);
    }

    proptest! {
        #[test]
        fn scores_are_symmetric(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pts = [0; 4].map(|_| random_point(&mut rng, 20.0));
            let covs = [0; 4].map(|_| random_spd(&mut rng));
            let (src, tgt) = pair_scans(pts, covs);
            let (a, b) = (assoc(0, 0), assoc(1, 1));
            prop_assert_eq!(score_raw(&a, &b, &src, &tgt), score_raw(&b, &a, &src, &tgt));
            prop_assert_eq!(
                score_normalized(&a, &b, &src, &tgt, 1e-6).unwrap(),
                score_normalized(&b, &a, &src, &tgt, 1e-6).unwrap()
            );
        }

        #[test]
        fn raw_score_is_rigid_invariant(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pts = [0; 4].map(|_| random_point(&mut rng, 20.0));
            let t1 = RigidTransform::from_rotation_vector(Vector3::from_fn(|_, _| rng.random_range(-2.0..2.0)), Vector3::from_fn(|_, _| rng.random_range(-50.0..50.0)));
            let t2 = RigidTransform::from_rotation_vector(Vector3::from_fn(|_, _| rng.random_range(-2.0..2.0)), Vector3::from_fn(|_, _| rng.random_range(-50.0..50.0)));
            let (src, tgt) = pair_scans(pts, [CovMatrix3::zeros(); 4]);
            let moved = [t1.apply(&pts[0]), t1.apply(&pts[1]), t2.apply(&pts[2]), t2.apply(&pts[3])];
            let (src_m, tgt_m) = pair_scans(moved, [CovMatrix3::zeros(); 4]);
            let (a, b) = (assoc(0, 0), assoc(1, 1));
            prop_assert!((score_raw(&a, &b, &src, &tgt) - score_raw(&a, &b, &src_m, &tgt_m)).abs() < 1e-9);
        }

        #[test]
        fn graph_adjacency_is_well_formed(seed in any::<u64>(), n in 0usize..40) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let src = RadarScan::from_points((0..n).map(|_| random_point(&mut rng, 5.0)).collect()).unwrap();
            let tgt = RadarScan::from_points((0..n.max(1)).map(|_| random_point(&mut rng, 5.0)).collect()).unwrap();
            let list: Vec<Association> = (0..n).map(|i| assoc(i, rng.random_range(0..n.max(1)))).collect();
            let set = AssociationSet::new(list, n, n.max(1)).unwrap();
            let g = build_consistency_graph(&set, &src, &tgt, &PcmConfig::raw(1.0));
            let mut degree_sum = 0;
            for v in 0..n {
                let nb = g.neighbors(v);
                prop_assert!(nb.windows(2).all(|w| w[0] < w[1]));
                prop_assert!(!nb.contains(&v));
                for &u in nb {
                    prop_assert!(g.are_adjacent(u, v));
                }
                degree_sum += nb.len();
            }
            prop_assert_eq!(degree_sum, 2 * g.edge_count());
            let clique = greedy_clique(&g, &smallest_last_ordering(&g));
            prop_assert!(clique.is_clique_of(&g));
            prop_assert_eq!(clique.is_empty(), n == 0);
        }
    }
}
