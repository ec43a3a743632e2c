//! Iterative registration of a source scan onto a target scan.
//!
//! Each iteration moves the source by the current estimate `T_k`, gathers
//! nearest-neighbour associations `A_k`, optionally filters them to the PCM
//! inlier set `I_k ⊂ A_k`, solves an increment `ΔT_k` for the chosen
//! objective and sets `T_{k+1} = ΔT_k ∘ T_k`.
//!
//! Point-to-point increments are solved in closed form. Point-to-plane and
//! GICP increments take a single Gauss–Newton step on the small-angle
//! parameterization `ΔT ≈ (I + [ω]×, t)`, with the rotation then built
//! exactly from `ω`.

use nalgebra::{Matrix3, Matrix6, SMatrix, Vector3, Vector6};

use crate::association::{associate_with_index, AssociationSet, KdTree};
use crate::error::{Error, Result};
use crate::geometry::{estimate_rigid_pt2pt, skew, Point3, RigidTransform};
use crate::pcm::{select_inliers, PcmConfig};
use crate::radar_model::RadarScan;

/// Normal-equation matrices above this condition number are rank-deficient.
pub const MAX_CONDITION_NUMBER: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Objective {
    PointToPoint,
    PointToPlane,
    Gicp,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegistrationConfig {
    pub objective: Objective,
    pub pcm: Option<PcmConfig>,
    /// Meters.
    pub max_association_distance: f64,
    pub max_iterations: usize,
    /// Meters.
    pub translation_epsilon: f64,
    /// Radians.
    pub rotation_epsilon: f64,
    pub min_inliers: usize,
    pub normal_k: usize,
    /// Meters², added to every combined GICP covariance as `2·reg·I`.
    pub gicp_regularization: f64,
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        Self {
            objective: Objective::PointToPoint,
            pcm: None,
            max_association_distance: 10.0,
            max_iterations: 50,
            translation_epsilon: 1e-4,
            rotation_epsilon: 1e-5,
            min_inliers: 5,
            normal_k: 10,
            gicp_regularization: 1e-6,
        }
    }
}

impl RegistrationConfig {
    pub fn new(objective: Objective, pcm: Option<PcmConfig>) -> Self {
        Self {
            objective,
            pcm,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("max_association_distance", self.max_association_distance),
            ("translation_epsilon", self.translation_epsilon),
            ("rotation_epsilon", self.rotation_epsilon),
        ];
        for (name, value) in positive {
            if !(value > 0.0) {
                return Err(Error::Domain(format!("{name} must be positive, got {value}")));
            }
        }
        if !(self.gicp_regularization >= 0.0) {
            return Err(Error::Domain(format!(
                "gicp_regularization must be non-negative, got {}",
                self.gicp_regularization
            )));
        }
        if self.max_iterations == 0 {
            return Err(Error::Domain("max_iterations must be positive".into()));
        }
        if self.min_inliers < 3 {
            return Err(Error::Domain(format!("min_inliers must be at least 3, got {}", self.min_inliers)));
        }
        if self.objective == Objective::PointToPlane && self.normal_k < 3 {
            return Err(Error::Domain(format!("normal_k must be at least 3, got {}", self.normal_k)));
        }
        if let Some(pcm) = &self.pcm {
            pcm.validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationTrace {
    /// `|A_k|`.
    pub associations: usize,
    /// `|I_k|` actually used by the solver.
    pub inliers: usize,
    /// `‖t(ΔT_k)‖`, meters.
    pub translation_step: f64,
    /// `angle(ΔT_k)`, radians.
    pub rotation_step: f64,
    /// The PCM clique was smaller than `min_inliers`, so `I_k = A_k`.
    pub fallback: bool,
    /// `Σ ‖T_k·p − r‖²` over `A_k`, before the update.
    pub association_cost: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegistrationResult {
    pub transform: RigidTransform,
    pub iterations: usize,
    pub converged: bool,
    pub final_inlier_count: usize,
    pub trace: Vec<IterationTrace>,
}

/// Unit normals of `points` from the smallest principal axis of each point's
/// `k` nearest neighbours (itself included), oriented towards the origin.
pub fn estimate_normals(points: &[Point3], k: usize) -> Result<Vec<Vector3<f64>>> {
    if points.len() < 3 {
        return Err(Error::InsufficientPoints {
            required: 3,
            available: points.len(),
        });
    }
    let tree = KdTree::build(points)?;
    let k = k.min(points.len());
    Ok(points
        .iter()
        .map(|p| {
            let nbrs = tree.nearest_k(p, k);
            let mean = nbrs.iter().map(|&(i, _)| points[i].coords).sum::<Vector3<f64>>() / nbrs.len() as f64;
            let scatter = nbrs.iter().fold(Matrix3::zeros(), |acc, &(i, _)| {
                let d = points[i].coords - mean;
                acc + d * d.transpose()
            });
            let eig = scatter.symmetric_eigen();
            let n: Vector3<f64> = eig.eigenvectors.column(eig.eigenvalues.imin()).into_owned();
            if n.dot(&p.coords) > 0.0 {
                -n
            } else {
                n
            }
        })
        .collect())
}

/// Accumulated normal equations `H x = −g` of a Gauss–Newton step.
struct NormalEquations {
    h: Matrix6<f64>,
    g: Vector6<f64>,
}

impl NormalEquations {
    fn new() -> Self {
        Self {
            h: Matrix6::zeros(),
            g: Vector6::zeros(),
        }
    }

    /// Adds a residual block `e` with Jacobian `j` (w.r.t. `[ω, t]`) and
    /// information matrix `w`.
    fn add<const R: usize>(&mut self, j: &SMatrix<f64, R, 6>, w: &SMatrix<f64, R, R>, e: &SMatrix<f64, R, 1>) {
        let jt_w = j.transpose() * w;
        self.h += jt_w * j;
        self.g += jt_w * e;
    }

    fn solve(&self) -> Result<RigidTransform> {
        let h = (self.h + self.h.transpose()) * 0.5;
        let eig = h.symmetric_eigenvalues();
        let (lo, hi) = (eig.min(), eig.max());
        if !(lo > 0.0) || hi / lo > MAX_CONDITION_NUMBER {
            return Err(Error::DegenerateConfiguration(format!(
                "normal equations are rank-deficient (eigenvalues {lo:.3e} .. {hi:.3e})"
            )));
        }
        let x = h
            .cholesky()
            .ok_or_else(|| Error::DegenerateConfiguration("normal equations are not positive definite".into()))?
            .solve(&(-self.g));
        Ok(RigidTransform::from_rotation_vector(
            Vector3::new(x[0], x[1], x[2]),
            Vector3::new(x[3], x[4], x[5]),
        ))
    }
}

/// Jacobian of `p + ω × p + t` w.r.t. `[ω, t]`: `[−[p]×, I]`.
fn point_jacobian(p: &Point3) -> SMatrix<f64, 3, 6> {
    let mut j = SMatrix::<f64, 3, 6>::zeros();
    j.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-skew(&p.coords)));
    j.fixed_view_mut::<3, 3>(0, 3).copy_from(&Matrix3::identity());
    j
}

fn check_count(inliers: &AssociationSet, required: usize) -> Result<()> {
    if inliers.len() < required {
        return Err(Error::InsufficientPoints {
            required,
            available: inliers.len(),
        });
    }
    Ok(())
}

/// Closed-form increment minimizing `Σ ‖ΔT·p − r‖²`.
pub fn icp_step_pt2pt(inliers: &AssociationSet, source: &RadarScan, target: &RadarScan) -> Result<RigidTransform> {
    let pairs: Vec<(Point3, Point3)> = inliers
        .iter()
        .map(|a| (source.points()[a.source_index], target.points()[a.target_index]))
        .collect();
    estimate_rigid_pt2pt(&pairs)
}

/// One Gauss–Newton step on `Σ (nⱼᵀ(ΔT·pᵢ − rⱼ))²`, where `normals` are the
/// unit target normals. Sliding along a plane is unconstrained by that
/// plane, so a scene must span all six degrees of freedom.
pub fn icp_step_pt2plane(
    inliers: &AssociationSet,
    source: &RadarScan,
    target: &RadarScan,
    normals: &[Vector3<f64>],
) -> Result<RigidTransform> {
    check_count(inliers, 3)?;
    let mut ne = NormalEquations::new();
    for a in inliers {
        let p = source.points()[a.source_index];
        let r = target.points()[a.target_index];
        let n = normals[a.target_index];
        let mut j = SMatrix::<f64, 1, 6>::zeros();
        j.fixed_view_mut::<1, 3>(0, 0).copy_from(&p.coords.cross(&n).transpose());
        j.fixed_view_mut::<1, 3>(0, 3).copy_from(&n.transpose());
        let e = SMatrix::<f64, 1, 1>::new(n.dot(&(p - r)));
        ne.add(&j, &SMatrix::<f64, 1, 1>::identity(), &e);
    }
    ne.solve()
}

/// One Gauss–Newton step on `Σ dᵢᵀ (Σ_rⱼ + Σ_pᵢ + 2·reg·I)⁻¹ dᵢ` with
/// `dᵢ = ΔT·pᵢ − rⱼ`. Source covariances must already be expressed in the
/// target frame.
pub fn gicp_step(
    inliers: &AssociationSet,
    source: &RadarScan,
    target: &RadarScan,
    regularization: f64,
) -> Result<RigidTransform> {
    check_count(inliers, 3)?;
    let mut ne = NormalEquations::new();
    for (position, a) in inliers.iter().enumerate() {
        let p = source.points()[a.source_index];
        let r = target.points()[a.target_index];
        let combined = target.covariances()[a.target_index]
            + source.covariances()[a.source_index]
            + Matrix3::identity() * (2.0 * regularization);
        let info = combined
            .cholesky()
            .map(|c| c.inverse())
            .filter(|m| m.iter().all(|v| v.is_finite()))
            .ok_or(Error::SingularCovariance { index: position })?;
        ne.add(&point_jacobian(&p), &info, &(p - r));
    }
    ne.solve()
}

/// Squared association distances summed over `assoc`.
fn association_cost(assoc: &AssociationSet) -> f64 {
    assoc.iter().map(|a| a.distance * a.distance).sum()
}

pub fn register(
    source: &RadarScan,
    target: &RadarScan,
    cfg: &RegistrationConfig,
    initial: &RigidTransform,
) -> Result<RegistrationResult> {
    cfg.validate()?;
    for scan in [source, target] {
        if scan.len() < cfg.min_inliers {
            return Err(Error::InsufficientPoints {
                required: cfg.min_inliers,
                available: scan.len(),
            });
        }
    }
    let tree = KdTree::build(target.points())?;
    let normals = match cfg.objective {
        Objective::PointToPlane => estimate_normals(target.points(), cfg.normal_k)?,
        _ => Vec::new(),
    };

    let mut transform = *initial;
    let mut trace = Vec::new();
    let mut converged = false;
    let mut final_inlier_count = 0;
    for iteration in 0..cfg.max_iterations {
        let moved = source.transformed(&transform);
        let assoc = associate_with_index(moved.points(), &tree, cfg.max_association_distance);
        check_count(&assoc, cfg.min_inliers).map_err(|e| e.at_iteration(iteration))?;

        let (inliers, fallback) = match &cfg.pcm {
            Some(pcm) => {
                let selected = select_inliers(&assoc, &moved, target, pcm);
                if selected.len() < cfg.min_inliers {
                    (assoc.clone(), true)
                } else {
                    (selected, false)
                }
            }
            None => (assoc.clone(), false),
        };

        let step = match cfg.objective {
            Objective::PointToPoint => icp_step_pt2pt(&inliers, &moved, target),
            Objective::PointToPlane => icp_step_pt2plane(&inliers, &moved, target, &normals),
            Objective::Gicp => gicp_step(&inliers, &moved, target, cfg.gicp_regularization),
        }
        .map_err(|e| e.at_iteration(iteration))?;

        transform = step.compose(&transform);
        final_inlier_count = inliers.len();
        trace.push(IterationTrace {
            associations: assoc.len(),
            inliers: inliers.len(),
            translation_step: step.translation_norm(),
            rotation_step: step.rotation_angle(),
            fallback,
            association_cost: association_cost(&assoc),
        });
        if step.translation_norm() < cfg.translation_epsilon && step.rotation_angle() < cfg.rotation_epsilon {
            converged = true;
            break;
        }
    }
    Ok(RegistrationResult {
        transform,
        iterations: trace.len(),
        converged,
        final_inlier_count,
        trace,
    })
}
