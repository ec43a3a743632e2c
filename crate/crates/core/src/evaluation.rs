//! Trajectory integration and relative error metrics.
//!
//! Segments are anchored to distance driven along the ground truth. For a
//! start index `i` and length `L`, the end index `j` is the first frame whose
//! ground-truth path length from `i` reaches `L`; the error transform is
//! `E = (gt_i⁻¹ gt_j)⁻¹ (est_i⁻¹ est_j)`.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::RigidTransform;

/// KITTI benchmark segment lengths, meters.
pub const KITTI_SEGMENT_LENGTHS: [f64; 8] = [100.0, 200.0, 300.0, 400.0, 500.0, 600.0, 700.0, 800.0];

/// Path lengths within this relative tolerance of `L` count as reaching `L`.
const LENGTH_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    stamps: Vec<f64>,
    poses: Vec<RigidTransform>,
}

impl Trajectory {
    /// Timestamps must be finite and strictly increasing.
    pub fn new(stamps: Vec<f64>, poses: Vec<RigidTransform>) -> Result<Self> {
        if stamps.len() != poses.len() {
            return Err(Error::InvariantViolation(format!(
                "{} timestamps but {} poses",
                stamps.len(),
                poses.len()
            )));
        }
        if let Some(bad) = stamps.iter().position(|s| !s.is_finite()) {
            return Err(Error::InvariantViolation(format!("timestamp {bad} is not finite")));
        }
        if let Some(k) = stamps.windows(2).position(|w| w[1] <= w[0]) {
            return Err(Error::InvariantViolation(format!(
                "timestamps not strictly increasing at index {}",
                k + 1
            )));
        }
        Ok(Self { stamps, poses })
    }

    /// Poses stamped with their frame index.
    pub fn from_poses(poses: Vec<RigidTransform>) -> Self {
        let stamps = (0..poses.len()).map(|k| k as f64).collect();
        Self { stamps, poses }
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    pub fn stamps(&self) -> &[f64] {
        &self.stamps
    }

    pub fn poses(&self) -> &[RigidTransform] {
        &self.poses
    }

    /// Cumulative translation distance; element 0 is 0.
    pub fn path_lengths(&self) -> Vec<f64> {
        let mut acc = 0.0;
        let mut out = Vec::with_capacity(self.len());
        for (k, pose) in self.poses.iter().enumerate() {
            if k > 0 {
                acc += (pose.translation() - self.poses[k - 1].translation()).norm();
            }
            out.push(acc);
        }
        out
    }

    pub fn total_length(&self) -> f64 {
        self.path_lengths().last().copied().unwrap_or(0.0)
    }

    /// Left-multiplies every pose by `t`.
    pub fn transformed(&self, t: &RigidTransform) -> Trajectory {
        Trajectory {
            stamps: self.stamps.clone(),
            poses: self.poses.iter().map(|p| t.compose(p)).collect(),
        }
    }
}

/// `pose_0 = I`, `pose_{k+1} = pose_k ∘ relative_k`, where `relative_k` maps
/// frame `k+1` into frame `k`. Poses are stamped with their frame index.
pub fn integrate_odometry(relatives: &[RigidTransform]) -> Trajectory {
    let mut poses = Vec::with_capacity(relatives.len() + 1);
    let mut pose = RigidTransform::identity();
    poses.push(pose);
    for rel in relatives {
        pose = pose.compose(rel);
        poses.push(pose);
    }
    Trajectory::from_poses(poses)
}

/// As [`integrate_odometry`] with one timestamp per resulting pose.
pub fn integrate_odometry_with_stamps(relatives: &[RigidTransform], stamps: Vec<f64>) -> Result<Trajectory> {
    Trajectory::new(stamps, integrate_odometry(relatives).poses)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SegmentErrorStats {
    pub segment_length: f64,
    pub rpe_mean: f64,
    pub rpe_std: f64,
    /// Degrees.
    pub rre_mean: f64,
    /// Degrees.
    pub rre_std: f64,
    pub segment_count: usize,
}

/// Average drift over a set of segment lengths.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Drift {
    /// Translation error over segment length, percent.
    pub t_rel: f64,
    /// Rotation error over segment length, degrees per 100 m.
    pub r_rel: f64,
    pub segment_count: usize,
}

fn check_paired(est: &Trajectory, gt: &Trajectory) -> Result<()> {
    if est.len() != gt.len() {
        return Err(Error::InvariantViolation(format!(
            "trajectories must be paired by index: {} estimated vs {} ground-truth poses",
            est.len(),
            gt.len()
        )));
    }
    Ok(())
}

fn error_transform(est: &Trajectory, gt: &Trajectory, i: usize, j: usize) -> RigidTransform {
    let d_gt = gt.poses[i].inverse().compose(&gt.poses[j]);
    let d_est = est.poses[i].inverse().compose(&est.poses[j]);
    d_gt.inverse().compose(&d_est)
}

/// `(i, j)` for every start `i` that has an end `j` at path length `length`.
fn segments(path: &[f64], length: f64) -> Vec<(usize, usize)> {
    let reach = length * (1.0 - LENGTH_TOLERANCE);
    (0..path.len())
        .map_while(|i| {
            let goal = path[i] + reach;
            let j = i + path[i..].partition_point(|&d| d < goal);
            (j < path.len()).then_some((i, j))
        })
        .collect()
}

/// `(translation error m, rotation error deg)` for every segment of `length`.
fn segment_errors(est: &Trajectory, gt: &Trajectory, path: &[f64], length: f64) -> Vec<(f64, f64)> {
    segments(path, length)
        .into_par_iter()
        .map(|(i, j)| {
            let e = error_transform(est, gt, i, j);
            (e.translation_norm(), e.rotation_angle().to_degrees())
        })
        .collect()
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn validate_length(length: f64) -> Result<()> {
    if !(length > 0.0 && length.is_finite()) {
        return Err(Error::Domain(format!("segment length must be positive, got {length}")));
    }
    Ok(())
}

/// Mean and population standard deviation of RPE (m) and RRE (deg) for
/// each requested length.
pub fn segment_rpe_rre(est: &Trajectory, gt: &Trajectory, lengths: &[f64]) -> Result<Vec<SegmentErrorStats>> {
    check_paired(est, gt)?;
    let path = gt.path_lengths();
    let total = path.last().copied().unwrap_or(0.0);
    lengths
        .iter()
        .map(|&length| {
            validate_length(length)?;
            let errors = segment_errors(est, gt, &path, length);
            if errors.is_empty() {
                return Err(Error::TooShort {
                    required: length,
                    available: total,
                });
            }
            let (rpe_mean, rpe_std) = mean_std(errors.iter().map(|e| e.0));
            let (rre_mean, rre_std) = mean_std(errors.iter().map(|e| e.1));
            Ok(SegmentErrorStats {
                segment_length: length,
                rpe_mean,
                rpe_std,
                rre_mean,
                rre_std,
                segment_count: errors.len(),
            })
        })
        .collect()
}

/// Drift averaged over every segment of every length that fits; lengths
/// that do not fit are skipped.
pub fn segment_drift(est: &Trajectory, gt: &Trajectory, lengths: &[f64]) -> Result<Drift> {
    check_paired(est, gt)?;
    let path = gt.path_lengths();
    let (mut t_sum, mut r_sum, mut count) = (0.0, 0.0, 0usize);
    for &length in lengths {
        validate_length(length)?;
        for (t_err, r_err) in segment_errors(est, gt, &path, length) {
            t_sum += t_err / length;
            r_sum += r_err / length;
            count += 1;
        }
    }
    if count == 0 {
        let shortest = lengths.iter().copied().fold(f64::INFINITY, f64::min);
        return Err(Error::TooShort {
            required: shortest,
            available: path.last().copied().unwrap_or(0.0),
        });
    }
    Ok(Drift {
        t_rel: 100.0 * t_sum / count as f64,
        r_rel: 100.0 * r_sum / count as f64,
        segment_count: count,
    })
}

/// KITTI-style `(t_rel %, r_rel °/100 m)` over 100–800 m segments.
pub fn kitti_drift(est: &Trajectory, gt: &Trajectory) -> Result<(f64, f64)> {
    let d = segment_drift(est, gt, &KITTI_SEGMENT_LENGTHS)?;
    Ok((d.t_rel, d.r_rel))
}

/// Pairs each estimated pose with the nearest ground-truth timestamp within
/// `max_dt`. The pairing is monotone and injective; returns the paired
/// `(est, gt)` trajectories.
pub fn associate_by_timestamp(est: &Trajectory, gt: &Trajectory, max_dt: f64) -> Result<(Trajectory, Trajectory)> {
    if est.is_empty() || gt.is_empty() {
        return Err(Error::NoOverlap);
    }
    let mut est_idx = Vec::new();
    let mut gt_idx: Vec<usize> = Vec::new();
    for (i, &t) in est.stamps.iter().enumerate() {
        let k = gt.stamps.partition_point(|&s| s < t);
        let nearest = [k.checked_sub(1), (k < gt.len()).then_some(k)]
            .into_iter()
            .flatten()
            .min_by(|&a, &b| (gt.stamps[a] - t).abs().total_cmp(&(gt.stamps[b] - t).abs()))
            .expect("gt is non-empty");
        let taken = gt_idx.last().is_some_and(|&last| nearest <= last);
        if (gt.stamps[nearest] - t).abs() <= max_dt && !taken {
            est_idx.push(i);
            gt_idx.push(nearest);
        }
    }
    if est_idx.is_empty() {
        return Err(Error::NoOverlap);
    }
    let pick = |traj: &Trajectory, idx: &[usize]| Trajectory {
        stamps: idx.iter().map(|&k| traj.stamps[k]).collect(),
        poses: idx.iter().map(|&k| traj.poses[k]).collect(),
    };
    Ok((pick(est, &est_idx), pick(gt, &gt_idx)))
}
