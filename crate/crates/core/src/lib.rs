//! Registration of sparse 3D radar point clouds.
//!
//! Correspondences produced by nearest-neighbour association are filtered by
//! pairwise consistency maximization (PCM): a consistency graph is built over
//! the putative matches using a rigid-motion distance invariant (raw or
//! normalized by the propagated radar measurement uncertainty), and a large
//! clique is extracted with a smallest-last greedy heuristic. The surviving
//! inliers drive each ICP / point-to-plane / GICP update.
//!
//! Besides registration the crate ships trajectory metrics (segment RPE/RRE,
//! KITTI-style drift), a deterministic synthetic radar simulator and the
//! plain-text file formats used by the `radar-pcm` command-line tool.

// Domain checks are written `!(x > 0.0)` so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod association;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod io;
pub mod pcm;
pub mod radar_model;
pub mod registration;
pub mod synth;

pub use association::{putative_correspondences, Association, AssociationSet, KdTree};
pub use error::{Error, Result};
pub use evaluation::{SegmentErrorStats, Trajectory};
pub use geometry::{CovMatrix3, Point3, RigidTransform};
pub use pcm::{Clique, ConsistencyGraph, PcmConfig, ScoreKind};
pub use radar_model::{RadarScan, SphericalAccuracy, SphericalDetection};
pub use registration::{register, Objective, RegistrationConfig, RegistrationResult};
