//! Deterministic synthetic radar data.
//!
//! Every random draw comes from a ChaCha generator keyed by a seed and a
//! stream index, so frames can be generated in parallel and stay bitwise
//! reproducible.
//!
//! Sensor frame: x forward, y left, z up. A pose maps sensor coordinates into
//! the world frame.

use std::f64::consts::PI;

use nalgebra::Vector3;
use rand::{Rng, RngCore, SeedableRng};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, UnitSphere};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::evaluation::Trajectory;
use crate::geometry::{Point3, RigidTransform};
use crate::radar_model::{cartesian_to_spherical, RadarScan, SphericalAccuracy, SphericalDetection};

/// Frame rate used to stamp generated sequences, Hz.
pub const FRAME_RATE: f64 = 20.0;

/// Mean inter-frame travel of the reference platform, meters.
pub const DEFAULT_STEP: f64 = 0.19;

const GHOST_ATTEMPTS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SensorParams {
    pub accuracy: SphericalAccuracy,
    /// Meters.
    pub max_range: f64,
    /// Full horizontal field of view, radians, at most 2π.
    pub azimuth_fov: f64,
    /// Full vertical field of view, radians, at most π.
    pub elevation_fov: f64,
    /// Upper bound on detections; the closest landmarks are kept.
    pub detections_per_scan: usize,
    /// Multiplier on the Gaussian measurement noise. Zero gives exact
    /// detections; covariances always follow `accuracy`.
    pub noise_scale: f64,
}

impl Default for SensorParams {
    fn default() -> Self {
        Self {
            accuracy: SphericalAccuracy::default(),
            max_range: 60.0,
            azimuth_fov: 120f64.to_radians(),
            elevation_fov: 30f64.to_radians(),
            detections_per_scan: 150,
            noise_scale: 1.0,
        }
    }
}

impl SensorParams {
    pub fn noiseless() -> Self {
        Self {
            noise_scale: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.accuracy.validate()?;
        let ok = self.max_range > 0.0
            && self.azimuth_fov > 0.0
            && self.azimuth_fov <= 2.0 * PI
            && self.elevation_fov > 0.0
            && self.elevation_fov <= PI
            && self.detections_per_scan > 0
            && self.noise_scale >= 0.0
            && self.noise_scale.is_finite();
        if !ok {
            return Err(Error::Domain(format!("invalid sensor parameters: {self:?}")));
        }
        Ok(())
    }

    fn contains(&self, d: &SphericalDetection) -> bool {
        d.range <= self.max_range
            && d.azimuth.abs() <= 0.5 * self.azimuth_fov
            && d.elevation.abs() <= 0.5 * self.elevation_fov
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ContaminationParams {
    /// Share of detections replaced by uniform draws in the sensing volume.
    pub outlier_fraction: f64,
    /// Share of detections replaced by mirror images of their landmark.
    pub ghost_fraction: f64,
    pub seed: u64,
}

impl ContaminationParams {
    pub fn clean() -> Self {
        Self::default()
    }

    pub fn validate(&self) -> Result<()> {
        let (o, g) = (self.outlier_fraction, self.ghost_fraction);
        if !((0.0..1.0).contains(&o) && (0.0..1.0).contains(&g) && o + g < 1.0) {
            return Err(Error::Domain(format!(
                "contamination fractions must lie in [0, 1) and sum below 1, got {o} and {g}"
            )));
        }
        Ok(())
    }
}

/// Provenance of a simulated detection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DetectionLabel {
    /// A noisy observation of landmark `i`.
    Landmark(usize),
    /// A uniform draw unrelated to the scene.
    Outlier,
    /// A mirror image of landmark `i`.
    Ghost(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedScan {
    pub scan: RadarScan,
    /// One label per point of `scan`.
    pub labels: Vec<DetectionLabel>,
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Independent per-frame seed; distinct frames never share a stream.
pub fn frame_seed(seed: u64, frame: u64) -> u64 {
    rng_for(seed, frame).next_u64()
}

/// `count` landmarks uniform in the cube `[−extent/2, extent/2]³`.
pub fn generate_scene(count: usize, extent: f64, seed: u64) -> Vec<Point3> {
    let half = Vector3::repeat(0.5 * extent);
    generate_scene_in_box(count, -half, half, seed)
}

/// `count` landmarks uniform in the axis-aligned box `[lo, hi]`.
pub fn generate_scene_in_box(count: usize, lo: Vector3<f64>, hi: Vector3<f64>, seed: u64) -> Vec<Point3> {
    let mut rng = rng_for(seed, 0);
    let mut coord = |a: f64, b: f64| if a < b { rng.random_range(a..=b) } else { a };
    (0..count)
        .map(|_| Point3::new(coord(lo.x, hi.x), coord(lo.y, hi.y), coord(lo.z, hi.z)))
        .collect()
}

fn wrap_angle(a: f64) -> f64 {
    let w = (a + PI).rem_euclid(2.0 * PI) - PI;
    if w <= -PI {
        PI
    } else {
        w
    }
}

fn uniform_in_view(rng: &mut impl Rng, sp: &SensorParams) -> SphericalDetection {
    // Volume-uniform: r ∝ u^(1/3), sin(elevation) uniform.
    let range = sp.max_range * rng.random::<f64>().cbrt();
    let half_az = 0.5 * sp.azimuth_fov;
    let half_el = 0.5 * sp.elevation_fov;
    let azimuth = if half_az >= PI { wrap_angle(rng.random_range(-PI..PI)) } else { rng.random_range(-half_az..=half_az) };
    let elevation = rng.random_range(-half_el.sin()..=half_el.sin()).asin();
    SphericalDetection {
        range: range.max(f64::MIN_POSITIVE),
        azimuth,
        elevation,
    }
}

/// Reflection of `p` through a random plane through a random point of the
/// sensing volume, if it lands in view.
fn mirror_in_view(rng: &mut impl Rng, p: &Point3, sp: &SensorParams) -> Option<SphericalDetection> {
    for _ in 0..GHOST_ATTEMPTS {
        let normal = Vector3::from(UnitSphere.sample(rng));
        let anchor = crate::radar_model::spherical_to_cartesian(&uniform_in_view(rng, sp));
        let mirrored = p - 2.0 * (p - anchor).dot(&normal) * normal;
        if let Some(d) = cartesian_to_spherical(&mirrored) {
            if sp.contains(&d) {
                return Some(d);
            }
        }
    }
    None
}

fn add_noise(rng: &mut impl Rng, d: &SphericalDetection, sp: &SensorParams) -> SphericalDetection {
    let mut draw = |sigma: f64| -> f64 {
        let z: f64 = StandardNormal.sample(rng);
        z * sigma * sp.noise_scale
    };
    let acc = &sp.accuracy;
    let range = d.range + draw(acc.sigma_range);
    let azimuth = wrap_angle(d.azimuth + draw(acc.sigma_azimuth));
    let elevation = (d.elevation + draw(acc.sigma_elevation)).clamp(-0.5 * PI, 0.5 * PI);
    SphericalDetection {
        range: range.abs().max(1e-9),
        azimuth,
        elevation,
    }
}

/// Observes `scene` from `sensor_pose`. Landmarks in range and field of view
/// become detections with independent Gaussian spherical noise; then exactly
/// `round(fraction · n)` of them are replaced by outliers and by ghosts.
pub fn simulate_scan(
    scene: &[Point3],
    sensor_pose: &RigidTransform,
    sp: &SensorParams,
    cp: &ContaminationParams,
    seed: u64,
) -> Result<SimulatedScan> {
    sp.validate()?;
    cp.validate()?;
    let world_to_sensor = sensor_pose.inverse();
    let mut visible: Vec<(usize, Point3, SphericalDetection)> = scene
        .iter()
        .enumerate()
        .filter_map(|(i, landmark)| {
            let local = world_to_sensor.apply(landmark);
            cartesian_to_spherical(&local).filter(|d| sp.contains(d)).map(|d| (i, local, d))
        })
        .collect();
    if visible.is_empty() {
        return Err(Error::EmptyView);
    }
    visible.sort_by(|a, b| a.2.range.total_cmp(&b.2.range).then(a.0.cmp(&b.0)));
    visible.truncate(sp.detections_per_scan);
    visible.sort_by_key(|v| v.0);

    let n = visible.len();
    let outliers = ((cp.outlier_fraction * n as f64).round() as usize).min(n);
    let ghosts = ((cp.ghost_fraction * n as f64).round() as usize).min(n - outliers);
    let mut contamination_rng = rng_for(cp.seed, seed);
    let mut slots: Vec<usize> = (0..n).collect();
    slots.shuffle(&mut contamination_rng);
    let mut role = vec![0u8; n];
    for &s in &slots[..outliers] {
        role[s] = 1;
    }
    for &s in &slots[outliers..outliers + ghosts] {
        role[s] = 2;
    }

    let mut noise_rng = rng_for(seed, 0);
    let mut detections = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for (slot, (landmark, local, exact)) in visible.iter().enumerate() {
        let (det, label) = match role[slot] {
            0 => (*exact, DetectionLabel::Landmark(*landmark)),
            2 => match mirror_in_view(&mut contamination_rng, local, sp) {
                Some(d) => (d, DetectionLabel::Ghost(*landmark)),
                None => (uniform_in_view(&mut contamination_rng, sp), DetectionLabel::Outlier),
            },
            _ => (uniform_in_view(&mut contamination_rng, sp), DetectionLabel::Outlier),
        };
        detections.push(add_noise(&mut noise_rng, &det, sp));
        labels.push(label);
    }
    let scan = RadarScan::from_detections(detections, &sp.accuracy)?;
    Ok(SimulatedScan { scan, labels })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TrajectoryShape {
    /// Straight along world x.
    Line,
    /// Constant left turn of [`ARC_RADIUS`].
    Arc,
    /// One full horizontal loop climbing at [`RAMP_GRADE`].
    RampLoop,
}

pub const ARC_RADIUS: f64 = 60.0;
pub const RAMP_GRADE: f64 = 0.08;

/// Landmarks uniform in the path's bounding box grown by `margin` in x and y,
/// and spanning `height` in z around the path.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneParams {
    pub landmark_count: usize,
    /// Meters.
    pub margin: f64,
    /// Meters.
    pub height: f64,
}

impl Default for SceneParams {
    fn default() -> Self {
        Self {
            landmark_count: 3000,
            margin: 60.0,
            height: 20.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sequence {
    pub landmarks: Vec<Point3>,
    pub scans: Vec<SimulatedScan>,
    pub ground_truth: Trajectory,
}

impl Sequence {
    /// Pose of frame `k + 1` in frame `k`: the transform registering scan
    /// `k + 1` onto scan `k`.
    pub fn relative_ground_truth(&self, k: usize) -> RigidTransform {
        let poses = self.ground_truth.poses();
        poses[k].inverse().compose(&poses[k + 1])
    }
}

/// Heading yaw and climb pitch follow the path tangent; successive poses are
/// `step` apart along the path.
pub fn shape_poses(shape: TrajectoryShape, frame_count: usize, step: f64) -> Vec<RigidTransform> {
    let loop_radius = (frame_count as f64 * step * (1.0 - RAMP_GRADE * RAMP_GRADE).sqrt() / (2.0 * PI)).max(1e-9);
    (0..frame_count)
        .map(|k| {
            let s = k as f64 * step;
            let (position, yaw, pitch) = match shape {
                TrajectoryShape::Line => (Vector3::new(s, 0.0, 0.0), 0.0, 0.0),
                TrajectoryShape::Arc => {
                    let yaw = s / ARC_RADIUS;
                    (Vector3::new(ARC_RADIUS * yaw.sin(), ARC_RADIUS * (1.0 - yaw.cos()), 0.0), yaw, 0.0)
                }
                TrajectoryShape::RampLoop => {
                    let pitch = RAMP_GRADE.asin();
                    let horizontal = s * pitch.cos();
                    let yaw = horizontal / loop_radius;
                    (
                        Vector3::new(loop_radius * yaw.sin(), loop_radius * (1.0 - yaw.cos()), s * pitch.sin()),
                        yaw,
                        pitch,
                    )
                }
            };
            let rotation = RigidTransform::rot_z(yaw).compose(&RigidTransform::rot_y(-pitch));
            RigidTransform::from_parts(*rotation.rotation(), position)
        })
        .collect()
}

pub fn generate_sequence(
    scene: &SceneParams,
    shape: TrajectoryShape,
    frame_count: usize,
    step: f64,
    sp: &SensorParams,
    cp: &ContaminationParams,
    seed: u64,
) -> Result<Sequence> {
    if frame_count == 0 {
        return Err(Error::EmptyInput("frame_count"));
    }
    if !(step > 0.0) {
        return Err(Error::Domain(format!("step must be positive, got {step}")));
    }
    let poses = shape_poses(shape, frame_count, step);
    let (mut lo, mut hi) = (Vector3::repeat(f64::INFINITY), Vector3::repeat(f64::NEG_INFINITY));
    for p in &poses {
        lo = lo.inf(p.translation());
        hi = hi.sup(p.translation());
    }
    let grow = Vector3::new(scene.margin, scene.margin, 0.5 * scene.height);
    let landmarks = generate_scene_in_box(scene.landmark_count, lo - grow, hi + grow, seed);
    let scans = poses
        .par_iter()
        .enumerate()
        .map(|(k, pose)| simulate_scan(&landmarks, pose, sp, cp, frame_seed(seed, k as u64 + 1)))
        .collect::<Result<Vec<_>>>()?;
    let stamps = (0..frame_count).map(|k| k as f64 / FRAME_RATE).collect();
    Ok(Sequence {
        landmarks,
        scans,
        ground_truth: Trajectory::new(stamps, poses)?,
    })
}
