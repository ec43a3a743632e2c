//! Spherical radar measurement model.
//!
//! Convention: azimuth is measured in the x-y plane from +x toward +y,
//! elevation from the x-y plane toward +z, so `(θ, φ) = (0, 0)` is the
//! boresight +x axis.
//!
//! Cartesian covariances come from first-order propagation of the diagonal
//! spherical covariance, `Σ_e = J Σ_d Jᵀ`, with `J` the Jacobian of the
//! spherical-to-Cartesian map at the measured detection.

use std::f64::consts::{FRAC_PI_2, PI};

use nalgebra::{Matrix3, Vector3};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::geometry::{CovMatrix3, Point3, RigidTransform};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SphericalDetection {
    /// Range in meters, strictly positive.
    pub range: f64,
    /// Azimuth in radians, `(−π, π]`.
    pub azimuth: f64,
    /// Elevation in radians, `[−π/2, π/2]`.
    pub elevation: f64,
}

impl SphericalDetection {
    pub fn new(range: f64, azimuth: f64, elevation: f64) -> Result<Self> {
        let d = Self {
            range,
            azimuth,
            elevation,
        };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.range.is_finite() && self.range > 0.0) {
            return Err(Error::InvariantViolation(format!(
                "range must be positive and finite, got {}",
                self.range
            )));
        }
        if !(self.azimuth > -PI && self.azimuth <= PI) {
            return Err(Error::InvariantViolation(format!(
                "azimuth {} outside (-pi, pi]",
                self.azimuth
            )));
        }
        if !(-FRAC_PI_2..=FRAC_PI_2).contains(&self.elevation) {
            return Err(Error::InvariantViolation(format!(
                "elevation {} outside [-pi/2, pi/2]",
                self.elevation
            )));
        }
        Ok(())
    }
}

/// One-sigma accuracies of the three spherical measurement channels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SphericalAccuracy {
    pub sigma_range: f64,
    pub sigma_azimuth: f64,
    pub sigma_elevation: f64,
}

impl Default for SphericalAccuracy {
    /// Placeholder sensor accuracies (0.15 m, 0.1°, 0.5°). Not calibrated
    /// against any particular device; override them for real data.
    fn default() -> Self {
        Self {
            sigma_range: 0.15,
            sigma_azimuth: 0.1_f64.to_radians(),
            sigma_elevation: 0.5_f64.to_radians(),
        }
    }
}

impl SphericalAccuracy {
    pub fn new(sigma_range: f64, sigma_azimuth: f64, sigma_elevation: f64) -> Result<Self> {
        let acc = Self {
            sigma_range,
            sigma_azimuth,
            sigma_elevation,
        };
        acc.validate()?;
        Ok(acc)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("sigma_r", self.sigma_range),
            ("sigma_theta", self.sigma_azimuth),
            ("sigma_phi", self.sigma_elevation),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvariantViolation(format!(
                    "{name} must be positive, got {v}"
                )));
            }
        }
        Ok(())
    }

    /// The diagonal spherical covariance `diag(σ_r², σ_θ², σ_φ²)`.
    pub fn covariance(&self) -> CovMatrix3 {
        Matrix3::from_diagonal(&Vector3::new(
            self.sigma_range.powi(2),
            self.sigma_azimuth.powi(2),
            self.sigma_elevation.powi(2),
        ))
    }
}

/// Cartesian points with per-point covariances, optionally carrying the
/// spherical detections they were derived from.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RadarScan {
    points: Vec<Point3>,
    covariances: Vec<CovMatrix3>,
    detections: Option<Vec<SphericalDetection>>,
}

impl RadarScan {
    pub fn new(points: Vec<Point3>, covariances: Vec<CovMatrix3>) -> Result<Self> {
        if points.len() != covariances.len() {
            return Err(Error::InvariantViolation(format!(
                "{} points but {} covariances",
                points.len(),
                covariances.len()
            )));
        }
        for (i, p) in points.iter().enumerate() {
            if !p.coords.iter().all(|c| c.is_finite()) {
                return Err(Error::InvariantViolation(format!("point {i} is not finite")));
            }
        }
        let covariances = covariances
            .into_iter()
            .enumerate()
            .map(|(i, c)| {
                repair_covariance(&c).map_err(|e| Error::InvariantViolation(format!("covariance {i}: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            points,
            covariances,
            detections: None,
        })
    }

    /// Points with all-zero covariances.
    pub fn from_points(points: Vec<Point3>) -> Result<Self> {
        let covariances = vec![CovMatrix3::zeros(); points.len()];
        Self::new(points, covariances)
    }

    /// Converts detections with a shared accuracy.
    pub fn from_detections(detections: Vec<SphericalDetection>, accuracy: &SphericalAccuracy) -> Result<Self> {
        let accuracies = vec![*accuracy; detections.len()];
        Self::from_detections_with_accuracies(detections, &accuracies)
    }

    pub fn from_detections_with_accuracies(
        detections: Vec<SphericalDetection>,
        accuracies: &[SphericalAccuracy],
    ) -> Result<Self> {
        if detections.len() != accuracies.len() {
            return Err(Error::InvariantViolation(format!(
                "{} detections but {} accuracies",
                detections.len(),
                accuracies.len()
            )));
        }
        for d in &detections {
            d.validate()?;
        }
        let points = detections.iter().map(spherical_to_cartesian).collect();
        let covariances = detections
            .iter()
            .zip(accuracies)
            .map(|(d, a)| propagate_covariance(d, a))
            .collect();
        let mut scan = Self::new(points, covariances)?;
        scan.detections = Some(detections);
        Ok(scan)
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

    pub fn covariances(&self) -> &[CovMatrix3] {
        &self.covariances
    }

    pub fn detections(&self) -> Option<&[SphericalDetection]> {
        self.detections.as_deref()
    }

    /// Moves every point by `t` and rotates its covariance (`R Σ Rᵀ`). The
    /// spherical detections no longer describe the result and are dropped.
    pub fn transformed(&self, t: &RigidTransform) -> RadarScan {
        RadarScan {
            points: self.points.iter().map(|p| t.apply(p)).collect(),
            covariances: self.covariances.iter().map(|c| t.rotate_covariance(c)).collect(),
            detections: None,
        }
    }
}

pub fn spherical_to_cartesian(d: &SphericalDetection) -> Point3 {
    let (sin_az, cos_az) = d.azimuth.sin_cos();
    let (sin_el, cos_el) = d.elevation.sin_cos();
    Point3::new(
        d.range * cos_el * cos_az,
        d.range * cos_el * sin_az,
        d.range * sin_el,
    )
}

/// Inverse of [`spherical_to_cartesian`]; `None` at the origin.
pub fn cartesian_to_spherical(p: &Point3) -> Option<SphericalDetection> {
    let range = p.coords.norm();
    if range == 0.0 {
        return None;
    }
    let azimuth = p.y.atan2(p.x);
    // atan2 returns −π for (−x, −0.0); keep the half-open interval.
    let azimuth = if azimuth <= -PI { PI } else { azimuth };
    let elevation = (p.z / range).clamp(-1.0, 1.0).asin();
    Some(SphericalDetection {
        range,
        azimuth,
        elevation,
    })
}

/// `∂(x, y, z) / ∂(r, θ, φ)` evaluated at `d`. Columns follow `(r, θ, φ)`.
#[rustfmt::skip]
pub fn spherical_jacobian(d: &SphericalDetection) -> Matrix3<f64> {
    let r = d.range;
    let (sa, ca) = d.azimuth.sin_cos();
    let (se, ce) = d.elevation.sin_cos();
    Matrix3::new(
        ce * ca, -r * ce * sa, -r * se * ca,
        ce * sa, r * ce * ca, -r * se * sa,
        se, 0.0, r * ce,
    )
}

pub fn propagate_covariance(d: &SphericalDetection, acc: &SphericalAccuracy) -> CovMatrix3 {
    let j = spherical_jacobian(d);
    let c = j * acc.covariance() * j.transpose();
    (c + c.transpose()) * 0.5
}

/// Chi-square quantile with one degree of freedom, computed as the squared
/// standard-normal quantile at `(1 + confidence) / 2`.
pub fn chi_square_threshold(confidence: f64) -> Result<f64> {
    if !(confidence > 0.0 && confidence < 1.0) {
        return Err(Error::Domain(format!(
            "confidence must lie in (0, 1), got {confidence}"
        )));
    }
    let z = Normal::standard().inverse_cdf(0.5 * (1.0 + confidence));
    Ok(z * z)
}

/// Checks symmetry and positive semidefiniteness. Eigenvalues that are
/// negative by less than `1e-12·trace` are clamped to zero; anything worse
/// is rejected.
pub fn repair_covariance(c: &CovMatrix3) -> Result<CovMatrix3> {
    if !c.iter().all(|v| v.is_finite()) {
        return Err(Error::InvariantViolation("non-finite covariance entry".into()));
    }
    let scale = c.abs().max();
    if scale == 0.0 {
        return Ok(*c);
    }
    if (c - c.transpose()).abs().max() > 1e-12 * scale {
        return Err(Error::InvariantViolation("covariance is not symmetric".into()));
    }
    let sym = (c + c.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let floor = -1e-12 * sym.trace().abs().max(scale);
    if eig.eigenvalues.iter().all(|&l| l >= 0.0) {
        return Ok(sym);
    }
    if eig.eigenvalues.iter().any(|&l| l < floor) {
        return Err(Error::InvariantViolation(format!(
            "covariance is not positive semidefinite (eigenvalues {:?})",
            eig.eigenvalues.as_slice()
        )));
    }
    let clamped = eig.eigenvalues.map(|l| l.max(0.0));
    let fixed = eig.eigenvectors * Matrix3::from_diagonal(&clamped) * eig.eigenvectors.transpose();
    Ok((fixed + fixed.transpose()) * 0.5)
}
