//! Plain-text file formats.
//!
//! * Scans: CSV with a required header, one detection per row. Spherical
//!   rows are `range_m,azimuth_rad,elevation_rad` optionally followed by
//!   `sigma_r,sigma_theta,sigma_phi`; Cartesian rows are `x,y,z` optionally
//!   followed by the upper triangle `cov_xx,cov_xy,cov_xz,cov_yy,cov_yz,cov_zz`.
//! * Trajectories: `timestamp tx ty tz qx qy qz qw` per line, blank lines and
//!   `#` comments ignored.
//! * Segment statistics: CSV `length,rpe_mean,rpe_std,rre_mean,rre_std,count`.
//! * Configuration: `key = value` lines with `#` comments.
//!
//! Every writer replaces its target atomically. Line numbers in errors are
//! 1-based and count the header.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3};

use crate::error::{Error, Result};
use crate::evaluation::{SegmentErrorStats, Trajectory};
use crate::geometry::{CovMatrix3, Point3, RigidTransform};
use crate::radar_model::{
    cartesian_to_spherical, repair_covariance, RadarScan, SphericalAccuracy, SphericalDetection,
};

pub const SPHERICAL_COLUMNS: [&str; 3] = ["range_m", "azimuth_rad", "elevation_rad"];
pub const SPHERICAL_SIGMA_COLUMNS: [&str; 3] = ["sigma_r", "sigma_theta", "sigma_phi"];
pub const CARTESIAN_COLUMNS: [&str; 3] = ["x", "y", "z"];
pub const CARTESIAN_COV_COLUMNS: [&str; 6] = ["cov_xx", "cov_xy", "cov_xz", "cov_yy", "cov_yz", "cov_zz"];
pub const STATS_HEADER: &str = "length,rpe_mean,rpe_std,rre_mean,rre_std,count";

const QUATERNION_NORM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ScanSchema {
    Spherical,
    Cartesian,
}

impl FromStr for ScanSchema {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "spherical" => Ok(Self::Spherical),
            "cartesian" => Ok(Self::Cartesian),
            other => Err(Error::Domain(format!("unknown scan schema '{other}'"))),
        }
    }
}

fn io_error(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn parse_error(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

/// Writes `contents` to a temporary file beside `path`, then renames it over
/// `path`.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_error(path))?;
    tmp.write_all(contents).map_err(io_error(path))?;
    tmp.flush().map_err(io_error(path))?;
    tmp.persist(path).map_err(|e| io_error(path)(e.error))?;
    Ok(())
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(io_error(path))
}

fn parse_fields(path: &Path, line: usize, text: &str, sep: impl Fn(&str) -> Vec<&str>) -> Result<Vec<f64>> {
    sep(text)
        .into_iter()
        .map(|field| {
            let field = field.trim();
            let value: f64 = field
                .parse()
                .map_err(|_| parse_error(path, line, format!("'{field}' is not a number")))?;
            if !value.is_finite() {
                return Err(parse_error(path, line, format!("'{field}' is not finite")));
            }
            Ok(value)
        })
        .collect()
}

fn split_csv(text: &str) -> Vec<&str> {
    text.split(',').collect()
}

/// Non-empty lines with their 1-based numbers.
fn numbered_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty())
}

fn check_header(path: &Path, header: Option<(usize, &str)>, base: &[&str], extra: &[&str]) -> Result<usize> {
    let (line, header) = header.ok_or_else(|| parse_error(path, 1, "missing header"))?;
    let names: Vec<&str> = header.split(',').map(str::trim).collect();
    let full: Vec<&str> = base.iter().chain(extra).copied().collect();
    if names == base || names == full {
        Ok(names.len())
    } else {
        Err(parse_error(
            path,
            line,
            format!("header must be '{}' or '{}'", base.join(","), full.join(",")),
        ))
    }
}

/// Reads a scan file. Spherical rows without sigma columns use
/// `default_accuracy`.
pub fn read_scan(path: &Path, schema: ScanSchema, default_accuracy: &SphericalAccuracy) -> Result<RadarScan> {
    parse_scan(&read_text(path)?, path, schema, default_accuracy)
}

/// As [`read_scan`] on in-memory text; `path` only labels errors.
pub fn parse_scan(
    text: &str,
    path: &Path,
    schema: ScanSchema,
    default_accuracy: &SphericalAccuracy,
) -> Result<RadarScan> {
    let mut lines = numbered_lines(text);
    match schema {
        ScanSchema::Spherical => {
            let columns = check_header(path, lines.next(), &SPHERICAL_COLUMNS, &SPHERICAL_SIGMA_COLUMNS)?;
            let mut detections = Vec::new();
            let mut accuracies = Vec::new();
            for (line, row) in lines {
                let v = parse_fields(path, line, row, split_csv)?;
                if v.len() != columns {
                    return Err(parse_error(path, line, format!("expected {columns} columns, found {}", v.len())));
                }
                let d = SphericalDetection::new(v[0], v[1], v[2]).map_err(|e| parse_error(path, line, e.to_string()))?;
                let acc = if columns == 6 {
                    SphericalAccuracy::new(v[3], v[4], v[5]).map_err(|e| parse_error(path, line, e.to_string()))?
                } else {
                    *default_accuracy
                };
                detections.push(d);
                accuracies.push(acc);
            }
            RadarScan::from_detections_with_accuracies(detections, &accuracies)
        }
        ScanSchema::Cartesian => {
            let columns = check_header(path, lines.next(), &CARTESIAN_COLUMNS, &CARTESIAN_COV_COLUMNS)?;
            let mut points = Vec::new();
            let mut covariances = Vec::new();
            for (line, row) in lines {
                let v = parse_fields(path, line, row, split_csv)?;
                if v.len() != columns {
                    return Err(parse_error(path, line, format!("expected {columns} columns, found {}", v.len())));
                }
                points.push(Point3::new(v[0], v[1], v[2]));
                let cov = if columns == 9 {
                    #[rustfmt::skip]
                    let c = Matrix3::new(
                        v[3], v[4], v[5],
                        v[4], v[6], v[7],
                        v[5], v[7], v[8],
                    );
                    repair_covariance(&c).map_err(|e| {
                        Error::InvariantViolation(format!("{}:{line}: {e}", path.display()))
                    })?
                } else {
                    CovMatrix3::zeros()
                };
                covariances.push(cov);
            }
            RadarScan::new(points, covariances)
        }
    }
}

/// Serializes a scan. Spherical output uses the scan's detections when
/// present and otherwise converts its points; covariances are not written
/// in that schema.
pub fn format_scan(scan: &RadarScan, schema: ScanSchema) -> Result<String> {
    let mut out = String::new();
    match schema {
        ScanSchema::Spherical => {
            out.push_str(&SPHERICAL_COLUMNS.join(","));
            out.push('\n');
            let converted: Vec<SphericalDetection>;
            let detections = match scan.detections() {
                Some(d) => d,
                None => {
                    converted = scan
                        .points()
                        .iter()
                        .enumerate()
                        .map(|(i, p)| {
                            cartesian_to_spherical(p).ok_or_else(|| {
                                Error::InvariantViolation(format!("point {i} is at the sensor origin"))
                            })
                        })
                        .collect::<Result<_>>()?;
                    &converted
                }
            };
            for d in detections {
                writeln!(out, "{},{},{}", d.range, d.azimuth, d.elevation).expect("string write");
            }
        }
        ScanSchema::Cartesian => {
            out.push_str(&CARTESIAN_COLUMNS.iter().chain(&CARTESIAN_COV_COLUMNS).copied().collect::<Vec<_>>().join(","));
            out.push('\n');
            for (p, c) in scan.points().iter().zip(scan.covariances()) {
                writeln!(
                    out,
                    "{},{},{},{},{},{},{},{},{}",
                    p.x,
                    p.y,
                    p.z,
                    c[(0, 0)],
                    c[(0, 1)],
                    c[(0, 2)],
                    c[(1, 1)],
                    c[(1, 2)],
                    c[(2, 2)]
                )
                .expect("string write");
            }
        }
    }
    Ok(out)
}

pub fn write_scan(path: &Path, scan: &RadarScan, schema: ScanSchema) -> Result<()> {
    write_atomic(path, format_scan(scan, schema)?.as_bytes())
}

pub fn read_trajectory(path: &Path) -> Result<Trajectory> {
    parse_trajectory(&read_text(path)?, path)
}

pub fn parse_trajectory(text: &str, path: &Path) -> Result<Trajectory> {
    let mut stamps = Vec::new();
    let mut poses = Vec::new();
    let mut last_line = 0;
    for (line, row) in numbered_lines(text).filter(|(_, l)| !l.starts_with('#')) {
        let v = parse_fields(path, line, row, |s| s.split_whitespace().collect())?;
        if v.len() != 8 {
            return Err(parse_error(path, line, format!("expected 8 fields, found {}", v.len())));
        }
        let q = Quaternion::new(v[7], v[4], v[5], v[6]);
        if (q.norm() - 1.0).abs() > QUATERNION_NORM_TOLERANCE {
            return Err(parse_error(path, line, format!("quaternion norm {} is not 1", q.norm())));
        }
        if stamps.last().is_some_and(|&prev| v[0] <= prev) {
            return Err(parse_error(path, line, "timestamps must be strictly increasing"));
        }
        stamps.push(v[0]);
        poses.push(RigidTransform::from_quaternion(
            UnitQuaternion::from_quaternion(q),
            Vector3::new(v[1], v[2], v[3]),
        ));
        last_line = line;
    }
    Trajectory::new(stamps, poses).map_err(|e| parse_error(path, last_line, e.to_string()))
}

pub fn format_trajectory(traj: &Trajectory) -> String {
    let mut out = String::new();
    for (t, pose) in traj.stamps().iter().zip(traj.poses()) {
        let p = pose.translation();
        let q = pose.quaternion();
        writeln!(out, "{} {} {} {} {} {} {} {}", t, p.x, p.y, p.z, q.i, q.j, q.k, q.w).expect("string write");
    }
    out
}

pub fn write_trajectory(path: &Path, traj: &Trajectory) -> Result<()> {
    write_atomic(path, format_trajectory(traj).as_bytes())
}

pub fn format_stats_csv(stats: &[SegmentErrorStats]) -> String {
    let mut out = String::from(STATS_HEADER);
    out.push('\n');
    for s in stats {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            s.segment_length, s.rpe_mean, s.rpe_std, s.rre_mean, s.rre_std, s.segment_count
        )
        .expect("string write");
    }
    out
}

pub fn write_stats_csv(path: &Path, stats: &[SegmentErrorStats]) -> Result<()> {
    write_atomic(path, format_stats_csv(stats).as_bytes())
}

pub fn read_config(path: &Path) -> Result<BTreeMap<String, String>> {
    parse_config(&read_text(path)?, path)
}

/// `key = value` pairs; later keys override earlier ones.
pub fn parse_config(text: &str, path: &Path) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (line, row) in numbered_lines(text) {
        let content = row.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let (key, value) = content
            .split_once('=')
            .ok_or_else(|| parse_error(path, line, "expected 'key = value'"))?;
        let key = key.trim();
        if key.is_empty() {
            return Err(parse_error(path, line, "empty key"));
        }
        map.insert(key.to_string(), value.trim().to_string());
    }
    Ok(map)
}
