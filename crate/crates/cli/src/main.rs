//! `radar-pcm`: register radar scans, run odometry, evaluate trajectories,
//! sweep PCM thresholds and generate synthetic data.
//!
//! Exit status is 0 on success, 1 on data errors and 2 on usage errors.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;

use radar_pcm::evaluation::{
    associate_by_timestamp, integrate_odometry, integrate_odometry_with_stamps, kitti_drift, segment_rpe_rre,
};
use radar_pcm::io::{self, ScanSchema};
use radar_pcm::radar_model::chi_square_threshold;
use radar_pcm::synth::{self, ContaminationParams, SceneParams, SensorParams, TrajectoryShape};
use radar_pcm::{
    register, Objective, PcmConfig, RadarScan, RegistrationConfig, RigidTransform, SphericalAccuracy, Trajectory,
};

const GROUND_TRUTH_FILE: &str = "groundtruth.txt";
const SWEEP_TAUS: [f64; 4] = [0.25, 0.50, 1.00, 3.86];
const SWEEP_ALPHAS: [f64; 8] = [0.016, 0.25, 1.00, 2.706, 3.86, 5.00, 6.63, 10.83];
const DEFAULT_LENGTHS: [f64; 6] = [1.0, 5.0, 10.0, 20.0, 50.0, 100.0];

/// A problem with flags or configuration, reported with exit status 2.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(message: impl Into<String>) -> anyhow::Error {
    UsageError(message.into()).into()
}

#[derive(Parser)]
#[command(name = "radar-pcm", version, about = "Radar point-cloud registration with pairwise consistency maximization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Register SOURCE onto TARGET and print the 4x4 transform.
    Register {
        source: PathBuf,
        target: PathBuf,
        #[command(flatten)]
        reg: RegistrationArgs,
    },
    /// Register consecutive scans of a directory and write the integrated trajectory.
    Odometry {
        scan_dir: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        /// Frame rate used to stamp poses, Hz.
        #[arg(long, default_value_t = synth::FRAME_RATE)]
        rate: f64,
        #[command(flatten)]
        reg: RegistrationArgs,
    },
    /// Compare an estimated trajectory against ground truth.
    Evaluate {
        #[arg(long)]
        est: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Segment-statistics CSV.
        #[arg(short, long)]
        output: PathBuf,
        /// Segment lengths in meters, comma separated.
        #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_LENGTHS)]
        lengths: Vec<f64>,
        /// Largest timestamp difference for pairing poses, seconds.
        #[arg(long, default_value_t = 0.005)]
        max_dt: f64,
    },
    /// Run odometry over a scan directory for each PCM threshold and write one CSV row per run.
    Sweep {
        scan_dir: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        /// Score kinds to sweep.
        #[arg(long = "scores", value_enum, default_value = "both")]
        scores: SweepScores,
        /// Raw-score thresholds, meters.
        #[arg(long, value_delimiter = ',', default_values_t = SWEEP_TAUS)]
        taus: Vec<f64>,
        /// Normalized-score thresholds.
        #[arg(long, value_delimiter = ',', default_values_t = SWEEP_ALPHAS)]
        alphas: Vec<f64>,
        /// Also run without PCM.
        #[arg(long)]
        baseline: bool,
        #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_LENGTHS)]
        lengths: Vec<f64>,
        #[command(flatten)]
        reg: RegistrationArgs,
    },
    /// Write a synthetic scan directory with ground truth.
    Synth {
        #[arg(short, long)]
        output: PathBuf,
        #[arg(long, default_value_t = 200)]
        frames: usize,
        /// Inter-frame travel, meters.
        #[arg(long, default_value_t = synth::DEFAULT_STEP)]
        step: f64,
        #[arg(long, value_enum, default_value = "line")]
        shape: ShapeArg,
        #[arg(long, default_value_t = 3000)]
        landmarks: usize,
        #[arg(long, default_value_t = 0.0)]
        outlier_fraction: f64,
        #[arg(long, default_value_t = 0.0)]
        ghost_fraction: f64,
        /// Multiplier on measurement noise; 0 writes exact detections.
        #[arg(long, default_value_t = 1.0)]
        noise_scale: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value = "spherical")]
        schema: SchemaArg,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ObjectiveArg {
    Pt2pt,
    Pt2plane,
    Gicp,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum PcmArg {
    Off,
    Raw,
    Norm,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SchemaArg {
    Spherical,
    Cartesian,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SweepScores {
    Raw,
    Norm,
    Both,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ShapeArg {
    Line,
    Arc,
    RampLoop,
}

/// Registration flags. Unset flags fall back to the `--config` file, then
/// to built-in defaults.
#[derive(Args, Default)]
struct RegistrationArgs {
    #[arg(long, value_enum)]
    objective: Option<ObjectiveArg>,
    #[arg(long, value_enum)]
    pcm: Option<PcmArg>,
    /// Raw-score threshold, meters.
    #[arg(long)]
    tau: Option<f64>,
    /// Normalized-score threshold.
    #[arg(long, conflicts_with = "confidence")]
    alpha: Option<f64>,
    /// Normalized-score threshold as a 1-dof chi-square confidence level.
    #[arg(long)]
    confidence: Option<f64>,
    /// Association gate, meters.
    #[arg(long)]
    max_assoc_dist: Option<f64>,
    #[arg(long)]
    max_iterations: Option<usize>,
    #[arg(long, value_enum)]
    schema: Option<SchemaArg>,
    /// `key = value` file using the flag names (underscores or dashes).
    #[arg(long)]
    config: Option<PathBuf>,
}

struct Settings {
    registration: RegistrationConfig,
    schema: ScanSchema,
    accuracy: SphericalAccuracy,
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| usage(format!("invalid value '{value}' for '{key}'")))
}

fn parse_enum<T: ValueEnum>(key: &str, value: &str) -> Result<T> {
    T::from_str(value, false).map_err(|_| usage(format!("invalid value '{value}' for '{key}'")))
}

const CONFIG_KEYS: [&str; 11] = [
    "objective",
    "pcm",
    "tau",
    "alpha",
    "confidence",
    "max_assoc_dist",
    "max_iterations",
    "schema",
    "sigma_range",
    "sigma_azimuth",
    "sigma_elevation",
];

impl RegistrationArgs {
    fn resolve(&self) -> Result<Settings> {
        let file: BTreeMap<String, String> = match &self.config {
            Some(path) => io::read_config(path)?
                .into_iter()
                .map(|(k, v)| (k.replace('-', "_"), v))
                .collect(),
            None => BTreeMap::new(),
        };
        if let Some(unknown) = file.keys().find(|k| !CONFIG_KEYS.contains(&k.as_str())) {
            return Err(usage(format!("unknown configuration key '{unknown}'")));
        }
        fn pick<T: Copy>(flag: Option<T>, file: &BTreeMap<String, String>, key: &str, parse: impl Fn(&str, &str) -> Result<T>) -> Result<Option<T>> {
            match flag {
                Some(v) => Ok(Some(v)),
                None => file.get(key).map(|v| parse(key, v)).transpose(),
            }
        }
        let objective = pick(self.objective, &file, "objective", parse_enum)?.unwrap_or(ObjectiveArg::Pt2pt);
        let tau = pick(self.tau, &file, "tau", parse_value)?;
        let to_alpha = |c: f64| chi_square_threshold(c).map_err(|e| usage(e.to_string()));
        let alpha = match (self.alpha, self.confidence) {
            (Some(a), _) => Some(a),
            (None, Some(c)) => Some(to_alpha(c)?),
            (None, None) => match (file.get("alpha"), file.get("confidence")) {
                (Some(_), Some(_)) => return Err(usage("configure either 'alpha' or 'confidence', not both")),
                (Some(a), None) => Some(parse_value("alpha", a)?),
                (None, Some(c)) => Some(to_alpha(parse_value("confidence", c)?)?),
                (None, None) => None,
            },
        };
        let pcm_kind = match pick(self.pcm, &file, "pcm", parse_enum)? {
            Some(kind) => kind,
            None if alpha.is_some() => PcmArg::Norm,
            None if tau.is_some() => PcmArg::Raw,
            None => PcmArg::Off,
        };
        let pcm = match pcm_kind {
            PcmArg::Off => None,
            PcmArg::Raw => Some(PcmConfig::raw(tau.unwrap_or(SWEEP_TAUS[0]))),
            PcmArg::Norm => Some(PcmConfig::normalized(alpha.unwrap_or(chi_square_threshold(0.95)?))),
        };
        let defaults = RegistrationConfig::default();
        let registration = RegistrationConfig {
            objective: match objective {
                ObjectiveArg::Pt2pt => Objective::PointToPoint,
                ObjectiveArg::Pt2plane => Objective::PointToPlane,
                ObjectiveArg::Gicp => Objective::Gicp,
            },
            pcm,
            max_association_distance: pick(self.max_assoc_dist, &file, "max_assoc_dist", parse_value)?
                .unwrap_or(defaults.max_association_distance),
            max_iterations: pick(self.max_iterations, &file, "max_iterations", parse_value)?
                .unwrap_or(defaults.max_iterations),
            ..defaults
        };
        registration.validate().map_err(|e| usage(e.to_string()))?;

        let schema = match pick(self.schema, &file, "schema", parse_enum)?.unwrap_or(SchemaArg::Spherical) {
            SchemaArg::Spherical => ScanSchema::Spherical,
            SchemaArg::Cartesian => ScanSchema::Cartesian,
        };
        let base = SphericalAccuracy::default();
        let sigma = |key: &str, fallback: f64| -> Result<f64> { Ok(pick(None, &file, key, parse_value)?.unwrap_or(fallback)) };
        let accuracy = SphericalAccuracy::new(
            sigma("sigma_range", base.sigma_range)?,
            sigma("sigma_azimuth", base.sigma_azimuth)?,
            sigma("sigma_elevation", base.sigma_elevation)?,
        )
        .map_err(|e| usage(e.to_string()))?;
        Ok(Settings {
            registration,
            schema,
            accuracy,
        })
    }
}

fn objective_name(o: Objective) -> &'static str {
    match o {
        Objective::PointToPoint => "ICP-Pt2Pt",
        Objective::PointToPlane => "ICP-Pt2Plane",
        Objective::Gicp => "GICP",
    }
}

/// `scan_*.csv` files of `dir`, sorted by name.
fn scan_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading scan directory {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("scan_") && n.ends_with(".csv"))
        })
        .collect();
    files.sort();
    if files.len() < 2 {
        bail!("{} holds {} scan_*.csv files; at least 2 are needed", dir.display(), files.len());
    }
    Ok(files)
}

fn load_scans(files: &[PathBuf], settings: &Settings) -> Result<Vec<RadarScan>> {
    files
        .par_iter()
        .map(|f| Ok(io::read_scan(f, settings.schema, &settings.accuracy)?))
        .collect()
}

/// Relative transform of scan k+1 in frame k for every consecutive pair.
fn pairwise(scans: &[RadarScan], cfg: &RegistrationConfig) -> Vec<radar_pcm::Result<RigidTransform>> {
    (0..scans.len() - 1)
        .into_par_iter()
        .map(|k| register(&scans[k + 1], &scans[k], cfg, &RigidTransform::identity()).map(|r| r.transform))
        .collect()
}

fn stamps(count: usize, rate: f64) -> Result<Vec<f64>> {
    if !(rate > 0.0 && rate.is_finite()) {
        return Err(usage(format!("--rate must be positive, got {rate}")));
    }
    Ok((0..count).map(|k| k as f64 / rate).collect())
}

fn cmd_register(source: &Path, target: &Path, reg: &RegistrationArgs) -> Result<()> {
    let settings = reg.resolve()?;
    let src = io::read_scan(source, settings.schema, &settings.accuracy)?;
    let tgt = io::read_scan(target, settings.schema, &settings.accuracy)?;
    let result = register(&src, &tgt, &settings.registration, &RigidTransform::identity())
        .with_context(|| format!("registering {} onto {}", source.display(), target.display()))?;
    let m = result.transform.to_matrix4();
    let mut out = String::from("transform:\n");
    for r in 0..4 {
        let row: Vec<String> = (0..4).map(|c| format!("{:.9}", m[(r, c)] + 0.0)).collect();
        writeln!(out, "  {}", row.join(" "))?;
    }
    let last = result.trace.last();
    writeln!(out, "iterations: {}", result.iterations)?;
    writeln!(out, "converged: {}", result.converged)?;
    writeln!(out, "associations: {}", last.map_or(0, |t| t.associations))?;
    writeln!(out, "inliers: {}", result.final_inlier_count)?;
    print!("{out}");
    Ok(())
}

fn cmd_odometry(scan_dir: &Path, output: &Path, rate: f64, reg: &RegistrationArgs) -> Result<()> {
    let settings = reg.resolve()?;
    let files = scan_files(scan_dir)?;
    let scans = load_scans(&files, &settings)?;
    let relatives = pairwise(&scans, &settings.registration)
        .into_iter()
        .enumerate()
        .map(|(k, r)| {
            r.with_context(|| format!("registering {} onto {}", files[k + 1].display(), files[k].display()))
        })
        .collect::<Result<Vec<_>>>()?;
    let traj = integrate_odometry_with_stamps(&relatives, stamps(scans.len(), rate)?)?;
    io::write_trajectory(output, &traj)?;
    eprintln!("wrote {} poses to {}", traj.len(), output.display());
    Ok(())
}

/// Requested lengths that fit the ground-truth path.
fn fitting_lengths(gt: &Trajectory, lengths: &[f64]) -> Result<Vec<f64>> {
    if let Some(bad) = lengths.iter().find(|l| !(**l > 0.0 && l.is_finite())) {
        return Err(usage(format!("segment lengths must be positive, got {bad}")));
    }
    let total = gt.total_length();
    let fit: Vec<f64> = lengths.iter().copied().filter(|&l| l <= total).collect();
    for skipped in lengths.iter().filter(|&&l| l > total) {
        eprintln!("warning: skipping {skipped} m segments; ground-truth path is {total:.3} m");
    }
    if fit.is_empty() {
        bail!("no requested segment length fits the {total:.3} m ground-truth path");
    }
    Ok(fit)
}

fn cmd_evaluate(est: &Path, gt: &Path, output: &Path, lengths: &[f64], max_dt: f64) -> Result<()> {
    let est = io::read_trajectory(est)?;
    let gt = io::read_trajectory(gt)?;
    let (est, gt) = associate_by_timestamp(&est, &gt, max_dt)?;
    let lengths = fitting_lengths(&gt, lengths)?;
    let stats = segment_rpe_rre(&est, &gt, &lengths)?;
    io::write_stats_csv(output, &stats)?;
    print!("{}", io::format_stats_csv(&stats));
    match kitti_drift(&est, &gt) {
        Ok((t_rel, r_rel)) => println!("t_rel_percent,r_rel_deg_per_100m\n{t_rel},{r_rel}"),
        Err(radar_pcm::Error::TooShort { available, .. }) => {
            println!("t_rel_percent,r_rel_deg_per_100m\n,");
            eprintln!("KITTI drift needs a 100 m path; ground truth covers {available:.3} m");
        }
        Err(e) => return Err(e.into()),
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_sweep(
    scan_dir: &Path,
    output: &Path,
    scores: SweepScores,
    taus: &[f64],
    alphas: &[f64],
    baseline: bool,
    lengths: &[f64],
    reg: &RegistrationArgs,
) -> Result<()> {
    let settings = reg.resolve()?;
    let files = scan_files(scan_dir)?;
    let scans = load_scans(&files, &settings)?;
    let gt_path = scan_dir.join(GROUND_TRUTH_FILE);
    let gt = io::read_trajectory(&gt_path)?;
    if gt.len() != scans.len() {
        bail!("{} has {} poses for {} scans", gt_path.display(), gt.len(), scans.len());
    }
    let lengths = fitting_lengths(&gt, lengths)?;

    let sorted = |v: &[f64]| {
        let mut v = v.to_vec();
        v.sort_by(f64::total_cmp);
        v
    };
    let mut runs: Vec<(String, Option<PcmConfig>)> = Vec::new();
    if baseline {
        runs.push(("none".into(), None));
    }
    if scores != SweepScores::Norm {
        runs.extend(sorted(taus).into_iter().map(|t| ("raw".into(), Some(PcmConfig::raw(t)))));
    }
    if scores != SweepScores::Raw {
        runs.extend(sorted(alphas).into_iter().map(|a| ("normalized".into(), Some(PcmConfig::normalized(a)))));
    }

    let method = objective_name(settings.registration.objective);
    let mut csv = String::from("method,score,threshold");
    for l in &lengths {
        write!(csv, ",rpe_{l}m_mean,rpe_{l}m_std,rre_{l}m_mean,rre_{l}m_std")?;
    }
    csv.push_str(",t_rel_percent,r_rel_deg_per_100m,failed_pairs\n");
    for (score, pcm) in runs {
        if let Some(p) = &pcm {
            p.validate().map_err(|e| usage(e.to_string()))?;
        }
        let cfg = RegistrationConfig {
            pcm,
            ..settings.registration
        };
        let results = pairwise(&scans, &cfg);
        let failed = results.iter().filter(|r| r.is_err()).count();
        let relatives: Vec<RigidTransform> = results.into_iter().map(|r| r.unwrap_or_default()).collect();
        // Poses pair with ground truth by frame index.
        let est = Trajectory::new(gt.stamps().to_vec(), integrate_odometry(&relatives).poses().to_vec())?;
        let stats = segment_rpe_rre(&est, &gt, &lengths)?;
        let label = if pcm.is_some() { format!("{method}+PCM") } else { method.to_string() };
        let threshold = pcm.map_or(String::new(), |p| p.threshold.to_string());
        write!(csv, "{label},{score},{threshold}")?;
        for s in &stats {
            write!(csv, ",{},{},{},{}", s.rpe_mean, s.rpe_std, s.rre_mean, s.rre_std)?;
        }
        match kitti_drift(&est, &gt) {
            Ok((t, r)) => writeln!(csv, ",{t},{r},{failed}")?,
            Err(_) => writeln!(csv, ",,,{failed}")?,
        }
    }
    io::write_atomic(output, csv.as_bytes())?;
    print!("{csv}");
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_synth(
    output: &Path,
    frames: usize,
    step: f64,
    shape: ShapeArg,
    landmarks: usize,
    outlier_fraction: f64,
    ghost_fraction: f64,
    noise_scale: f64,
    seed: u64,
    schema: SchemaArg,
) -> Result<()> {
    let sp = SensorParams {
        noise_scale,
        ..SensorParams::default()
    };
    sp.validate().map_err(|e| usage(e.to_string()))?;
    let cp = ContaminationParams {
        outlier_fraction,
        ghost_fraction,
        seed,
    };
    cp.validate().map_err(|e| usage(e.to_string()))?;
    if frames < 2 {
        return Err(usage("--frames must be at least 2"));
    }
    let shape = match shape {
        ShapeArg::Line => TrajectoryShape::Line,
        ShapeArg::Arc => TrajectoryShape::Arc,
        ShapeArg::RampLoop => TrajectoryShape::RampLoop,
    };
    let scene = SceneParams {
        landmark_count: landmarks,
        ..SceneParams::default()
    };
    let seq = synth::generate_sequence(&scene, shape, frames, step, &sp, &cp, seed)?;
    fs::create_dir_all(output).with_context(|| format!("creating {}", output.display()))?;
    let schema = match schema {
        SchemaArg::Spherical => ScanSchema::Spherical,
        SchemaArg::Cartesian => ScanSchema::Cartesian,
    };
    seq.scans.par_iter().enumerate().try_for_each(|(k, s)| {
        io::write_scan(&output.join(format!("scan_{k:06}.csv")), &s.scan, schema)
    })?;
    io::write_trajectory(&output.join(GROUND_TRUTH_FILE), &seq.ground_truth)?;
    eprintln!("wrote {frames} scans and {GROUND_TRUTH_FILE} to {}", output.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Register { source, target, reg } => cmd_register(&source, &target, &reg),
        Command::Odometry { scan_dir, output, rate, reg } => cmd_odometry(&scan_dir, &output, rate, &reg),
        Command::Evaluate { est, gt, output, lengths, max_dt } => cmd_evaluate(&est, &gt, &output, &lengths, max_dt),
        Command::Sweep { scan_dir, output, scores, taus, alphas, baseline, lengths, reg } => {
            cmd_sweep(&scan_dir, &output, scores, &taus, &alphas, baseline, &lengths, &reg)
        }
        Command::Synth {
            output,
            frames,
            step,
            shape,
            landmarks,
            outlier_fraction,
            ghost_fraction,
            noise_scale,
            seed,
            schema,
        } => cmd_synth(&output, frames, step, shape, landmarks, outlier_fraction, ghost_fraction, noise_scale, seed, schema),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
