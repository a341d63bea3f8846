mod localize;

use std::fs::File;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};

use obsloc_core::evaluation::{associate, ate, map_outlier_rate, MetricsReport};
use obsloc_core::io::{load_cloud_auto, read_tum, write_ply, write_priors, write_tum, write_tum_line};
use obsloc_core::liegroup::{PoseSE3, Vec3};
use obsloc_core::observability::{
    analyze, degeneracy_report, labels_for_scan, observability_scan, DegeneracyReport,
};
use obsloc_core::pointcloud::{ensure_shape, PointCloud, SpatialIndex};
use obsloc_core::registration::{
    find_correspondences, solve_registration, RegistrationConfig, RegistrationError,
};
use obsloc_core::scenes::synthesize;
use obsloc_core::trajectory::Trajectory;
use serde::Serialize;

pub use localize::localize;

use crate::config::{RegistrationOnly, RunConfig, Source};
use crate::error::CliError;
use crate::output::{create_dir, to_json, write_atomic, write_json};
use crate::{EvalArgs, RegisterArgs};

pub struct Globals {
    pub seed: Option<u64>,
    pub config: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl Globals {
    fn run_config(&self) -> Result<RunConfig, CliError> {
        let path = self
            .config
            .as_ref()
            .ok_or_else(|| CliError::input("this command needs --config <run.toml>"))?;
        RunConfig::load(path)
    }

    fn out_dir(&self, cfg: Option<&RunConfig>) -> PathBuf {
        self.out
            .clone()
            .or_else(|| cfg.and_then(|c| c.out.clone()))
            .unwrap_or_else(|| PathBuf::from("out"))
    }

    fn seed(&self, cfg: &RunConfig) -> u64 {
        self.seed.unwrap_or(cfg.seed)
    }
}

fn load_cloud(path: &Path) -> Result<PointCloud, CliError> {
    load_cloud_auto(path).map_err(|e| CliError::at(path, e))
}

fn load_trajectory(path: &Path) -> Result<Trajectory, CliError> {
    let file = File::open(path).map_err(|e| CliError::at(path, e))?;
    read_tum(BufReader::new(file)).map_err(|e| CliError::at(path, e))
}

pub(crate) fn save_cloud(path: &Path, cloud: &PointCloud) -> Result<(), CliError> {
    write_atomic(path, |w| write_ply(w, cloud))
}

pub(crate) fn scan_file_name(index: usize) -> String {
    format!("{index:04}.ply")
}

/// Ensures a target or map cloud carries normals and planarity.
pub(crate) fn with_shape(cloud: &PointCloud, k: usize, what: &str) -> Result<PointCloud, CliError> {
    ensure_shape(cloud, k).map_err(|e| CliError::Infeasible(format!("cannot estimate normals of the {what}: {e}")))
}

fn registration_error(err: RegistrationError) -> CliError {
    match err {
        RegistrationError::InvalidConfig(msg) => CliError::Input(msg),
        other => CliError::Infeasible(other.to_string()),
    }
}

pub fn synth(globals: &Globals) -> Result<(), CliError> {
    let cfg = globals.run_config()?;
    let Source::Scene(scene) = cfg.source() else {
        return Err(CliError::input("synth needs a [scene] section"));
    };
    let seed = globals.seed(&cfg);
    let seq = synthesize(scene, &cfg.sensor, &cfg.trajectory, &cfg.priors, seed)
        .map_err(|e| CliError::input(e.to_string()))?;
    let out = globals.out_dir(Some(&cfg));
    save_cloud(&out.join("map.ply"), &seq.map)?;
    let scans = out.join("scans");
    create_dir(&scans)?;
    for (i, (_, scan)) in seq.scans.iter().enumerate() {
        save_cloud(&scans.join(scan_file_name(i)), scan)?;
    }
    write_atomic(&out.join("gt_traj.txt"), |w| write_tum(w, &seq.ground_truth))?;
    write_atomic(&out.join("priors.csv"), |w| write_priors(w, &seq.priors))?;
    println!(
        "wrote {} map points, {} scans, {} poses and {} priors to {}",
        seq.map.len(),
        seq.scans.len(),
        seq.ground_truth.len(),
        seq.priors.len(),
        out.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct RegisterReport {
    /// `[x, y, z, qx, qy, qz, qw]`
    pose: [f64; 7],
    final_error: f64,
    iterations: usize,
    converged: bool,
    correspondences: usize,
    /// Alignment matrix and confidence at the initial pose.
    degeneracy: DegeneracyReport,
}

fn pose_fields(pose: &PoseSE3) -> [f64; 7] {
    let t = pose.translation();
    let [qx, qy, qz, qw] = pose.quaternion_xyzw();
    [t.x, t.y, t.z, qx, qy, qz, qw]
}

pub fn register(globals: &Globals, args: &RegisterArgs) -> Result<(), CliError> {
    let reg_cfg = match &globals.config {
        Some(path) => RegistrationOnly::load(path)?,
        None => RegistrationConfig::default(),
    };
    let init = match args.init.as_deref() {
        Some(&[x, y, z, qx, qy, qz, qw]) => {
            if !(qx * qx + qy * qy + qz * qz + qw * qw > 1e-12) {
                return Err(CliError::input("--init quaternion must be non-zero"));
            }
            PoseSE3::from_xyzw(Vec3::new(x, y, z), qx, qy, qz, qw)
        }
        Some(other) => return Err(CliError::input(format!("--init needs 7 values, got {}", other.len()))),
        None => PoseSE3::identity(),
    };
    let source = load_cloud(&args.source)?;
    let target = load_cloud(&args.target)?;
    if source.is_empty() {
        return Err(CliError::Infeasible("source cloud is empty".into()));
    }
    let target = with_shape(&target, args.normal_k, "target")?;
    let index = SpatialIndex::build(&target).map_err(|e| CliError::Infeasible(e.to_string()))?;
    let result = solve_registration(&source, &target, &index, &init, &reg_cfg).map_err(registration_error)?;

    let mut stdout = std::io::stdout().lock();
    let stamp = source.timestamp().unwrap_or(0.0);
    write_tum_line(&mut stdout, stamp, &result.pose).map_err(|e| CliError::input(e.to_string()))?;
    let _ = writeln!(stdout, "final_error {}", obsloc_core::io::fmt_float(result.final_error));
    let _ = writeln!(stdout, "iterations {}", result.iterations);
    let _ = writeln!(stdout, "converged {}", result.converged);

    if let Some(dir) = &args.report {
        let corrs = find_correspondences(&source, &index, &target, &init, reg_cfg.max_dist).map_err(registration_error)?;
        let analysis = analyze(&corrs, &init);
        let report = RegisterReport {
            pose: pose_fields(&result.pose),
            final_error: result.final_error,
            iterations: result.iterations,
            converged: result.converged,
            correspondences: result.correspondences_used,
            degeneracy: degeneracy_report(&result.alignment, &analysis.confidence),
        };
        write_json(&dir.join("degeneracy.json"), &report)?;
        let labels = labels_for_scan(source.len(), &corrs, &analysis.labels);
        let colored = observability_scan(&source.transformed(&result.pose), &labels)
            .map_err(|e| CliError::Infeasible(e.to_string()))?;
        save_cloud(&dir.join("observability.ply"), &colored)?;
        let _ = writeln!(
            stdout,
            "low_confidence {}",
            report
                .degeneracy
                .low_confidence
                .iter()
                .map(|l| l.name())
                .collect::<Vec<_>>()
                .join(",")
        );
    }
    Ok(())
}

pub fn eval(globals: &Globals, args: &EvalArgs) -> Result<(), CliError> {
    if !(args.threshold > 0.0) {
        return Err(CliError::input("--threshold must be positive"));
    }
    let est = load_trajectory(&args.est)?;
    let gt = load_trajectory(&args.gt)?;
    let pairs = associate(&est, &gt, args.max_dt).map_err(|e| CliError::input(e.to_string()))?;
    let ate_result = ate(&pairs, !args.no_align).map_err(|e| CliError::input(e.to_string()))?;

    let (outlier_fraction, n_points) = match (&args.built_map, &args.gt_map) {
        (Some(built), Some(gt_map)) => {
            let built = load_cloud(built)?;
            let gt_map_cloud = load_cloud(gt_map)?;
            let index = SpatialIndex::build(&gt_map_cloud).map_err(|e| CliError::at(gt_map, e))?;
            let quality = map_outlier_rate(&built, &index, args.threshold).map_err(|e| CliError::input(e.to_string()))?;
            (Some(quality.outlier_fraction), quality.points_evaluated)
        }
        _ => (None, 0),
    };
    let report = MetricsReport {
        ate_rmse: ate_result.rmse,
        outlier_fraction,
        threshold: args.threshold,
        n_points,
        n_poses: pairs.len(),
    };
    println!("{}", to_json(&report));
    write_json(&globals.out_dir(None).join("metrics.json"), &report)
}
