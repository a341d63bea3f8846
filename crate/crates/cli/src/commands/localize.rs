use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use obsloc_core::evaluation::build_map;
use obsloc_core::fusion::{Localizer, LocalizerConfig, PriorTable, ScanReport, ScanStatus};
use obsloc_core::io::{
    load_cloud_auto, read_priors, write_confidence_csv, write_priors, write_scan_reports, write_tum,
};
use obsloc_core::liegroup::PoseSE3;
use obsloc_core::observability::{labels_for_scan, observability_scan};
use obsloc_core::pointcloud::{PointCloud, DEFAULT_NORMAL_K};
use obsloc_core::scenes::synthesize;
use obsloc_core::trajectory::Trajectory;

use super::{save_cloud, scan_file_name, with_shape, Globals};
use crate::config::{InputConfig, RunConfig, Source};
use crate::error::CliError;
use crate::output::{create_dir, write_atomic};
use crate::LocalizeArgs;

/// A scan slot of the sequence; unreadable files keep their error message.
struct ScanSlot {
    timestamp: f64,
    cloud: Result<PointCloud, String>,
}

struct Inputs {
    map: PointCloud,
    scans: Vec<ScanSlot>,
    priors: Vec<(f64, PoseSE3)>,
    initial_pose: PoseSE3,
}

/// Fills unknown timestamps by linear interpolation between the nearest
/// known neighbors, extrapolating with the median spacing at the ends. With
/// no timestamp at all, scan `i` gets `i` seconds.
fn fill_timestamps(stamps: &[Option<f64>]) -> Vec<f64> {
    let known: Vec<(usize, f64)> = stamps
        .iter()
        .enumerate()
        .filter_map(|(i, t)| t.map(|t| (i, t)))
        .collect();
    if known.is_empty() {
        return (0..stamps.len()).map(|i| i as f64).collect();
    }
    let mut steps: Vec<f64> = known
        .windows(2)
        .map(|w| (w[1].1 - w[0].1) / (w[1].0 - w[0].0) as f64)
        .collect();
    steps.sort_by(f64::total_cmp);
    let step = steps.get(steps.len() / 2).copied().unwrap_or(1.0);
    (0..stamps.len())
        .map(|i| {
            if let Some(t) = stamps[i] {
                return t;
            }
            let before = known.iter().rev().find(|(j, _)| *j < i);
            let after = known.iter().find(|(j, _)| *j > i);
            match (before, after) {
                (Some(&(a, ta)), Some(&(b, tb))) => ta + (tb - ta) * (i - a) as f64 / (b - a) as f64,
                (Some(&(a, ta)), None) => ta + step * (i - a) as f64,
                (None, Some(&(b, tb))) => tb - step * (b - i) as f64,
                (None, None) => unreachable!("at least one known timestamp"),
            }
        })
        .collect()
}

fn scan_paths(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let entries = std::fs::read_dir(dir).map_err(|e| CliError::at(dir, e))?;
    let mut paths = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| CliError::at(dir, e))?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase());
        if matches!(ext.as_deref(), Some("ply" | "pcd")) {
            paths.push(path);
        }
    }
    paths.sort();
    if paths.is_empty() {
        return Err(CliError::at(dir, "no .ply or .pcd scans found"));
    }
    Ok(paths)
}

fn read_inputs(input: &InputConfig) -> Result<Inputs, CliError> {
    let map = load_cloud_auto(&input.map).map_err(|e| CliError::at(&input.map, e))?;
    let map = with_shape(&map, DEFAULT_NORMAL_K, "map")?;
    let loaded: Vec<Result<PointCloud, String>> = scan_paths(&input.scans)?
        .iter()
        .map(|p| load_cloud_auto(p).map_err(|e| format!("{}: {e}", p.display())))
        .collect();
    let stamps: Vec<Option<f64>> = loaded
        .iter()
        .map(|c| c.as_ref().ok().and_then(|c| c.timestamp()))
        .collect();
    let scans = fill_timestamps(&stamps)
        .into_iter()
        .zip(loaded)
        .map(|(timestamp, cloud)| ScanSlot { timestamp, cloud })
        .collect();
    let priors = match &input.priors {
        Some(path) => {
            let file = File::open(path).map_err(|e| CliError::at(path, e))?;
            read_priors(BufReader::new(file)).map_err(|e| CliError::at(path, e))?
        }
        None => Vec::new(),
    };
    Ok(Inputs {
        map,
        scans,
        priors,
        initial_pose: input.initial_pose(),
    })
}

/// Synthesizes the sequence in memory; ground truth and map are written next
/// to the results so `eval` can run on them.
fn synthetic_inputs(cfg: &RunConfig, seed: u64, out: &Path) -> Result<Inputs, CliError> {
    let Source::Scene(scene) = cfg.source() else {
        unreachable!("called for scene configs only")
    };
    let seq = synthesize(scene, &cfg.sensor, &cfg.trajectory, &cfg.priors, seed)
        .map_err(|e| CliError::input(e.to_string()))?;
    write_atomic(&out.join("gt_traj.txt"), |w| write_tum(w, &seq.ground_truth))?;
    write_atomic(&out.join("priors.csv"), |w| write_priors(w, &seq.priors))?;
    save_cloud(&out.join("map.ply"), &seq.map)?;
    let initial_pose = seq
        .ground_truth
        .poses()
        .first()
        .map(|(_, p)| *p)
        .unwrap_or_else(PoseSE3::identity);
    Ok(Inputs {
        map: seq.map,
        scans: seq
            .scans
            .into_iter()
            .map(|(timestamp, cloud)| ScanSlot {
                timestamp,
                cloud: Ok(cloud),
            })
            .collect(),
        priors: seq.priors,
        initial_pose,
    })
}

pub fn localize(globals: &Globals, args: &LocalizeArgs) -> Result<(), CliError> {
    let cfg = globals.run_config()?;
    let out = globals.out_dir(Some(&cfg));
    create_dir(&out)?;
    let inputs = match cfg.source() {
        Source::Scene(_) => synthetic_inputs(&cfg, globals.seed(&cfg), &out)?,
        Source::Input(input) => read_inputs(input)?,
    };
    let use_prior = cfg.localize.use_prior && !args.no_prior;
    let every = args.every.unwrap_or(cfg.localize.observability_every);
    let loc_cfg = LocalizerConfig {
        registration: cfg.registration.clone(),
        use_prior,
        prior_time_tolerance: cfg.localize.prior_time_tolerance,
    };
    let priors = PriorTable::new(inputs.priors);
    let mut localizer = Localizer::new(&inputs.map, loc_cfg, inputs.initial_pose)
        .map_err(|e| CliError::Infeasible(e.to_string()))?;

    let mut trajectory = Trajectory::default();
    let mut reports: Vec<ScanReport> = Vec::with_capacity(inputs.scans.len());
    let mut placed: Vec<(&PointCloud, PoseSE3)> = Vec::new();
    let obs_dir = out.join("observability");
    for (i, slot) in inputs.scans.iter().enumerate() {
        let prior = priors.lookup(slot.timestamp, cfg.localize.prior_time_tolerance);
        let report = match &slot.cloud {
            Ok(scan) => {
                let outcome = localizer.step(slot.timestamp, scan, prior);
                if every > 0 && i % every == 0 && outcome.report.status == ScanStatus::Ok {
                    let labels = labels_for_scan(scan.len(), &outcome.correspondences, &outcome.observability.labels);
                    let colored = observability_scan(&scan.transformed(&outcome.pose), &labels)
                        .map_err(|e| CliError::Infeasible(e.to_string()))?
                        .with_timestamp(Some(slot.timestamp));
                    save_cloud(&obs_dir.join(scan_file_name(i)), &colored)?;
                }
                placed.push((scan, outcome.pose));
                outcome.report
            }
            Err(msg) => localizer.skip(slot.timestamp, prior, format!("unreadable scan: {msg}")),
        };
        trajectory
            .push(slot.timestamp, report.pose)
            .map_err(|e| CliError::input(format!("scan {i}: {e}")))?;
        reports.push(report);
    }

    write_atomic(&out.join("est_traj.txt"), |w| write_tum(w, &trajectory))?;
    write_atomic(&out.join("scan_report.csv"), |w| write_scan_reports(w, &reports))?;
    let confidence: Vec<_> = reports.iter().map(|r| (r.timestamp, r.confidence)).collect();
    write_atomic(&out.join("confidence.csv"), |w| write_confidence_csv(w, &confidence))?;
    let built = build_map(placed.iter().map(|(scan, pose)| (*scan, pose)));
    save_cloud(&out.join("built_map.ply"), &built)?;

    let count = |s: ScanStatus| reports.iter().filter(|r| r.status == s).count();
    let (ok, failed, skipped) = (count(ScanStatus::Ok), count(ScanStatus::Failed), count(ScanStatus::Skipped));
    println!(
        "localized {} scans ({ok} ok, {failed} failed, {skipped} skipped, priors {}) into {}",
        reports.len(),
        if use_prior { "on" } else { "off" },
        out.display()
    );
    if 2 * (failed + skipped) > reports.len() {
        return Err(CliError::SequenceFailed(format!(
            "{} of {} scans did not register",
            failed + skipped,
            reports.len()
        )));
    }
    Ok(())
}
