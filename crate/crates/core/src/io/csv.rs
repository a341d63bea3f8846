use std::io::{BufRead, Write};

use super::{fmt_float, malformed, parse_f64, IoError};
use crate::fusion::ScanReport;
use crate::liegroup::{PoseSE3, Vec3};
use crate::observability::ConfidenceCovariance;

pub const PRIORS_HEADER: &str = "timestamp,dx,dy,dz,qx,qy,qz,qw";
pub const CONFIDENCE_HEADER: &str = "timestamp,conf_x,conf_y,conf_z,conf_roll,conf_pitch,conf_yaw";
pub const REPORT_HEADER: &str =
    "index,timestamp,status,conf_x,conf_y,conf_z,conf_roll,conf_pitch,conf_yaw,\
min_eigenvalue,iterations,final_error,converged,correspondences,damped_iterations,\
w_roll,w_pitch,w_yaw,w_x,w_y,w_z,message";

/// Relative motions stamped with the timestamp of the later scan.
pub fn read_priors<R: BufRead>(reader: R) -> Result<Vec<(f64, PoseSE3)>, IoError> {
    let mut out = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if line.starts_with("timestamp") {
            if line.replace(' ', "") != PRIORS_HEADER {
                return Err(malformed(format!("unexpected priors header {line:?}")));
            }
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 8 {
            return Err(malformed(format!(
                "priors line {} has {} fields, expected 8",
                lineno + 1,
                fields.len()
            )));
        }
        let v = fields
            .iter()
            .map(|f| parse_f64(f, "prior field"))
            .collect::<Result<Vec<f64>, _>>()?;
        let qnorm = (v[4] * v[4] + v[5] * v[5] + v[6] * v[6] + v[7] * v[7]).sqrt();
        if !(qnorm > 1e-9) || !qnorm.is_finite() {
            return Err(malformed(format!(
                "priors line {} has a zero quaternion",
                lineno + 1
            )));
        }
        out.push((
            v[0],
            PoseSE3::from_xyzw(Vec3::new(v[1], v[2], v[3]), v[4], v[5], v[6], v[7]),
        ));
    }
    Ok(out)
}

pub fn write_priors<W: Write>(mut w: W, priors: &[(f64, PoseSE3)]) -> Result<(), IoError> {
    writeln!(w, "{PRIORS_HEADER}")?;
    for (t, pose) in priors {
        let d = pose.translation();
        let [qx, qy, qz, qw] = pose.quaternion_xyzw();
        let fields = [*t, d.x, d.y, d.z, qx, qy, qz, qw].map(fmt_float);
        writeln!(w, "{}", fields.join(","))?;
    }
    w.flush()?;
    Ok(())
}

fn confidence_fields(c: &ConfidenceCovariance) -> [String; 6] {
    [
        c.trans[0], c.trans[1], c.trans[2], c.rot[0], c.rot[1], c.rot[2],
    ]
    .map(fmt_float)
}

pub fn write_confidence_csv<W: Write>(
    mut w: W,
    rows: &[(f64, ConfidenceCovariance)],
) -> Result<(), IoError> {
    writeln!(w, "{CONFIDENCE_HEADER}")?;
    for (t, c) in rows {
        writeln!(w, "{},{}", fmt_float(*t), confidence_fields(c).join(","))?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_scan_reports<W: Write>(mut w: W, reports: &[ScanReport]) -> Result<(), IoError> {
    writeln!(w, "{REPORT_HEADER}")?;
    for r in reports {
        let weights = r.prior_weights.map(fmt_float).join(",");
        let message = r
            .message
            .as_deref()
            .unwrap_or("")
            .replace([',', '\n', '\r'], ";");
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            r.index,
            fmt_float(r.timestamp),
            r.status.as_str(),
            confidence_fields(&r.confidence).join(","),
            fmt_float(r.min_eigenvalue),
            r.iterations,
            fmt_float(r.final_error),
            r.converged,
            r.correspondences,
            r.damped_iterations,
            weights,
            message
        )?;
    }
    w.flush()?;
    Ok(())
}
