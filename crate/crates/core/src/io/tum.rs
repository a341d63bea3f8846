use std::io::{BufRead, Write};

use super::{fmt_float, malformed, parse_f64, IoError};
use crate::liegroup::{PoseSE3, Vec3};
use crate::trajectory::Trajectory;

/// One `timestamp tx ty tz qx qy qz qw` line.
pub fn write_tum_line<W: Write>(mut w: W, timestamp: f64, pose: &PoseSE3) -> Result<(), IoError> {
    let t = pose.translation();
    let [qx, qy, qz, qw] = pose.quaternion_xyzw();
    let fields = [timestamp, t.x, t.y, t.z, qx, qy, qz, qw].map(fmt_float);
    writeln!(w, "{}", fields.join(" "))?;
    Ok(())
}

pub fn write_tum<W: Write>(mut w: W, traj: &Trajectory) -> Result<(), IoError> {
    for (t, pose) in traj.iter() {
        write_tum_line(&mut w, *t, pose)?;
    }
    w.flush()?;
    Ok(())
}

/// Parses a TUM trajectory; `#` comments and blank lines are skipped.
pub fn read_tum<R: BufRead>(reader: R) -> Result<Trajectory, IoError> {
    let mut poses = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let tokens: Vec<&str> = line.split_whitespace().collect();
        if tokens.len() != 8 {
            return Err(malformed(format!(
                "TUM line {} has {} fields, expected 8",
                lineno + 1,
                tokens.len()
            )));
        }
        let v = tokens
            .iter()
            .map(|t| parse_f64(t, "TUM field"))
            .collect::<Result<Vec<f64>, _>>()?;
        poses.push((
            v[0],
            PoseSE3::from_xyzw(Vec3::new(v[1], v[2], v[3]), v[4], v[5], v[6], v[7]),
        ));
    }
    Trajectory::new(poses).map_err(|e| malformed(e.to_string()))
}
