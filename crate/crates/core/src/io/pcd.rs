use std::io::BufRead;

use super::{malformed, parse_f64, IoError};
use crate::liegroup::Vec3;
use crate::pointcloud::PointCloud;

/// Reads an ASCII PCD (v0.7) file. Needs `x y z` fields; `normal_x normal_y
/// normal_z` are loaded when present. Rows with NaN coordinates are dropped.
pub fn read_pcd<R: BufRead>(reader: R) -> Result<PointCloud, IoError> {
    let mut lines = reader.lines();
    let mut fields: Vec<String> = Vec::new();
    let mut counts: Vec<usize> = Vec::new();
    let mut points_decl: Option<usize> = None;
    let mut width_height: (Option<usize>, Option<usize>) = (None, None);

    loop {
        let line = lines
            .next()
            .transpose()?
            .ok_or_else(|| malformed("PCD header ended before DATA"))?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut tokens = line.split_whitespace();
        let key = tokens.next().unwrap_or_default().to_ascii_uppercase();
        let rest: Vec<&str> = tokens.collect();
        let count = |v: &str| -> Result<usize, IoError> {
            v.parse()
                .map_err(|_| malformed(format!("bad {key} value {v:?}")))
        };
        match key.as_str() {
            "VERSION" | "SIZE" | "TYPE" | "VIEWPOINT" => {}
            "FIELDS" => fields = rest.iter().map(|s| s.to_string()).collect(),
            "COUNT" => counts = rest.iter().map(|v| count(v)).collect::<Result<_, _>>()?,
            "WIDTH" => width_height.0 = Some(count(rest.first().copied().unwrap_or(""))?),
            "HEIGHT" => width_height.1 = Some(count(rest.first().copied().unwrap_or(""))?),
            "POINTS" => points_decl = Some(count(rest.first().copied().unwrap_or(""))?),
            "DATA" => match rest.first().map(|s| s.to_ascii_lowercase()).as_deref() {
                Some("ascii") => break,
                Some(other) => return Err(IoError::UnsupportedFormat(format!("PCD DATA {other}"))),
                None => return Err(malformed("DATA line without encoding")),
            },
            _ => return Err(malformed(format!("unrecognized PCD header line {line:?}"))),
        }
    }

    if counts.is_empty() {
        counts = vec![1; fields.len()];
    }
    if counts.len() != fields.len() {
        return Err(malformed("COUNT and FIELDS disagree in length"));
    }
    // column offset of each field's first value
    let mut offsets = Vec::with_capacity(fields.len());
    let mut width = 0;
    for c in &counts {
        offsets.push(width);
        width += c;
    }
    let column = |name: &str| fields.iter().position(|f| f == name).map(|i| offsets[i]);
    let xyz = match (column("x"), column("y"), column("z")) {
        (Some(x), Some(y), Some(z)) => [x, y, z],
        _ => return Err(malformed("PCD FIELDS lack x y z")),
    };
    let normal_cols = match (column("normal_x"), column("normal_y"), column("normal_z")) {
        (Some(x), Some(y), Some(z)) => Some([x, y, z]),
        _ => None,
    };
    let expected = match (points_decl, width_height) {
        (Some(n), _) => n,
        (None, (Some(w), Some(h))) => w * h,
        _ => {
            return Err(malformed(
                "PCD header declares neither POINTS nor WIDTH/HEIGHT",
            ))
        }
    };

    let mut points = Vec::with_capacity(expected);
    let mut normals = Vec::new();
    let mut rows = 0usize;
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        rows += 1;
        if rows > expected {
            return Err(malformed(format!(
                "PCD declares {expected} points but has more rows"
            )));
        }
        let tokens: Vec<&str> = line.split_whitespace().collect();
        if tokens.len() != width {
            return Err(malformed(format!(
                "PCD row {rows} has {} values, expected {width}",
                tokens.len()
            )));
        }
        let read3 = |cols: [usize; 3], what: &str| -> Result<Vec3, IoError> {
            Ok(Vec3::new(
                parse_f64(tokens[cols[0]], what)?,
                parse_f64(tokens[cols[1]], what)?,
                parse_f64(tokens[cols[2]], what)?,
            ))
        };
        let p = read3(xyz, "coordinate")?;
        if p.iter().any(|v| v.is_nan()) {
            continue;
        }
        points.push(p);
        if let Some(cols) = normal_cols {
            let n = read3(cols, "normal")?;
            let norm = n.norm();
            normals.push(if norm.is_finite() && norm > 1e-12 {
                n / norm
            } else {
                Vec3::zeros()
            });
        }
    }
    if rows != expected {
        return Err(malformed(format!(
            "PCD declares {expected} points but has {rows} rows"
        )));
    }
    let cloud = PointCloud::new(points);
    Ok(if normal_cols.is_some() {
        cloud.with_normals(normals)?
    } else {
        cloud
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const HEADER: &str = "# .PCD v0.7 - Point Cloud Data file format\nVERSION 0.7\nFIELDS x y z\n\
        SIZE 4 4 4\nTYPE F F F\nCOUNT 1 1 1\nWIDTH 3\nHEIGHT 1\nVIEWPOINT 0 0 0 1 0 0 0\n\
        POINTS 3\nDATA ascii\n";

    #[test]
    fn reads_ascii_xyz() {
        let text = format!("{HEADER}1 2 3\n4 5 6\n7 8 9\n");
        let cloud = read_pcd(text.as_bytes()).unwrap();
        assert_eq!(cloud.len(), 3);
        assert_eq!(cloud.points()[1], Vec3::new(4.0, 5.0, 6.0));
    }

    #[test]
    fn row_count_mismatch_is_malformed() {
        let text = format!("{HEADER}1 2 3\n4 5 6\n");
        assert!(matches!(
            read_pcd(text.as_bytes()),
            Err(IoError::MalformedFile(_))
        ));
        let text = format!("{HEADER}1 2 3\n4 5 6\n7 8 9\n1 1 1\n");
        assert!(matches!(
            read_pcd(text.as_bytes()),
            Err(IoError::MalformedFile(_))
        ));
    }

    #[test]
    fn binary_data_is_unsupported() {
        let text = HEADER.replace("DATA ascii", "DATA binary");
        assert!(matches!(
            read_pcd(text.as_bytes()),
            Err(IoError::UnsupportedFormat(_))
        ));
    }

    #[test]
    fn reads_normals_and_extra_fields() {
        let text = "VERSION 0.7\nFIELDS x y z intensity normal_x normal_y normal_z\n\
            SIZE 4 4 4 4 4 4 4\nTYPE F F F F F F F\nCOUNT 1 1 1 1 1 1 1\nWIDTH 2\nHEIGHT 1\n\
            POINTS 2\nDATA ascii\n0 0 0 5 0 0 1\nnan nan nan 0 0 0 0\n";
        let cloud = read_pcd(text.as_bytes()).unwrap();
        assert_eq!(cloud.len(), 1);
        assert_eq!(cloud.normal(0), Some(Vec3::z()));
    }
}
