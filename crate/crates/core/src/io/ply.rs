use std::io::{BufRead, Write};

use super::{fmt_float, malformed, parse_f64, IoError};
use crate::liegroup::Vec3;
use crate::pointcloud::PointCloud;

#[derive(Debug)]
enum Property {
    Scalar(String),
    List,
}

#[derive(Debug)]
struct Element {
    name: String,
    count: usize,
    properties: Vec<Property>,
}

#[derive(Debug, Default)]
struct Header {
    elements: Vec<Element>,
    timestamp: Option<f64>,
    frame_id: Option<String>,
}

fn read_header<R: BufRead>(lines: &mut std::io::Lines<R>) -> Result<Header, IoError> {
    let magic = lines.next().transpose()?.unwrap_or_default();
    if magic.trim() != "ply" {
        return Err(malformed("missing 'ply' magic line"));
    }
    let mut header = Header::default();
    let mut saw_format = false;
    loop {
        let line = lines
            .next()
            .transpose()?
            .ok_or_else(|| malformed("header ended before end_header"))?;
        let tokens: Vec<&str> = line.split_whitespace().collect();
        match tokens.as_slice() {
            [] => continue,
            ["end_header"] => break,
            ["format", "ascii", _] => saw_format = true,
            ["format", kind, _] => {
                return Err(IoError::UnsupportedFormat(format!("PLY format {kind}")))
            }
            ["comment", "timestamp", t] => header.timestamp = Some(parse_f64(t, "timestamp")?),
            ["comment", "frame_id", id] => header.frame_id = Some(id.to_string()),
            ["comment", ..] | ["obj_info", ..] => {}
            ["element", name, count] => header.elements.push(Element {
                name: name.to_string(),
                count: count
                    .parse()
                    .map_err(|_| malformed(format!("bad element count {count:?}")))?,
                properties: Vec::new(),
            }),
            ["property", "list", ..] => current(&mut header)?.properties.push(Property::List),
            ["property", _ty, name] => current(&mut header)?
                .properties
                .push(Property::Scalar(name.to_string())),
            _ => return Err(malformed(format!("unrecognized header line {line:?}"))),
        }
    }
    if !saw_format {
        return Err(malformed("missing format line"));
    }
    Ok(header)
}

fn current(header: &mut Header) -> Result<&mut Element, IoError> {
    header
        .elements
        .last_mut()
        .ok_or_else(|| malformed("property declared before any element"))
}

/// Reads an ASCII PLY file. Vertex properties `x y z` are required;
/// `nx ny nz`, `red green blue` and `planarity` are picked up when present.
pub fn read_ply<R: BufRead>(reader: R) -> Result<PointCloud, IoError> {
    let mut lines = reader.lines();
    let header = read_header(&mut lines)?;

    let mut data_lines = lines.filter(|l| l.as_ref().map_or(true, |s| !s.trim().is_empty()));
    let mut cloud = None;
    for element in &header.elements {
        if element.name != "vertex" {
            for i in 0..element.count {
                data_lines.next().transpose()?.ok_or_else(|| {
                    malformed(format!(
                        "element {} declares {} records but only {i} are present",
                        element.name, element.count
                    ))
                })?;
            }
            continue;
        }
        cloud = Some(read_vertices(element, &mut data_lines)?);
    }
    if data_lines.next().transpose()?.is_some() {
        return Err(malformed("unexpected data after the declared records"));
    }
    let cloud = cloud.unwrap_or_default();
    Ok(cloud
        .with_timestamp(header.timestamp)
        .with_frame_id(header.frame_id.unwrap_or_default()))
}

fn read_vertices(
    element: &Element,
    lines: &mut impl Iterator<Item = std::io::Result<String>>,
) -> Result<PointCloud, IoError> {
    let column = |name: &str| {
        element
            .properties
            .iter()
            .position(|p| matches!(p, Property::Scalar(n) if n == name))
    };
    if element
        .properties
        .iter()
        .any(|p| matches!(p, Property::List))
    {
        return Err(IoError::UnsupportedFormat(
            "list properties on vertices".into(),
        ));
    }
    let xyz = match (column("x"), column("y"), column("z")) {
        (Some(x), Some(y), Some(z)) => [x, y, z],
        _ => return Err(malformed("vertex element lacks x, y, z properties")),
    };
    let normal_cols = match (column("nx"), column("ny"), column("nz")) {
        (Some(x), Some(y), Some(z)) => Some([x, y, z]),
        _ => None,
    };
    let color_cols = match (column("red"), column("green"), column("blue")) {
        (Some(r), Some(g), Some(b)) => Some([r, g, b]),
        _ => None,
    };
    let planarity_col = column("planarity");

    let width = element.properties.len();
    let mut points = Vec::with_capacity(element.count);
    let mut normals = Vec::new();
    let mut colors = Vec::new();
    let mut planarity = Vec::new();
    for i in 0..element.count {
        let line = lines.next().transpose()?.ok_or_else(|| {
            malformed(format!(
                "vertex element declares {} records but only {i} are present",
                element.count
            ))
        })?;
        let tokens: Vec<&str> = line.split_whitespace().collect();
        if tokens.len() != width {
            return Err(malformed(format!(
                "vertex {i} has {} values, expected {width}",
                tokens.len()
            )));
        }
        let vec3 = |cols: [usize; 3], what: &str| -> Result<Vec3, IoError> {
            Ok(Vec3::new(
                parse_f64(tokens[cols[0]], what)?,
                parse_f64(tokens[cols[1]], what)?,
                parse_f64(tokens[cols[2]], what)?,
            ))
        };
        points.push(vec3(xyz, "coordinate")?);
        if let Some(cols) = normal_cols {
            let n = vec3(cols, "normal")?;
            let norm = n.norm();
            normals.push(if norm > 1e-12 {
                n / norm
            } else {
                Vec3::zeros()
            });
        }
        if let Some(cols) = color_cols {
            let mut rgb = [0u8; 3];
            for (c, &col) in rgb.iter_mut().zip(cols.iter()) {
                *c = tokens[col]
                    .parse()
                    .map_err(|_| malformed(format!("bad color value {:?}", tokens[col])))?;
            }
            colors.push(rgb);
        }
        if let Some(col) = planarity_col {
            planarity.push(parse_f64(tokens[col], "planarity")?.clamp(0.0, 1.0));
        }
    }
    let mut cloud = PointCloud::new(points);
    if normal_cols.is_some() {
        cloud = cloud.with_normals(normals)?;
    }
    if color_cols.is_some() {
        cloud = cloud.with_colors(colors)?;
    }
    if planarity_col.is_some() {
        cloud = cloud.with_planarity(planarity)?;
    }
    Ok(cloud)
}

/// Writes an ASCII PLY file with whichever optional channels the cloud carries.
pub fn write_ply<W: Write>(mut w: W, cloud: &PointCloud) -> Result<(), IoError> {
    writeln!(w, "ply")?;
    writeln!(w, "format ascii 1.0")?;
    if let Some(t) = cloud.timestamp() {
        writeln!(w, "comment timestamp {}", fmt_float(t))?;
    }
    if !cloud.frame_id().is_empty() && !cloud.frame_id().contains(char::is_whitespace) {
        writeln!(w, "comment frame_id {}", cloud.frame_id())?;
    }
    writeln!(w, "element vertex {}", cloud.len())?;
    for axis in ["x", "y", "z"] {
        writeln!(w, "property float {axis}")?;
    }
    if cloud.normals().is_some() {
        for axis in ["nx", "ny", "nz"] {
            writeln!(w, "property float {axis}")?;
        }
    }
    if cloud.planarity().is_some() {
        writeln!(w, "property float planarity")?;
    }
    if cloud.colors().is_some() {
        for c in ["red", "green", "blue"] {
            writeln!(w, "property uchar {c}")?;
        }
    }
    writeln!(w, "end_header")?;
    let mut line = String::new();
    for (i, p) in cloud.points().iter().enumerate() {
        line.clear();
        push_vec(&mut line, p);
        if let Some(ns) = cloud.normals() {
            line.push(' ');
            push_vec(&mut line, &ns[i]);
        }
        if let Some(a) = cloud.planarity() {
            line.push(' ');
            line.push_str(&fmt_float(a[i]));
        }
        if let Some(cs) = cloud.colors() {
            let [r, g, b] = cs[i];
            line.push_str(&format!(" {r} {g} {b}"));
        }
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    Ok(())
}

fn push_vec(line: &mut String, v: &Vec3) {
    line.push_str(&fmt_float(v.x));
    line.push(' ');
    line.push_str(&fmt_float(v.y));
    line.push(' ');
    line.push_str(&fmt_float(v.z));
}
