//! Atomic file output and fixed-precision JSON.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use obsloc_core::io::{fmt_float, IoError};
use serde::Serialize;
use serde_json::Value;

use crate::error::CliError;

fn output_err(path: &Path, source: std::io::Error) -> CliError {
    CliError::Output {
        path: path.to_path_buf(),
        source,
    }
}

pub fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|e| output_err(path, e))
}

/// Writes through a temporary sibling file and renames it into place, so a
/// reader never sees a half-written `path`.
pub fn write_atomic<F>(path: &Path, body: F) -> Result<(), CliError>
where
    F: FnOnce(&mut BufWriter<File>) -> Result<(), IoError>,
{
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let tmp = path.with_file_name(format!(".{name}.tmp{}", std::process::id()));
    let result = (|| {
        let mut w = BufWriter::new(File::create(&tmp)?);
        body(&mut w).map_err(|e| match e {
            IoError::Io(io) => io,
            other => std::io::Error::other(other.to_string()),
        })?;
        w.flush()?;
        w.into_inner().map_err(|e| e.into_error())?.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(output_err(path, e));
    }
    Ok(())
}

/// Rounds every float in a JSON tree to 9 significant digits, matching the
/// text formats.
fn round_floats(v: &mut Value) {
    match v {
        Value::Number(n) if n.is_f64() => {
            let x = n.as_f64().expect("checked f64");
            if let Some(r) = fmt_float(x).parse::<f64>().ok().and_then(serde_json::Number::from_f64) {
                *n = r;
            }
        }
        Value::Array(items) => items.iter_mut().for_each(round_floats),
        Value::Object(map) => map.values_mut().for_each(round_floats),
        _ => {}
    }
}

pub fn to_json<T: Serialize>(value: &T) -> String {
    let mut tree = serde_json::to_value(value).expect("report types serialize");
    round_floats(&mut tree);
    serde_json::to_string_pretty(&tree).expect("json values serialize")
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = to_json(value);
    write_atomic(path, |w| {
        writeln!(w, "{text}")?;
        Ok(())
    })
}
