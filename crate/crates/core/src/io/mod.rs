//! Text formats: ASCII PLY and PCD clouds, TUM trajectories, CSV tables.
//!
//! Every float written by this crate goes through [`fmt_float`], which keeps
//! nine significant digits so repeated runs produce byte-identical files.

mod csv;
mod pcd;
mod ply;
mod tum;

pub use self::csv::{
    read_priors, write_confidence_csv, write_priors, write_scan_reports, CONFIDENCE_HEADER,
    PRIORS_HEADER, REPORT_HEADER,
};
pub use pcd::read_pcd;
pub use ply::{read_ply, write_ply};
pub use tum::{read_tum, write_tum, write_tum_line};

use std::fs::File;
use std::io::BufReader;
use std::path::Path;

use thiserror::Error;

use crate::pointcloud::{CloudError, PointCloud};

#[derive(Debug, Error)]
pub enum IoError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed file: {0}")]
    MalformedFile(String),
    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),
    #[error("invalid cloud contents: {0}")]
    Cloud(#[from] CloudError),
}

pub(crate) fn malformed(msg: impl Into<String>) -> IoError {
    IoError::MalformedFile(msg.into())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CloudFormat {
    Ply,
    Pcd,
}

impl CloudFormat {
    pub fn from_path(path: &Path) -> Result<Self, IoError> {
        match path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase())
            .as_deref()
        {
            Some("ply") => Ok(CloudFormat::Ply),
            Some("pcd") => Ok(CloudFormat::Pcd),
            other => Err(IoError::UnsupportedFormat(format!(
                "cannot infer cloud format from extension {:?}",
                other.unwrap_or("")
            ))),
        }
    }
}

pub fn load_cloud(path: &Path, format: CloudFormat) -> Result<PointCloud, IoError> {
    let reader = BufReader::new(File::open(path)?);
    match format {
        CloudFormat::Ply => read_ply(reader),
        CloudFormat::Pcd => read_pcd(reader),
    }
}

/// Loads a cloud, picking the format from the file extension.
pub fn load_cloud_auto(path: &Path) -> Result<PointCloud, IoError> {
    load_cloud(path, CloudFormat::from_path(path)?)
}

/// Formats `x` with 9 significant digits, `%g` style.
pub fn fmt_float(x: f64) -> String {
    if x == 0.0 {
        return "0".to_string();
    }
    if !x.is_finite() {
        return format!("{x}");
    }
    let sci = format!("{:.8e}", x);
    let (mantissa, exp) = sci
        .split_once('e')
        .expect("scientific format has an exponent");
    let exp: i32 = exp.parse().expect("exponent is an integer");
    if !(-5..9).contains(&exp) {
        return format!("{}e{}", trim_zeros(mantissa), exp);
    }
    let decimals = (8 - exp).max(0) as usize;
    trim_zeros(&format!("{:.*}", decimals, x)).to_string()
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

pub(crate) fn parse_f64(token: &str, what: &str) -> Result<f64, IoError> {
    token
        .trim()
        .parse::<f64>()
        .map_err(|_| malformed(format!("cannot parse {what} from {token:?}")))
}
