//! Per-correspondence observability, label histograms and per-axis scan confidence.
//!
//! Every 6-vector here is ordered `[roll, pitch, yaw, x, y, z]`, the same
//! order as the registration tangent space.

use nalgebra::{Matrix6, Vector6};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::liegroup::{PoseSE3, Vec3};
use crate::pointcloud::{CloudError, PointCloud};
use crate::registration::{AlignmentMatrix, Correspondence};

/// Axes whose confidence falls below this value are listed in a [`DegeneracyReport`].
pub const LOW_CONFIDENCE_THRESHOLD: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DofLabel {
    Roll,
    Pitch,
    Yaw,
    X,
    Y,
    Z,
}

impl DofLabel {
    pub const ALL: [DofLabel; 6] = [
        DofLabel::Roll,
        DofLabel::Pitch,
        DofLabel::Yaw,
        DofLabel::X,
        DofLabel::Y,
        DofLabel::Z,
    ];

    /// Position in the `[roll, pitch, yaw, x, y, z]` ordering.
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn is_rotation(self) -> bool {
        self.index() < 3
    }

    pub fn name(self) -> &'static str {
        match self {
            DofLabel::Roll => "roll",
            DofLabel::Pitch => "pitch",
            DofLabel::Yaw => "yaw",
            DofLabel::X => "x",
            DofLabel::Y => "y",
            DofLabel::Z => "z",
        }
    }
}

/// Planarity-scaled contribution of one correspondence to each direction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObservabilityVector {
    pub values: [f64; 6],
}

impl ObservabilityVector {
    pub fn rot(&self) -> [f64; 3] {
        [self.values[0], self.values[1], self.values[2]]
    }

    pub fn trans(&self) -> [f64; 3] {
        [self.values[3], self.values[4], self.values[5]]
    }
}

/// The rotational and translational label of one correspondence.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct PointLabels {
    pub rot: Option<DofLabel>,
    pub trans: Option<DofLabel>,
}

/// `a² · [|C·X|, |C·Y|, |C·Z|, |n·X|, |n·Y|, |n·Z|]` with `C = T_init p × n`.
///
/// The target normal is already expressed in the world (map) frame, so only
/// the source point is mapped through `t_init`.
pub fn point_observability(c: &Correspondence, t_init: &PoseSE3) -> ObservabilityVector {
    let a2 = c.planarity * c.planarity;
    let n = c.normal;
    let moment: Vec3 = t_init.apply(&c.source).cross(&n);
    ObservabilityVector {
        values: [
            a2 * moment.x.abs(),
            a2 * moment.y.abs(),
            a2 * moment.z.abs(),
            a2 * n.x.abs(),
            a2 * n.y.abs(),
            a2 * n.z.abs(),
        ],
    }
}

fn argmax(values: [f64; 3]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, v) in values.iter().enumerate() {
        if *v > 0.0 && best.is_none_or(|b| *v > values[b]) {
            best = Some(i);
        }
    }
    best
}

/// Argmax within each group; ties go to the earlier axis, an all-zero group
/// gets no label.
pub fn assign_labels(obs: &ObservabilityVector) -> PointLabels {
    PointLabels {
        rot: argmax(obs.rot()).map(|i| DofLabel::ALL[i]),
        trans: argmax(obs.trans()).map(|i| DofLabel::ALL[3 + i]),
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelHistogram {
    /// Counts in `[roll, pitch, yaw, x, y, z]` order.
    pub counts: [usize; 6],
}

impl LabelHistogram {
    pub fn from_labels<'a>(labels: impl IntoIterator<Item = &'a PointLabels>) -> Self {
        let mut hist = Self::default();
        for l in labels {
            hist.add(l);
        }
        hist
    }

    pub fn add(&mut self, labels: &PointLabels) {
        for label in [labels.rot, labels.trans].into_iter().flatten() {
            self.counts[label.index()] += 1;
        }
    }

    pub fn count(&self, label: DofLabel) -> usize {
        self.counts[label.index()]
    }

    pub fn total_rot(&self) -> usize {
        self.counts[..3].iter().sum()
    }

    pub fn total_trans(&self) -> usize {
        self.counts[3..].iter().sum()
    }
}

/// Per-axis confidence in `[0, 1]`; 1 means well observed.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceCovariance {
    pub rot: [f64; 3],
    pub trans: [f64; 3],
}

impl ConfidenceCovariance {
    pub fn zeros() -> Self {
        Self {
            rot: [0.0; 3],
            trans: [0.0; 3],
        }
    }

    pub fn ones() -> Self {
        Self {
            rot: [1.0; 3],
            trans: [1.0; 3],
        }
    }

    pub fn as_vector(&self) -> Vector6<f64> {
        Vector6::new(
            self.rot[0],
            self.rot[1],
            self.rot[2],
            self.trans[0],
            self.trans[1],
            self.trans[2],
        )
    }

    pub fn as_diagonal(&self) -> Matrix6<f64> {
        Matrix6::from_diagonal(&self.as_vector())
    }

    pub fn get(&self, label: DofLabel) -> f64 {
        self.as_vector()[label.index()]
    }
}

fn group_ratio(counts: &[usize]) -> [f64; 3] {
    let total: usize = counts.iter().sum();
    if total == 0 {
        return [0.0; 3];
    }
    [0, 1, 2].map(|i| 3.0 * counts[i] as f64 / total as f64)
}

/// Unclamped `3 · N_axis / N_group`; each non-empty group sums to 3.
pub fn raw_confidence(hist: &LabelHistogram) -> ([f64; 3], [f64; 3]) {
    (
        group_ratio(&hist.counts[..3]),
        group_ratio(&hist.counts[3..]),
    )
}

/// Label-count confidence, normalized per group and clamped to `[0, 1]`.
pub fn scan_confidence(hist: &LabelHistogram) -> ConfidenceCovariance {
    let (rot, trans) = raw_confidence(hist);
    ConfidenceCovariance {
        rot: rot.map(|v| v.clamp(0.0, 1.0)),
        trans: trans.map(|v| v.clamp(0.0, 1.0)),
    }
}

/// Labels, histogram and confidence of one correspondence set.
#[derive(Clone, Debug, PartialEq)]
pub struct ObservabilityAnalysis {
    pub labels: Vec<PointLabels>,
    pub histogram: LabelHistogram,
    pub confidence: ConfidenceCovariance,
}

pub fn analyze(correspondences: &[Correspondence], t_init: &PoseSE3) -> ObservabilityAnalysis {
    let labels: Vec<PointLabels> = correspondences
        .par_iter()
        .map(|c| assign_labels(&point_observability(c, t_init)))
        .collect();
    let histogram = LabelHistogram::from_labels(&labels);
    ObservabilityAnalysis {
        confidence: scan_confidence(&histogram),
        labels,
        histogram,
    }
}

/// Spreads per-correspondence labels back onto the `len` points of the source
/// scan; points without a correspondence stay unlabeled.
pub fn labels_for_scan(
    len: usize,
    correspondences: &[Correspondence],
    labels: &[PointLabels],
) -> Vec<PointLabels> {
    let mut out = vec![PointLabels::default(); len];
    for (c, l) in correspondences.iter().zip(labels) {
        if c.source_index < len {
            out[c.source_index] = *l;
        }
    }
    out
}

pub fn label_color(label: Option<DofLabel>) -> [u8; 3] {
    match label {
        Some(DofLabel::X) => [255, 0, 0],
        Some(DofLabel::Y) => [0, 255, 0],
        Some(DofLabel::Z) => [0, 0, 255],
        _ => [128, 128, 128],
    }
}

/// Copy of `cloud` colored by translational label: x red, y green, z blue,
/// unlabeled gray.
pub fn observability_scan(
    cloud: &PointCloud,
    labels: &[PointLabels],
) -> Result<PointCloud, CloudError> {
    if labels.len() != cloud.len() {
        return Err(CloudError::LengthMismatch {
            what: "labels",
            got: labels.len(),
            expected: cloud.len(),
        });
    }
    cloud
        .clone()
        .with_colors(labels.iter().map(|l| label_color(l.trans)).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DegeneracyReport {
    /// Eigenvalues of the alignment matrix, ascending.
    pub eigenvalues: [f64; 6],
    /// Unit eigenvectors matching `eigenvalues`, `[roll, pitch, yaw, x, y, z]` components.
    pub eigenvectors: [[f64; 6]; 6],
    pub confidence: ConfidenceCovariance,
    pub threshold: f64,
    /// Axes with confidence below `threshold`.
    pub low_confidence: Vec<DofLabel>,
}

pub fn degeneracy_report(
    alignment: &AlignmentMatrix,
    conf: &ConfidenceCovariance,
) -> DegeneracyReport {
    let eig = alignment.eigen();
    DegeneracyReport {
        eigenvalues: eig.values,
        eigenvectors: eig.vectors.map(|v| [v[0], v[1], v[2], v[3], v[4], v[5]]),
        confidence: *conf,
        threshold: LOW_CONFIDENCE_THRESHOLD,
        low_confidence: DofLabel::ALL
            .into_iter()
            .filter(|l| conf.get(*l) < LOW_CONFIDENCE_THRESHOLD)
            .collect(),
    }
}
