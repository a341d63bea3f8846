//! Fusion of an external relative-pose prior with point-to-plane registration.
//!
//! The prior is weighted per axis by `1 − confidence`: directions that the
//! scan observes well leave the prior inert, degenerate directions lean on it.

use nalgebra::{Matrix3, Matrix6, UnitQuaternion, Vector6};
use serde::Serialize;
use thiserror::Error;

use crate::liegroup::{hat, so3_left_jacobian_inv, PoseSE3, Vec3};
use crate::observability::{
    analyze, degeneracy_report, ConfidenceCovariance, DegeneracyReport, ObservabilityAnalysis,
};
use crate::pointcloud::{PointCloud, SpatialIndex};
use crate::registration::{
    gauss_newton, Correspondence, MatchMemo, Matches, PoseFactor, RegistrationConfig,
    RegistrationError, RegistrationResult, ScanMatcher, SolveInput,
};
use crate::trajectory::{Trajectory, TrajectoryError};

#[derive(Debug, Error, PartialEq)]
pub enum FusionError {
    #[error(transparent)]
    Registration(#[from] RegistrationError),
    #[error("invalid prior: {0}")]
    InvalidPrior(String),
    #[error(transparent)]
    Trajectory(#[from] TrajectoryError),
    #[error("map cannot be indexed: {0}")]
    EmptyMap(String),
    #[error("empty scan")]
    EmptyScan,
}

/// Information weights `1 − conf`, ordered `[rot; trans]`.
pub fn prior_weights(conf: &ConfidenceCovariance) -> [f64; 6] {
    let c = conf.as_vector();
    [0, 1, 2, 3, 4, 5].map(|i| 1.0 - c[i])
}

/// A measured relative motion between two consecutive frames with per-axis weights.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PriorFactor {
    relative: PoseSE3,
    weights: [f64; 6],
}

impl PriorFactor {
    pub fn new(
        rel_translation: Vec3,
        rel_rotation: UnitQuaternion<f64>,
        info_weights: [f64; 6],
    ) -> Result<Self, FusionError> {
        if (rel_rotation.as_ref().norm() - 1.0).abs() > 1e-9 {
            return Err(FusionError::InvalidPrior(
                "rotation is not a unit quaternion".into(),
            ));
        }
        Self::from_pose(PoseSE3::new(rel_rotation, rel_translation), info_weights)
    }

    pub fn from_pose(relative: PoseSE3, info_weights: [f64; 6]) -> Result<Self, FusionError> {
        if let Some(w) = info_weights.iter().find(|w| !(0.0..=1.0).contains(*w)) {
            return Err(FusionError::InvalidPrior(format!(
                "weight {w} outside [0, 1]"
            )));
        }
        if !relative.translation().iter().all(|v| v.is_finite()) {
            return Err(FusionError::InvalidPrior("non-finite translation".into()));
        }
        Ok(Self {
            relative,
            weights: info_weights,
        })
    }

    pub fn relative(&self) -> &PoseSE3 {
        &self.relative
    }

    pub fn info_weights(&self) -> [f64; 6] {
        self.weights
    }
}

/// `prior ⊖ estimated_rel`, `[rot (rad); trans (m)]`.
pub fn prior_residual(f: &PriorFactor, estimated_rel: &PoseSE3) -> Vector6<f64> {
    f.relative.ominus(estimated_rel).to_vector6()
}

/// The prior anchored at the reference pose, as seen by the solver.
struct AnchoredPrior<'a> {
    factor: &'a PriorFactor,
    reference_inv: PoseSE3,
}

impl PoseFactor for AnchoredPrior<'_> {
    fn linearize(&self, pose: &PoseSE3) -> (Vector6<f64>, Matrix6<f64>) {
        let estimate = self.reference_inv.compose(pose);
        let e = prior_residual(self.factor, &estimate);
        let phi = Vec3::new(e[0], e[1], e[2]);
        let u = Vec3::new(e[3], e[4], e[5]);
        let mut jac = Matrix6::zeros();
        jac.fixed_view_mut::<3, 3>(0, 0)
            .copy_from(&(-so3_left_jacobian_inv(&phi)));
        jac.fixed_view_mut::<3, 3>(3, 0).copy_from(&hat(&u));
        jac.fixed_view_mut::<3, 3>(3, 3)
            .copy_from(&(-Matrix3::identity()));
        (e, jac)
    }

    fn weights(&self) -> Vector6<f64> {
        Vector6::from(self.factor.weights)
    }
}

/// Inputs of one fused pose estimate.
#[derive(Clone, Debug)]
pub struct FusionProblem {
    /// Correspondences at `init`; used as-is unless a matcher is supplied.
    pub correspondences: Vec<Correspondence>,
    pub prior: Option<PriorFactor>,
    pub init: PoseSE3,
    /// Pose of the previous frame; the prior constrains `reference_pose⁻¹ ∘ pose`.
    pub reference_pose: PoseSE3,
    /// Scan confidence, consulted only for directional ICP reweighting.
    pub confidence: Option<ConfidenceCovariance>,
}

/// Minimizes `Σ a²·d² + Σ_k w_k·e_k²` over the pose. With `matcher`
/// correspondences are re-established every iteration.
pub fn joint_optimize(
    problem: &FusionProblem,
    cfg: &RegistrationConfig,
    matcher: Option<ScanMatcher<'_>>,
) -> Result<RegistrationResult, FusionError> {
    optimize(problem, cfg, matcher, None)
}

/// `at_init` holds the search memo when `problem.correspondences` were
/// gathered by `matcher` at `problem.init`, so the first re-association can
/// be skipped and later ones reuse those searches.
fn optimize(
    problem: &FusionProblem,
    cfg: &RegistrationConfig,
    matcher: Option<ScanMatcher<'_>>,
    at_init: Option<Vec<MatchMemo>>,
) -> Result<RegistrationResult, FusionError> {
    cfg.validate()?;
    if problem.correspondences.is_empty() && problem.prior.is_none() && matcher.is_none() {
        return Err(RegistrationError::NoConstraints.into());
    }
    let anchored = problem.prior.as_ref().map(|factor| AnchoredPrior {
        factor,
        reference_inv: problem.reference_pose.inverse(),
    });
    let matches = match matcher {
        Some(m) => match at_init {
            Some(memo) => Matches::Rematch(m, Some(problem.correspondences.as_slice()), memo),
            None => Matches::Rematch(m, None, Vec::new()),
        },
        None => Matches::Fixed(&problem.correspondences),
    };
    Ok(gauss_newton(
        SolveInput {
            matches,
            factor: anchored.as_ref().map(|a| a as &dyn PoseFactor),
            confidence: problem.confidence.map(|c| c.trans),
        },
        &problem.init,
        cfg,
    )?)
}

/// Timestamped relative motions, looked up by the timestamp of the later frame.
#[derive(Clone, Debug, Default)]
pub struct PriorTable {
    entries: Vec<(f64, PoseSE3)>,
}

impl PriorTable {
    pub fn new(mut entries: Vec<(f64, PoseSE3)>) -> Self {
        entries.sort_by(|a, b| a.0.total_cmp(&b.0));
        Self { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entry closest to `timestamp`, if within `tolerance` seconds.
    pub fn lookup(&self, timestamp: f64, tolerance: f64) -> Option<&PoseSE3> {
        let i = self.entries.partition_point(|(t, _)| *t < timestamp);
        [i.checked_sub(1), Some(i)]
            .into_iter()
            .flatten()
            .filter_map(|j| self.entries.get(j))
            .map(|(t, p)| ((t - timestamp).abs(), p))
            .filter(|(dt, _)| *dt <= tolerance)
            .min_by(|a, b| a.0.total_cmp(&b.0))
            .map(|(_, p)| p)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LocalizerConfig {
    pub registration: RegistrationConfig,
    /// When false the prior source is ignored entirely (registration only,
    /// constant-pose prediction).
    pub use_prior: bool,
    /// Maximum timestamp difference (s) when matching priors to scans.
    pub prior_time_tolerance: f64,
}

impl Default for LocalizerConfig {
    fn default() -> Self {
        Self {
            registration: RegistrationConfig::default(),
            use_prior: true,
            prior_time_tolerance: 1e-3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ScanStatus {
    Ok,
    /// Registration failed; the predicted pose was used.
    Failed,
    /// The scan could not be read; the prediction carries the state forward.
    Skipped,
}

impl ScanStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            ScanStatus::Ok => "ok",
            ScanStatus::Failed => "failed",
            ScanStatus::Skipped => "skipped",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScanReport {
    pub index: usize,
    pub timestamp: f64,
    pub status: ScanStatus,
    pub message: Option<String>,
    pub confidence: ConfidenceCovariance,
    /// Smallest eigenvalue of the alignment matrix at the prediction.
    pub min_eigenvalue: f64,
    pub iterations: usize,
    pub final_error: f64,
    pub converged: bool,
    pub correspondences: usize,
    pub damped_iterations: usize,
    /// Weights applied to the prior, `[rot; trans]`; zero without a prior.
    pub prior_weights: [f64; 6],
    #[serde(skip)]
    pub pose: PoseSE3,
}

/// Everything produced for one scan.
#[derive(Clone, Debug)]
pub struct ScanOutcome {
    pub report: ScanReport,
    pub pose: PoseSE3,
    /// Correspondences at the predicted pose, with their observability labels.
    pub correspondences: Vec<Correspondence>,
    pub observability: ObservabilityAnalysis,
    pub degeneracy: DegeneracyReport,
}

/// Sequential scan-to-map localizer.
pub struct Localizer<'a> {
    map: &'a PointCloud,
    index: SpatialIndex,
    cfg: LocalizerConfig,
    /// Pose of the last processed scan (optimized or predicted).
    last: Option<PoseSE3>,
    initial: PoseSE3,
    processed: usize,
}

impl<'a> Localizer<'a> {
    /// `map` must carry normals and planarity; `initial_pose` seeds the first scan.
    pub fn new(
        map: &'a PointCloud,
        cfg: LocalizerConfig,
        initial_pose: PoseSE3,
    ) -> Result<Self, FusionError> {
        cfg.registration.validate()?;
        if map.normals().is_none() || map.planarity().is_none() {
            return Err(RegistrationError::MissingNormals.into());
        }
        let index = SpatialIndex::build(map).map_err(|e| FusionError::EmptyMap(e.to_string()))?;
        Ok(Self {
            map,
            index,
            cfg,
            last: None,
            initial: initial_pose,
            processed: 0,
        })
    }

    pub fn index(&self) -> &SpatialIndex {
        &self.index
    }

    fn predict(&self, prior_rel: Option<&PoseSE3>) -> PoseSE3 {
        match (self.last, prior_rel) {
            (None, _) => self.initial,
            (Some(prev), Some(rel)) if self.cfg.use_prior => prev.compose(rel),
            (Some(prev), _) => prev,
        }
    }

    /// Advances the state over a scan that could not be read.
    pub fn skip(
        &mut self,
        timestamp: f64,
        prior_rel: Option<&PoseSE3>,
        message: impl Into<String>,
    ) -> ScanReport {
        let pose = self.predict(prior_rel);
        self.last = Some(pose);
        let index = self.processed;
        self.processed += 1;
        ScanReport {
            index,
            timestamp,
            status: ScanStatus::Skipped,
            message: Some(message.into()),
            confidence: ConfidenceCovariance::zeros(),
            min_eigenvalue: 0.0,
            iterations: 0,
            final_error: 0.0,
            converged: false,
            correspondences: 0,
            damped_iterations: 0,
            prior_weights: [0.0; 6],
            pose,
        }
    }

    /// correspond → alignment matrix → labels → confidence → prior weights → optimize.
    pub fn step(
        &mut self,
        timestamp: f64,
        scan: &PointCloud,
        prior_rel: Option<&PoseSE3>,
    ) -> ScanOutcome {
        let init = self.predict(prior_rel);
        let reg = &self.cfg.registration;
        let index = self.processed;
        self.processed += 1;

        let matcher = ScanMatcher {
            source: scan,
            target: self.map,
            index: &self.index,
        };
        let mut memo = vec![MatchMemo::default(); scan.len()];
        let correspondences = matcher
            .correspondences_memo(&init, reg.max_dist, &mut memo)
            .unwrap_or_default();
        let observability = analyze(&correspondences, &init);
        let confidence = observability.confidence;
        let alignment = crate::registration::alignment_matrix(&correspondences, &init);
        let degeneracy = degeneracy_report(&alignment, &confidence);

        let prior = match (self.last, prior_rel) {
            (Some(_), Some(rel)) if self.cfg.use_prior => {
                PriorFactor::from_pose(*rel, prior_weights(&confidence)).ok()
            }
            _ => None,
        };
        let problem = FusionProblem {
            correspondences,
            prior,
            init,
            reference_pose: self.last.unwrap_or(init),
            confidence: Some(confidence),
        };
        let solved = if scan.is_empty() {
            Err(FusionError::EmptyScan)
        } else {
            optimize(&problem, reg, Some(matcher), Some(memo))
        };

        let mut report = ScanReport {
            index,
            timestamp,
            status: ScanStatus::Ok,
            message: None,
            confidence,
            min_eigenvalue: degeneracy.eigenvalues[0],
            iterations: 0,
            final_error: 0.0,
            converged: false,
            correspondences: problem.correspondences.len(),
            damped_iterations: 0,
            prior_weights: problem.prior.map_or([0.0; 6], |p| p.info_weights()),
            pose: init,
        };
        let pose = match solved {
            Ok(res) => {
                report.iterations = res.iterations;
                report.final_error = res.final_error;
                report.converged = res.converged;
                report.correspondences = res.correspondences_used;
                report.damped_iterations = res.damped_iterations;
                res.pose
            }
            Err(err) => {
                report.status = ScanStatus::Failed;
                report.message = Some(err.to_string());
                init
            }
        };
        report.pose = pose;
        self.last = Some(pose);
        ScanOutcome {
            report,
            pose,
            correspondences: problem.correspondences,
            observability,
            degeneracy,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LocalizationOutput {
    pub trajectory: Trajectory,
    pub reports: Vec<ScanReport>,
}

impl LocalizationOutput {
    pub fn failed_fraction(&self) -> f64 {
        if self.reports.is_empty() {
            return 0.0;
        }
        let bad = self
            .reports
            .iter()
            .filter(|r| r.status != ScanStatus::Ok)
            .count();
        bad as f64 / self.reports.len() as f64
    }
}

/// Localizes a time-ordered scan sequence against `map`.
pub fn run_localization(
    map: &PointCloud,
    scans: &[(f64, PointCloud)],
    priors: &PriorTable,
    cfg: &LocalizerConfig,
    initial_pose: &PoseSE3,
) -> Result<LocalizationOutput, FusionError> {
    let mut localizer = Localizer::new(map, cfg.clone(), *initial_pose)?;
    let mut trajectory = Trajectory::default();
    let mut reports = Vec::with_capacity(scans.len());
    for (t, scan) in scans {
        let prior = priors.lookup(*t, cfg.prior_time_tolerance);
        let outcome = localizer.step(*t, scan, prior);
        trajectory.push(*t, outcome.pose)?;
        reports.push(outcome.report);
    }
    Ok(LocalizationOutput {
        trajectory,
        reports,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::liegroup::TangentVector;
    use crate::observability::DofLabel;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn prior_weight_examples() {
        assert_eq!(prior_weights(&ConfidenceCovariance::ones()), [0.0; 6]);
        assert_eq!(prior_weights(&ConfidenceCovariance::zeros()), [1.0; 6]);
        let corridor = ConfidenceCovariance {
            rot: [1.0; 3],
            trans: [0.0, 1.0, 1.0],
        };
        assert_eq!(prior_weights(&corridor), [0.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn prior_residual_examples() {
        let f = PriorFactor::from_pose(
            PoseSE3::from_translation(Vec3::new(0.3, 0.1, 0.0)),
            [1.0; 6],
        )
        .unwrap();
        assert_eq!(prior_residual(&f, f.relative()), Vector6::zeros());
        let f = PriorFactor::from_pose(PoseSE3::from_translation(Vec3::x()), [1.0; 6]).unwrap();
        assert_eq!(
            prior_residual(&f, &PoseSE3::identity()),
            Vector6::new(0.0, 0.0, 0.0, 1.0, 0.0, 0.0)
        );
        let yaw = 5f64.to_radians();
        let f = PriorFactor::from_pose(
            PoseSE3::from_rotation_vector(Vec3::new(0.0, 0.0, yaw), Vec3::zeros()),
            [1.0; 6],
        )
        .unwrap();
        let e = prior_residual(&f, &PoseSE3::identity());
        // oracle: 2·atan2(|q_vec|, q_w) of the quaternion (0, 0, sin(θ/2), cos(θ/2))
        let oracle = 2.0 * (yaw / 2.0).sin().atan2((yaw / 2.0).cos());
        assert!((e[2] - oracle).abs() < 1e-12);
        assert!((e[2] - 0.08727).abs() < 1e-5);
    }

    #[test]
    fn invalid_priors_are_rejected() {
        assert!(
            PriorFactor::from_pose(PoseSE3::identity(), [0.0, 0.0, 0.0, 1.5, 0.0, 0.0]).is_err()
        );
        assert!(PriorFactor::from_pose(PoseSE3::identity(), [f64::NAN; 6]).is_err());
        let q = UnitQuaternion::new_unchecked(nalgebra::Quaternion::new(2.0, 0.0, 0.0, 0.0));
        assert!(PriorFactor::new(Vec3::zeros(), q, [0.0; 6]).is_err());
    }

    #[test]
    fn no_constraints_is_an_error() {
        let problem = FusionProblem {
            correspondences: vec![],
            prior: None,
            init: PoseSE3::identity(),
            reference_pose: PoseSE3::identity(),
            confidence: None,
        };
        assert_eq!(
            joint_optimize(&problem, &RegistrationConfig::default(), None).unwrap_err(),
            FusionError::Registration(RegistrationError::NoConstraints)
        );
    }

    #[test]
    fn full_weight_prior_alone_reproduces_the_prior() {
        let reference =
            PoseSE3::from_rotation_vector(Vec3::new(0.1, -0.2, 0.7), Vec3::new(3.0, -1.0, 0.5));
        let rel =
            PoseSE3::from_rotation_vector(Vec3::new(0.02, 0.01, -0.1), Vec3::new(0.4, 0.05, -0.02));
        let problem = FusionProblem {
            correspondences: vec![],
            prior: Some(PriorFactor::from_pose(rel, [1.0; 6]).unwrap()),
            init: reference,
            reference_pose: reference,
            confidence: None,
        };
        let res = joint_optimize(&problem, &RegistrationConfig::default(), None).unwrap();
        let want = reference.compose(&rel);
        assert!(res.pose.local_coordinates(&want).norm() < 1e-9);
        assert!(res.converged);
    }

    fn random_pose(rng: &mut ChaCha8Rng, scale: f64) -> PoseSE3 {
        let mut v = || {
            Vec3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            )
        };
        PoseSE3::from_rotation_vector(v() * scale, v() * 3.0)
    }

    proptest! {
        #[test]
        fn prior_jacobian_matches_central_differences(seed in 0u64..2000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let factor = PriorFactor::from_pose(random_pose(&mut rng, 0.8), [1.0; 6]).unwrap();
            let reference = random_pose(&mut rng, 1.5);
            let pose = random_pose(&mut rng, 1.5);
            let anchored = AnchoredPrior { factor: &factor, reference_inv: reference.inverse() };
            let (_, jac) = anchored.linearize(&pose);
            let h = 1e-6;
            for k in 0..6 {
                let mut d = Vector6::zeros();
                d[k] = h;
                let (plus, _) = anchored.linearize(&pose.retract(&TangentVector::from_vector6(&d)));
                let (minus, _) = anchored.linearize(&pose.retract(&TangentVector::from_vector6(&-d)));
                let fd = (plus - minus) / (2.0 * h);
                for r in 0..6 {
                    prop_assert!((fd[r] - jac[(r, k)]).abs() <= 1e-5 * jac[(r, k)].abs().max(1.0),
                        "row {} col {}: fd {} analytic {}", r, k, fd[r], jac[(r, k)]);
                }
            }
        }

        #[test]
        fn weights_track_confidence_exactly(c in prop::array::uniform6(0.0f64..=1.0), eps in 0.0f64..0.1) {
            let conf = ConfidenceCovariance { rot: [c[0], c[1], c[2]], trans: [c[3], c[4], c[5]] };
            let mut bumped = conf;
            bumped.trans[0] = (bumped.trans[0] + eps).min(1.0);
            let delta = bumped.trans[0] - conf.trans[0];
            let (a, b) = (prior_weights(&conf), prior_weights(&bumped));
            prop_assert!((a[3] - b[3] - delta).abs() < 1e-15);
            prop_assert_eq!(&a[..3], &b[..3]);
            prop_assert_eq!(&a[4..], &b[4..]);
        }
    }

    #[test]
    fn prior_table_lookup() {
        let table = PriorTable::new(vec![
            (0.2, PoseSE3::from_translation(Vec3::y())),
            (0.1, PoseSE3::from_translation(Vec3::x())),
        ]);
        assert_eq!(
            table.lookup(0.1004, 1e-3).unwrap().translation(),
            &Vec3::x()
        );
        assert_eq!(
            table.lookup(0.1996, 1e-3).unwrap().translation(),
            &Vec3::y()
        );
        assert!(table.lookup(0.15, 1e-3).is_none());
        assert!(PriorTable::default().lookup(0.0, 1.0).is_none());
    }

    #[test]
    fn scan_status_strings() {
        assert_eq!(ScanStatus::Skipped.as_str(), "skipped");
        assert_eq!(DofLabel::X.name(), "x");
    }
}
