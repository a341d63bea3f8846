//! Point-to-plane registration on SE(3) and the pre-optimization alignment matrix.
//!
//! All 6-vectors are ordered `[rot_x, rot_y, rot_z, trans_x, trans_y, trans_z]`
//! and derivatives are taken with respect to the right perturbation used by
//! [`PoseSE3::retract`].

mod solver;

pub(crate) use solver::{gauss_newton, Matches, SolveInput};
pub use solver::{PoseFactor, ScanMatcher};

use nalgebra::{Matrix6, SymmetricEigen, Vector6};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::liegroup::{PoseSE3, Vec3};
use crate::pointcloud::{PointCloud, SpatialIndex};

const MATCH_CHUNK: usize = 512;

/// A source point's last full nearest-neighbor search.
#[derive(Clone, Copy, Debug)]
pub(crate) struct MatchMemo {
    /// The transformed source point that was searched.
    query: Vec3,
    /// Matched target id, `usize::MAX` when there is none.
    id: usize,
    /// Lower bound on the distance from `query` to every other target point.
    margin: f64,
}

impl Default for MatchMemo {
    fn default() -> Self {
        Self {
            query: Vec3::zeros(),
            id: usize::MAX,
            margin: 0.0,
        }
    }
}

impl MatchMemo {
    /// The nearest target id for `q`, reusing the memo when the old match is
    /// provably still the unique nearest point: it is closer to `q` than the
    /// old runner-up distance minus how far the query moved.
    fn nearest(
        &mut self,
        q: Vec3,
        index: &SpatialIndex,
        targets: &[Vec3],
        max_dist: f64,
    ) -> Option<usize> {
        if self.id != usize::MAX {
            let moved = (q - self.query).norm();
            let dist = (targets[self.id] - q).norm();
            if dist + moved + 1e-9 < self.margin {
                return Some(self.id);
            }
        }
        let (hit, margin) = index.nearest_two_within(&q, max_dist);
        *self = Self {
            query: q,
            id: hit.map_or(usize::MAX, |h| h.id),
            margin,
        };
        hit.map(|h| h.id)
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum RegistrationError {
    #[error("target cloud has no normals/planarity; estimate them first")]
    MissingNormals,
    #[error("only {found} correspondences, at least 6 are needed")]
    InsufficientCorrespondences { found: usize },
    #[error("no correspondences and no prior: nothing constrains the pose")]
    NoConstraints,
    #[error("invalid correspondence: {0}")]
    InvalidCorrespondence(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

/// A source point paired with a target point and its tangent plane.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Correspondence {
    /// Index of the source point in its cloud.
    pub source_index: usize,
    /// Source point, in the source frame.
    pub source: Vec3,
    pub target: Vec3,
    /// Unit normal of the target plane.
    pub normal: Vec3,
    /// Planarity `a2D` of the target neighborhood, in `[0, 1]`.
    pub planarity: f64,
}

impl Correspondence {
    pub fn new(
        source: Vec3,
        target: Vec3,
        normal: Vec3,
        planarity: f64,
    ) -> Result<Self, RegistrationError> {
        if (normal.norm() - 1.0).abs() > 1e-6 {
            return Err(RegistrationError::InvalidCorrespondence(format!(
                "normal norm {} is not 1",
                normal.norm()
            )));
        }
        if !(0.0..=1.0).contains(&planarity) {
            return Err(RegistrationError::InvalidCorrespondence(format!(
                "planarity {planarity} outside [0, 1]"
            )));
        }
        Ok(Self {
            source_index: 0,
            source,
            target,
            normal,
            planarity,
        })
    }

    pub fn with_source_index(mut self, index: usize) -> Self {
        self.source_index = index;
        self
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegistrationConfig {
    pub max_iterations: usize,
    /// Convergence threshold on the combined rad/m step norm.
    pub step_tol: f64,
    /// Correspondences farther than this (meters) are discarded.
    pub max_dist: f64,
    /// Normal equations above this condition number are damped.
    pub cond_limit: f64,
    /// Scale each squared residual by the target planarity squared.
    pub weight_by_planarity: bool,
    /// Additionally scale each residual by the scan confidence along its
    /// normal (only used by the fused optimizer, which knows the confidence).
    pub directional_reweighting: bool,
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        Self {
            max_iterations: 30,
            step_tol: 1e-6,
            max_dist: 1.0,
            cond_limit: 1e8,
            weight_by_planarity: true,
            directional_reweighting: false,
        }
    }
}

impl RegistrationConfig {
    pub fn validate(&self) -> Result<(), RegistrationError> {
        let bad = |msg: &str| Err(RegistrationError::InvalidConfig(msg.to_string()));
        if self.max_iterations < 1 {
            return bad("max_iterations must be at least 1");
        }
        if !(self.step_tol > 0.0) {
            return bad("step_tol must be positive");
        }
        if !(self.max_dist >= 0.0) {
            return bad("max_dist must be non-negative");
        }
        if !(self.cond_limit > 1.0) {
            return bad("cond_limit must exceed 1");
        }
        Ok(())
    }

    pub(crate) fn residual_weight(&self, c: &Correspondence) -> f64 {
        if self.weight_by_planarity {
            c.planarity * c.planarity
        } else {
            1.0
        }
    }
}

/// Pairs every source point (mapped through `pose`) with its nearest target
/// point, keeping pairs within `max_dist` whose target normal is set.
pub fn find_correspondences(
    source: &PointCloud,
    target_index: &SpatialIndex,
    target: &PointCloud,
    pose: &PoseSE3,
    max_dist: f64,
) -> Result<Vec<Correspondence>, RegistrationError> {
    let mut memo = vec![MatchMemo::default(); source.len()];
    find_correspondences_memo(source, target_index, target, pose, max_dist, &mut memo)
}

/// [`find_correspondences`] that remembers each source point's last search
/// in `memo` (one slot per source point). Results are identical to a fresh
/// search; the memo only lets small pose updates skip most tree queries.
pub(crate) fn find_correspondences_memo(
    source: &PointCloud,
    target_index: &SpatialIndex,
    target: &PointCloud,
    pose: &PoseSE3,
    max_dist: f64,
    memo: &mut [MatchMemo],
) -> Result<Vec<Correspondence>, RegistrationError> {
    let (Some(_), Some(planarity)) = (target.normals(), target.planarity()) else {
        return Err(RegistrationError::MissingNormals);
    };
    assert_eq!(memo.len(), source.len(), "one memo slot per source point");
    let targets = target.points();
    let mut hits = vec![None; source.len()];
    source
        .points()
        .par_chunks(MATCH_CHUNK)
        .zip(memo.par_chunks_mut(MATCH_CHUNK))
        .zip(hits.par_chunks_mut(MATCH_CHUNK))
        .for_each(|((points, memo), hits)| {
            for ((p, m), hit) in points.iter().zip(memo.iter_mut()).zip(hits.iter_mut()) {
                *hit = m.nearest(pose.apply(p), target_index, targets, max_dist);
            }
        });
    Ok(source
        .points()
        .iter()
        .zip(hits.iter())
        .enumerate()
        .filter_map(|(i, (p, hit))| {
            let id = (*hit)?;
            let normal = target.normal(id)?;
            Some(Correspondence {
                source_index: i,
                source: *p,
                target: targets[id],
                normal,
                planarity: planarity[id],
            })
        })
        .collect())
}

/// Signed point-to-plane distance `(R p + t − q) · n`.
pub fn point_plane_residual(c: &Correspondence, pose: &PoseSE3) -> f64 {
    (pose.apply(&c.source) - c.target).dot(&c.normal)
}

/// Derivative of [`point_plane_residual`] with respect to the right
/// perturbation `[δr; δt]` at `pose`: `[p × n_b; n_b]` with `n_b = Rᵀ n`
/// the target normal seen from the source frame.
pub fn residual_jacobian(c: &Correspondence, pose: &PoseSE3) -> Vector6<f64> {
    let n_body = pose.rotation().inverse() * c.normal;
    let rot = c.source.cross(&n_body);
    Vector6::new(rot.x, rot.y, rot.z, n_body.x, n_body.y, n_body.z)
}

/// The 6×6 constraint matrix `C = Σ Jᵢ Jᵢᵀ` of a correspondence set.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AlignmentMatrix {
    matrix: Matrix6<f64>,
}

/// Eigen-decomposition of an [`AlignmentMatrix`], eigenvalues ascending.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignmentEigen {
    pub values: [f64; 6],
    /// Unit eigenvectors, `vectors[i]` belongs to `values[i]`.
    pub vectors: [Vector6<f64>; 6],
}

impl AlignmentMatrix {
    pub fn from_matrix(matrix: Matrix6<f64>) -> Self {
        Self { matrix }
    }

    pub fn zeros() -> Self {
        Self::from_matrix(Matrix6::zeros())
    }

    pub fn matrix(&self) -> &Matrix6<f64> {
        &self.matrix
    }

    pub fn eigen(&self) -> AlignmentEigen {
        let sym = 0.5 * (self.matrix + self.matrix.transpose());
        let eig = SymmetricEigen::new(sym);
        let mut order = [0usize, 1, 2, 3, 4, 5];
        order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
        AlignmentEigen {
            values: order.map(|i| eig.eigenvalues[i]),
            vectors: order.map(|i| eig.eigenvectors.column(i).into_owned()),
        }
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.eigen().values[0]
    }

    /// `λmax / λmin`, infinite when the matrix is singular.
    pub fn condition_number(&self) -> f64 {
        let e = self.eigen();
        if e.values[0] <= 0.0 {
            f64::INFINITY
        } else {
            e.values[5] / e.values[0]
        }
    }
}

/// Alignment matrix of `correspondences` with rows evaluated at `pose`.
/// Unweighted: planarity does not enter.
pub fn alignment_matrix(correspondences: &[Correspondence], pose: &PoseSE3) -> AlignmentMatrix {
    let mut m = Matrix6::zeros();
    for c in correspondences {
        let j = residual_jacobian(c, pose);
        m += j * j.transpose();
    }
    AlignmentMatrix::from_matrix(m)
}

/// Final state of a registration run.
#[derive(Clone, Debug, PartialEq)]
pub struct RegistrationResult {
    pub pose: PoseSE3,
    /// Unweighted sum of squared point-to-plane distances at `pose` (m²).
    pub final_error: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Alignment matrix of the first iteration, i.e. at the initial guess.
    pub alignment: AlignmentMatrix,
    pub correspondences_used: usize,
    /// Objective value at the start of each iteration (weighted, prior included).
    pub cost_history: Vec<f64>,
    /// Iterations whose normal equations exceeded the condition limit and were damped.
    pub damped_iterations: usize,
}

/// Point-to-plane Gauss–Newton registration of `source` onto `target`.
///
/// Correspondences are re-established every iteration. Returns
/// [`RegistrationError::InsufficientCorrespondences`] if fewer than six pairs
/// survive the distance gate.
pub fn solve_registration(
    source: &PointCloud,
    target: &PointCloud,
    target_index: &SpatialIndex,
    init: &PoseSE3,
    cfg: &RegistrationConfig,
) -> Result<RegistrationResult, RegistrationError> {
    cfg.validate()?;
    if target.normals().is_none() || target.planarity().is_none() {
        return Err(RegistrationError::MissingNormals);
    }
    gauss_newton(
        SolveInput {
            matches: Matches::Rematch(
                ScanMatcher {
                    source,
                    target,
                    index: target_index,
                },
                None,
                Vec::new(),
            ),
            factor: None,
            confidence: None,
        },
        init,
        cfg,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Matrix6;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::FRAC_PI_2;

    fn corr(p: Vec3, q: Vec3, n: Vec3) -> Correspondence {
        Correspondence::new(p, q, n, 1.0).unwrap()
    }

    #[test]
    fn residual_examples() {
        let c = corr(Vec3::x(), Vec3::zeros(), Vec3::x());
        assert_eq!(point_plane_residual(&c, &PoseSE3::identity()), 1.0);
        let shifted = PoseSE3::from_translation(Vec3::new(-1.0, 0.0, 0.0));
        assert_eq!(point_plane_residual(&c, &shifted), 0.0);
        let rotated = PoseSE3::from_rotation_vector(Vec3::new(0.0, 0.0, FRAC_PI_2), Vec3::zeros());
        assert!(point_plane_residual(&c, &rotated).abs() < 1e-15);
    }

    #[test]
    fn jacobian_examples() {
        let n = Vec3::new(0.0, 0.6, 0.8);
        let j = residual_jacobian(&corr(Vec3::zeros(), Vec3::x(), n), &PoseSE3::identity());
        assert_eq!(j, Vector6::new(0.0, 0.0, 0.0, 0.0, 0.6, 0.8));

        let j = residual_jacobian(
            &corr(Vec3::x(), Vec3::zeros(), Vec3::y()),
            &PoseSE3::identity(),
        );
        assert_eq!(j, Vector6::new(0.0, 0.0, 1.0, 0.0, 1.0, 0.0));
    }

    #[test]
    fn invalid_correspondences_are_rejected() {
        assert!(
            Correspondence::new(Vec3::zeros(), Vec3::zeros(), Vec3::new(0.0, 0.0, 2.0), 0.5)
                .is_err()
        );
        assert!(Correspondence::new(Vec3::zeros(), Vec3::zeros(), Vec3::z(), 1.5).is_err());
    }

    #[test]
    fn first_order_change_vanishes_for_orthogonal_motion() {
        // n ⊥ δt and (p × n) ⊥ δr: the residual changes only at second order.
        let c = corr(Vec3::new(1.0, 2.0, 0.0), Vec3::zeros(), Vec3::z());
        // p × n = (2, −1, 0); δr = yaw is orthogonal to it, δt = x is orthogonal to n
        let base = point_plane_residual(&c, &PoseSE3::identity());
        for scale in [1e-2, 1e-3, 1e-4] {
            let delta = crate::liegroup::TangentVector::new(
                Vec3::new(0.0, 0.0, scale),
                Vec3::new(scale, 0.0, 0.0),
            );
            let moved = PoseSE3::identity().retract(&delta);
            let change = (point_plane_residual(&c, &moved) - base).abs();
            assert!(
                change <= 10.0 * scale * scale,
                "change {change} at scale {scale}"
            );
        }
        // while a constrained direction moves it at first order
        let moved = PoseSE3::from_translation(Vec3::new(0.0, 0.0, 1e-3));
        assert!((point_plane_residual(&c, &moved) - base - 1e-3).abs() < 1e-15);
    }

    #[test]
    fn single_correspondence_at_origin_has_rank_one() {
        let c = corr(Vec3::zeros(), Vec3::zeros(), Vec3::z());
        let m = alignment_matrix(&[c], &PoseSE3::identity());
        let mut want = Matrix6::zeros();
        want[(5, 5)] = 1.0;
        assert_eq!(*m.matrix(), want);
        let e = m.eigen();
        assert_eq!(e.values.iter().filter(|v| v.abs() > 1e-12).count(), 1);
    }

    /// Three orthogonal planes at unit offsets with three spread points each.
    fn three_planes() -> Vec<Correspondence> {
        let mut out = Vec::new();
        for (axis, (u, v)) in [
            (Vec3::x(), (Vec3::y(), Vec3::z())),
            (Vec3::y(), (Vec3::z(), Vec3::x())),
            (Vec3::z(), (Vec3::x(), Vec3::y())),
        ] {
            for (a, b) in [(0.0, 0.0), (1.0, 0.0), (0.0, 1.0)] {
                let q = axis + u * a + v * b;
                out.push(corr(q, q, axis));
            }
        }
        out
    }

    #[test]
    fn three_orthogonal_planes_have_full_rank() {
        let m = alignment_matrix(&three_planes(), &PoseSE3::identity());
        let e = m.eigen();
        assert!(e.values[0] > 1e-3, "eigenvalues {:?}", e.values);
        assert!(m.condition_number().is_finite());
    }

    #[test]
    fn corridor_alignment_is_degenerate_along_x() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut cs = Vec::new();
        for _ in 0..300 {
            let x = rng.random_range(-10.0..10.0);
            let s = rng.random_range(-1.0..1.0);
            cs.push(corr(Vec3::new(x, 1.0, s), Vec3::new(x, 1.0, s), -Vec3::y()));
            cs.push(corr(
                Vec3::new(x, -1.0, s),
                Vec3::new(x, -1.0, s),
                Vec3::y(),
            ));
            cs.push(corr(
                Vec3::new(x, s, -1.0),
                Vec3::new(x, s, -1.0),
                Vec3::z(),
            ));
        }
        let e = alignment_matrix(&cs, &PoseSE3::identity()).eigen();
        let v = e.vectors[0];
        let angle = v[3].abs().min(1.0).acos().to_degrees();
        assert!(angle < 5.0, "smallest eigenvector {v:?}");
    }

    fn random_correspondence(rng: &mut ChaCha8Rng) -> (Correspondence, PoseSE3) {
        let mut v = || {
            Vec3::new(
                rng.random_range(-5.0..5.0),
                rng.random_range(-5.0..5.0),
                rng.random_range(-5.0..5.0),
            )
        };
        let p = v();
        let q = v();
        let n = v().normalize();
        let pose = PoseSE3::from_rotation_vector(v() * 0.3, v());
        (corr(p, q, n), pose)
    }

    #[test]
    fn alignment_matrix_is_sum_of_outer_products() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (_, pose) = random_correspondence(&mut rng);
        let cs: Vec<Correspondence> = (0..50).map(|_| random_correspondence(&mut rng).0).collect();
        let m = alignment_matrix(&cs, &pose);
        let mut sum = Matrix6::zeros();
        for c in &cs {
            let j = residual_jacobian(c, &pose);
            sum += j * j.transpose();
        }
        assert!((m.matrix() - sum).abs().max() < 1e-10);
        assert!((m.matrix() - m.matrix().transpose()).abs().max() < 1e-9);
        assert!(m.min_eigenvalue() >= -1e-9);
    }

    #[test]
    fn find_correspondences_requires_normals() {
        let cloud = PointCloud::new(vec![Vec3::zeros(); 4]);
        let index = SpatialIndex::build(&cloud).unwrap();
        assert_eq!(
            find_correspondences(&cloud, &index, &cloud, &PoseSE3::identity(), 1.0).unwrap_err(),
            RegistrationError::MissingNormals
        );
    }

    #[test]
    fn memoized_matching_equals_fresh_search() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cube = |n: usize, rng: &mut ChaCha8Rng| -> Vec<Vec3> {
            (0..n)
                .map(|_| {
                    Vec3::new(
                        rng.random_range(-2.0..2.0),
                        rng.random_range(-2.0..2.0),
                        rng.random_range(-2.0..2.0),
                    )
                })
                .collect()
        };
        let targets = cube(2000, &mut rng);
        let target = PointCloud::new(targets)
            .with_normals(vec![Vec3::z(); 2000])
            .unwrap()
            .with_planarity(vec![1.0; 2000])
            .unwrap();
        let source = PointCloud::new(cube(1500, &mut rng));
        let index = SpatialIndex::build(&target).unwrap();
        let mut memo = vec![MatchMemo::default(); source.len()];
        let mut pose = PoseSE3::identity();
        for step in 0..40 {
            let scale = 0.3 / (1 + step) as f64;
            let delta = Vector6::from_fn(|_, _| rng.random_range(-scale..scale));
            pose = pose.retract(&crate::liegroup::TangentVector::from_vector6(&delta));
            let fresh = find_correspondences(&source, &index, &target, &pose, 0.25).unwrap();
            let memoized =
                find_correspondences_memo(&source, &index, &target, &pose, 0.25, &mut memo)
                    .unwrap();
            assert_eq!(fresh, memoized, "step {step}");
        }
    }

    #[test]
    fn config_validation() {
        assert!(RegistrationConfig::default().validate().is_ok());
        let cfg = RegistrationConfig {
            max_iterations: 0,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = RegistrationConfig {
            cond_limit: 0.5,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }

    proptest! {
        #[test]
        fn jacobian_matches_central_differences(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (c, pose) = random_correspondence(&mut rng);
            let analytic = residual_jacobian(&c, &pose);
            let h = 1e-6;
            for k in 0..6 {
                let mut d = Vector6::zeros();
                d[k] = h;
                let plus = point_plane_residual(&c, &pose.retract(&crate::liegroup::TangentVector::from_vector6(&d)));
                let minus = point_plane_residual(&c, &pose.retract(&crate::liegroup::TangentVector::from_vector6(&-d)));
                let fd = (plus - minus) / (2.0 * h);
                prop_assert!((fd - analytic[k]).abs() <= 1e-5 * analytic[k].abs().max(1.0));
            }
        }
    }
}
