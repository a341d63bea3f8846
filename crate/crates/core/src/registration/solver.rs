use std::borrow::Cow;

use nalgebra::{Matrix6, SymmetricEigen, Vector6};

use super::{
    alignment_matrix, find_correspondences, find_correspondences_memo, point_plane_residual,
    residual_jacobian, AlignmentMatrix, Correspondence, MatchMemo, RegistrationConfig,
    RegistrationError, RegistrationResult,
};
use crate::liegroup::{PoseSE3, TangentVector};
use crate::pointcloud::{PointCloud, SpatialIndex};

const MAX_HALVINGS: usize = 10;
const DAMPING_SCALE: f64 = 1e-6;

/// An extra 6-dimensional residual on the pose, added to the point-to-plane
/// objective as `Σ_k w_k e_k²`.
pub trait PoseFactor {
    /// Residual and its Jacobian (rows = components) with respect to the
    /// right perturbation at `pose`.
    fn linearize(&self, pose: &PoseSE3) -> (Vector6<f64>, Matrix6<f64>);

    /// Per-component weights, all in `[0, 1]`.
    fn weights(&self) -> Vector6<f64>;

    fn cost(&self, pose: &PoseSE3) -> f64 {
        let (e, _) = self.linearize(pose);
        e.component_mul(&e).dot(&self.weights())
    }
}

/// Re-establishes correspondences between a source scan and an indexed target.
#[derive(Clone, Copy)]
pub struct ScanMatcher<'a> {
    pub source: &'a PointCloud,
    pub target: &'a PointCloud,
    pub index: &'a SpatialIndex,
}

impl ScanMatcher<'_> {
    pub fn correspondences(
        &self,
        pose: &PoseSE3,
        max_dist: f64,
    ) -> Result<Vec<Correspondence>, RegistrationError> {
        find_correspondences(self.source, self.index, self.target, pose, max_dist)
    }

    pub(crate) fn correspondences_memo(
        &self,
        pose: &PoseSE3,
        max_dist: f64,
        memo: &mut [MatchMemo],
    ) -> Result<Vec<Correspondence>, RegistrationError> {
        find_correspondences_memo(self.source, self.index, self.target, pose, max_dist, memo)
    }
}

pub(crate) enum Matches<'a> {
    Fixed(&'a [Correspondence]),
    /// Re-associates at every iterate. The optional set was already found
    /// at the initial pose and saves the first search. The memo carries the
    /// nearest-neighbor searches behind it; an empty one starts fresh.
    Rematch(
        ScanMatcher<'a>,
        Option<&'a [Correspondence]>,
        Vec<MatchMemo>,
    ),
}

pub(crate) struct SolveInput<'a> {
    pub matches: Matches<'a>,
    pub factor: Option<&'a dyn PoseFactor>,
    /// Translational confidence `[x, y, z]` used for directional reweighting.
    pub confidence: Option<[f64; 3]>,
}

struct Objective<'a> {
    factor: Option<&'a dyn PoseFactor>,
    cfg: &'a RegistrationConfig,
    confidence: Option<[f64; 3]>,
}

impl Objective<'_> {
    fn weight(&self, c: &Correspondence) -> f64 {
        let mut w = self.cfg.residual_weight(c);
        if let (true, Some(conf)) = (self.cfg.directional_reweighting, self.confidence) {
            let n = c.normal;
            w *= conf[0] * n.x * n.x + conf[1] * n.y * n.y + conf[2] * n.z * n.z;
        }
        w
    }

    fn cost(&self, corrs: &[Correspondence], weights: &[f64], pose: &PoseSE3) -> f64 {
        let icp: f64 = corrs
            .iter()
            .zip(weights)
            .map(|(c, w)| {
                let r = point_plane_residual(c, pose);
                w * r * r
            })
            .sum();
        icp + self.factor.map_or(0.0, |f| f.cost(pose))
    }

    /// Normal equations `(H, g)` of the weighted objective and its value.
    fn linearize(
        &self,
        corrs: &[Correspondence],
        weights: &[f64],
        pose: &PoseSE3,
    ) -> (Matrix6<f64>, Vector6<f64>, f64) {
        let mut h = Matrix6::zeros();
        let mut g = Vector6::zeros();
        let mut cost = 0.0;
        for (c, &w) in corrs.iter().zip(weights) {
            let j = residual_jacobian(c, pose);
            let r = point_plane_residual(c, pose);
            h += (w * j) * j.transpose();
            g += (w * r) * j;
            cost += w * r * r;
        }
        if let Some(f) = self.factor {
            let (e, jac) = f.linearize(pose);
            let w = Matrix6::from_diagonal(&f.weights());
            h += jac.transpose() * w * jac;
            g += jac.transpose() * (w * e);
            cost += e.component_mul(&e).dot(&f.weights());
        }
        (h, g, cost)
    }
}

/// Adds `λ I` with `λ = 1e-6 · trace(H) / 6` when `H` is worse conditioned than
/// `cond_limit`. Returns whether damping was applied.
fn condition(h: &Matrix6<f64>, cond_limit: f64) -> (Matrix6<f64>, bool) {
    let sym = 0.5 * (h + h.transpose());
    let eig = SymmetricEigen::new(sym);
    let min = eig.eigenvalues.min();
    let max = eig.eigenvalues.max();
    let cond = if min > 0.0 { max / min } else { f64::INFINITY };
    if cond > cond_limit {
        let lambda = DAMPING_SCALE * sym.trace() / 6.0;
        (sym + Matrix6::identity() * lambda, true)
    } else {
        (sym, false)
    }
}

fn solve_step(h: Matrix6<f64>, g: &Vector6<f64>) -> Option<Vector6<f64>> {
    let rhs = -g;
    if let Some(chol) = h.cholesky() {
        return Some(chol.solve(&rhs));
    }
    h.lu()
        .solve(&rhs)
        .filter(|s| s.iter().all(|v| v.is_finite()))
}

fn fingerprint(corrs: &[Correspondence]) -> u64 {
    use std::hash::{Hash, Hasher};
    let mut h = std::collections::hash_map::DefaultHasher::new();
    corrs.len().hash(&mut h);
    for c in corrs {
        c.source_index.hash(&mut h);
        for v in c.target.iter() {
            v.to_bits().hash(&mut h);
        }
    }
    h.finish()
}

/// Damped Gauss–Newton with backtracking on the (optionally fused) objective.
pub(crate) fn gauss_newton(
    mut input: SolveInput<'_>,
    init: &PoseSE3,
    cfg: &RegistrationConfig,
) -> Result<RegistrationResult, RegistrationError> {
    let objective = Objective {
        factor: input.factor,
        cfg,
        confidence: input.confidence,
    };
    let mut memo = match &mut input.matches {
        Matches::Rematch(m, _, memo) if memo.len() == m.source.len() => std::mem::take(memo),
        Matches::Rematch(m, _, _) => vec![MatchMemo::default(); m.source.len()],
        Matches::Fixed(_) => Vec::new(),
    };
    let mut gather = |pose: &PoseSE3| -> Result<Cow<'_, [Correspondence]>, RegistrationError> {
        match &input.matches {
            Matches::Fixed(c) => Ok(Cow::Borrowed(*c)),
            Matches::Rematch(_, Some(seed), _) if pose == init => Ok(Cow::Borrowed(*seed)),
            Matches::Rematch(m, _, _) => Ok(Cow::Owned(m.correspondences_memo(
                pose,
                cfg.max_dist,
                &mut memo,
            )?)),
        }
    };
    let check = |n: usize| -> Result<(), RegistrationError> {
        if input.factor.is_none() {
            if n == 0 {
                return Err(RegistrationError::NoConstraints);
            }
            if n < 6 {
                return Err(RegistrationError::InsufficientCorrespondences { found: n });
            }
        }
        Ok(())
    };

    let mut pose = *init;
    let mut alignment: Option<AlignmentMatrix> = None;
    let mut cost_history = Vec::new();
    let mut iterations = 0;
    let mut damped_iterations = 0;
    let mut converged = false;

    // Re-matching can alternate between a few correspondence sets whose
    // optima differ by less than the matching resolution. Once a set repeats
    // (other than immediately), it is frozen and the solve finishes on it.
    let mut seen: Vec<u64> = Vec::new();
    let mut frozen: Option<Vec<Correspondence>> = None;
    let mut last: Option<(PoseSE3, Cow<'_, [Correspondence]>)> = None;

    for it in 0..cfg.max_iterations {
        let gathered = match &frozen {
            Some(f) => Cow::Owned(f.clone()),
            None => gather(&pose)?,
        };
        let corrs = &last.insert((pose, gathered)).1;
        if frozen.is_none() && matches!(input.matches, Matches::Rematch(..)) {
            let print = fingerprint(&corrs);
            if seen.len() >= 2 && seen[..seen.len() - 1].contains(&print) {
                frozen = Some(corrs.to_vec());
            }
            seen.push(print);
        }
        if it == 0 {
            check(corrs.len())?;
            alignment = Some(alignment_matrix(&corrs, &pose));
        } else if input.factor.is_none() && corrs.len() < 6 {
            // lost track mid-way: keep the last pose rather than failing
            break;
        }
        let weights: Vec<f64> = corrs.iter().map(|c| objective.weight(c)).collect();
        let (h, g, cost) = objective.linearize(&corrs, &weights, &pose);
        cost_history.push(cost);
        iterations = it + 1;

        if h.trace() <= 0.0 {
            converged = true;
            break;
        }
        let (h_solve, damped) = condition(&h, cfg.cond_limit);
        if damped {
            damped_iterations += 1;
        }
        let Some(step) = solve_step(h_solve, &g) else {
            break;
        };
        if step.norm() < cfg.step_tol {
            pose = pose.retract(&TangentVector::from_vector6(&step));
            converged = true;
            break;
        }

        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..MAX_HALVINGS {
            let delta = step * alpha;
            let candidate = pose.retract(&TangentVector::from_vector6(&delta));
            if objective.cost(&corrs, &weights, &candidate) <= cost * (1.0 + 1e-12) {
                accepted = Some((candidate, delta.norm()));
                break;
            }
            alpha *= 0.5;
        }
        match accepted {
            Some((candidate, norm)) => {
                pose = candidate;
                if norm < cfg.step_tol {
                    converged = true;
                    break;
                }
            }
            // no decrease along the Gauss–Newton direction: stuck at rounding level
            None => break,
        }
    }

    // A final move below the step tolerance cannot change the association in
    // any meaningful way, so the last set is reused instead of searching again.
    let final_corrs = match last {
        Some((at, corrs))
            if frozen.is_none() && at.local_coordinates(&pose).norm() < cfg.step_tol =>
        {
            corrs
        }
        _ => gather(&pose)?,
    };
    let final_error = final_corrs
        .iter()
        .map(|c| point_plane_residual(c, &pose).powi(2))
        .sum();
    Ok(RegistrationResult {
        pose,
        final_error,
        iterations,
        converged,
        alignment: alignment.unwrap_or_else(AlignmentMatrix::zeros),
        correspondences_used: final_corrs.len(),
        cost_history,
        damped_iterations,
    })
}
