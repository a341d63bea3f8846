use thiserror::Error;

use crate::liegroup::PoseSE3;

#[derive(Debug, Error, PartialEq)]
pub enum TrajectoryError {
    #[error("timestamp {next} at index {index} does not follow {prev}")]
    NotIncreasing { index: usize, prev: f64, next: f64 },
    #[error("timestamp at index {0} is not finite")]
    NonFinite(usize),
}

/// Timestamped poses with strictly increasing timestamps (seconds).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Trajectory {
    poses: Vec<(f64, PoseSE3)>,
}

impl Trajectory {
    pub fn new(poses: Vec<(f64, PoseSE3)>) -> Result<Self, TrajectoryError> {
        for (index, (t, _)) in poses.iter().enumerate() {
            if !t.is_finite() {
                return Err(TrajectoryError::NonFinite(index));
            }
            if index > 0 && *t <= poses[index - 1].0 {
                return Err(TrajectoryError::NotIncreasing {
                    index,
                    prev: poses[index - 1].0,
                    next: *t,
                });
            }
        }
        Ok(Self { poses })
    }

    pub fn push(&mut self, timestamp: f64, pose: PoseSE3) -> Result<(), TrajectoryError> {
        let index = self.poses.len();
        if !timestamp.is_finite() {
            return Err(TrajectoryError::NonFinite(index));
        }
        if let Some(&(prev, _)) = self.poses.last() {
            if timestamp <= prev {
                return Err(TrajectoryError::NotIncreasing {
                    index,
                    prev,
                    next: timestamp,
                });
            }
        }
        self.poses.push((timestamp, pose));
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    pub fn poses(&self) -> &[(f64, PoseSE3)] {
        &self.poses
    }

    pub fn timestamps(&self) -> impl Iterator<Item = f64> + '_ {
        self.poses.iter().map(|(t, _)| *t)
    }

    pub fn iter(&self) -> impl Iterator<Item = &(f64, PoseSE3)> {
        self.poses.iter()
    }

    /// Relative motion `pose[i-1]⁻¹ ∘ pose[i]` for every `i ≥ 1`, stamped at `pose[i]`.
    pub fn relative_motions(&self) -> Vec<(f64, PoseSE3)> {
        self.poses
            .windows(2)
            .map(|w| (w[1].0, w[0].1.inverse().compose(&w[1].1)))
            .collect()
    }
}
