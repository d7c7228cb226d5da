//! The three search objectives: minimum headway distance (minimise),
//! acceleration change rate (maximise) and parameter-space diversity
//! (maximise).

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dsl::{ConcreteTestCase, DEFAULT_VEHICLE_LENGTH};
use crate::sim::SimTrace;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    Minimize,
    Maximize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitnessVector {
    /// Minimum ego-to-NPC headway distance, meters.
    pub mhd: f64,
    /// Acceleration change rate, events per second.
    pub acr: f64,
    /// Mean pairwise distance in normalised parameter space.
    pub div: f64,
}

impl FitnessVector {
    pub const DIRECTIONS: [Direction; 3] = [Direction::Minimize, Direction::Maximize, Direction::Maximize];

    pub fn objectives(&self) -> [f64; 3] {
        [self.mhd, self.acr, self.div]
    }

    /// Pareto dominance under [`Self::DIRECTIONS`].
    pub fn dominates(&self, other: &FitnessVector) -> bool {
        let mut strictly_better = false;
        for ((a, b), dir) in self.objectives().into_iter().zip(other.objectives()).zip(Self::DIRECTIONS) {
            let (better, worse) = match dir {
                Direction::Minimize => (a < b, a > b),
                Direction::Maximize => (a > b, a < b),
            };
            if worse {
                return false;
            }
            strictly_better |= better;
        }
        strictly_better
    }
}

/// Which cases `div` measures a candidate against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DivReference {
    /// The current population (the sampled batch in the first generation).
    #[default]
    Population,
    /// Every case evaluated so far.
    Archive,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitnessConfig {
    /// Minimum acceleration difference counted by `acr`, m/s^2.
    pub eta: f64,
    /// Headway distance below which a run counts as a collision.
    pub collision_threshold: f64,
    pub div_reference: DivReference,
}

impl Default for FitnessConfig {
    fn default() -> Self {
        Self { eta: 1.0, collision_threshold: DEFAULT_VEHICLE_LENGTH, div_reference: DivReference::Population }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FitnessError {
    #[error("trace has no NPC vehicle")]
    NoNpc,
    #[error("trace has {0} steps, at least 3 are needed")]
    TraceTooShort(usize),
    #[error("eta must be positive, got {0}")]
    InvalidEta(f64),
    #[error("point dimensions differ: {expected} vs {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("diversity needs at least one point")]
    EmptyPointSet,
}

/// Minimum over time and NPCs of the ego-to-NPC headway distance.
pub fn mhd(trace: &SimTrace) -> Result<f64, FitnessError> {
    if trace.npc_count() == 0 {
        return Err(FitnessError::NoNpc);
    }
    Ok((0..trace.steps.len()).filter_map(|k| trace.closest_npc(k).map(|(_, d)| d)).fold(f64::INFINITY, f64::min))
}

/// Values of the stationary points of a sampled signal.
///
/// Runs of equal samples form one plateau point. A single sample is
/// stationary when the difference changes sign across it.
pub fn stationary_points(signal: &[f64]) -> Vec<f64> {
    let mut runs: Vec<(f64, usize)> = Vec::new();
    for &x in signal {
        match runs.last_mut() {
            Some((v, n)) if *v == x => *n += 1,
            _ => runs.push((x, 1)),
        }
    }
    (0..runs.len())
        .filter(|&i| {
            let (v, n) = runs[i];
            if n >= 2 {
                return true;
            }
            if i == 0 || i + 1 == runs.len() {
                return false;
            }
            let before = v - runs[i - 1].0;
            let after = runs[i + 1].0 - v;
            before.signum() != after.signum()
        })
        .map(|i| runs[i].0)
        .collect()
}

/// `acr` on a raw acceleration series covering `duration` seconds.
pub fn acr_of_series(accel: &[f64], duration: f64, eta: f64) -> Result<f64, FitnessError> {
    if !(eta > 0.0) {
        return Err(FitnessError::InvalidEta(eta));
    }
    if accel.len() < 3 || !(duration > 0.0) {
        return Err(FitnessError::TraceTooShort(accel.len()));
    }
    let points = stationary_points(accel);
    let mut count = 0usize;
    for (i, a) in points.iter().enumerate() {
        count += points[i + 1..].iter().filter(|b| (a - *b).abs() >= eta).count();
    }
    Ok(count as f64 / duration)
}

/// Unordered pairs of distinct stationary points of the ego acceleration
/// whose values differ by at least `eta`, per second of simulated time.
pub fn acr(trace: &SimTrace, eta: f64) -> Result<f64, FitnessError> {
    acr_of_series(&trace.ego_accelerations(), trace.duration(), eta)
}

/// Mean Euclidean distance over all unordered pairs; 0 for a single point.
pub fn div(points: &[Vec<f64>]) -> Result<f64, FitnessError> {
    let first = points.first().ok_or(FitnessError::EmptyPointSet)?;
    if let Some(bad) = points.iter().find(|p| p.len() != first.len()) {
        return Err(FitnessError::DimensionMismatch { expected: first.len(), found: bad.len() });
    }
    if points.len() == 1 {
        return Ok(0.0);
    }
    let mut total = 0.0;
    let mut pairs = 0usize;
    for (i, p) in points.iter().enumerate() {
        for q in &points[i + 1..] {
            total += p.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            pairs += 1;
        }
    }
    Ok(total / pairs as f64)
}

/// Scores one simulated case. `reference` holds normalised points of the
/// cases the candidate is compared against, excluding the candidate.
///
/// A run that collides within its first two steps has no usable
/// acceleration signal and scores `acr = 0`.
pub fn evaluate(
    tc: &ConcreteTestCase,
    trace: &SimTrace,
    reference: &[Vec<f64>],
    cfg: &FitnessConfig,
) -> Result<FitnessVector, FitnessError> {
    let mhd = mhd(trace)?;
    let acr = match acr(trace, cfg.eta) {
        Err(FitnessError::TraceTooShort(_)) => 0.0,
        other => other?,
    };
    let mut points = reference.to_vec();
    points.push(tc.normalized());
    let div = div(&points)?;
    Ok(FitnessVector { mhd, acr, div })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ips::VehicleId;
    use crate::sim::{RoadGeometry, RoadModel, TraceStep, VehicleState};

    fn state(id: u32, lane: f64, s: f64, a: f64) -> VehicleState {
        VehicleState { id: VehicleId::new(id).unwrap(), lane, s, v: 10.0, a, heading: 0.0 }
    }

    fn trace(steps: Vec<Vec<VehicleState>>, dt: f64) -> SimTrace {
        let vehicles = steps[0].iter().map(|s| s.id).collect();
        SimTrace {
            dt,
            horizon: (steps.len() - 1) as f64 * dt,
            road: RoadModel { geometry: RoadGeometry::Straight, lane_count: 3, lane_width: 5.0 },
            vehicle_length: 4.5,
            vehicles,
            steps: steps.into_iter().enumerate().map(|(k, states)| TraceStep { t: k as f64 * dt, states }).collect(),
            actions: vec![],
            collision: None,
        }
    }

    #[test]
    fn mhd_takes_min_over_time_and_npcs() {
        let d1 = [10.0, 6.0, 8.0];
        let d2 = [12.0, 7.0, 5.0];
        let steps = (0..3)
            .map(|k| vec![state(1, 1.0, 0.0, 0.0), state(2, 1.0, d1[k], 0.0), state(3, 1.0, -d2[k], 0.0)])
            .collect();
        assert_eq!(mhd(&trace(steps, 0.1)).unwrap(), 5.0);

        let same = vec![vec![state(1, 2.0, 3.0, 0.0), state(2, 2.0, 3.0, 0.0)]];
        assert_eq!(mhd(&trace(same, 0.1)).unwrap(), 0.0);

        let alone = vec![vec![state(1, 1.0, 0.0, 0.0)]];
        assert_eq!(mhd(&trace(alone, 0.1)), Err(FitnessError::NoNpc));
    }

    #[test]
    fn stationary_points_of_simple_shapes() {
        assert_eq!(stationary_points(&[0.0, 1.0, 0.0]), vec![1.0]);
        assert_eq!(stationary_points(&[0.0, 1.0, 2.0]), Vec::<f64>::new());
        assert_eq!(stationary_points(&[1.0, 1.0, 2.0, 3.0, 3.0]), vec![1.0, 3.0]);
    }

    #[test]
    fn acr_edge_cases() {
        assert_eq!(acr_of_series(&[1.5; 10], 1.0, 1.0).unwrap(), 0.0);
        assert_eq!(acr_of_series(&[0.0, 0.0, 2.0, 2.0], 1.0, 5.0).unwrap(), 0.0);
        assert!(matches!(acr_of_series(&[0.0, 1.0], 1.0, 1.0), Err(FitnessError::TraceTooShort(2))));
        assert!(matches!(acr_of_series(&[0.0; 4], 1.0, 0.0), Err(FitnessError::InvalidEta(_))));
    }

    #[test]
    fn div_basics() {
        assert_eq!(div(&vec![vec![0.3, 0.3]; 4]).unwrap(), 0.0);
        assert_eq!(div(&[vec![0.0; 3], vec![1.0; 3]]).unwrap(), 3f64.sqrt());
        assert_eq!(div(&[vec![0.5]]).unwrap(), 0.0);
        assert!(matches!(div(&[]), Err(FitnessError::EmptyPointSet)));
        assert!(matches!(div(&[vec![0.0], vec![0.0, 1.0]]), Err(FitnessError::DimensionMismatch { .. })));
    }

    #[test]
    fn dominance_respects_directions() {
        let base = FitnessVector { mhd: 5.0, acr: 1.0, div: 1.0 };
        assert!(FitnessVector { mhd: 4.0, ..base }.dominates(&base));
        assert!(FitnessVector { acr: 2.0, ..base }.dominates(&base));
        assert!(!FitnessVector { mhd: 6.0, ..base }.dominates(&base));
        assert!(!base.dominates(&base));
        assert!(!FitnessVector { mhd: 4.0, div: 0.5, ..base }.dominates(&base));
    }
}
