//! Groups critical cases into types by the NPC actions that preceded the
//! collision, and aggregates discovery metrics over repeated runs.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dsl::StatementKind;
use crate::ips::RoadShape;
use crate::search::EvaluatedCase;
use crate::sim::{detect_collision, RoadGeometry, SimTrace};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    /// The NPC the ego collided with.
    Striker,
    Bystander,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CollisionGeometry {
    RearEnd,
    LaneChangeSideswipe,
    CutInFrontal,
}

impl fmt::Display for CollisionGeometry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CollisionGeometry::RearEnd => "rear_end",
            CollisionGeometry::LaneChangeSideswipe => "lane_change_sideswipe",
            CollisionGeometry::CutInFrontal => "cut_in_frontal",
        })
    }
}

/// Canonical description of a collision type. Two critical cases are of
/// the same type iff their signatures are equal.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TypeSignature {
    pub road: RoadShape,
    pub npc_count: usize,
    /// Actions active in the pre-collision window, by start time then
    /// vehicle id.
    pub actions: Vec<(Role, StatementKind)>,
    pub geometry: CollisionGeometry,
}

impl fmt::Display for TypeSignature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}npc/", self.road, self.npc_count)?;
        if self.actions.is_empty() {
            f.write_str("none")?;
        }
        for (i, (role, kind)) in self.actions.iter().enumerate() {
            let role = match role {
                Role::Striker => "striker",
                Role::Bystander => "bystander",
            };
            write!(f, "{}{role}:{kind}", if i > 0 { "+" } else { "" })?;
        }
        write!(f, "/{}", self.geometry)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TriageConfig {
    /// Length of the pre-collision window, seconds.
    pub window: f64,
    /// Lateral offset, in lanes, below which an impact counts as rear-end.
    pub rear_end_lane_tolerance: f64,
    /// Longitudinal lead, in vehicle lengths, beyond which a side impact
    /// counts as a frontal cut-in rather than a sideswipe.
    pub frontal_lead: f64,
    pub collision_threshold: f64,
}

impl Default for TriageConfig {
    fn default() -> Self {
        Self {
            window: 10.0,
            rear_end_lane_tolerance: 0.3,
            frontal_lead: 0.5,
            collision_threshold: crate::dsl::DEFAULT_VEHICLE_LENGTH,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TriageError {
    #[error("case is not critical")]
    NotCritical,
    #[error("no repetition history given")]
    EmptyHistory,
}

/// Signature of a trace that contains a collision.
pub fn classify_trace(trace: &SimTrace, cfg: &TriageConfig) -> Result<TypeSignature, TriageError> {
    let hit = detect_collision(trace, cfg.collision_threshold).ok_or(TriageError::NotCritical)?;
    let road = match trace.road.geometry {
        RoadGeometry::Straight => RoadShape::Straight,
        RoadGeometry::Curved { .. } => RoadShape::Curved,
    };
    let from = hit.time - cfg.window;
    let mut active: Vec<_> = trace.actions.iter().filter(|a| a.start <= hit.time && a.end >= from).collect();
    active.sort_by(|a, b| a.start.total_cmp(&b.start).then(a.vehicle.cmp(&b.vehicle)));
    let actions =
        active.iter().map(|a| (if a.vehicle == hit.npc { Role::Striker } else { Role::Bystander }, a.kind)).collect();

    let states = &trace.steps[hit.step].states;
    let ego = &states[0];
    let npc = states.iter().find(|s| s.id == hit.npc).expect("collision names a traced vehicle");
    let geometry = if (npc.lane - ego.lane).abs() < cfg.rear_end_lane_tolerance {
        CollisionGeometry::RearEnd
    } else if npc.s - ego.s > cfg.frontal_lead * trace.vehicle_length {
        CollisionGeometry::CutInFrontal
    } else {
        CollisionGeometry::LaneChangeSideswipe
    };
    Ok(TypeSignature { road, npc_count: trace.npc_count(), actions, geometry })
}

/// Signature of an evaluated case; fails unless the case is critical and
/// carries its trace.
pub fn classify(case: &EvaluatedCase, cfg: &TriageConfig) -> Result<TypeSignature, TriageError> {
    if !(case.fitness.mhd < cfg.collision_threshold) {
        return Err(TriageError::NotCritical);
    }
    classify_trace(case.trace.as_deref().ok_or(TriageError::NotCritical)?, cfg)
}

/// Critical discoveries of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub simulations: usize,
    /// `(sim_index, signature)` in simulation order.
    pub criticals: Vec<(usize, TypeSignature)>,
    pub elapsed_secs: f64,
}

impl RunRecord {
    /// Number of distinct types seen after each simulation, for indices
    /// `1..=simulations`.
    pub fn cumulative_types(&self) -> Vec<(usize, usize)> {
        let mut seen = BTreeSet::new();
        let mut next = self.criticals.iter().peekable();
        (1..=self.simulations)
            .map(|k| {
                while let Some((_, sig)) = next.next_if(|(i, _)| *i <= k) {
                    seen.insert(sig);
                }
                (k, seen.len())
            })
            .collect()
    }
}

/// Metrics of a single run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub n_types: usize,
    pub n_critical: usize,
    /// `n_types / n_critical`, or 0 when there are no criticals.
    pub type_expos_rate: f64,
    pub rate_defined: bool,
    /// Simulation index at which the first type appeared.
    pub sim_for_first_type: Option<usize>,
    /// Simulation index at which the last new type appeared.
    pub sim_for_all_types: Option<usize>,
    pub time_for_one_scenario: f64,
}

pub fn run_metrics(run: &RunRecord) -> RunMetrics {
    let mut seen = BTreeSet::new();
    let mut first = None;
    let mut last = None;
    for (idx, sig) in &run.criticals {
        if seen.insert(sig) {
            first.get_or_insert(*idx);
            last = Some(*idx);
        }
    }
    let n_critical = run.criticals.len();
    RunMetrics {
        n_types: seen.len(),
        n_critical,
        type_expos_rate: if n_critical > 0 { seen.len() as f64 / n_critical as f64 } else { 0.0 },
        rate_defined: n_critical > 0,
        sim_for_first_type: first,
        sim_for_all_types: last,
        time_for_one_scenario: if run.simulations > 0 { run.elapsed_secs / run.simulations as f64 } else { 0.0 },
    }
}

/// Mean and population standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
    /// Number of runs contributing.
    pub n: usize,
}

impl Stat {
    pub fn of(values: &[f64]) -> Option<Stat> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Some(Stat { mean, std: var.sqrt(), n: values.len() })
    }
}

/// Metrics aggregated over repetitions. The simulation-index metrics
/// average only the runs that reached them and are `None` when none did.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignMetrics {
    pub repetitions: usize,
    pub n_types: Stat,
    pub type_expos_rate: Stat,
    pub sim_for_first_type: Option<Stat>,
    pub sim_for_all_types: Option<Stat>,
    pub time_for_one_scenario: Stat,
    pub runs: Vec<RunMetrics>,
}

pub fn metrics(runs: &[RunRecord]) -> Result<CampaignMetrics, TriageError> {
    if runs.is_empty() {
        return Err(TriageError::EmptyHistory);
    }
    let per: Vec<RunMetrics> = runs.iter().map(run_metrics).collect();
    let stat = |f: &dyn Fn(&RunMetrics) -> Option<f64>| Stat::of(&per.iter().filter_map(f).collect::<Vec<_>>());
    Ok(CampaignMetrics {
        repetitions: runs.len(),
        n_types: stat(&|m| Some(m.n_types as f64)).expect("non-empty"),
        type_expos_rate: stat(&|m| Some(m.type_expos_rate)).expect("non-empty"),
        sim_for_first_type: stat(&|m| m.sim_for_first_type.map(|v| v as f64)),
        sim_for_all_types: stat(&|m| m.sim_for_all_types.map(|v| v as f64)),
        time_for_one_scenario: stat(&|m| Some(m.time_for_one_scenario)).expect("non-empty"),
        runs: per,
    })
}

/// How often each type was hit across runs, by signature order.
pub fn type_counts<'a>(runs: impl IntoIterator<Item = &'a RunRecord>) -> Vec<(TypeSignature, usize)> {
    let mut counts = BTreeMap::new();
    for run in runs {
        for (_, sig) in &run.criticals {
            *counts.entry(sig.clone()).or_insert(0) += 1;
        }
    }
    counts.into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ips::VehicleId;
    use crate::sim::{ActionRecord, RoadModel, TraceStep, VehicleState};

    fn sig(geometry: CollisionGeometry) -> TypeSignature {
        TypeSignature { road: RoadShape::Straight, npc_count: 1, actions: vec![], geometry }
    }

    fn vid(n: u32) -> VehicleId {
        VehicleId::new(n).unwrap()
    }

    fn st(id: u32, lane: f64, s: f64) -> VehicleState {
        VehicleState { id: vid(id), lane, s, v: 5.0, a: 0.0, heading: 0.0 }
    }

    /// Ego V3 in lane 1; V1 follows `npc(k) -> (lane, gap ahead)` per step.
    fn trace_with(npc: impl Fn(usize) -> (f64, f64), actions: Vec<ActionRecord>) -> SimTrace {
        let steps = (0..=200)
            .map(|k| {
                let t = k as f64 * 0.1;
                let (lane, gap) = npc(k);
                TraceStep { t, states: vec![st(3, 1.0, 10.0 * t), st(1, lane, 10.0 * t + gap), st(2, 2.0, 0.0)] }
            })
            .collect();
        SimTrace {
            dt: 0.1,
            horizon: 20.0,
            road: RoadModel { geometry: RoadGeometry::Straight, lane_count: 2, lane_width: 5.0 },
            vehicle_length: 4.5,
            vehicles: vec![vid(3), vid(1), vid(2)],
            steps,
            actions,
            collision: None,
        }
    }

    fn action(v: u32, kind: StatementKind, start: f64) -> ActionRecord {
        ActionRecord { vehicle: vid(v), kind, statement: 0, start, end: start + 5.0 }
    }

    /// V1 brakes in the ego lane; V2 changed lanes long before.
    fn trace(final_gap: f64) -> SimTrace {
        trace_with(
            |k| (1.0, 40.0 - (40.0 - final_gap) * (k as f64 / 200.0)),
            vec![
                action(2, StatementKind::LaneChange, 0.0),
                action(1, StatementKind::Decelerate, 12.0),
                action(2, StatementKind::Accelerate, 12.0),
            ],
        )
    }

    #[test]
    fn braking_ahead_is_rear_end() {
        let s = classify_trace(&trace(1.0), &TriageConfig::default()).unwrap();
        assert_eq!(s.geometry, CollisionGeometry::RearEnd);
        // lane change ended before the window opened
        assert_eq!(
            s.actions,
            vec![(Role::Striker, StatementKind::Decelerate), (Role::Bystander, StatementKind::Accelerate)]
        );
        assert_eq!(s.npc_count, 2);
        assert_eq!(s.to_string(), "straight/2npc/striker:decelerate+bystander:accelerate/rear_end");
    }

    #[test]
    fn side_geometries() {
        let cfg = TriageConfig::default();
        // V2 changes lane and slows, then V1 moves into the ego lane alongside the ego
        let actions = vec![
            action(2, StatementKind::LaneChange, 6.0),
            action(2, StatementKind::Decelerate, 11.0),
            action(1, StatementKind::LaneChange, 15.0),
        ];
        let alongside = trace_with(|k| (2.0 - (k.saturating_sub(150) as f64 / 50.0), 1.0), actions.clone());
        let s = classify_trace(&alongside, &cfg).unwrap();
        assert_eq!(s.geometry, CollisionGeometry::LaneChangeSideswipe);
        assert_eq!(
            s.actions,
            vec![
                (Role::Bystander, StatementKind::LaneChange),
                (Role::Bystander, StatementKind::Decelerate),
                (Role::Striker, StatementKind::LaneChange),
            ]
        );
        let ahead = trace_with(|k| (1.5, 40.0 - 39.0 * (k as f64 / 200.0)), actions);
        assert_eq!(classify_trace(&ahead, &cfg).unwrap().geometry, CollisionGeometry::CutInFrontal);
    }

    #[test]
    fn no_collision_is_not_critical() {
        assert_eq!(classify_trace(&trace(30.0), &TriageConfig::default()), Err(TriageError::NotCritical));
    }

    #[test]
    fn single_run_metrics() {
        let run = RunRecord {
            simulations: 10,
            criticals: vec![(3, sig(CollisionGeometry::RearEnd)), (7, sig(CollisionGeometry::RearEnd))],
            elapsed_secs: 2.0,
        };
        let m = run_metrics(&run);
        assert_eq!(
            (m.n_types, m.type_expos_rate, m.sim_for_first_type, m.sim_for_all_types),
            (1, 0.5, Some(3), Some(3))
        );
        assert_eq!(m.time_for_one_scenario, 0.2);
        let cum = run.cumulative_types();
        assert_eq!(cum[1], (2, 0));
        assert_eq!(cum[2], (3, 1));
        assert_eq!(cum[9], (10, 1));
    }

    #[test]
    fn empty_and_degenerate() {
        assert_eq!(metrics(&[]), Err(TriageError::EmptyHistory));
        let run = RunRecord { simulations: 4, criticals: vec![], elapsed_secs: 1.0 };
        let m = metrics(std::slice::from_ref(&run)).unwrap();
        assert_eq!(m.n_types.mean, 0.0);
        assert!(!m.runs[0].rate_defined);
        assert_eq!(m.type_expos_rate.mean, 0.0);
        assert_eq!(m.sim_for_first_type, None);
        assert_eq!(m.n_types.std, 0.0);
    }
}
