//! Deterministic kinematic multi-lane simulator.
//!
//! Vehicles live in road-aligned coordinates: `s` is the longitudinal
//! position of the front bumper along the lane centre line and `lane` is a
//! continuous lane coordinate (1.0 is the centre of lane 1). Curved roads
//! share the same longitudinal logic; curvature only caps the ego's cruise
//! speed and shows up in the heading.
//!
//! NPCs follow their scripted actions. The ego runs a simple time-headway
//! car-following policy with lane keeping. It only treats a vehicle as a
//! leader once that vehicle is mostly inside the ego lane, so late cut-ins
//! are handled badly on purpose.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dsl::{
    validate_concrete, ConcreteTestCase, ParamKind, StatementKind, ValidationIssue, DEFAULT_VEHICLE_LENGTH,
};
use crate::ips::{RoadDescriptor, RoadShape, VehicleId};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case")]
pub enum RoadGeometry {
    Straight,
    Curved { radius: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoadModel {
    pub geometry: RoadGeometry,
    pub lane_count: u32,
    pub lane_width: f64,
}

impl RoadModel {
    pub fn from_descriptor(road: &RoadDescriptor, cfg: &SimConfig) -> Self {
        let geometry = match road.shape {
            RoadShape::Straight => RoadGeometry::Straight,
            RoadShape::Curved => RoadGeometry::Curved { radius: cfg.curve_radius },
        };
        RoadModel { geometry, lane_count: road.lane_count, lane_width: cfg.lane_width }
    }

    fn check(&self) -> Result<(), SimError> {
        if self.lane_count < 1 || !(self.lane_width > 0.0) {
            return Err(SimError::InvalidConfig(format!("bad road model {self:?}")));
        }
        if let RoadGeometry::Curved { radius } = self.geometry {
            if !(radius > 50.0) {
                return Err(SimError::InvalidConfig(format!("curve radius must exceed 50 m, got {radius}")));
            }
        }
        Ok(())
    }

    /// Headway (front bumper midpoint) position in road-aligned meters.
    pub fn headway_position(&self, state: &VehicleState) -> (f64, f64) {
        (state.s, (state.lane - 1.0) * self.lane_width)
    }

    pub fn headway_distance(&self, a: &VehicleState, b: &VehicleState) -> f64 {
        let (xa, ya) = self.headway_position(a);
        let (xb, yb) = self.headway_position(b);
        (xa - xb).hypot(ya - yb)
    }
}

/// Physical limits and NPC actuation rates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhysicsConfig {
    pub max_accel: f64,
    pub max_brake: f64,
    pub npc_accel: f64,
    pub npc_decel: f64,
    /// Duration of the lateral part of a lane change.
    pub lane_change_time: f64,
    /// Lateral acceleration the ego accepts on curves.
    pub curve_lateral_accel: f64,
}

impl Default for PhysicsConfig {
    fn default() -> Self {
        Self {
            max_accel: 4.0,
            max_brake: 8.0,
            npc_accel: 2.5,
            npc_decel: 4.0,
            lane_change_time: 3.0,
            curve_lateral_accel: 2.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub dt: f64,
    pub horizon: f64,
    /// How long each scripted NPC action runs.
    pub action_duration: f64,
    pub vehicle_length: f64,
    pub lane_width: f64,
    pub curve_radius: f64,
    pub physics: PhysicsConfig,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            dt: 0.1,
            horizon: 30.0,
            action_duration: 5.0,
            vehicle_length: DEFAULT_VEHICLE_LENGTH,
            lane_width: 5.0,
            curve_radius: 150.0,
            physics: PhysicsConfig::default(),
        }
    }
}

impl SimConfig {
    pub fn step_count(&self) -> usize {
        (self.horizon / self.dt).round() as usize + 1
    }

    pub fn check(&self) -> Result<(), SimError> {
        if !(self.dt > 0.0 && self.dt <= 0.5) {
            return Err(SimError::InvalidConfig(format!("dt must be in (0, 0.5], got {}", self.dt)));
        }
        if !(self.horizon > 0.0 && self.action_duration > 0.0 && self.vehicle_length > 0.0) {
            return Err(SimError::InvalidConfig("horizon, action duration and vehicle length must be positive".into()));
        }
        let p = &self.physics;
        if !(p.npc_accel > 0.0 && p.npc_accel <= p.max_accel && p.npc_decel > 0.0 && p.npc_decel <= p.max_brake) {
            return Err(SimError::InvalidConfig("NPC rates must be positive and within the physical limits".into()));
        }
        if !(p.lane_change_time > 0.0 && p.curve_lateral_accel > 0.0) {
            return Err(SimError::InvalidConfig(
                "lane change time and curve lateral acceleration must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Rule-based stand-in for the system under test.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EgoPolicyConfig {
    pub desired_speed: f64,
    /// Time-to-collision below which the ego starts braking.
    pub safe_time_headway: f64,
    pub max_brake: f64,
    pub lane_keep: bool,
    /// A vehicle counts as a leader once its lane coordinate is within this
    /// distance of the ego lane.
    pub perception_lane_tolerance: f64,
    pub speed_gain: f64,
}

impl Default for EgoPolicyConfig {
    fn default() -> Self {
        Self {
            desired_speed: 15.0,
            safe_time_headway: 2.0,
            max_brake: 6.0,
            lane_keep: true,
            perception_lane_tolerance: 0.5,
            speed_gain: 0.5,
        }
    }
}

impl EgoPolicyConfig {
    pub fn check(&self, physics: &PhysicsConfig) -> Result<(), SimError> {
        if !(self.desired_speed > 0.0
            && self.safe_time_headway > 0.0
            && self.max_brake > 0.0
            && self.max_brake <= physics.max_brake
            && self.perception_lane_tolerance > 0.0
            && self.speed_gain > 0.0)
        {
            return Err(SimError::InvalidConfig(format!("bad ego policy {self:?}")));
        }
        if !self.lane_keep {
            return Err(SimError::InvalidConfig("only the lane-keeping ego policy is implemented".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleState {
    pub id: VehicleId,
    pub lane: f64,
    pub s: f64,
    pub v: f64,
    pub a: f64,
    /// Yaw relative to the road-aligned frame plus road curvature, radians.
    pub heading: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub t: f64,
    /// Ego first, then NPCs in constructor order.
    pub states: Vec<VehicleState>,
}

/// One scheduled NPC action.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActionRecord {
    pub vehicle: VehicleId,
    pub kind: StatementKind,
    pub statement: usize,
    pub start: f64,
    pub end: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CollisionEvent {
    pub time: f64,
    pub step: usize,
    pub npc: VehicleId,
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimTrace {
    pub dt: f64,
    pub horizon: f64,
    pub road: RoadModel,
    pub vehicle_length: f64,
    /// Ego first, then NPCs.
    pub vehicles: Vec<VehicleId>,
    pub steps: Vec<TraceStep>,
    pub actions: Vec<ActionRecord>,
    pub collision: Option<CollisionEvent>,
}

impl SimTrace {
    pub fn ego(&self) -> VehicleId {
        self.vehicles[0]
    }

    pub fn npc_count(&self) -> usize {
        self.vehicles.len().saturating_sub(1)
    }

    /// Elapsed simulated time covered by the trace.
    pub fn duration(&self) -> f64 {
        self.steps.last().map_or(0.0, |s| s.t)
    }

    pub fn ego_accelerations(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.states[0].a).collect()
    }

    /// Smallest ego-to-NPC headway distance at one step, with the NPC.
    pub fn closest_npc(&self, step: usize) -> Option<(VehicleId, f64)> {
        let states = &self.steps[step].states;
        let ego = &states[0];
        states[1..].iter().map(|n| (n.id, self.road.headway_distance(ego, n))).min_by(|a, b| a.1.total_cmp(&b.1))
    }

    /// CSV rows `t,id,lane,s,v,a`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,id,lane,s,v,a\n");
        for step in &self.steps {
            for st in &step.states {
                out.push_str(&format!("{},{},{},{},{},{}\n", step.t, st.id, st.lane, st.s, st.v, st.a));
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("invalid test case: {0:?}")]
    InvalidTestCase(Vec<ValidationIssue>),
    #[error("test case has no ego vehicle")]
    NoEgo,
    #[error("invalid simulation config: {0}")]
    InvalidConfig(String),
}

/// First step at which the smallest ego-to-NPC headway distance falls
/// below `threshold`.
pub fn detect_collision(trace: &SimTrace, threshold: f64) -> Option<CollisionEvent> {
    (0..trace.steps.len()).find_map(|k| {
        let (npc, distance) = trace.closest_npc(k)?;
        (distance < threshold).then_some(CollisionEvent { time: trace.steps[k].t, step: k, npc, distance })
    })
}

/// Exact constant-acceleration update over one step with a speed floor at 0.
pub(crate) fn advance(s: f64, v: f64, a: f64, dt: f64) -> (f64, f64) {
    let v_next = v + a * dt;
    if v_next >= 0.0 {
        (s + v * dt + 0.5 * a * dt * dt, v_next)
    } else {
        // stops inside the step
        (s + v * v / (2.0 * -a), 0.0)
    }
}

#[derive(Debug, Clone, Copy)]
struct ScheduledAction {
    kind: StatementKind,
    statement: usize,
    start_step: usize,
    end_step: usize,
    target_speed: f64,
    target_lane: f64,
}

#[derive(Debug, Clone, Copy)]
struct LaneShift {
    from: f64,
    to: f64,
    start_step: usize,
}

struct Actor {
    state: VehicleState,
    script: Vec<ScheduledAction>,
    shift: Option<LaneShift>,
}

fn to_steps(seconds: f64, dt: f64) -> usize {
    (seconds / dt).round().max(0.0) as usize
}

fn schedule(tc: &ConcreteTestCase, vehicle: VehicleId, cfg: &SimConfig) -> Vec<ScheduledAction> {
    let mut out = Vec::new();
    let duration = to_steps(cfg.action_duration, cfg.dt);
    let mut prev_end = 0usize;
    for (i, st) in tc.statements().iter().enumerate() {
        if st.subject != vehicle || st.kind.is_constructor() {
            continue;
        }
        let trigger = tc.value(i, ParamKind::Trigger);
        let earliest = to_steps((trigger - 1.0).max(0.0) * cfg.action_duration, cfg.dt);
        let start_step = prev_end.max(earliest);
        let end_step = start_step + duration;
        prev_end = end_step;
        let target_lane =
            if st.kind == StatementKind::LaneChange { tc.value(i, ParamKind::TargetLane) } else { f64::NAN };
        out.push(ScheduledAction {
            kind: st.kind,
            statement: i,
            start_step,
            end_step,
            target_speed: tc.value(i, ParamKind::TargetSpeed),
            target_lane,
        });
    }
    out
}

fn curvature_heading(road: &RoadModel, s: f64) -> f64 {
    match road.geometry {
        RoadGeometry::Straight => 0.0,
        RoadGeometry::Curved { radius } => s / radius,
    }
}

fn npc_control(actor: &mut Actor, k: usize, cfg: &SimConfig, road: &RoadModel) -> f64 {
    let p = &cfg.physics;
    let active = actor.script.iter().find(|a| a.start_step <= k && k < a.end_step).copied();
    let mut accel = 0.0;
    if let Some(act) = active {
        accel = ((act.target_speed - actor.state.v) / cfg.dt).clamp(-p.npc_decel, p.npc_accel);
        if act.kind == StatementKind::LaneChange && k == act.start_step {
            actor.shift = Some(LaneShift { from: actor.state.lane, to: act.target_lane, start_step: k });
        }
    }
    let mut lateral_speed = 0.0;
    if let Some(shift) = actor.shift {
        let tau = (k - shift.start_step) as f64 * cfg.dt;
        let t_lc = p.lane_change_time;
        if tau >= t_lc {
            actor.state.lane = shift.to;
            actor.shift = None;
        } else {
            let phase = std::f64::consts::PI * tau / t_lc;
            actor.state.lane = shift.from + (shift.to - shift.from) * 0.5 * (1.0 - phase.cos());
            lateral_speed = (shift.to - shift.from) * road.lane_width * 0.5 * std::f64::consts::PI / t_lc * phase.sin();
        }
    }
    actor.state.heading = lateral_speed.atan2(actor.state.v.max(1e-6)) + curvature_heading(road, actor.state.s);
    accel
}

fn ego_control(ego: &VehicleState, npcs: &[Actor], cfg: &SimConfig, policy: &EgoPolicyConfig, road: &RoadModel) -> f64 {
    let p = &cfg.physics;
    let mut desired = policy.desired_speed;
    if let RoadGeometry::Curved { radius } = road.geometry {
        desired = desired.min((p.curve_lateral_accel * radius).sqrt());
    }
    let free = (policy.speed_gain * (desired - ego.v)).clamp(-policy.max_brake, p.max_accel);

    let leader = npcs
        .iter()
        .map(|n| &n.state)
        .filter(|n| (n.lane - ego.lane).abs() < policy.perception_lane_tolerance && n.s > ego.s)
        .min_by(|a, b| a.s.total_cmp(&b.s));

    let accel = match leader {
        None => free,
        Some(lead) => {
            let gap = lead.s - ego.s - cfg.vehicle_length;
            let closing = ego.v - lead.v;
            let safe = policy.safe_time_headway;
            if gap <= 0.0 {
                -policy.max_brake
            } else if closing > 0.0 {
                let ttc = gap / closing;
                if ttc < 0.5 * safe {
                    -policy.max_brake
                } else if ttc < safe {
                    -policy.max_brake * (safe - ttc) / (0.5 * safe)
                } else {
                    free
                }
            } else if ego.v > 0.0 && gap / ego.v < safe {
                free.min(0.0)
            } else {
                free
            }
        }
    };
    accel.clamp(-p.max_brake, p.max_accel)
}

/// Runs one concrete test case to the horizon or the first collision.
pub fn simulate(tc: &ConcreteTestCase, cfg: &SimConfig, policy: &EgoPolicyConfig) -> Result<SimTrace, SimError> {
    cfg.check()?;
    policy.check(&cfg.physics)?;
    let road_desc = tc.scenario.road();
    let road = RoadModel::from_descriptor(&road_desc, cfg);
    road.check()?;
    let report = validate_concrete(tc, &road_desc, cfg.vehicle_length);
    if !report.ok() {
        return Err(SimError::InvalidTestCase(report.issues));
    }
    let ego_id = tc.scenario.ego().ok_or(SimError::NoEgo)?;

    let mut ego = None;
    let mut npcs = Vec::new();
    for (i, st) in tc.statements().iter().enumerate() {
        if !st.kind.is_constructor() {
            continue;
        }
        let state = VehicleState {
            id: st.subject,
            lane: tc.value(i, ParamKind::Lane),
            s: tc.value(i, ParamKind::Offset),
            v: tc.value(i, ParamKind::Speed),
            a: 0.0,
            heading: curvature_heading(&road, tc.value(i, ParamKind::Offset)),
        };
        if st.subject == ego_id {
            ego = Some(state);
        } else {
            npcs.push(Actor { state, script: schedule(tc, st.subject, cfg), shift: None });
        }
    }
    let mut ego = ego.ok_or(SimError::NoEgo)?;

    let mut actions: Vec<ActionRecord> = npcs
        .iter()
        .flat_map(|n| {
            n.script.iter().map(move |a| ActionRecord {
                vehicle: n.state.id,
                kind: a.kind,
                statement: a.statement,
                start: a.start_step as f64 * cfg.dt,
                end: a.end_step as f64 * cfg.dt,
            })
        })
        .collect();
    actions.sort_by(|a, b| a.start.total_cmp(&b.start).then(a.vehicle.cmp(&b.vehicle)));

    let n_steps = cfg.step_count();
    let mut vehicles = vec![ego_id];
    vehicles.extend(npcs.iter().map(|n| n.state.id));
    let mut trace = SimTrace {
        dt: cfg.dt,
        horizon: (n_steps - 1) as f64 * cfg.dt,
        road,
        vehicle_length: cfg.vehicle_length,
        vehicles,
        steps: Vec::with_capacity(n_steps),
        actions,
        collision: None,
    };

    for k in 0..n_steps {
        // controls at t_k; positions are already at t_k
        let npc_accels: Vec<f64> = npcs.iter_mut().map(|n| npc_control(n, k, cfg, &road)).collect();
        let ego_accel = ego_control(&ego, &npcs, cfg, policy, &road);
        ego.a = if ego.v <= 0.0 && ego_accel < 0.0 { 0.0 } else { ego_accel };
        ego.heading = curvature_heading(&road, ego.s);
        for (n, &a) in npcs.iter_mut().zip(&npc_accels) {
            n.state.a = if n.state.v <= 0.0 && a < 0.0 { 0.0 } else { a };
        }

        let mut states = Vec::with_capacity(npcs.len() + 1);
        states.push(ego);
        states.extend(npcs.iter().map(|n| n.state));
        trace.steps.push(TraceStep { t: k as f64 * cfg.dt, states });

        if let Some((npc, distance)) = trace.closest_npc(k) {
            if distance < cfg.vehicle_length {
                trace.collision = Some(CollisionEvent { time: trace.steps[k].t, step: k, npc, distance });
                break;
            }
        }

        let (s, v) = advance(ego.s, ego.v, ego.a, cfg.dt);
        ego.s = s;
        ego.v = v;
        for n in &mut npcs {
            let (s, v) = advance(n.state.s, n.state.v, n.state.a, cfg.dt);
            n.state.s = s;
            n.state.v = v;
        }
    }
    Ok(trace)
}
