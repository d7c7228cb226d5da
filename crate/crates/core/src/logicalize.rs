//! Turns a template into a search-ready logical scenario: every slot gets a
//! range (the proposed one when it is safe, otherwise a default), and the
//! least active vehicle becomes the ego.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dsl::{
    DslError, LogicalScenario, ParamKind, SlotKey, SlotState, StatementKind, TestCaseTemplate, DEFAULT_VEHICLE_LENGTH,
};
use crate::ips::{Ips, RoadDescriptor, VehicleId};

/// Ranges suggested alongside a template, by slot.
pub type ProposedRanges = BTreeMap<SlotKey, (f64, f64)>;

/// A default range, fixed or derived from the road.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DefaultRange {
    Bounds([f64; 2]),
    /// `1..=lane_count` of the road, written `"lanes"`.
    Named(RangeName),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RangeName {
    Lanes,
}

impl DefaultRange {
    pub fn resolve(&self, road: &RoadDescriptor) -> (f64, f64) {
        match self {
            DefaultRange::Bounds([lo, hi]) => (*lo, *hi),
            DefaultRange::Named(RangeName::Lanes) => (1.0, road.lane_count as f64),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LogicalizeError {
    #[error("no default range for {kind}.{param}")]
    MissingDefault { kind: StatementKind, param: ParamKind },
    #[error("bad default range table: {0}")]
    BadTable(String),
    #[error("vehicle {0} is not in the scenario")]
    UnknownEgo(VehicleId),
    #[error("the IPS names no vehicles")]
    NoVehicles,
    #[error(transparent)]
    Dsl(#[from] DslError),
}

/// Default ranges keyed by `"<statement>.<param>"`, e.g. `"npc.offset"`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DefaultRangeTable {
    pub ranges: BTreeMap<String, DefaultRange>,
}

fn table_key(kind: StatementKind, param: ParamKind) -> String {
    format!("{kind}.{param}")
}

impl Default for DefaultRangeTable {
    fn default() -> Self {
        let lanes = DefaultRange::Named(RangeName::Lanes);
        let triggers = DefaultRange::Bounds([1.0, 4.0]);
        let target_speed = DefaultRange::Bounds([0.0, 25.0]);
        let entries = [
            ("npc.lane", lanes),
            ("npc.offset", DefaultRange::Bounds([0.0, 80.0])),
            ("npc.speed", DefaultRange::Bounds([0.0, 20.0])),
            ("accelerate.target_speed", target_speed),
            ("accelerate.trigger", triggers),
            ("decelerate.target_speed", target_speed),
            ("decelerate.trigger", triggers),
            ("lane_change.target_lane", lanes),
            ("lane_change.target_speed", target_speed),
            ("lane_change.trigger", triggers),
        ];
        Self { ranges: entries.into_iter().map(|(k, v)| (k.to_string(), v)).collect() }
    }
}

impl DefaultRangeTable {
    pub fn from_json_str(text: &str) -> Result<Self, LogicalizeError> {
        let t: Self = serde_json::from_str(text).map_err(|e| LogicalizeError::BadTable(e.to_string()))?;
        t.check()?;
        Ok(t)
    }

    pub fn from_toml_str(text: &str) -> Result<Self, LogicalizeError> {
        let t: Self = toml::from_str(text).map_err(|e| LogicalizeError::BadTable(e.to_string()))?;
        t.check()?;
        Ok(t)
    }

    /// Loads a `.toml` file, or JSON for any other extension.
    pub fn load(path: &Path) -> Result<Self, LogicalizeError> {
        let text =
            std::fs::read_to_string(path).map_err(|e| LogicalizeError::BadTable(format!("{}: {e}", path.display())))?;
        if path.extension().is_some_and(|e| e == "toml") {
            Self::from_toml_str(&text)
        } else {
            Self::from_json_str(&text)
        }
    }

    pub fn get(&self, kind: StatementKind, param: ParamKind) -> Option<&DefaultRange> {
        self.ranges.get(&table_key(kind, param))
    }

    /// Default range of one slot on `road`.
    pub fn resolve(
        &self,
        kind: StatementKind,
        param: ParamKind,
        road: &RoadDescriptor,
    ) -> Result<(f64, f64), LogicalizeError> {
        self.get(kind, param).map(|r| r.resolve(road)).ok_or(LogicalizeError::MissingDefault { kind, param })
    }

    /// Rejects unknown keys and physically meaningless bounds. Missing
    /// entries are reported lazily by [`fill_ranges`].
    pub fn check(&self) -> Result<(), LogicalizeError> {
        let known: BTreeSet<String> =
            [StatementKind::Npc, StatementKind::Accelerate, StatementKind::Decelerate, StatementKind::LaneChange]
                .into_iter()
                .flat_map(|k| k.params().iter().map(move |&p| table_key(k, p)))
                .collect();
        for (key, range) in &self.ranges {
            if !known.contains(key) {
                return Err(LogicalizeError::BadTable(format!("unknown entry {key:?}")));
            }
            if let DefaultRange::Bounds([lo, hi]) = range {
                let param = key.rsplit('.').next().and_then(ParamKind::from_name).expect("known key");
                if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                    return Err(LogicalizeError::BadTable(format!("{key}: [{lo}, {hi}] is not a range")));
                }
                if let Some(msg) = physical_problem(param, *lo, *hi, None) {
                    return Err(LogicalizeError::BadTable(format!("{key}: {msg}")));
                }
            }
        }
        Ok(())
    }
}

/// Why `[lo, hi]` cannot hold a value of `param`, if it cannot.
fn physical_problem(param: ParamKind, lo: f64, hi: f64, road: Option<&RoadDescriptor>) -> Option<String> {
    if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
        return Some(format!("[{lo}, {hi}] is not a range"));
    }
    if param.is_integer() && (lo.fract() != 0.0 || hi.fract() != 0.0) {
        return Some("integer parameter with fractional bound".into());
    }
    if param.is_speed() && lo < 0.0 {
        return Some("negative speed".into());
    }
    if param == ParamKind::Trigger && lo < 1.0 {
        return Some("trigger ordinals start at 1".into());
    }
    if param.is_lane() {
        if lo < 1.0 {
            return Some("lane ids start at 1".into());
        }
        if let Some(road) = road {
            if hi > road.lane_count as f64 {
                return Some(format!("lane beyond the road's {} lanes", road.lane_count));
            }
        }
    }
    None
}

/// Per-slot outcome of [`fill_ranges`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RangeSource {
    Proposed,
    Default,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilledScenario {
    pub scenario: LogicalScenario,
    pub sources: BTreeMap<SlotKey, RangeSource>,
}

/// Gap between two closed intervals; 0 when they intersect.
fn interval_gap(a: (f64, f64), b: (f64, f64)) -> f64 {
    (b.0 - a.1).max(a.0 - b.1).max(0.0)
}

/// Ranges every slot of `tpl`. A proposal (explicit, or a range/value
/// already in the template) is adopted only when it is well-formed,
/// physically sane, inside the default range, and cannot place two
/// constructors that may share a lane closer than `vehicle_length`;
/// otherwise the default is used.
pub fn fill_ranges(
    tpl: &TestCaseTemplate,
    proposed: &ProposedRanges,
    defaults: &DefaultRangeTable,
    vehicle_length: f64,
) -> Result<FilledScenario, LogicalizeError> {
    let road = tpl.road;
    let mut chosen: BTreeMap<SlotKey, ((f64, f64), RangeSource)> = BTreeMap::new();
    for (i, st) in tpl.statements.iter().enumerate() {
        for slot in &st.params {
            let key = SlotKey { statement: i, param: slot.kind };
            let default = defaults.resolve(st.kind, slot.kind, &road)?;
            let proposal = proposed.get(&key).copied().or(match slot.state {
                SlotState::Range { lo, hi } => Some((lo, hi)),
                SlotState::Value { value } => Some((value, value)),
                SlotState::Unbound => None,
            });
            let adopt = proposal.filter(|&(lo, hi)| {
                physical_problem(slot.kind, lo, hi, Some(&road)).is_none() && lo >= default.0 && hi <= default.1
            });
            chosen.insert(
                key,
                match adopt {
                    Some(r) => (r, RangeSource::Proposed),
                    None => (default, RangeSource::Default),
                },
            );
        }
    }

    // initial overlap: any endpoint choice of two proposed offset ranges on
    // possibly shared lanes must keep the vehicles a full length apart
    let constructors: Vec<usize> =
        (0..tpl.statements.len()).filter(|&i| tpl.statements[i].kind.is_constructor()).collect();
    let key = |i, param| SlotKey { statement: i, param };
    let mut revert = BTreeSet::new();
    for (n, &i) in constructors.iter().enumerate() {
        for &j in &constructors[n + 1..] {
            let (oi, si) = chosen[&key(i, ParamKind::Offset)];
            let (oj, sj) = chosen[&key(j, ParamKind::Offset)];
            if si != RangeSource::Proposed || sj != RangeSource::Proposed {
                continue;
            }
            let shared_lane =
                interval_gap(chosen[&key(i, ParamKind::Lane)].0, chosen[&key(j, ParamKind::Lane)].0) == 0.0;
            if shared_lane && interval_gap(oi, oj) < vehicle_length {
                revert.insert(i);
                revert.insert(j);
            }
        }
    }
    for i in revert {
        let default = defaults.resolve(StatementKind::Npc, ParamKind::Offset, &road)?;
        chosen.insert(key(i, ParamKind::Offset), (default, RangeSource::Default));
    }

    let mut out = tpl.clone();
    for (i, st) in out.statements.iter_mut().enumerate() {
        for slot in &mut st.params {
            let ((lo, hi), _) = chosen[&key(i, slot.kind)];
            slot.state = SlotState::Range { lo, hi };
        }
    }
    Ok(FilledScenario {
        scenario: LogicalScenario::new(out)?,
        sources: chosen.into_iter().map(|(k, (_, s))| (k, s)).collect(),
    })
}

/// [`fill_ranges`] with the default vehicle length.
pub fn fill_ranges_default(
    tpl: &TestCaseTemplate,
    proposed: &ProposedRanges,
    defaults: &DefaultRangeTable,
) -> Result<FilledScenario, LogicalizeError> {
    fill_ranges(tpl, proposed, defaults, DEFAULT_VEHICLE_LENGTH)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EgoAssignment {
    pub ego: VehicleId,
    /// How many patterns each vehicle initiates.
    pub active_counts: BTreeMap<VehicleId, usize>,
}

/// Picks the vehicle that initiates the fewest patterns, lowest id first.
pub fn select_ego(ips: &Ips) -> Option<EgoAssignment> {
    let mut counts: BTreeMap<VehicleId, usize> = ips.vehicles().into_iter().map(|v| (v, 0)).collect();
    for p in &ips.patterns {
        for &v in &p.participants {
            counts.entry(v).or_insert(0);
        }
        if let Some(actor) = p.actor() {
            *counts.entry(actor).or_insert(0) += 1;
        }
    }
    let ego = counts.iter().min_by_key(|&(v, n)| (*n, *v)).map(|(v, _)| *v)?;
    Some(EgoAssignment { ego, active_counts: counts })
}

/// Removes the ego's action statements and marks it as ego. Its
/// constructor stays searchable.
pub fn substitute_ego(ls: &LogicalScenario, ego: VehicleId) -> Result<LogicalScenario, LogicalizeError> {
    let mut tpl = ls.template().clone();
    if !tpl.vehicles().contains(&ego) {
        return Err(LogicalizeError::UnknownEgo(ego));
    }
    tpl.statements.retain(|st| st.kind.is_constructor() || st.subject != ego);
    tpl.ego = Some(ego);
    Ok(LogicalScenario::new(tpl)?)
}

/// Range filling followed by ego selection and substitution.
pub fn logicalize(
    ips: &Ips,
    tpl: &TestCaseTemplate,
    proposed: &ProposedRanges,
    defaults: &DefaultRangeTable,
    vehicle_length: f64,
) -> Result<(LogicalScenario, EgoAssignment), LogicalizeError> {
    let filled = fill_ranges(tpl, proposed, defaults, vehicle_length)?;
    let ego = select_ego(ips).ok_or(LogicalizeError::NoVehicles)?;
    Ok((substitute_ego(&filled.scenario, ego.ego)?, ego))
}
