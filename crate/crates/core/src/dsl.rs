//! Sequential test-case DSL.
//!
//! A test case is a list of vehicle constructors followed by a list of NPC
//! actions. The same text grammar covers three refinement levels:
//!
//! * template: parameters unbound (`?`) or fixed by the author,
//! * logical scenario (`.lsc`): every parameter is a range `[lo,hi]`,
//! * concrete test case (`.ctc`): every parameter is `value in [lo,hi]`.
//!
//! ```text
//! road: straight, lanes: 3
//! npc(V1, lane=2, offset=[0,30], speed=[5,15])
//! ego(V3, lane=[1,3], offset=[0,80], speed=[0,20])
//! lane_change(V1, target_lane=1, target_speed=[5,20], trigger=1)
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ips::{parse_road_header, RoadDescriptor, VehicleId};

/// Default vehicle length in meters. Also the collision threshold.
pub const DEFAULT_VEHICLE_LENGTH: f64 = 4.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StatementKind {
    Npc,
    Accelerate,
    Decelerate,
    LaneChange,
}

impl StatementKind {
    pub fn keyword(self) -> &'static str {
        match self {
            StatementKind::Npc => "npc",
            StatementKind::Accelerate => "accelerate",
            StatementKind::Decelerate => "decelerate",
            StatementKind::LaneChange => "lane_change",
        }
    }

    pub fn params(self) -> &'static [ParamKind] {
        use ParamKind::*;
        match self {
            StatementKind::Npc => &[Lane, Offset, Speed],
            StatementKind::Accelerate | StatementKind::Decelerate => &[TargetSpeed, Trigger],
            StatementKind::LaneChange => &[TargetLane, TargetSpeed, Trigger],
        }
    }

    pub fn is_constructor(self) -> bool {
        self == StatementKind::Npc
    }

    fn from_keyword(s: &str) -> Option<Self> {
        Some(match s {
            "npc" | "ego" => StatementKind::Npc,
            "accelerate" => StatementKind::Accelerate,
            "decelerate" => StatementKind::Decelerate,
            "lane_change" => StatementKind::LaneChange,
            _ => return None,
        })
    }
}

impl fmt::Display for StatementKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.keyword())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    /// Initial lane id, 1-based.
    Lane,
    /// Initial longitudinal position in meters.
    Offset,
    /// Initial speed in m/s.
    Speed,
    TargetSpeed,
    /// Per-vehicle action ordinal.
    Trigger,
    TargetLane,
}

impl ParamKind {
    pub fn name(self) -> &'static str {
        match self {
            ParamKind::Lane => "lane",
            ParamKind::Offset => "offset",
            ParamKind::Speed => "speed",
            ParamKind::TargetSpeed => "target_speed",
            ParamKind::Trigger => "trigger",
            ParamKind::TargetLane => "target_lane",
        }
    }

    pub fn is_integer(self) -> bool {
        matches!(self, ParamKind::Lane | ParamKind::TargetLane | ParamKind::Trigger)
    }

    pub fn is_speed(self) -> bool {
        matches!(self, ParamKind::Speed | ParamKind::TargetSpeed)
    }

    pub fn is_lane(self) -> bool {
        matches!(self, ParamKind::Lane | ParamKind::TargetLane)
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Some(match s {
            "lane" => ParamKind::Lane,
            "offset" => ParamKind::Offset,
            "speed" => ParamKind::Speed,
            "target_speed" => ParamKind::TargetSpeed,
            "trigger" => ParamKind::Trigger,
            "target_lane" => ParamKind::TargetLane,
            _ => return None,
        })
    }
}

impl fmt::Display for ParamKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum SlotState {
    Unbound,
    Range { lo: f64, hi: f64 },
    Value { value: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParamSlot {
    pub kind: ParamKind,
    pub state: SlotState,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Statement {
    pub kind: StatementKind,
    pub subject: VehicleId,
    pub params: Vec<ParamSlot>,
}

impl Statement {
    pub fn unbound(kind: StatementKind, subject: VehicleId) -> Self {
        let params = kind.params().iter().map(|&k| ParamSlot { kind: k, state: SlotState::Unbound }).collect();
        Statement { kind, subject, params }
    }

    pub fn slot(&self, kind: ParamKind) -> Option<&ParamSlot> {
        self.params.iter().find(|p| p.kind == kind)
    }
}

/// Identifies one parameter slot by statement position and parameter kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SlotKey {
    pub statement: usize,
    pub param: ParamKind,
}

impl fmt::Display for SlotKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "statement {}.{}", self.statement + 1, self.param)
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DslError {
    #[error("line {line}, column {column}: {message}")]
    Parse { line: usize, column: usize, message: String },
    #[error("line {line}: {kind} takes {expected} parameters ({names}), found {found}")]
    Arity { line: usize, kind: StatementKind, expected: usize, found: usize, names: String },
    #[error("{slot}: value {value} outside [{lo}, {hi}]")]
    OutOfRange { slot: SlotKey, value: f64, lo: f64, hi: f64 },
    #[error("{slot}: integer parameter got non-integral value {value}")]
    NotIntegral { slot: SlotKey, value: f64 },
    #[error("expected {expected} values, got {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("{slot} is not a range; a logical scenario needs every slot ranged")]
    NotRanged { slot: SlotKey },
    #[error("invalid template: {0}")]
    Invalid(String),
}

fn perr(line: usize, column: usize, message: impl Into<String>) -> DslError {
    DslError::Parse { line, column, message: message.into() }
}

/// A test-case template: constructors first, then NPC actions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestCaseTemplate {
    pub road: RoadDescriptor,
    pub statements: Vec<Statement>,
    pub ego: Option<VehicleId>,
}

impl TestCaseTemplate {
    /// Number of statements (`s_max`).
    pub fn len(&self) -> usize {
        self.statements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.statements.is_empty()
    }

    /// Vehicles in constructor order.
    pub fn vehicles(&self) -> Vec<VehicleId> {
        self.statements.iter().filter(|s| s.kind.is_constructor()).map(|s| s.subject).collect()
    }

    /// Non-ego vehicles in constructor order.
    pub fn npcs(&self) -> Vec<VehicleId> {
        self.vehicles().into_iter().filter(|v| Some(*v) != self.ego).collect()
    }

    pub fn slot_count(&self) -> usize {
        self.statements.iter().map(|s| s.params.len()).sum()
    }

    pub fn slot_keys(&self) -> Vec<SlotKey> {
        self.statements
            .iter()
            .enumerate()
            .flat_map(|(i, s)| s.params.iter().map(move |p| SlotKey { statement: i, param: p.kind }))
            .collect()
    }

    /// Checks the structural invariants: ordering, one constructor per
    /// vehicle, declared subjects, ego without actions, arity, well-formed
    /// ranges and strictly increasing fixed trigger ordinals.
    pub fn validate(&self) -> Result<(), DslError> {
        let mut declared = BTreeSet::new();
        let mut seen_action = false;
        let mut last_trigger: BTreeMap<VehicleId, f64> = BTreeMap::new();
        for (i, st) in self.statements.iter().enumerate() {
            let expected = st.kind.params();
            if st.params.len() != expected.len() || st.params.iter().zip(expected).any(|(p, k)| p.kind != *k) {
                return Err(DslError::Invalid(format!(
                    "statement {} ({}) has parameters {:?}, expected {:?}",
                    i + 1,
                    st.kind,
                    st.params.iter().map(|p| p.kind.name()).collect::<Vec<_>>(),
                    expected.iter().map(|k| k.name()).collect::<Vec<_>>()
                )));
            }
            for p in &st.params {
                check_slot_shape(SlotKey { statement: i, param: p.kind }, p)?;
            }
            if st.kind.is_constructor() {
                if seen_action {
                    return Err(DslError::Invalid(format!("statement {}: constructors must precede actions", i + 1)));
                }
                if !declared.insert(st.subject) {
                    return Err(DslError::Invalid(format!("{} is constructed twice", st.subject)));
                }
            } else {
                seen_action = true;
                if !declared.contains(&st.subject) {
                    return Err(DslError::Invalid(format!("undeclared subject {}", st.subject)));
                }
                if Some(st.subject) == self.ego {
                    return Err(DslError::Invalid(format!("ego vehicle {} cannot have scripted actions", st.subject)));
                }
                if let Some(ParamSlot { state: SlotState::Value { value }, .. }) = st.slot(ParamKind::Trigger) {
                    if let Some(prev) = last_trigger.insert(st.subject, *value) {
                        if *value <= prev {
                            return Err(DslError::Invalid(format!(
                                "trigger ordinals of {} must increase, got {} after {}",
                                st.subject, value, prev
                            )));
                        }
                    }
                }
            }
        }
        if let Some(ego) = self.ego {
            if !declared.contains(&ego) {
                return Err(DslError::Invalid(format!("ego {ego} has no constructor")));
            }
        }
        Ok(())
    }
}

fn check_slot_shape(key: SlotKey, slot: &ParamSlot) -> Result<(), DslError> {
    let integral = |value: f64| -> Result<(), DslError> {
        if !value.is_finite() {
            return Err(DslError::Invalid(format!("{key}: non-finite value")));
        }
        if slot.kind.is_integer() && value.fract() != 0.0 {
            return Err(DslError::NotIntegral { slot: key, value });
        }
        Ok(())
    };
    match slot.state {
        SlotState::Unbound => Ok(()),
        SlotState::Value { value } => integral(value),
        SlotState::Range { lo, hi } => {
            integral(lo)?;
            integral(hi)?;
            if lo > hi {
                return Err(DslError::Invalid(format!("{key}: empty range [{lo}, {hi}]")));
            }
            Ok(())
        }
    }
}

/// Resolved information about one searchable slot of a logical scenario.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlotInfo {
    pub key: SlotKey,
    pub subject: VehicleId,
    pub lo: f64,
    pub hi: f64,
}

impl SlotInfo {
    pub fn is_integer(&self) -> bool {
        self.key.param.is_integer()
    }

    pub fn contains(&self, v: f64) -> bool {
        v >= self.lo && v <= self.hi
    }
}

/// A template whose every slot is a range.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LogicalScenario {
    template: TestCaseTemplate,
    #[serde(skip)]
    slots: Vec<SlotInfo>,
    #[serde(skip)]
    offsets: Vec<usize>,
}

impl LogicalScenario {
    pub fn new(template: TestCaseTemplate) -> Result<Self, DslError> {
        template.validate()?;
        let mut slots = Vec::with_capacity(template.slot_count());
        let mut offsets = Vec::with_capacity(template.len());
        for (i, st) in template.statements.iter().enumerate() {
            offsets.push(slots.len());
            for p in &st.params {
                let key = SlotKey { statement: i, param: p.kind };
                match p.state {
                    SlotState::Range { lo, hi } => slots.push(SlotInfo { key, subject: st.subject, lo, hi }),
                    _ => return Err(DslError::NotRanged { slot: key }),
                }
            }
        }
        Ok(Self { template, slots, offsets })
    }

    pub fn template(&self) -> &TestCaseTemplate {
        &self.template
    }

    pub fn into_template(self) -> TestCaseTemplate {
        self.template
    }

    pub fn road(&self) -> RoadDescriptor {
        self.template.road
    }

    pub fn ego(&self) -> Option<VehicleId> {
        self.template.ego
    }

    pub fn slots(&self) -> &[SlotInfo] {
        &self.slots
    }

    pub fn dimension(&self) -> usize {
        self.slots.len()
    }

    /// Index of the first slot of statement `i` in the flat assignment.
    pub fn offset(&self, statement: usize) -> usize {
        self.offsets[statement]
    }

    /// Flat slot indices belonging to one vehicle (constructor and actions).
    pub fn vehicle_slots(&self, vehicle: VehicleId) -> Vec<usize> {
        (0..self.slots.len()).filter(|&i| self.slots[i].subject == vehicle).collect()
    }
}

/// A logical scenario with every slot bound to a value.
#[derive(Debug, Clone, PartialEq)]
pub struct ConcreteTestCase {
    pub scenario: Arc<LogicalScenario>,
    pub values: Vec<f64>,
    pub seed_id: u64,
}

impl ConcreteTestCase {
    /// Value of parameter `param` of statement `statement`.
    pub fn value(&self, statement: usize, param: ParamKind) -> f64 {
        let st = &self.scenario.template.statements[statement];
        let pos = st
            .params
            .iter()
            .position(|p| p.kind == param)
            .unwrap_or_else(|| panic!("{} has no {} parameter", st.kind, param));
        self.values[self.scenario.offset(statement) + pos]
    }

    pub fn statements(&self) -> &[Statement] {
        &self.scenario.template.statements
    }

    /// Values mapped into the unit cube by their ranges. Degenerate ranges
    /// map to 0.
    pub fn normalized(&self) -> Vec<f64> {
        self.scenario
            .slots
            .iter()
            .zip(&self.values)
            .map(|(s, v)| if s.hi > s.lo { (v - s.lo) / (s.hi - s.lo) } else { 0.0 })
            .collect()
    }

    pub fn assignment(&self) -> Assignment {
        Assignment {
            seed_id: self.seed_id,
            slots: self
                .scenario
                .slots
                .iter()
                .zip(&self.values)
                .map(|(s, &value)| AssignedSlot {
                    vehicle: s.subject,
                    statement: s.key.statement + 1,
                    param: s.key.param,
                    value,
                })
                .collect(),
        }
    }
}

/// JSON export of a concrete assignment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    pub seed_id: u64,
    pub slots: Vec<AssignedSlot>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssignedSlot {
    pub vehicle: VehicleId,
    pub statement: usize,
    pub param: ParamKind,
    pub value: f64,
}

/// Binds every slot of `ls` to the corresponding entry of `values`.
pub fn instantiate(ls: &Arc<LogicalScenario>, values: Vec<f64>, seed_id: u64) -> Result<ConcreteTestCase, DslError> {
    if values.len() != ls.dimension() {
        return Err(DslError::DimensionMismatch { expected: ls.dimension(), found: values.len() });
    }
    for (slot, &value) in ls.slots.iter().zip(&values) {
        if !slot.contains(value) {
            return Err(DslError::OutOfRange { slot: slot.key, value, lo: slot.lo, hi: slot.hi });
        }
        if slot.is_integer() && value.fract() != 0.0 {
            return Err(DslError::NotIntegral { slot: slot.key, value });
        }
    }
    Ok(ConcreteTestCase { scenario: Arc::clone(ls), values, seed_id })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ValidationIssue {
    InitialOverlap { first: VehicleId, second: VehicleId, gap: f64 },
    LaneOutsideRoad { vehicle: VehicleId, statement: usize, lane: f64 },
    NegativeSpeed { vehicle: VehicleId, statement: usize, speed: f64 },
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ValidationReport {
    pub issues: Vec<ValidationIssue>,
}

impl ValidationReport {
    pub fn ok(&self) -> bool {
        self.issues.is_empty()
    }
}

/// Flags initial overlaps in the same lane, lane ids outside the road and
/// negative speeds.
pub fn validate_concrete(tc: &ConcreteTestCase, road: &RoadDescriptor, vehicle_length: f64) -> ValidationReport {
    let mut issues = Vec::new();
    let mut placed: Vec<(VehicleId, f64, f64)> = Vec::new();
    for (i, st) in tc.statements().iter().enumerate() {
        for p in &st.params {
            let v = tc.value(i, p.kind);
            if p.kind.is_lane() && (v < 1.0 || v > road.lane_count as f64) {
                issues.push(ValidationIssue::LaneOutsideRoad { vehicle: st.subject, statement: i + 1, lane: v });
            }
            if p.kind.is_speed() && v < 0.0 {
                issues.push(ValidationIssue::NegativeSpeed { vehicle: st.subject, statement: i + 1, speed: v });
            }
        }
        if st.kind.is_constructor() {
            placed.push((st.subject, tc.value(i, ParamKind::Lane), tc.value(i, ParamKind::Offset)));
        }
    }
    for (a, &(va, lane_a, off_a)) in placed.iter().enumerate() {
        for &(vb, lane_b, off_b) in &placed[a + 1..] {
            let gap = (off_a - off_b).abs();
            if lane_a == lane_b && gap < vehicle_length {
                issues.push(ValidationIssue::InitialOverlap { first: va, second: vb, gap });
            }
        }
    }
    ValidationReport { issues }
}

// ---------------------------------------------------------------------------
// Text form
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
enum SlotText {
    Unbound,
    Value(f64),
    Range(f64, f64),
    Bound(f64, f64, f64),
}

struct RawStatement {
    line: usize,
    ego: bool,
    kind: StatementKind,
    subject: VehicleId,
    args: Vec<(ParamKind, SlotText)>,
}

struct RawFile {
    road: RoadDescriptor,
    seed: Option<u64>,
    statements: Vec<RawStatement>,
}

fn parse_number(s: &str, line: usize, column: usize) -> Result<f64, DslError> {
    let v: f64 = s.trim().parse().map_err(|_| perr(line, column, format!("expected a number, got {:?}", s.trim())))?;
    if !v.is_finite() {
        return Err(perr(line, column, "numbers must be finite"));
    }
    Ok(v)
}

fn parse_range(s: &str, line: usize, column: usize) -> Result<(f64, f64), DslError> {
    let inner = s
        .trim()
        .strip_prefix('[')
        .and_then(|r| r.strip_suffix(']'))
        .ok_or_else(|| perr(line, column, format!("expected `[lo,hi]`, got {:?}", s.trim())))?;
    let (lo, hi) = inner.split_once(',').ok_or_else(|| perr(line, column, "range needs two bounds"))?;
    Ok((parse_number(lo, line, column)?, parse_number(hi, line, column)?))
}

fn parse_slot(s: &str, line: usize, column: usize) -> Result<SlotText, DslError> {
    let s = s.trim();
    if s == "?" {
        return Ok(SlotText::Unbound);
    }
    if s.starts_with('[') {
        let (lo, hi) = parse_range(s, line, column)?;
        return Ok(SlotText::Range(lo, hi));
    }
    if let Some((v, r)) = s.split_once(" in ") {
        let (lo, hi) = parse_range(r, line, column)?;
        return Ok(SlotText::Bound(parse_number(v, line, column)?, lo, hi));
    }
    Ok(SlotText::Value(parse_number(s, line, column)?))
}

/// Splits on commas that are not inside brackets.
fn split_args(s: &str) -> Vec<(usize, &str)> {
    let mut out = Vec::new();
    let mut depth = 0i32;
    let mut start = 0;
    for (i, c) in s.char_indices() {
        match c {
            '[' => depth += 1,
            ']' => depth -= 1,
            ',' if depth == 0 => {
                out.push((start, &s[start..i]));
                start = i + 1;
            }
            _ => {}
        }
    }
    out.push((start, &s[start..]));
    out
}

fn parse_statement(raw: &str, line: usize) -> Result<RawStatement, DslError> {
    let lead = raw.len() - raw.trim_start().len();
    let text = raw.trim();
    let open = text.find('(').ok_or_else(|| perr(line, lead + 1, format!("malformed statement: {text:?}")))?;
    let name = text[..open].trim();
    let kind =
        StatementKind::from_keyword(name).ok_or_else(|| perr(line, lead + 1, format!("unknown statement `{name}`")))?;
    let body = text[open + 1..]
        .strip_suffix(')')
        .ok_or_else(|| perr(line, lead + text.len(), "expected `)` at end of statement"))?;
    let body_col = lead + open + 2;

    let args = split_args(body);
    let (_, subject_text) = args[0];
    let subject: VehicleId = subject_text.trim().parse().map_err(|m: String| perr(line, body_col, m))?;

    let names = kind.params();
    let given = &args[1..];
    if given.len() != names.len() {
        return Err(DslError::Arity {
            line,
            kind,
            expected: names.len(),
            found: given.len(),
            names: names.iter().map(|k| k.name()).collect::<Vec<_>>().join(", "),
        });
    }

    let mut slots: Vec<Option<SlotText>> = vec![None; names.len()];
    for (pos, (off, arg)) in given.iter().enumerate() {
        let column = body_col + off;
        let (idx, slot_text) = match arg.split_once('=') {
            Some((key, value)) => {
                let key = key.trim();
                let pk = ParamKind::from_name(key)
                    .ok_or_else(|| perr(line, column, format!("unknown parameter `{key}`")))?;
                let idx = names
                    .iter()
                    .position(|k| *k == pk)
                    .ok_or_else(|| perr(line, column, format!("{kind} has no parameter `{key}`")))?;
                (idx, value)
            }
            None => (pos, *arg),
        };
        if slots[idx].is_some() {
            return Err(perr(line, column, format!("parameter `{}` given twice", names[idx])));
        }
        slots[idx] = Some(parse_slot(slot_text, line, column)?);
    }
    let args = names.iter().zip(slots).map(|(k, s)| (*k, s.expect("all slots filled"))).collect();
    Ok(RawStatement { line, ego: name == "ego", kind, subject, args })
}

fn parse_file(text: &str) -> Result<RawFile, DslError> {
    let mut road = None;
    let mut seed = None;
    let mut statements = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let col = raw.len() - raw.trim_start().len() + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let lower = line.to_ascii_lowercase();
        if let Some(rest) = lower.strip_prefix("road:") {
            if road.is_some() {
                return Err(perr(line_no, col, "duplicate road header"));
            }
            road = Some(parse_road_header(rest).map_err(|m| perr(line_no, col, m))?);
            continue;
        }
        if let Some(rest) = lower.strip_prefix("seed:") {
            seed = Some(rest.trim().parse().map_err(|_| perr(line_no, col, "seed must be a non-negative integer"))?);
            continue;
        }
        if road.is_none() {
            return Err(perr(line_no, col, "missing `road: <shape>, lanes: <n>` header"));
        }
        statements.push(parse_statement(raw, line_no)?);
    }
    let road = road.ok_or_else(|| perr(1, 1, "missing `road: <shape>, lanes: <n>` header"))?;
    Ok(RawFile { road, seed, statements })
}

fn build_template(
    raw: &RawFile,
    convert: impl Fn(&RawStatement, ParamKind, SlotText) -> Result<SlotState, DslError>,
) -> Result<TestCaseTemplate, DslError> {
    let mut ego = None;
    let mut declared = BTreeSet::new();
    let mut statements = Vec::new();
    for rs in &raw.statements {
        if rs.kind.is_constructor() {
            declared.insert(rs.subject);
            if rs.ego {
                if ego.is_some() {
                    return Err(perr(rs.line, 1, "more than one ego constructor"));
                }
                ego = Some(rs.subject);
            }
        } else if !declared.contains(&rs.subject) {
            return Err(perr(rs.line, 1, format!("undeclared subject {}", rs.subject)));
        }
        let params = rs
            .args
            .iter()
            .map(|&(k, s)| Ok(ParamSlot { kind: k, state: convert(rs, k, s)? }))
            .collect::<Result<Vec<_>, DslError>>()?;
        statements.push(Statement { kind: rs.kind, subject: rs.subject, params });
    }
    let tpl = TestCaseTemplate { road: raw.road, statements, ego };
    tpl.validate()?;
    Ok(tpl)
}

/// Parses a template or logical scenario (`?`, values and ranges allowed).
pub fn parse_template(text: &str) -> Result<TestCaseTemplate, DslError> {
    let raw = parse_file(text)?;
    build_template(&raw, |rs, _, s| match s {
        SlotText::Unbound => Ok(SlotState::Unbound),
        SlotText::Value(v) => Ok(SlotState::Value { value: v }),
        SlotText::Range(lo, hi) => Ok(SlotState::Range { lo, hi }),
        SlotText::Bound(..) => Err(perr(rs.line, 1, "bound values (`v in [lo,hi]`) belong in concrete test cases")),
    })
}

/// Parses a logical scenario: every slot must be a range.
pub fn parse_logical(text: &str) -> Result<LogicalScenario, DslError> {
    LogicalScenario::new(parse_template(text)?)
}

/// Parses a concrete test case: every slot must be `value in [lo,hi]`.
pub fn parse_concrete(text: &str) -> Result<ConcreteTestCase, DslError> {
    let raw = parse_file(text)?;
    let mut values = Vec::new();
    for rs in &raw.statements {
        for &(_, s) in &rs.args {
            match s {
                SlotText::Bound(v, ..) => values.push(v),
                _ => return Err(perr(rs.line, 1, "concrete test cases need `value in [lo,hi]` for every parameter")),
            }
        }
    }
    let tpl = build_template(&raw, |_, _, s| match s {
        SlotText::Bound(_, lo, hi) => Ok(SlotState::Range { lo, hi }),
        _ => unreachable!("checked above"),
    })?;
    let ls = Arc::new(LogicalScenario::new(tpl)?);
    instantiate(&ls, values, raw.seed.unwrap_or(0))
}

fn fmt_slot(state: &SlotState) -> String {
    match *state {
        SlotState::Unbound => "?".to_string(),
        SlotState::Value { value } => format!("{value}"),
        SlotState::Range { lo, hi } => format!("[{lo},{hi}]"),
    }
}

fn write_statement(
    out: &mut String,
    st: &Statement,
    ego: Option<VehicleId>,
    slot: impl Fn(usize, &ParamSlot) -> String,
) {
    let keyword = if st.kind.is_constructor() && Some(st.subject) == ego { "ego" } else { st.kind.keyword() };
    out.push_str(keyword);
    out.push('(');
    out.push_str(&st.subject.to_string());
    for (i, p) in st.params.iter().enumerate() {
        out.push_str(&format!(", {}={}", p.kind, slot(i, p)));
    }
    out.push_str(")\n");
}

pub fn serialize_template(tpl: &TestCaseTemplate) -> String {
    let mut out = format!("{}\n", tpl.road);
    for st in &tpl.statements {
        write_statement(&mut out, st, tpl.ego, |_, p| fmt_slot(&p.state));
    }
    out
}

pub fn serialize_logical(ls: &LogicalScenario) -> String {
    serialize_template(&ls.template)
}

pub fn serialize_concrete(tc: &ConcreteTestCase) -> String {
    let tpl = tc.scenario.template();
    let mut out = format!("{}\nseed: {}\n", tpl.road, tc.seed_id);
    for (i, st) in tpl.statements.iter().enumerate() {
        let base = tc.scenario.offset(i);
        write_statement(&mut out, st, tpl.ego, |j, p| {
            let v = tc.values[base + j];
            match p.state {
                SlotState::Range { lo, hi } => format!("{v} in [{lo},{hi}]"),
                _ => unreachable!("logical scenarios are fully ranged"),
            }
        });
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    const CUT_IN: &str = "\
road: straight, lanes: 2
npc(V1, lane=[2,2], offset=[20,40], speed=[5,15])
ego(V2, lane=[1,1], offset=[0,10], speed=[10,15])
lane_change(V1, target_lane=[1,1], target_speed=[0,10], trigger=[1,1])
";

    fn v(i: u32) -> VehicleId {
        VehicleId::new(i).unwrap()
    }

    fn logical(text: &str) -> Arc<LogicalScenario> {
        Arc::new(parse_logical(text).unwrap())
    }

    #[test]
    fn parses_constructors_and_lane_change() {
        let tpl = parse_template(
            "road: straight, lanes: 3\nnpc(V1, lane=?, offset=?, speed=?)\nnpc(V2, 2, [0,30], 7.5)\nlane_change(V1, target_lane=2, target_speed=?, trigger=1)\n",
        )
        .unwrap();
        assert_eq!(tpl.len(), 3);
        assert_eq!(tpl.statements[1].params[2].state, SlotState::Value { value: 7.5 });
        assert_eq!(tpl.statements[1].params[1].state, SlotState::Range { lo: 0.0, hi: 30.0 });
        assert_eq!(tpl.ego, None);
        assert_eq!(tpl.slot_count(), 9);
    }

    #[test]
    fn lane_change_with_two_params_is_arity_error() {
        let err =
            parse_template("road: straight, lanes: 2\nnpc(V1, 1, 0, 5)\nlane_change(V1, target_lane=2, trigger=1)\n")
                .unwrap_err();
        assert!(matches!(err, DslError::Arity { expected: 3, found: 2, line: 3, .. }), "{err}");
        let err = parse_template("road: straight, lanes: 2\nnpc(V1)\n").unwrap_err();
        assert!(matches!(err, DslError::Arity { expected: 3, found: 0, .. }), "{err}");
    }

    #[test]
    fn undeclared_subject_is_parse_error() {
        let err = parse_template("road: straight, lanes: 2\nnpc(V1, 1, 0, 5)\ndecelerate(V2, 3, 1)\n").unwrap_err();
        assert!(matches!(&err, DslError::Parse { line: 3, message, .. } if message.contains("undeclared")), "{err}");
    }

    #[test]
    fn structural_errors() {
        let bad = [
            "road: straight, lanes: 2\nnpc(V1, 1, 0, 5)\naccelerate(V1, 9, 1)\nnpc(V2, 1, 10, 5)\n",
            "road: straight, lanes: 2\nnpc(V1, 1, 0, 5)\nnpc(V1, 2, 0, 5)\n",
            "road: straight, lanes: 2\nnpc(V1, 1, 0, 5)\naccelerate(V1, 9, 2)\ndecelerate(V1, 1, 2)\n",
            "road: straight, lanes: 2\nego(V1, 1, 0, 5)\naccelerate(V1, 9, 1)\n",
            "road: straight, lanes: 2\nnpc(V1, 1.5, 0, 5)\n",
            "road: straight, lanes: 2\nnpc(V1, 1, [5,0], 5)\n",
            "road: straight, lanes: 2\nteleport(V1, 1, 0, 5)\n",
            "road: straight, lanes: 2\nnpc(V1, lane=1, lane=1, speed=2)\n",
            "road: straight, lanes: 2\nnpc(V1, 1, 0 in [0,1], 5)\n",
            "npc(V1, 1, 0, 5)\n",
        ];
        for text in bad {
            assert!(parse_template(text).is_err(), "accepted: {text}");
        }
    }

    #[test]
    fn instantiate_checks_ranges() {
        let ls = logical("road: straight, lanes: 1\nnpc(V1, lane=[1,1], offset=[0,10], speed=[0,10])\naccelerate(V1, [0,10], [1,4])\n");
        let tc = instantiate(&ls, vec![1.0, 5.0, 5.0, 5.0, 2.0], 0).unwrap();
        assert_eq!(tc.value(1, ParamKind::Trigger), 2.0);
        let err = instantiate(&ls, vec![1.0, 11.0, 5.0, 5.0, 2.0], 0).unwrap_err();
        assert!(matches!(err, DslError::OutOfRange { value, .. } if value == 11.0));
        let err = instantiate(&ls, vec![1.0, 5.0, 5.0, 5.0, 2.5], 0).unwrap_err();
        assert!(matches!(err, DslError::NotIntegral { .. }));
        let err = instantiate(&ls, vec![1.0], 0).unwrap_err();
        assert!(matches!(err, DslError::DimensionMismatch { expected: 5, found: 1 }));
    }

    #[test]
    fn logical_requires_ranges() {
        assert!(matches!(
            parse_logical("road: straight, lanes: 1\nnpc(V1, 1, [0,1], [0,1])\n"),
            Err(DslError::NotRanged { .. })
        ));
    }

    #[test]
    fn validation_flags_overlaps_lanes_and_speeds() {
        let ls =
            logical("road: straight, lanes: 4\nnpc(V1, [1,8], [0,100], [-5,20])\nnpc(V2, [1,8], [0,100], [0,20])\n");
        let road = ls.road();
        let ok = instantiate(&ls, vec![1.0, 0.0, 5.0, 1.0, 5.0, 5.0], 0).unwrap();
        assert!(validate_concrete(&ok, &road, DEFAULT_VEHICLE_LENGTH).ok());
        let overlap = instantiate(&ls, vec![1.0, 0.0, 5.0, 1.0, 3.0, 5.0], 0).unwrap();
        let report = validate_concrete(&overlap, &road, DEFAULT_VEHICLE_LENGTH);
        assert_eq!(report.issues, vec![ValidationIssue::InitialOverlap { first: v(1), second: v(2), gap: 3.0 }]);
        let lane = instantiate(&ls, vec![7.0, 0.0, 5.0, 1.0, 50.0, 5.0], 0).unwrap();
        assert!(matches!(
            validate_concrete(&lane, &road, DEFAULT_VEHICLE_LENGTH).issues[..],
            [ValidationIssue::LaneOutsideRoad { lane, .. }] if lane == 7.0
        ));
        let speed = instantiate(&ls, vec![1.0, 0.0, -1.0, 2.0, 0.0, 5.0], 0).unwrap();
        assert!(matches!(
            validate_concrete(&speed, &road, DEFAULT_VEHICLE_LENGTH).issues[..],
            [ValidationIssue::NegativeSpeed { .. }]
        ));
    }

    #[test]
    fn round_trips_three_levels() {
        let tpl = parse_template("road: curved, lanes: 2\nnpc(V1, lane=?, offset=3.25, speed=[0,20])\nego(V2, ?, ?, ?)\ndecelerate(V1, target_speed=?, trigger=1)\n").unwrap();
        assert_eq!(parse_template(&serialize_template(&tpl)).unwrap(), tpl);

        let ls = logical(CUT_IN);
        assert_eq!(parse_logical(&serialize_logical(&ls)).unwrap(), *ls);
        assert_eq!(ls.ego(), Some(v(2)));

        let tc = instantiate(&ls, vec![2.0, 31.5, 12.25, 1.0, 3.0, 14.0, 1.0, 6.5, 1.0], 17).unwrap();
        let text = serialize_concrete(&tc);
        assert!(text.contains("seed: 17"));
        let back = parse_concrete(&text).unwrap();
        assert_eq!(back.values, tc.values);
        assert_eq!(back.seed_id, 17);
        assert_eq!(*back.scenario, *ls);
    }

    #[test]
    fn vehicle_slots_and_normalization() {
        let ls = logical(CUT_IN);
        assert_eq!(ls.vehicle_slots(v(1)), vec![0, 1, 2, 6, 7, 8]);
        assert_eq!(ls.vehicle_slots(v(2)), vec![3, 4, 5]);
        let tc = instantiate(&ls, vec![2.0, 30.0, 5.0, 1.0, 10.0, 15.0, 1.0, 5.0, 1.0], 0).unwrap();
        assert_eq!(tc.normalized(), vec![0.0, 0.5, 0.0, 0.0, 1.0, 1.0, 0.0, 0.5, 0.0]);
        let json = serde_json::to_value(tc.assignment()).unwrap();
        assert_eq!(json["slots"][1]["param"], "offset");
        assert_eq!(json["slots"][1]["vehicle"], "V1");
    }
}
