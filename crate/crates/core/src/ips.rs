//! Interactive pattern sequences: the intermediate representation extracted
//! from an accident report before it is turned into a test-case template.
//!
//! The text form is line oriented:
//!
//! ```text
//! # comment
//! road: straight, lanes: 3
//! V1: drives in lane 2 behind V2
//! V2: drives in lane 1
//! (V1, V2): V1 swerves left and collides with V2, V2 brakes
//! ```
//!
//! Verbs are detected by case-insensitive keyword match inside the pattern
//! text. Only the closed set brake / decelerate / accelerate / swerve left /
//! swerve right is recognised.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// A vehicle label, rendered `V1`, `V2`, ...
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct VehicleId(u32);

impl VehicleId {
    pub fn new(index: u32) -> Option<Self> {
        (index >= 1).then_some(Self(index))
    }

    pub fn index(self) -> u32 {
        self.0
    }
}

impl fmt::Display for VehicleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "V{}", self.0)
    }
}

impl FromStr for VehicleId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let digits = s
            .strip_prefix('V')
            .or_else(|| s.strip_prefix('v'))
            .ok_or_else(|| format!("vehicle id must look like V<n>, got {s:?}"))?;
        if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) || digits.starts_with('0') {
            return Err(format!("vehicle id must look like V<n>, got {s:?}"));
        }
        let index: u32 = digits.parse().map_err(|_| format!("vehicle index out of range: {s:?}"))?;
        VehicleId::new(index).ok_or_else(|| format!("vehicle index must be >= 1: {s:?}"))
    }
}

impl TryFrom<String> for VehicleId {
    type Error = String;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<VehicleId> for String {
    fn from(v: VehicleId) -> String {
        v.to_string()
    }
}

/// The closed set of verbs allowed in interactive patterns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ActionVerb {
    Brake,
    Decelerate,
    Accelerate,
    SwerveLeft,
    SwerveRight,
}

impl ActionVerb {
    pub const ALL: [ActionVerb; 5] = [
        ActionVerb::Brake,
        ActionVerb::Decelerate,
        ActionVerb::Accelerate,
        ActionVerb::SwerveLeft,
        ActionVerb::SwerveRight,
    ];

    pub fn base_form(self) -> &'static str {
        match self {
            ActionVerb::Brake => "brake",
            ActionVerb::Decelerate => "decelerate",
            ActionVerb::Accelerate => "accelerate",
            ActionVerb::SwerveLeft => "swerve left",
            ActionVerb::SwerveRight => "swerve right",
        }
    }

    /// Third person singular, as used in pattern descriptions.
    pub fn present_form(self) -> &'static str {
        match self {
            ActionVerb::Brake => "brakes",
            ActionVerb::Decelerate => "decelerates",
            ActionVerb::Accelerate => "accelerates",
            ActionVerb::SwerveLeft => "swerves left",
            ActionVerb::SwerveRight => "swerves right",
        }
    }
}

impl fmt::Display for ActionVerb {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.base_form())
    }
}

/// A verb slot of a pattern. Parsing only ever yields `Action`; `Other`
/// exists so that hand-built or corrupted values can be represented and
/// rejected by [`check_legality`].
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Verb {
    Action(ActionVerb),
    Other(String),
}

impl Verb {
    pub fn action(&self) -> Option<ActionVerb> {
        match self {
            Verb::Action(a) => Some(*a),
            Verb::Other(_) => None,
        }
    }
}

impl fmt::Display for Verb {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Verb::Action(a) => a.fmt(f),
            Verb::Other(s) => f.write_str(s),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoadShape {
    Straight,
    Curved,
}

impl fmt::Display for RoadShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RoadShape::Straight => "straight",
            RoadShape::Curved => "curved",
        })
    }
}

impl FromStr for RoadShape {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "straight" => Ok(RoadShape::Straight),
            "curved" => Ok(RoadShape::Curved),
            other => Err(format!("road shape must be straight or curved, got {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RoadDescriptor {
    pub shape: RoadShape,
    pub lane_count: u32,
}

impl fmt::Display for RoadDescriptor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "road: {}, lanes: {}", self.shape, self.lane_count)
    }
}

/// Parses `road: straight, lanes: 3` (the `road:` prefix already stripped).
pub(crate) fn parse_road_header(rest: &str) -> Result<RoadDescriptor, String> {
    let (shape, lanes) = rest.split_once(',').ok_or_else(|| "expected `road: <shape>, lanes: <n>`".to_string())?;
    let shape: RoadShape = shape.parse()?;
    let lanes = lanes.trim();
    let count = lanes
        .strip_prefix("lanes:")
        .or_else(|| lanes.strip_prefix("Lanes:"))
        .ok_or_else(|| "expected `lanes: <n>` after the road shape".to_string())?
        .trim();
    let lane_count: u32 = count.parse().map_err(|_| format!("lane count must be a positive integer, got {count:?}"))?;
    if lane_count == 0 {
        return Err("lane count must be at least 1".into());
    }
    Ok(RoadDescriptor { shape, lane_count })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InitialAction {
    pub vehicle: VehicleId,
    pub description: String,
}

/// One `(Vi, Vj): ...` statement. `participants[0]` is the actor (the
/// vehicle performing the active action) and `participants[1]` the reactor.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InteractivePattern {
    pub participants: Vec<VehicleId>,
    pub actor_verb: Verb,
    pub reactor_verb: Option<Verb>,
    pub description: String,
}

impl InteractivePattern {
    pub fn actor(&self) -> Option<VehicleId> {
        self.participants.first().copied()
    }

    pub fn reactor(&self) -> Option<VehicleId> {
        self.participants.get(1).copied()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ips {
    pub road: RoadDescriptor,
    pub initials: Vec<InitialAction>,
    pub patterns: Vec<InteractivePattern>,
}

impl Ips {
    pub fn vehicles(&self) -> Vec<VehicleId> {
        self.initials.iter().map(|i| i.vehicle).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("line {line}, column {column}: {message}")]
pub struct ParseError {
    pub line: usize,
    pub column: usize,
    pub message: String,
}

impl ParseError {
    fn at(line: usize, column: usize, message: impl Into<String>) -> Self {
        Self { line, column, message: message.into() }
    }
}

static VERB_RE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(
        r"(?i)\b(?:(brak(?:e|es|ed|ing))|(decelerat(?:e|es|ed|ing))|(accelerat(?:e|es|ed|ing))|swerv(?:e|es|ed|ing)\s+(?:(left)|(right)))\b",
    )
    .expect("verb regex")
});

static VEHICLE_RE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\b[Vv]([1-9][0-9]*)\b").expect("vehicle regex"));

fn verbs_in(text: &str) -> Vec<ActionVerb> {
    VERB_RE
        .captures_iter(text)
        .map(|c| {
            if c.get(1).is_some() {
                ActionVerb::Brake
            } else if c.get(2).is_some() {
                ActionVerb::Decelerate
            } else if c.get(3).is_some() {
                ActionVerb::Accelerate
            } else if c.get(4).is_some() {
                ActionVerb::SwerveLeft
            } else {
                ActionVerb::SwerveRight
            }
        })
        .collect()
}

/// Attributes verbs in a pattern description to vehicles.
///
/// The text is split into clauses at `,`, `;` and `.`. Each clause's subject
/// is the first vehicle mentioned in it (or the previous clause's subject).
/// The first verb attributed to a vehicle is its verb.
fn attribute_verbs(actor: VehicleId, reactor: VehicleId, text: &str) -> (Option<ActionVerb>, Option<ActionVerb>) {
    let mut subject = actor;
    let mut actor_verb = None;
    let mut reactor_verb = None;
    for clause in text.split([',', ';', '.']) {
        if let Some(c) = VEHICLE_RE.captures(clause) {
            if let Some(v) = c[1].parse().ok().and_then(VehicleId::new) {
                subject = v;
            }
        }
        if let Some(&verb) = verbs_in(clause).first() {
            if subject == actor && actor_verb.is_none() {
                actor_verb = Some(verb);
            } else if subject == reactor && reactor_verb.is_none() {
                reactor_verb = Some(verb);
            }
        }
    }
    (actor_verb, reactor_verb)
}

fn leading_column(raw: &str) -> usize {
    raw.len() - raw.trim_start().len() + 1
}

/// Parses the IPS text format.
pub fn parse_ips(text: &str) -> Result<Ips, ParseError> {
    let mut road = None;
    let mut initials: Vec<InitialAction> = Vec::new();
    let mut patterns = Vec::new();

    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let col = leading_column(raw);
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }

        let lower = line.to_ascii_lowercase();
        if let Some(rest) = lower.strip_prefix("road:") {
            if road.is_some() {
                return Err(ParseError::at(line_no, col, "duplicate road header"));
            }
            road = Some(parse_road_header(rest).map_err(|m| ParseError::at(line_no, col, m))?);
            continue;
        }

        if road.is_none() {
            return Err(ParseError::at(line_no, col, "missing `road: <shape>, lanes: <n>` header"));
        }

        if line.starts_with('(') {
            let close = line.find(')').ok_or_else(|| ParseError::at(line_no, col, "unterminated vehicle tuple"))?;
            let after = line[close + 1..].trim_start();
            let description = after
                .strip_prefix(':')
                .ok_or_else(|| ParseError::at(line_no, col + close + 1, "expected `:` after vehicle tuple"))?
                .trim();
            let mut participants = Vec::new();
            for part in line[1..close].split(',') {
                let v: VehicleId = part.trim().parse().map_err(|m: String| ParseError::at(line_no, col + 1, m))?;
                participants.push(v);
            }
            if participants.len() != 2 {
                return Err(ParseError::at(
                    line_no,
                    col,
                    format!("pattern must name exactly two vehicles, found {}", participants.len()),
                ));
            }
            if description.is_empty() {
                return Err(ParseError::at(line_no, col, "pattern description is empty"));
            }
            let (actor_verb, reactor_verb) = attribute_verbs(participants[0], participants[1], description);
            let actor_verb = actor_verb.ok_or_else(|| {
                ParseError::at(
                    line_no,
                    col + close + 1,
                    format!(
                        "unknown verb: no verb from {{brake, decelerate, accelerate, swerve left/right}} found for actor {}",
                        participants[0]
                    ),
                )
            })?;
            patterns.push(InteractivePattern {
                participants,
                actor_verb: Verb::Action(actor_verb),
                reactor_verb: reactor_verb.map(Verb::Action),
                description: description.to_string(),
            });
            continue;
        }

        if let Some((head, rest)) = line.split_once(':') {
            if let Ok(vehicle) = head.trim().parse::<VehicleId>() {
                if !patterns.is_empty() {
                    return Err(ParseError::at(line_no, col, "initial actions must precede interactive patterns"));
                }
                if initials.iter().any(|i| i.vehicle == vehicle) {
                    return Err(ParseError::at(line_no, col, format!("duplicate initial action for {vehicle}")));
                }
                let description = rest.trim();
                if description.is_empty() {
                    return Err(ParseError::at(line_no, col, format!("initial action of {vehicle} is empty")));
                }
                initials.push(InitialAction { vehicle, description: description.to_string() });
                continue;
            }
        }

        return Err(ParseError::at(line_no, col, format!("malformed line: {line:?}")));
    }

    let road = road.ok_or_else(|| ParseError::at(1, 1, "missing `road: <shape>, lanes: <n>` header"))?;
    Ok(Ips { road, initials, patterns })
}

/// Canonical text form, one statement per line.
pub fn serialize_ips(ips: &Ips) -> String {
    let mut out = format!("{}\n", ips.road);
    for init in &ips.initials {
        out.push_str(&format!("{}: {}\n", init.vehicle, init.description));
    }
    for p in &ips.patterns {
        let names: Vec<String> = p.participants.iter().map(ToString::to_string).collect();
        out.push_str(&format!("({}): {}\n", names.join(", "), p.description));
    }
    out
}

/// Identifiers of the legality rules.
///
/// R1 and R2 come straight from the extraction format. R3 to R5 are local
/// additions that make the sequence usable downstream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum RuleId {
    /// Exactly two vehicles per pattern.
    R1,
    /// Verbs drawn from the closed verb set.
    R2,
    /// Every vehicle in a pattern has an initial action.
    R3,
    /// Actor and reactor differ.
    R4,
    /// Initials and patterns are non-empty.
    R5,
}

impl fmt::Display for RuleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub rule: RuleId,
    pub location: String,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}] {}: {}", self.rule, self.location, self.message)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct LegalityReport {
    pub violations: Vec<Violation>,
}

impl LegalityReport {
    pub fn ok(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn rules(&self) -> BTreeSet<RuleId> {
        self.violations.iter().map(|v| v.rule).collect()
    }
}

/// Syntactic legality check. Collects every violation instead of stopping
/// at the first.
pub fn check_legality(ips: &Ips) -> LegalityReport {
    let mut violations = Vec::new();
    let mut push = |rule, location: String, message: String| violations.push(Violation { rule, location, message });

    if ips.initials.is_empty() {
        push(RuleId::R5, "initials".into(), "no initial actions".into());
    }
    if ips.patterns.is_empty() {
        push(RuleId::R5, "patterns".into(), "no interactive patterns".into());
    }

    let declared: BTreeSet<VehicleId> = ips.initials.iter().map(|i| i.vehicle).collect();
    for (i, p) in ips.patterns.iter().enumerate() {
        let loc = format!("pattern {}", i + 1);
        if p.participants.len() != 2 {
            push(RuleId::R1, loc.clone(), format!("expected exactly two vehicles, found {}", p.participants.len()));
        }
        let bad_verbs: Vec<&Verb> =
            std::iter::once(&p.actor_verb).chain(p.reactor_verb.as_ref()).filter(|v| v.action().is_none()).collect();
        for v in bad_verbs {
            push(
                RuleId::R2,
                loc.clone(),
                format!("verb {v:?} is not one of brake, decelerate, accelerate, swerve left/right"),
            );
        }
        let mut missing: Vec<VehicleId> = p.participants.iter().copied().filter(|v| !declared.contains(v)).collect();
        missing.dedup();
        for v in missing {
            push(RuleId::R3, loc.clone(), format!("{v} has no initial action"));
        }
        if let (Some(a), Some(r)) = (p.actor(), p.reactor()) {
            if a == r {
                push(RuleId::R4, loc.clone(), format!("actor and reactor are both {a}"));
            }
        }
    }

    LegalityReport { violations }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) const ACCIDENT_IPS: &str = "\
road: straight, lanes: 3
V1: drives in lane 2 behind V2 and intends to move to lane 1 to overtake V2
V2: travels in lane 1 at moderate speed
V3: travels in lane 3 at moderate speed
(V1, V2): V1 swerves left toward lane 1 and collides with V2, V2 brakes
(V2, V3): V2 swerves left after the impact and hits V3, V3 brakes
";

    fn v(i: u32) -> VehicleId {
        VehicleId::new(i).unwrap()
    }

    #[test]
    fn vehicle_id_round_trip() {
        assert_eq!("V12".parse::<VehicleId>().unwrap().to_string(), "V12");
        assert!("V0".parse::<VehicleId>().is_err());
        assert!("X1".parse::<VehicleId>().is_err());
        assert!("V01".parse::<VehicleId>().is_err());
    }

    #[test]
    fn parses_minimal_pattern() {
        let ips = parse_ips("road: straight, lanes: 2\nV1: ahead\nV2: behind\n(V1, V2): V1 decelerates, V2 brakes\n")
            .unwrap();
        assert_eq!(ips.initials.len(), 2);
        assert_eq!(ips.patterns.len(), 1);
        let p = &ips.patterns[0];
        assert_eq!(p.actor(), Some(v(1)));
        assert_eq!(p.reactor(), Some(v(2)));
        assert_eq!(p.actor_verb, Verb::Action(ActionVerb::Decelerate));
        assert_eq!(p.reactor_verb, Some(Verb::Action(ActionVerb::Brake)));
    }

    #[test]
    fn parses_three_vehicle_accident_in_order() {
        let ips = parse_ips(ACCIDENT_IPS).unwrap();
        assert_eq!(ips.initials.len(), 3);
        assert_eq!(ips.patterns.len(), 2);
        assert_eq!(ips.patterns[0].participants, vec![v(1), v(2)]);
        assert_eq!(ips.patterns[0].actor_verb, Verb::Action(ActionVerb::SwerveLeft));
        assert_eq!(ips.patterns[1].participants, vec![v(2), v(3)]);
        assert_eq!(ips.patterns[1].actor_verb, Verb::Action(ActionVerb::SwerveLeft));
        assert_eq!(ips.patterns[1].reactor_verb, Some(Verb::Action(ActionVerb::Brake)));
        assert!(check_legality(&ips).ok());
    }

    #[test]
    fn three_vehicle_pattern_is_a_parse_error() {
        let err = parse_ips("road: straight, lanes: 2\nV1: a\nV2: b\nV3: c\n(V1, V2, V3): V1 brakes\n").unwrap_err();
        assert_eq!(err.line, 5);
        assert!(err.message.contains("exactly two vehicles"), "{err}");
    }

    #[test]
    fn unknown_verb_and_duplicates_are_parse_errors() {
        let err = parse_ips("road: straight, lanes: 2\nV1: a\nV2: b\n(V1, V2): V1 teleports\n").unwrap_err();
        assert!(err.message.contains("unknown verb"), "{err}");
        let err = parse_ips("road: straight, lanes: 2\nV1: a\nV1: b\n").unwrap_err();
        assert!(err.message.contains("duplicate"), "{err}");
        let err = parse_ips("V1: a\n").unwrap_err();
        assert!(err.message.contains("header"), "{err}");
        let err = parse_ips("road: straight, lanes: 2\nthis is prose\n").unwrap_err();
        assert_eq!((err.line, err.column), (2, 1));
    }

    #[test]
    fn verb_inflections_and_case() {
        assert_eq!(verbs_in("BRAKING hard"), vec![ActionVerb::Brake]);
        assert_eq!(verbs_in("swerved   Right then accelerated"), vec![ActionVerb::SwerveRight, ActionVerb::Accelerate]);
        assert!(verbs_in("swerves").is_empty());
    }

    #[test]
    fn reactor_only_clause_order() {
        let ips = parse_ips("road: curved, lanes: 1\nV1: a\nV2: b\n(V1, V2): V2 brakes; V1 accelerates\n").unwrap();
        assert_eq!(ips.patterns[0].actor_verb, Verb::Action(ActionVerb::Accelerate));
        assert_eq!(ips.patterns[0].reactor_verb, Some(Verb::Action(ActionVerb::Brake)));
    }

    #[test]
    fn legality_rules() {
        let mut ips = parse_ips(ACCIDENT_IPS).unwrap();
        ips.patterns[1].participants[1] = v(4);
        assert_eq!(check_legality(&ips).rules(), BTreeSet::from([RuleId::R3]));

        let mut ips = parse_ips(ACCIDENT_IPS).unwrap();
        ips.patterns[0].actor_verb = Verb::Other("teleports".into());
        assert_eq!(check_legality(&ips).rules(), BTreeSet::from([RuleId::R2]));

        let mut ips = parse_ips(ACCIDENT_IPS).unwrap();
        ips.patterns.clear();
        let report = check_legality(&ips);
        assert!(!report.ok());
        assert_eq!(report.rules(), BTreeSet::from([RuleId::R5]));
    }

    #[test]
    fn serialization_is_canonical() {
        let ips = parse_ips(
            "# c\nroad: Straight, lanes: 2\n\nV1:   ahead  \nV2: behind\n(V1,V2): V1 decelerates, V2 brakes\n",
        )
        .unwrap();
        assert_eq!(
            serialize_ips(&ips),
            "road: straight, lanes: 2\nV1: ahead\nV2: behind\n(V1, V2): V1 decelerates, V2 brakes\n"
        );
        assert_eq!(parse_ips(&serialize_ips(&ips)).unwrap(), ips);
    }
}
