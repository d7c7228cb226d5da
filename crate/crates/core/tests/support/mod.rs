//! Generators and brute-force oracles shared by the property tests and the
//! acceptance runner.
// each test target uses a different subset
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use scengen_core::dsl::{
    parse_logical, ConcreteTestCase, LogicalScenario, ParamKind, ParamSlot, SlotState, Statement, StatementKind,
    TestCaseTemplate, DEFAULT_VEHICLE_LENGTH,
};
use scengen_core::fitness::FitnessVector;
use scengen_core::ips::{
    ActionVerb, InitialAction, InteractivePattern, Ips, RoadDescriptor, RoadShape, RuleId, VehicleId, Verb,
};
use scengen_core::search::{initial_population, EvaluatedCase};
use scengen_core::sim::{RoadGeometry, RoadModel, SimTrace, TraceStep, VehicleState};

pub const FILLER: &[&str] = &["toward", "lane", "2", "suddenly", "into", "the", "gap", "hard", "near", "exit"];
pub const INITIAL_WORDS: &[&str] =
    &["travels", "in", "lane", "ahead", "behind", "slowly", "at", "moderate", "speed", "near", "the", "ramp"];

pub fn vid(i: u32) -> VehicleId {
    VehicleId::new(i).unwrap()
}

pub fn road() -> impl Strategy<Value = RoadDescriptor> {
    (prop_oneof![Just(RoadShape::Straight), Just(RoadShape::Curved)], 1u32..=4)
        .prop_map(|(shape, lane_count)| RoadDescriptor { shape, lane_count })
}

pub fn words(vocab: &'static [&'static str], max: usize) -> impl Strategy<Value = String> {
    prop::collection::vec(prop::sample::select(vocab), 1..=max).prop_map(|w| w.join(" "))
}

pub fn action_verb() -> impl Strategy<Value = ActionVerb> {
    prop::sample::select(ActionVerb::ALL.to_vec())
}

pub fn pattern(n: u32) -> impl Strategy<Value = InteractivePattern> {
    (1..=n, 1..n, action_verb(), prop::option::of(action_verb()), words(FILLER, 3), words(FILLER, 3)).prop_map(
        move |(a, shift, av, rv, f1, f2)| {
            let b = (a - 1 + shift) % n + 1;
            let description = match rv {
                Some(rv) => format!("V{a} {} {f1}, V{b} {} {f2}", av.present_form(), rv.present_form()),
                None => format!("V{a} {} {f1} toward V{b}", av.present_form()),
            };
            InteractivePattern {
                participants: vec![vid(a), vid(b)],
                actor_verb: Verb::Action(av),
                reactor_verb: rv.map(Verb::Action),
                description,
            }
        },
    )
}

pub fn legal_ips() -> impl Strategy<Value = Ips> {
    (road(), 2u32..=5).prop_flat_map(|(road, n)| {
        (prop::collection::vec(words(INITIAL_WORDS, 6), n as usize), prop::collection::vec(pattern(n), 1..=4)).prop_map(
            move |(descs, patterns)| Ips {
                road,
                initials: descs
                    .into_iter()
                    .enumerate()
                    .map(|(i, description)| InitialAction { vehicle: vid(i as u32 + 1), description })
                    .collect(),
                patterns,
            },
        )
    })
}

pub fn real() -> impl Strategy<Value = f64> {
    prop_oneof![-1.0e4..1.0e4f64, (-200i32..200).prop_map(f64::from), Just(0.0)]
}

/// A slot state; `ranged` forces a range. Integer kinds get integral bounds.
pub fn slot(kind: ParamKind, ranged: bool) -> BoxedStrategy<SlotState> {
    let range = if kind.is_integer() {
        (1i32..6, 0i32..4).prop_map(|(lo, w)| SlotState::Range { lo: lo as f64, hi: (lo + w) as f64 }).boxed()
    } else {
        (real(), real()).prop_map(|(a, b)| SlotState::Range { lo: a.min(b), hi: a.max(b) }).boxed()
    };
    if ranged {
        return range;
    }
    let value = if kind.is_integer() {
        (1i32..6).prop_map(|v| SlotState::Value { value: v as f64 }).boxed()
    } else {
        real().prop_map(|value| SlotState::Value { value }).boxed()
    };
    prop_oneof![Just(SlotState::Unbound), value, range].boxed()
}

pub fn statement(kind: StatementKind, subject: VehicleId, ranged: bool) -> BoxedStrategy<Statement> {
    kind.params()
        .iter()
        .map(|&k| slot(k, ranged).prop_map(move |state| ParamSlot { kind: k, state }))
        .collect::<Vec<_>>()
        .prop_map(move |params| Statement { kind, subject, params })
        .boxed()
}

/// Templates with constructors, then actions of non-ego vehicles. Fixed
/// trigger values are renumbered per vehicle so they strictly increase.
pub fn template(ranged: bool) -> impl Strategy<Value = TestCaseTemplate> {
    (road(), 1usize..=4, any::<bool>(), any::<prop::sample::Index>()).prop_flat_map(
        move |(road, n, has_ego, ego_pick)| {
            let ego = has_ego.then(|| vid(ego_pick.index(n) as u32 + 1));
            let constructors: Vec<_> = (1..=n as u32).map(|i| statement(StatementKind::Npc, vid(i), ranged)).collect();
            let actors: Vec<VehicleId> = (1..=n as u32).map(vid).filter(|v| Some(*v) != ego).collect();
            let kinds = prop::sample::select(vec![
                StatementKind::Accelerate,
                StatementKind::Decelerate,
                StatementKind::LaneChange,
            ]);
            let actions = if actors.is_empty() {
                Just(Vec::new()).boxed()
            } else {
                prop::collection::vec((prop::sample::select(actors), kinds), 0..=5)
                    .prop_flat_map(move |picks| {
                        picks.into_iter().map(|(v, k)| statement(k, v, ranged)).collect::<Vec<_>>()
                    })
                    .boxed()
            };
            (constructors, actions).prop_map(move |(mut statements, actions)| {
                let mut ordinal = BTreeMap::new();
                for mut st in actions {
                    let k = ordinal.entry(st.subject).or_insert(0.0);
                    *k += 1.0;
                    for p in &mut st.params {
                        if p.kind == ParamKind::Trigger {
                            if let SlotState::Value { value } = &mut p.state {
                                *value = *k;
                            }
                        }
                    }
                    statements.push(st);
                }
                TestCaseTemplate { road, statements, ego }
            })
        },
    )
}

pub fn logical_with_values() -> impl Strategy<Value = (Arc<LogicalScenario>, Vec<f64>)> {
    template(true).prop_flat_map(|tpl| {
        let ls = Arc::new(LogicalScenario::new(tpl).expect("generated templates are fully ranged"));
        let draws: Vec<BoxedStrategy<f64>> = ls
            .slots()
            .iter()
            .map(|s| {
                if s.is_integer() {
                    (s.lo as i64..=s.hi as i64).prop_map(|v| v as f64).boxed()
                } else if s.hi > s.lo {
                    (s.lo..=s.hi).boxed()
                } else {
                    Just(s.lo).boxed()
                }
            })
            .collect();
        (Just(ls), draws)
    })
}

pub fn corrupt(ips: &Ips, rule: RuleId, pick: usize) -> Ips {
    let mut bad = ips.clone();
    let i = pick % bad.patterns.len();
    let p = &mut bad.patterns[i];
    match rule {
        RuleId::R1 => {
            if pick.is_multiple_of(2) {
                p.participants.truncate(1);
            } else {
                let extra = p.participants[0];
                p.participants.push(extra);
            }
        }
        RuleId::R2 => p.actor_verb = Verb::Other("teleports".into()),
        RuleId::R3 => {
            let fresh = vid(ips.initials.len() as u32 + 1);
            p.participants[1] = fresh;
        }
        RuleId::R4 => p.participants[1] = p.participants[0],
        RuleId::R5 => {
            bad.patterns.clear();
            if pick.is_multiple_of(2) {
                bad.initials.clear();
            }
        }
    }
    bad
}

pub const TWO_NPC: &str = "\
road: straight, lanes: 3
npc(V1, lane=[1,3], offset=[20,60], speed=[5,15])
npc(V2, lane=[1,3], offset=[70,110], speed=[5,15])
ego(V3, lane=[2,2], offset=[0,0], speed=[10,15])
lane_change(V1, target_lane=[1,3], target_speed=[2,12], trigger=[1,2])
decelerate(V2, target_speed=[0,10], trigger=[1,3])
";

pub fn scenario() -> Arc<LogicalScenario> {
    Arc::new(parse_logical(TWO_NPC).unwrap())
}

pub fn brute_force_front(fitness: &[FitnessVector]) -> BTreeSet<usize> {
    (0..fitness.len())
        .filter(|&i| {
            !(0..fitness.len()).any(|j| {
                let (a, b) = (fitness[j], fitness[i]);
                let no_worse = a.mhd <= b.mhd && a.acr >= b.acr && a.div >= b.div;
                let better = a.mhd < b.mhd || a.acr > b.acr || a.div > b.div;
                no_worse && better
            })
        })
        .collect()
}

pub fn dummy_cases(fitness: &[FitnessVector]) -> Vec<EvaluatedCase> {
    let ls = scenario();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let tc = initial_population(&ls, 1, 0, DEFAULT_VEHICLE_LENGTH, 100, &mut rng).unwrap().remove(0);
    fitness
        .iter()
        .enumerate()
        .map(|(i, &fitness)| EvaluatedCase {
            case: ConcreteTestCase { seed_id: i as u64, ..tc.clone() },
            fitness,
            sim_index: i + 1,
            generation: 1,
            collision: None,
            trace: None,
        })
        .collect()
}

/// Coarse grids so that ties and duplicates are common.
pub fn fitness_vector() -> impl Strategy<Value = FitnessVector> {
    (0u8..8, 0u8..6, 0u8..6).prop_map(|(m, a, d)| FitnessVector {
        mhd: m as f64 * 1.5,
        acr: a as f64 * 0.2,
        div: d as f64 * 0.25,
    })
}

pub const LANE_WIDTH: f64 = 5.0;

pub fn state(id: u32, lane: f64, s: f64, a: f64) -> VehicleState {
    VehicleState { id: VehicleId::new(id).unwrap(), lane, s, v: 10.0, a, heading: 0.0 }
}

pub fn trace(steps: Vec<Vec<VehicleState>>, dt: f64) -> SimTrace {
    SimTrace {
        dt,
        horizon: (steps.len() - 1) as f64 * dt,
        road: RoadModel { geometry: RoadGeometry::Straight, lane_count: 4, lane_width: LANE_WIDTH },
        vehicle_length: 4.5,
        vehicles: steps[0].iter().map(|s| s.id).collect(),
        steps: steps.into_iter().enumerate().map(|(k, states)| TraceStep { t: k as f64 * dt, states }).collect(),
        actions: vec![],
        collision: None,
    }
}

/// Ego acceleration-only trace; NPC parked far away.
pub fn accel_trace(accel: &[f64], dt: f64) -> SimTrace {
    trace(accel.iter().map(|&a| vec![state(1, 1.0, 0.0, a), state(2, 3.0, 500.0, 0.0)]).collect(), dt)
}

/// Four 5 s plateaus alternating 0 and 2 m/s^2, sampled every `dt`.
pub fn four_plateaus(samples_per_plateau: usize) -> Vec<f64> {
    [0.0, 2.0, 0.0, 2.0].iter().flat_map(|&a| std::iter::repeat_n(a, samples_per_plateau)).collect()
}

/// Pairs of labelled plateaus whose levels differ by at least `eta`.
pub fn plateau_pairs(levels: &[f64], eta: f64) -> usize {
    let mut n = 0;
    for i in 0..levels.len() {
        for j in i + 1..levels.len() {
            if (levels[i] - levels[j]).abs() >= eta {
                n += 1;
            }
        }
    }
    n
}
