//! Sampling, NPC-swap crossover and polynomial mutation over concrete test
//! cases.

use std::sync::Arc;

use rand::Rng;

use super::SearchError;
use crate::dsl::{validate_concrete, ConcreteTestCase, LogicalScenario, SlotInfo};

fn sample_slot<R: Rng + ?Sized>(slot: &SlotInfo, rng: &mut R) -> f64 {
    if slot.hi <= slot.lo {
        slot.lo
    } else if slot.is_integer() {
        rng.random_range(slot.lo as i64..=slot.hi as i64) as f64
    } else {
        rng.random_range(slot.lo..=slot.hi)
    }
}

/// Samples one validator-clean case, resampling up to `max_attempts` times.
pub fn sample_case<R: Rng + ?Sized>(
    ls: &Arc<LogicalScenario>,
    seed_id: u64,
    vehicle_length: f64,
    max_attempts: usize,
    rng: &mut R,
) -> Result<ConcreteTestCase, SearchError> {
    let road = ls.road();
    for _ in 0..max_attempts {
        let values = ls.slots().iter().map(|s| sample_slot(s, rng)).collect();
        let tc = ConcreteTestCase { scenario: Arc::clone(ls), values, seed_id };
        if validate_concrete(&tc, &road, vehicle_length).ok() {
            return Ok(tc);
        }
    }
    Err(SearchError::SamplingExhausted { attempts: max_attempts })
}

/// `count` uniformly sampled cases with consecutive seed ids starting at
/// `first_id`.
pub fn initial_population<R: Rng + ?Sized>(
    ls: &Arc<LogicalScenario>,
    count: usize,
    first_id: u64,
    vehicle_length: f64,
    max_attempts: usize,
    rng: &mut R,
) -> Result<Vec<ConcreteTestCase>, SearchError> {
    (0..count).map(|i| sample_case(ls, first_id + i as u64, vehicle_length, max_attempts, rng)).collect()
}

/// Exchanges every slot of the `npc_index`-th NPC (constructor and actions).
pub fn swap_npc(a: &ConcreteTestCase, b: &ConcreteTestCase, npc_index: usize) -> (ConcreteTestCase, ConcreteTestCase) {
    let npcs = a.scenario.template().npcs();
    let (mut a2, mut b2) = (a.clone(), b.clone());
    for i in a.scenario.vehicle_slots(npcs[npc_index]) {
        a2.values[i] = b.values[i];
        b2.values[i] = a.values[i];
    }
    (a2, b2)
}

/// With probability `rate`, swaps one uniformly chosen NPC between the two
/// cases; otherwise returns copies.
pub fn crossover<R: Rng + ?Sized>(
    a: &ConcreteTestCase,
    b: &ConcreteTestCase,
    rate: f64,
    rng: &mut R,
) -> (ConcreteTestCase, ConcreteTestCase) {
    debug_assert!(Arc::ptr_eq(&a.scenario, &b.scenario) || a.scenario == b.scenario);
    let n = a.scenario.template().npcs().len();
    if n == 0 || rng.random::<f64>() >= rate {
        return (a.clone(), b.clone());
    }
    swap_npc(a, b, rng.random_range(0..n))
}

/// Deb's bounded polynomial mutation of `x` in `[lo, hi]` for a uniform
/// draw `u` in `[0, 1)`.
pub fn polynomial_mutation(x: f64, lo: f64, hi: f64, eta: f64, u: f64) -> f64 {
    if hi <= lo {
        return lo;
    }
    let span = hi - lo;
    let d1 = (x - lo) / span;
    let d2 = (hi - x) / span;
    let power = 1.0 / (eta + 1.0);
    let dq = if u < 0.5 {
        let val = 2.0 * u + (1.0 - 2.0 * u) * (1.0 - d1).powf(eta + 1.0);
        val.powf(power) - 1.0
    } else {
        let val = 2.0 * (1.0 - u) + 2.0 * (u - 0.5) * (1.0 - d2).powf(eta + 1.0);
        1.0 - val.powf(power)
    };
    (x + dq * span).clamp(lo, hi)
}

/// Mutates one slot value. Integer slots mutate on the real relaxation
/// `[lo - 0.5, hi + 0.5]`, then round and clamp.
pub fn mutate_slot(slot: &SlotInfo, x: f64, eta: f64, u: f64) -> f64 {
    if slot.is_integer() {
        polynomial_mutation(x, slot.lo - 0.5, slot.hi + 0.5, eta, u).round().clamp(slot.lo, slot.hi)
    } else {
        polynomial_mutation(x, slot.lo, slot.hi, eta, u)
    }
}

/// Mutates each slot independently with probability `rate`. Retries until
/// the result passes validation, at most `max_attempts` times.
pub fn mutate<R: Rng + ?Sized>(
    tc: &ConcreteTestCase,
    rate: f64,
    eta: f64,
    vehicle_length: f64,
    max_attempts: usize,
    rng: &mut R,
) -> Result<ConcreteTestCase, SearchError> {
    let road = tc.scenario.road();
    for _ in 0..max_attempts {
        let mut out = tc.clone();
        for (slot, value) in tc.scenario.slots().iter().zip(out.values.iter_mut()) {
            if rng.random::<f64>() < rate {
                *value = mutate_slot(slot, *value, eta, rng.random::<f64>());
            }
        }
        if validate_concrete(&out, &road, vehicle_length).ok() {
            return Ok(out);
        }
    }
    Err(SearchError::MutationExhausted { attempts: max_attempts })
}
