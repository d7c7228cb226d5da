//! Multi-objective evolutionary search over a logical scenario, plus a
//! random-sampling baseline with the same simulation budget.

mod pareto;
mod variation;

use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use pareto::{crowding_distance, non_dominated_sort, select_indices, tournament, Standing};
pub use variation::{crossover, initial_population, mutate, mutate_slot, polynomial_mutation, sample_case, swap_npc};

use crate::dsl::{ConcreteTestCase, LogicalScenario};
use crate::fitness::{evaluate, DivReference, FitnessConfig, FitnessError, FitnessVector};
use crate::sim::{simulate, CollisionEvent, EgoPolicyConfig, SimConfig, SimError, SimTrace};

/// Population size, either fixed or equal to the template's statement count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PopulationSize {
    #[default]
    TemplateLength,
    Fixed(usize),
}

impl PopulationSize {
    pub fn resolve(self, template_len: usize) -> usize {
        match self {
            PopulationSize::TemplateLength => template_len,
            PopulationSize::Fixed(n) => n,
        }
    }
}

impl fmt::Display for PopulationSize {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PopulationSize::TemplateLength => f.write_str("template_length"),
            PopulationSize::Fixed(n) => write!(f, "{n}"),
        }
    }
}

impl Serialize for PopulationSize {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            PopulationSize::TemplateLength => s.serialize_str("template_length"),
            PopulationSize::Fixed(n) => s.serialize_u64(*n as u64),
        }
    }
}

impl<'de> Deserialize<'de> for PopulationSize {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Name(String),
            Count(u64),
        }
        match Raw::deserialize(d)? {
            Raw::Count(n) => Ok(PopulationSize::Fixed(n as usize)),
            Raw::Name(s) if s == "template_length" => Ok(PopulationSize::TemplateLength),
            Raw::Name(s) => Err(serde::de::Error::custom(format!(
                "population_size must be a count or \"template_length\", got {s:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    pub population_size: PopulationSize,
    pub generations: usize,
    pub crossover_rate: f64,
    /// Per-slot mutation probability.
    pub mutation_rate: f64,
    /// Distribution index of polynomial mutation.
    pub distribution_index: f64,
    pub tournament_size: usize,
    /// Validation retries for sampling and mutation.
    pub max_attempts: usize,
    pub seed: u64,
    /// Worker threads for evaluation; 0 uses all cores.
    pub jobs: usize,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            population_size: PopulationSize::TemplateLength,
            generations: 10,
            crossover_rate: 0.4,
            mutation_rate: 0.5,
            distribution_index: 20.0,
            tournament_size: 2,
            max_attempts: 100,
            seed: 0,
            jobs: 0,
        }
    }
}

impl SearchConfig {
    pub fn check(&self) -> Result<(), SearchError> {
        let bad = |m: String| Err(SearchError::InvalidConfig(m));
        if self.population_size == PopulationSize::Fixed(0) || self.population_size == PopulationSize::Fixed(1) {
            return bad("population size must be at least 2".into());
        }
        if self.generations == 0 {
            return bad("generations must be at least 1".into());
        }
        for (name, rate) in [("crossover_rate", self.crossover_rate), ("mutation_rate", self.mutation_rate)] {
            if !(0.0..=1.0).contains(&rate) {
                return bad(format!("{name} must be in [0, 1], got {rate}"));
            }
        }
        if !(self.distribution_index >= 0.0) {
            return bad(format!("distribution_index must be non-negative, got {}", self.distribution_index));
        }
        if self.tournament_size == 0 || self.max_attempts == 0 {
            return bad("tournament_size and max_attempts must be positive".into());
        }
        Ok(())
    }

    /// Simulation budget of a full run on a template of `template_len`
    /// statements.
    pub fn budget(&self, template_len: usize) -> usize {
        self.generations * self.population_size.resolve(template_len)
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SearchError {
    #[error("no valid case found after {attempts} sampling attempts")]
    SamplingExhausted { attempts: usize },
    #[error("no valid mutant found after {attempts} attempts")]
    MutationExhausted { attempts: usize },
    #[error("invalid search config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Fitness(#[from] FitnessError),
}

/// Everything needed to score a concrete case.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Evaluator {
    pub sim: SimConfig,
    pub ego: EgoPolicyConfig,
    pub fitness: FitnessConfig,
}

impl Evaluator {
    /// Simulates `tc` and scores it against `reference`.
    pub fn evaluate(
        &self,
        tc: &ConcreteTestCase,
        reference: &[Vec<f64>],
    ) -> Result<(FitnessVector, SimTrace), SearchError> {
        let trace = simulate(tc, &self.sim, &self.ego)?;
        let fitness = evaluate(tc, &trace, reference, &self.fitness)?;
        Ok((fitness, trace))
    }

    pub fn is_critical(&self, fitness: &FitnessVector) -> bool {
        fitness.mhd < self.fitness.collision_threshold
    }
}

/// A simulated and scored case.
#[derive(Debug, Clone)]
pub struct EvaluatedCase {
    pub case: ConcreteTestCase,
    pub fitness: FitnessVector,
    /// 1-based position in the run's simulation order.
    pub sim_index: usize,
    /// 1-based generation; 0 for the random baseline.
    pub generation: usize,
    pub collision: Option<CollisionEvent>,
    /// Kept for critical cases only.
    pub trace: Option<Arc<SimTrace>>,
}

/// One line of the search history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRecord {
    pub generation: usize,
    pub sim_index: usize,
    pub seed_id: u64,
    pub values: Vec<f64>,
    pub fitness: FitnessVector,
    pub critical: bool,
}

/// Critical cases in discovery order.
#[derive(Debug, Clone, Default)]
pub struct CriticalSet {
    pub cases: Vec<EvaluatedCase>,
}

impl CriticalSet {
    pub fn len(&self) -> usize {
        self.cases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cases.is_empty()
    }

    pub fn sim_indices(&self) -> Vec<usize> {
        self.cases.iter().map(|c| c.sim_index).collect()
    }
}

/// A population member with its selection standing.
#[derive(Debug, Clone)]
pub struct Member {
    pub evaluated: EvaluatedCase,
    pub standing: Standing,
}

#[derive(Debug, Clone)]
pub struct SearchOutcome {
    pub population_size: usize,
    pub population: Vec<Member>,
    pub critical: CriticalSet,
    pub history: Vec<HistoryRecord>,
}

impl SearchOutcome {
    pub fn simulations(&self) -> usize {
        self.history.len()
    }

    /// History as JSON lines, one record per simulation.
    pub fn history_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.history {
            out.push_str(&serde_json::to_string(r).expect("history records serialize"));
            out.push('\n');
        }
        out
    }
}

/// Keeps up to `keep` cases by non-dominated rank and crowding distance.
pub fn pareto_select(cases: Vec<EvaluatedCase>, keep: usize) -> Vec<Member> {
    let fitness: Vec<FitnessVector> = cases.iter().map(|c| c.fitness).collect();
    let chosen = select_indices(&fitness, keep);
    let mut slots: Vec<Option<EvaluatedCase>> = cases.into_iter().map(Some).collect();
    chosen
        .into_iter()
        .map(|(i, standing)| Member { evaluated: slots[i].take().expect("indices are distinct"), standing })
        .collect()
}

struct Run<'a> {
    evaluator: &'a Evaluator,
    pool: Option<rayon::ThreadPool>,
    next_sim: usize,
    archive: Vec<Vec<f64>>,
    history: Vec<HistoryRecord>,
    critical: CriticalSet,
}

impl<'a> Run<'a> {
    fn new(evaluator: &'a Evaluator, jobs: usize) -> Result<Self, SearchError> {
        let pool = if jobs == 0 {
            None
        } else {
            Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(jobs)
                    .build()
                    .map_err(|e| SearchError::InvalidConfig(e.to_string()))?,
            )
        };
        Ok(Self {
            evaluator,
            pool,
            next_sim: 1,
            archive: Vec::new(),
            history: Vec::new(),
            critical: CriticalSet::default(),
        })
    }

    /// Evaluates a batch in parallel; results keep batch order so runs are
    /// reproducible regardless of thread count.
    fn evaluate_batch(
        &mut self,
        batch: Vec<ConcreteTestCase>,
        generation: usize,
        references: Vec<Vec<Vec<f64>>>,
    ) -> Result<Vec<EvaluatedCase>, SearchError> {
        let ev = self.evaluator;
        let work = || {
            batch
                .par_iter()
                .zip(references.par_iter())
                .map(|(tc, reference)| ev.evaluate(tc, reference))
                .collect::<Vec<_>>()
        };
        let results = match &self.pool {
            Some(pool) => pool.install(work),
            None => work(),
        };
        let mut out = Vec::with_capacity(batch.len());
        for (case, result) in batch.into_iter().zip(results) {
            let (fitness, trace) = result?;
            let critical = ev.is_critical(&fitness);
            let sim_index = self.next_sim;
            self.next_sim += 1;
            self.archive.push(case.normalized());
            self.history.push(HistoryRecord {
                generation,
                sim_index,
                seed_id: case.seed_id,
                values: case.values.clone(),
                fitness,
                critical,
            });
            let evaluated = EvaluatedCase {
                collision: trace.collision,
                trace: critical.then(|| Arc::new(trace)),
                case,
                fitness,
                sim_index,
                generation,
            };
            if critical {
                self.critical.cases.push(evaluated.clone());
            }
            out.push(evaluated);
        }
        Ok(out)
    }
}

/// Reference point sets for a batch. In the first generation every
/// candidate is compared against the rest of its batch.
fn references(
    batch: &[ConcreteTestCase],
    population: &[Member],
    archive: &[Vec<f64>],
    mode: DivReference,
) -> Vec<Vec<Vec<f64>>> {
    let points: Vec<Vec<f64>> = batch.iter().map(|c| c.normalized()).collect();
    let base: Vec<Vec<f64>> = match mode {
        DivReference::Population => population.iter().map(|m| m.evaluated.case.normalized()).collect(),
        DivReference::Archive => archive.to_vec(),
    };
    if !base.is_empty() {
        return vec![base; batch.len()];
    }
    (0..batch.len())
        .map(|i| points.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, p)| p.clone()).collect())
        .collect()
}

fn offspring<R: Rng + ?Sized>(
    population: &[Member],
    count: usize,
    first_id: u64,
    cfg: &SearchConfig,
    vehicle_length: f64,
    rng: &mut R,
) -> Result<Vec<ConcreteTestCase>, SearchError> {
    let standings: Vec<Standing> = population.iter().map(|m| m.standing).collect();
    let mut out = Vec::with_capacity(count + 1);
    while out.len() < count {
        let p1 = &population[tournament(&standings, cfg.tournament_size, rng)].evaluated.case;
        let p2 = &population[tournament(&standings, cfg.tournament_size, rng)].evaluated.case;
        let (c1, c2) = crossover(p1, p2, cfg.crossover_rate, rng);
        for (child, parent) in [(c1, p1), (c2, p2)] {
            let mutant = match mutate(
                &child,
                cfg.mutation_rate,
                cfg.distribution_index,
                vehicle_length,
                cfg.max_attempts,
                rng,
            ) {
                Ok(m) => m,
                // a swapped child can be infeasible; fall back to its parent
                Err(SearchError::MutationExhausted { .. }) => {
                    mutate(parent, cfg.mutation_rate, cfg.distribution_index, vehicle_length, cfg.max_attempts, rng)
                        .unwrap_or_else(|_| parent.clone())
                }
                Err(e) => return Err(e),
            };
            out.push(mutant);
        }
    }
    out.truncate(count);
    for (i, tc) in out.iter_mut().enumerate() {
        tc.seed_id = first_id + i as u64;
    }
    Ok(out)
}

/// Runs the evolutionary search for `cfg.generations` generations.
pub fn run_search(
    ls: &Arc<LogicalScenario>,
    cfg: &SearchConfig,
    evaluator: &Evaluator,
) -> Result<SearchOutcome, SearchError> {
    cfg.check()?;
    let p_max = cfg.population_size.resolve(ls.template().len());
    if p_max < 2 {
        return Err(SearchError::InvalidConfig(format!("population size must be at least 2, got {p_max}")));
    }
    let length = evaluator.sim.vehicle_length;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut run = Run::new(evaluator, cfg.jobs)?;
    let mut population: Vec<Member> = Vec::new();
    let mut next_id = 0u64;
    for generation in 1..=cfg.generations {
        let batch = if population.is_empty() {
            initial_population(ls, p_max, next_id, length, cfg.max_attempts, &mut rng)?
        } else {
            offspring(&population, p_max, next_id, cfg, length, &mut rng)?
        };
        next_id += batch.len() as u64;
        let refs = references(&batch, &population, &run.archive, evaluator.fitness.div_reference);
        let evaluated = run.evaluate_batch(batch, generation, refs)?;
        let mut union: Vec<EvaluatedCase> = population.into_iter().map(|m| m.evaluated).collect();
        union.extend(evaluated);
        population = pareto_select(union, p_max);
    }
    Ok(SearchOutcome { population_size: p_max, population, critical: run.critical, history: run.history })
}

/// Uniform random sampling with a fixed simulation budget. Diversity is
/// scored against all earlier samples.
pub fn run_random(
    ls: &Arc<LogicalScenario>,
    budget: usize,
    seed: u64,
    max_attempts: usize,
    jobs: usize,
    evaluator: &Evaluator,
) -> Result<SearchOutcome, SearchError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut run = Run::new(evaluator, jobs)?;
    let batch = initial_population(ls, budget, 0, evaluator.sim.vehicle_length, max_attempts, &mut rng)?;
    let points: Vec<Vec<f64>> = batch.iter().map(|c| c.normalized()).collect();
    let refs = (0..batch.len()).map(|i| points[..i].to_vec()).collect();
    let evaluated = run.evaluate_batch(batch, 0, refs)?;
    let population = evaluated
        .into_iter()
        .map(|evaluated| Member { evaluated, standing: Standing { rank: 1, crowding: 0.0 } })
        .collect();
    Ok(SearchOutcome { population_size: budget, population, critical: run.critical, history: run.history })
}
