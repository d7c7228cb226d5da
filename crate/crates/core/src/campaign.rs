//! Repeated search and random-baseline runs over several logical
//! scenarios, with every critical case classified.

use std::collections::BTreeSet;
use std::fmt;
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{derive_seed, PipelineConfig};
use crate::dsl::LogicalScenario;
use crate::search::{run_random, run_search, SearchConfig, SearchError, SearchOutcome};
use crate::triage::{classify, metrics, CampaignMetrics, RunRecord, TriageError, TypeSignature};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Search,
    Random,
}

impl Method {
    fn label(self) -> u64 {
        match self {
            Method::Search => 0,
            Method::Random => 1,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Search => "search",
            Method::Random => "random",
        })
    }
}

#[derive(Debug, Error)]
pub enum CampaignError {
    #[error("{scenario} ({method}, repetition {repetition}): {source}")]
    Run { scenario: String, method: Method, repetition: usize, source: SearchError },
    #[error(transparent)]
    Triage(#[from] TriageError),
}

#[derive(Debug, Clone)]
pub struct NamedScenario {
    pub name: String,
    pub scenario: Arc<LogicalScenario>,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub scenario: String,
    pub method: Method,
    /// 1-based.
    pub repetition: usize,
    pub seed: u64,
    pub outcome: SearchOutcome,
    pub record: RunRecord,
}

#[derive(Debug, Clone)]
pub struct Campaign {
    pub runs: Vec<RunResult>,
}

impl Campaign {
    pub fn runs_of<'a>(&'a self, scenario: &'a str, method: Method) -> impl Iterator<Item = &'a RunResult> + 'a {
        self.runs.iter().filter(move |r| r.scenario == scenario && r.method == method)
    }

    /// Metrics per scenario and method, in first-appearance order.
    pub fn metrics(&self) -> Result<Vec<(String, Method, CampaignMetrics)>, TriageError> {
        let mut keys: Vec<(String, Method)> = Vec::new();
        for r in &self.runs {
            if !keys.iter().any(|(s, m)| *s == r.scenario && *m == r.method) {
                keys.push((r.scenario.clone(), r.method));
            }
        }
        keys.into_iter()
            .map(|(s, m)| {
                let records: Vec<RunRecord> = self.runs_of(&s, m).map(|r| r.record.clone()).collect();
                Ok((s, m, metrics(&records)?))
            })
            .collect()
    }

    /// Distinct signatures found by `method` over all scenarios and runs.
    pub fn distinct_types(&self, method: Method) -> BTreeSet<TypeSignature> {
        self.runs
            .iter()
            .filter(|r| r.method == method)
            .flat_map(|r| r.record.criticals.iter().map(|(_, s)| s.clone()))
            .collect()
    }
}

/// Seed of one run: derived from the master seed by scenario index,
/// repetition (1-based) and method.
pub fn run_seed(master: u64, scenario: usize, repetition: usize, method: Method) -> u64 {
    derive_seed(master, &[scenario as u64, repetition as u64, method.label()])
}

/// Classifies the critical cases of one finished run.
pub fn run_record(outcome: &SearchOutcome, cfg: &PipelineConfig, elapsed_secs: f64) -> Result<RunRecord, TriageError> {
    let triage = cfg.triage_config();
    let criticals = outcome
        .critical
        .cases
        .iter()
        .map(|c| Ok((c.sim_index, classify(c, &triage)?)))
        .collect::<Result<_, TriageError>>()?;
    Ok(RunRecord { simulations: outcome.simulations(), criticals, elapsed_secs })
}

/// Runs one method once on one scenario.
pub fn run_once(
    scenario: &Arc<LogicalScenario>,
    method: Method,
    seed: u64,
    cfg: &PipelineConfig,
) -> Result<(SearchOutcome, f64), SearchError> {
    let evaluator = cfg.evaluator();
    let started = Instant::now();
    let outcome = match method {
        Method::Search => run_search(scenario, &SearchConfig { seed, ..cfg.search.clone() }, &evaluator)?,
        Method::Random => {
            let budget = cfg.search.budget(scenario.template().len());
            run_random(scenario, budget, seed, cfg.search.max_attempts, cfg.search.jobs, &evaluator)?
        }
    };
    Ok((outcome, started.elapsed().as_secs_f64()))
}

/// `cfg.repetitions` runs of search (and random sampling when enabled) on
/// every scenario.
pub fn run_campaign(
    scenarios: &[NamedScenario],
    cfg: &PipelineConfig,
    master_seed: u64,
) -> Result<Campaign, CampaignError> {
    let methods: &[Method] = if cfg.random_baseline { &[Method::Search, Method::Random] } else { &[Method::Search] };
    let mut runs = Vec::new();
    for (i, named) in scenarios.iter().enumerate() {
        for repetition in 1..=cfg.repetitions {
            for &method in methods {
                let seed = run_seed(master_seed, i, repetition, method);
                log::info!("{} {method} repetition {repetition} seed {seed}", named.name);
                let (outcome, elapsed) = run_once(&named.scenario, method, seed, cfg).map_err(|source| {
                    CampaignError::Run { scenario: named.name.clone(), method, repetition, source }
                })?;
                let record = run_record(&outcome, cfg, elapsed)?;
                runs.push(RunResult { scenario: named.name.clone(), method, repetition, seed, outcome, record });
            }
        }
    }
    Ok(Campaign { runs })
}
