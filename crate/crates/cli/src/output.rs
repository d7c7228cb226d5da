//! Files written by `search` and `campaign`.

use std::path::Path;

use scengen_core::campaign::{Campaign, Method};
use scengen_core::config::PipelineConfig;
use scengen_core::dsl::{serialize_concrete, serialize_logical, LogicalScenario};
use scengen_core::fitness::FitnessVector;
use scengen_core::search::SearchOutcome;
use scengen_core::sim::CollisionEvent;
use scengen_core::triage::{run_metrics, type_counts, CampaignMetrics, RunRecord, Stat};
use serde::Serialize;

use crate::error::{write_output, CliError, Result};

/// Guarantees every finished run must meet.
pub fn check_outcome(outcome: &SearchOutcome, cfg: &PipelineConfig, ls: &LogicalScenario) -> Result<()> {
    let budget = cfg.search.budget(ls.template().len());
    if outcome.simulations() != budget {
        return Err(CliError::internal(format!("{} simulations, budget {budget}", outcome.simulations())));
    }
    let indices = outcome.critical.sim_indices();
    if !indices.windows(2).all(|w| w[0] < w[1]) {
        return Err(CliError::internal("critical cases are not in simulation order"));
    }
    let l = cfg.fitness.collision_threshold;
    if let Some(c) = outcome.critical.cases.iter().find(|c| !(c.fitness.mhd < l)) {
        return Err(CliError::internal(format!("critical case {} has mhd {} >= {l}", c.sim_index, c.fitness.mhd)));
    }
    Ok(())
}

#[derive(Serialize)]
struct CriticalEntry<'a> {
    sim_index: usize,
    generation: usize,
    seed_id: u64,
    values: &'a [f64],
    fitness: FitnessVector,
    collision: Option<CollisionEvent>,
    signature: String,
}

fn json(value: &impl Serialize) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("output serializes");
    s.push('\n');
    s
}

pub fn write_search(
    dir: &Path,
    cfg: &PipelineConfig,
    ls: &LogicalScenario,
    outcome: &SearchOutcome,
    record: &RunRecord,
    seed: u64,
) -> Result<()> {
    let mut snapshot = cfg.clone();
    snapshot.search.seed = seed;
    write_output(&dir.join("config.toml"), snapshot.to_toml())?;
    write_output(&dir.join("scenario.lsc"), serialize_logical(ls))?;
    write_output(&dir.join("history.jsonl"), outcome.history_jsonl())?;
    let mut entries = Vec::new();
    for (case, (_, signature)) in outcome.critical.cases.iter().zip(&record.criticals) {
        entries.push(CriticalEntry {
            sim_index: case.sim_index,
            generation: case.generation,
            seed_id: case.case.seed_id,
            values: &case.case.values,
            fitness: case.fitness,
            collision: case.collision,
            signature: signature.to_string(),
        });
        let base = dir.join("critical").join(case.sim_index.to_string());
        write_output(&base.with_extension("ctc"), serialize_concrete(&case.case))?;
        if let Some(trace) = &case.trace {
            write_output(&base.with_extension("csv"), trace.to_csv())?;
        }
    }
    write_output(&dir.join("critical.json"), json(&entries))?;
    write_output(&dir.join("metrics.json"), json(&run_metrics(record)))?;
    Ok(())
}

const NOT_REACHED: &str = "not reached";

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map_or_else(|| NOT_REACHED.to_string(), |v| v.to_string())
}

fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)
            .map_err(|e| CliError::pipeline(format!("cannot create {}: {e}", parent.display())))?;
    }
    csv::Writer::from_path(path).map_err(|e| CliError::pipeline(format!("cannot write {}: {e}", path.display())))
}

fn csv_error(path: &Path) -> impl Fn(csv::Error) -> CliError + '_ {
    move |e| CliError::pipeline(format!("cannot write {}: {e}", path.display()))
}

fn write_rows(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(header).map_err(csv_error(path))?;
    for row in rows {
        w.write_record(&row).map_err(csv_error(path))?;
    }
    w.flush().map_err(|e| CliError::pipeline(format!("cannot write {}: {e}", path.display())))
}

fn stat_cells(s: Option<Stat>) -> [String; 2] {
    match s {
        Some(s) => [s.mean.to_string(), s.std.to_string()],
        None => [NOT_REACHED.into(), NOT_REACHED.into()],
    }
}

#[derive(Serialize)]
struct SummaryEntry<'a> {
    scenario: &'a str,
    method: Method,
    metrics: &'a CampaignMetrics,
}

#[derive(Serialize)]
struct MethodTypes {
    method: Method,
    distinct_types: usize,
    types: Vec<String>,
}

#[derive(Serialize)]
struct Summary<'a> {
    master_seed: u64,
    scenarios: Vec<SummaryEntry<'a>>,
    methods: Vec<MethodTypes>,
}

pub fn write_campaign(dir: &Path, cfg: &PipelineConfig, campaign: &Campaign, master_seed: u64) -> Result<()> {
    let summary = campaign.metrics()?;
    write_output(&dir.join("config.toml"), cfg.to_toml())?;

    let path = dir.join("metrics.csv");
    write_rows(
        &path,
        &[
            "scenario",
            "method",
            "repetition",
            "seed",
            "n_types",
            "n_critical",
            "type_expos_rate",
            "rate_defined",
            "sim_for_first_type",
            "sim_for_all_types",
            "time_for_one_scenario",
        ],
        campaign.runs.iter().map(|r| {
            let m = run_metrics(&r.record);
            vec![
                r.scenario.clone(),
                r.method.to_string(),
                r.repetition.to_string(),
                r.seed.to_string(),
                m.n_types.to_string(),
                m.n_critical.to_string(),
                m.type_expos_rate.to_string(),
                m.rate_defined.to_string(),
                opt(m.sim_for_first_type),
                opt(m.sim_for_all_types),
                m.time_for_one_scenario.to_string(),
            ]
        }),
    )?;

    let path = dir.join("summary.csv");
    write_rows(
        &path,
        &[
            "scenario",
            "method",
            "repetitions",
            "n_types_mean",
            "n_types_std",
            "type_expos_rate_mean",
            "type_expos_rate_std",
            "sim_for_first_type_mean",
            "sim_for_first_type_std",
            "sim_for_all_types_mean",
            "sim_for_all_types_std",
            "time_for_one_scenario_mean",
            "time_for_one_scenario_std",
        ],
        summary.iter().map(|(scenario, method, m)| {
            let mut row = vec![scenario.clone(), method.to_string(), m.repetitions.to_string()];
            row.extend(stat_cells(Some(m.n_types)));
            row.extend(stat_cells(Some(m.type_expos_rate)));
            row.extend(stat_cells(m.sim_for_first_type));
            row.extend(stat_cells(m.sim_for_all_types));
            row.extend(stat_cells(Some(m.time_for_one_scenario)));
            row
        }),
    )?;

    let methods: Vec<Method> =
        [Method::Search, Method::Random].into_iter().filter(|m| campaign.runs.iter().any(|r| r.method == *m)).collect();
    let report = Summary {
        master_seed,
        scenarios: summary
            .iter()
            .map(|(s, method, metrics)| SummaryEntry { scenario: s, method: *method, metrics })
            .collect(),
        methods: methods
            .iter()
            .map(|&method| {
                let types = campaign.distinct_types(method);
                MethodTypes {
                    method,
                    distinct_types: types.len(),
                    types: types.iter().map(|t| t.to_string()).collect(),
                }
            })
            .collect(),
    };
    write_output(&dir.join("summary.json"), json(&report))?;

    let path = dir.join("plot_cumulative_types.csv");
    write_rows(
        &path,
        &["scenario", "method", "repetition", "simulation", "types"],
        campaign.runs.iter().flat_map(|r| {
            r.record.cumulative_types().into_iter().map(move |(sim, types)| {
                vec![
                    r.scenario.clone(),
                    r.method.to_string(),
                    r.repetition.to_string(),
                    sim.to_string(),
                    types.to_string(),
                ]
            })
        }),
    )?;

    let path = dir.join("plot_type_counts.csv");
    write_rows(
        &path,
        &["method", "type", "count"],
        methods.iter().flat_map(|&method| {
            type_counts(campaign.runs.iter().filter(|r| r.method == method).map(|r| &r.record))
                .into_iter()
                .map(move |(sig, n)| vec![method.to_string(), sig.to_string(), n.to_string()])
        }),
    )?;

    for r in &campaign.runs {
        let name = format!("{}-{}-{}.jsonl", r.scenario, r.method, r.repetition);
        write_output(&dir.join("histories").join(name), r.outcome.history_jsonl())?;
    }
    Ok(())
}
