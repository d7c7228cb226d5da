//! `scengen`: report to IPS to logical scenario to critical test cases.

mod error;
mod output;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use scengen_core::campaign::{run_campaign, run_once, run_record, run_seed, Method, NamedScenario};
use scengen_core::config::PipelineConfig;
use scengen_core::dsl::{parse_logical, serialize_logical, LogicalScenario};
use scengen_core::ips::{parse_ips, serialize_ips, Ips};
use scengen_core::llm::{build_client, convert_to_template, extract_ips, ChatClient, LlmMode};
use scengen_core::logicalize::{logicalize, DefaultRangeTable};
use scengen_core::search::PopulationSize;

use crate::error::{read_input, write_output, CliError, Kind, Result};

#[derive(Parser)]
#[command(name = "scengen", version, about = "Generate critical driving test cases from accident reports")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Pipeline configuration, TOML or JSON.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; overrides `search.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Evaluation threads; 0 uses all cores.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Answer language model prompts from a transcript.
    #[arg(long, global = true, value_name = "TRANSCRIPT", group = "llm_mode")]
    replay: Option<PathBuf>,
    /// Query the live service and append exchanges to a transcript.
    #[arg(long, global = true, value_name = "TRANSCRIPT", group = "llm_mode")]
    record: Option<PathBuf>,
    /// Query the live service.
    #[arg(long, global = true, group = "llm_mode")]
    live: bool,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// More log output; repeat for debug.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Subcommand)]
enum Command {
    /// Extract an interaction pattern sequence from a report.
    Extract { report: PathBuf },
    /// Turn an IPS file into a logical scenario.
    Logicalize {
        ips: PathBuf,
        /// Default range table; overrides `paths.defaults`.
        #[arg(long)]
        defaults: Option<PathBuf>,
    },
    /// Search a logical scenario for critical test cases.
    Search {
        scenario: PathBuf,
        #[arg(long)]
        generations: Option<usize>,
        #[arg(long)]
        population: Option<usize>,
        /// Uniform random sampling with the same budget instead.
        #[arg(long)]
        random: bool,
    },
    /// Repeated search and random runs with aggregated metrics.
    Campaign {
        /// Logical scenarios; `paths.scenarios` when empty.
        scenarios: Vec<PathBuf>,
        #[arg(long)]
        repetitions: Option<usize>,
    },
    /// Full pipeline for each report.
    Run {
        /// Reports; the `.txt` files of `paths.reports_dir` when empty.
        reports: Vec<PathBuf>,
        #[arg(long)]
        defaults: Option<PathBuf>,
    },
    /// Print the effective configuration.
    Config,
}

struct Context {
    cfg: PipelineConfig,
    master_seed: u64,
    out: PathBuf,
}

impl Context {
    fn new(global: &Global) -> Result<Self> {
        let mut cfg = match &global.config {
            Some(path) => PipelineConfig::load(path)?,
            None => PipelineConfig::default(),
        };
        if let Some(jobs) = global.jobs {
            cfg.search.jobs = jobs;
        }
        if let Some(path) = &global.replay {
            cfg.llm.mode = LlmMode::Replay;
            cfg.llm.transcript = Some(path.clone());
        } else if let Some(path) = &global.record {
            cfg.llm.mode = LlmMode::Record;
            cfg.llm.transcript = Some(path.clone());
        } else if global.live {
            cfg.llm.mode = LlmMode::Live;
        }
        let master_seed = global.seed.unwrap_or(cfg.search.seed);
        let out = global.out.clone().or_else(|| cfg.paths.output_dir.clone()).unwrap_or_else(|| "scengen-out".into());
        Ok(Self { cfg, master_seed, out })
    }

    fn defaults(&self, flag: Option<&Path>) -> Result<DefaultRangeTable> {
        match flag.or(self.cfg.paths.defaults.as_deref()) {
            Some(path) => {
                if !path.is_file() {
                    return Err(CliError::usage(format!("defaults file {} does not exist", path.display())));
                }
                Ok(DefaultRangeTable::load(path)?)
            }
            None => Ok(DefaultRangeTable::default()),
        }
    }

    fn client(&self) -> Result<Box<dyn ChatClient>> {
        Ok(build_client(&self.cfg.llm)?)
    }
}

fn stem(path: &Path) -> String {
    path.file_stem().map_or_else(|| "scenario".into(), |s| s.to_string_lossy().into_owned())
}

fn load_scenario(path: &Path) -> Result<Arc<LogicalScenario>> {
    let text = read_input(path)?;
    Ok(Arc::new(parse_logical(&text).map_err(|e| CliError::from(e).context(path.display()))?))
}

fn extract(ctx: &Context, client: &mut dyn ChatClient, report: &Path) -> Result<Ips> {
    let text = read_input(report)?;
    let extraction = extract_ips(&text, client, ctx.cfg.llm.max_retries)?;
    log::info!("{}: extracted in {} attempt(s)", report.display(), extraction.attempts);
    let path = ctx.out.join(format!("{}.ips", stem(report)));
    write_output(&path, serialize_ips(&extraction.ips))?;
    println!("{}", path.display());
    Ok(extraction.ips)
}

fn to_logical(
    ctx: &Context,
    client: &mut dyn ChatClient,
    ips: &Ips,
    name: &str,
    defaults: &DefaultRangeTable,
) -> Result<Arc<LogicalScenario>> {
    let conversion = convert_to_template(ips, client, ctx.cfg.llm.max_retries)?;
    log::info!("{name}: converted in {} attempt(s)", conversion.attempts);
    let (ls, ego) = logicalize(ips, &conversion.template, &conversion.proposed, defaults, ctx.cfg.sim.vehicle_length)?;
    let path = ctx.out.join(format!("{name}.lsc"));
    write_output(&path, serialize_logical(&ls))?;
    println!("{} (ego {})", path.display(), ego.ego);
    Ok(Arc::new(ls))
}

fn search(ctx: &Context, ls: &Arc<LogicalScenario>, name: &str, index: usize, method: Method) -> Result<()> {
    let seed = run_seed(ctx.master_seed, index, 1, method);
    let (outcome, elapsed) = run_once(ls, method, seed, &ctx.cfg)?;
    let record = run_record(&outcome, &ctx.cfg, elapsed)?;
    output::check_outcome(&outcome, &ctx.cfg, ls)?;
    let dir = ctx.out.join(match method {
        Method::Search => name.to_string(),
        Method::Random => format!("{name}-random"),
    });
    output::write_search(&dir, &ctx.cfg, ls, &outcome, &record, seed)?;
    println!(
        "{}: {} simulations, {} critical, {} types (seed {seed})",
        dir.display(),
        outcome.simulations(),
        outcome.critical.len(),
        scengen_core::triage::run_metrics(&record).n_types
    );
    Ok(())
}

fn report_paths(ctx: &Context, reports: &[PathBuf]) -> Result<Vec<PathBuf>> {
    if !reports.is_empty() {
        return Ok(reports.to_vec());
    }
    let Some(dir) = &ctx.cfg.paths.reports_dir else {
        return Err(CliError::usage("no reports given and paths.reports_dir is unset"));
    };
    let entries = std::fs::read_dir(dir).map_err(|e| CliError::usage(format!("cannot list {}: {e}", dir.display())))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "txt"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(CliError::usage(format!("no .txt reports in {}", dir.display())));
    }
    Ok(paths)
}

fn execute(cli: Cli) -> Result<()> {
    let mut ctx = Context::new(&cli.global)?;
    match cli.command {
        Command::Config => {
            ctx.cfg.check(false)?;
            print!("{}", ctx.cfg.to_toml());
        }
        Command::Extract { report } => {
            ctx.cfg.check(true)?;
            let mut client = ctx.client()?;
            let result = extract(&ctx, client.as_mut(), &report);
            client.finish()?;
            result?;
        }
        Command::Logicalize { ips, defaults } => {
            ctx.cfg.check(true)?;
            let table = ctx.defaults(defaults.as_deref())?;
            let parsed = parse_ips(&read_input(&ips)?).map_err(|e| CliError::from(e).context(ips.display()))?;
            let mut client = ctx.client()?;
            let result = to_logical(&ctx, client.as_mut(), &parsed, &stem(&ips), &table);
            client.finish()?;
            result?;
        }
        Command::Search { scenario, generations, population, random } => {
            if let Some(g) = generations {
                ctx.cfg.search.generations = g;
            }
            if let Some(p) = population {
                ctx.cfg.search.population_size = PopulationSize::Fixed(p);
            }
            ctx.cfg.check(false)?;
            let ls = load_scenario(&scenario)?;
            let method = if random { Method::Random } else { Method::Search };
            search(&ctx, &ls, &stem(&scenario), 0, method)?;
        }
        Command::Campaign { scenarios, repetitions } => {
            if let Some(r) = repetitions {
                ctx.cfg.repetitions = r;
            }
            ctx.cfg.check(false)?;
            let paths = if scenarios.is_empty() { ctx.cfg.paths.scenarios.clone() } else { scenarios };
            if paths.is_empty() {
                return Err(CliError::usage("no scenarios given and paths.scenarios is empty"));
            }
            let named = paths
                .iter()
                .map(|p| Ok(NamedScenario { name: stem(p), scenario: load_scenario(p)? }))
                .collect::<Result<Vec<_>>>()?;
            let campaign = run_campaign(&named, &ctx.cfg, ctx.master_seed)?;
            for run in &campaign.runs {
                let ls = &named.iter().find(|n| n.name == run.scenario).expect("known scenario").scenario;
                output::check_outcome(&run.outcome, &ctx.cfg, ls)
                    .map_err(|e| e.context(format!("{} {} repetition {}", run.scenario, run.method, run.repetition)))?;
            }
            output::write_campaign(&ctx.out, &ctx.cfg, &campaign, ctx.master_seed)?;
            for method in [Method::Search, Method::Random] {
                if campaign.runs.iter().any(|r| r.method == method) {
                    println!("{method}: {} distinct types", campaign.distinct_types(method).len());
                }
            }
            println!("{}", ctx.out.display());
        }
        Command::Run { reports, defaults } => {
            ctx.cfg.check(true)?;
            let table = ctx.defaults(defaults.as_deref())?;
            let paths = report_paths(&ctx, &reports)?;
            let mut client = ctx.client()?;
            let mut failed = 0;
            for (i, report) in paths.iter().enumerate() {
                let name = stem(report);
                let result = extract(&ctx, client.as_mut(), report)
                    .and_then(|ips| to_logical(&ctx, client.as_mut(), &ips, &name, &table))
                    .and_then(|ls| search(&ctx, &ls, &name, i, Method::Search));
                if let Err(e) = result {
                    eprintln!("error: {}: {e}", report.display());
                    failed += 1;
                }
            }
            client.finish()?;
            if failed > 0 {
                return Err(CliError::pipeline(format!("{failed} of {} report(s) failed", paths.len())));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { Kind::Usage.exit_code() } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.global.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).parse_default_env().init();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.kind.exit_code())
        }
    }
}
