//! `subgoals` — command-line front end for the planning and inference
//! crate: map tools, posterior inference over observed paths, and the two
//! experiment drivers.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use subgoals_core::collab::{self, Experiment2Config, PosteriorSource};
use subgoals_core::experiments::{
    self, generate_exp1_stimuli, golden_stimuli, run_exp1, Job, GOLDEN_STIMULI_SEED,
};
use subgoals_core::gridworld::{load_map, Dest, GridMap};
use subgoals_core::inference::{
    copy_model, gibbs_infer, independent_model, logical_possibility_model, GibbsConfig,
    PosteriorTable,
};
use subgoals_core::likelihood::{PathRecord, StateSequence};
use subgoals_core::planner::ValueCache;
use subgoals_core::CoreError;

const OUTPUT_DIR_ENV: &str = "SUBGOALS_OUTPUT_DIR";

#[derive(Parser)]
#[command(name = "subgoals", version, about = "Gridworld subgoal planning and inference")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Map tools.
    Map {
        #[command(subcommand)]
        command: MapCommand,
    },
    /// Infer subgoal posteriors from an observation file.
    Infer(InferArgs),
    /// Run the Experiment 1 stimulus/model-comparison harness.
    Exp1(Exp1Args),
    /// Run the Experiment 2 Worker-Helper sweep.
    Exp2(Exp2Args),
}

#[derive(Subcommand)]
enum MapCommand {
    /// Parse and validate a map document, printing a summary.
    Validate {
        /// Map file; omit for the built-in canonical map.
        path: Option<PathBuf>,
    },
}

#[derive(Args, Clone)]
struct CommonArgs {
    /// Map file; omit for the built-in canonical map.
    #[arg(long)]
    map: Option<PathBuf>,
    /// Key-value config file (flag-name = value); flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// DP concentration parameter.
    #[arg(long)]
    alpha: Option<f64>,
    /// Softmax parameter for path likelihoods.
    #[arg(long)]
    beta: Option<f64>,
    /// Softmax parameter of the Helper's Worker model.
    #[arg(long)]
    beta_helper: Option<f64>,
    /// Helper commitment threshold.
    #[arg(long)]
    threshold: Option<f64>,
    /// Gibbs sweeps.
    #[arg(long)]
    iters: Option<usize>,
    /// Discarded initial sweeps.
    #[arg(long)]
    burnin: Option<usize>,
    /// Comma-separated model names.
    #[arg(long)]
    models: Option<String>,
    /// Output directory (default: SUBGOALS_OUTPUT_DIR or the current dir).
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct InferArgs {
    /// JSON observation file: a list of {"dest": "B", "states": [[x,y],..]}.
    observations: PathBuf,
    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Args)]
struct Exp1Args {
    /// Regenerate stimuli from this seed instead of the frozen suite.
    #[arg(long)]
    stimulus_seed: Option<u64>,
    /// External judgment CSV for correlation.
    #[arg(long)]
    judgments: Option<PathBuf>,
    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Args)]
struct Exp2Args {
    /// Comma-separated settings (1-3).
    #[arg(long, default_value = "1,2,3")]
    settings: String,
    #[arg(long, default_value_t = 10)]
    structures: usize,
    #[arg(long, default_value_t = 5)]
    repeats: usize,
    /// Comma-separated observation counts.
    #[arg(long, default_value = "1,2,3,4,5,6,7,8")]
    n_observations: String,
    #[arg(long, default_value_t = 99)]
    trials: usize,
    /// Also write per-step episode logs (JSON lines).
    #[arg(long)]
    log_events: bool,
    #[command(flatten)]
    common: CommonArgs,
}

/// Flag values after merging the config file (low priority) and CLI flags
/// (high priority) onto the paper defaults.
struct RunConfig {
    map: GridMap,
    seed: u64,
    gibbs: GibbsConfig,
    beta_helper: f64,
    threshold: f64,
    models: Vec<PosteriorSource>,
    output: PathBuf,
}

fn parse_config_file(path: &Path) -> Result<BTreeMap<String, String>, CoreError> {
    let text = fs::read_to_string(path)?;
    let mut out = BTreeMap::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            CoreError::InvalidConfig(format!("{}:{}: expected key = value", path.display(), ln + 1))
        })?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

fn get_parsed<T: std::str::FromStr>(
    file: &BTreeMap<String, String>,
    key: &str,
) -> Result<Option<T>, CoreError> {
    match file.get(key) {
        None => Ok(None),
        Some(v) => v
            .parse()
            .map(Some)
            .map_err(|_| CoreError::InvalidConfig(format!("bad value '{v}' for {key}"))),
    }
}

fn load_run_config(common: &CommonArgs, default_models: &[PosteriorSource]) -> Result<RunConfig, CoreError> {
    let file = match &common.config {
        Some(p) => parse_config_file(p)?,
        None => BTreeMap::new(),
    };
    let map_path = common
        .map
        .clone()
        .or_else(|| file.get("map").map(PathBuf::from));
    let map = match map_path {
        Some(p) => load_map(&fs::read_to_string(&p)?).map_err(CoreError::Map)?,
        None => GridMap::canonical(),
    };
    let seed = common.seed.or(get_parsed(&file, "seed")?).unwrap_or(0);
    let gibbs = GibbsConfig {
        alpha: common.alpha.or(get_parsed(&file, "alpha")?).unwrap_or(0.015),
        beta: common.beta.or(get_parsed(&file, "beta")?).unwrap_or(6.0),
        iterations: common.iters.or(get_parsed(&file, "iters")?).unwrap_or(5000),
        burn_in: common.burnin.or(get_parsed(&file, "burnin")?).unwrap_or(1000),
        seed,
    };
    gibbs.validate()?;
    let models_str = common
        .models
        .clone()
        .or_else(|| file.get("models").cloned());
    let models = match models_str {
        None => default_models.to_vec(),
        Some(s) => s
            .split(',')
            .map(|m| PosteriorSource::parse(m.trim()))
            .collect::<Result<_, _>>()?,
    };
    let output = common
        .output
        .clone()
        .or_else(|| file.get("output").map(PathBuf::from))
        .or_else(|| std::env::var_os(OUTPUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("."));
    Ok(RunConfig {
        map,
        seed,
        gibbs,
        beta_helper: common
            .beta_helper
            .or(get_parsed(&file, "beta_helper")?)
            .unwrap_or(2.0),
        threshold: common
            .threshold
            .or(get_parsed(&file, "threshold")?)
            .unwrap_or(0.5),
        models,
        output,
    })
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>, CoreError> {
    s.split(',')
        .map(|t| {
            t.trim()
                .parse()
                .map_err(|_| CoreError::InvalidConfig(format!("bad {what} '{t}'")))
        })
        .collect()
}

fn cmd_map_validate(path: Option<&Path>) -> Result<(), CoreError> {
    let (text, name) = match path {
        Some(p) => (fs::read_to_string(p)?, p.display().to_string()),
        None => (
            subgoals_core::gridworld::CANONICAL_MAP.to_string(),
            "<canonical>".to_string(),
        ),
    };
    let map = load_map(&text).map_err(CoreError::Map)?;
    println!(
        "{name}: {}x{} grid, {} starts, {} items in {} rows, {} destinations, helper at {}",
        map.width,
        map.height,
        map.starts.len(),
        map.items.len(),
        map.row_count(),
        map.destinations.len(),
        map.helper_start,
    );
    Ok(())
}

fn write_posteriors(
    out_dir: &Path,
    model: PosteriorSource,
    dest: Dest,
    table: &PosteriorTable,
) -> Result<(), CoreError> {
    fs::create_dir_all(out_dir)?;
    let stem = format!("posterior_{}_{}", model.name(), dest);
    let json = serde_json::to_string_pretty(table)?;
    fs::write(out_dir.join(format!("{stem}.json")), json + "\n")?;
    let mut csv_bytes = Vec::new();
    table.write_csv(&mut csv_bytes, model.name(), true)?;
    fs::write(out_dir.join(format!("{stem}.csv")), csv_bytes)?;
    Ok(())
}

fn cmd_infer(args: &InferArgs) -> Result<(), CoreError> {
    let cfg = load_run_config(
        &args.common,
        &[
            PosteriorSource::Crp,
            PosteriorSource::Independent,
            PosteriorSource::Logical,
            PosteriorSource::Copy,
        ],
    )?;
    let text = fs::read_to_string(&args.observations)?;
    let records: Vec<PathRecord> = serde_json::from_str(&text)?;
    if records.is_empty() {
        return Err(CoreError::EmptyObservations);
    }
    let mut groups: BTreeMap<Dest, Vec<StateSequence>> = BTreeMap::new();
    for r in records {
        groups.entry(r.dest).or_default().push(r.states);
    }
    let cache = ValueCache::new();
    for (dest, paths) in &groups {
        for path in paths {
            if !path.is_valid(&cfg.map) {
                return Err(CoreError::InvalidConfig(format!(
                    "observation for {dest} contains an illegal move"
                )));
            }
        }
        for &model in &cfg.models {
            let table = match model {
                PosteriorSource::Crp => {
                    gibbs_infer(&cfg.map, &cache, paths, *dest, &cfg.gibbs)?.posterior
                }
                PosteriorSource::Independent => {
                    independent_model(&cfg.map, &cache, paths, *dest, cfg.gibbs.beta)?
                }
                PosteriorSource::Logical => logical_possibility_model(&cfg.map, paths, *dest)?,
                PosteriorSource::Copy => copy_model(&cfg.map, &cache, paths, *dest, cfg.gibbs.beta)?,
                other => {
                    return Err(CoreError::InvalidConfig(format!(
                        "model {other} is not an inference model"
                    )));
                }
            };
            write_posteriors(&cfg.output, model, *dest, &table)?;
            println!("{} paths to {dest}, model {model}, top sequences:", paths.len());
            for (g, p) in table.ranked().into_iter().take(5) {
                println!("  {g}  {p:.4}");
            }
        }
    }
    Ok(())
}

fn cmd_exp1(args: &Exp1Args) -> Result<(), CoreError> {
    let cfg = load_run_config(
        &args.common,
        &[
            PosteriorSource::Crp,
            PosteriorSource::Independent,
            PosteriorSource::Logical,
            PosteriorSource::Copy,
        ],
    )?;
    let jobs: Vec<Job> = match args.stimulus_seed {
        Some(s) => generate_exp1_stimuli(&cfg.map, s)?,
        None if args.common.map.is_none() => golden_stimuli()?,
        None => generate_exp1_stimuli(&cfg.map, GOLDEN_STIMULI_SEED)?,
    };
    fs::create_dir_all(&cfg.output)?;
    let stimuli_json = serde_json::to_string_pretty(&jobs)?;
    fs::write(cfg.output.join("exp1_stimuli.json"), stimuli_json + "\n")?;

    let rows = run_exp1(&cfg.map, &jobs, &cfg.models, &cfg.gibbs)?;
    let mut csv_bytes = Vec::new();
    experiments::write_predictions_csv(&rows, &mut csv_bytes)?;
    fs::write(cfg.output.join("exp1_predictions.csv"), csv_bytes)?;

    println!("{} jobs, {} prediction rows", jobs.len(), rows.len());
    for job in &jobs {
        let lists: Vec<String> = job.spec.lists.iter().map(|l| l.to_string()).collect();
        let mut tops = Vec::new();
        for &model in &cfg.models {
            let top = rows
                .iter()
                .filter(|r| r.job_id == job.spec.job_id && r.model == model.name())
                .max_by(|a, b| a.probability.partial_cmp(&b.probability).unwrap());
            if let Some(t) = top {
                tops.push(format!("{}={}|{}:{:.2}", t.model, t.items, t.dest, t.probability));
            }
        }
        println!("job {:2} lists [{}]: {}", job.spec.job_id, lists.join(" "), tops.join("  "));
    }

    if let Some(jpath) = &args.judgments {
        let judgments =
            experiments::JudgmentTable::from_csv(fs::File::open(jpath)?)?;
        for &model in &cfg.models {
            match experiments::correlate(&rows, model.name(), &judgments) {
                Ok(r) => println!("Pearson r ({}) = {r:.3}", model.name()),
                Err(e) => println!("Pearson r ({}): {e}", model.name()),
            }
        }
    }
    Ok(())
}

fn cmd_exp2(args: &Exp2Args) -> Result<(), CoreError> {
    let cfg = load_run_config(&args.common, &PosteriorSource::ALL)?;
    let exp = Experiment2Config {
        settings: parse_list(&args.settings, "setting")?,
        n_structures: args.structures,
        repeats: args.repeats,
        n_observations: parse_list(&args.n_observations, "observation count")?,
        models: cfg.models.clone(),
        threshold: cfg.threshold,
        beta_helper: cfg.beta_helper,
        gibbs: cfg.gibbs,
        trials: args.trials,
        seed: cfg.seed,
        log_events: args.log_events,
    };
    let rows = collab::run_experiment2(&cfg.map, &exp)?;
    fs::create_dir_all(&cfg.output)?;
    let mut csv_bytes = Vec::new();
    collab::write_exp2_csv(&rows, &mut csv_bytes)?;
    fs::write(cfg.output.join("exp2_report.csv"), csv_bytes)?;

    // Summary: mean score per (setting, model, n) across structures.
    println!("setting  model         n  mean_score  mean_variance");
    for &setting in &exp.settings {
        for &model in &exp.models {
            for &n in &exp.n_observations {
                let sel: Vec<_> = rows
                    .iter()
                    .filter(|r| {
                        r.setting == setting && r.model == model.name() && r.n_observations == n
                    })
                    .collect();
                if sel.is_empty() {
                    continue;
                }
                let mean = sel.iter().map(|r| r.mean_score).sum::<f64>() / sel.len() as f64;
                let var = sel.iter().map(|r| r.variance).sum::<f64>() / sel.len() as f64;
                println!("{setting:7}  {:12}  {n}  {mean:10.2}  {var:13.4}", model.name());
            }
        }
    }
    Ok(())
}

fn exit_code_for(err: &CoreError) -> ExitCode {
    match err {
        CoreError::Map(_)
        | CoreError::Json(_)
        | CoreError::Csv(_)
        | CoreError::InvalidConfig(_)
        | CoreError::InvalidSequence(_)
        | CoreError::EmptyObservations => ExitCode::from(2),
        _ => ExitCode::from(1),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Map { command } => match command {
            MapCommand::Validate { path } => cmd_map_validate(path.as_deref()),
        },
        Command::Infer(args) => cmd_infer(args),
        Command::Exp1(args) => cmd_exp1(args),
        Command::Exp2(args) => cmd_exp2(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code_for(&e)
        }
    }
}
