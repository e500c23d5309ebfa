//! Command-line front end: `simulate`, `generate-traces`, `recommend`, `convert-ml100k`.
//!
//! Exit codes: 0 on success, 1 for invalid input or configuration, 2 for failures while running.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exchange::{CspSettings, ExchangePolicy};
use crate::ingestion::{
    convert_ml100k_file, generate_trace, load_snapshot, save_records, save_trace, TraceGenParams,
};
use crate::model::{LocalStore, Ontology, RatingScale, SimTime, UserId};
use crate::recommender::{group_recommend, top_n, GroupStrategy, RecommendError};
use crate::similarity::SimilarityConfig;
use crate::simulator::{MetricsRow, SimConfig, SimSettings, Simulation, TraceSource};

pub const LOG_ENV: &str = "PROXREC_LOG";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

fn validation(e: impl std::fmt::Display) -> CliError {
    CliError::Validation(e.to_string())
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

#[derive(Debug, Parser)]
#[command(
    name = "proxrec",
    version,
    about = "Proximity-driven decentralized recommender simulator"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run a simulation described by an experiment file.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the simulation seed from the file.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Sample a synthetic contact trace.
    GenerateTraces(GenerateArgs),
    /// Rank items for a user or a group from a store snapshot.
    Recommend(RecommendArgs),
    /// Convert MovieLens 100k `u.data` into a ratings CSV.
    #[command(name = "convert-ml100k")]
    ConvertMl100k {
        input: PathBuf,
        output: PathBuf,
        /// Keep only users with an id up to this value.
        #[arg(long)]
        max_user: Option<u64>,
    },
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub nodes: u64,
    #[arg(long)]
    pub hours: f64,
    /// Expected contacts per pair per hour.
    #[arg(long)]
    pub rate: f64,
    #[arg(long, default_value_t = 1.0)]
    pub heterogeneity: f64,
    #[arg(long, default_value_t = 1)]
    pub communities: u64,
    /// Mean contact duration in seconds.
    #[arg(long, default_value_t = 300.0)]
    pub mean_duration: f64,
    #[arg(long, default_value_t = 1)]
    pub first_id: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RecommendArgs {
    /// Store snapshot CSV.
    #[arg(long)]
    pub store: PathBuf,
    #[arg(long, conflicts_with = "group", required_unless_present = "group")]
    pub user: Option<u64>,
    /// Comma-separated member ids.
    #[arg(long, value_delimiter = ',')]
    pub group: Option<Vec<u64>>,
    #[arg(long, default_value_t = 10)]
    pub n: usize,
    #[arg(long, default_value = "average")]
    pub strategy: GroupStrategy,
    /// Experiment file supplying similarity settings, k, rating scale and ontology.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

impl clap::ValueEnum for GroupStrategy {
    fn value_variants<'a>() -> &'a [Self] {
        &[
            GroupStrategy::Average,
            GroupStrategy::LeastMisery,
            GroupStrategy::MostPleasure,
        ]
    }

    fn to_possible_value(&self) -> Option<clap::builder::PossibleValue> {
        Some(clap::builder::PossibleValue::new(match self {
            GroupStrategy::Average => "average",
            GroupStrategy::LeastMisery => "least_misery",
            GroupStrategy::MostPleasure => "most_pleasure",
        }))
    }
}

fn default_k() -> usize {
    20
}

fn default_holdout() -> f64 {
    0.1
}

/// Experiment file (TOML). Relative paths resolve against the file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentFile {
    pub ratings_path: PathBuf,
    #[serde(default)]
    pub trace_path: Option<PathBuf>,
    #[serde(default)]
    pub trace_gen: Option<TraceGenParams>,
    #[serde(default)]
    pub catalog_path: Option<PathBuf>,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub write_snapshots: bool,
    pub horizon: SimTime,
    pub metric_period: SimTime,
    #[serde(default = "default_k")]
    pub k_neighbors: usize,
    #[serde(default = "default_holdout")]
    pub holdout_fraction: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub ontology: Ontology,
    #[serde(default)]
    pub rating_scale: RatingScale,
    pub exchange: ExchangePolicy,
    #[serde(default)]
    pub csp: CspSettings,
    #[serde(default)]
    pub similarity: SimilarityConfig<f64>,
}

impl ExperimentFile {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text =
            fs::read_to_string(path).map_err(|e| validation(format!("{}: {e}", path.display())))?;
        let mut file: ExperimentFile =
            toml::from_str(&text).map_err(|e| validation(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut file.ratings_path);
        resolve(&mut file.output_dir);
        if let Some(p) = file.trace_path.as_mut() {
            resolve(p);
        }
        if let Some(p) = file.catalog_path.as_mut() {
            resolve(p);
        }
        Ok(file)
    }

    pub fn sim_config(&self) -> Result<SimConfig, CliError> {
        let trace = match (&self.trace_path, &self.trace_gen) {
            (Some(p), None) => TraceSource::File(p.clone()),
            (None, Some(g)) => TraceSource::Generate(g.clone()),
            _ => {
                return Err(validation(
                    "exactly one of `trace_path` and `trace_gen` must be set",
                ))
            }
        };
        Ok(SimConfig {
            ratings_path: self.ratings_path.clone(),
            trace,
            catalog_path: self.catalog_path.clone(),
            ontology: self.ontology.clone(),
            settings: SimSettings {
                exchange: self.exchange.clone(),
                csp: self.csp,
                similarity: self.similarity.clone(),
                k_neighbors: self.k_neighbors,
                horizon: self.horizon,
                metric_period: self.metric_period,
                holdout_fraction: self.holdout_fraction,
                seed: self.seed,
                rating_scale: self.rating_scale,
            },
        })
    }
}

#[derive(Debug, Serialize)]
struct Summary<'a> {
    seed: u64,
    config: &'a SimConfig,
    nodes: usize,
    total_records: usize,
    holdout_pairs: usize,
    #[serde(rename = "final")]
    final_row: Option<&'a MetricsRow>,
}

/// Runs an experiment file and writes `metrics.csv`, `summary.json` and optional snapshots.
/// Returns the output directory.
pub fn cmd_simulate(config: &Path, seed: Option<u64>) -> Result<PathBuf, CliError> {
    let file = ExperimentFile::load(config)?;
    let mut sim_config = file.sim_config()?;
    if let Some(s) = seed {
        sim_config.settings.seed = s;
    }
    let inputs = sim_config.load_inputs().map_err(validation)?;
    let sim = Simulation::new(sim_config.settings.clone(), inputs).map_err(validation)?;
    let outcome = sim.run().map_err(runtime)?;

    let out = &file.output_dir;
    fs::create_dir_all(out).map_err(|e| runtime(format!("{}: {e}", out.display())))?;
    let metrics_path = out.join("metrics.csv");
    let mut f = fs::File::create(&metrics_path)
        .map_err(|e| runtime(format!("{}: {e}", metrics_path.display())))?;
    outcome.log.write_csv(&mut f).map_err(runtime)?;

    let summary = Summary {
        seed: sim_config.settings.seed,
        config: &sim_config,
        nodes: outcome.stores.len(),
        total_records: outcome.total_records,
        holdout_pairs: outcome.holdout.len(),
        final_row: outcome.log.last(),
    };
    let json = serde_json::to_string_pretty(&summary).map_err(runtime)?;
    fs::write(out.join("summary.json"), json + "\n").map_err(runtime)?;

    if file.write_snapshots {
        let dir = out.join("stores");
        fs::create_dir_all(&dir).map_err(runtime)?;
        for (id, store) in &outcome.stores {
            save_records(
                &dir.join(format!("node_{id}.csv")),
                store.records(),
                &sim_config.ontology,
            )
            .map_err(runtime)?;
        }
    }
    Ok(out.clone())
}

pub fn cmd_generate_traces(args: &GenerateArgs) -> Result<usize, CliError> {
    if !(args.hours.is_finite() && args.hours > 0.0) {
        return Err(validation("--hours must be > 0"));
    }
    let params = TraceGenParams {
        n_nodes: args.nodes,
        horizon: (args.hours * 3600.0).round() as SimTime,
        mean_rate: args.rate,
        rate_heterogeneity: args.heterogeneity,
        n_communities: args.communities,
        mean_duration: args.mean_duration,
        seed: args.seed,
        first_id: args.first_id,
    };
    let events = generate_trace(&params).map_err(validation)?;
    save_trace(&args.out, &events).map_err(runtime)?;
    Ok(events.len())
}

/// Owner id for stores loaded from snapshots; it never rates anything, so every record merges.
pub const OBSERVER: UserId = UserId(u64::MAX);

/// Writes the ranking for a user or group to `out`.
pub fn cmd_recommend<W: Write>(args: &RecommendArgs, mut out: W) -> Result<(), CliError> {
    let (ontology, scale, similarity, k) = match &args.config {
        Some(p) => {
            let f = ExperimentFile::load(p)?;
            (f.ontology, f.rating_scale, f.similarity, f.k_neighbors)
        }
        None => (
            Ontology::default(),
            RatingScale::default(),
            SimilarityConfig::default(),
            default_k(),
        ),
    };
    similarity.validate().map_err(validation)?;
    let records = load_snapshot(&args.store, &ontology, &scale).map_err(validation)?;
    let mut store = LocalStore::new(OBSERVER, scale);
    for r in records {
        store.merge_record(r).map_err(validation)?;
    }
    let name = |item: &crate::model::ItemId| {
        format!(
            "{}/{}",
            ontology.name(item.category).unwrap_or("?"),
            item.key()
        )
    };
    let io = |e: std::io::Error| runtime(e);

    if let Some(group) = &args.group {
        let members: Vec<UserId> = group.iter().copied().map(UserId).collect();
        let ranked = group_recommend(&members, args.n, &store, &similarity, k, args.strategy)
            .map_err(|e| match e {
                RecommendError::UnknownMembers(m) => validation(format!(
                    "unknown group members: {}",
                    m.iter()
                        .map(|u| u.to_string())
                        .collect::<Vec<_>>()
                        .join(",")
                )),
                other => validation(other),
            })?;
        writeln!(out, "rank\titem\tscore\tmember_scores").map_err(io)?;
        for (rank, g) in ranked.iter().enumerate() {
            let members: Vec<String> = g
                .members
                .iter()
                .map(|p| format!("{:.4}({})", p.score, p.basis))
                .collect();
            writeln!(
                out,
                "{}\t{}\t{:.6}\t{}",
                rank + 1,
                name(&g.item),
                g.score,
                members.join(" ")
            )
            .map_err(io)?;
        }
    } else {
        let user = UserId(args.user.expect("clap requires --user without --group"));
        let ranked = top_n(user, args.n, &store, &similarity, k, None).map_err(|e| match e {
            RecommendError::ColdUser(u) => validation(format!("unknown user {u}")),
            other => validation(other),
        })?;
        writeln!(out, "rank\titem\tscore\tbasis").map_err(io)?;
        for (rank, p) in ranked.iter().enumerate() {
            writeln!(
                out,
                "{}\t{}\t{:.6}\t{}",
                rank + 1,
                name(&p.item),
                p.score,
                p.basis
            )
            .map_err(io)?;
        }
    }
    Ok(())
}

pub fn cmd_convert_ml100k(
    input: &Path,
    output: &Path,
    max_user: Option<u64>,
) -> Result<usize, CliError> {
    convert_ml100k_file(input, output, max_user).map_err(validation)
}

/// Dispatches a parsed command line. Output of `recommend` goes to stdout.
pub fn execute(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Simulate { config, seed } => {
            let out = cmd_simulate(&config, seed)?;
            println!("wrote {}", out.join("metrics.csv").display());
        }
        Command::GenerateTraces(args) => {
            let n = cmd_generate_traces(&args)?;
            println!("wrote {n} encounters to {}", args.out.display());
        }
        Command::Recommend(args) => {
            let stdout = std::io::stdout();
            cmd_recommend(&args, stdout.lock())?;
        }
        Command::ConvertMl100k {
            input,
            output,
            max_user,
        } => {
            let n = cmd_convert_ml100k(&input, &output, max_user)?;
            println!("wrote {n} ratings to {}", output.display());
        }
    }
    Ok(())
}
