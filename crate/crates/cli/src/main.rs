//! `uav-aoi`: train, evaluate and sweep multi-UAV AoI schedulers.
//!
//! Exit codes: 0 success, 1 configuration error, 2 runtime failure,
//! 3 acceptance-check failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};

use aoi_core::harness::{
    self, output_root, read_metrics, render_summary, rerun_cell, run_experiment, summarize, train_or_load,
    CellSpec, ExperimentSpec, HarnessError, Method, Sweep, SweepMode,
};
use aoi_core::qmix::execute;
use aoi_core::rng::indexed_stream;
use aoi_core::decpomdp::MaskMode;
use aoi_core::world::World;

#[derive(Parser)]
#[command(name = "uav-aoi", version, about = "Multi-UAV age-of-information scheduling experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the learned methods for every seed and cache the models.
    Train(SpecArgs),
    /// Evaluate every method and write metrics; `--cell` re-runs one cell.
    Eval {
        #[command(flatten)]
        spec: SpecArgs,
        /// Re-run a single cell from its cell.json and print its metrics row.
        #[arg(long)]
        cell: Option<PathBuf>,
    },
    /// Run a sweep campaign (requires --sweep-param and --sweep-values or a
    /// [sweep] table in the config).
    Sweep(SpecArgs),
    /// Write the trajectory trace of one evaluation episode.
    Trace {
        #[command(flatten)]
        spec: SpecArgs,
        #[arg(long, default_value = "qmix")]
        method: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Evaluation episode index.
        #[arg(long, default_value_t = 0)]
        episode: u64,
        /// Output CSV (stdout when omitted).
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Median/IQR and ordering per sweep value from a metrics.csv.
    Summarize {
        metrics: PathBuf,
        /// Exit with code 3 unless this method has the lowest median at every
        /// sweep value.
        #[arg(long)]
        expect_first: Option<String>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Profile {
    Desk,
    Paper,
}

#[derive(Args, Clone)]
struct SpecArgs {
    /// Base profile that the config file and flags override.
    #[arg(long, value_enum, default_value = "desk")]
    profile: Profile,
    /// TOML experiment file (keys override the profile).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, env = "UAV_AOI_OUTPUT")]
    out: Option<PathBuf>,
    #[arg(long)]
    name: Option<String>,
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<String>>,
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Training episodes per learned model.
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long)]
    eval_episodes: Option<usize>,
    #[arg(long)]
    sweep_param: Option<String>,
    #[arg(long, value_delimiter = ',')]
    sweep_values: Option<Vec<f64>>,
    #[arg(long)]
    eval_only: bool,
    /// Retrain even when a matching cached model exists.
    #[arg(long)]
    no_reuse: bool,
    #[arg(long)]
    no_traces: bool,
    /// Directory of trained models shared between campaigns.
    #[arg(long)]
    model_cache: Option<PathBuf>,
    /// Print the resolved experiment as TOML and exit.
    #[arg(long)]
    dump_config: bool,
}

enum Failure {
    Config(anyhow::Error),
    Runtime(anyhow::Error),
    Acceptance(String),
}

impl From<HarnessError> for Failure {
    fn from(e: HarnessError) -> Self {
        if e.is_config() {
            Failure::Config(e.into())
        } else {
            Failure::Runtime(e.into())
        }
    }
}

fn config_err(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Config(e.into())
}

impl SpecArgs {
    fn resolve(&self) -> Result<(ExperimentSpec, PathBuf), Failure> {
        let mut spec = match self.profile {
            Profile::Desk => ExperimentSpec::desk(),
            Profile::Paper => ExperimentSpec::paper(),
        };
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))
                .map_err(config_err)?;
            spec = spec.overlay_toml(&text)?;
        }
        if let Some(name) = &self.name {
            spec.name = name.clone();
        }
        if let Some(methods) = &self.methods {
            spec.methods = methods
                .iter()
                .map(|m| Method::parse(m).ok_or_else(|| config_err(anyhow::anyhow!("unknown method {m}"))))
                .collect::<Result<_, _>>()?;
        }
        if let Some(seeds) = &self.seeds {
            spec.seeds = seeds.clone();
        }
        if let Some(e) = self.episodes {
            spec.learner.episodes = e;
        }
        if let Some(e) = self.eval_episodes {
            spec.eval_episodes = e;
        }
        match (&self.sweep_param, &self.sweep_values) {
            (Some(p), Some(v)) => {
                spec.sweep = Some(Sweep {
                    parameter: p.clone(),
                    values: v.clone(),
                    mode: SweepMode::Retrain,
                })
            }
            (None, None) => {}
            _ => return Err(config_err(anyhow::anyhow!("--sweep-param and --sweep-values go together"))),
        }
        if self.eval_only {
            match &mut spec.sweep {
                Some(s) => s.mode = SweepMode::EvalOnly,
                None => return Err(config_err(anyhow::anyhow!("--eval-only needs a sweep"))),
            }
        }
        if self.no_reuse {
            spec.reuse_models = false;
        }
        if self.no_traces {
            spec.traces = false;
        }
        if let Some(dir) = &self.model_cache {
            spec.model_cache = Some(dir.clone());
        }
        let out = self
            .out
            .clone()
            .unwrap_or_else(|| output_root().join(&spec.name));
        Ok((spec, out))
    }
}

fn report(result: &harness::CampaignResult, out: &Path) -> Result<(), Failure> {
    println!("{}", render_summary(&summarize(&result.rows())));
    println!("metrics written to {}", out.join("metrics.csv").display());
    if result.failures.is_empty() {
        Ok(())
    } else {
        for (cell, e) in &result.failures {
            eprintln!("cell {} failed: {e}", cell.dir_name());
        }
        Err(Failure::Runtime(anyhow::anyhow!("{} cell(s) failed", result.failures.len())))
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Train(args) => {
            let (mut spec, out) = args.resolve()?;
            if args.dump_config {
                print!("{}", spec.to_toml()?);
                return Ok(());
            }
            spec.methods.retain(|m| m.algorithm().is_some());
            spec.sweep = None;
            spec.validate()?;
            let models = spec.models_dir(&out);
            for cell in harness::cells(&spec)? {
                let trained = train_or_load(&cell, Some(&models), spec.reuse_models)?
                    .expect("learned method");
                let last = trained.curve.last().map_or(f64::NAN, |p| p.cumulative_cost);
                println!(
                    "{} seed {}: {} (final episode cost {last:.1})",
                    cell.method.name(),
                    cell.seed,
                    if trained.from_cache { "cached" } else { "trained" }
                );
            }
            Ok(())
        }
        Command::Eval { spec: args, cell } => {
            if let Some(cell) = cell {
                let row = rerun_cell(&cell)?;
                println!("{}", serde_json::to_string(&row).map_err(|e| Failure::Runtime(e.into()))?);
                return Ok(());
            }
            let (mut spec, out) = args.resolve()?;
            spec.sweep = None;
            if args.dump_config {
                print!("{}", spec.to_toml()?);
                return Ok(());
            }
            let result = run_experiment(&spec, &out)?;
            report(&result, &out)
        }
        Command::Sweep(args) => {
            let (spec, out) = args.resolve()?;
            if args.dump_config {
                print!("{}", spec.to_toml()?);
                return Ok(());
            }
            if spec.sweep.is_none() {
                return Err(config_err(anyhow::anyhow!("sweep needs --sweep-param/--sweep-values or a [sweep] table")));
            }
            let result = run_experiment(&spec, &out)?;
            report(&result, &out)
        }
        Command::Trace {
            spec: args,
            method,
            seed,
            episode,
            output,
        } => {
            let (spec, out) = args.resolve()?;
            let method = Method::parse(&method).ok_or_else(|| config_err(anyhow::anyhow!("unknown method {method}")))?;
            let cell = CellSpec {
                method,
                seed,
                sweep_parameter: None,
                sweep_value: None,
                train_world: spec.world.clone(),
                eval_world: spec.world.clone(),
                learner: spec.learner.clone(),
                eval_episodes: episode as usize + 1,
            };
            let world = World::new(spec.world.clone()).map_err(HarnessError::from)?;
            let record = match train_or_load(&cell, Some(&spec.models_dir(&out)), spec.reuse_models)? {
                Some(t) => execute(&t.model, &world, indexed_stream(seed, "env-eval", episode), MaskMode::Masked)
                    .map_err(HarnessError::from)?,
                None => harness::evaluate(&cell, None)?.pop().expect("requested episode"),
            };
            let sink: Box<dyn std::io::Write> = match &output {
                Some(p) => Box::new(
                    std::fs::File::create(p)
                        .with_context(|| format!("creating {}", p.display()))
                        .map_err(Failure::Runtime)?,
                ),
                None => Box::new(std::io::stdout()),
            };
            record.write_trace_csv(sink).map_err(|e| Failure::Runtime(e.into()))?;
            Ok(())
        }
        Command::Summarize { metrics, expect_first } => {
            let rows = read_metrics(&metrics)?;
            if rows.is_empty() {
                return Err(config_err(anyhow::anyhow!("{} has no rows", metrics.display())));
            }
            let summaries = summarize(&rows);
            print!("{}", render_summary(&summaries));
            if let Some(expected) = expect_first {
                for s in &summaries {
                    if s.ordering.first() != Some(&expected) {
                        return Err(Failure::Acceptance(format!(
                            "{expected} is not first at sweep value '{}' (ordering {})",
                            s.sweep_value,
                            s.ordering.join(" < ")
                        )));
                    }
                }
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("configuration error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Acceptance(msg)) => {
            eprintln!("acceptance check failed: {msg}");
            ExitCode::from(3)
        }
    }
}
