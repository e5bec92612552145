//! Seeded experiment campaigns: sweeps, training, evaluation, artifacts
//! and summaries.
//!
//! Layout of an output directory:
//!
//! ```text
//! metrics.csv                 one row per (method, sweep value, seed)
//! timings.csv                 wall-clock seconds per cell
//! models/<key>/checkpoint.json, curve.csv   (or under `model_cache`)
//! cells/<method>_<value>_<seed>/cell.json, trace.csv
//! ```
//!
//! Wall-clock time lives in its own file so `metrics.csv` stays
//! byte-for-byte reproducible.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::baselines::{ClusterError, ClusterPolicy};
use crate::decpomdp::{run_episode, ActionSpace, EpisodeError, EpisodeRecord, MaskMode, RandomPolicy};
use crate::qmix::{execute, Algorithm, Checkpoint, CurvePoint, LearnError, LearnerConfig, Model, Trainer};
use crate::rng::{indexed_stream, stream};
use crate::world::{ConfigError, PerSn, World, WorldConfig};

pub const METRICS_SCHEMA: &str = "# schema: uav-aoi metrics v1";
pub const CURVE_SCHEMA: &str = "# schema: uav-aoi training-curve v1";
pub const TIMINGS_SCHEMA: &str = "# schema: uav-aoi timings v1";

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("invalid experiment: {0}")]
    Spec(String),
    #[error(transparent)]
    Learn(#[from] LearnError),
    #[error(transparent)]
    Episode(#[from] EpisodeError),
    #[error(transparent)]
    Cluster(#[from] ClusterError),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Toml(#[from] toml::de::Error),
}

impl HarnessError {
    /// True for problems with the inputs rather than the run itself.
    pub fn is_config(&self) -> bool {
        matches!(self, HarnessError::Config(_) | HarnessError::Spec(_) | HarnessError::Toml(_))
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Qmix,
    Idqn,
    Nearest,
    Cluster,
    Random,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::Qmix, Method::Idqn, Method::Nearest, Method::Cluster, Method::Random];

    pub fn name(self) -> &'static str {
        match self {
            Method::Qmix => "qmix",
            Method::Idqn => "idqn",
            Method::Nearest => "nearest",
            Method::Cluster => "cluster",
            Method::Random => "random",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s)
    }

    pub fn algorithm(self) -> Option<Algorithm> {
        match self {
            Method::Qmix => Some(Algorithm::Qmix),
            Method::Idqn => Some(Algorithm::Idqn),
            Method::Nearest => Some(Algorithm::Nearest),
            Method::Cluster | Method::Random => None,
        }
    }
}

/// Parameters a sweep can vary.
pub const SWEEP_PARAMETERS: [&str; 6] = ["M", "N", "xi_th_db", "E_max", "lambda_n", "T"];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepMode {
    /// Train a model at every sweep value.
    #[default]
    Retrain,
    /// Train once on the base world and evaluate at every value.
    EvalOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sweep {
    pub parameter: String,
    pub values: Vec<f64>,
    #[serde(default)]
    pub mode: SweepMode,
}

/// Applies one sweep value to a world config.
pub fn apply_sweep(base: &WorldConfig, parameter: &str, value: f64) -> Result<WorldConfig, HarnessError> {
    let mut cfg = base.clone();
    let count = |v: f64| -> Result<usize, HarnessError> {
        if v >= 1.0 && v.fract() == 0.0 {
            Ok(v as usize)
        } else {
            Err(HarnessError::Spec(format!("{parameter} needs a positive integer, got {v}")))
        }
    };
    match parameter {
        "M" => cfg.num_uavs = count(value)?,
        "N" => cfg.num_sns = count(value)?,
        "T" => cfg.horizon = count(value)? as u32,
        "xi_th_db" => cfg.xi_th_db = value,
        "E_max" => cfg.e_max = value,
        "lambda_n" => cfg.lambda_n = PerSn::Uniform(value),
        other => {
            return Err(HarnessError::Spec(format!(
                "unknown sweep parameter {other}; expected one of {SWEEP_PARAMETERS:?}"
            )))
        }
    }
    Ok(cfg)
}

/// A full campaign description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    #[serde(default = "default_name")]
    pub name: String,
    pub world: WorldConfig,
    pub learner: LearnerConfig,
    pub methods: Vec<Method>,
    #[serde(default)]
    pub sweep: Option<Sweep>,
    pub seeds: Vec<u64>,
    pub eval_episodes: usize,
    /// Reuse trained models found in the output directory when their
    /// configuration hash matches.
    #[serde(default = "default_true")]
    pub reuse_models: bool,
    /// Write a trajectory trace of the first evaluation episode per cell.
    #[serde(default = "default_true")]
    pub traces: bool,
    /// Directory of trained models shared between campaigns; defaults to
    /// `<output>/models`.
    #[serde(default)]
    pub model_cache: Option<PathBuf>,
}

fn default_name() -> String {
    "campaign".into()
}
fn default_true() -> bool {
    true
}

impl ExperimentSpec {
    /// CPU-scale profile: N=10, M=2, T=60, 3000 training episodes,
    /// 50 evaluation episodes, 5 seeds.
    pub fn desk() -> Self {
        Self {
            name: "desk".into(),
            world: WorldConfig::desk(),
            learner: LearnerConfig::desk(),
            methods: vec![Method::Qmix, Method::Idqn, Method::Nearest, Method::Cluster],
            sweep: None,
            seeds: (0..5).collect(),
            eval_episodes: 50,
            reuse_models: true,
            traces: true,
            model_cache: None,
        }
    }

    /// Full-size settings (N=15, M=3, T=100, 50000 episodes).
    pub fn paper() -> Self {
        Self {
            name: "paper".into(),
            world: WorldConfig::default(),
            learner: LearnerConfig::default(),
            eval_episodes: 100,
            ..Self::desk()
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        Ok(toml::from_str(text)?)
    }

    /// Reads a TOML file whose keys override `self`; tables merge
    /// recursively, everything else is replaced.
    pub fn overlay_toml(&self, text: &str) -> Result<Self, HarnessError> {
        let mut base = toml::Value::try_from(self).map_err(|e| HarnessError::Spec(e.to_string()))?;
        let overlay: toml::Value = toml::from_str(text)?;
        merge_toml(&mut base, overlay);
        Ok(base.try_into()?)
    }

    pub fn to_toml(&self) -> Result<String, HarnessError> {
        toml::to_string_pretty(self).map_err(|e| HarnessError::Spec(e.to_string()))
    }

    pub fn models_dir(&self, out: &Path) -> PathBuf {
        self.model_cache.clone().unwrap_or_else(|| out.join("models"))
    }

    pub fn sweep_points(&self) -> Vec<Option<f64>> {
        match &self.sweep {
            None => vec![None],
            Some(s) => s.values.iter().map(|&v| Some(v)).collect(),
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.methods.is_empty() {
            return Err(HarnessError::Spec("no methods".into()));
        }
        if self.seeds.is_empty() {
            return Err(HarnessError::Spec("no seeds".into()));
        }
        if self.eval_episodes == 0 {
            return Err(HarnessError::Spec("eval_episodes must be positive".into()));
        }
        if self.seeds.len() < 3 {
            log::warn!("fewer than 3 seeds; comparisons will not be meaningful");
        }
        if let Some(s) = &self.sweep {
            if s.values.is_empty() {
                return Err(HarnessError::Spec("sweep without values".into()));
            }
            for &v in &s.values {
                World::new(apply_sweep(&self.world, &s.parameter, v)?)?;
            }
            if s.mode == SweepMode::EvalOnly && !matches!(s.parameter.as_str(), "xi_th_db" | "lambda_n" | "E_max") {
                return Err(HarnessError::Spec(format!(
                    "{} changes network shapes; it cannot be swept evaluation-only",
                    s.parameter
                )));
            }
        } else {
            World::new(self.world.clone())?;
        }
        Ok(())
    }
}

fn merge_toml(base: &mut toml::Value, overlay: toml::Value) {
    match (base, overlay) {
        // Tagged layouts replace the whole table so stale variant fields vanish.
        (toml::Value::Table(b), toml::Value::Table(o)) if !o.contains_key("layout") => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge_toml(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// SHA-256 over the canonical JSON of a value.
pub fn config_hash<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_vec(value).expect("serializable config");
    hex::encode(Sha256::digest(json))
}

/// Everything needed to reproduce one metrics row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellSpec {
    pub method: Method,
    pub seed: u64,
    pub sweep_parameter: Option<String>,
    pub sweep_value: Option<f64>,
    /// World the model is trained in.
    pub train_world: WorldConfig,
    /// World the model is evaluated in.
    pub eval_world: WorldConfig,
    pub learner: LearnerConfig,
    pub eval_episodes: usize,
}

impl CellSpec {
    pub fn hash(&self) -> String {
        config_hash(self)
    }

    /// Key of the trained model this cell needs, if any.
    pub fn model_key(&self) -> Option<String> {
        self.method.algorithm().map(|a| {
            let h = config_hash(&(a, self.seed, &self.train_world, &self.learner));
            format!("{}_{}_{}", a.name(), self.seed, &h[..16])
        })
    }

    pub fn dir_name(&self) -> String {
        let value = self.sweep_value.map_or("base".to_string(), |v| format!("{v}"));
        format!("{}_{}_{}", self.method.name(), value, self.seed)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub algorithm: String,
    pub sweep_parameter: String,
    pub sweep_value: String,
    pub seed: u64,
    pub total_average_aoi: f64,
    pub collision_count: usize,
    pub mean_residual_energy: f64,
    pub config_hash: String,
}

/// A trained model together with its training curve.
#[derive(Clone, Debug)]
pub struct TrainedModel {
    pub model: Model,
    pub curve: Vec<CurvePoint>,
    pub from_cache: bool,
}

pub fn write_curve(path: &Path, curve: &[CurvePoint], meta: &str) -> Result<(), HarnessError> {
    let mut file = fs::File::create(path).map_err(io_err(path))?;
    writeln!(file, "{CURVE_SCHEMA}").map_err(io_err(path))?;
    writeln!(file, "# {meta}").map_err(io_err(path))?;
    let mut w = csv::Writer::from_writer(file);
    for p in curve {
        w.serialize(p)?;
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}

pub fn read_curve(path: &Path) -> Result<Vec<CurvePoint>, HarnessError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let body: String = text.lines().filter(|l| !l.starts_with('#')).collect::<Vec<_>>().join("\n");
    let mut r = csv::Reader::from_reader(body.as_bytes());
    Ok(r.deserialize().collect::<Result<Vec<CurvePoint>, _>>()?)
}

/// Trains the model a cell needs, or loads it from `models_dir` when a
/// checkpoint with the same configuration already exists there.
pub fn train_or_load(
    cell: &CellSpec,
    models_dir: Option<&Path>,
    reuse: bool,
) -> Result<Option<TrainedModel>, HarnessError> {
    let (Some(algorithm), Some(key)) = (cell.method.algorithm(), cell.model_key()) else {
        return Ok(None);
    };
    let dir = models_dir.map(|d| d.join(&key));
    if let (Some(dir), true) = (&dir, reuse) {
        let ck_path = dir.join("checkpoint.json");
        let curve_path = dir.join("curve.csv");
        if ck_path.exists() && curve_path.exists() {
            let ck = Checkpoint::load(&ck_path)?;
            if ck.config_hash == key && ck.episode == cell.learner.episodes {
                log::info!("reusing trained model {key}");
                return Ok(Some(TrainedModel {
                    model: ck.model,
                    curve: read_curve(&curve_path)?,
                    from_cache: true,
                }));
            }
        }
    }
    let world = World::new(cell.train_world.clone())?;
    let mut trainer = Trainer::new(algorithm, &world, cell.learner.clone(), cell.seed);
    log::info!("training {key} for {} episodes", cell.learner.episodes);
    trainer.train()?;
    if let Some(dir) = &dir {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        trainer.checkpoint(&key).save(&dir.join("checkpoint.json"))?;
        write_curve(
            &dir.join("curve.csv"),
            &trainer.curve,
            &format!("model {key} seed {}", cell.seed),
        )?;
    }
    Ok(Some(TrainedModel {
        model: trainer.model,
        curve: trainer.curve,
        from_cache: false,
    }))
}

/// Greedy evaluation episodes of one cell. Environment streams depend only
/// on the seed and episode index, so methods are compared on paired draws.
pub fn evaluate(
    cell: &CellSpec,
    model: Option<&Model>,
) -> Result<Vec<EpisodeRecord>, HarnessError> {
    let world = World::new(cell.eval_world.clone())?;
    let mut out = Vec::with_capacity(cell.eval_episodes);
    let mut cluster = match cell.method {
        Method::Cluster => Some(ClusterPolicy::new(&world, true)?),
        _ => None,
    };
    let mut random = RandomPolicy {
        rng: stream(cell.seed, "random-policy"),
        space: ActionSpace::new(&world, true),
    };
    for i in 0..cell.eval_episodes {
        let env = indexed_stream(cell.seed, "env-eval", i as u64);
        let rec = match cell.method {
            Method::Cluster => run_episode(&world, cluster.as_mut().expect("cluster policy"), env, MaskMode::Masked)?,
            Method::Random => run_episode(&world, &mut random, env, MaskMode::Masked)?,
            _ => execute(model.expect("trained model"), &world, env, MaskMode::Masked)?,
        };
        out.push(rec);
    }
    Ok(out)
}

pub fn metrics_row(cell: &CellSpec, episodes: &[EpisodeRecord], world: &World) -> MetricsRow {
    MetricsRow {
        algorithm: cell.method.name().to_string(),
        sweep_parameter: cell.sweep_parameter.clone().unwrap_or_default(),
        sweep_value: cell.sweep_value.map_or(String::new(), |v| format!("{v}")),
        seed: cell.seed,
        total_average_aoi: crate::decpomdp::objective(episodes),
        collision_count: episodes.iter().filter(|e| e.collided()).count(),
        mean_residual_energy: episodes.iter().map(|e| e.residual_energy(world)).sum::<f64>()
            / episodes.len() as f64,
        config_hash: cell.hash(),
    }
}

/// Result of one cell.
#[derive(Clone, Debug)]
pub struct CellResult {
    pub cell: CellSpec,
    pub row: MetricsRow,
    pub curve: Option<Vec<CurvePoint>>,
    pub wall_time: f64,
}

/// Trains (or loads from `models`) and evaluates one cell, writing its
/// artifacts under `out` when given.
pub fn run_cell(
    cell: &CellSpec,
    out: Option<&Path>,
    models: Option<&Path>,
    reuse: bool,
    trace: bool,
) -> Result<CellResult, HarnessError> {
    let start = Instant::now();
    let trained = train_or_load(cell, models, reuse)?;
    let episodes = evaluate(cell, trained.as_ref().map(|t| &t.model))?;
    let world = World::new(cell.eval_world.clone())?;
    let row = metrics_row(cell, &episodes, &world);
    if let Some(out) = out {
        let dir = out.join("cells").join(cell.dir_name());
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let meta = dir.join("cell.json");
        fs::write(&meta, serde_json::to_string_pretty(cell)?).map_err(io_err(&meta))?;
        if trace {
            let path = dir.join("trace.csv");
            let mut file = fs::File::create(&path).map_err(io_err(&path))?;
            writeln!(file, "# config_hash {} seed {} eval episode 0", row.config_hash, cell.seed)
                .map_err(io_err(&path))?;
            episodes[0].write_trace_csv(file)?;
        }
    }
    Ok(CellResult {
        cell: cell.clone(),
        row,
        curve: trained.map(|t| t.curve),
        wall_time: start.elapsed().as_secs_f64(),
    })
}

/// Re-runs a cell from its `cell.json` without touching cached models.
pub fn rerun_cell(meta: &Path) -> Result<MetricsRow, HarnessError> {
    let text = fs::read_to_string(meta).map_err(io_err(meta))?;
    let cell: CellSpec = serde_json::from_str(&text)?;
    Ok(run_cell(&cell, None, None, false, false)?.row)
}

/// Cells of a campaign in execution order: sweep value, method, seed.
pub fn cells(spec: &ExperimentSpec) -> Result<Vec<CellSpec>, HarnessError> {
    let mut out = Vec::new();
    for value in spec.sweep_points() {
        let (param, eval_world, train_world) = match (&spec.sweep, value) {
            (Some(s), Some(v)) => {
                let eval = apply_sweep(&spec.world, &s.parameter, v)?;
                let train = match s.mode {
                    SweepMode::Retrain => eval.clone(),
                    SweepMode::EvalOnly => spec.world.clone(),
                };
                (Some(s.parameter.clone()), eval, train)
            }
            _ => (None, spec.world.clone(), spec.world.clone()),
        };
        for &method in &spec.methods {
            for &seed in &spec.seeds {
                out.push(CellSpec {
                    method,
                    seed,
                    sweep_parameter: param.clone(),
                    sweep_value: value,
                    train_world: train_world.clone(),
                    eval_world: eval_world.clone(),
                    learner: spec.learner.clone(),
                    eval_episodes: spec.eval_episodes,
                });
            }
        }
    }
    Ok(out)
}

/// Outcome of a campaign.
#[derive(Debug, Default)]
pub struct CampaignResult {
    pub results: Vec<CellResult>,
    pub failures: Vec<(CellSpec, String)>,
}

impl CampaignResult {
    pub fn rows(&self) -> Vec<MetricsRow> {
        self.results.iter().map(|r| r.row.clone()).collect()
    }
}

pub fn write_metrics(path: &Path, rows: &[MetricsRow]) -> Result<(), HarnessError> {
    let mut file = fs::File::create(path).map_err(io_err(path))?;
    writeln!(file, "{METRICS_SCHEMA}").map_err(io_err(path))?;
    let mut w = csv::Writer::from_writer(file);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>, HarnessError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let body: String = BufReader::new(file)
        .lines()
        .collect::<Result<Vec<_>, _>>()
        .map_err(io_err(path))?
        .into_iter()
        .filter(|l| !l.starts_with('#'))
        .collect::<Vec<_>>()
        .join("\n");
    let mut r = csv::Reader::from_reader(body.as_bytes());
    Ok(r.deserialize().collect::<Result<Vec<MetricsRow>, _>>()?)
}

/// Runs every cell, isolating failures, and writes `metrics.csv` and
/// `timings.csv` under `out`.
pub fn run_experiment(spec: &ExperimentSpec, out: &Path) -> Result<CampaignResult, HarnessError> {
    spec.validate()?;
    fs::create_dir_all(out).map_err(io_err(out))?;
    let spec_path = out.join("experiment.json");
    fs::write(&spec_path, serde_json::to_string_pretty(spec)?).map_err(io_err(&spec_path))?;
    let mut result = CampaignResult::default();
    let models = spec.models_dir(out);
    for cell in cells(spec)? {
        log::info!("cell {}", cell.dir_name());
        match run_cell(&cell, Some(out), Some(&models), spec.reuse_models, spec.traces) {
            Ok(r) => result.results.push(r),
            Err(e) => {
                log::error!("cell {} failed: {e}", cell.dir_name());
                result.failures.push((cell, e.to_string()));
            }
        }
    }
    write_metrics(&out.join("metrics.csv"), &result.rows())?;
    let timings = out.join("timings.csv");
    let mut file = fs::File::create(&timings).map_err(io_err(&timings))?;
    writeln!(file, "{TIMINGS_SCHEMA}").map_err(io_err(&timings))?;
    writeln!(file, "cell,wall_time_s").map_err(io_err(&timings))?;
    for r in &result.results {
        writeln!(file, "{},{:.3}", r.cell.dir_name(), r.wall_time).map_err(io_err(&timings))?;
    }
    Ok(result)
}

/// Median and interquartile range (linear interpolation between order
/// statistics).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Spread {
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    pub n: usize,
}

pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

pub fn spread(values: &[f64]) -> Spread {
    assert!(!values.is_empty(), "spread of no values");
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    Spread {
        median: quantile(&v, 0.5),
        q1: quantile(&v, 0.25),
        q3: quantile(&v, 0.75),
        n: v.len(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub sweep_value: String,
    pub per_algorithm: BTreeMap<String, Spread>,
    /// Algorithms by ascending median total average AoI.
    pub ordering: Vec<String>,
}

/// Per sweep value: median/IQR of total average AoI per algorithm and the
/// resulting ordering (best first).
pub fn summarize(rows: &[MetricsRow]) -> Vec<SweepSummary> {
    let mut groups: BTreeMap<String, BTreeMap<String, Vec<f64>>> = BTreeMap::new();
    let mut order_of_values: Vec<String> = Vec::new();
    for r in rows {
        if !order_of_values.contains(&r.sweep_value) {
            order_of_values.push(r.sweep_value.clone());
        }
        groups
            .entry(r.sweep_value.clone())
            .or_default()
            .entry(r.algorithm.clone())
            .or_default()
            .push(r.total_average_aoi);
    }
    order_of_values
        .into_iter()
        .map(|value| {
            let per_algorithm: BTreeMap<String, Spread> = groups[&value]
                .iter()
                .map(|(a, v)| {
                    if v.len() < 3 {
                        log::warn!("{a} at '{value}' has only {} seed(s)", v.len());
                    }
                    (a.clone(), spread(v))
                })
                .collect();
            let mut ordering: Vec<String> = per_algorithm.keys().cloned().collect();
            ordering.sort_by(|a, b| per_algorithm[a].median.total_cmp(&per_algorithm[b].median));
            SweepSummary {
                sweep_value: value,
                per_algorithm,
                ordering,
            }
        })
        .collect()
}

/// Plain-text rendering of [`summarize`].
pub fn render_summary(summaries: &[SweepSummary]) -> String {
    let mut s = String::new();
    for sw in summaries {
        let label = if sw.sweep_value.is_empty() { "base" } else { &sw.sweep_value };
        s.push_str(&format!("sweep value {label}\n"));
        for a in &sw.ordering {
            let sp = &sw.per_algorithm[a];
            s.push_str(&format!(
                "  {a:<8} median {:>9.3}  IQR [{:.3}, {:.3}]  n={}\n",
                sp.median, sp.q1, sp.q3, sp.n
            ));
        }
        s.push_str(&format!("  ordering: {}\n", sw.ordering.join(" < ")));
    }
    s
}

/// Default output root, overridable with `UAV_AOI_OUTPUT`.
pub fn output_root() -> PathBuf {
    std::env::var_os("UAV_AOI_OUTPUT")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_examples() {
        assert_eq!(spread(&[10.0, 12.0, 14.0]).median, 12.0);
        assert_eq!(spread(&[14.0, 10.0, 12.0, 16.0]).median, 13.0);
    }

    #[test]
    fn single_algorithm_ordering() {
        let row = MetricsRow {
            algorithm: "qmix".into(),
            sweep_parameter: String::new(),
            sweep_value: String::new(),
            seed: 0,
            total_average_aoi: 20.0,
            collision_count: 0,
            mean_residual_energy: 1.0,
            config_hash: String::new(),
        };
        let s = summarize(&[row]);
        assert_eq!(s[0].ordering, vec!["qmix".to_string()]);
    }

    #[test]
    fn sweep_application() {
        let base = WorldConfig::desk();
        assert_eq!(apply_sweep(&base, "M", 3.0).unwrap().num_uavs, 3);
        assert_eq!(apply_sweep(&base, "xi_th_db", 7.0).unwrap().xi_th_db, 7.0);
        assert!(apply_sweep(&base, "M", 1.5).is_err());
        assert!(apply_sweep(&base, "bogus", 1.0).is_err());
    }
}
