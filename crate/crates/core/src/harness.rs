//! Experiment configuration, seeded runs, policy evaluation, CSV output and
//! static SVG plots.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::envs::{
    build_gridworld, build_hard_instance, Generator, GridWorldSpec, HardInstanceSpec, RewardMode,
};
use crate::error::{Error, Result};
use crate::estimation::{BonusFunctions, EmpiricalModel, SourceDataset};
use crate::hybrid_vi::ViIteration;
use crate::mdp::{
    optimal_values, policy_values, reachability_sigma, rng_stream, sample_episode, MdpDocument,
    Policy, PolicyDocument, TabularMdp,
};
use crate::orchestrator::{
    map_seeds, run_algorithm, Algorithm, HySRLConfig, Observer, Phase, RunResult,
};
use crate::shift_id::{explore, true_shift_region, ShiftIteration};

pub const METRICS_HEADER: [&str; 7] = [
    "seed",
    "phase",
    "episode",
    "samples",
    "stat",
    "exact_gap",
    "mc_gap",
];
pub const SWEEP_HEADER: [&str; 8] = [
    "algorithm",
    "target_success",
    "true_beta",
    "seed",
    "samples",
    "stopped",
    "exact_gap",
    "percentage_gap",
];
pub const MC_EPISODES: usize = 100;
/// Environment variable overriding the worker count.
pub const THREADS_ENV: &str = "HYSRL_THREADS";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    #[default]
    Exact,
    #[serde(rename = "monte_carlo_100", alias = "mc")]
    MonteCarlo100,
    Both,
}

impl EvalMode {
    fn exact(self) -> bool {
        matches!(self, EvalMode::Exact | EvalMode::Both)
    }

    fn monte_carlo(self) -> bool {
        matches!(self, EvalMode::MonteCarlo100 | EvalMode::Both)
    }
}

impl FromStr for EvalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact" => Ok(EvalMode::Exact),
            "mc" | "monte_carlo_100" => Ok(EvalMode::MonteCarlo100),
            "both" => Ok(EvalMode::Both),
            other => Err(Error::Config(format!("unknown evaluation mode `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub optimal_value: f64,
    pub exact_gap: Option<f64>,
    pub mc_gap: Option<f64>,
}

/// Caches `V*_1(rho)` of one environment.
pub struct Evaluator<'a> {
    env: &'a TabularMdp,
    optimal_value: f64,
    mode: EvalMode,
}

impl<'a> Evaluator<'a> {
    pub fn new(env: &'a TabularMdp, mode: EvalMode) -> Result<Self> {
        let optimal_value = optimal_values(env)?.values.value_at(env.rho());
        Ok(Self {
            env,
            optimal_value,
            mode,
        })
    }

    pub fn optimal_value(&self) -> f64 {
        self.optimal_value
    }

    pub fn evaluate<R: Rng + ?Sized>(&self, pi: &Policy, rng: &mut R) -> Result<Evaluation> {
        let exact_gap = if self.mode.exact() {
            Some(self.optimal_value - policy_values(self.env, pi)?.value_at_rho)
        } else {
            None
        };
        let mc_gap = if self.mode.monte_carlo() {
            self.env.dims().ensure_same(&pi.dims())?;
            let total: f64 = (0..MC_EPISODES)
                .map(|_| sample_episode(self.env, pi, rng).total_reward())
                .sum();
            Some(self.optimal_value - total / MC_EPISODES as f64)
        } else {
            None
        };
        Ok(Evaluation {
            optimal_value: self.optimal_value,
            exact_gap,
            mc_gap,
        })
    }
}

/// `V*_1(rho) - V^pi_1(rho)` by dynamic programming and/or as `V*_1(rho)`
/// minus the mean return of 100 rollouts.
pub fn evaluate_policy<R: Rng + ?Sized>(
    env: &TabularMdp,
    pi: &Policy,
    mode: EvalMode,
    rng: &mut R,
) -> Result<Evaluation> {
    Evaluator::new(env, mode)?.evaluate(pi, rng)
}

/// Collects a source dataset by running the `W`-greedy exploration loop for
/// a fixed number of episodes.
pub fn gen_source_dataset(
    env: &TabularMdp,
    episodes: u64,
    delta: f64,
    bonus_scale: f64,
    seed: u64,
) -> Result<SourceDataset> {
    if episodes == 0 {
        return Err(Error::InvalidArgument("episodes must be at least 1".into()));
    }
    let bonus = BonusFunctions::new(env.dims(), delta, bonus_scale)?;
    let run = explore(
        env,
        EmpiricalModel::new(env.dims()),
        &bonus,
        None,
        episodes,
        &mut rng_stream(seed),
        &mut |_| {},
    )?;
    Ok(SourceDataset::new(
        run.model,
        env.fingerprint(),
        run.episodes,
    ))
}

/// Reads an environment file: either a full MDP document or a generator
/// description such as `{"gridworld": {...}}`.
pub fn load_env(path: &Path) -> Result<TabularMdp> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let value: serde_json::Value = serde_json::from_str(&text)?;
    if value.get("kernel").is_some() {
        let doc: MdpDocument = serde_json::from_value(value)?;
        return TabularMdp::from_document(&doc);
    }
    let generator = value.get("generator").cloned().unwrap_or(value);
    let generator: Generator = serde_json::from_value(generator)
        .map_err(|e| Error::Config(format!("{}: not an MDP or generator: {e}", path.display())))?;
    generator.build()
}

pub fn load_policy(path: &Path) -> Result<Policy> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let doc: PolicyDocument = serde_json::from_str(&text)?;
    Policy::from_document(&doc)
}

fn default_success() -> f64 {
    0.95
}

fn default_grid_horizon() -> usize {
    20
}

fn default_reward_mode() -> RewardMode {
    RewardMode::OnceOnly
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EnvironmentConfig {
    /// The 4x4 room without traps as source, with traps as target.
    Gridworld {
        #[serde(default = "default_success")]
        source_success: f64,
        #[serde(default = "default_success")]
        target_success: f64,
        #[serde(default = "default_grid_horizon")]
        horizon: usize,
        #[serde(default = "default_reward_mode")]
        reward_mode: RewardMode,
    },
    /// Uninformative instance as source, biased instance as target.
    HardInstance {
        bandit_states: usize,
        actions: usize,
        horizon: usize,
        gamma: f64,
        optimal_actions: Vec<usize>,
    },
    Files {
        source: PathBuf,
        target: PathBuf,
    },
}

impl EnvironmentConfig {
    /// Returns `(source, target)`.
    pub fn build(&self) -> Result<(TabularMdp, TabularMdp)> {
        let (source, target) = match self {
            EnvironmentConfig::Gridworld {
                source_success,
                target_success,
                horizon,
                reward_mode,
            } => {
                let shape = |spec: GridWorldSpec, p: f64| GridWorldSpec {
                    horizon: *horizon,
                    reward_mode: *reward_mode,
                    ..spec.with_success_prob(p)
                };
                (
                    build_gridworld(&shape(GridWorldSpec::source(), *source_success))?,
                    build_gridworld(&shape(GridWorldSpec::target(), *target_success))?,
                )
            }
            EnvironmentConfig::HardInstance {
                bandit_states,
                actions,
                horizon,
                gamma,
                optimal_actions,
            } => {
                let spec = HardInstanceSpec {
                    bandit_states: *bandit_states,
                    actions: *actions,
                    horizon: *horizon,
                    gamma: *gamma,
                    optimal_actions: None,
                };
                let target = HardInstanceSpec {
                    optimal_actions: Some(optimal_actions.clone()),
                    ..spec.clone()
                };
                (build_hard_instance(&spec)?, build_hard_instance(&target)?)
            }
            EnvironmentConfig::Files { source, target } => (load_env(source)?, load_env(target)?),
        };
        source.dims().ensure_same(&target.dims())?;
        Ok((source, target))
    }

    fn with_target_success(&self, p: f64) -> Result<Self> {
        match self {
            EnvironmentConfig::Gridworld {
                source_success,
                horizon,
                reward_mode,
                ..
            } => Ok(EnvironmentConfig::Gridworld {
                source_success: *source_success,
                target_success: p,
                horizon: *horizon,
                reward_mode: *reward_mode,
            }),
            _ => Err(Error::Config(
                "the beta sweep requires the gridworld environment".into(),
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SourceConfig {
    /// Exploration episodes in the source environment.
    pub episodes: u64,
    pub seed: u64,
    /// Existing dataset to load instead of collecting one.
    pub path: Option<PathBuf>,
    /// Write a collected dataset into the output directory.
    pub save: bool,
}

impl Default for SourceConfig {
    fn default() -> Self {
        Self {
            episodes: 100_000,
            seed: 0,
            path: None,
            save: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub target_success: Vec<f64>,
    /// Target episodes per run, shift identification included.
    pub episodes: u64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            target_success: vec![0.9, 0.85, 0.8, 0.75, 0.7, 0.65, 0.6, 0.55],
            episodes: 100_000,
        }
    }
}

fn default_name() -> String {
    "experiment".into()
}

fn default_algorithms() -> Vec<Algorithm> {
    vec![Algorithm::Hysrl, Algorithm::BpiUcbvi]
}

fn default_eval_interval() -> u64 {
    1000
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_name")]
    pub name: String,
    pub environment: EnvironmentConfig,
    #[serde(default)]
    pub source: SourceConfig,
    #[serde(default = "default_algorithms")]
    pub algorithms: Vec<Algorithm>,
    #[serde(default)]
    pub hysrl: HySRLConfig,
    pub seeds: Vec<u64>,
    /// Episodes between logged evaluations.
    #[serde(default = "default_eval_interval")]
    pub eval_interval: u64,
    #[serde(default)]
    pub eval_mode: EvalMode,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub threads: Option<usize>,
    #[serde(default)]
    pub sweep: SweepConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        let mut seeds = self.seeds.clone();
        seeds.sort_unstable();
        seeds.dedup();
        if seeds.len() != self.seeds.len() {
            return Err(Error::Config("seeds must be distinct".into()));
        }
        if self.eval_interval == 0 {
            return Err(Error::Config("eval_interval must be at least 1".into()));
        }
        if self.algorithms.is_empty() {
            return Err(Error::Config("algorithms must not be empty".into()));
        }
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(Error::Config(format!(
                "invalid experiment name `{}`",
                self.name
            )));
        }
        if self.sweep.target_success.is_empty() {
            return Err(Error::Config(
                "sweep.target_success must not be empty".into(),
            ));
        }
        self.hysrl.validate()
    }

    fn sorted_seeds(&self) -> Vec<u64> {
        let mut seeds = self.seeds.clone();
        seeds.sort_unstable();
        seeds
    }

    fn output_path(&self, suffix: &str) -> PathBuf {
        self.output_dir.join(format!("{}_{suffix}", self.name))
    }
}

/// Runs `f` on a pool sized by `HYSRL_THREADS`, else `threads`, else the
/// number of cores.
pub fn in_pool<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    let from_env = match std::env::var(THREADS_ENV) {
        Ok(v) => Some(
            v.trim()
                .parse::<usize>()
                .map_err(|_| Error::Config(format!("{THREADS_ENV}={v} is not a thread count")))?,
        ),
        Err(_) => None,
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(from_env.or(threads).unwrap_or(0))
        .build()
        .map_err(|e| Error::Config(e.to_string()))?;
    Ok(pool.install(f))
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub seed: u64,
    pub phase: Phase,
    pub episode: u64,
    pub samples: u64,
    pub stat: f64,
    pub exact_gap: Option<f64>,
    pub mc_gap: Option<f64>,
}

fn opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

pub fn metrics_csv(rows: &[MetricsRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(METRICS_HEADER)?;
    for r in rows {
        w.write_record([
            r.seed.to_string(),
            r.phase.name().to_string(),
            r.episode.to_string(),
            r.samples.to_string(),
            r.stat.to_string(),
            opt(r.exact_gap),
            opt(r.mc_gap),
        ])?;
    }
    finish_csv(w)
}

fn finish_csv(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w
        .into_inner()
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Index of each expected column in a CSV header.
fn column_index(path: &Path, headers: &csv::StringRecord, expected: &[&str]) -> Result<Vec<usize>> {
    expected
        .iter()
        .map(|name| {
            headers
                .iter()
                .position(|h| h == *name)
                .ok_or_else(|| Error::CorruptDataset {
                    path: path.to_path_buf(),
                    reason: format!("missing column `{name}`"),
                })
        })
        .collect()
}

fn parse_field<T: FromStr>(path: &Path, field: &str, column: &str) -> Result<T> {
    field.parse().map_err(|_| Error::CorruptDataset {
        path: path.to_path_buf(),
        reason: format!("bad value `{field}` in column `{column}`"),
    })
}

fn parse_optional(path: &Path, field: &str, column: &str) -> Result<Option<f64>> {
    if field.is_empty() {
        Ok(None)
    } else {
        parse_field(path, field, column).map(Some)
    }
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::CorruptDataset {
            path: path.to_path_buf(),
            reason: format!("{other:?}"),
        },
    })?;
    let idx = column_index(path, reader.headers()?, &METRICS_HEADER)?;
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record?;
        let get = |i: usize| record.get(idx[i]).unwrap_or("");
        let phase = match get(1) {
            "shift_id" => Phase::ShiftId,
            "vi" => Phase::Vi,
            other => {
                return Err(Error::CorruptDataset {
                    path: path.to_path_buf(),
                    reason: format!("unknown phase `{other}`"),
                })
            }
        };
        rows.push(MetricsRow {
            seed: parse_field(path, get(0), "seed")?,
            phase,
            episode: parse_field(path, get(2), "episode")?,
            samples: parse_field(path, get(3), "samples")?,
            stat: parse_field(path, get(4), "stat")?,
            exact_gap: parse_optional(path, get(5), "exact_gap")?,
            mc_gap: parse_optional(path, get(6), "mc_gap")?,
        });
    }
    Ok(rows)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub x: f64,
    pub mean: f64,
    /// Half-width of the 95% band, `1.96 std / sqrt(n)`.
    pub ci: f64,
    pub seeds: usize,
}

/// Mean and 95% half-width; the sample standard deviation is zero for a
/// single value.
pub fn mean_ci(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, 1.96 * var.sqrt() / n.sqrt())
}

/// Mean exact-gap curve over seeds against target samples. Each seed's
/// curve is a step function holding its latest evaluation; a point is kept
/// once every seed has been evaluated.
pub fn gap_curve(rows: &[MetricsRow]) -> Vec<CurvePoint> {
    let mut per_seed: BTreeMap<u64, Vec<(u64, f64)>> = BTreeMap::new();
    for r in rows {
        if let Some(g) = r.exact_gap {
            per_seed.entry(r.seed).or_default().push((r.samples, g));
        }
    }
    for series in per_seed.values_mut() {
        series.sort_by_key(|p| p.0);
    }
    let mut grid: Vec<u64> = per_seed.values().flatten().map(|p| p.0).collect();
    grid.sort_unstable();
    grid.dedup();
    let mut cursor = vec![0usize; per_seed.len()];
    let mut curve = Vec::new();
    for x in grid {
        let mut values = Vec::with_capacity(per_seed.len());
        for (series, c) in per_seed.values().zip(cursor.iter_mut()) {
            while *c < series.len() && series[*c].0 <= x {
                *c += 1;
            }
            if *c > 0 {
                values.push(series[*c - 1].1);
            }
        }
        if values.len() == per_seed.len() {
            let (mean, ci) = mean_ci(&values);
            curve.push(CurvePoint {
                x: x as f64,
                mean,
                ci,
                seeds: values.len(),
            });
        }
    }
    curve
}

/// Curve value at `x`: the last point at or before it.
pub fn curve_at(curve: &[CurvePoint], x: f64) -> Option<CurvePoint> {
    curve.iter().take_while(|p| p.x <= x).last().copied()
}

struct MetricsObserver<'a> {
    seed: u64,
    horizon: u64,
    interval: u64,
    cfg: &'a HySRLConfig,
    evaluator: &'a Evaluator<'a>,
    rows: Vec<MetricsRow>,
}

impl MetricsObserver<'_> {
    fn eval_stream(&self, episode: u64) -> crate::mdp::RngStream {
        rng_stream(self.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ episode.rotate_left(32) ^ 0x5EED)
    }
}

impl Observer for MetricsObserver<'_> {
    fn shift_iteration(&mut self, it: &ShiftIteration) {
        let last = it.statistic <= it.threshold || it.episode >= self.cfg.shift_max_episodes;
        if !last && it.episode.is_multiple_of(self.interval) {
            self.rows.push(MetricsRow {
                seed: self.seed,
                phase: Phase::ShiftId,
                episode: it.episode,
                samples: it.episode * self.horizon,
                stat: it.statistic,
                exact_gap: None,
                mc_gap: None,
            });
        }
    }

    fn vi_iteration(&mut self, offset: u64, it: &ViIteration) {
        let cap = if self.cfg.vi_budget_includes_shift {
            self.cfg.vi_max_episodes.saturating_sub(offset)
        } else {
            self.cfg.vi_max_episodes
        };
        let episode = offset + it.episode;
        let last = it.statistic <= self.cfg.epsilon || it.episode >= cap;
        if !(last || it.episode == 0 || episode.is_multiple_of(self.interval)) {
            return;
        }
        let eval = self
            .evaluator
            .evaluate(it.policy, &mut self.eval_stream(episode))
            .expect("policy matches the environment");
        self.rows.push(MetricsRow {
            seed: self.seed,
            phase: Phase::Vi,
            episode,
            samples: episode * self.horizon,
            stat: it.statistic,
            exact_gap: eval.exact_gap,
            mc_gap: eval.mc_gap,
        });
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvironmentSummary {
    pub states: usize,
    pub actions: usize,
    pub horizon: usize,
    pub source_fingerprint: String,
    pub target_fingerprint: String,
    pub optimal_value: f64,
    pub true_region_size: usize,
    pub effective_beta: f64,
    pub sigma: f64,
    pub abandons_source: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub seed: u64,
    pub stopped: bool,
    pub shift_cap_hit: bool,
    pub shift_episodes: u64,
    pub vi_episodes: u64,
    pub total_samples: u64,
    pub final_exact_gap: f64,
    pub region_size: usize,
    /// Whether the estimated shifted region equals the true one; absent
    /// when shift identification did not run.
    pub region_matches_truth: Option<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlgorithmSummary {
    pub algorithm: Algorithm,
    pub csv: String,
    pub runs: Vec<RunSummary>,
    pub curve: Vec<CurvePoint>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub name: String,
    pub environment: EnvironmentSummary,
    pub algorithms: Vec<AlgorithmSummary>,
}

#[derive(Clone, Debug)]
pub struct ExperimentReport {
    pub summary: ExperimentSummary,
    pub csv_paths: Vec<PathBuf>,
    pub summary_path: PathBuf,
    pub rows: BTreeMap<Algorithm, Vec<MetricsRow>>,
    /// Some run hit the shift-identification cap.
    pub cap_hit: bool,
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn prepare_output(cfg: &ExperimentConfig) -> Result<()> {
    fs::create_dir_all(&cfg.output_dir).map_err(|e| Error::io(&cfg.output_dir, e))
}

fn resolve_source(cfg: &ExperimentConfig, source_env: &TabularMdp) -> Result<SourceDataset> {
    if !cfg.algorithms.contains(&Algorithm::Hysrl) {
        return Ok(SourceDataset::empty(source_env.dims()));
    }
    match &cfg.source.path {
        Some(path) => {
            let data = SourceDataset::load(path, Some(source_env.dims()))?;
            let expected = source_env.fingerprint();
            if data.meta.env_fingerprint != expected {
                return Err(Error::Config(format!(
                    "dataset {} was collected in environment {}, expected {expected}",
                    path.display(),
                    data.meta.env_fingerprint
                )));
            }
            Ok(data)
        }
        None => {
            let data = gen_source_dataset(
                source_env,
                cfg.source.episodes,
                cfg.hysrl.delta,
                cfg.hysrl.shift_bonus_scale,
                cfg.source.seed,
            )?;
            if cfg.source.save {
                data.save(&cfg.output_path("source.dataset"))?;
            }
            Ok(data)
        }
    }
}

fn run_summary(
    result: &RunResult,
    final_gap: f64,
    truth: &crate::estimation::PairSet,
) -> RunSummary {
    RunSummary {
        seed: result.seed,
        stopped: result.vi_stopped,
        shift_cap_hit: result.shift_cap_hit,
        shift_episodes: result.shift_episodes,
        vi_episodes: result.vi_episodes,
        total_samples: result.total_samples,
        final_exact_gap: final_gap,
        region_size: result.region.len(),
        region_matches_truth: result.shift_region.as_ref().map(|r| &r.set == truth),
    }
}

/// Runs every configured algorithm on every seed, writing
/// `<name>_<algorithm>.csv` and `<name>_summary.json`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let (source_env, target_env) = cfg.environment.build()?;
    prepare_output(cfg)?;
    let source = resolve_source(cfg, &source_env)?;
    let evaluator = Evaluator::new(&target_env, cfg.eval_mode)?;
    let exact = Evaluator::new(&target_env, EvalMode::Exact)?;
    let truth = true_shift_region(&source_env, &target_env)?;
    let dims = target_env.dims();
    let seeds = cfg.sorted_seeds();

    let mut summaries = Vec::new();
    let mut csv_paths = Vec::new();
    let mut all_rows = BTreeMap::new();
    let mut cap_hit = false;
    for &algorithm in &cfg.algorithms {
        let hcfg = HySRLConfig {
            algorithm,
            ..cfg.hysrl.clone()
        };
        let outcomes = in_pool(cfg.threads, || {
            map_seeds(&seeds, |seed| -> Result<(RunResult, Vec<MetricsRow>)> {
                let mut obs = MetricsObserver {
                    seed,
                    horizon: dims.horizon as u64,
                    interval: cfg.eval_interval,
                    cfg: &hcfg,
                    evaluator: &evaluator,
                    rows: Vec::new(),
                };
                let result = run_algorithm(&target_env, &source, &hcfg, seed, &mut obs)?;
                Ok((result, obs.rows))
            })
        })?;
        let mut rows = Vec::new();
        let mut runs = Vec::new();
        for outcome in outcomes {
            let (result, seed_rows) = outcome?;
            let gap = exact
                .evaluate(&result.policy, &mut rng_stream(0))?
                .exact_gap
                .expect("exact mode");
            cap_hit |= result.shift_cap_hit;
            runs.push(run_summary(&result, gap, &truth.set));
            rows.extend(seed_rows);
        }
        let path = cfg.output_path(&format!("{}.csv", algorithm.name()));
        write_file(&path, &metrics_csv(&rows)?)?;
        summaries.push(AlgorithmSummary {
            algorithm,
            csv: path
                .file_name()
                .unwrap_or_default()
                .to_string_lossy()
                .into_owned(),
            runs,
            curve: gap_curve(&rows),
        });
        csv_paths.push(path);
        all_rows.insert(algorithm, rows);
    }

    let summary = ExperimentSummary {
        name: cfg.name.clone(),
        environment: EnvironmentSummary {
            states: dims.states,
            actions: dims.actions,
            horizon: dims.horizon,
            source_fingerprint: source_env.fingerprint(),
            target_fingerprint: target_env.fingerprint(),
            optimal_value: evaluator.optimal_value(),
            true_region_size: truth.set.len(),
            effective_beta: truth.effective_beta(),
            sigma: reachability_sigma(&target_env)?.min,
            abandons_source: cfg.hysrl.abandons_source(dims),
        },
        algorithms: summaries,
    };
    let summary_path = cfg.output_path("summary.json");
    write_file(
        &summary_path,
        &(serde_json::to_string_pretty(&summary)? + "\n"),
    )?;
    Ok(ExperimentReport {
        summary,
        csv_paths,
        summary_path,
        rows: all_rows,
        cap_hit,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub algorithm: Algorithm,
    pub target_success: f64,
    pub true_beta: f64,
    pub seed: u64,
    pub samples: u64,
    pub stopped: bool,
    pub exact_gap: f64,
    pub percentage_gap: f64,
}

#[derive(Clone, Debug)]
pub struct SweepReport {
    pub csv_path: PathBuf,
    pub rows: Vec<SweepRow>,
    pub cap_hit: bool,
}

pub fn sweep_csv(rows: &[SweepRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(SWEEP_HEADER)?;
    for r in rows {
        w.write_record([
            r.algorithm.name().to_string(),
            r.target_success.to_string(),
            r.true_beta.to_string(),
            r.seed.to_string(),
            r.samples.to_string(),
            r.stopped.to_string(),
            r.exact_gap.to_string(),
            r.percentage_gap.to_string(),
        ])?;
    }
    finish_csv(w)
}

pub fn read_sweep_csv(path: &Path) -> Result<Vec<SweepRow>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::CorruptDataset {
            path: path.to_path_buf(),
            reason: format!("{other:?}"),
        },
    })?;
    let idx = column_index(path, reader.headers()?, &SWEEP_HEADER)?;
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record?;
        let get = |i: usize| record.get(idx[i]).unwrap_or("");
        let algorithm = match get(0) {
            "hysrl" => Algorithm::Hysrl,
            "bpi_ucbvi" => Algorithm::BpiUcbvi,
            other => {
                return Err(Error::CorruptDataset {
                    path: path.to_path_buf(),
                    reason: format!("unknown algorithm `{other}`"),
                })
            }
        };
        rows.push(SweepRow {
            algorithm,
            target_success: parse_field(path, get(1), "target_success")?,
            true_beta: parse_field(path, get(2), "true_beta")?,
            seed: parse_field(path, get(3), "seed")?,
            samples: parse_field(path, get(4), "samples")?,
            stopped: parse_field(path, get(5), "stopped")?,
            exact_gap: parse_field(path, get(6), "exact_gap")?,
            percentage_gap: parse_field(path, get(7), "percentage_gap")?,
        });
    }
    Ok(rows)
}

/// For each target success probability, regenerates the target room and
/// runs every algorithm on every seed with a budget of `sweep.episodes`
/// target episodes; writes `<name>_sweep.csv`.
pub fn sweep_beta(cfg: &ExperimentConfig) -> Result<SweepReport> {
    cfg.validate()?;
    let (source_env, _) = cfg.environment.build()?;
    prepare_output(cfg)?;
    let source = resolve_source(cfg, &source_env)?;
    let seeds = cfg.sorted_seeds();
    let mut rows = Vec::new();
    let mut cap_hit = false;
    for &p in &cfg.sweep.target_success {
        let (_, target_env) = cfg.environment.with_target_success(p)?.build()?;
        let exact = Evaluator::new(&target_env, EvalMode::Exact)?;
        let true_beta = true_shift_region(&source_env, &target_env)?.effective_beta();
        for &algorithm in &cfg.algorithms {
            let hcfg = HySRLConfig {
                algorithm,
                vi_max_episodes: cfg.sweep.episodes,
                vi_budget_includes_shift: true,
                ..cfg.hysrl.clone()
            };
            let outcomes = in_pool(cfg.threads, || {
                map_seeds(&seeds, |seed| {
                    run_algorithm(&target_env, &source, &hcfg, seed, &mut ())
                })
            })?;
            for outcome in outcomes {
                let result = outcome?;
                cap_hit |= result.shift_cap_hit;
                let gap = exact
                    .evaluate(&result.policy, &mut rng_stream(0))?
                    .exact_gap
                    .expect("exact mode");
                rows.push(SweepRow {
                    algorithm,
                    target_success: p,
                    true_beta,
                    seed: result.seed,
                    samples: result.total_samples,
                    stopped: result.vi_stopped,
                    exact_gap: gap,
                    percentage_gap: 100.0 * gap / exact.optimal_value(),
                });
            }
        }
    }
    let csv_path = cfg.output_path("sweep.csv");
    write_file(&csv_path, &sweep_csv(&rows)?)?;
    Ok(SweepReport {
        csv_path,
        rows,
        cap_hit,
    })
}

/// Mean percentage gap per `(algorithm, true beta)` with 95% half-widths.
pub fn sweep_curves(rows: &[SweepRow]) -> BTreeMap<Algorithm, Vec<CurvePoint>> {
    let mut grouped: BTreeMap<Algorithm, BTreeMap<u64, Vec<f64>>> = BTreeMap::new();
    for r in rows {
        grouped
            .entry(r.algorithm)
            .or_default()
            .entry(r.true_beta.to_bits())
            .or_default()
            .push(r.percentage_gap);
    }
    grouped
        .into_iter()
        .map(|(alg, by_beta)| {
            let mut points: Vec<CurvePoint> = by_beta
                .into_iter()
                .map(|(bits, values)| {
                    let (mean, ci) = mean_ci(&values);
                    CurvePoint {
                        x: f64::from_bits(bits),
                        mean,
                        ci,
                        seeds: values.len(),
                    }
                })
                .collect();
            points.sort_by(|a, b| a.x.total_cmp(&b.x));
            (alg, points)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PlotKind {
    /// Exact gap against target samples, from metrics CSVs.
    Gap,
    /// Percentage gap against true beta, from sweep CSVs.
    Percentage,
}

impl FromStr for PlotKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gap" => Ok(PlotKind::Gap),
            "percentage" => Ok(PlotKind::Percentage),
            other => Err(Error::Config(format!("unknown plot kind `{other}`"))),
        }
    }
}

pub struct Series {
    pub label: String,
    pub points: Vec<CurvePoint>,
}

const PALETTE: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf",
];

fn tick_label(v: f64) -> String {
    if v != 0.0 && (v.abs() >= 1e4 || v.abs() < 1e-2) {
        format!("{v:.1e}")
    } else {
        let s = format!("{v:.3}");
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    }
}

/// Mean curves with shaded 95% bands as a standalone SVG document.
pub fn svg_document(
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[Series],
) -> Result<String> {
    let all: Vec<&CurvePoint> = series.iter().flat_map(|s| &s.points).collect();
    if all.is_empty() {
        return Err(Error::InvalidArgument("nothing to plot".into()));
    }
    let (w, h) = (760.0, 440.0);
    let (left, right, top, bottom) = (80.0, 170.0, 40.0, 60.0);
    let (pw, ph) = (w - left - right, h - top - bottom);
    let mut x_min = all.iter().map(|p| p.x).fold(f64::INFINITY, f64::min);
    let mut x_max = all.iter().map(|p| p.x).fold(f64::NEG_INFINITY, f64::max);
    if x_max <= x_min {
        x_min -= 1.0;
        x_max += 1.0;
    }
    let mut y_max = all.iter().map(|p| p.mean + p.ci).fold(0.0, f64::max) * 1.05;
    if y_max <= 0.0 {
        y_max = 1.0;
    }
    let sx = |x: f64| left + (x - x_min) / (x_max - x_min) * pw;
    let sy = |y: f64| top + ph - (y.max(0.0) / y_max) * ph;

    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(out, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<text x="{:.2}" y="24" text-anchor="middle" font-size="15">{}</text>"#,
        left + pw / 2.0,
        escape(title)
    );
    let _ = writeln!(
        out,
        r#"<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
    );
    for i in 0..=5 {
        let f = i as f64 / 5.0;
        let (xv, yv) = (x_min + f * (x_max - x_min), f * y_max);
        let (px, py) = (sx(xv), sy(yv));
        let _ = writeln!(
            out,
            r##"<line x1="{px:.2}" y1="{:.2}" x2="{px:.2}" y2="{:.2}" stroke="#ccc"/><text x="{px:.2}" y="{:.2}" text-anchor="middle">{}</text>"##,
            top,
            top + ph,
            top + ph + 18.0,
            tick_label(xv)
        );
        let _ = writeln!(
            out,
            r##"<line x1="{left}" y1="{py:.2}" x2="{:.2}" y2="{py:.2}" stroke="#ccc"/><text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"##,
            left + pw,
            left - 6.0,
            py + 4.0,
            tick_label(yv)
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
        left + pw / 2.0,
        h - 16.0,
        escape(x_label)
    );
    let _ = writeln!(
        out,
        r#"<text x="18" y="{:.2}" text-anchor="middle" transform="rotate(-90 18 {:.2})">{}</text>"#,
        top + ph / 2.0,
        top + ph / 2.0,
        escape(y_label)
    );
    for (k, s) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        if s.points.is_empty() {
            continue;
        }
        let upper = s
            .points
            .iter()
            .map(|p| format!("{:.2},{:.2}", sx(p.x), sy(p.mean + p.ci)));
        let lower = s
            .points
            .iter()
            .rev()
            .map(|p| format!("{:.2},{:.2}", sx(p.x), sy(p.mean - p.ci)));
        let band: Vec<String> = upper.chain(lower).collect();
        let _ = writeln!(
            out,
            r#"<polygon points="{}" fill="{color}" fill-opacity="0.2" stroke="none"/>"#,
            band.join(" ")
        );
        let line: Vec<String> = s
            .points
            .iter()
            .map(|p| format!("{:.2},{:.2}", sx(p.x), sy(p.mean)))
            .collect();
        let _ = writeln!(
            out,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            line.join(" ")
        );
        let ly = top + 16.0 + 20.0 * k as f64;
        let lx = left + pw + 14.0;
        let _ = writeln!(
            out,
            r#"<line x1="{lx:.2}" y1="{ly:.2}" x2="{:.2}" y2="{ly:.2}" stroke="{color}" stroke-width="3"/><text x="{:.2}" y="{:.2}">{}</text>"#,
            lx + 24.0,
            lx + 30.0,
            ly + 4.0,
            escape(&s.label)
        );
    }
    out.push_str("</svg>\n");
    Ok(out)
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

/// Renders the given CSV files into one SVG at `out`. Nothing is written
/// when an input is empty or malformed.
pub fn render_svg(inputs: &[PathBuf], kind: PlotKind, out: &Path) -> Result<()> {
    if inputs.is_empty() {
        return Err(Error::InvalidArgument("no input files".into()));
    }
    let document = match kind {
        PlotKind::Gap => {
            let mut series = Vec::new();
            for path in inputs {
                let rows = read_metrics_csv(path)?;
                let points = gap_curve(&rows);
                if points.is_empty() {
                    return Err(Error::CorruptDataset {
                        path: path.clone(),
                        reason: "no exact-gap rows".into(),
                    });
                }
                let label = path
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_else(|| path.display().to_string());
                series.push(Series { label, points });
            }
            svg_document("Optimality gap", "target samples", "exact gap", &series)?
        }
        PlotKind::Percentage => {
            let mut rows = Vec::new();
            for path in inputs {
                let file_rows = read_sweep_csv(path)?;
                if file_rows.is_empty() {
                    return Err(Error::CorruptDataset {
                        path: path.clone(),
                        reason: "no sweep rows".into(),
                    });
                }
                rows.extend(file_rows);
            }
            let series: Vec<Series> = sweep_curves(&rows)
                .into_iter()
                .map(|(alg, points)| Series {
                    label: alg.name().to_string(),
                    points,
                })
                .collect();
            svg_document(
                "Final optimality gap",
                "true beta",
                "gap (% of optimal value)",
                &series,
            )?
        }
    };
    write_file(out, &document)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::Dims;
    use approx::assert_abs_diff_eq;

    fn tiny() -> TabularMdp {
        // s0: a0 stays (r=0.2), a1 moves to s1 w.p. 0.7; s1: a1 pays 1.
        let dims = Dims::new(2, 2, 2);
        let kernel = vec![1.0, 0.0, 0.3, 0.7, 1.0, 0.0, 0.0, 1.0];
        TabularMdp::new(dims, kernel, vec![0.2, 0.0, 0.0, 1.0], vec![1.0, 0.0]).unwrap()
    }

    #[test]
    fn exact_gap_cases() {
        let env = tiny();
        let best = optimal_values(&env).unwrap().policy;
        let e = evaluate_policy(&env, &best, EvalMode::Exact, &mut rng_stream(0)).unwrap();
        assert_abs_diff_eq!(e.exact_gap.unwrap(), 0.0, epsilon = 1e-10);
        assert!(e.mc_gap.is_none());
        // Always a0 earns 0.4; a1 then best earns 0.7 * 1 + 0.3 * 0.2 = 0.76.
        let stay = Policy::deterministic(env.dims(), vec![0; 4]).unwrap();
        let e = evaluate_policy(&env, &stay, EvalMode::Both, &mut rng_stream(0)).unwrap();
        assert_abs_diff_eq!(e.optimal_value, 0.76, epsilon = 1e-12);
        assert_abs_diff_eq!(e.exact_gap.unwrap(), 0.36, epsilon = 1e-12);
        assert_abs_diff_eq!(e.mc_gap.unwrap(), 0.36, epsilon = 1e-12);
    }

    #[test]
    fn source_generation_accounting() {
        let env = tiny();
        let one = gen_source_dataset(&env, 1, 0.1, 1e-6, 3).unwrap();
        assert_eq!(one.model.total_count(), 2);
        assert_eq!(one.meta.episodes, 1);
        let a = gen_source_dataset(&env, 50, 0.1, 1e-6, 3).unwrap();
        let b = gen_source_dataset(&env, 50, 0.1, 1e-6, 3).unwrap();
        assert_eq!(a.to_text(), b.to_text());
        assert!(gen_source_dataset(&env, 0, 0.1, 1e-6, 3).is_err());
    }

    #[test]
    fn config_parsing() {
        let text = r#"
            seeds = [3, 1]
            [environment]
            kind = "gridworld"
            target_success = 0.9
            [hysrl]
            epsilon = 0.2
        "#;
        let cfg = ExperimentConfig::from_toml(text).unwrap();
        assert_eq!(cfg.sorted_seeds(), vec![1, 3]);
        assert_eq!(cfg.eval_interval, 1000);
        assert_eq!(cfg.hysrl.epsilon, 0.2);
        assert_eq!(cfg.hysrl.vi_bonus_scale, 2e-3);
        assert_eq!(cfg.algorithms, vec![Algorithm::Hysrl, Algorithm::BpiUcbvi]);

        let unknown = format!("{text}\nbogus = 1\n");
        assert!(matches!(
            ExperimentConfig::from_toml(&unknown),
            Err(Error::Config(_))
        ));
        let nested = text.replace("epsilon = 0.2", "epsilon = 0.2\nepsilonn = 3");
        assert!(ExperimentConfig::from_toml(&nested).is_err());
        let env_typo = text.replace("target_success = 0.9", "target_sucess = 0.9");
        assert!(ExperimentConfig::from_toml(&env_typo).is_err());
        assert!(ExperimentConfig::from_toml(&text.replace("[3, 1]", "[]")).is_err());
        assert!(
            ExperimentConfig::from_toml(&text.replace("epsilon = 0.2", "epsilon = 2.0")).is_err()
        );
    }

    #[test]
    fn curve_carries_values_forward() {
        let row = |seed, samples, gap| MetricsRow {
            seed,
            phase: Phase::Vi,
            episode: samples,
            samples,
            stat: 1.0,
            exact_gap: Some(gap),
            mc_gap: None,
        };
        let rows = vec![
            row(0, 0, 4.0),
            row(0, 10, 2.0),
            row(1, 5, 6.0),
            row(1, 20, 0.0),
        ];
        let curve = gap_curve(&rows);
        let xs: Vec<f64> = curve.iter().map(|p| p.x).collect();
        assert_eq!(xs, vec![5.0, 10.0, 20.0]);
        assert_eq!(curve[0].mean, 5.0);
        assert_eq!(curve[1].mean, 4.0);
        assert_eq!(curve[2].mean, 1.0);
        assert_eq!(curve_at(&curve, 15.0).unwrap().mean, 4.0);
        assert!(curve_at(&curve, 1.0).is_none());
        let single = gap_curve(&rows[..2]);
        assert!(single.iter().all(|p| p.ci == 0.0));
    }

    #[test]
    fn mean_ci_formula() {
        let (m, ci) = mean_ci(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        let sd = (5.0f64 / 3.0).sqrt();
        assert_abs_diff_eq!(ci, 1.96 * sd / 2.0, epsilon = 1e-15);
    }

    #[test]
    fn svg_has_one_series_per_input() {
        let series = vec![
            Series {
                label: "a<b".into(),
                points: vec![
                    CurvePoint {
                        x: 0.0,
                        mean: 1.0,
                        ci: 0.5,
                        seeds: 2,
                    },
                    CurvePoint {
                        x: 1.0,
                        mean: 0.5,
                        ci: 0.0,
                        seeds: 2,
                    },
                ],
            },
            Series {
                label: "c".into(),
                points: vec![CurvePoint {
                    x: 0.5,
                    mean: 0.7,
                    ci: 0.1,
                    seeds: 2,
                }],
            },
        ];
        let svg = svg_document("t", "x", "y", &series).unwrap();
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert_eq!(svg.matches("<polygon").count(), 2);
        assert!(svg.contains("a&lt;b"));
        assert!(svg_document("t", "x", "y", &[]).is_err());
    }

    #[test]
    fn env_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let doc_path = dir.path().join("tiny.json");
        fs::write(&doc_path, tiny().to_json()).unwrap();
        assert_eq!(load_env(&doc_path).unwrap(), tiny());
        let gen_path = dir.path().join("grid.json");
        let generator = Generator::Gridworld(GridWorldSpec::source());
        fs::write(&gen_path, serde_json::to_string(&generator).unwrap()).unwrap();
        assert_eq!(
            load_env(&gen_path).unwrap(),
            build_gridworld(&GridWorldSpec::source()).unwrap()
        );
        let bad = dir.path().join("bad.json");
        fs::write(&bad, "{\"nothing\": 1}").unwrap();
        assert!(load_env(&bad).is_err());
    }
}
