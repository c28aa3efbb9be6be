//! Experiment runner: JSON configs, sweep presets, seeded runs and CSV
//! metrics.
//!
//! A run is one (sweep value, policy, cache policy, seed) combination. The
//! learning scheduler first trains for `train_episodes` episodes on fresh
//! workloads over the same cluster, then every policy is evaluated on the
//! same seeded workload with exploration switched off.

use std::collections::HashMap;
use std::io::Write;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{run_episode, AgentConfig, AgentError, EpisodeLog, Greedy, RoundRobin, TraceRow, TsicAgent};
use crate::cache::CachePolicy;
use crate::qnet::TrainConfig;
use crate::sim::{generate_workload, Cluster, SimConfig, SimError, Simulator};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid experiment config: {0}")]
    Config(String),
    #[error("non-finite {metric} for {policy:?}/{cache} seed {seed}")]
    NonFinite {
        metric: &'static str,
        policy: PolicyKind,
        cache: String,
        seed: u64,
    },
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PolicyKind {
    #[serde(rename = "TSIC")]
    Tsic,
    #[serde(rename = "GRD")]
    Grd,
    #[serde(rename = "RR")]
    Rr,
}

impl PolicyKind {
    pub fn label(&self) -> &'static str {
        match self {
            PolicyKind::Tsic => "TSIC",
            PolicyKind::Grd => "GRD",
            PolicyKind::Rr => "RR",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    /// Capacity `K` of every fixed-size LFU cache.
    LfuSize,
    NodeCount,
    TaskCount,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sweep {
    pub axis: SweepAxis,
    pub values: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub sim: SimConfig,
    pub train: TrainConfig,
    pub agent: AgentConfig,
    pub policies: Vec<PolicyKind>,
    pub caches: Vec<CachePolicy>,
    pub sweep: Sweep,
    pub seeds: Vec<u64>,
    pub train_episodes: usize,
    pub output: Option<String>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let sim = SimConfig::default();
        Self {
            sweep: Sweep {
                axis: SweepAxis::NodeCount,
                values: vec![sim.num_nodes as u64],
            },
            sim,
            train: TrainConfig::default(),
            agent: AgentConfig::default(),
            policies: vec![PolicyKind::Tsic, PolicyKind::Grd, PolicyKind::Rr],
            caches: vec![CachePolicy::Adaptive],
            seeds: (1..=5).collect(),
            train_episodes: 3,
            output: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, HarnessError> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Config(m));
        if self.seeds.is_empty() {
            return bad("at least one seed is required".into());
        }
        if self.policies.is_empty() || self.caches.is_empty() {
            return bad("policies and caches must be non-empty".into());
        }
        if self.sweep.values.is_empty() {
            return bad("sweep needs at least one value".into());
        }
        if self.sweep.values.windows(2).any(|w| w[0] >= w[1]) {
            return bad("sweep values must be strictly increasing".into());
        }
        if self.agent.caching_update == 0 || !(0.0..=1.0).contains(&self.agent.epsilon) {
            return bad("caching_update must be >= 1 and epsilon in [0, 1]".into());
        }
        self.train.validate().map_err(HarnessError::Config)?;
        for &value in &self.sweep.values {
            self.sim_config_for(value, self.seeds[0])?.validate()?;
        }
        Ok(())
    }

    fn sim_config_for(&self, value: u64, seed: u64) -> Result<SimConfig, HarnessError> {
        let mut sim = self.sim.clone();
        sim.rng_seed = seed;
        match self.sweep.axis {
            SweepAxis::NodeCount => sim.num_nodes = value as usize,
            SweepAxis::TaskCount => sim.num_tasks = value as usize,
            SweepAxis::LfuSize => {
                if value == 0 {
                    return Err(HarnessError::Config("LFU size must be >= 1".into()));
                }
            }
        }
        Ok(sim)
    }

    fn cache_for(&self, cache: CachePolicy, value: u64) -> CachePolicy {
        match (self.sweep.axis, cache) {
            (SweepAxis::LfuSize, CachePolicy::FixedSize(_)) => CachePolicy::FixedSize(value as usize),
            _ => cache,
        }
    }
}

/// One CSV row: seed-level means over the tasks that completed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub sweep_value: u64,
    pub policy: String,
    pub cache: String,
    pub seed: u64,
    pub comm_s: f64,
    pub wait_s: f64,
    pub comp_s: f64,
    /// `comm_s + wait_s + comp_s`.
    pub total_s: f64,
    pub failures: usize,
}

pub const METRICS_HEADER: [&str; 9] = [
    "sweep_value",
    "policy",
    "cache",
    "seed",
    "comm_s",
    "wait_s",
    "comp_s",
    "total_s",
    "failures",
];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DelayMeans {
    pub comm_s: f64,
    pub wait_s: f64,
    pub comp_s: f64,
    pub total_s: f64,
    pub completed: usize,
    pub failures: usize,
}

pub fn summarize(log: &EpisodeLog) -> DelayMeans {
    let (mut comm, mut wait, mut comp, mut n) = (0.0, 0.0, 0.0, 0usize);
    for d in log.completed() {
        comm += d.comm_s;
        wait += d.wait_s;
        comp += d.comp_s;
        n += 1;
    }
    let denom = n.max(1) as f64;
    let (comm_s, wait_s, comp_s) = (comm / denom, wait / denom, comp / denom);
    DelayMeans {
        comm_s,
        wait_s,
        comp_s,
        total_s: comm_s + wait_s + comp_s,
        completed: n,
        failures: log.failures(),
    }
}

/// Fully resolved parameters of one run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSpec {
    pub sim: SimConfig,
    pub train: TrainConfig,
    pub agent: AgentConfig,
    pub policy: PolicyKind,
    pub cache: CachePolicy,
    pub train_episodes: usize,
}

impl RunSpec {
    /// Identity of the run for de-duplication. Baselines never read the
    /// training parameters.
    fn key(&self) -> String {
        let learning = (self.policy == PolicyKind::Tsic).then_some((&self.train, &self.agent, self.train_episodes));
        serde_json::to_string(&(&self.sim, self.policy, self.cache, learning)).expect("run spec serializes")
    }
}

fn derived_seed(seed: u64, salt: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(salt.wrapping_mul(0xD1B5_4A32_D192_ED03))
        ^ salt
}

/// Runs one policy: training episodes (learning scheduler only) then the
/// evaluation episode. Returns the evaluation log.
pub fn run_single(spec: &RunSpec) -> Result<EpisodeLog, HarnessError> {
    let cluster = Cluster::generate(&spec.sim)?;
    let eval_tasks = generate_workload(&spec.sim)?;
    let fresh = || Simulator::from_cluster(spec.sim.clone(), cluster.clone(), spec.cache);
    match spec.policy {
        PolicyKind::Grd => Ok(run_episode(&mut fresh(), &eval_tasks, &mut Greedy)?),
        PolicyKind::Rr => Ok(run_episode(&mut fresh(), &eval_tasks, &mut RoundRobin::default())?),
        PolicyKind::Tsic => {
            let seed = spec.sim.rng_seed;
            let rng = ChaCha8Rng::seed_from_u64(derived_seed(seed ^ spec.train.seed, 0xA6E7));
            let mut agent = TsicAgent::for_simulator(&fresh(), spec.agent, spec.train.clone(), rng);
            for episode in 0..spec.train_episodes {
                let workload = SimConfig {
                    rng_seed: derived_seed(seed, episode as u64 + 1),
                    ..spec.sim.clone()
                };
                let tasks = generate_workload(&workload)?;
                agent.begin_episode(spec.agent.epsilon, true);
                run_episode(&mut fresh(), &tasks, &mut agent)?;
            }
            agent.begin_episode(0.0, spec.agent.learn_during_eval);
            Ok(run_episode(&mut fresh(), &eval_tasks, &mut agent)?)
        }
    }
}

struct Job {
    sweep_value: u64,
    policy: PolicyKind,
    cache_label: String,
    seed: u64,
    key: String,
}

fn parallel_map<T: Sync, U: Send>(items: &[T], f: impl Fn(&T) -> U + Sync) -> Vec<U> {
    let workers = std::thread::available_parallelism()
        .map_or(1, |n| n.get())
        .min(items.len());
    if workers <= 1 {
        return items.iter().map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<U>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let out = f(&items[i]);
                results.lock().expect("result lock")[i] = Some(out);
            });
        }
    });
    results
        .into_inner()
        .expect("result lock")
        .into_iter()
        .map(|r| r.expect("every job ran"))
        .collect()
}

/// Runs every (sweep value × policy × cache × seed) combination. Identical
/// runs (e.g. adaptive caches across an LFU-size sweep) are executed once.
/// Rows come back in that nested order.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Vec<MetricsRow>, HarnessError> {
    cfg.validate()?;
    let mut jobs = Vec::new();
    let mut unique: Vec<RunSpec> = Vec::new();
    let mut seen: HashMap<String, usize> = HashMap::new();
    for &value in &cfg.sweep.values {
        for &policy in &cfg.policies {
            for &cache in &cfg.caches {
                let cache = cfg.cache_for(cache, value);
                for &seed in &cfg.seeds {
                    let spec = RunSpec {
                        sim: cfg.sim_config_for(value, seed)?,
                        train: cfg.train.clone(),
                        agent: cfg.agent,
                        policy,
                        cache,
                        train_episodes: cfg.train_episodes,
                    };
                    let key = spec.key();
                    if !seen.contains_key(&key) {
                        seen.insert(key.clone(), unique.len());
                        unique.push(spec);
                    }
                    jobs.push(Job {
                        sweep_value: value,
                        policy,
                        cache_label: cache.label(),
                        seed,
                        key,
                    });
                }
            }
        }
    }
    let results = parallel_map(&unique, |spec| run_single(spec).map(|log| summarize(&log)));
    let mut means = Vec::with_capacity(results.len());
    for r in results {
        means.push(r?);
    }
    let mut rows = Vec::with_capacity(jobs.len());
    for job in jobs {
        let m = means[seen[&job.key]];
        for (metric, v) in [
            ("comm_s", m.comm_s),
            ("wait_s", m.wait_s),
            ("comp_s", m.comp_s),
            ("total_s", m.total_s),
        ] {
            if !v.is_finite() {
                return Err(HarnessError::NonFinite {
                    metric,
                    policy: job.policy,
                    cache: job.cache_label,
                    seed: job.seed,
                });
            }
        }
        rows.push(MetricsRow {
            sweep_value: job.sweep_value,
            policy: job.policy.label().to_string(),
            cache: job.cache_label,
            seed: job.seed,
            comm_s: m.comm_s,
            wait_s: m.wait_s,
            comp_s: m.comp_s,
            total_s: m.total_s,
            failures: m.failures,
        });
    }
    Ok(rows)
}

pub fn write_metrics_csv<W: Write>(rows: &[MetricsRow], out: W) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_writer(out);
    if rows.is_empty() {
        w.write_record(METRICS_HEADER)?;
    }
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics_csv<R: std::io::Read>(input: R) -> Result<Vec<MetricsRow>, HarnessError> {
    let mut r = csv::Reader::from_reader(input);
    Ok(r.deserialize().collect::<Result<_, _>>()?)
}

/// Decision log of the first combination in the config (first sweep value,
/// policy, cache and seed), evaluation episode only.
pub fn trace_experiment(cfg: &ExperimentConfig) -> Result<Vec<TraceRow>, HarnessError> {
    cfg.validate()?;
    let value = cfg.sweep.values[0];
    let spec = RunSpec {
        sim: cfg.sim_config_for(value, cfg.seeds[0])?,
        train: cfg.train.clone(),
        agent: cfg.agent,
        policy: cfg.policies[0],
        cache: cfg.cache_for(cfg.caches[0], value),
        train_episodes: cfg.train_episodes,
    };
    Ok(run_single(&spec)?.rows)
}

/// `slot,task_id,action_node,masked,eps_draw,reward`; `eps_draw` is empty for
/// policies that do not explore.
pub fn write_trace_csv<W: Write>(rows: &[TraceRow], out: W) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["slot", "task_id", "action_node", "masked", "eps_draw", "reward"])?;
    for r in rows {
        w.write_record([
            r.slot.to_string(),
            r.task_id.to_string(),
            r.action_node.to_string(),
            u8::from(r.masked).to_string(),
            r.eps_draw.map(|e| e.to_string()).unwrap_or_default(),
            r.reward.map(|v| v.to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Preset {
    Fig3,
    Fig4,
    Fig5,
}

impl std::str::FromStr for Preset {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "fig3" => Ok(Preset::Fig3),
            "fig4" => Ok(Preset::Fig4),
            "fig5" => Ok(Preset::Fig5),
            other => Err(format!("unknown preset `{other}` (expected fig3, fig4 or fig5)")),
        }
    }
}

impl Preset {
    pub fn config(&self) -> ExperimentConfig {
        match self {
            Preset::Fig3 => preset_fig3(),
            Preset::Fig4 => preset_fig4(),
            Preset::Fig5 => preset_fig5(),
        }
    }
}

/// Five nodes, six images, 200 tasks, all three policies, adaptive cache.
pub fn preset_base() -> ExperimentConfig {
    ExperimentConfig::default()
}

/// Cache comparison under the learning scheduler: adaptive, frequency-only
/// and fixed-size LFU across LFU capacities. The smallest node holds about
/// ten of the smallest images and the catalog is larger than the biggest
/// tier, so every node has to evict.
pub fn preset_fig3() -> ExperimentConfig {
    let base = preset_base();
    ExperimentConfig {
        sim: SimConfig {
            num_services: 60,
            num_images: 60,
            storage_images_smallest: 10,
            ..base.sim.clone()
        },
        policies: vec![PolicyKind::Tsic],
        caches: vec![
            CachePolicy::Adaptive,
            CachePolicy::FrequencyOnly,
            CachePolicy::FixedSize(2),
        ],
        sweep: Sweep {
            axis: SweepAxis::LfuSize,
            values: vec![2, 4, 6, 8],
        },
        ..base
    }
}

/// Node-count sweep with the task count fixed.
pub fn preset_fig4() -> ExperimentConfig {
    ExperimentConfig {
        sweep: Sweep {
            axis: SweepAxis::NodeCount,
            values: (3..=8).collect(),
        },
        ..preset_base()
    }
}

/// Task-count sweep with the node count fixed.
pub fn preset_fig5() -> ExperimentConfig {
    ExperimentConfig {
        sweep: Sweep {
            axis: SweepAxis::TaskCount,
            values: vec![50, 100, 200, 300, 400],
        },
        ..preset_base()
    }
}
