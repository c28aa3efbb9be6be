//! Discrete-time simulator of an edge cluster.
//!
//! Time advances in slots of `slot_duration_s` seconds. A scheduling decision
//! for a task arriving at slot `t` is applied with [`Simulator::step`]; the
//! task's delay is computed immediately and its completion is queued as a
//! [`SimEvent::Reward`] at `t + ceil(total / slot)`, when its resources are
//! released. Rejected tasks surface as [`SimEvent::Failure`] one slot later.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap};
use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cache::{CacheError, CachePolicy, LfuMemory};
use crate::model::{
    check_bandwidth, check_compute, check_storage, DelayRecord, Image, ImageId, ModelError, NodeId, NodeSpec,
    NodeState, Point, Service, ServiceId, Task, TaskId,
};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("unknown service {0}")]
    UnknownService(ServiceId),
    #[error("effective bandwidth {bandwidth} MB/s between task {task} and node {node} is not positive")]
    InfeasibleLink { task: TaskId, node: NodeId, bandwidth: f64 },
    #[error("task {task} would receive no CPU on node {node}")]
    ZeroCpu { task: TaskId, node: NodeId },
    #[error("task {task} arrives at slot {arrival} but the simulator is already at slot {now}")]
    PastArrival { task: TaskId, arrival: u64, now: u64 },
    #[error("invalid simulator config: {0}")]
    InvalidConfig(String),
    #[error("workload trace: {0}")]
    Trace(String),
    #[error(transparent)]
    Cache(#[from] CacheError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Closed interval a value is drawn uniformly from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Range {
    pub min: f64,
    pub max: f64,
}

impl Range {
    pub const fn new(min: f64, max: f64) -> Self {
        Self { min, max }
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        if self.max > self.min {
            rng.gen_range(self.min..=self.max)
        } else {
            self.min
        }
    }

    fn validate(&self, name: &str, positive: bool) -> Result<(), SimError> {
        if !(self.min.is_finite() && self.max.is_finite()) || self.min > self.max {
            return Err(SimError::InvalidConfig(format!("{name}: bad range {self:?}")));
        }
        if positive && self.min <= 0.0 {
            return Err(SimError::InvalidConfig(format!("{name}: must be > 0")));
        }
        if self.min < 0.0 {
            return Err(SimError::InvalidConfig(format!("{name}: must be >= 0")));
        }
        Ok(())
    }
}

/// Categorical distribution over services.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Popularity {
    Uniform,
    Zipf { exponent: f64 },
    Weights(Vec<f64>),
}

impl Popularity {
    pub fn weights(&self, num_services: usize) -> Vec<f64> {
        match self {
            Popularity::Uniform => vec![1.0 / num_services as f64; num_services],
            Popularity::Zipf { exponent } => {
                let raw: Vec<f64> = (1..=num_services).map(|k| (k as f64).powf(-exponent)).collect();
                let sum: f64 = raw.iter().sum();
                raw.into_iter().map(|w| w / sum).collect()
            }
            Popularity::Weights(w) => w.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub num_nodes: usize,
    pub num_services: usize,
    pub num_images: usize,
    pub num_tasks: usize,
    pub slot_duration_s: f64,
    /// Mean task arrivals per slot (Poisson process).
    pub arrival_rate: f64,
    pub base_latency_s: f64,
    /// Fractional bandwidth loss per unit of user-node distance.
    pub distance_bandwidth_factor: f64,
    /// Fraction of CPU share lost on a fully utilised node.
    pub contention_factor: f64,
    pub image_size_mb: Range,
    pub service_start_s: Range,
    pub service_work_units: Range,
    pub node_cpu: Range,
    pub node_mem_mb: Range,
    pub node_bandwidth: Range,
    pub cloud_bandwidth: Range,
    /// The smallest storage tier holds this many of the smallest images.
    pub storage_images_smallest: usize,
    /// Storage multipliers, assigned to nodes cyclically.
    pub storage_tiers: Vec<f64>,
    /// Extra storage on every node reserved for task data.
    pub storage_data_headroom_mb: f64,
    pub initial_images_per_node: usize,
    pub task_data_mb: Range,
    pub task_cpu: Range,
    pub task_mem_mb: Range,
    pub task_bandwidth: Range,
    pub popularity: Popularity,
    /// Penalty for a rejected task, as a multiple of the worst feasible delay.
    pub penalty_multiplier: f64,
    /// Penalty used before any feasible delay has been observed.
    pub initial_penalty_s: f64,
    pub rng_seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            num_nodes: 5,
            num_services: 6,
            num_images: 6,
            num_tasks: 200,
            slot_duration_s: 1.0,
            arrival_rate: 1.0,
            base_latency_s: 0.05,
            distance_bandwidth_factor: 0.3,
            contention_factor: 0.5,
            image_size_mb: Range::new(253.07, 458.73),
            service_start_s: Range::new(0.5, 2.0),
            service_work_units: Range::new(1.0, 3.0),
            node_cpu: Range::new(3.0, 4.0),
            node_mem_mb: Range::new(1024.0, 1024.0),
            node_bandwidth: Range::new(20.0, 40.0),
            cloud_bandwidth: Range::new(10.0, 25.0),
            storage_images_smallest: 3,
            storage_tiers: vec![1.0, 2.0, 4.0],
            storage_data_headroom_mb: 300.0,
            initial_images_per_node: 2,
            task_data_mb: Range::new(5.0, 30.0),
            task_cpu: Range::new(0.25, 0.75),
            task_mem_mb: Range::new(32.0, 128.0),
            task_bandwidth: Range::new(2.0, 6.0),
            popularity: Popularity::Zipf { exponent: 0.8 },
            penalty_multiplier: 2.0,
            initial_penalty_s: 60.0,
            rng_seed: 0,
        }
    }
}

const CLUSTER_STREAM: u64 = 1;
const WORKLOAD_STREAM: u64 = 2;

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |msg: &str| Err(SimError::InvalidConfig(msg.to_string()));
        if self.num_nodes == 0 || self.num_services == 0 || self.num_images == 0 {
            return bad("node, service and image counts must be >= 1");
        }
        if !(self.slot_duration_s > 0.0) {
            return bad("slot_duration_s must be > 0");
        }
        if !(self.arrival_rate > 0.0) {
            return bad("arrival_rate must be > 0");
        }
        if !(self.base_latency_s >= 0.0) {
            return bad("base_latency_s must be >= 0");
        }
        if !(0.0..std::f64::consts::FRAC_1_SQRT_2).contains(&self.distance_bandwidth_factor) {
            return bad("distance_bandwidth_factor must lie in [0, 1/sqrt(2))");
        }
        if !(0.0..1.0).contains(&self.contention_factor) {
            return bad("contention_factor must lie in [0, 1)");
        }
        for (name, range, positive) in [
            ("image_size_mb", self.image_size_mb, true),
            ("service_start_s", self.service_start_s, false),
            ("service_work_units", self.service_work_units, true),
            ("node_cpu", self.node_cpu, true),
            ("node_mem_mb", self.node_mem_mb, true),
            ("node_bandwidth", self.node_bandwidth, true),
            ("cloud_bandwidth", self.cloud_bandwidth, true),
            ("task_data_mb", self.task_data_mb, false),
            ("task_cpu", self.task_cpu, true),
            ("task_mem_mb", self.task_mem_mb, true),
            ("task_bandwidth", self.task_bandwidth, true),
        ] {
            range.validate(name, positive)?;
        }
        if self.storage_tiers.is_empty() || self.storage_tiers.iter().any(|t| !(*t > 0.0)) {
            return bad("storage_tiers must be non-empty and positive");
        }
        if self.storage_images_smallest == 0 {
            return bad("storage_images_smallest must be >= 1");
        }
        let weights = self.popularity.weights(self.num_services);
        if weights.len() != self.num_services || weights.iter().any(|w| !(*w >= 0.0)) {
            return bad("popularity needs one non-negative weight per service");
        }
        if (weights.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return bad("popularity weights must sum to 1");
        }
        if !(self.penalty_multiplier > 0.0 && self.initial_penalty_s > 0.0) {
            return bad("penalties must be > 0");
        }
        Ok(())
    }
}

/// Static catalogue plus the initial node states for one seed.
#[derive(Debug, Clone)]
pub struct Cluster {
    pub nodes: Vec<NodeState>,
    pub images: Vec<Image>,
    pub services: Vec<Service>,
}

impl Cluster {
    /// Builds nodes laid out on an even grid over the unit square, with
    /// storage tiers sized from the generated images and a few random images
    /// pre-cached on each node.
    pub fn generate(cfg: &SimConfig) -> Result<Self, SimError> {
        cfg.validate()?;
        let mut rng = stream_rng(cfg.rng_seed, CLUSTER_STREAM);
        let images: Vec<Image> = (0..cfg.num_images)
            .map(|id| Image {
                id,
                size_mb: cfg.image_size_mb.sample(&mut rng),
            })
            .collect();
        let services: Vec<Service> = (0..cfg.num_services)
            .map(|id| Service {
                id,
                image_id: id % cfg.num_images,
                start_time_s: cfg.service_start_s.sample(&mut rng),
                work_units: cfg.service_work_units.sample(&mut rng),
            })
            .collect();

        let mut sorted: Vec<f64> = images.iter().map(|i| i.size_mb).collect();
        sorted.sort_by(f64::total_cmp);
        let base_storage: f64 = sorted.iter().take(cfg.storage_images_smallest).sum();

        let cols = (cfg.num_nodes as f64).sqrt().ceil() as usize;
        let rows = cfg.num_nodes.div_ceil(cols);
        let mut nodes = Vec::with_capacity(cfg.num_nodes);
        for id in 0..cfg.num_nodes {
            let (r, c) = (id / cols, id % cols);
            let location = Point::new((c as f64 + 0.5) / cols as f64, (r as f64 + 0.5) / rows as f64);
            let tier = cfg.storage_tiers[id % cfg.storage_tiers.len()];
            let spec = NodeSpec {
                location,
                cpu: cfg.node_cpu.sample(&mut rng),
                mem_mb: cfg.node_mem_mb.sample(&mut rng),
                storage_mb: tier * base_storage + cfg.storage_data_headroom_mb,
                bandwidth: cfg.node_bandwidth.sample(&mut rng),
                cloud_bandwidth: cfg.cloud_bandwidth.sample(&mut rng),
            };
            let mut node = NodeState::new(id, spec, cfg.num_images);
            let mut order: Vec<ImageId> = (0..cfg.num_images).collect();
            order.shuffle(&mut rng);
            let budget = node.storage_capacity - cfg.storage_data_headroom_mb;
            for m in order.into_iter().take(cfg.initial_images_per_node) {
                if node.cached_mb() + images[m].size_mb <= budget {
                    node.insert_image(&images[m])?;
                }
            }
            nodes.push(node);
        }
        Ok(Self {
            nodes,
            images,
            services,
        })
    }
}

/// Draws `num_tasks` tasks with Poisson arrivals, services from the
/// popularity distribution and uniform demands.
pub fn generate_workload(cfg: &SimConfig) -> Result<Vec<Task>, SimError> {
    cfg.validate()?;
    let mut rng = stream_rng(cfg.rng_seed, WORKLOAD_STREAM);
    let weights = cfg.popularity.weights(cfg.num_services);
    let mut cumulative = Vec::with_capacity(weights.len());
    let mut acc = 0.0;
    for w in &weights {
        acc += w;
        cumulative.push(acc);
    }
    let mut clock = 0.0f64;
    let mut tasks = Vec::with_capacity(cfg.num_tasks);
    for id in 0..cfg.num_tasks {
        let u: f64 = rng.gen::<f64>();
        clock += -(1.0 - u).ln() / cfg.arrival_rate;
        let draw: f64 = rng.gen::<f64>() * acc;
        let service_id = cumulative
            .iter()
            .position(|&c| draw < c)
            .unwrap_or(cfg.num_services - 1);
        tasks.push(Task {
            id,
            service_id,
            data_size_mb: cfg.task_data_mb.sample(&mut rng),
            location: Point::new(rng.gen(), rng.gen()),
            cpu_demand: cfg.task_cpu.sample(&mut rng),
            mem_demand: cfg.task_mem_mb.sample(&mut rng),
            bandwidth_demand: cfg.task_bandwidth.sample(&mut rng),
            arrival_slot: clock.floor() as u64,
        });
    }
    Ok(tasks)
}

/// Transfer time of the task's data plus a fixed base latency. Link bandwidth
/// is the task's demand capped by what the node has left, reduced linearly
/// with user-node distance.
pub fn communication_delay(
    task: &Task,
    node: &NodeState,
    base_latency_s: f64,
    distance_factor: f64,
) -> Result<f64, SimError> {
    let link = task.bandwidth_demand.min(node.bandwidth_available)
        * (1.0 - distance_factor * task.location.distance(&node.location));
    if !(link > 0.0) {
        return Err(SimError::InfeasibleLink {
            task: task.id,
            node: node.id,
            bandwidth: link,
        });
    }
    Ok(task.data_size_mb / link + base_latency_s)
}

/// Work divided by the CPU share the task receives. The share is its demand,
/// shrunk by `contention` times the node's current utilisation.
pub fn computation_delay(task: &Task, node: &NodeState, service: &Service, contention: f64) -> Result<f64, SimError> {
    let utilisation = 1.0 - node.cpu_available / node.cpu_capacity;
    let share = task.cpu_demand * (1.0 - contention * utilisation.clamp(0.0, 1.0));
    if !(share > 0.0) {
        return Err(SimError::ZeroCpu {
            task: task.id,
            node: node.id,
        });
    }
    Ok(service.work_units / share)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    Bandwidth,
    Compute,
    Storage,
    Uncacheable,
}

#[derive(Debug, Clone, PartialEq)]
pub enum SimEvent {
    Request {
        slot: u64,
        task: Task,
    },
    Reward {
        slot: u64,
        task_id: TaskId,
        node: NodeId,
        delay: DelayRecord,
    },
    Failure {
        slot: u64,
        task_id: TaskId,
        node: NodeId,
        reason: RejectReason,
        penalty_s: f64,
    },
}

impl SimEvent {
    pub fn slot(&self) -> u64 {
        match self {
            SimEvent::Request { slot, .. } | SimEvent::Reward { slot, .. } | SimEvent::Failure { slot, .. } => *slot,
        }
    }

    pub fn task_id(&self) -> TaskId {
        match self {
            SimEvent::Request { task, .. } => task.id,
            SimEvent::Reward { task_id, .. } | SimEvent::Failure { task_id, .. } => *task_id,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum StepOutcome {
    Admitted {
        delay: DelayRecord,
        completion_slot: u64,
        pulled: bool,
        evicted: Vec<ImageId>,
    },
    Rejected {
        reason: RejectReason,
        penalty_s: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CacheOp {
    Pull,
    Evict,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CacheLogEntry {
    pub slot: u64,
    pub node: NodeId,
    pub image: ImageId,
    pub op: CacheOp,
}

#[derive(Debug, Clone)]
struct PullQueue {
    busy_until_s: f64,
    ready_at_s: Vec<f64>,
}

#[derive(Debug, Clone)]
struct Running {
    node: NodeId,
    task: Task,
    event: SimEvent,
}

/// One simulation run: live cluster state, image caches and the queue of
/// pending completions.
#[derive(Debug, Clone)]
pub struct Simulator {
    cfg: SimConfig,
    nodes: Vec<NodeState>,
    images: Vec<Image>,
    services: Vec<Service>,
    lfu: LfuMemory,
    pulls: Vec<PullQueue>,
    queue: BinaryHeap<Reverse<(u64, u64)>>,
    running: HashMap<u64, Running>,
    seq: u64,
    now: u64,
    worst_feasible_s: Option<f64>,
    cache_log: Vec<CacheLogEntry>,
}

impl Simulator {
    pub fn new(cfg: SimConfig, policy: CachePolicy) -> Result<Self, SimError> {
        let cluster = Cluster::generate(&cfg)?;
        Ok(Self::from_cluster(cfg, cluster, policy))
    }

    pub fn from_cluster(cfg: SimConfig, cluster: Cluster, policy: CachePolicy) -> Self {
        let lfu = LfuMemory::seeded(policy, &cluster.nodes);
        let pulls = cluster
            .nodes
            .iter()
            .map(|_| PullQueue {
                busy_until_s: 0.0,
                ready_at_s: vec![0.0; cluster.images.len()],
            })
            .collect();
        Self {
            cfg,
            nodes: cluster.nodes,
            images: cluster.images,
            services: cluster.services,
            lfu,
            pulls,
            queue: BinaryHeap::new(),
            running: HashMap::new(),
            seq: 0,
            now: 0,
            worst_feasible_s: None,
            cache_log: Vec::new(),
        }
    }

    pub fn config(&self) -> &SimConfig {
        &self.cfg
    }

    pub fn nodes(&self) -> &[NodeState] {
        &self.nodes
    }

    pub fn images(&self) -> &[Image] {
        &self.images
    }

    pub fn services(&self) -> &[Service] {
        &self.services
    }

    pub fn lfu(&self) -> &LfuMemory {
        &self.lfu
    }

    pub fn now(&self) -> u64 {
        self.now
    }

    pub fn cache_log(&self) -> &[CacheLogEntry] {
        &self.cache_log
    }

    pub fn image_of(&self, service: ServiceId) -> Result<ImageId, SimError> {
        self.services
            .get(service)
            .map(|s| s.image_id)
            .ok_or(SimError::UnknownService(service))
    }

    /// Presence of the task's image on every node.
    pub fn image_mask(&self, task: &Task) -> Result<Vec<bool>, SimError> {
        let m = self.image_of(task.service_id)?;
        Ok(self.nodes.iter().map(|n| n.has_image(m)).collect())
    }

    pub fn in_flight(&self) -> usize {
        self.running.len()
    }

    pub fn next_event_slot(&self) -> Option<u64> {
        self.queue.peek().map(|Reverse((slot, _))| *slot)
    }

    /// Tasks currently holding resources on `node`.
    pub fn running_on(&self, node: NodeId) -> impl Iterator<Item = &Task> {
        self.running.values().filter(move |r| r.node == node).map(|r| &r.task)
    }

    fn now_s(&self) -> f64 {
        self.now as f64 * self.cfg.slot_duration_s
    }

    fn penalty(&self) -> f64 {
        self.worst_feasible_s
            .map_or(self.cfg.initial_penalty_s, |w| w * self.cfg.penalty_multiplier)
    }

    /// Moves the clock to `slot` and returns every completion or failure due
    /// by then, in (slot, submission) order. Completed tasks release their
    /// resources.
    pub fn advance_to(&mut self, slot: u64) -> Vec<SimEvent> {
        let mut due = Vec::new();
        while let Some(&Reverse((at, seq))) = self.queue.peek() {
            if at > slot {
                break;
            }
            self.queue.pop();
            let run = self.running.remove(&seq).expect("queued entry has a record");
            if matches!(run.event, SimEvent::Reward { .. }) {
                self.nodes[run.node].release(&run.task);
            }
            due.push(run.event);
        }
        self.now = self.now.max(slot);
        due
    }

    fn enqueue(&mut self, slot: u64, node: NodeId, task: Task, event: SimEvent) {
        let seq = self.seq;
        self.seq += 1;
        self.queue.push(Reverse((slot, seq)));
        self.running.insert(seq, Running { node, task, event });
    }

    fn start_pull(&mut self, node: NodeId, image: ImageId) -> f64 {
        let now_s = self.now_s();
        let queue = &mut self.pulls[node];
        let start = queue.busy_until_s.max(now_s);
        let done = start + self.images[image].size_mb / self.nodes[node].cloud_bandwidth;
        queue.busy_until_s = done;
        queue.ready_at_s[image] = done;
        self.cache_log.push(CacheLogEntry {
            slot: self.now,
            node,
            image,
            op: CacheOp::Pull,
        });
        done
    }

    fn log_evictions(&mut self, node: NodeId, evicted: &[ImageId]) {
        for &image in evicted {
            self.pulls[node].ready_at_s[image] = 0.0;
            self.cache_log.push(CacheLogEntry {
                slot: self.now,
                node,
                image,
                op: CacheOp::Evict,
            });
        }
    }

    /// Seconds until `image` is usable on `node` plus the service start time.
    /// Pulls the image first (evicting as the cache policy dictates) when it
    /// is absent; `reserve_mb` of storage is kept free for the task's data.
    pub fn waiting_delay(
        &mut self,
        node: NodeId,
        service: ServiceId,
        reserve_mb: f64,
    ) -> Result<(f64, bool, Vec<ImageId>), SimError> {
        let svc = *self.services.get(service).ok_or(SimError::UnknownService(service))?;
        let node_state = self.nodes.get_mut(node).ok_or(SimError::UnknownNode(node))?;
        let image = self.images[svc.image_id];
        let mut evicted = Vec::new();
        let pulled = !node_state.has_image(image.id);
        if pulled {
            evicted = self
                .lfu
                .ensure_capacity_reserving(node_state, &self.images, &image, reserve_mb)?;
            self.log_evictions(node, &evicted);
            self.start_pull(node, image.id);
        }
        let ready = (self.pulls[node].ready_at_s[image.id] - self.now_s()).max(0.0);
        Ok((ready + svc.start_time_s, pulled, evicted))
    }

    /// Applies a scheduling decision for `task` on `node`.
    pub fn step(&mut self, node: NodeId, task: &Task) -> Result<StepOutcome, SimError> {
        if node >= self.nodes.len() {
            return Err(SimError::UnknownNode(node));
        }
        if task.arrival_slot < self.now {
            return Err(SimError::PastArrival {
                task: task.id,
                arrival: task.arrival_slot,
                now: self.now,
            });
        }
        let svc = *self
            .services
            .get(task.service_id)
            .ok_or(SimError::UnknownService(task.service_id))?;
        self.now = task.arrival_slot;

        let state = &self.nodes[node];
        let reject = if !check_bandwidth(state, task) {
            Some(RejectReason::Bandwidth)
        } else if !check_compute(state, task) {
            Some(RejectReason::Compute)
        } else if state.has_image(svc.image_id) {
            if check_storage(state, task, None) {
                None
            } else {
                let state = &mut self.nodes[node];
                match self
                    .lfu
                    .make_room(state, &self.images, task.data_size_mb, Some(svc.image_id))?
                {
                    Some(evicted) => {
                        self.log_evictions(node, &evicted);
                        None
                    }
                    None => Some(RejectReason::Storage),
                }
            }
        } else {
            let needed = self.images[svc.image_id].size_mb + task.data_size_mb;
            (needed > state.usable_image_storage()).then_some(RejectReason::Uncacheable)
        };
        if let Some(reason) = reject {
            let penalty_s = self.penalty();
            let event = SimEvent::Failure {
                slot: self.now + 1,
                task_id: task.id,
                node,
                reason,
                penalty_s,
            };
            self.enqueue(self.now + 1, node, task.clone(), event);
            return Ok(StepOutcome::Rejected { reason, penalty_s });
        }

        let comm = communication_delay(
            task,
            &self.nodes[node],
            self.cfg.base_latency_s,
            self.cfg.distance_bandwidth_factor,
        )?;
        let comp = computation_delay(task, &self.nodes[node], &svc, self.cfg.contention_factor)?;
        let (wait, pulled, evicted) = self.waiting_delay(node, task.service_id, task.data_size_mb)?;
        self.nodes[node].admit(task)?;
        self.lfu.touch(node, svc.image_id)?;

        let delay = DelayRecord::new(comm, wait, comp);
        self.worst_feasible_s = Some(self.worst_feasible_s.map_or(delay.total_s, |w| w.max(delay.total_s)));
        let slots = ((delay.total_s / self.cfg.slot_duration_s).ceil() as u64).max(1);
        let completion_slot = self.now + slots;
        let event = SimEvent::Reward {
            slot: completion_slot,
            task_id: task.id,
            node,
            delay,
        };
        self.enqueue(completion_slot, node, task.clone(), event);
        Ok(StepOutcome::Admitted {
            delay,
            completion_slot,
            pulled,
            evicted,
        })
    }

    /// Background caching decision: make `image` resident on `node`.
    /// Returns `None` when the image can never fit there.
    pub fn cache_image(&mut self, node: NodeId, image: ImageId) -> Result<Option<Vec<ImageId>>, SimError> {
        let state = self.nodes.get_mut(node).ok_or(SimError::UnknownNode(node))?;
        let img = *self
            .images
            .get(image)
            .ok_or(SimError::Model(ModelError::UnknownImage(image, node)))?;
        if state.has_image(image) {
            self.lfu.touch(node, image)?;
            return Ok(Some(Vec::new()));
        }
        let evicted = match self.lfu.ensure_capacity(state, &self.images, &img) {
            Ok(evicted) => evicted,
            Err(CacheError::Uncacheable { .. }) => return Ok(None),
            Err(e) => return Err(e.into()),
        };
        self.log_evictions(node, &evicted);
        self.start_pull(node, image);
        self.lfu.touch(node, image)?;
        Ok(Some(evicted))
    }
}

/// Writes tasks as `task_id,arrival_slot,service_id,data_mb,cpu,mem,bw,x,y`,
/// one per line, no header.
pub fn write_trace<W: Write>(tasks: &[Task], out: W) -> Result<(), SimError> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    for t in tasks {
        w.write_record(&[
            t.id.to_string(),
            t.arrival_slot.to_string(),
            t.service_id.to_string(),
            t.data_size_mb.to_string(),
            t.cpu_demand.to_string(),
            t.mem_demand.to_string(),
            t.bandwidth_demand.to_string(),
            t.location.x.to_string(),
            t.location.y.to_string(),
        ])
        .map_err(|e| SimError::Trace(e.to_string()))?;
    }
    w.flush().map_err(|e| SimError::Trace(e.to_string()))
}

pub fn read_trace<R: Read>(input: R) -> Result<Vec<Task>, SimError> {
    let mut r = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(input);
    let mut tasks = Vec::new();
    let mut last_slot = 0;
    for (line, record) in r.records().enumerate() {
        let record = record.map_err(|e| SimError::Trace(e.to_string()))?;
        if record.len() != 9 {
            return Err(SimError::Trace(format!("line {}: expected 9 fields", line + 1)));
        }
        let num = |i: usize| -> Result<f64, SimError> {
            record[i]
                .parse::<f64>()
                .map_err(|e| SimError::Trace(format!("line {}: field {}: {e}", line + 1, i + 1)))
        };
        let int = |i: usize| -> Result<u64, SimError> {
            record[i]
                .parse::<u64>()
                .map_err(|e| SimError::Trace(format!("line {}: field {}: {e}", line + 1, i + 1)))
        };
        let task = Task {
            id: int(0)? as TaskId,
            arrival_slot: int(1)?,
            service_id: int(2)? as ServiceId,
            data_size_mb: num(3)?,
            cpu_demand: num(4)?,
            mem_demand: num(5)?,
            bandwidth_demand: num(6)?,
            location: Point::new(num(7)?, num(8)?),
        };
        if task.arrival_slot < last_slot {
            return Err(SimError::Trace(format!(
                "line {}: arrival slots must not decrease",
                line + 1
            )));
        }
        last_slot = task.arrival_slot;
        tasks.push(task);
    }
    Ok(tasks)
}
