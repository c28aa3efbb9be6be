//! Decision loop for joint task scheduling and image caching, plus the greedy
//! and round-robin baselines.
//!
//! Every `request` picks a node for the task from the scheduling head (masked
//! to nodes already holding the task's image) and an (image, node) pair from
//! the caching head. The latest caching pair is executed on each caching
//! boundary. When a task's completion (or failure) arrives, the scheduling
//! transition is rewarded with the negative total delay and the caching
//! transition with the popularity of its pair over the following window.

use std::collections::{HashMap, VecDeque};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{DelayRecord, ImageId, NodeId, NodeState, Task, TaskId};
use crate::qnet::{Head, QNetwork, QnetError, ReplayMemory, StateDims, TrainConfig, Transition, Weights};
use crate::sim::{RejectReason, SimError, SimEvent, Simulator, StepOutcome};

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("cannot schedule on an empty cluster")]
    NoNodes,
    #[error("completion of task {0} has no stashed decision")]
    MissingStash(TaskId),
    #[error("unknown task {0} in completion event")]
    UnknownTask(TaskId),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Qnet(#[from] QnetError),
}

/// The observation fed to the Q-network.
///
/// - `nodes`: per node `[cpu, mem, storage]` availability as a fraction of
///   capacity, then one presence bit per image.
/// - `task`: one-hot requested service, data size scaled by the largest
///   expected size, then the task's (x, y) location.
/// - `requests`: node × image request counts over the recent window, divided
///   by the window's largest count.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EncodedState {
    pub nodes: Vec<f64>,
    pub task: Vec<f64>,
    pub requests: Vec<f64>,
}

pub fn state_dims(num_nodes: usize, num_services: usize, num_images: usize) -> StateDims {
    StateDims {
        node_block: num_nodes * (3 + num_images),
        task_block: num_services + 3,
        request_block: num_nodes * num_images,
        num_nodes,
        num_images,
    }
}

fn fraction(available: f64, capacity: f64) -> f64 {
    if capacity > 0.0 {
        (available / capacity).clamp(0.0, 1.0)
    } else {
        0.0
    }
}

pub fn encode_state(
    nodes: &[NodeState],
    task: &Task,
    num_services: usize,
    data_scale_mb: f64,
    requests: &RequestMatrix,
) -> EncodedState {
    let mut node_block = Vec::with_capacity(nodes.len() * (3 + requests.num_images));
    for n in nodes {
        node_block.push(fraction(n.cpu_available, n.cpu_capacity));
        node_block.push(fraction(n.mem_available, n.mem_capacity));
        node_block.push(fraction(n.storage_available, n.storage_capacity));
        node_block.extend(n.cached_images.iter().map(|&c| if c { 1.0 } else { 0.0 }));
    }
    let mut task_block = vec![0.0; num_services + 3];
    task_block[task.service_id] = 1.0;
    task_block[num_services] = if data_scale_mb > 0.0 {
        (task.data_size_mb / data_scale_mb).clamp(0.0, 1.0)
    } else {
        0.0
    };
    task_block[num_services + 1] = task.location.x;
    task_block[num_services + 2] = task.location.y;
    let peak = requests.counts.iter().copied().max().unwrap_or(0).max(1) as f64;
    EncodedState {
        nodes: node_block,
        task: task_block,
        requests: requests.counts.iter().map(|&c| c as f64 / peak).collect(),
    }
}

/// Node × image request counts, row-major by node.
#[derive(Debug, Clone, PartialEq)]
pub struct RequestMatrix {
    pub num_nodes: usize,
    pub num_images: usize,
    pub counts: Vec<u32>,
}

impl RequestMatrix {
    pub fn zeros(num_nodes: usize, num_images: usize) -> Self {
        Self {
            num_nodes,
            num_images,
            counts: vec![0; num_nodes * num_images],
        }
    }
}

/// Requests scheduled during the last `span` slots, by chosen node and image.
#[derive(Debug, Clone)]
pub struct RequestWindow {
    span: u64,
    num_nodes: usize,
    num_images: usize,
    entries: VecDeque<(u64, NodeId, ImageId)>,
}

impl RequestWindow {
    pub fn new(span: u64, num_nodes: usize, num_images: usize) -> Self {
        Self {
            span: span.max(1),
            num_nodes,
            num_images,
            entries: VecDeque::new(),
        }
    }

    pub fn record(&mut self, slot: u64, node: NodeId, image: ImageId) {
        self.entries.push_back((slot, node, image));
    }

    pub fn matrix(&mut self, now: u64) -> RequestMatrix {
        while self
            .entries
            .front()
            .is_some_and(|&(slot, _, _)| slot + self.span <= now)
        {
            self.entries.pop_front();
        }
        let mut m = RequestMatrix::zeros(self.num_nodes, self.num_images);
        for &(_, node, image) in &self.entries {
            m.counts[node * self.num_images + image] += 1;
        }
        m
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SchedulingChoice {
    pub node: NodeId,
    /// Nodes whose Q-value is strictly above the chosen node's.
    pub unscheduled: Vec<NodeId>,
    /// Whether any node holds the requested image.
    pub masked: bool,
    pub explored: bool,
    pub eps_draw: f64,
}

/// ε-greedy node choice restricted to nodes holding the requested image;
/// uniform over all nodes when exploring or when no node holds it.
pub fn select_scheduling_action<R: Rng>(
    q: &[f64],
    image_mask: &[bool],
    epsilon: f64,
    rng: &mut R,
) -> Result<SchedulingChoice, AgentError> {
    if q.is_empty() {
        return Err(AgentError::NoNodes);
    }
    let eps_draw: f64 = rng.gen();
    let masked = image_mask.iter().any(|&m| m);
    let explored = eps_draw < epsilon;
    let node = if explored || !masked {
        rng.gen_range(0..q.len())
    } else {
        let mut best: Option<NodeId> = None;
        for (n, _) in image_mask.iter().enumerate().filter(|(_, &m)| m) {
            if best.is_none_or(|b| q[n] > q[b]) {
                best = Some(n);
            }
        }
        best.expect("mask has at least one node")
    };
    let unscheduled = (0..q.len()).filter(|&n| q[n] > q[node]).collect();
    Ok(SchedulingChoice {
        node,
        unscheduled,
        masked,
        explored,
        eps_draw,
    })
}

/// A caching decision: make `image` resident on `node`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CachingPair {
    pub image: ImageId,
    pub node: NodeId,
}

impl CachingPair {
    pub fn flat(&self, num_images: usize) -> usize {
        self.node * num_images + self.image
    }

    pub fn from_flat(index: usize, num_images: usize) -> Self {
        Self {
            image: index % num_images,
            node: index / num_images,
        }
    }
}

/// ε-greedy over the flat (node, image) space; ties go to the lowest index.
pub fn select_caching_action<R: Rng>(q: &[f64], num_images: usize, epsilon: f64, rng: &mut R) -> CachingPair {
    let index = if rng.gen::<f64>() < epsilon {
        rng.gen_range(0..q.len())
    } else {
        crate::qnet::argmax(q)
    };
    CachingPair::from_flat(index, num_images)
}

pub fn scheduling_reward(delay: &DelayRecord) -> f64 {
    -delay.total_s
}

/// Binary node × image matrix marking where the task's image would have
/// served it: the chosen node and every node the scheduler rated higher.
#[derive(Debug, Clone, PartialEq)]
pub struct PopularityMatrix {
    pub num_nodes: usize,
    pub num_images: usize,
    cells: Vec<bool>,
}

impl PopularityMatrix {
    pub fn get(&self, node: NodeId, image: ImageId) -> bool {
        self.cells[node * self.num_images + image]
    }

    pub fn ones(&self) -> impl Iterator<Item = (NodeId, ImageId)> + '_ {
        self.cells
            .iter()
            .enumerate()
            .filter(|(_, &c)| c)
            .map(|(i, _)| (i / self.num_images, i % self.num_images))
    }
}

pub fn build_popularity_matrix(
    chosen: NodeId,
    unscheduled: &[NodeId],
    image: ImageId,
    num_nodes: usize,
    num_images: usize,
) -> PopularityMatrix {
    let mut cells = vec![false; num_nodes * num_images];
    for &n in unscheduled.iter().chain(std::iter::once(&chosen)) {
        cells[n * num_images + image] = true;
    }
    PopularityMatrix {
        num_nodes,
        num_images,
        cells,
    }
}

/// Sum of `g[node][image]` over matrices stamped in `[from, from + window)`.
pub fn caching_reward(history: &[(u64, PopularityMatrix)], pair: CachingPair, from: u64, window: u64) -> f64 {
    history
        .iter()
        .filter(|(slot, _)| (from..from + window).contains(slot))
        .filter(|(_, g)| g.get(pair.node, pair.image))
        .count() as f64
}

/// Node with the most available CPU; ties go to the lowest id.
pub fn baseline_grd(nodes: &[NodeState]) -> Result<NodeId, AgentError> {
    let mut best: Option<&NodeState> = None;
    for n in nodes {
        if best.is_none_or(|b| n.cpu_available > b.cpu_available) {
            best = Some(n);
        }
    }
    best.map(|n| n.id).ok_or(AgentError::NoNodes)
}

#[derive(Debug, Clone, Default)]
pub struct RoundRobin {
    counter: usize,
}

impl RoundRobin {
    pub fn next(&mut self, num_nodes: usize) -> Result<NodeId, AgentError> {
        if num_nodes == 0 {
            return Err(AgentError::NoNodes);
        }
        let node = self.counter % num_nodes;
        self.counter += 1;
        Ok(node)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Decision {
    pub node: NodeId,
    pub masked: bool,
    pub eps_draw: Option<f64>,
}

/// A scheduling policy driven by [`run_episode`].
pub trait Policy {
    fn decide(&mut self, sim: &Simulator, task: &Task) -> Result<Decision, AgentError>;

    /// Called after `sim.step` for the decided task.
    fn on_admitted(&mut self, _sim: &Simulator, _task: &Task, _outcome: &StepOutcome) {}

    /// Called for each completion or failure. `terminal` marks the last
    /// event of the episode.
    fn on_outcome(
        &mut self,
        _sim: &Simulator,
        _event: &SimEvent,
        _task: &Task,
        _terminal: bool,
    ) -> Result<(), AgentError> {
        Ok(())
    }

    /// Called once per slot after requests are handled.
    fn on_slot_end(&mut self, _sim: &mut Simulator, _slot: u64) -> Result<(), AgentError> {
        Ok(())
    }
}

pub struct Greedy;

impl Policy for Greedy {
    fn decide(&mut self, sim: &Simulator, _task: &Task) -> Result<Decision, AgentError> {
        Ok(Decision {
            node: baseline_grd(sim.nodes())?,
            masked: false,
            eps_draw: None,
        })
    }
}

impl Policy for RoundRobin {
    fn decide(&mut self, sim: &Simulator, _task: &Task) -> Result<Decision, AgentError> {
        Ok(Decision {
            node: self.next(sim.nodes().len())?,
            masked: false,
            eps_draw: None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AgentConfig {
    pub epsilon: f64,
    /// Slots between executions of the latest caching decision.
    pub caching_update: u64,
    /// Keep training while evaluating with ε = 0.
    pub learn_during_eval: bool,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.5,
            caching_update: 10,
            learn_during_eval: true,
        }
    }
}

#[derive(Debug, Clone)]
struct Stashed {
    slot: u64,
    state: EncodedState,
    node: NodeId,
    pair: CachingPair,
}

/// The learning scheduler: Q-network, both replay memories and the
/// per-episode bookkeeping of pending decisions.
#[derive(Debug, Clone)]
pub struct TsicAgent {
    pub net: QNetwork,
    pub scheduling_memory: ReplayMemory,
    pub caching_memory: ReplayMemory,
    cfg: AgentConfig,
    epsilon: f64,
    learn: bool,
    rng: ChaCha8Rng,
    data_scale_mb: f64,
    num_services: usize,
    reward_events: u64,
    pushes: u64,
    syncs: u64,
    // per-episode state
    stash: HashMap<TaskId, Stashed>,
    window: RequestWindow,
    popularity: Vec<(u64, PopularityMatrix)>,
    latest_pair: Option<CachingPair>,
    caching_executions: Vec<(u64, CachingPair)>,
}

impl TsicAgent {
    pub fn new(net: QNetwork, cfg: AgentConfig, num_services: usize, data_scale_mb: f64, rng: ChaCha8Rng) -> Self {
        let dims = *net.dims();
        let capacity = net.config().replay_capacity;
        Self {
            scheduling_memory: ReplayMemory::new(capacity),
            caching_memory: ReplayMemory::new(capacity),
            net,
            cfg,
            epsilon: cfg.epsilon,
            learn: true,
            rng,
            data_scale_mb,
            num_services,
            reward_events: 0,
            pushes: 0,
            syncs: 0,
            stash: HashMap::new(),
            window: RequestWindow::new(cfg.caching_update, dims.num_nodes, dims.num_images),
            popularity: Vec::new(),
            latest_pair: None,
            caching_executions: Vec::new(),
        }
    }

    /// Builds a fresh randomly initialised agent for a simulator's shape.
    pub fn for_simulator(sim: &Simulator, cfg: AgentConfig, train: TrainConfig, mut rng: ChaCha8Rng) -> Self {
        let c = sim.config();
        let dims = state_dims(c.num_nodes, c.num_services, c.num_images);
        let net = QNetwork::new(dims, train, &mut rng);
        Self::new(net, cfg, c.num_services, c.task_data_mb.max, rng)
    }

    /// Sets exploration and learning for the next episode and clears the
    /// per-episode bookkeeping. Network and replay memories persist.
    pub fn begin_episode(&mut self, epsilon: f64, learn: bool) {
        self.epsilon = epsilon;
        self.learn = learn;
        let dims = *self.net.dims();
        self.stash.clear();
        self.window = RequestWindow::new(self.cfg.caching_update, dims.num_nodes, dims.num_images);
        self.popularity.clear();
        self.latest_pair = None;
        self.caching_executions.clear();
    }

    pub fn config(&self) -> &AgentConfig {
        &self.cfg
    }

    pub fn reward_events(&self) -> u64 {
        self.reward_events
    }

    pub fn transitions_pushed(&self) -> u64 {
        self.pushes
    }

    pub fn target_syncs(&self) -> u64 {
        self.syncs
    }

    pub fn caching_executions(&self) -> &[(u64, CachingPair)] {
        &self.caching_executions
    }

    pub fn popularity_history(&self) -> &[(u64, PopularityMatrix)] {
        &self.popularity
    }

    pub fn encode(&mut self, sim: &Simulator, task: &Task) -> EncodedState {
        let requests = self.window.matrix(sim.now());
        encode_state(sim.nodes(), task, self.num_services, self.data_scale_mb, &requests)
    }
}

impl Policy for TsicAgent {
    fn decide(&mut self, sim: &Simulator, task: &Task) -> Result<Decision, AgentError> {
        let slot = task.arrival_slot;
        let requests = self.window.matrix(slot);
        let state = encode_state(sim.nodes(), task, self.num_services, self.data_scale_mb, &requests);
        let q_sched = self.net.forward(&state, Head::Scheduling, Weights::Policy)?;
        let mask = sim.image_mask(task)?;
        let choice = select_scheduling_action(&q_sched, &mask, self.epsilon, &mut self.rng)?;
        let q_cache = self.net.forward(&state, Head::Caching, Weights::Policy)?;
        let pair = select_caching_action(&q_cache, self.net.dims().num_images, self.epsilon, &mut self.rng);

        let image = sim.image_of(task.service_id)?;
        let dims = self.net.dims();
        self.popularity.push((
            slot,
            build_popularity_matrix(choice.node, &choice.unscheduled, image, dims.num_nodes, dims.num_images),
        ));
        self.window.record(slot, choice.node, image);
        self.latest_pair = Some(pair);
        self.stash.insert(
            task.id,
            Stashed {
                slot,
                state,
                node: choice.node,
                pair,
            },
        );
        Ok(Decision {
            node: choice.node,
            masked: choice.masked,
            eps_draw: Some(choice.eps_draw),
        })
    }

    fn on_outcome(&mut self, sim: &Simulator, event: &SimEvent, task: &Task, terminal: bool) -> Result<(), AgentError> {
        let reward_s = match event {
            SimEvent::Reward { delay, .. } => scheduling_reward(delay),
            SimEvent::Failure { penalty_s, .. } => -penalty_s,
            SimEvent::Request { .. } => return Ok(()),
        };
        let stashed = self
            .stash
            .remove(&event.task_id())
            .ok_or(AgentError::MissingStash(event.task_id()))?;
        self.reward_events += 1;
        if !self.learn {
            return Ok(());
        }
        let reward_c = caching_reward(&self.popularity, stashed.pair, stashed.slot, self.cfg.caching_update);
        let next = (!terminal).then(|| {
            let requests = self.window.matrix(sim.now());
            encode_state(sim.nodes(), task, self.num_services, self.data_scale_mb, &requests)
        });
        let num_images = self.net.dims().num_images;
        self.scheduling_memory.push(Transition {
            state: stashed.state.clone(),
            action: stashed.node,
            reward: reward_s,
            next: next.clone(),
        });
        self.caching_memory.push(Transition {
            state: stashed.state,
            action: stashed.pair.flat(num_images),
            reward: reward_c,
            next,
        });
        self.pushes += 1;
        self.net
            .train_step(&self.scheduling_memory, &self.caching_memory, &mut self.rng)?;
        if self.reward_events.is_multiple_of(self.net.config().target_sync_period) {
            self.net.sync_target();
            self.syncs += 1;
        }
        Ok(())
    }

    fn on_slot_end(&mut self, sim: &mut Simulator, slot: u64) -> Result<(), AgentError> {
        if slot > 0 && slot.is_multiple_of(self.cfg.caching_update) {
            if let Some(pair) = self.latest_pair.take() {
                sim.cache_image(pair.node, pair.image)?;
                self.caching_executions.push((slot, pair));
            }
        }
        Ok(())
    }
}

/// One decision as logged for the trace CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub slot: u64,
    pub task_id: TaskId,
    pub action_node: NodeId,
    pub masked: bool,
    pub eps_draw: Option<f64>,
    pub reward: Option<f64>,
    pub delay: Option<DelayRecord>,
    pub failure: Option<RejectReason>,
}

#[derive(Debug, Clone, Default)]
pub struct EpisodeLog {
    /// One row per task, in arrival order.
    pub rows: Vec<TraceRow>,
    pub last_slot: u64,
}

impl EpisodeLog {
    pub fn completed(&self) -> impl Iterator<Item = &DelayRecord> {
        self.rows.iter().filter_map(|r| r.delay.as_ref())
    }

    pub fn failures(&self) -> usize {
        self.rows.iter().filter(|r| r.failure.is_some()).count()
    }
}

/// Feeds `tasks` (sorted by arrival) through `policy`, one slot at a time,
/// until every task has completed or failed.
pub fn run_episode<P: Policy>(sim: &mut Simulator, tasks: &[Task], policy: &mut P) -> Result<EpisodeLog, AgentError> {
    let index: HashMap<TaskId, usize> = tasks.iter().enumerate().map(|(i, t)| (t.id, i)).collect();
    let mut log = EpisodeLog {
        rows: Vec::with_capacity(tasks.len()),
        last_slot: 0,
    };
    let mut row_of: HashMap<TaskId, usize> = HashMap::with_capacity(tasks.len());
    let mut next = 0;
    let mut slot = sim.now();
    loop {
        let due = sim.advance_to(slot);
        let count = due.len();
        for (k, event) in due.iter().enumerate() {
            let task = &tasks[*index
                .get(&event.task_id())
                .ok_or(AgentError::UnknownTask(event.task_id()))?];
            let terminal = next == tasks.len() && sim.in_flight() == 0 && k + 1 == count;
            let row = &mut log.rows[row_of[&task.id]];
            match event {
                SimEvent::Reward { delay, .. } => {
                    row.reward = Some(scheduling_reward(delay));
                    row.delay = Some(*delay);
                }
                SimEvent::Failure { reason, penalty_s, .. } => {
                    row.reward = Some(-penalty_s);
                    row.failure = Some(*reason);
                }
                SimEvent::Request { .. } => {}
            }
            policy.on_outcome(sim, event, task, terminal)?;
        }
        while next < tasks.len() && tasks[next].arrival_slot <= slot {
            let task = &tasks[next];
            let decision = policy.decide(sim, task)?;
            let outcome = sim.step(decision.node, task)?;
            policy.on_admitted(sim, task, &outcome);
            row_of.insert(task.id, log.rows.len());
            log.rows.push(TraceRow {
                slot: task.arrival_slot,
                task_id: task.id,
                action_node: decision.node,
                masked: decision.masked,
                eps_draw: decision.eps_draw,
                reward: None,
                delay: None,
                failure: None,
            });
            next += 1;
        }
        policy.on_slot_end(sim, slot)?;
        if next == tasks.len() && sim.in_flight() == 0 {
            log.last_slot = slot;
            return Ok(log);
        }
        slot += 1;
    }
}
