//! State-sharing multi-action Q-network.
//!
//! Three encoders (node states, task features, request distribution) are
//! two-layer ReLU perceptrons. The scheduling head reads the node and task
//! encodings and scores every node; the caching head additionally reads the
//! request encoding and scores every (node, image) pair, flattened as
//! `node * num_images + image`. Both heads share the node and task encoders,
//! so gradients from both replay memories flow into them.
//!
//! Training is double DQN: the policy weights pick the greedy next action and
//! the target weights evaluate it.

use std::collections::VecDeque;
use std::io::{BufRead, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::EncodedState;

#[derive(Debug, Error)]
pub enum QnetError {
    #[error("{block} block has length {got}, network expects {expected}")]
    Shape {
        block: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("action {action} out of range for a head with {outputs} outputs")]
    ActionOutOfRange { action: usize, outputs: usize },
    #[error("non-finite {head:?} loss {loss} after {step} training steps")]
    NonFiniteLoss { head: Head, loss: f64, step: u64 },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Head {
    Scheduling,
    Caching,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Weights {
    Policy,
    Target,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub gamma: f64,
    pub batch_size: usize,
    pub replay_capacity: usize,
    /// Reward events between target-weight syncs.
    pub target_sync_period: u64,
    pub hidden: usize,
    pub seed: u64,
    /// Global L2 clip applied to the combined gradient before the SGD step.
    /// `None` leaves it unclipped.
    pub max_grad_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            gamma: 0.5,
            batch_size: 32,
            replay_capacity: 10_000,
            target_sync_period: 5,
            hidden: 64,
            seed: 0,
            max_grad_norm: Some(10.0),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(format!("gamma must lie in (0, 1], got {}", self.gamma));
        }
        if !(self.learning_rate > 0.0) {
            return Err(format!("learning_rate must be > 0, got {}", self.learning_rate));
        }
        if self.batch_size == 0 || self.replay_capacity < self.batch_size {
            return Err("need 0 < batch_size <= replay_capacity".into());
        }
        if matches!(self.max_grad_norm, Some(c) if !(c > 0.0)) {
            return Err("max_grad_norm must be > 0 when set".into());
        }
        if self.hidden == 0 || self.target_sync_period == 0 {
            return Err("hidden and target_sync_period must be >= 1".into());
        }
        Ok(())
    }
}

/// Input and output sizes of a network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateDims {
    pub node_block: usize,
    pub task_block: usize,
    pub request_block: usize,
    pub num_nodes: usize,
    pub num_images: usize,
}

impl StateDims {
    pub fn outputs(&self, head: Head) -> usize {
        match head {
            Head::Scheduling => self.num_nodes,
            Head::Caching => self.num_nodes * self.num_images,
        }
    }
}

/// Fully connected layer, weights stored row-major `[outputs][inputs]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }

    /// Uniform in `±sqrt(6 / inputs)` (He init) scaled by `gain`.
    fn random<R: Rng>(inputs: usize, outputs: usize, gain: f64, rng: &mut R) -> Self {
        let bound = gain * (6.0 / inputs.max(1) as f64).sqrt();
        let mut layer = Self::zeros(inputs, outputs);
        for w in &mut layer.weights {
            *w = rng.gen_range(-bound..bound);
        }
        layer
    }

    fn forward(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend(
            self.bias
                .iter()
                .zip(self.weights.chunks_exact(self.inputs))
                .map(|(b, row)| b + row.iter().zip(x).map(|(w, xi)| w * xi).sum::<f64>()),
        );
    }

    /// Accumulates parameter gradients into `grad` and, when `dx` is given,
    /// writes the input gradient there. Zero output gradients are skipped.
    fn backward(&self, x: &[f64], dout: &[f64], grad: &mut Dense, dx: Option<&mut [f64]>) {
        let mut dx = dx;
        if let Some(dx) = dx.as_deref_mut() {
            dx.iter_mut().for_each(|v| *v = 0.0);
        }
        for (o, &g) in dout.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            grad.bias[o] += g;
            let row = o * self.inputs..(o + 1) * self.inputs;
            for (gw, xi) in grad.weights[row.clone()].iter_mut().zip(x) {
                *gw += g * xi;
            }
            if let Some(dx) = dx.as_deref_mut() {
                for (d, w) in dx.iter_mut().zip(&self.weights[row]) {
                    *d += g * w;
                }
            }
        }
    }

    fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.weights.iter_mut().chain(self.bias.iter_mut())
    }

    fn params(&self) -> impl Iterator<Item = &f64> {
        self.weights.iter().chain(self.bias.iter())
    }
}

/// Two ReLU layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub hidden: Dense,
    pub output: Dense,
}

#[derive(Debug, Clone, Default)]
struct EncoderTrace {
    h1: Vec<f64>,
    h2: Vec<f64>,
}

impl Encoder {
    fn zeros(inputs: usize, width: usize) -> Self {
        Self {
            hidden: Dense::zeros(inputs, width),
            output: Dense::zeros(width, width),
        }
    }

    fn random<R: Rng>(inputs: usize, width: usize, rng: &mut R) -> Self {
        Self {
            hidden: Dense::random(inputs, width, 1.0, rng),
            output: Dense::random(width, width, 1.0, rng),
        }
    }

    fn forward(&self, x: &[f64], trace: &mut EncoderTrace) {
        self.hidden.forward(x, &mut trace.h1);
        relu(&mut trace.h1);
        self.output.forward(&trace.h1, &mut trace.h2);
        relu(&mut trace.h2);
    }

    /// `dout` is the gradient w.r.t. the encoder output (post-ReLU).
    fn backward(&self, x: &[f64], trace: &EncoderTrace, dout: &[f64], grad: &mut Encoder) {
        let d2: Vec<f64> = dout
            .iter()
            .zip(&trace.h2)
            .map(|(g, h)| if *h > 0.0 { *g } else { 0.0 })
            .collect();
        let mut dh1 = vec![0.0; trace.h1.len()];
        self.output.backward(&trace.h1, &d2, &mut grad.output, Some(&mut dh1));
        for (g, h) in dh1.iter_mut().zip(&trace.h1) {
            if *h <= 0.0 {
                *g = 0.0;
            }
        }
        self.hidden.backward(x, &dh1, &mut grad.hidden, None);
    }
}

fn relu(v: &mut [f64]) {
    v.iter_mut().for_each(|x| *x = x.max(0.0));
}

/// One full weight set (policy or target).
#[derive(Debug, Clone, PartialEq)]
pub struct QParams {
    pub nodes: Encoder,
    pub task: Encoder,
    pub requests: Encoder,
    pub scheduling: Dense,
    pub caching: Dense,
}

#[derive(Debug, Clone, Default)]
struct ForwardTrace {
    nodes: EncoderTrace,
    task: EncoderTrace,
    requests: EncoderTrace,
    joint: Vec<f64>,
    q: Vec<f64>,
}

impl QParams {
    pub fn zeros(dims: &StateDims, hidden: usize) -> Self {
        Self {
            nodes: Encoder::zeros(dims.node_block, hidden),
            task: Encoder::zeros(dims.task_block, hidden),
            requests: Encoder::zeros(dims.request_block, hidden),
            scheduling: Dense::zeros(2 * hidden, dims.outputs(Head::Scheduling)),
            caching: Dense::zeros(3 * hidden, dims.outputs(Head::Caching)),
        }
    }

    pub fn random<R: Rng>(dims: &StateDims, hidden: usize, rng: &mut R) -> Self {
        Self {
            nodes: Encoder::random(dims.node_block, hidden, rng),
            task: Encoder::random(dims.task_block, hidden, rng),
            requests: Encoder::random(dims.request_block, hidden, rng),
            scheduling: Dense::random(2 * hidden, dims.outputs(Head::Scheduling), 0.1, rng),
            caching: Dense::random(3 * hidden, dims.outputs(Head::Caching), 0.1, rng),
        }
    }

    fn layers(&self) -> [&Dense; 8] {
        [
            &self.nodes.hidden,
            &self.nodes.output,
            &self.task.hidden,
            &self.task.output,
            &self.requests.hidden,
            &self.requests.output,
            &self.scheduling,
            &self.caching,
        ]
    }

    fn layers_mut(&mut self) -> [&mut Dense; 8] {
        [
            &mut self.nodes.hidden,
            &mut self.nodes.output,
            &mut self.task.hidden,
            &mut self.task.output,
            &mut self.requests.hidden,
            &mut self.requests.output,
            &mut self.scheduling,
            &mut self.caching,
        ]
    }

    const LAYER_NAMES: [&'static str; 8] = [
        "nodes.hidden",
        "nodes.output",
        "task.hidden",
        "task.output",
        "requests.hidden",
        "requests.output",
        "scheduling",
        "caching",
    ];

    pub fn param_count(&self) -> usize {
        self.layers().iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    /// Every parameter in a fixed order (layer by layer, weights then bias).
    pub fn params(&self) -> impl Iterator<Item = &f64> {
        self.layers().into_iter().flat_map(|l| l.params())
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers_mut().into_iter().flat_map(|l| l.params_mut())
    }

    fn forward(&self, state: &EncodedState, head: Head, trace: &mut ForwardTrace) {
        self.nodes.forward(&state.nodes, &mut trace.nodes);
        self.task.forward(&state.task, &mut trace.task);
        trace.joint.clear();
        trace.joint.extend_from_slice(&trace.nodes.h2);
        trace.joint.extend_from_slice(&trace.task.h2);
        match head {
            Head::Scheduling => self.scheduling.forward(&trace.joint, &mut trace.q),
            Head::Caching => {
                self.requests.forward(&state.requests, &mut trace.requests);
                trace.joint.extend_from_slice(&trace.requests.h2);
                self.caching.forward(&trace.joint, &mut trace.q);
            }
        }
    }

    /// Backpropagates `dq` (gradient w.r.t. the head outputs) into `grad`.
    fn backward(&self, state: &EncodedState, head: Head, trace: &ForwardTrace, dq: &[f64], grad: &mut QParams) {
        let hidden = trace.nodes.h2.len();
        let mut djoint = vec![0.0; trace.joint.len()];
        let layer = match head {
            Head::Scheduling => (&self.scheduling, &mut grad.scheduling),
            Head::Caching => (&self.caching, &mut grad.caching),
        };
        layer.0.backward(&trace.joint, dq, layer.1, Some(&mut djoint));
        self.nodes
            .backward(&state.nodes, &trace.nodes, &djoint[..hidden], &mut grad.nodes);
        self.task
            .backward(&state.task, &trace.task, &djoint[hidden..2 * hidden], &mut grad.task);
        if head == Head::Caching {
            self.requests.backward(
                &state.requests,
                &trace.requests,
                &djoint[2 * hidden..],
                &mut grad.requests,
            );
        }
    }
}

/// A stored transition. `next` is `None` for the terminal transition.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: EncodedState,
    pub action: usize,
    pub reward: f64,
    pub next: Option<EncodedState>,
}

/// FIFO-bounded replay memory.
#[derive(Debug, Clone)]
pub struct ReplayMemory {
    capacity: usize,
    items: VecDeque<Transition>,
}

impl ReplayMemory {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity: capacity.max(1),
            items: VecDeque::with_capacity(capacity.min(4096)),
        }
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(t);
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn get(&self, i: usize) -> Option<&Transition> {
        self.items.get(i)
    }

    /// Uniform sample of `n` distinct entries, or `None` if too few are held.
    pub fn sample<R: Rng>(&self, n: usize, rng: &mut R) -> Option<Vec<&Transition>> {
        if n == 0 || self.items.len() < n {
            return None;
        }
        let picks = rand::seq::index::sample(rng, self.items.len(), n);
        Some(picks.into_iter().map(|i| &self.items[i]).collect())
    }
}

/// `y = r + γ · q_target[argmax q_policy]`; the first maximum wins ties.
pub fn double_dqn_target(reward: f64, gamma: f64, q_policy_next: &[f64], q_target_next: &[f64]) -> f64 {
    let best = argmax(q_policy_next);
    reward + gamma * q_target_next[best]
}

/// Index of the first maximum. Panics on an empty slice.
pub fn argmax(values: &[f64]) -> usize {
    assert!(!values.is_empty(), "argmax of an empty slice");
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct TrainReport {
    pub scheduling_loss: Option<f64>,
    pub caching_loss: Option<f64>,
}

/// Policy and target weight sets plus their training configuration.
#[derive(Debug, Clone)]
pub struct QNetwork {
    dims: StateDims,
    cfg: TrainConfig,
    pub policy: QParams,
    pub target: QParams,
    steps: u64,
}

impl QNetwork {
    pub fn new<R: Rng>(dims: StateDims, cfg: TrainConfig, rng: &mut R) -> Self {
        let policy = QParams::random(&dims, cfg.hidden, rng);
        Self::from_params(dims, cfg, policy)
    }

    pub fn from_params(dims: StateDims, cfg: TrainConfig, policy: QParams) -> Self {
        Self {
            dims,
            cfg,
            target: policy.clone(),
            policy,
            steps: 0,
        }
    }

    pub fn dims(&self) -> &StateDims {
        &self.dims
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    fn check_shape(&self, state: &EncodedState) -> Result<(), QnetError> {
        for (block, expected, got) in [
            ("node", self.dims.node_block, state.nodes.len()),
            ("task", self.dims.task_block, state.task.len()),
            ("request", self.dims.request_block, state.requests.len()),
        ] {
            if expected != got {
                return Err(QnetError::Shape { block, expected, got });
            }
        }
        Ok(())
    }

    fn params(&self, weights: Weights) -> &QParams {
        match weights {
            Weights::Policy => &self.policy,
            Weights::Target => &self.target,
        }
    }

    pub fn forward(&self, state: &EncodedState, head: Head, weights: Weights) -> Result<Vec<f64>, QnetError> {
        self.check_shape(state)?;
        let mut trace = ForwardTrace::default();
        self.params(weights).forward(state, head, &mut trace);
        Ok(trace.q)
    }

    /// Double-DQN target for one transition; terminal transitions give `r`.
    pub fn target_value(&self, t: &Transition, head: Head) -> Result<f64, QnetError> {
        match &t.next {
            None => Ok(t.reward),
            Some(next) => {
                let q_policy = self.forward(next, head, Weights::Policy)?;
                let q_target = self.forward(next, head, Weights::Target)?;
                Ok(double_dqn_target(t.reward, self.cfg.gamma, &q_policy, &q_target))
            }
        }
    }

    /// Mean squared TD error over a batch with precomputed targets, and its
    /// gradient accumulated into `grad`.
    pub fn batch_loss(
        &self,
        batch: &[(&EncodedState, usize, f64)],
        head: Head,
        grad: Option<&mut QParams>,
    ) -> Result<f64, QnetError> {
        let outputs = self.dims.outputs(head);
        let mut grad = grad;
        let mut trace = ForwardTrace::default();
        let mut dq = vec![0.0; outputs];
        let scale = 1.0 / batch.len().max(1) as f64;
        let mut loss = 0.0;
        for &(state, action, y) in batch {
            self.check_shape(state)?;
            if action >= outputs {
                return Err(QnetError::ActionOutOfRange { action, outputs });
            }
            self.policy.forward(state, head, &mut trace);
            let err = trace.q[action] - y;
            loss += err * err * scale;
            if let Some(g) = grad.as_deref_mut() {
                dq[action] = 2.0 * err * scale;
                self.policy.backward(state, head, &trace, &dq, g);
                dq[action] = 0.0;
            }
        }
        Ok(loss)
    }

    /// One gradient step over a batch from each memory that holds at least
    /// `batch_size` transitions. Target weights are left untouched.
    pub fn train_step<R: Rng>(
        &mut self,
        scheduling: &ReplayMemory,
        caching: &ReplayMemory,
        rng: &mut R,
    ) -> Result<TrainReport, QnetError> {
        let mut grad = QParams::zeros(&self.dims, self.cfg.hidden);
        let mut report = TrainReport::default();
        for (memory, head) in [(scheduling, Head::Scheduling), (caching, Head::Caching)] {
            let Some(sampled) = memory.sample(self.cfg.batch_size, rng) else {
                continue;
            };
            let mut batch = Vec::with_capacity(sampled.len());
            for t in sampled {
                batch.push((&t.state, t.action, self.target_value(t, head)?));
            }
            let loss = self.batch_loss(&batch, head, Some(&mut grad))?;
            if !loss.is_finite() {
                return Err(QnetError::NonFiniteLoss {
                    head,
                    loss,
                    step: self.steps,
                });
            }
            match head {
                Head::Scheduling => report.scheduling_loss = Some(loss),
                Head::Caching => report.caching_loss = Some(loss),
            }
        }
        if report != TrainReport::default() {
            self.apply_gradient(&grad);
            self.steps += 1;
        }
        Ok(report)
    }

    pub fn apply_gradient(&mut self, grad: &QParams) {
        let mut lr = self.cfg.learning_rate;
        if let Some(clip) = self.cfg.max_grad_norm {
            let norm = grad.params().map(|g| g * g).sum::<f64>().sqrt();
            if norm > clip {
                lr *= clip / norm;
            }
        }
        for (p, g) in self.policy.params_mut().zip(grad.params()) {
            *p -= lr * g;
        }
    }

    pub fn sync_target(&mut self) {
        self.target.clone_from(&self.policy);
    }

    /// Writes both weight sets as text: a header with the network shape,
    /// then one line per tensor holding its name, shape and values.
    pub fn save<W: Write>(&self, mut out: W) -> Result<(), QnetError> {
        let d = &self.dims;
        writeln!(out, "tsic-qnet 1")?;
        writeln!(
            out,
            "dims {} {} {} {} {} {}",
            d.node_block, d.task_block, d.request_block, d.num_nodes, d.num_images, self.cfg.hidden
        )?;
        for (set, params) in [("policy", &self.policy), ("target", &self.target)] {
            for (name, layer) in QParams::LAYER_NAMES.iter().zip(params.layers()) {
                for (kind, values, rows, cols) in [
                    ("w", &layer.weights, layer.outputs, layer.inputs),
                    ("b", &layer.bias, layer.outputs, 1),
                ] {
                    write!(out, "{set}.{name}.{kind} {rows} {cols}")?;
                    for v in values {
                        write!(out, " {v}")?;
                    }
                    writeln!(out)?;
                }
            }
        }
        Ok(())
    }

    /// Reads a checkpoint written by [`save`](Self::save).
    pub fn load<R: BufRead>(input: R, cfg: TrainConfig) -> Result<Self, QnetError> {
        let bad = |msg: String| QnetError::Checkpoint(msg);
        let mut lines = input.lines();
        let mut next_line = || -> Result<String, QnetError> {
            lines
                .next()
                .ok_or_else(|| bad("unexpected end of file".into()))?
                .map_err(QnetError::from)
        };
        if next_line()?.trim() != "tsic-qnet 1" {
            return Err(bad("missing `tsic-qnet 1` header".into()));
        }
        let dims_line = next_line()?;
        let nums: Vec<usize> = dims_line
            .split_whitespace()
            .skip(1)
            .map(|t| t.parse().map_err(|e| bad(format!("dims: {e}"))))
            .collect::<Result<_, _>>()?;
        let [node_block, task_block, request_block, num_nodes, num_images, hidden] = nums[..] else {
            return Err(bad("dims line needs six values".into()));
        };
        let dims = StateDims {
            node_block,
            task_block,
            request_block,
            num_nodes,
            num_images,
        };
        let cfg = TrainConfig { hidden, ..cfg };
        let mut sets = [QParams::zeros(&dims, hidden), QParams::zeros(&dims, hidden)];
        for (set_name, params) in ["policy", "target"].iter().zip(sets.iter_mut()) {
            for (name, layer) in QParams::LAYER_NAMES.iter().zip(params.layers_mut()) {
                let (outputs, inputs) = (layer.outputs, layer.inputs);
                for (kind, values, cols) in [("w", &mut layer.weights, inputs), ("b", &mut layer.bias, 1)] {
                    let line = next_line()?;
                    let mut tokens = line.split_whitespace();
                    let expected = format!("{set_name}.{name}.{kind}");
                    if tokens.next() != Some(expected.as_str()) {
                        return Err(bad(format!("expected tensor {expected}")));
                    }
                    let shape: Vec<usize> = tokens
                        .by_ref()
                        .take(2)
                        .map(|t| t.parse().map_err(|e| bad(format!("{expected} shape: {e}"))))
                        .collect::<Result<_, _>>()?;
                    if shape != [outputs, cols] {
                        return Err(bad(format!("{expected}: shape {shape:?} != [{outputs}, {cols}]")));
                    }
                    let parsed: Vec<f64> = tokens
                        .map(|t| t.parse().map_err(|e| bad(format!("{expected}: {e}"))))
                        .collect::<Result<_, _>>()?;
                    if parsed.len() != values.len() {
                        return Err(bad(format!(
                            "{expected}: {} values, expected {}",
                            parsed.len(),
                            values.len()
                        )));
                    }
                    *values = parsed;
                }
            }
        }
        let [policy, target] = sets;
        Ok(Self {
            dims,
            cfg,
            policy,
            target,
            steps: 0,
        })
    }
}
