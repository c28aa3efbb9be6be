//! Edge-cluster simulation with joint task scheduling and container image
//! caching.
//!
//! - [`model`]: nodes, tasks, services, images and admission checks.
//! - [`sim`]: the discrete-time cluster simulator and workload generator.
//! - [`cache`]: size-weighted adaptive LFU and its baselines.
//! - [`qnet`]: the shared-encoder, two-head Q-network and its training.
//! - [`agent`]: the learning scheduler loop plus greedy and round-robin.
//! - [`harness`]: experiment configs, presets, sweeps and CSV output.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod agent;
pub mod cache;
pub mod harness;
pub mod model;
pub mod qnet;
pub mod sim;

pub use agent::{EncodedState, TsicAgent};
pub use cache::{CachePolicy, LfuMemory};
pub use harness::{ExperimentConfig, MetricsRow, PolicyKind};
pub use model::{DelayRecord, Image, NodeState, Service, Task};
pub use qnet::{QNetwork, TrainConfig};
pub use sim::{SimConfig, Simulator};
