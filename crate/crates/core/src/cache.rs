//! Per-node image caches driven by LFU frequency records.
//!
//! Three eviction policies share one record store:
//! - [`CachePolicy::Adaptive`]: priority `f × z` (frequency times image
//!   size), bounded only by the node's usable storage.
//! - [`CachePolicy::FrequencyOnly`]: priority `f`, otherwise identical.
//! - [`CachePolicy::FixedSize`]: classic LFU capped at `K` records per node,
//!   regardless of how much storage is left.
//!
//! Ties on priority go to the least-recently-recorded image. A record is
//! dropped entirely on eviction, so a re-pulled image starts again at zero.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Image, ImageId, ModelError, NodeId, NodeState};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CacheError {
    #[error("node {0} has no cached image to evict")]
    EmptyCache(NodeId),
    #[error("image {image} ({size_mb} MB) can never fit on node {node} ({usable_mb} MB usable)")]
    Uncacheable {
        image: ImageId,
        node: NodeId,
        size_mb: f64,
        usable_mb: f64,
    },
    #[error("image {image} has no frequency record on node {node}")]
    NotRecorded { image: ImageId, node: NodeId },
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CachePolicy {
    #[serde(rename = "ADP")]
    Adaptive,
    #[serde(rename = "ADP-FRQ")]
    FrequencyOnly,
    #[serde(rename = "LFU-fixed")]
    FixedSize(usize),
}

impl CachePolicy {
    pub fn label(&self) -> String {
        match self {
            CachePolicy::Adaptive => "ADP".to_string(),
            CachePolicy::FrequencyOnly => "ADP-FRQ".to_string(),
            CachePolicy::FixedSize(k) => format!("LFU-{k}"),
        }
    }

    fn priority(&self, freq: u64, size_mb: f64) -> f64 {
        match self {
            CachePolicy::Adaptive => priority(freq, size_mb),
            CachePolicy::FrequencyOnly | CachePolicy::FixedSize(_) => freq as f64,
        }
    }
}

/// Size-weighted eviction priority: frequency times image size in MB.
pub fn priority(freq: u64, size_mb: f64) -> f64 {
    freq as f64 * size_mb
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrequencyRecord {
    pub image: ImageId,
    pub freq: u64,
    /// Logical time of the last insert or touch.
    pub stamp: u64,
}

#[derive(Debug, Clone)]
pub struct LfuMemory {
    policy: CachePolicy,
    nodes: Vec<Vec<FrequencyRecord>>,
    clock: u64,
}

impl LfuMemory {
    pub fn new(policy: CachePolicy, num_nodes: usize) -> Self {
        Self {
            policy,
            nodes: vec![Vec::new(); num_nodes],
            clock: 0,
        }
    }

    /// Creates zero-frequency records for every image already cached on the
    /// given nodes, in image-id order.
    pub fn seeded(policy: CachePolicy, nodes: &[NodeState]) -> Self {
        let mut lfu = Self::new(policy, nodes.len());
        for node in nodes {
            for m in node.cached() {
                lfu.record_insert(node.id, m);
            }
        }
        lfu
    }

    pub fn policy(&self) -> CachePolicy {
        self.policy
    }

    pub fn records(&self, node: NodeId) -> &[FrequencyRecord] {
        &self.nodes[node]
    }

    pub fn frequency(&self, node: NodeId, image: ImageId) -> Option<u64> {
        self.nodes[node].iter().find(|r| r.image == image).map(|r| r.freq)
    }

    fn tick(&mut self) -> u64 {
        self.clock += 1;
        self.clock
    }

    fn record_insert(&mut self, node: NodeId, image: ImageId) {
        let stamp = self.tick();
        let records = &mut self.nodes[node];
        records.retain(|r| r.image != image);
        records.push(FrequencyRecord { image, freq: 0, stamp });
    }

    fn record_remove(&mut self, node: NodeId, image: ImageId) {
        self.nodes[node].retain(|r| r.image != image);
    }

    /// Increments the frequency of a cached image and refreshes its stamp.
    pub fn touch(&mut self, node: NodeId, image: ImageId) -> Result<u64, CacheError> {
        let stamp = self.tick();
        let record = self.nodes[node]
            .iter_mut()
            .find(|r| r.image == image)
            .ok_or(CacheError::NotRecorded { image, node })?;
        record.freq += 1;
        record.stamp = stamp;
        Ok(record.freq)
    }

    /// The cached image with minimal priority under this memory's policy.
    pub fn select_victim(&self, node: &NodeState, images: &[Image]) -> Result<ImageId, CacheError> {
        self.select_victim_excluding(node, images, None)
    }

    fn select_victim_excluding(
        &self,
        node: &NodeState,
        images: &[Image],
        protect: Option<ImageId>,
    ) -> Result<ImageId, CacheError> {
        let records = &self.nodes[node.id];
        node.cached()
            .filter(|&m| Some(m) != protect)
            .map(|m| {
                let (freq, stamp) = records
                    .iter()
                    .find(|r| r.image == m)
                    .map_or((0, 0), |r| (r.freq, r.stamp));
                (self.policy.priority(freq, images[m].size_mb), stamp, m)
            })
            .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
            .map(|(_, _, m)| m)
            .ok_or(CacheError::EmptyCache(node.id))
    }

    /// Makes room for `incoming` and pulls it onto the node.
    ///
    /// Evicts minimal-priority images while the incoming image plus the
    /// cached footprint exceed the node's usable storage, then marks the
    /// incoming image cached. Returns the evicted images in eviction order.
    /// A no-op when the image is already present.
    pub fn ensure_capacity(
        &mut self,
        node: &mut NodeState,
        images: &[Image],
        incoming: &Image,
    ) -> Result<Vec<ImageId>, CacheError> {
        self.ensure_capacity_reserving(node, images, incoming, 0.0)
    }

    /// Like [`ensure_capacity`](Self::ensure_capacity), additionally keeping
    /// `reserve_mb` free for task data that is about to land on the node.
    pub fn ensure_capacity_reserving(
        &mut self,
        node: &mut NodeState,
        images: &[Image],
        incoming: &Image,
        reserve_mb: f64,
    ) -> Result<Vec<ImageId>, CacheError> {
        if node.has_image(incoming.id) {
            return Ok(Vec::new());
        }
        let usable = node.usable_image_storage() - reserve_mb;
        if incoming.size_mb > usable {
            return Err(CacheError::Uncacheable {
                image: incoming.id,
                node: node.id,
                size_mb: incoming.size_mb,
                usable_mb: usable,
            });
        }
        let mut evicted = Vec::new();
        if let CachePolicy::FixedSize(k) = self.policy {
            while self.nodes[node.id].len() >= k.max(1) && node.cached().next().is_some() {
                evicted.push(self.evict_one(node, images, None)?);
            }
        }
        while incoming.size_mb + node.cached_mb() > usable && node.cached().next().is_some() {
            evicted.push(self.evict_one(node, images, None)?);
        }
        node.insert_image(incoming)?;
        self.record_insert(node.id, incoming.id);
        Ok(evicted)
    }

    /// Evicts images other than `protect` until `needed_mb` of storage is
    /// available. Returns `None` if that is impossible, leaving the node
    /// untouched.
    pub fn make_room(
        &mut self,
        node: &mut NodeState,
        images: &[Image],
        needed_mb: f64,
        protect: Option<ImageId>,
    ) -> Result<Option<Vec<ImageId>>, CacheError> {
        let protected_mb = protect
            .filter(|&m| node.has_image(m))
            .map_or(0.0, |m| images[m].size_mb);
        if needed_mb > node.usable_image_storage() - protected_mb {
            return Ok(None);
        }
        let mut evicted = Vec::new();
        while node.storage_available < needed_mb {
            evicted.push(self.evict_one(node, images, protect)?);
        }
        Ok(Some(evicted))
    }

    fn evict_one(
        &mut self,
        node: &mut NodeState,
        images: &[Image],
        protect: Option<ImageId>,
    ) -> Result<ImageId, CacheError> {
        let victim = self.select_victim_excluding(node, images, protect)?;
        node.remove_image(&images[victim])?;
        self.record_remove(node.id, victim);
        Ok(victim)
    }
}
