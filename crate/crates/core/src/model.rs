//! Domain types for the edge cluster: nodes, tasks, services, images, and
//! the per-node admission predicates for bandwidth, compute and storage.

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type NodeId = usize;
pub type ImageId = usize;
pub type ServiceId = usize;
pub type TaskId = usize;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("image {0} is already cached on node {1}")]
    ImageAlreadyCached(ImageId, NodeId),
    #[error("image {0} is not cached on node {1}")]
    ImageNotCached(ImageId, NodeId),
    #[error("image {0} out of range for node {1}")]
    UnknownImage(ImageId, NodeId),
    #[error("task {task} does not fit on node {node}: {resource}")]
    Overcommit {
        task: TaskId,
        node: NodeId,
        resource: &'static str,
    },
}

/// A point on the unit square.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(&self, other: &Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Image {
    pub id: ImageId,
    pub size_mb: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Service {
    pub id: ServiceId,
    pub image_id: ImageId,
    pub start_time_s: f64,
    /// Compute demand of one task of this service, in CPU-unit seconds.
    pub work_units: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub id: TaskId,
    pub service_id: ServiceId,
    pub data_size_mb: f64,
    pub location: Point,
    pub cpu_demand: f64,
    pub mem_demand: f64,
    pub bandwidth_demand: f64,
    pub arrival_slot: u64,
}

/// Live state of one edge node.
///
/// `storage_available` always equals `storage_capacity` minus the cached
/// image footprint minus the data of tasks currently resident on the node.
/// Mutate through the methods so the bookkeeping stays consistent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeState {
    pub id: NodeId,
    pub location: Point,
    pub cpu_capacity: f64,
    pub cpu_available: f64,
    pub mem_capacity: f64,
    pub mem_available: f64,
    pub storage_capacity: f64,
    pub storage_available: f64,
    pub bandwidth_capacity: f64,
    pub bandwidth_available: f64,
    pub cached_images: Vec<bool>,
    pub cloud_bandwidth: f64,
    cached_mb: f64,
    resident_data_mb: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NodeSpec {
    pub location: Point,
    pub cpu: f64,
    pub mem_mb: f64,
    pub storage_mb: f64,
    pub bandwidth: f64,
    pub cloud_bandwidth: f64,
}

impl NodeState {
    pub fn new(id: NodeId, spec: NodeSpec, num_images: usize) -> Self {
        Self {
            id,
            location: spec.location,
            cpu_capacity: spec.cpu,
            cpu_available: spec.cpu,
            mem_capacity: spec.mem_mb,
            mem_available: spec.mem_mb,
            storage_capacity: spec.storage_mb,
            storage_available: spec.storage_mb,
            bandwidth_capacity: spec.bandwidth,
            bandwidth_available: spec.bandwidth,
            cached_images: vec![false; num_images],
            cloud_bandwidth: spec.cloud_bandwidth,
            cached_mb: 0.0,
            resident_data_mb: 0.0,
        }
    }

    pub fn has_image(&self, image: ImageId) -> bool {
        self.cached_images.get(image).copied().unwrap_or(false)
    }

    pub fn cached(&self) -> impl Iterator<Item = ImageId> + '_ {
        self.cached_images
            .iter()
            .enumerate()
            .filter_map(|(m, &present)| present.then_some(m))
    }

    pub fn cached_mb(&self) -> f64 {
        self.cached_mb
    }

    pub fn resident_data_mb(&self) -> f64 {
        self.resident_data_mb
    }

    /// Storage that images may occupy: task data takes precedence over cache.
    pub fn usable_image_storage(&self) -> f64 {
        self.storage_capacity - self.resident_data_mb
    }

    pub fn insert_image(&mut self, image: &Image) -> Result<(), ModelError> {
        let slot = self
            .cached_images
            .get_mut(image.id)
            .ok_or(ModelError::UnknownImage(image.id, self.id))?;
        if *slot {
            return Err(ModelError::ImageAlreadyCached(image.id, self.id));
        }
        *slot = true;
        self.cached_mb += image.size_mb;
        self.refresh_storage();
        Ok(())
    }

    pub fn remove_image(&mut self, image: &Image) -> Result<(), ModelError> {
        let slot = self
            .cached_images
            .get_mut(image.id)
            .ok_or(ModelError::UnknownImage(image.id, self.id))?;
        if !*slot {
            return Err(ModelError::ImageNotCached(image.id, self.id));
        }
        *slot = false;
        self.cached_mb -= image.size_mb;
        if !self.cached_images.iter().any(|&c| c) {
            self.cached_mb = 0.0;
        }
        self.refresh_storage();
        Ok(())
    }

    /// Reserves the task's bandwidth, CPU, memory and data storage.
    pub fn admit(&mut self, task: &Task) -> Result<(), ModelError> {
        let overcommit = |resource| ModelError::Overcommit {
            task: task.id,
            node: self.id,
            resource,
        };
        if !check_bandwidth(self, task) {
            return Err(overcommit("bandwidth"));
        }
        if !check_compute(self, task) {
            return Err(overcommit("cpu/memory"));
        }
        if !check_storage(self, task, None) {
            return Err(overcommit("storage"));
        }
        self.bandwidth_available -= task.bandwidth_demand;
        self.cpu_available -= task.cpu_demand;
        self.mem_available -= task.mem_demand;
        self.resident_data_mb += task.data_size_mb;
        self.refresh_storage();
        Ok(())
    }

    /// Returns a completed task's resources. Availabilities are clamped to
    /// capacity to absorb floating-point residue.
    pub fn release(&mut self, task: &Task) {
        self.bandwidth_available = (self.bandwidth_available + task.bandwidth_demand).min(self.bandwidth_capacity);
        self.cpu_available = (self.cpu_available + task.cpu_demand).min(self.cpu_capacity);
        self.mem_available = (self.mem_available + task.mem_demand).min(self.mem_capacity);
        self.resident_data_mb = (self.resident_data_mb - task.data_size_mb).max(0.0);
        self.refresh_storage();
    }

    fn refresh_storage(&mut self) {
        self.storage_available = self.storage_capacity - self.cached_mb - self.resident_data_mb;
    }
}

/// Total delay of one task and its three components, in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct DelayRecord {
    pub comm_s: f64,
    pub wait_s: f64,
    pub comp_s: f64,
    pub total_s: f64,
}

impl DelayRecord {
    pub fn new(comm_s: f64, wait_s: f64, comp_s: f64) -> Self {
        Self {
            comm_s,
            wait_s,
            comp_s,
            total_s: comm_s + wait_s + comp_s,
        }
    }
}

pub fn check_bandwidth(node: &NodeState, task: &Task) -> bool {
    task.bandwidth_demand <= node.bandwidth_available
}

pub fn check_compute(node: &NodeState, task: &Task) -> bool {
    task.cpu_demand <= node.cpu_available && task.mem_demand <= node.mem_available
}

/// `pending_image` is the task's image when it still has to be pulled.
pub fn check_storage(node: &NodeState, task: &Task, pending_image: Option<&Image>) -> bool {
    let pending = pending_image.map_or(0.0, |img| img.size_mb);
    task.data_size_mb + pending <= node.storage_available
}
