//! Per-domain broker state machine and two-domain federation.
//!
//! The broker is the control plane: it resolves subscriptions into placed
//! pipeline instances, buffers every accepted publication per subscription
//! until it is acknowledged, and repairs instances after failures. Its
//! operations return [`Action`]s that the caller (the simulator) carries out
//! on the data plane.

mod buffer;
mod compile;
mod federation;
mod state;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{DomainId, LinkDescriptor, ModelId, NodeId, Publication, SplitError, SubId, TaskTag};
use crate::operators::OperatorError;
use crate::placement::{Objective, PlacementError};

pub use buffer::{BufferEntry, RetransmitBuffer, DEFAULT_BUFFER_CAPACITY};
pub use compile::{compile_inference, CompiledPipeline};
pub use federation::Federation;
pub use state::{BrokerState, DomainSpan, InstanceRecord, InstanceStatus, RepairPlan};

/// Offered load of one topic, used to size placement problems.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TopicLoad {
    pub size_bytes: u64,
    pub rate_per_s: f64,
}

impl Default for TopicLoad {
    fn default() -> Self {
        Self { size_bytes: 1000, rate_per_s: 1.0 }
    }
}

/// How inference instances are placed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlacementPolicy {
    #[default]
    Upstream,
    Baseline,
    Oracle,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BrokerConfig {
    pub buffer_capacity: usize,
    pub objective: Objective,
    pub policy: PlacementPolicy,
}

impl Default for BrokerConfig {
    fn default() -> Self {
        Self { buffer_capacity: DEFAULT_BUFFER_CAPACITY, objective: Objective::default(), policy: PlacementPolicy::default() }
    }
}

/// Link to a peer broker's domain over a bridge link between border nodes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PeerLink {
    pub peer: DomainId,
    pub bridge: LinkDescriptor,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ModelQuery {
    pub task_tag: Option<TaskTag>,
    pub model_id: Option<ModelId>,
}

/// Delivery sequence numbers, per subscription, of the accepted
/// publications an envelope derives from.
pub type Tokens = BTreeMap<SubId, Vec<u64>>;

/// Work for a merged pipeline stage: `publication` must travel from `from` to
/// `node` and be processed there by the stage identified by `stage_key` in
/// the broker's execution graph.
#[derive(Clone, Debug, PartialEq)]
pub struct StageTask {
    pub stage_key: String,
    pub node: NodeId,
    pub from: NodeId,
    pub publication: Publication,
    pub tokens: Tokens,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Delivery {
    pub sub_id: SubId,
    pub subscriber: NodeId,
    pub from: NodeId,
    pub dseq: u64,
    pub publication: Publication,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Action {
    Stage(StageTask),
    Deliver(Delivery),
    /// A trainer's update must travel from `from` to the aggregation point.
    Aggregate { model_id: ModelId, from: NodeId, at: NodeId, publication: Publication },
    /// An unacknowledged buffer entry was evicted on overflow.
    Evict { sub_id: SubId, dseq: u64 },
    /// A descriptor resolved through a peer is copied from the owning broker
    /// to the importing one.
    ImportModel { model_id: ModelId, from: NodeId, to: NodeId, size_bytes: u64 },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BrokerError {
    #[error("model {model} is at version {current}; version {offered} is stale")]
    StaleVersion { model: ModelId, current: u64, offered: u64 },
    #[error("unknown model {0}")]
    UnknownModel(ModelId),
    #[error("no feasible placement for subscription {0}")]
    NoFeasiblePlacement(SubId),
    #[error("no binding publishes a topic matching subscription {0}")]
    NoPublisher(SubId),
    #[error("subscription {0} asks for a privacy split over several publishers")]
    AmbiguousPublisher(SubId),
    #[error("unknown subscription {0}")]
    UnknownSubscription(SubId),
    #[error("duplicate subscription {0}")]
    DuplicateSubscription(SubId),
    #[error("already linked to domain {0}")]
    DuplicatePeer(DomainId),
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("unknown domain {0}")]
    UnknownDomain(DomainId),
    #[error("broker of domain {0} is down")]
    BrokerUnavailable(DomainId),
    #[error(transparent)]
    Split(#[from] SplitError),
    #[error(transparent)]
    Operator(#[from] OperatorError),
    #[error(transparent)]
    Placement(#[from] PlacementError),
}
