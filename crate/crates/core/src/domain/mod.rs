//! Domain types shared by every layer of the broker: identifiers, topics,
//! publications, model descriptors, pipelines and the continuum topology.

mod ids;
mod pipeline;
mod publication;
mod selectivity;
mod split;
mod subscription;
mod topic;
mod topology;

pub use ids::{DomainId, InstanceId, ModelId, NodeId, StageId, SubId};
pub use pipeline::{
    validate_pipeline, FnRef, Pin, PipelineSpec, PipelineViolation, StageKind, StageSpec,
    TriggerPolicy,
};
pub use publication::{Payload, Publication, PublicationKey, PublicationTag};
pub use selectivity::{Selectivity, SelectivityError};
pub use split::{split_model, LayerSpec, ModelDescriptor, SplitError, TaskTag};
pub use subscription::{FunnelConfig, FunnelTrigger, Subscription, SubscriptionKind};
pub use topic::{match_filter, Topic, TopicError, TopicFilter};
pub use topology::{
    route, route_info, LinkDescriptor, LinkState, NodeDescriptor, NodeState, RouteError,
    RouteInfo, Tier, Topology, TopologyError,
};

/// Simulated time in microseconds.
pub type Micros = u64;

/// Converts a millisecond quantity carried as a float in scenario files into
/// fixed-point microseconds.
pub fn ms_to_us(ms: f64) -> Micros {
    (ms * 1000.0).round().max(0.0) as Micros
}

pub fn us_to_ms(us: Micros) -> f64 {
    us as f64 / 1000.0
}
