//! Cost model and placement search for pipeline instances.
//!
//! Times are integer microseconds and sizes integer bytes throughout; the
//! floating-point `latency_ms`, `bytes_kb` and `objective_value` in a
//! [`CostReport`] are derived from those integers, so equal integer costs
//! always produce bit-identical objectives.

mod cost;
mod merge;
mod search;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{NodeId, PipelineSpec, PipelineViolation, StageId, Topology};

pub use cost::{cost, feasible, stage_rates, stage_sizes, stage_sizes_with, CostReport, Violation};
pub use merge::{merge_shared_prefix, ExecutionGraph, MergedStage, PipelineInstance};
pub use search::{
    place_baseline_subscriber, place_oracle, place_upstream, replan, ORACLE_SPACE_LIMIT,
};

/// Weighted objective `alpha * latency_ms + beta * bytes_kb`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Objective {
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_beta")]
    pub beta: f64,
}

fn default_alpha() -> f64 {
    1.0
}

fn default_beta() -> f64 {
    0.1
}

impl Default for Objective {
    fn default() -> Self {
        Self { alpha: default_alpha(), beta: default_beta() }
    }
}

impl Objective {
    pub fn new(alpha: f64, beta: f64) -> Result<Self, PlacementError> {
        let o = Self { alpha, beta };
        o.check()?;
        Ok(o)
    }

    pub fn check(&self) -> Result<(), PlacementError> {
        let ok = |w: f64| w.is_finite() && w >= 0.0;
        if ok(self.alpha) && ok(self.beta) && (self.alpha > 0.0 || self.beta > 0.0) {
            Ok(())
        } else {
            Err(PlacementError::InvalidObjective { alpha: self.alpha, beta: self.beta })
        }
    }

    pub fn value(&self, latency_ms: f64, bytes_kb: f64) -> f64 {
        self.alpha * latency_ms + self.beta * bytes_kb
    }
}

/// Load offered to one entry stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntryLoad {
    pub publisher: NodeId,
    pub size_bytes: u64,
    /// Publications per 1000 ms.
    pub rate_per_s: f64,
}

/// Entry loads of one pipeline instance plus the node its output goes to.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorkloadSpec {
    pub entries: BTreeMap<StageId, EntryLoad>,
    pub subscriber: NodeId,
}

impl WorkloadSpec {
    /// Every entry stage of `p` fed by one publisher.
    pub fn single(p: &PipelineSpec, publisher: &NodeId, subscriber: &NodeId, size_bytes: u64, rate_per_s: f64) -> Self {
        let entries = p
            .roots()
            .into_iter()
            .map(|s| (s, EntryLoad { publisher: publisher.clone(), size_bytes, rate_per_s }))
            .collect();
        Self { entries, subscriber: subscriber.clone() }
    }

    pub fn publishers(&self) -> BTreeSet<NodeId> {
        self.entries.values().map(|e| e.publisher.clone()).collect()
    }
}

/// Stage → node assignment for one pipeline instance.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Placement {
    pub assignment: BTreeMap<StageId, NodeId>,
}

impl Placement {
    pub fn node_of(&self, stage: &StageId) -> Option<&NodeId> {
        self.assignment.get(stage)
    }

    pub fn nodes(&self) -> BTreeSet<NodeId> {
        self.assignment.values().cloned().collect()
    }
}

impl FromIterator<(StageId, NodeId)> for Placement {
    fn from_iter<I: IntoIterator<Item = (StageId, NodeId)>>(iter: I) -> Self {
        Self { assignment: iter.into_iter().collect() }
    }
}

/// Everything a placement search needs about one pipeline instance.
#[derive(Clone, Copy, Debug)]
pub struct PlacementProblem<'a> {
    pub pipeline: &'a PipelineSpec,
    pub topology: &'a Topology,
    pub workload: &'a WorkloadSpec,
    pub objective: Objective,
    /// Nodes unpinned stages may use; `None` means every node.
    pub eligible: Option<&'a BTreeSet<NodeId>>,
}

impl<'a> PlacementProblem<'a> {
    pub fn new(pipeline: &'a PipelineSpec, topology: &'a Topology, workload: &'a WorkloadSpec) -> Self {
        Self { pipeline, topology, workload, objective: Objective::default(), eligible: None }
    }

    pub fn with_objective(mut self, objective: Objective) -> Self {
        self.objective = objective;
        self
    }

    pub fn with_eligible(mut self, eligible: &'a BTreeSet<NodeId>) -> Self {
        self.eligible = Some(eligible);
        self
    }

    pub fn is_eligible(&self, node: &NodeId) -> bool {
        self.eligible.is_none_or(|e| e.contains(node))
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlacementError {
    #[error("search space of {size} assignments exceeds the oracle limit")]
    SearchSpaceTooLarge { size: u128 },
    #[error("no feasible placement")]
    NoFeasiblePlacement,
    #[error("instance terminated: endpoint {0} failed")]
    InstanceTerminated(NodeId),
    #[error("invalid pipeline: {0:?}")]
    InvalidPipeline(Vec<PipelineViolation>),
    #[error("entry stage {0} has no workload")]
    MissingEntry(StageId),
    #[error("objective weights alpha={alpha}, beta={beta} must be non-negative and not both zero")]
    InvalidObjective { alpha: f64, beta: f64 },
}
