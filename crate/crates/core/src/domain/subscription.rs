use serde::{Deserialize, Serialize};

use super::{FnRef, ModelId, NodeId, Selectivity, SubId, TopicFilter};

fn one() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Subscription {
    pub sub_id: SubId,
    pub subscriber: NodeId,
    #[serde(flatten)]
    pub kind: SubscriptionKind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SubscriptionKind {
    Data {
        filter: TopicFilter,
    },
    Inference {
        model_id: ModelId,
        filter: TopicFilter,
        #[serde(default)]
        privacy_split: bool,
        #[serde(default = "one")]
        k: usize,
        /// Fan-in stage combining the per-publisher first sub-components.
        /// Defaults to a concatenating barrier when the filter matches more
        /// than one publisher.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        funnel: Option<FunnelConfig>,
        /// Inference-based filter appended after the model's last stage.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        gate: Option<FnRef>,
    },
    ModelUpdate {
        model_id: ModelId,
        #[serde(default)]
        min_version: u64,
    },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FunnelTrigger {
    Barrier,
    CountWindow { n: u64 },
    TimeWindow { delta_ms: u64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FunnelConfig {
    pub combine: FnRef,
    pub trigger: FunnelTrigger,
    #[serde(default)]
    pub compute_cost: u64,
    #[serde(default)]
    pub mem_mb: u64,
    #[serde(default)]
    pub selectivity: Selectivity,
}

impl Default for FunnelConfig {
    fn default() -> Self {
        Self {
            combine: FnRef::named("concat"),
            trigger: FunnelTrigger::Barrier,
            compute_cost: 0,
            mem_mb: 0,
            selectivity: Selectivity::ONE,
        }
    }
}

impl Subscription {
    pub fn model_id(&self) -> Option<&ModelId> {
        match &self.kind {
            SubscriptionKind::Data { .. } => None,
            SubscriptionKind::Inference { model_id, .. } | SubscriptionKind::ModelUpdate { model_id, .. } => {
                Some(model_id)
            }
        }
    }

    pub fn is_inference(&self) -> bool {
        matches!(self.kind, SubscriptionKind::Inference { .. })
    }
}
