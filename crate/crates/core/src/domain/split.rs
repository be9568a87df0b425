use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{FnRef, ModelId, Pin, PipelineSpec, Selectivity, StageId, StageKind, StageSpec, TopicFilter};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskTag {
    Text,
    Aural,
    Visual,
    Telemetry,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub compute_cost: u64,
    pub mem_mb: u64,
    pub selectivity: Selectivity,
    #[serde(default)]
    pub needs_accelerator: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelDescriptor {
    pub model_id: ModelId,
    pub version: u64,
    pub task_tag: TaskTag,
    pub layers: Vec<LayerSpec>,
    #[serde(default)]
    pub params: Vec<f64>,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SplitError {
    #[error("split count {k} outside 1..={layers}")]
    SplitArity { k: usize, layers: usize },
}

impl ModelDescriptor {
    /// Stage id of the `index`-th (1-based) sub-component of this model.
    pub fn stage_id(&self, index: usize) -> StageId {
        StageId::new(format!("{}.s{index}", self.model_id))
    }

    /// Bytes needed to ship this descriptor to another broker.
    pub fn wire_size(&self) -> u64 {
        serde_json::to_vec(self).map_or(0, |v| v.len() as u64)
    }
}

/// Partitions the model's layers into `k` contiguous, count-balanced groups
/// (earlier groups take the remainder) and returns them as a chain pipeline.
///
/// With `privacy_split` the first and last sub-components are pinned to the
/// publisher so raw input and final output never leave it.
pub fn split_model(
    model: &ModelDescriptor,
    k: usize,
    privacy_split: bool,
) -> Result<PipelineSpec, SplitError> {
    let n = model.layers.len();
    if k == 0 || k > n {
        return Err(SplitError::SplitArity { k, layers: n });
    }
    let base = n / k;
    let extra = n % k;
    let mut stages = Vec::with_capacity(k);
    let mut start = 0;
    for g in 0..k {
        let len = base + usize::from(g < extra);
        let group = &model.layers[start..start + len];
        start += len;
        let pin = if privacy_split && (g == 0 || g + 1 == k) {
            Pin::AtPublisher
        } else {
            Pin::Unpinned
        };
        stages.push(StageSpec {
            stage_id: model.stage_id(g + 1),
            kind: StageKind::Mapping { func: FnRef::named("identity") },
            compute_cost: group.iter().map(|l| l.compute_cost).sum(),
            mem_mb: group.iter().map(|l| l.mem_mb).sum(),
            selectivity: group.iter().map(|l| l.selectivity).product(),
            needs_accelerator: group.iter().any(|l| l.needs_accelerator),
            pin,
        });
    }
    Ok(PipelineSpec::chain(stages, TopicFilter::any()))
}
