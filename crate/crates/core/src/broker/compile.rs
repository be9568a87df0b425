use std::collections::BTreeMap;

use crate::domain::{
    split_model, FunnelTrigger, ModelDescriptor, NodeId, PipelineSpec, Selectivity, StageId, StageKind,
    StageSpec, Subscription, SubscriptionKind, Topic, TopicFilter, TriggerPolicy,
};
use crate::operators::check_stage;
use crate::placement::{EntryLoad, WorkloadSpec};

use super::{BrokerError, TopicLoad};

#[derive(Clone, Debug, PartialEq)]
pub struct CompiledPipeline {
    pub pipeline: PipelineSpec,
    pub workload: WorkloadSpec,
}

/// Turns an inference subscription into a pipeline over the model's `k`
/// sub-components.
///
/// `publishers` are the `(topic, node)` bindings matching the filter. With one
/// publisher node the split chain is used as is. With several, the first
/// sub-component is replicated per publisher and a funnel joins the replicas
/// before the remaining sub-components. A `gate` becomes a filter stage after
/// the model's last stage.
pub fn compile_inference(
    model: &ModelDescriptor,
    sub: &Subscription,
    publishers: &[(Topic, NodeId)],
    loads: &BTreeMap<Topic, TopicLoad>,
) -> Result<CompiledPipeline, BrokerError> {
    let SubscriptionKind::Inference { filter, privacy_split, k, funnel, gate, .. } = &sub.kind else {
        return Err(BrokerError::UnknownSubscription(sub.sub_id.clone()));
    };
    let mut per_node: BTreeMap<NodeId, EntryLoad> = BTreeMap::new();
    for (topic, node) in publishers {
        let load = loads.get(topic).copied().unwrap_or_default();
        let e = per_node.entry(node.clone()).or_insert(EntryLoad {
            publisher: node.clone(),
            size_bytes: 1,
            rate_per_s: 0.0,
        });
        e.size_bytes = e.size_bytes.max(load.size_bytes);
        e.rate_per_s += load.rate_per_s;
    }
    if per_node.is_empty() {
        return Err(BrokerError::NoPublisher(sub.sub_id.clone()));
    }
    if *privacy_split && per_node.len() > 1 {
        return Err(BrokerError::AmbiguousPublisher(sub.sub_id.clone()));
    }

    let chain = split_model(model, *k, *privacy_split)?;
    let first = model.stage_id(1);
    let mut p = PipelineSpec { source_bindings: BTreeMap::new(), ..chain.clone() };
    let mut entries = BTreeMap::new();
    if per_node.len() == 1 {
        p.source_bindings.insert(first.clone(), filter.clone());
        let (_, load) = per_node.into_iter().next().expect("one publisher");
        entries.insert(first, load);
    } else {
        let cfg = funnel.clone().unwrap_or_default();
        let funnel_id = StageId::new(format!("{}.funnel", model.model_id));
        let template = chain.stage(&first).expect("split has a first stage").clone();
        let replicas: Vec<StageId> =
            per_node.keys().map(|n| StageId::new(format!("{first}.{n}"))).collect();
        let trigger = match cfg.trigger {
            FunnelTrigger::Barrier => TriggerPolicy::Barrier { inputs: replicas.clone() },
            FunnelTrigger::CountWindow { n } => TriggerPolicy::CountWindow { n },
            FunnelTrigger::TimeWindow { delta_ms } => TriggerPolicy::TimeWindow { delta_ms },
        };
        let funnel_stage = StageSpec {
            stage_id: funnel_id.clone(),
            kind: StageKind::Funnel { func: cfg.combine, trigger },
            compute_cost: cfg.compute_cost,
            mem_mb: cfg.mem_mb,
            selectivity: cfg.selectivity,
            needs_accelerator: false,
            pin: Default::default(),
        };
        let rest: Vec<StageSpec> = chain.stages.iter().skip(1).cloned().collect();
        let mut stages = Vec::new();
        let mut edges = Vec::new();
        for ((node, load), id) in per_node.into_iter().zip(&replicas) {
            stages.push(StageSpec { stage_id: id.clone(), ..template.clone() });
            edges.push((id.clone(), funnel_id.clone()));
            p.source_bindings.insert(id.clone(), filter.clone());
            entries.insert(id.clone(), EntryLoad { publisher: node, ..load });
        }
        stages.push(funnel_stage);
        let mut prev = funnel_id;
        for s in rest {
            edges.push((prev, s.stage_id.clone()));
            prev = s.stage_id.clone();
            stages.push(s);
        }
        p.stages = stages;
        p.edges = edges;
        p.sink = Some(prev);
    }
    if let Some(predicate) = gate {
        let gate_id = StageId::new(format!("{}.gate", model.model_id));
        let sink = p.sink.clone().expect("compiled pipelines have a sink");
        p.stages.push(StageSpec {
            stage_id: gate_id.clone(),
            kind: StageKind::Filter { predicate: predicate.clone() },
            compute_cost: 0,
            mem_mb: 0,
            selectivity: Selectivity::ONE,
            needs_accelerator: false,
            pin: Default::default(),
        });
        p.edges.push((sink, gate_id.clone()));
        p.sink = Some(gate_id);
    }
    for s in &p.stages {
        check_stage(s)?;
    }
    Ok(CompiledPipeline { pipeline: p, workload: WorkloadSpec { entries, subscriber: sub.subscriber.clone() } })
}

/// Bindings whose topic matches `filter`, in topic order.
pub(super) fn matching_bindings(bindings: &BTreeMap<Topic, NodeId>, filter: &TopicFilter) -> Vec<(Topic, NodeId)> {
    bindings.iter().filter(|(t, _)| filter.matches(t)).map(|(t, n)| (t.clone(), n.clone())).collect()
}
