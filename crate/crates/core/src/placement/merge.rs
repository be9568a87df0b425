use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::domain::{InstanceId, NodeId, PipelineSpec, StageId, StageSpec, TopicFilter};

use super::Placement;

/// One subscription's pipeline together with where it runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineInstance {
    pub instance_id: InstanceId,
    pub pipeline: PipelineSpec,
    pub placement: Placement,
    pub subscriber: NodeId,
}

/// A stage instantiated once for every instance sharing its prefix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MergedStage {
    /// Stable across rebuilds: derived from the stage, its node, its binding
    /// and its predecessors' keys.
    pub key: String,
    pub spec: StageSpec,
    pub node: NodeId,
    pub binding: Option<TopicFilter>,
    /// Indices into [`ExecutionGraph::stages`].
    pub preds: Vec<usize>,
    pub instances: Vec<InstanceId>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ExecutionGraph {
    /// Topologically ordered: predecessors precede successors.
    pub stages: Vec<MergedStage>,
    /// `(sink stage index, instance, subscriber node)`.
    pub deliveries: Vec<(usize, InstanceId, NodeId)>,
    pub stage_of: BTreeMap<(InstanceId, StageId), usize>,
}

impl ExecutionGraph {
    /// Adds one instance, reusing every stage whose whole upstream matches.
    pub fn add(&mut self, inst: &PipelineInstance) {
        let p = &inst.pipeline;
        for s in p.topo_order().unwrap_or_default() {
            let spec = p.stage(&s).expect("topo order yields known stages");
            let node = inst.placement.node_of(&s).cloned().unwrap_or_else(|| NodeId::new(""));
            let binding = p.source_bindings.get(&s).cloned();
            let mut preds: Vec<usize> =
                p.predecessors(&s).iter().map(|x| self.stage_of[&(inst.instance_id.clone(), x.clone())]).collect();
            preds.sort_unstable();
            let pred_keys: Vec<&str> = preds.iter().map(|&i| self.stages[i].key.as_str()).collect();
            let key = stage_key(spec, &node, binding.as_ref(), &pred_keys);
            let idx = match self.stages.iter().position(|m| m.key == key) {
                Some(i) => i,
                None => {
                    self.stages.push(MergedStage {
                        key,
                        spec: spec.clone(),
                        node,
                        binding,
                        preds,
                        instances: Vec::new(),
                    });
                    self.stages.len() - 1
                }
            };
            self.stages[idx].instances.push(inst.instance_id.clone());
            self.stage_of.insert((inst.instance_id.clone(), s), idx);
        }
        if let Some(sink) = &p.sink {
            let idx = self.stage_of[&(inst.instance_id.clone(), sink.clone())];
            self.deliveries.push((idx, inst.instance_id.clone(), inst.subscriber.clone()));
        }
    }

    pub fn successors(&self, idx: usize) -> Vec<usize> {
        (0..self.stages.len()).filter(|&j| self.stages[j].preds.contains(&idx)).collect()
    }

    pub fn deliveries_from(&self, idx: usize) -> impl Iterator<Item = &(usize, InstanceId, NodeId)> {
        self.deliveries.iter().filter(move |d| d.0 == idx)
    }

    /// Stages whose output feeds more than one successor or delivery.
    pub fn fan_out_points(&self) -> Vec<usize> {
        (0..self.stages.len())
            .filter(|&i| self.successors(i).len() + self.deliveries_from(i).count() > 1)
            .collect()
    }

    /// Entry stages: those with a source binding.
    pub fn entries(&self) -> impl Iterator<Item = (usize, &MergedStage)> {
        self.stages.iter().enumerate().filter(|(_, m)| m.binding.is_some())
    }
}

fn stage_key(spec: &StageSpec, node: &NodeId, binding: Option<&TopicFilter>, preds: &[&str]) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(spec).expect("stage specs serialize"));
    h.update([0]);
    h.update(node.as_str());
    h.update([0]);
    h.update(binding.map(|b| b.to_string()).unwrap_or_default());
    for p in preds {
        h.update([0]);
        h.update(p);
    }
    let digest: String = h.finalize().iter().take(6).map(|b| format!("{b:02x}")).collect();
    format!("{}@{}#{}", spec.stage_id, node, digest)
}

/// Builds the execution graph in which identical prefixes run once and
/// divergent suffixes fan out after them.
pub fn merge_shared_prefix(instances: &[PipelineInstance]) -> ExecutionGraph {
    let mut g = ExecutionGraph::default();
    for inst in instances {
        g.add(inst);
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{FnRef, Selectivity};

    fn instance(id: &str, sels: &[u128], nodes: &[&str], sub: &str) -> PipelineInstance {
        let stages: Vec<StageSpec> = sels
            .iter()
            .enumerate()
            .map(|(i, d)| StageSpec::mapping(&format!("m.s{i}"), FnRef::named("identity"), 1, Selectivity::new(1, *d).unwrap()))
            .collect();
        let placement = stages.iter().zip(nodes).map(|(s, n)| (s.stage_id.clone(), NodeId::new(*n))).collect();
        PipelineInstance {
            instance_id: InstanceId::new(id),
            pipeline: PipelineSpec::chain(stages, TopicFilter::new("cam/1").unwrap()),
            placement,
            subscriber: NodeId::new(sub),
        }
    }

    #[test]
    fn identical_instances_share_everything() {
        let a = instance("a", &[2, 2, 2], &["P", "P", "E"], "S1");
        let b = instance("b", &[2, 2, 2], &["P", "P", "E"], "S2");
        let g = merge_shared_prefix(&[a, b]);
        assert_eq!(g.stages.len(), 3);
        assert_eq!(g.deliveries.len(), 2);
        assert_eq!(g.fan_out_points(), vec![2]);
    }

    #[test]
    fn divergent_suffix_fans_out() {
        let a = instance("a", &[2, 2, 2], &["P", "P", "E"], "S");
        let b = instance("b", &[2, 2, 4], &["P", "P", "E"], "S");
        let g = merge_shared_prefix(&[a, b]);
        assert_eq!(g.stages.len(), 4);
        assert_eq!(g.stages.iter().filter(|m| m.instances.len() == 2).count(), 2);
        assert_eq!(g.fan_out_points(), vec![1]);
    }

    #[test]
    fn different_nodes_do_not_merge() {
        let a = instance("a", &[2, 2], &["P", "P"], "S");
        let b = instance("b", &[2, 2], &["P", "E"], "S");
        let g = merge_shared_prefix(&[a, b]);
        assert_eq!(g.stages.len(), 3);
    }

    #[test]
    fn keys_are_stable() {
        let a = instance("a", &[2, 2], &["P", "P"], "S");
        let g1 = merge_shared_prefix(std::slice::from_ref(&a));
        let g2 = merge_shared_prefix(&[instance("z", &[2, 2], &["P", "P"], "T"), a]);
        assert_eq!(g1.stages[1].key, g2.stages[1].key);
    }
}
