//! Fixtures shared by the criterion benches.

use neuropubsub::placement::{PlacementProblem, WorkloadSpec};
use neuropubsub::{
    FnRef, LinkDescriptor, NodeDescriptor, NodeId, NodeState, PipelineSpec, Selectivity, StageSpec, Tier, TopicFilter,
    Topology,
};

/// A chain pipeline over a line topology, publisher at one end and
/// subscriber at the other.
pub struct ChainInstance {
    pub pipeline: PipelineSpec,
    pub topology: Topology,
    pub workload: WorkloadSpec,
}

impl ChainInstance {
    /// `stages` halving stages over `nodes` nodes whose capacity grows
    /// towards the subscriber.
    pub fn new(stages: usize, nodes: usize) -> Self {
        let ids: Vec<String> = (0..nodes).map(|i| format!("n{i}")).collect();
        let topology = Topology {
            nodes: ids
                .iter()
                .enumerate()
                .map(|(i, id)| NodeDescriptor {
                    node_id: NodeId::new(id),
                    tier: if i == 0 { Tier::Device } else { Tier::Edge },
                    cpu_capacity: 4 << i,
                    mem_mb: 4096,
                    has_accelerator: false,
                    domain: "bench".into(),
                    state: NodeState::Up,
                })
                .collect(),
            links: ids.windows(2).map(|w| LinkDescriptor::new(&w[0], &w[1], 2.0, 5.0)).collect(),
            brokers: Default::default(),
        };
        let half = Selectivity::new(1, 2).expect("non-zero denominator");
        let pipeline = PipelineSpec::chain(
            (1..=stages).map(|i| StageSpec::mapping(&format!("s{i}"), FnRef::named("identity"), 20, half)).collect(),
            TopicFilter::any(),
        );
        let (publisher, subscriber) = (NodeId::new(&ids[0]), NodeId::new(&ids[nodes - 1]));
        let workload = WorkloadSpec::single(&pipeline, &publisher, &subscriber, 20_000, 50.0);
        Self { pipeline, topology, workload }
    }

    pub fn problem(&self) -> PlacementProblem<'_> {
        PlacementProblem::new(&self.pipeline, &self.topology, &self.workload)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use neuropubsub::placement::{cost, place_upstream};

    #[test]
    fn fixtures_are_feasible() {
        for (stages, nodes) in [(2, 3), (4, 4), (4, 6)] {
            let inst = ChainInstance::new(stages, nodes);
            let pr = inst.problem();
            let pl = place_upstream(&pr).unwrap();
            assert!(cost(&pl, &pr).unwrap().feasible, "{stages}x{nodes}");
        }
    }
}
