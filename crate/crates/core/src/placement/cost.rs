use std::cell::RefCell;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::domain::{
    route_info, validate_pipeline, Micros, NodeId, PipelineSpec, Pin, RouteInfo, StageId, StageKind,
    TriggerPolicy,
};

use super::{Placement, PlacementError, PlacementProblem};

/// A constraint broken by a placement.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "violation", rename_all = "snake_case")]
pub enum Violation {
    Unassigned { stage: StageId },
    UnknownNode { stage: StageId, node: NodeId },
    NodeDown { stage: StageId, node: NodeId },
    PinViolated { stage: StageId, expected: NodeId, actual: NodeId },
    NotEligible { stage: StageId, node: NodeId },
    AcceleratorMissing { stage: StageId, node: NodeId },
    MemoryExceeded { node: NodeId, used_mb: u64, capacity_mb: u64 },
    CpuExceeded { node: NodeId, load: f64, capacity: u64 },
    NoRoute { from: NodeId, to: NodeId },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub latency_ms: f64,
    pub bytes_kb: f64,
    pub objective_value: f64,
    pub feasible: bool,
    pub violations: Vec<Violation>,
    pub latency_us: Micros,
    /// Σ size × hop count over inter-node edges, in bytes.
    pub byte_hops: u64,
}

/// Output size of every stage when each entry stage receives `input_size`.
pub fn stage_sizes(p: &PipelineSpec, input_size: u64) -> BTreeMap<StageId, u64> {
    let inputs = p.roots().into_iter().map(|s| (s, input_size)).collect();
    stage_sizes_with(p, &inputs)
}

/// Output size of every stage given per-entry input sizes. Mapping and filter
/// stages with several predecessors take the largest input; funnels sum them.
pub fn stage_sizes_with(p: &PipelineSpec, entry_inputs: &BTreeMap<StageId, u64>) -> BTreeMap<StageId, u64> {
    let mut out = BTreeMap::new();
    for id in p.topo_order().unwrap_or_default() {
        let stage = p.stage(&id).expect("topo order yields known stages");
        let preds = p.predecessors(&id);
        let input = if preds.is_empty() {
            entry_inputs.get(&id).copied().unwrap_or(1)
        } else if stage.is_funnel() {
            preds.iter().map(|s| out[s]).sum()
        } else {
            preds.iter().map(|s| out[s]).max().unwrap_or(1)
        };
        out.insert(id, stage.selectivity.apply(input));
    }
    out
}

/// Publications per 1000 ms leaving every stage.
pub fn stage_rates(p: &PipelineSpec, entry_rates: &BTreeMap<StageId, f64>) -> BTreeMap<StageId, f64> {
    let mut out: BTreeMap<StageId, f64> = BTreeMap::new();
    for id in p.topo_order().unwrap_or_default() {
        let stage = p.stage(&id).expect("topo order yields known stages");
        let rates: Vec<f64> = p.predecessors(&id).iter().map(|s| out[s]).collect();
        let sum: f64 = rates.iter().sum();
        let rate = if rates.is_empty() {
            entry_rates.get(&id).copied().unwrap_or(0.0)
        } else {
            match &stage.kind {
                StageKind::Funnel { trigger: TriggerPolicy::Barrier { .. }, .. } => {
                    rates.iter().copied().fold(f64::INFINITY, f64::min)
                }
                StageKind::Funnel { trigger: TriggerPolicy::CountWindow { n }, .. } => sum / (*n).max(1) as f64,
                StageKind::Funnel { trigger: TriggerPolicy::TimeWindow { delta_ms }, .. } => {
                    sum.min(1000.0 / (*delta_ms).max(1) as f64)
                }
                _ => sum,
            }
        };
        out.insert(id, rate);
    }
    out
}

/// Evaluates `pl` under the problem's workload and objective.
pub fn cost(pl: &Placement, problem: &PlacementProblem) -> Result<CostReport, PlacementError> {
    Ok(Model::new(problem)?.evaluate(pl))
}

/// Constraint violations of `pl`; empty means feasible.
pub fn feasible(pl: &Placement, problem: &PlacementProblem) -> Result<Vec<Violation>, PlacementError> {
    Ok(Model::new(problem)?.violations(pl, false))
}

/// Precomputed per-problem data shared by evaluation and search.
pub(super) struct Model<'a> {
    pub problem: PlacementProblem<'a>,
    pub order: Vec<StageId>,
    pub preds: BTreeMap<StageId, Vec<StageId>>,
    pub sizes: BTreeMap<StageId, u64>,
    pub rates: BTreeMap<StageId, f64>,
    /// Publisher feeding each stage (first entry ancestor's publisher).
    pub publisher: BTreeMap<StageId, NodeId>,
    routes: RefCell<BTreeMap<(NodeId, NodeId), Option<RouteInfo>>>,
}

impl<'a> Model<'a> {
    pub fn new(problem: &PlacementProblem<'a>) -> Result<Self, PlacementError> {
        problem.objective.check()?;
        let p = problem.pipeline;
        let w = problem.workload;
        if !p.stages.is_empty() {
            let violations = validate_pipeline(p);
            if !violations.is_empty() {
                return Err(PlacementError::InvalidPipeline(violations));
            }
        }
        let order = p.topo_order().unwrap_or_default();
        for root in p.roots() {
            if !w.entries.contains_key(&root) {
                return Err(PlacementError::MissingEntry(root));
            }
        }
        let preds: BTreeMap<StageId, Vec<StageId>> =
            order.iter().map(|s| (s.clone(), p.predecessors(s))).collect();
        let entry_sizes = w.entries.iter().map(|(s, e)| (s.clone(), e.size_bytes)).collect();
        let entry_rates = w.entries.iter().map(|(s, e)| (s.clone(), e.rate_per_s)).collect();
        let mut publisher: BTreeMap<StageId, NodeId> = BTreeMap::new();
        for s in &order {
            let node = match preds[s].first() {
                None => w.entries[s].publisher.clone(),
                Some(first) => publisher[first].clone(),
            };
            publisher.insert(s.clone(), node);
        }
        Ok(Self {
            problem: *problem,
            sizes: stage_sizes_with(p, &entry_sizes),
            rates: stage_rates(p, &entry_rates),
            order,
            preds,
            publisher,
            routes: RefCell::new(BTreeMap::new()),
        })
    }

    pub fn route(&self, a: &NodeId, b: &NodeId) -> Option<RouteInfo> {
        let key = (a.clone(), b.clone());
        if let Some(r) = self.routes.borrow().get(&key) {
            return r.clone();
        }
        let r = route_info(self.problem.topology, a, b).ok();
        self.routes.borrow_mut().insert(key, r.clone());
        r
    }

    pub fn subscriber(&self) -> &NodeId {
        &self.problem.workload.subscriber
    }

    pub fn pin_target(&self, stage: &StageId) -> Option<NodeId> {
        let spec = self.problem.pipeline.stage(stage)?;
        match &spec.pin {
            Pin::Unpinned => None,
            Pin::AtPublisher => Some(self.publisher[stage].clone()),
            Pin::AtSubscriber => Some(self.subscriber().clone()),
            Pin::AtNode(n) => Some(n.clone()),
        }
    }

    /// `(hops, latency)` from the stage's publisher; unreachable sorts last.
    pub fn distance(&self, stage: &StageId, node: &NodeId) -> (usize, Micros) {
        self.route(&self.publisher[stage], node)
            .map_or((usize::MAX, Micros::MAX), |r| (r.hops(), r.latency_us))
    }

    /// Inter-node edges as `(from node, to node, bytes)`, entry and delivery
    /// edges included. Edges touching unassigned stages are skipped.
    fn edges(&self, pl: &Placement) -> Vec<(NodeId, NodeId, u64)> {
        let w = self.problem.workload;
        let mut out = Vec::new();
        for s in &self.order {
            let Some(node) = pl.node_of(s) else { continue };
            if self.preds[s].is_empty() {
                let e = &w.entries[s];
                out.push((e.publisher.clone(), node.clone(), e.size_bytes));
            }
            for pred in &self.preds[s] {
                if let Some(from) = pl.node_of(pred) {
                    out.push((from.clone(), node.clone(), self.sizes[pred]));
                }
            }
        }
        if let Some(sink) = &self.problem.pipeline.sink {
            if let Some(node) = pl.node_of(sink) {
                out.push((node.clone(), self.subscriber().clone(), self.sizes[sink]));
            }
        }
        out
    }

    /// With `partial`, unassigned stages and their edges are ignored.
    pub fn violations(&self, pl: &Placement, partial: bool) -> Vec<Violation> {
        let t = self.problem.topology;
        let mut out = Vec::new();
        let mut mem: BTreeMap<NodeId, u64> = BTreeMap::new();
        let mut cpu: BTreeMap<NodeId, f64> = BTreeMap::new();
        for s in &self.order {
            let spec = self.problem.pipeline.stage(s).expect("known stage");
            let Some(node) = pl.node_of(s) else {
                if !partial {
                    out.push(Violation::Unassigned { stage: s.clone() });
                }
                continue;
            };
            let Some(desc) = t.node(node) else {
                out.push(Violation::UnknownNode { stage: s.clone(), node: node.clone() });
                continue;
            };
            if !desc.is_up() {
                out.push(Violation::NodeDown { stage: s.clone(), node: node.clone() });
            }
            match self.pin_target(s) {
                Some(expected) if &expected != node => out.push(Violation::PinViolated {
                    stage: s.clone(),
                    expected,
                    actual: node.clone(),
                }),
                None if !self.problem.is_eligible(node) => {
                    out.push(Violation::NotEligible { stage: s.clone(), node: node.clone() })
                }
                _ => {}
            }
            if spec.needs_accelerator && !desc.has_accelerator {
                out.push(Violation::AcceleratorMissing { stage: s.clone(), node: node.clone() });
            }
            *mem.entry(node.clone()).or_default() += spec.mem_mb;
            *cpu.entry(node.clone()).or_default() += spec.compute_cost as f64 * self.rates[s] / 1000.0;
        }
        for (node, used) in mem {
            let desc = t.node(&node).expect("checked above");
            if used > desc.mem_mb {
                out.push(Violation::MemoryExceeded { node: node.clone(), used_mb: used, capacity_mb: desc.mem_mb });
            }
            let load = cpu[&node];
            if load > desc.cpu_capacity as f64 {
                out.push(Violation::CpuExceeded { node, load, capacity: desc.cpu_capacity });
            }
        }
        let mut missing: Vec<(NodeId, NodeId)> = Vec::new();
        for (from, to, _) in self.edges(pl) {
            if self.route(&from, &to).is_none() && !missing.contains(&(from.clone(), to.clone())) {
                missing.push((from, to));
            }
        }
        out.extend(missing.into_iter().map(|(from, to)| Violation::NoRoute { from, to }));
        out
    }

    fn compute_us(&self, stage: &StageId, node: &NodeId) -> Micros {
        let cost = self.problem.pipeline.stage(stage).map_or(0, |s| s.compute_cost) as u128;
        let cap = self.problem.topology.node(node).map_or(1, |n| n.cpu_capacity.max(1)) as u128;
        (cost * 1000).div_ceil(cap) as Micros
    }

    fn transfer(&self, from: &NodeId, to: &NodeId, bytes: u64) -> (Micros, u64) {
        match self.route(from, to) {
            Some(r) => (self.problem.topology.path_transfer_us(&r.path, bytes), bytes * r.hops() as u64),
            None => (0, 0),
        }
    }

    /// Latency (µs) and byte-hops; unassigned stages contribute nothing.
    pub fn totals(&self, pl: &Placement) -> (Micros, u64) {
        let w = self.problem.workload;
        let mut finish: BTreeMap<&StageId, Micros> = BTreeMap::new();
        let mut byte_hops = 0;
        for s in &self.order {
            let Some(node) = pl.node_of(s) else { continue };
            let mut arrival = 0;
            if self.preds[s].is_empty() {
                let e = &w.entries[s];
                let (us, bh) = self.transfer(&e.publisher, node, e.size_bytes);
                arrival = us;
                byte_hops += bh;
            }
            for pred in &self.preds[s] {
                let (Some(from), Some(done)) = (pl.node_of(pred), finish.get(pred)) else { continue };
                let (us, bh) = self.transfer(from, node, self.sizes[pred]);
                arrival = arrival.max(done + us);
                byte_hops += bh;
            }
            finish.insert(s, arrival + self.compute_us(s, node));
        }
        let mut latency = 0;
        if let Some(sink) = &self.problem.pipeline.sink {
            if let (Some(node), Some(done)) = (pl.node_of(sink), finish.get(sink)) {
                let (us, bh) = self.transfer(node, self.subscriber(), self.sizes[sink]);
                latency = done + us;
                byte_hops += bh;
            }
        }
        (latency, byte_hops)
    }

    pub fn objective(&self, pl: &Placement) -> f64 {
        let (us, bh) = self.totals(pl);
        self.problem.objective.value(us as f64 / 1000.0, bh as f64 / 1000.0)
    }

    pub fn evaluate(&self, pl: &Placement) -> CostReport {
        let (latency_us, byte_hops) = self.totals(pl);
        let latency_ms = latency_us as f64 / 1000.0;
        let bytes_kb = byte_hops as f64 / 1000.0;
        let violations = self.violations(pl, false);
        CostReport {
            latency_ms,
            bytes_kb,
            objective_value: self.problem.objective.value(latency_ms, bytes_kb),
            feasible: violations.is_empty(),
            violations,
            latency_us,
            byte_hops,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{
        FnRef, LinkDescriptor, NodeDescriptor, NodeState, Selectivity, StageSpec, Tier, TopicFilter, Topology,
    };
    use crate::placement::{Objective, WorkloadSpec};

    fn node(id: &str, cpu: u64, mem: u64) -> NodeDescriptor {
        NodeDescriptor {
            node_id: NodeId::new(id),
            tier: Tier::Edge,
            cpu_capacity: cpu,
            mem_mb: mem,
            has_accelerator: false,
            domain: "d".into(),
            state: NodeState::Up,
        }
    }

    fn chain(sels: &[f64], cost: u64) -> PipelineSpec {
        let stages = sels
            .iter()
            .enumerate()
            .map(|(i, s)| StageSpec::mapping(&format!("s{i}"), FnRef::named("identity"), cost, Selectivity::from_f64(*s).unwrap()))
            .collect();
        PipelineSpec::chain(stages, TopicFilter::any())
    }

    #[test]
    fn sizes_propagate() {
        let sizes = stage_sizes(&chain(&[0.5, 0.5], 1), 100);
        assert_eq!(sizes.values().copied().collect::<Vec<_>>(), vec![50, 25]);
        let sizes = stage_sizes(&chain(&[1.0, 1.0, 1.0], 1), 77);
        assert!(sizes.values().all(|&s| s == 77));
    }

    #[test]
    fn funnel_sums_inputs() {
        let mut p = chain(&[1.0], 1);
        let mut b = StageSpec::mapping("b", FnRef::named("identity"), 1, Selectivity::ONE);
        b.stage_id = "b".into();
        let f = StageSpec {
            kind: StageKind::Funnel {
                func: FnRef::named("concat"),
                trigger: TriggerPolicy::Barrier { inputs: vec!["s0".into(), "b".into()] },
            },
            ..StageSpec::mapping("f", FnRef::named("identity"), 1, Selectivity::new(1, 4).unwrap())
        };
        p.stages.extend([b, f]);
        p.edges = vec![("s0".into(), "f".into()), ("b".into(), "f".into())];
        p.source_bindings.insert("b".into(), TopicFilter::any());
        p.sink = Some("f".into());
        assert_eq!(stage_sizes(&p, 40)[&StageId::new("f")], 20);
    }

    #[test]
    fn single_stage_worked_example() {
        let p = chain(&[1.0], 2);
        let t = Topology {
            nodes: vec![node("P", 1, 1024), node("S", 1, 1024)],
            links: vec![LinkDescriptor::new("P", "S", 5.0, 10.0)],
            brokers: Default::default(),
        };
        let w = WorkloadSpec::single(&p, &"P".into(), &"S".into(), 10_000, 1.0);
        let problem = PlacementProblem::new(&p, &t, &w).with_objective(Objective::new(1.0, 0.0).unwrap());
        let pl: Placement = [("s0".into(), "P".into())].into_iter().collect();
        let r = cost(&pl, &problem).unwrap();
        assert_eq!(r.latency_ms, 8.0);
        assert_eq!(r.bytes_kb, 10.0);
        assert!(r.feasible);
        assert_eq!(r.objective_value, 8.0);
    }

    #[test]
    fn colocated_pipeline_moves_no_bytes() {
        let p = chain(&[0.5, 1.0], 1);
        let t = Topology { nodes: vec![node("P", 4, 1024)], links: vec![], brokers: Default::default() };
        let w = WorkloadSpec::single(&p, &"P".into(), &"P".into(), 500, 1.0);
        let pl: Placement = p.stage_ids().map(|s| (s.clone(), "P".into())).collect();
        let r = cost(&pl, &PlacementProblem::new(&p, &t, &w)).unwrap();
        assert_eq!(r.bytes_kb, 0.0);
        assert!(r.feasible);
    }

    #[test]
    fn feasibility_checks() {
        let mut p = chain(&[1.0], 1);
        p.stages[0].mem_mb = 600;
        let t = Topology {
            nodes: vec![node("P", 1, 512), node("S", 1, 1024)],
            links: vec![LinkDescriptor::new("P", "S", 1.0, 1.0)],
            brokers: Default::default(),
        };
        let w = WorkloadSpec::single(&p, &"P".into(), &"S".into(), 10, 1.0);
        let at_p: Placement = [("s0".into(), "P".into())].into_iter().collect();
        let v = feasible(&at_p, &PlacementProblem::new(&p, &t, &w)).unwrap();
        assert!(matches!(v.as_slice(), [Violation::MemoryExceeded { used_mb: 600, capacity_mb: 512, .. }]));

        p.stages[0].mem_mb = 0;
        p.stages[0].needs_accelerator = true;
        let v = feasible(&at_p, &PlacementProblem::new(&p, &t, &w)).unwrap();
        assert!(matches!(v.as_slice(), [Violation::AcceleratorMissing { .. }]));

        let empty = PipelineSpec::default();
        let w = WorkloadSpec::single(&empty, &"P".into(), &"S".into(), 10, 1.0);
        assert_eq!(feasible(&Placement::default(), &PlacementProblem::new(&empty, &t, &w)).unwrap(), vec![]);
    }

    #[test]
    fn cpu_load_uses_rate() {
        let p = chain(&[1.0], 500);
        let t = Topology { nodes: vec![node("P", 1, 1024)], links: vec![], brokers: Default::default() };
        let pl: Placement = [("s0".into(), "P".into())].into_iter().collect();
        let ok = WorkloadSpec::single(&p, &"P".into(), &"P".into(), 10, 2.0);
        assert!(feasible(&pl, &PlacementProblem::new(&p, &t, &ok)).unwrap().is_empty());
        let hot = WorkloadSpec::single(&p, &"P".into(), &"P".into(), 10, 3.0);
        assert!(matches!(
            feasible(&pl, &PlacementProblem::new(&p, &t, &hot)).unwrap().as_slice(),
            [Violation::CpuExceeded { .. }]
        ));
    }

    #[test]
    fn missing_route_is_a_violation() {
        let p = chain(&[1.0], 1);
        let t = Topology {
            nodes: vec![node("P", 1, 1024), node("S", 1, 1024)],
            links: vec![],
            brokers: Default::default(),
        };
        let w = WorkloadSpec::single(&p, &"P".into(), &"S".into(), 10, 1.0);
        let pl: Placement = [("s0".into(), "P".into())].into_iter().collect();
        let r = cost(&pl, &PlacementProblem::new(&p, &t, &w)).unwrap();
        assert!(!r.feasible);
        assert_eq!(r.violations, vec![Violation::NoRoute { from: "P".into(), to: "S".into() }]);
    }
}
