use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};

use super::{NodeId, Selectivity, StageId, TopicFilter};

/// Reference into the built-in function catalog: a name plus numeric
/// arguments, e.g. `{"fn": "affine", "a": 2, "b": 1}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FnRef {
    #[serde(rename = "fn")]
    pub name: String,
    #[serde(flatten)]
    pub args: BTreeMap<String, f64>,
}

impl FnRef {
    pub fn named(name: &str) -> Self {
        Self { name: name.to_string(), args: BTreeMap::new() }
    }

    pub fn with_arg(mut self, key: &str, value: f64) -> Self {
        self.args.insert(key.to_string(), value);
        self
    }
}

/// When a funnel combines its buffered inputs.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TriggerPolicy {
    Barrier { inputs: Vec<StageId> },
    CountWindow { n: u64 },
    TimeWindow { delta_ms: u64 },
}

impl TriggerPolicy {
    /// Reason the policy is malformed, if it is.
    pub fn problem(&self) -> Option<String> {
        match self {
            TriggerPolicy::Barrier { inputs } => {
                if inputs.is_empty() {
                    return Some("barrier input list is empty".into());
                }
                let unique: BTreeSet<_> = inputs.iter().collect();
                (unique.len() != inputs.len()).then(|| "barrier inputs contain duplicates".into())
            }
            TriggerPolicy::CountWindow { n } => (*n == 0).then(|| "count window n must be >= 1".into()),
            TriggerPolicy::TimeWindow { delta_ms } => {
                (*delta_ms == 0).then(|| "time window delta_ms must be >= 1".into())
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum StageKind {
    Mapping {
        #[serde(rename = "fn")]
        func: FnRef,
    },
    Funnel {
        #[serde(rename = "fn")]
        func: FnRef,
        trigger: TriggerPolicy,
    },
    Filter {
        predicate: FnRef,
    },
}

#[derive(Clone, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pin {
    #[default]
    Unpinned,
    AtPublisher,
    AtSubscriber,
    AtNode(NodeId),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageSpec {
    pub stage_id: StageId,
    pub kind: StageKind,
    pub compute_cost: u64,
    pub mem_mb: u64,
    pub selectivity: Selectivity,
    #[serde(default)]
    pub needs_accelerator: bool,
    #[serde(default)]
    pub pin: Pin,
}

impl StageSpec {
    pub fn mapping(id: &str, func: FnRef, compute_cost: u64, selectivity: Selectivity) -> Self {
        Self {
            stage_id: StageId::new(id),
            kind: StageKind::Mapping { func },
            compute_cost,
            mem_mb: 0,
            selectivity,
            needs_accelerator: false,
            pin: Pin::Unpinned,
        }
    }

    pub fn is_funnel(&self) -> bool {
        matches!(self.kind, StageKind::Funnel { .. })
    }
}

/// A DAG of stages. Entry stages are the ones carrying a source binding; the
/// sink's output is what subscribers receive.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PipelineSpec {
    pub stages: Vec<StageSpec>,
    pub edges: Vec<(StageId, StageId)>,
    pub source_bindings: BTreeMap<StageId, TopicFilter>,
    pub sink: Option<StageId>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum PipelineViolation {
    DuplicateStage { stage: StageId },
    UnknownStageInEdge { from: StageId, to: StageId },
    SelfLoop { stage: StageId },
    DuplicateEdge { from: StageId, to: StageId },
    CycleDetected { stages: Vec<StageId> },
    NoSink,
    MultipleSinks { sinks: Vec<StageId> },
    UnknownSink { stage: StageId },
    SinkHasSuccessors { stage: StageId },
    BindingOnNonEntry { stage: StageId },
    UnknownBinding { stage: StageId },
    UnboundEntry { stage: StageId },
    Unreachable { stage: StageId },
    FunnelWithoutInputs { stage: StageId },
    BarrierArityMismatch { stage: StageId, expected: Vec<StageId>, actual: Vec<StageId> },
    InvalidTrigger { stage: StageId, reason: String },
}

impl PipelineSpec {
    pub fn stage(&self, id: &StageId) -> Option<&StageSpec> {
        self.stages.iter().find(|s| &s.stage_id == id)
    }

    pub fn stage_ids(&self) -> impl Iterator<Item = &StageId> {
        self.stages.iter().map(|s| &s.stage_id)
    }

    pub fn predecessors(&self, id: &StageId) -> Vec<StageId> {
        let mut preds: Vec<StageId> =
            self.edges.iter().filter(|(_, to)| to == id).map(|(from, _)| from.clone()).collect();
        preds.sort();
        preds.dedup();
        preds
    }

    pub fn successors(&self, id: &StageId) -> Vec<StageId> {
        let mut succ: Vec<StageId> =
            self.edges.iter().filter(|(from, _)| from == id).map(|(_, to)| to.clone()).collect();
        succ.sort();
        succ.dedup();
        succ
    }

    /// Stages without incoming edges.
    pub fn roots(&self) -> Vec<StageId> {
        let with_in: BTreeSet<&StageId> = self.edges.iter().map(|(_, to)| to).collect();
        self.stage_ids().filter(|id| !with_in.contains(id)).cloned().collect()
    }

    pub fn is_entry(&self, id: &StageId) -> bool {
        self.source_bindings.contains_key(id)
    }

    /// Kahn order with ties broken by declaration order; `None` on a cycle.
    pub fn topo_order(&self) -> Option<Vec<StageId>> {
        let position: BTreeMap<&StageId, usize> =
            self.stages.iter().enumerate().map(|(i, s)| (&s.stage_id, i)).collect();
        let mut indegree = vec![0usize; self.stages.len()];
        let mut adj: Vec<Vec<usize>> = vec![Vec::new(); self.stages.len()];
        let mut seen = BTreeSet::new();
        for (from, to) in &self.edges {
            let (Some(&f), Some(&t)) = (position.get(from), position.get(to)) else {
                continue;
            };
            if seen.insert((f, t)) {
                adj[f].push(t);
                indegree[t] += 1;
            }
        }
        let mut ready: std::collections::BinaryHeap<std::cmp::Reverse<usize>> =
            (0..self.stages.len()).filter(|&i| indegree[i] == 0).map(std::cmp::Reverse).collect();
        let mut order = Vec::with_capacity(self.stages.len());
        while let Some(std::cmp::Reverse(i)) = ready.pop() {
            order.push(self.stages[i].stage_id.clone());
            for &t in &adj[i] {
                indegree[t] -= 1;
                if indegree[t] == 0 {
                    ready.push(std::cmp::Reverse(t));
                }
            }
        }
        (order.len() == self.stages.len()).then_some(order)
    }

    /// Builds a linear chain `s1 -> s2 -> ... -> sk`, binding the first stage.
    pub fn chain(stages: Vec<StageSpec>, binding: TopicFilter) -> Self {
        let edges = stages
            .windows(2)
            .map(|w| (w[0].stage_id.clone(), w[1].stage_id.clone()))
            .collect();
        let sink = stages.last().map(|s| s.stage_id.clone());
        let mut source_bindings = BTreeMap::new();
        if let Some(first) = stages.first() {
            source_bindings.insert(first.stage_id.clone(), binding);
        }
        Self { stages, edges, source_bindings, sink }
    }
}

/// Returns every broken invariant; empty iff the pipeline is well formed.
pub fn validate_pipeline(p: &PipelineSpec) -> Vec<PipelineViolation> {
    use PipelineViolation as V;
    let mut out = Vec::new();

    let mut ids = BTreeSet::new();
    for s in &p.stages {
        if !ids.insert(&s.stage_id) {
            out.push(V::DuplicateStage { stage: s.stage_id.clone() });
        }
    }

    let mut edge_set = BTreeSet::new();
    for (from, to) in &p.edges {
        if !ids.contains(from) || !ids.contains(to) {
            out.push(V::UnknownStageInEdge { from: from.clone(), to: to.clone() });
            continue;
        }
        if from == to {
            out.push(V::SelfLoop { stage: from.clone() });
        }
        if !edge_set.insert((from, to)) {
            out.push(V::DuplicateEdge { from: from.clone(), to: to.clone() });
        }
    }

    if p.topo_order().is_none() {
        out.push(V::CycleDetected { stages: cycle_members(p) });
    }

    let sinks: Vec<StageId> = p
        .stage_ids()
        .filter(|id| !p.edges.iter().any(|(from, to)| from == *id && ids.contains(to)))
        .cloned()
        .collect();
    if sinks.len() > 1 {
        out.push(V::MultipleSinks { sinks: sinks.clone() });
    }
    match &p.sink {
        None => out.push(V::NoSink),
        Some(sink) if !ids.contains(sink) => out.push(V::UnknownSink { stage: sink.clone() }),
        Some(sink) if !sinks.contains(sink) => {
            out.push(V::SinkHasSuccessors { stage: sink.clone() })
        }
        Some(_) => {}
    }
    if p.stages.is_empty() && p.sink.is_none() {
        // only report once for the empty pipeline
        out.retain(|v| *v == V::NoSink);
    }

    let roots: BTreeSet<StageId> = p.roots().into_iter().collect();
    for stage in p.source_bindings.keys() {
        if !ids.contains(stage) {
            out.push(V::UnknownBinding { stage: stage.clone() });
        } else if !roots.contains(stage) {
            out.push(V::BindingOnNonEntry { stage: stage.clone() });
        }
    }
    for root in &roots {
        if !p.source_bindings.contains_key(root) {
            let is_funnel = p.stage(root).is_some_and(StageSpec::is_funnel);
            if !is_funnel {
                out.push(V::UnboundEntry { stage: root.clone() });
            }
        }
    }

    let reachable = reachable_from_entries(p);
    for s in &p.stages {
        if !reachable.contains(&s.stage_id) && !roots.contains(&s.stage_id) {
            out.push(V::Unreachable { stage: s.stage_id.clone() });
        }
    }

    for s in &p.stages {
        let StageKind::Funnel { trigger, .. } = &s.kind else {
            continue;
        };
        let preds = p.predecessors(&s.stage_id);
        if preds.is_empty() {
            out.push(V::FunnelWithoutInputs { stage: s.stage_id.clone() });
        }
        if let Some(reason) = trigger.problem() {
            out.push(V::InvalidTrigger { stage: s.stage_id.clone(), reason });
        }
        if let TriggerPolicy::Barrier { inputs } = trigger {
            let mut expected = inputs.clone();
            expected.sort();
            if expected != preds {
                out.push(V::BarrierArityMismatch {
                    stage: s.stage_id.clone(),
                    expected,
                    actual: preds,
                });
            }
        }
    }

    out
}

fn reachable_from_entries(p: &PipelineSpec) -> BTreeSet<StageId> {
    let mut seen: BTreeSet<StageId> = p.source_bindings.keys().cloned().collect();
    let mut queue: VecDeque<StageId> = seen.iter().cloned().collect();
    while let Some(id) = queue.pop_front() {
        for (from, to) in &p.edges {
            if *from == id && seen.insert(to.clone()) {
                queue.push_back(to.clone());
            }
        }
    }
    seen
}

/// Stages left over after repeatedly peeling zero-indegree stages.
fn cycle_members(p: &PipelineSpec) -> Vec<StageId> {
    let mut remaining: BTreeSet<StageId> = p.stage_ids().cloned().collect();
    loop {
        let peel: Vec<StageId> = remaining
            .iter()
            .filter(|id| {
                !p.edges.iter().any(|(from, to)| to == *id && remaining.contains(from))
            })
            .cloned()
            .collect();
        if peel.is_empty() {
            break;
        }
        for id in peel {
            remaining.remove(&id);
        }
    }
    remaining.into_iter().collect()
}
