use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::domain::{Micros, 
    route, DomainId, InstanceId, ModelDescriptor, ModelId, NodeId, NodeState, Pin, PipelineSpec, Publication,
    PublicationTag, StageId, SubId, Subscription, SubscriptionKind, Topic, TopicFilter, Topology,
};
use crate::operators::{aggregate_updates, ModelUpdate};
use crate::placement::{
    cost, merge_shared_prefix, place_baseline_subscriber, place_oracle, place_upstream, replan, ExecutionGraph,
    PipelineInstance, Placement, PlacementError, PlacementProblem, WorkloadSpec,
};

use super::compile::{compile_inference, matching_bindings};
use super::{
    Action, BrokerConfig, BrokerError, Delivery, ModelQuery, PeerLink, PlacementPolicy, RetransmitBuffer, StageTask,
    TopicLoad,
};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "span", rename_all = "snake_case")]
pub enum DomainSpan {
    Local,
    Cross { peer: DomainId },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum InstanceStatus {
    Active,
    Suspended { reason: String },
}

/// A resolved inference subscription. The instance id equals the sub id.
#[derive(Clone, Debug, PartialEq)]
pub struct InstanceRecord {
    pub instance: PipelineInstance,
    pub sub_id: SubId,
    pub model_id: ModelId,
    pub workload: WorkloadSpec,
    /// Nodes of the domain owning the model; unpinned stages stay there.
    pub eligible: BTreeSet<NodeId>,
    pub span: DomainSpan,
    pub status: InstanceStatus,
    pub repairs: u32,
}

impl InstanceRecord {
    pub fn is_active(&self) -> bool {
        self.status == InstanceStatus::Active
    }

    pub fn publishers(&self) -> BTreeSet<NodeId> {
        self.workload.publishers()
    }

    pub fn subscriber(&self) -> &NodeId {
        &self.instance.subscriber
    }

    fn entry_for(&self, topic: &Topic, publisher: &NodeId) -> Option<&StageId> {
        let p = &self.instance.pipeline;
        self.workload
            .entries
            .iter()
            .find(|(s, e)| &e.publisher == publisher && p.source_bindings.get(*s).is_some_and(|f| f.matches(topic)))
            .map(|(s, _)| s)
    }
}

/// Outcome of a failure or recovery notification.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RepairPlan {
    pub affected: Vec<InstanceId>,
    pub placements: BTreeMap<InstanceId, Placement>,
    pub suspended: Vec<InstanceId>,
    pub resumed: Vec<InstanceId>,
    /// Delivery sequence numbers replayed per subscription.
    pub replay: BTreeMap<SubId, Vec<u64>>,
    pub actions: Vec<Action>,
}

impl RepairPlan {
    pub fn is_empty(&self) -> bool {
        self.affected.is_empty() && self.resumed.is_empty() && self.replay.is_empty()
    }
}

/// Per-version barrier over a model's trainers.
#[derive(Clone, Debug, PartialEq)]
struct Aggregator {
    filter: TopicFilter,
    trainers: BTreeSet<String>,
    base: u64,
    next: u64,
    pending: BTreeMap<u64, BTreeMap<String, ModelUpdate>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BrokerState {
    pub domain_id: DomainId,
    pub broker_node: NodeId,
    pub config: BrokerConfig,
    pub models: BTreeMap<ModelId, ModelDescriptor>,
    pub subs: BTreeMap<SubId, Subscription>,
    pub instances: BTreeMap<InstanceId, InstanceRecord>,
    pub peers: Vec<PeerLink>,
    pub buffers: BTreeMap<SubId, RetransmitBuffer>,
    /// Last model version buffered for each model-update subscription.
    pub versions_sent: BTreeMap<SubId, u64>,
    /// Versions produced by update aggregation, per model, in order.
    pub aggregated: BTreeMap<ModelId, Vec<u64>>,
    /// Topic → publishing node, shared by every domain.
    pub bindings: BTreeMap<Topic, NodeId>,
    pub loads: BTreeMap<Topic, TopicLoad>,
    pub suspensions: u64,
    watermarks: BTreeMap<(String, Topic), u64>,
    aggregators: BTreeMap<ModelId, Aggregator>,
    graph: ExecutionGraph,
}

fn instance_id(sub: &SubId) -> InstanceId {
    InstanceId::new(sub.as_str())
}

fn update_topic(model: &ModelId) -> Topic {
    Topic::new(&format!("model/{model}/update")).expect("model ids form valid topic segments")
}

impl BrokerState {
    pub fn new(
        domain_id: DomainId,
        broker_node: NodeId,
        config: BrokerConfig,
        bindings: BTreeMap<Topic, NodeId>,
        loads: BTreeMap<Topic, TopicLoad>,
    ) -> Self {
        Self {
            domain_id,
            broker_node,
            config,
            models: BTreeMap::new(),
            subs: BTreeMap::new(),
            instances: BTreeMap::new(),
            peers: Vec::new(),
            buffers: BTreeMap::new(),
            versions_sent: BTreeMap::new(),
            aggregated: BTreeMap::new(),
            bindings,
            loads,
            suspensions: 0,
            watermarks: BTreeMap::new(),
            aggregators: BTreeMap::new(),
            graph: ExecutionGraph::default(),
        }
    }

    pub fn graph(&self) -> &ExecutionGraph {
        &self.graph
    }

    /// Adds or upgrades a model. Upgrades are pushed to model-update
    /// subscribers; equal or lower versions are rejected.
    pub fn register_model(&mut self, m: ModelDescriptor) -> Result<Vec<Action>, BrokerError> {
        if let Some(cur) = self.models.get(&m.model_id) {
            if m.version <= cur.version {
                return Err(BrokerError::StaleVersion {
                    model: m.model_id.clone(),
                    current: cur.version,
                    offered: m.version,
                });
            }
        }
        let (id, version, params) = (m.model_id.clone(), m.version, m.params.clone());
        self.models.insert(id.clone(), m);
        Ok(self.push_version(&id, version, params, 0))
    }

    /// Aggregates updates published on `filter` by every trainer bound to a
    /// matching topic. A trainer's `r`-th publication contributes to version
    /// `current + r`.
    pub fn enable_training(&mut self, model: &ModelId, filter: TopicFilter) -> Result<(), BrokerError> {
        let base = self.models.get(model).ok_or_else(|| BrokerError::UnknownModel(model.clone()))?.version;
        let trainers = matching_bindings(&self.bindings, &filter).into_iter().map(|(_, n)| n.to_string()).collect();
        self.aggregators.insert(
            model.clone(),
            Aggregator { filter, trainers, base, next: base + 1, pending: BTreeMap::new() },
        );
        Ok(())
    }

    pub fn discover(&self, q: &ModelQuery) -> Vec<ModelDescriptor> {
        self.models
            .values()
            .filter(|m| q.task_tag.is_none_or(|t| m.task_tag == t))
            .filter(|m| q.model_id.as_ref().is_none_or(|id| &m.model_id == id))
            .cloned()
            .collect()
    }

    pub fn link_peer(&mut self, peer: PeerLink) -> Result<(), BrokerError> {
        if self.peers.iter().any(|p| p.peer == peer.peer) {
            return Err(BrokerError::DuplicatePeer(peer.peer));
        }
        self.peers.push(peer);
        self.peers.sort_by(|a, b| a.peer.cmp(&b.peer));
        Ok(())
    }

    /// Records a subscription. Inference subscriptions are compiled and placed
    /// here; `remote` carries the owning domain and descriptor when the model
    /// was resolved through a peer.
    pub fn subscribe(
        &mut self,
        sub: Subscription,
        t: &Topology,
        remote: Option<(DomainId, ModelDescriptor)>,
    ) -> Result<(SubId, Vec<Action>), BrokerError> {
        if self.subs.contains_key(&sub.sub_id) {
            return Err(BrokerError::DuplicateSubscription(sub.sub_id));
        }
        if t.node(&sub.subscriber).is_none() {
            return Err(BrokerError::UnknownNode(sub.subscriber));
        }
        let id = sub.sub_id.clone();
        let mut actions = Vec::new();
        match &sub.kind {
            SubscriptionKind::Data { .. } => {}
            SubscriptionKind::Inference { model_id, .. } => {
                let (owner, model) = match remote {
                    Some((peer, m)) => {
                        let from = t.broker_node(&peer).ok_or_else(|| BrokerError::UnknownDomain(peer.clone()))?;
                        actions.push(Action::ImportModel {
                            model_id: model_id.clone(),
                            from,
                            to: self.broker_node.clone(),
                            size_bytes: m.wire_size(),
                        });
                        (DomainSpan::Cross { peer }, m)
                    }
                    None => (
                        DomainSpan::Local,
                        self.models.get(model_id).cloned().ok_or_else(|| BrokerError::UnknownModel(model_id.clone()))?,
                    ),
                };
                let record = self.create_instance(&sub, &model, owner, t)?;
                self.instances.insert(instance_id(&id), record);
                self.rebuild_graph();
            }
            SubscriptionKind::ModelUpdate { model_id, .. } => {
                if !self.models.contains_key(model_id) {
                    return Err(BrokerError::UnknownModel(model_id.clone()));
                }
            }
        }
        self.buffers.insert(id.clone(), RetransmitBuffer::new(self.config.buffer_capacity));
        self.subs.insert(id.clone(), sub.clone());
        if let SubscriptionKind::ModelUpdate { model_id, min_version } = &sub.kind {
            let m = &self.models[model_id];
            if m.version >= *min_version {
                let (version, params) = (m.version, m.params.clone());
                actions.extend(self.push_update_to(&id, model_id, version, params, 0));
            }
        }
        Ok((id, actions))
    }

    pub fn on_ack(&mut self, sub: &SubId, upto: u64) -> Result<(), BrokerError> {
        self.buffers.get_mut(sub).ok_or_else(|| BrokerError::UnknownSubscription(sub.clone()))?.ack(upto);
        Ok(())
    }

    /// Accepts a publication: buffers it for every matching subscription and
    /// emits deliveries, entry-stage tasks and aggregation hand-offs.
    /// Publications at or below the `(source, topic)` watermark are ignored.
    pub fn on_publish(&mut self, p: &Publication) -> Vec<Action> {
        let wm = self.watermarks.entry((p.source.clone(), p.topic.clone())).or_insert(0);
        if p.seq <= *wm {
            return Vec::new();
        }
        *wm = p.seq;
        let publisher = self.publisher_of(p);
        let mut actions = Vec::new();
        let mut tasks: BTreeMap<usize, StageTask> = BTreeMap::new();
        let sub_ids: Vec<SubId> = self.subs.keys().cloned().collect();
        for sid in sub_ids {
            match &self.subs[&sid].kind {
                SubscriptionKind::Data { filter } if filter.matches(&p.topic) => {
                    let subscriber = self.subs[&sid].subscriber.clone();
                    let dseq = self.accept(&sid, p, &mut actions);
                    actions.push(Action::Deliver(Delivery {
                        sub_id: sid,
                        subscriber,
                        from: publisher.clone(),
                        dseq,
                        publication: p.clone(),
                    }));
                }
                SubscriptionKind::Inference { .. } => {
                    let iid = instance_id(&sid);
                    let Some(rec) = self.instances.get(&iid) else { continue };
                    let Some(entry) = rec.entry_for(&p.topic, &publisher).cloned() else { continue };
                    let active = rec.is_active();
                    let dseq = self.accept(&sid, p, &mut actions);
                    if !active {
                        continue;
                    }
                    let idx = self.graph.stage_of[&(iid, entry)];
                    let stage = &self.graph.stages[idx];
                    tasks
                        .entry(idx)
                        .or_insert_with(|| StageTask {
                            stage_key: stage.key.clone(),
                            node: stage.node.clone(),
                            from: publisher.clone(),
                            publication: p.clone(),
                            tokens: BTreeMap::new(),
                        })
                        .tokens
                        .insert(sid, vec![dseq]);
                }
                _ => {}
            }
        }
        actions.extend(tasks.into_values().map(Action::Stage));
        for (model_id, agg) in &self.aggregators {
            if agg.filter.matches(&p.topic) {
                actions.push(Action::Aggregate {
                    model_id: model_id.clone(),
                    from: publisher.clone(),
                    at: self.broker_node.clone(),
                    publication: p.clone(),
                });
            }
        }
        actions
    }

    /// A trainer update reached the aggregation point. Completed versions are
    /// averaged, applied in order and pushed to model-update subscribers.
    pub fn on_training_update(&mut self, model_id: &ModelId, p: &Publication) -> Result<Vec<Action>, BrokerError> {
        let agg = self.aggregators.get_mut(model_id).ok_or_else(|| BrokerError::UnknownModel(model_id.clone()))?;
        let version = agg.base + p.seq;
        if version < agg.next || !agg.trainers.contains(&p.source) {
            return Ok(Vec::new());
        }
        agg.pending.entry(version).or_default().insert(
            p.source.clone(),
            ModelUpdate { model_id: model_id.clone(), version, delta: p.payload.clone() },
        );
        let mut actions = Vec::new();
        loop {
            let agg = self.aggregators.get_mut(model_id).expect("checked above");
            let next = agg.next;
            let complete = agg.pending.get(&next).is_some_and(|m| m.len() == agg.trainers.len());
            if !complete {
                break;
            }
            let updates: Vec<ModelUpdate> = agg.pending.remove(&next).expect("complete").into_values().collect();
            agg.next += 1;
            let avg = aggregate_updates(&updates)?;
            let mut m = self.models[model_id].clone();
            if m.params.len() == avg.delta.len() {
                m.params.iter_mut().zip(&avg.delta).for_each(|(x, d)| *x += d);
            } else {
                m.params = avg.delta.clone();
            }
            m.version = avg.version;
            self.models.insert(model_id.clone(), m);
            self.aggregated.entry(model_id.clone()).or_default().push(avg.version);
            actions.extend(self.push_version(model_id, avg.version, avg.delta, p.ts_us));
        }
        Ok(actions)
    }

    /// Handles a detected node failure: re-places affected instances, suspends
    /// the irreparable ones and replays unacknowledged publications of every
    /// subscription whose data path used the node.
    pub fn on_node_failure(&mut self, failed: &NodeId, t: &Topology) -> RepairPlan {
        let mut before = t.clone();
        before.set_node_state(failed, NodeState::Up);
        let mut plan = RepairPlan::default();
        let mut replay: BTreeSet<SubId> = BTreeSet::new();
        let failed_set: BTreeSet<NodeId> = [failed.clone()].into();
        let sub_ids: Vec<SubId> = self.subs.keys().cloned().collect();
        for sid in sub_ids {
            let sub = &self.subs[&sid];
            if &sub.subscriber == failed {
                if let Some(rec) = self.instances.get_mut(&instance_id(&sid)) {
                    if rec.is_active() {
                        rec.status = InstanceStatus::Suspended { reason: format!("subscriber {failed} failed") };
                        self.suspensions += 1;
                        plan.affected.push(instance_id(&sid));
                        plan.suspended.push(instance_id(&sid));
                    }
                }
                continue;
            }
            let (nodes, _) = self.footprint(&sid, &before);
            if !nodes.contains(failed) {
                continue;
            }
            let iid = instance_id(&sid);
            let Some(rec) = self.instances.get(&iid) else {
                replay.insert(sid);
                continue;
            };
            if !rec.is_active() {
                continue;
            }
            plan.affected.push(iid.clone());
            let problem = PlacementProblem::new(&rec.instance.pipeline, t, &rec.workload)
                .with_objective(self.config.objective)
                .with_eligible(&rec.eligible);
            match replan(&rec.instance.placement, &failed_set, &problem) {
                Ok(pl) => {
                    let rec = self.instances.get_mut(&iid).expect("present");
                    if pl != rec.instance.placement {
                        rec.repairs += 1;
                        plan.placements.insert(iid.clone(), pl.clone());
                        rec.instance.placement = pl;
                    }
                    replay.insert(sid);
                }
                Err(e) => {
                    let reason = match e {
                        PlacementError::InstanceTerminated(n) => format!("endpoint {n} failed"),
                        other => other.to_string(),
                    };
                    let rec = self.instances.get_mut(&iid).expect("present");
                    rec.status = InstanceStatus::Suspended { reason };
                    self.suspensions += 1;
                    plan.suspended.push(iid);
                }
            }
        }
        self.rebuild_graph();
        self.replay_into(&mut plan, replay);
        plan
    }

    /// Handles a detected link failure: instances left without a route are
    /// re-placed; subscriptions whose data path used the link are replayed.
    pub fn on_link_failure(&mut self, a: &NodeId, b: &NodeId, t: &Topology) -> RepairPlan {
        let mut before = t.clone();
        before.set_link_state(a, b, NodeState::Up);
        let key = if a <= b { (a.clone(), b.clone()) } else { (b.clone(), a.clone()) };
        let mut plan = RepairPlan::default();
        let mut replay = BTreeSet::new();
        let sub_ids: Vec<SubId> = self.subs.keys().cloned().collect();
        for sid in sub_ids {
            let (_, links) = self.footprint(&sid, &before);
            if !links.contains(&key) {
                continue;
            }
            let iid = instance_id(&sid);
            if let Some(rec) = self.instances.get(&iid) {
                if !rec.is_active() {
                    continue;
                }
                plan.affected.push(iid.clone());
                let problem = PlacementProblem::new(&rec.instance.pipeline, t, &rec.workload)
                    .with_objective(self.config.objective)
                    .with_eligible(&rec.eligible);
                let still_ok = cost(&rec.instance.placement, &problem).is_ok_and(|c| c.feasible);
                if !still_ok {
                    match self.place(&problem) {
                        Ok(pl) => {
                            let rec = self.instances.get_mut(&iid).expect("present");
                            rec.repairs += 1;
                            plan.placements.insert(iid.clone(), pl.clone());
                            rec.instance.placement = pl;
                        }
                        Err(e) => {
                            let rec = self.instances.get_mut(&iid).expect("present");
                            rec.status = InstanceStatus::Suspended { reason: e.to_string() };
                            self.suspensions += 1;
                            plan.suspended.push(iid);
                            continue;
                        }
                    }
                }
            }
            replay.insert(sid);
        }
        self.rebuild_graph();
        self.replay_into(&mut plan, replay);
        plan
    }

    /// A node (or link) came back: suspended instances are re-placed where
    /// possible and subscriptions delivered to the node are replayed.
    pub fn on_node_up(&mut self, node: Option<&NodeId>, t: &Topology) -> RepairPlan {
        let mut plan = RepairPlan::default();
        let mut replay = BTreeSet::new();
        let ids: Vec<InstanceId> = self.instances.keys().cloned().collect();
        for iid in ids {
            let rec = &self.instances[&iid];
            if rec.is_active() {
                continue;
            }
            let problem = PlacementProblem::new(&rec.instance.pipeline, t, &rec.workload)
                .with_objective(self.config.objective)
                .with_eligible(&rec.eligible);
            let endpoints_up = rec.publishers().iter().chain([rec.subscriber()]).all(|n| t.is_up(n));
            if !endpoints_up {
                continue;
            }
            if let Ok(pl) = self.place(&problem) {
                let rec = self.instances.get_mut(&iid).expect("present");
                rec.status = InstanceStatus::Active;
                rec.repairs += 1;
                rec.instance.placement = pl.clone();
                plan.placements.insert(iid.clone(), pl);
                plan.resumed.push(iid.clone());
                replay.insert(rec.sub_id.clone());
            }
        }
        if let Some(node) = node {
            for (sid, sub) in &self.subs {
                if &sub.subscriber == node && !sub.is_inference() {
                    replay.insert(sid.clone());
                }
            }
        }
        self.rebuild_graph();
        self.replay_into(&mut plan, replay);
        plan
    }

    /// Nodes and links carrying the subscription's traffic in `t`.
    pub fn footprint(&self, sid: &SubId, t: &Topology) -> (BTreeSet<NodeId>, BTreeSet<(NodeId, NodeId)>) {
        let mut edges: Vec<(NodeId, NodeId)> = Vec::new();
        let sub = &self.subs[sid];
        match &sub.kind {
            SubscriptionKind::Data { filter } => {
                for (_, n) in matching_bindings(&self.bindings, filter) {
                    edges.push((n, sub.subscriber.clone()));
                }
            }
            SubscriptionKind::ModelUpdate { .. } => edges.push((self.broker_node.clone(), sub.subscriber.clone())),
            SubscriptionKind::Inference { .. } => {
                if let Some(rec) = self.instances.get(&instance_id(sid)) {
                    let p = &rec.instance.pipeline;
                    let pl = &rec.instance.placement;
                    for s in p.stage_ids() {
                        let Some(node) = pl.node_of(s) else { continue };
                        if let Some(e) = rec.workload.entries.get(s) {
                            edges.push((e.publisher.clone(), node.clone()));
                        }
                        for pred in p.predecessors(s) {
                            if let Some(from) = pl.node_of(&pred) {
                                edges.push((from.clone(), node.clone()));
                            }
                        }
                    }
                    if let Some(node) = p.sink.as_ref().and_then(|s| pl.node_of(s)) {
                        edges.push((node.clone(), rec.subscriber().clone()));
                    }
                }
            }
        }
        let mut nodes = BTreeSet::new();
        let mut links = BTreeSet::new();
        for (a, b) in edges {
            nodes.insert(a.clone());
            nodes.insert(b.clone());
            if let Ok(path) = route(t, &a, &b) {
                for w in path.windows(2) {
                    links.insert(if w[0] <= w[1] { (w[0].clone(), w[1].clone()) } else { (w[1].clone(), w[0].clone()) });
                }
                nodes.extend(path);
            }
        }
        (nodes, links)
    }

    fn publisher_of(&self, p: &Publication) -> NodeId {
        self.bindings.get(&p.topic).cloned().unwrap_or_else(|| NodeId::new(p.source.as_str()))
    }

    fn accept(&mut self, sid: &SubId, p: &Publication, actions: &mut Vec<Action>) -> u64 {
        let buf = self.buffers.get_mut(sid).expect("every subscription has a buffer");
        let (dseq, evicted) = buf.push(p.clone());
        if let Some(e) = evicted {
            actions.push(Action::Evict { sub_id: sid.clone(), dseq: e.dseq });
        }
        dseq
    }

    /// `ts_us` stamps the pushed update with the time of the publication that
    /// completed it.
    fn push_version(&mut self, model: &ModelId, version: u64, payload: Vec<f64>, ts_us: Micros) -> Vec<Action> {
        let targets: Vec<SubId> = self
            .subs
            .iter()
            .filter(|(_, s)| {
                matches!(&s.kind, SubscriptionKind::ModelUpdate { model_id, min_version }
                    if model_id == model && version >= *min_version)
            })
            .map(|(id, _)| id.clone())
            .collect();
        targets.into_iter().flat_map(|sid| self.push_update_to(&sid, model, version, payload.clone(), ts_us)).collect()
    }

    fn push_update_to(&mut self, sid: &SubId, model: &ModelId, version: u64, payload: Vec<f64>, ts_us: Micros) -> Vec<Action> {
        let p = Publication {
            topic: update_topic(model),
            source: self.broker_node.to_string(),
            seq: version,
            ts_us,
            size_bytes: (8 * payload.len() as u64).max(1),
            payload,
            tag: PublicationTag::Derived,
            semantic_tag: None,
        };
        let mut actions = Vec::new();
        let dseq = self.accept(sid, &p, &mut actions);
        self.versions_sent.insert(sid.clone(), version);
        actions.push(Action::Deliver(Delivery {
            sub_id: sid.clone(),
            subscriber: self.subs[sid].subscriber.clone(),
            from: self.broker_node.clone(),
            dseq,
            publication: p,
        }));
        actions
    }

    fn replay_into(&self, plan: &mut RepairPlan, subs: BTreeSet<SubId>) {
        for sid in subs {
            let buf = &self.buffers[&sid];
            if buf.is_empty() {
                continue;
            }
            let sub = &self.subs[&sid];
            let iid = instance_id(&sid);
            let mut seqs = Vec::new();
            for e in buf.unacked() {
                let p = &e.publication;
                let action = match self.instances.get(&iid) {
                    None => {
                        let from = match sub.kind {
                            SubscriptionKind::ModelUpdate { .. } => self.broker_node.clone(),
                            _ => self.publisher_of(p),
                        };
                        Action::Deliver(Delivery {
                            sub_id: sid.clone(),
                            subscriber: sub.subscriber.clone(),
                            from,
                            dseq: e.dseq,
                            publication: p.clone(),
                        })
                    }
                    Some(rec) => {
                        if !rec.is_active() {
                            continue;
                        }
                        let publisher = self.publisher_of(p);
                        let Some(entry) = rec.entry_for(&p.topic, &publisher) else { continue };
                        let stage = &self.graph.stages[self.graph.stage_of[&(iid.clone(), entry.clone())]];
                        Action::Stage(StageTask {
                            stage_key: stage.key.clone(),
                            node: stage.node.clone(),
                            from: publisher,
                            publication: p.clone(),
                            tokens: [(sid.clone(), vec![e.dseq])].into(),
                        })
                    }
                };
                seqs.push(e.dseq);
                plan.actions.push(action);
            }
            if !seqs.is_empty() {
                plan.replay.insert(sid, seqs);
            }
        }
    }

    fn place(&self, problem: &PlacementProblem) -> Result<Placement, PlacementError> {
        match self.config.policy {
            PlacementPolicy::Upstream => place_upstream(problem),
            PlacementPolicy::Baseline => place_baseline_subscriber(problem),
            PlacementPolicy::Oracle => place_oracle(problem),
        }
    }

    fn create_instance(
        &self,
        sub: &Subscription,
        model: &ModelDescriptor,
        span: DomainSpan,
        t: &Topology,
    ) -> Result<InstanceRecord, BrokerError> {
        let filter = match &sub.kind {
            SubscriptionKind::Inference { filter, .. } => filter,
            _ => unreachable!("only inference subscriptions have instances"),
        };
        let publishers = matching_bindings(&self.bindings, filter);
        let compiled = compile_inference(model, sub, &publishers, &self.loads)?;
        // Cross-domain instances may use nodes of both domains.
        let domains: BTreeSet<&DomainId> = match &span {
            DomainSpan::Local => [&self.domain_id].into(),
            DomainSpan::Cross { peer } => [&self.domain_id, peer].into(),
        };
        let eligible: BTreeSet<NodeId> =
            t.nodes.iter().filter(|n| domains.contains(&n.domain)).map(|n| n.node_id.clone()).collect();
        let problem = PlacementProblem::new(&compiled.pipeline, t, &compiled.workload)
            .with_objective(self.config.objective)
            .with_eligible(&eligible);
        let placement = self
            .adopt_shared_prefix(&compiled.pipeline, &compiled.workload, &problem)
            .map(Ok)
            .unwrap_or_else(|| self.place(&problem))
            .map_err(|e| match e {
                PlacementError::NoFeasiblePlacement | PlacementError::InstanceTerminated(_) => {
                    BrokerError::NoFeasiblePlacement(sub.sub_id.clone())
                }
                other => other.into(),
            })?;
        Ok(InstanceRecord {
            instance: PipelineInstance {
                instance_id: instance_id(&sub.sub_id),
                pipeline: compiled.pipeline,
                placement,
                subscriber: sub.subscriber.clone(),
            },
            sub_id: sub.sub_id.clone(),
            model_id: model.model_id.clone(),
            workload: compiled.workload,
            eligible,
            span,
            status: InstanceStatus::Active,
            repairs: 0,
        })
    }

    /// Reuses the nodes of the longest prefix shared with an active instance,
    /// placing only the remaining stages. Baseline placement never adopts.
    fn adopt_shared_prefix(
        &self,
        p: &PipelineSpec,
        w: &WorkloadSpec,
        problem: &PlacementProblem,
    ) -> Option<Placement> {
        if self.config.policy == PlacementPolicy::Baseline {
            return None;
        }
        let order = p.topo_order()?;
        let mut best: Option<Vec<(StageId, NodeId)>> = None;
        for rec in self.instances.values().filter(|r| r.is_active()) {
            let q = &rec.instance.pipeline;
            let mut shared: Vec<(StageId, NodeId)> = Vec::new();
            for s in &order {
                let same_spec = q.stage(s).is_some_and(|x| Some(x) == p.stage(s));
                let same_preds = q.predecessors(s) == p.predecessors(s)
                    && p.predecessors(s).iter().all(|x| shared.iter().any(|(y, _)| y == x));
                let same_binding = q.source_bindings.get(s) == p.source_bindings.get(s)
                    && rec.workload.entries.get(s).map(|e| &e.publisher) == w.entries.get(s).map(|e| &e.publisher);
                if same_spec && same_preds && same_binding {
                    if let Some(n) = rec.instance.placement.node_of(s) {
                        shared.push((s.clone(), n.clone()));
                    }
                }
            }
            if shared.len() > best.as_ref().map_or(0, |b| b.len()) {
                best = Some(shared);
            }
        }
        let shared = best?;
        let mut pinned = p.clone();
        for st in &mut pinned.stages {
            if let Some((_, n)) = shared.iter().find(|(s, _)| s == &st.stage_id) {
                st.pin = Pin::AtNode(n.clone());
            }
        }
        let sub_problem = PlacementProblem { pipeline: &pinned, ..*problem };
        self.place(&sub_problem).ok()
    }

    fn rebuild_graph(&mut self) {
        let active: Vec<PipelineInstance> =
            self.instances.values().filter(|r| r.is_active()).map(|r| r.instance.clone()).collect();
        self.graph = merge_shared_prefix(&active);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{LayerSpec, LinkDescriptor, NodeDescriptor, Selectivity, TaskTag, Tier};

    fn node(id: &str, tier: Tier) -> NodeDescriptor {
        NodeDescriptor {
            node_id: id.into(),
            tier,
            cpu_capacity: 10,
            mem_mb: 4096,
            has_accelerator: false,
            domain: "a".into(),
            state: NodeState::Up,
        }
    }

    fn topo() -> Topology {
        Topology {
            nodes: vec![node("P", Tier::Device), node("E", Tier::Edge), node("E2", Tier::Edge), node("C", Tier::Cloud)],
            links: vec![
                LinkDescriptor::new("P", "E", 2.0, 1.0),
                LinkDescriptor::new("E", "C", 5.0, 10.0),
                LinkDescriptor::new("P", "E2", 3.0, 1.0),
                LinkDescriptor::new("E2", "C", 5.0, 10.0),
            ],
            brokers: Default::default(),
        }
    }

    fn model(version: u64, tag: TaskTag) -> ModelDescriptor {
        ModelDescriptor {
            model_id: "m".into(),
            version,
            task_tag: tag,
            layers: vec![
                LayerSpec { compute_cost: 5, mem_mb: 64, selectivity: Selectivity::new(1, 2).unwrap(), needs_accelerator: false };
                3
            ],
            params: vec![0.0, 0.0],
        }
    }

    fn broker() -> BrokerState {
        let bindings = [(Topic::new("net/a").unwrap(), NodeId::new("P"))].into();
        BrokerState::new("a".into(), "C".into(), BrokerConfig::default(), bindings, BTreeMap::new())
    }

    fn data_sub(id: &str, filter: &str) -> Subscription {
        Subscription {
            sub_id: id.into(),
            subscriber: "C".into(),
            kind: SubscriptionKind::Data { filter: TopicFilter::new(filter).unwrap() },
        }
    }

    fn inference_sub(id: &str, subscriber: &str) -> Subscription {
        Subscription {
            sub_id: id.into(),
            subscriber: subscriber.into(),
            kind: SubscriptionKind::Inference {
                model_id: "m".into(),
                filter: TopicFilter::new("net/#").unwrap(),
                privacy_split: false,
                k: 3,
                funnel: None,
                gate: None,
            },
        }
    }

    fn publ(seq: u64) -> Publication {
        Publication::raw(Topic::new("net/a").unwrap(), "P", seq, 0, 100, vec![1.0])
    }

    #[test]
    fn registry_versions() {
        let mut b = broker();
        b.register_model(model(1, TaskTag::Telemetry)).unwrap();
        b.register_model(model(2, TaskTag::Telemetry)).unwrap();
        assert_eq!(b.models[&ModelId::new("m")].version, 2);
        assert!(matches!(b.register_model(model(1, TaskTag::Telemetry)), Err(BrokerError::StaleVersion { .. })));
        let q = ModelQuery { task_tag: Some(TaskTag::Telemetry), model_id: None };
        assert_eq!(b.discover(&q).len(), 1);
        let q = ModelQuery { task_tag: Some(TaskTag::Text), model_id: None };
        assert!(b.discover(&q).is_empty());
        assert!(broker().discover(&ModelQuery::default()).is_empty());
    }

    #[test]
    fn upgrade_reaches_model_update_subscribers() {
        let mut b = broker();
        b.register_model(model(1, TaskTag::Telemetry)).unwrap();
        let sub = Subscription {
            sub_id: "u".into(),
            subscriber: "E".into(),
            kind: SubscriptionKind::ModelUpdate { model_id: "m".into(), min_version: 0 },
        };
        let (_, now) = b.subscribe(sub, &topo(), None).unwrap();
        assert_eq!(now.len(), 1);
        let later = b.register_model(model(2, TaskTag::Telemetry)).unwrap();
        assert!(matches!(&later[..], [Action::Deliver(d)] if d.publication.seq == 2));
    }

    #[test]
    fn data_subscription_delivery_and_dedup() {
        let mut b = broker();
        b.subscribe(data_sub("d", "net/#"), &topo(), None).unwrap();
        let out = b.on_publish(&publ(1));
        assert!(matches!(&out[..], [Action::Deliver(d)] if d.dseq == 1));
        assert!(b.on_publish(&publ(1)).is_empty());
        let mut other = publ(2);
        other.topic = Topic::new("cam/x").unwrap();
        assert!(b.on_publish(&other).is_empty());
        b.on_ack(&"d".into(), 1).unwrap();
        assert!(b.buffers[&SubId::new("d")].is_empty());
        assert_eq!(b.on_ack(&"zz".into(), 1), Err(BrokerError::UnknownSubscription("zz".into())));
    }

    #[test]
    fn unknown_model_is_rejected() {
        let mut b = broker();
        let err = b.subscribe(inference_sub("i", "C"), &topo(), None).unwrap_err();
        assert_eq!(err, BrokerError::UnknownModel("m".into()));
    }

    #[test]
    fn identical_inference_subscriptions_share_stages() {
        let mut b = broker();
        b.register_model(model(1, TaskTag::Telemetry)).unwrap();
        b.subscribe(inference_sub("i1", "C"), &topo(), None).unwrap();
        b.subscribe(inference_sub("i2", "E"), &topo(), None).unwrap();
        assert_eq!(b.graph().stages.len(), 3);
        assert_eq!(b.graph().deliveries.len(), 2);
        let out = b.on_publish(&publ(1));
        let tasks: Vec<&StageTask> = out
            .iter()
            .filter_map(|a| match a {
                Action::Stage(t) => Some(t),
                _ => None,
            })
            .collect();
        assert_eq!(tasks.len(), 1);
        assert_eq!(tasks[0].tokens.len(), 2);
    }

    #[test]
    fn failure_replans_and_replays() {
        let mut b = broker();
        b.register_model(model(1, TaskTag::Telemetry)).unwrap();
        let mut t = topo();
        b.subscribe(inference_sub("i", "C"), &t, None).unwrap();
        b.on_publish(&publ(1));
        b.on_publish(&publ(2));
        b.on_ack(&"i".into(), 1).unwrap();
        let used: BTreeSet<NodeId> = b.instances[&InstanceId::new("i")].instance.placement.nodes();
        // Fail a node that is on the data path but is not an endpoint.
        let (nodes, _) = b.footprint(&"i".into(), &t);
        let victim = nodes.into_iter().find(|n| n.as_str() != "P" && n.as_str() != "C").unwrap();
        t.set_node_state(&victim, NodeState::Down);
        let plan = b.on_node_failure(&victim, &t);
        assert_eq!(plan.affected, vec![InstanceId::new("i")]);
        assert_eq!(plan.replay[&SubId::new("i")], vec![2]);
        let now = b.instances[&InstanceId::new("i")].instance.placement.nodes();
        assert!(!now.contains(&victim));
        if used.contains(&victim) {
            assert_eq!(plan.placements.len(), 1);
        }
    }

    #[test]
    fn idle_failure_is_empty_and_subscriber_failure_suspends() {
        let mut b = broker();
        b.register_model(model(1, TaskTag::Telemetry)).unwrap();
        let mut t = topo();
        t.nodes.push(node("X", Tier::Edge));
        b.subscribe(inference_sub("i", "C"), &t, None).unwrap();
        t.set_node_state(&"X".into(), NodeState::Down);
        assert!(b.on_node_failure(&"X".into(), &t).is_empty());
        t.set_node_state(&"C".into(), NodeState::Down);
        let plan = b.on_node_failure(&"C".into(), &t);
        assert_eq!(plan.suspended, vec![InstanceId::new("i")]);
        assert_eq!(b.suspensions, 1);
        t.set_node_state(&"C".into(), NodeState::Up);
        let plan = b.on_node_up(Some(&"C".into()), &t);
        assert_eq!(plan.resumed, vec![InstanceId::new("i")]);
    }

    #[test]
    fn training_versions_apply_in_order() {
        let bindings = [
            (Topic::new("train/m/1").unwrap(), NodeId::new("T1")),
            (Topic::new("train/m/2").unwrap(), NodeId::new("T2")),
        ]
        .into();
        let mut b = BrokerState::new("a".into(), "C".into(), BrokerConfig::default(), bindings, BTreeMap::new());
        b.register_model(model(1, TaskTag::Telemetry)).unwrap();
        b.enable_training(&"m".into(), TopicFilter::new("train/m/#").unwrap()).unwrap();
        let upd = |t: &str, src: &str, seq: u64, v: f64| {
            Publication::raw(Topic::new(t).unwrap(), src, seq, 0, 16, vec![v, v])
        };
        let m: ModelId = "m".into();
        assert!(b.on_training_update(&m, &upd("train/m/1", "T1", 2, 1.0)).unwrap().is_empty());
        assert!(b.on_training_update(&m, &upd("train/m/1", "T1", 1, 1.0)).unwrap().is_empty());
        assert!(b.on_training_update(&m, &upd("train/m/2", "T2", 2, 3.0)).unwrap().is_empty());
        b.on_training_update(&m, &upd("train/m/2", "T2", 1, 3.0)).unwrap();
        assert_eq!(b.aggregated[&m], vec![2, 3]);
        assert_eq!(b.models[&m].params, vec![4.0, 4.0]);
        assert_eq!(b.models[&m].version, 3);
    }
}
