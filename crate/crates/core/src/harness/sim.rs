use std::cmp::{Ordering, Reverse};
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};

use crate::broker::{Action, BrokerConfig, Federation, PlacementPolicy, RepairPlan, Tokens};
use crate::domain::{
    route, DomainId, InstanceId, Micros, ModelId, NodeId, NodeState, Publication, PublicationKey, StageId,
    StageKind, SubId, SubscriptionKind, Topic, Topology,
};
use crate::operators::{apply_mapping, inference_filter, FunnelOutcome, FunnelState};
use crate::placement::MergedStage;

use super::metrics::{
    InstanceMetrics, LinkMetrics, MetricsReport, ModelMetrics, NodeMetrics, RepairRecord, StageMetrics,
    SubscriptionMetrics, TraceEntry,
};
use super::scenario::{FaultKind, Scenario};
use super::workload::TopicSource;

/// Knobs that are not part of the scenario file.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SimOptions {
    pub policy: PlacementPolicy,
    /// Record every data-plane transfer in the report.
    pub trace: bool,
}

/// A publication in transit together with the accepted publications it
/// derives from and the publish time of the oldest of them.
#[derive(Clone, Debug, PartialEq)]
struct Envelope {
    publication: Publication,
    tokens: Tokens,
    origin_us: Micros,
}

type Meta = (Tokens, Micros);

#[derive(Clone, Debug)]
enum Cargo {
    Stage { domain: DomainId, stage_key: String, input: Option<StageId>, env: Envelope },
    Deliver { sub: SubId, env: Envelope },
    Aggregate { domain: DomainId, model: ModelId, publication: Publication },
    Ack { sub: SubId, upto: u64 },
    Model,
}

#[derive(Clone, Debug)]
struct Transfer {
    path: Vec<NodeId>,
    node_epochs: Vec<u64>,
    link_epochs: Vec<u64>,
    cargo: Cargo,
}

#[derive(Clone, Debug)]
enum Event {
    Fault(usize),
    HeartbeatCheck(usize),
    Arrive(Box<Transfer>),
    ComputeDone { domain: DomainId, stage_key: String, node: NodeId, epoch: u64, env: Envelope, emitted: bool },
    FunnelTimer { domain: DomainId, stage_key: String },
    Publish(usize),
}

impl Event {
    fn rank(&self) -> u8 {
        match self {
            Event::Fault(_) => 0,
            Event::HeartbeatCheck(_) => 1,
            Event::Arrive(_) => 2,
            Event::ComputeDone { .. } => 3,
            Event::FunnelTimer { .. } => 4,
            Event::Publish(_) => 5,
        }
    }
}

/// Queue entry ordered by `(time, event rank, insertion counter)`.
struct Queued {
    at: Micros,
    rank: u8,
    seq: u64,
    event: Event,
}

impl PartialEq for Queued {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Queued {}

impl PartialOrd for Queued {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Queued {
    fn cmp(&self, other: &Self) -> Ordering {
        (self.at, self.rank, self.seq).cmp(&(other.at, other.rank, other.seq))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Outcome {
    Covered,
    Filtered,
    Superseded,
    Dropped,
}

/// Subscriber-side view of one subscription: deduplication and the
/// cumulative acknowledgement point.
#[derive(Clone, Debug, Default)]
struct Tracker {
    domain: DomainId,
    seen: BTreeSet<PublicationKey>,
    outcome: BTreeMap<u64, Outcome>,
    acked: u64,
    delivered: u64,
    duplicates: u64,
    latencies: Vec<Micros>,
    applied: Vec<u64>,
    stale_ignored: u64,
    is_update: bool,
}

impl Tracker {
    fn resolve(&mut self, dseq: u64, o: Outcome) {
        self.outcome.entry(dseq).or_insert(o);
    }

    /// Advances the contiguous resolved prefix; returns it if it moved.
    fn advance(&mut self) -> Option<u64> {
        let start = self.acked;
        while self.outcome.contains_key(&(self.acked + 1)) {
            self.acked += 1;
        }
        (self.acked > start).then_some(self.acked)
    }
}

struct Sim<'a> {
    sc: &'a Scenario,
    opts: SimOptions,
    now: Micros,
    end: Micros,
    topo: Topology,
    fed: Federation,
    queue: BinaryHeap<Reverse<Queued>>,
    counter: u64,
    sources: Vec<TopicSource>,
    node_epoch: BTreeMap<NodeId, u64>,
    link_epoch: BTreeMap<(NodeId, NodeId), u64>,
    busy_until: BTreeMap<NodeId, Micros>,
    busy_us: BTreeMap<NodeId, u64>,
    funnels: BTreeMap<(DomainId, String), (u64, FunnelState<Meta>)>,
    funnel_seq: BTreeMap<(DomainId, StageId), u64>,
    trackers: BTreeMap<SubId, Tracker>,
    errors: BTreeMap<SubId, String>,
    link_bytes: BTreeMap<(NodeId, NodeId), u64>,
    executions: BTreeMap<(DomainId, String), (StageId, NodeId, u64)>,
    pending_checks: BTreeSet<usize>,
    deferred: BTreeMap<DomainId, Vec<usize>>,
    pending_recovery: BTreeMap<SubId, (Micros, Micros)>,
    recovery_us: BTreeMap<SubId, Micros>,
    repairs: Vec<RepairRecord>,
    trace: Vec<TraceEntry>,
    published: u64,
}

fn link_key(a: &NodeId, b: &NodeId) -> (NodeId, NodeId) {
    if a <= b {
        (a.clone(), b.clone())
    } else {
        (b.clone(), a.clone())
    }
}

fn compute_us(cost: u64, cpu: u64) -> Micros {
    (cost * 1000).div_ceil(cpu.max(1))
}

fn restrict(tokens: &Tokens, instances: &[InstanceId]) -> Tokens {
    tokens.iter().filter(|(s, _)| instances.iter().any(|i| i.as_str() == s.as_str())).map(|(s, v)| (s.clone(), v.clone())).collect()
}

fn merge_meta(metas: Vec<Meta>) -> Meta {
    let mut tokens = Tokens::new();
    let mut origin = Micros::MAX;
    for (t, o) in metas {
        origin = origin.min(o);
        for (s, v) in t {
            tokens.entry(s).or_default().extend(v);
        }
    }
    for v in tokens.values_mut() {
        v.sort_unstable();
        v.dedup();
    }
    (tokens, origin)
}

/// Largest heartbeat instant strictly before `t`, plus `misses` periods.
pub fn detection_time(t: Micros, heartbeat_us: Micros, misses: u64) -> Micros {
    let last = t.saturating_sub(1) / heartbeat_us * heartbeat_us;
    last + misses * heartbeat_us
}

impl<'a> Sim<'a> {
    fn new(sc: &'a Scenario, seed: u64, opts: SimOptions) -> Self {
        let config = BrokerConfig {
            buffer_capacity: sc.sim.buffer_capacity,
            objective: sc.objective,
            policy: opts.policy,
        };
        let loads = sc.workload.iter().map(|(t, w)| (t.clone(), w.load())).collect();
        let fed = Federation::new(&sc.topology, config, &sc.bindings, &loads);
        let sources = sc
            .workload
            .iter()
            .map(|(t, w)| TopicSource::new(t.clone(), sc.bindings[t].clone(), w.clone(), seed))
            .collect();
        Self {
            sc,
            opts,
            now: 0,
            end: sc.sim.duration_ms * 1000,
            topo: sc.topology.clone(),
            fed,
            queue: BinaryHeap::new(),
            counter: 0,
            sources,
            node_epoch: sc.topology.nodes.iter().map(|n| (n.node_id.clone(), 0)).collect(),
            link_epoch: sc.topology.links.iter().map(|l| (l.key(), 0)).collect(),
            busy_until: BTreeMap::new(),
            busy_us: BTreeMap::new(),
            funnels: BTreeMap::new(),
            funnel_seq: BTreeMap::new(),
            trackers: BTreeMap::new(),
            errors: BTreeMap::new(),
            link_bytes: BTreeMap::new(),
            executions: BTreeMap::new(),
            pending_checks: BTreeSet::new(),
            deferred: BTreeMap::new(),
            pending_recovery: BTreeMap::new(),
            recovery_us: BTreeMap::new(),
            repairs: Vec::new(),
            trace: Vec::new(),
            published: 0,
        }
    }

    fn schedule(&mut self, at: Micros, event: Event) {
        self.counter += 1;
        self.queue.push(Reverse(Queued { at, rank: event.rank(), seq: self.counter, event }));
    }

    fn setup(&mut self) {
        for m in &self.sc.models {
            let actions = self.fed.register_model(&m.domain, m.descriptor.clone()).unwrap_or_default();
            self.execute(&m.domain, actions);
            if let Some(filter) = &m.update_topic {
                if let Some(b) = self.fed.broker_mut(&m.domain) {
                    let _ = b.enable_training(&m.descriptor.model_id, filter.clone());
                }
            }
        }
        for sub in &self.sc.subscriptions {
            match self.fed.subscribe(sub.clone(), &self.topo) {
                Ok((id, actions)) => {
                    let domain = self.fed.owner[&id].clone();
                    self.trackers.insert(
                        id,
                        Tracker {
                            domain: domain.clone(),
                            is_update: matches!(sub.kind, SubscriptionKind::ModelUpdate { .. }),
                            ..Default::default()
                        },
                    );
                    self.execute(&domain, actions);
                }
                Err(e) => {
                    self.errors.insert(sub.sub_id.clone(), e.to_string());
                }
            }
        }
        for i in 0..self.sources.len() {
            if let Some(at) = self.sources[i].first() {
                self.schedule(at, Event::Publish(i));
            }
        }
        for (i, f) in self.sc.faults.iter().enumerate() {
            self.schedule(crate::domain::ms_to_us(f.at_ms), Event::Fault(i));
        }
    }

    fn run(mut self) -> MetricsReport {
        self.setup();
        while let Some(Reverse(q)) = self.queue.pop() {
            if q.at > self.end {
                break;
            }
            self.now = q.at;
            match q.event {
                Event::Publish(i) => self.on_publish(i),
                Event::Fault(i) => self.on_fault(i),
                Event::HeartbeatCheck(i) => self.on_check(i),
                Event::Arrive(t) => self.on_arrive(*t),
                Event::ComputeDone { domain, stage_key, node, epoch, env, emitted } => {
                    self.on_compute_done(&domain, &stage_key, &node, epoch, env, emitted)
                }
                Event::FunnelTimer { domain, stage_key } => self.on_funnel_timer(&domain, &stage_key),
            }
        }
        self.report()
    }

    // ---- workload and broker actions ----

    fn on_publish(&mut self, i: usize) {
        let src = &mut self.sources[i];
        if self.topo.is_up(&src.publisher) {
            let p = src.publish(self.now);
            self.published += 1;
            for (domain, action) in self.fed.on_publish(&p) {
                self.execute(&domain, vec![action]);
            }
        }
        if let Some(at) = self.sources[i].after(self.now) {
            if at <= self.end {
                self.schedule(at, Event::Publish(i));
            }
        }
    }

    fn execute(&mut self, domain: &DomainId, actions: Vec<Action>) {
        for a in actions {
            match a {
                Action::Stage(task) => {
                    let bytes = task.publication.size_bytes;
                    let env = Envelope { origin_us: task.publication.ts_us, publication: task.publication, tokens: task.tokens };
                    let cargo = Cargo::Stage { domain: domain.clone(), stage_key: task.stage_key, input: None, env };
                    self.send(&task.from, &task.node, cargo, bytes);
                }
                Action::Deliver(d) => {
                    let bytes = d.publication.size_bytes;
                    let env = Envelope {
                        origin_us: d.publication.ts_us,
                        tokens: [(d.sub_id.clone(), vec![d.dseq])].into(),
                        publication: d.publication,
                    };
                    self.send(&d.from, &d.subscriber, Cargo::Deliver { sub: d.sub_id, env }, bytes);
                }
                Action::Aggregate { model_id, from, at, publication } => {
                    let bytes = publication.size_bytes;
                    self.send(&from, &at, Cargo::Aggregate { domain: domain.clone(), model: model_id, publication }, bytes);
                }
                Action::ImportModel { from, to, size_bytes, .. } => self.send(&from, &to, Cargo::Model, size_bytes),
                Action::Evict { sub_id, dseq } => {
                    if let Some(t) = self.trackers.get_mut(&sub_id) {
                        t.resolve(dseq, Outcome::Dropped);
                    }
                    self.ack_if_advanced(&sub_id);
                }
            }
        }
    }

    // ---- transport ----

    fn send(&mut self, from: &NodeId, to: &NodeId, cargo: Cargo, bytes: u64) {
        if !self.topo.is_up(from) {
            return;
        }
        let path = if from == to {
            vec![from.clone()]
        } else {
            match route(&self.topo, from, to) {
                Ok(p) => p,
                Err(_) => return,
            }
        };
        let is_ack = matches!(cargo, Cargo::Ack { .. });
        let carried = if is_ack { 0 } else { bytes };
        let mut link_epochs = Vec::new();
        for w in path.windows(2) {
            let k = link_key(&w[0], &w[1]);
            *self.link_bytes.entry(k.clone()).or_default() += carried;
            link_epochs.push(self.link_epoch[&k]);
        }
        if self.opts.trace && path.len() > 1 {
            let (kind, p) = match &cargo {
                Cargo::Stage { env, .. } => ("stage", Some(&env.publication)),
                Cargo::Deliver { env, .. } => ("deliver", Some(&env.publication)),
                Cargo::Aggregate { publication, .. } => ("aggregate", Some(publication)),
                Cargo::Ack { .. } | Cargo::Model => ("control", None),
            };
            if let Some(p) = p {
                self.trace.push(TraceEntry {
                    at_us: self.now,
                    kind: kind.into(),
                    path: path.clone(),
                    topic: p.topic.clone(),
                    source: p.source.clone(),
                    seq: p.seq,
                    tag: p.tag,
                    bytes: carried,
                });
            }
        }
        let delay = self.topo.path_transfer_us(&path, carried);
        let node_epochs = path.iter().map(|n| self.node_epoch[n]).collect();
        let t = Transfer { path, node_epochs, link_epochs, cargo };
        self.schedule(self.now + delay, Event::Arrive(Box::new(t)));
    }

    /// A transfer survives iff every node and link on its path stayed up
    /// throughout.
    fn survived(&self, t: &Transfer) -> bool {
        let nodes_ok = t.path.iter().zip(&t.node_epochs).all(|(n, e)| self.topo.is_up(n) && self.node_epoch[n] == *e);
        let links_ok = t.path.windows(2).zip(&t.link_epochs).all(|(w, e)| {
            let k = link_key(&w[0], &w[1]);
            self.topo.link(&w[0], &w[1]).is_some_and(|l| l.is_up()) && self.link_epoch[&k] == *e
        });
        nodes_ok && links_ok
    }

    fn on_arrive(&mut self, t: Transfer) {
        if !self.survived(&t) {
            return;
        }
        let at = t.path.last().expect("paths are non-empty").clone();
        match t.cargo {
            Cargo::Stage { domain, stage_key, input, env } => self.on_stage_input(&domain, &stage_key, &at, input, env),
            Cargo::Deliver { sub, env } => self.on_delivery(&sub, env),
            Cargo::Aggregate { domain, model, publication } => {
                let actions = self
                    .fed
                    .broker_mut(&domain)
                    .and_then(|b| b.on_training_update(&model, &publication).ok())
                    .unwrap_or_default();
                self.execute(&domain, actions);
            }
            Cargo::Ack { sub, upto } => {
                let _ = self.fed.on_ack(&sub, upto);
            }
            Cargo::Model => {}
        }
    }

    // ---- stages ----

    fn stage(&self, domain: &DomainId, key: &str) -> Option<(usize, MergedStage)> {
        let g = self.fed.broker(domain)?.graph();
        g.stages.iter().position(|s| s.key == key).map(|i| (i, g.stages[i].clone()))
    }

    fn on_stage_input(&mut self, domain: &DomainId, key: &str, at: &NodeId, input: Option<StageId>, env: Envelope) {
        let Some((_, stage)) = self.stage(domain, key) else { return };
        if &stage.node != at {
            return;
        }
        let tokens = restrict(&env.tokens, &stage.instances);
        if tokens.is_empty() {
            return;
        }
        let env = Envelope { tokens, ..env };
        if !stage.spec.is_funnel() {
            self.start_compute(domain, &stage, env, false);
            return;
        }
        let epoch = self.node_epoch[at];
        let fkey = (domain.clone(), key.to_string());
        if self.funnels.get(&fkey).is_some_and(|(e, _)| *e != epoch) {
            self.funnels.remove(&fkey);
        }
        if !self.funnels.contains_key(&fkey) {
            let preds = {
                let g = self.fed.broker(domain).expect("stage found above").graph();
                stage.preds.iter().map(|&i| g.stages[i].spec.stage_id.clone()).collect::<Vec<_>>()
            };
            let topic = Topic::new(stage.spec.stage_id.as_str()).expect("stage ids are valid topics");
            match FunnelState::new(&stage.spec, preds, topic) {
                Ok(st) => {
                    self.funnels.insert(fkey.clone(), (epoch, st));
                }
                Err(_) => return,
            }
        }
        let input = input.unwrap_or_else(|| stage.spec.stage_id.clone());
        let seq_key = (domain.clone(), stage.spec.stage_id.clone());
        let next = self.funnel_seq.get(&seq_key).copied().unwrap_or(1);
        let (_, st) = self.funnels.get_mut(&fkey).expect("inserted above");
        st.set_next_seq(next);
        let outcome = st.offer(&input, env.publication, (env.tokens, env.origin_us), self.now);
        let deadline = st.deadline();
        let next = st.next_seq();
        self.funnel_seq.insert(seq_key, next);
        if let Ok(outcome) = outcome {
            self.funnel_outcome(domain, &stage, outcome);
        }
        if let Some(d) = deadline {
            self.schedule(d.max(self.now), Event::FunnelTimer { domain: domain.clone(), stage_key: key.to_string() });
        }
    }

    fn on_funnel_timer(&mut self, domain: &DomainId, key: &str) {
        let fkey = (domain.clone(), key.to_string());
        let Some((_, stage)) = self.stage(domain, key) else { return };
        let Some((epoch, st)) = self.funnels.get_mut(&fkey) else { return };
        if self.node_epoch.get(&stage.node) != Some(epoch) || !self.topo.is_up(&stage.node) {
            return;
        }
        let seq_key = (domain.clone(), stage.spec.stage_id.clone());
        st.set_next_seq(self.funnel_seq.get(&seq_key).copied().unwrap_or(1));
        let outcome = st.tick(self.now);
        self.funnel_seq.insert(seq_key, st.next_seq());
        self.funnel_outcome(domain, &stage, outcome);
    }

    fn funnel_outcome(&mut self, domain: &DomainId, stage: &MergedStage, outcome: FunnelOutcome<Meta>) {
        if let Some((tokens, _)) = outcome.superseded {
            self.resolve_all(&tokens, Outcome::Superseded);
        }
        if let Some(p) = outcome.emitted {
            let (tokens, origin_us) = merge_meta(outcome.consumed);
            self.start_compute(domain, stage, Envelope { publication: p, tokens, origin_us }, true);
        }
    }

    /// Queues work on the stage's node behind whatever it is already running.
    fn start_compute(&mut self, domain: &DomainId, stage: &MergedStage, env: Envelope, emitted: bool) {
        let node = &stage.node;
        let cpu = self.topo.node(node).map_or(1, |n| n.cpu_capacity);
        let dur = compute_us(stage.spec.compute_cost, cpu);
        let start = self.busy_until.get(node).copied().unwrap_or(0).max(self.now);
        let done = start + dur;
        self.busy_until.insert(node.clone(), done);
        *self.busy_us.entry(node.clone()).or_default() += dur;
        let event = Event::ComputeDone {
            domain: domain.clone(),
            stage_key: stage.key.clone(),
            node: node.clone(),
            epoch: self.node_epoch[node],
            env,
            emitted,
        };
        self.schedule(done, event);
    }

    fn on_compute_done(&mut self, domain: &DomainId, key: &str, node: &NodeId, epoch: u64, env: Envelope, emitted: bool) {
        if self.node_epoch[node] != epoch || !self.topo.is_up(node) {
            return;
        }
        let Some((idx, stage)) = self.stage(domain, key) else { return };
        if &stage.node != node {
            return;
        }
        let out = if emitted {
            Some(env.publication.clone())
        } else {
            match &stage.spec.kind {
                StageKind::Mapping { .. } => apply_mapping(&stage.spec, &env.publication).ok(),
                StageKind::Filter { .. } => match inference_filter(&stage.spec, &env.publication) {
                    Ok(Some(p)) => Some(p),
                    Ok(None) => {
                        self.resolve_all(&env.tokens, Outcome::Filtered);
                        None
                    }
                    Err(_) => None,
                },
                StageKind::Funnel { .. } => None,
            }
        };
        self.executions
            .entry((domain.clone(), key.to_string()))
            .or_insert_with(|| (stage.spec.stage_id.clone(), node.clone(), 0))
            .2 += 1;
        let Some(p) = out else { return };
        let env = Envelope { publication: p, ..env };
        let (succ, deliveries) = {
            let g = self.fed.broker(domain).expect("stage found above").graph();
            let succ: Vec<MergedStage> = g.successors(idx).into_iter().map(|i| g.stages[i].clone()).collect();
            let del: Vec<(InstanceId, NodeId)> = g.deliveries_from(idx).map(|(_, i, n)| (i.clone(), n.clone())).collect();
            (succ, del)
        };
        let bytes = env.publication.size_bytes;
        for s in succ {
            let tokens = restrict(&env.tokens, &s.instances);
            if tokens.is_empty() {
                continue;
            }
            let cargo = Cargo::Stage {
                domain: domain.clone(),
                stage_key: s.key.clone(),
                input: Some(stage.spec.stage_id.clone()),
                env: Envelope { tokens, ..env.clone() },
            };
            self.send(node, &s.node, cargo, bytes);
        }
        for (iid, subscriber) in deliveries {
            let sub = SubId::new(iid.as_str());
            let Some(v) = env.tokens.get(&sub) else { continue };
            let tokens: Tokens = [(sub.clone(), v.clone())].into();
            let cargo = Cargo::Deliver { sub, env: Envelope { tokens, ..env.clone() } };
            self.send(node, &subscriber, cargo, bytes);
        }
    }

    // ---- subscribers ----

    fn resolve_all(&mut self, tokens: &Tokens, o: Outcome) {
        for (sub, dseqs) in tokens {
            if let Some(t) = self.trackers.get_mut(sub) {
                for d in dseqs {
                    t.resolve(*d, o);
                }
            }
            self.ack_if_advanced(sub);
        }
    }

    fn on_delivery(&mut self, sub: &SubId, env: Envelope) {
        let Some(t) = self.trackers.get_mut(sub) else { return };
        let dseqs = env.tokens.get(sub).cloned().unwrap_or_default();
        let key = env.publication.key();
        let fresh = dseqs.iter().any(|d| !t.outcome.contains_key(d));
        if t.seen.contains(&key) || (!dseqs.is_empty() && !fresh) {
            t.duplicates += 1;
            if t.is_update {
                t.stale_ignored += 1;
            }
        } else {
            t.seen.insert(key);
            t.delivered += 1;
            t.latencies.push(self.now.saturating_sub(env.origin_us));
            if t.is_update {
                let v = env.publication.seq;
                if t.applied.last().is_none_or(|last| v > *last) {
                    t.applied.push(v);
                } else {
                    t.stale_ignored += 1;
                }
            }
        }
        for d in dseqs {
            t.resolve(d, Outcome::Covered);
        }
        if let Some((failed_at, repaired_at)) = self.pending_recovery.get(sub).copied() {
            if self.now >= repaired_at {
                self.recovery_us.insert(sub.clone(), self.now - failed_at);
                self.pending_recovery.remove(sub);
            }
        }
        self.ack_if_advanced(sub);
    }

    fn ack_if_advanced(&mut self, sub: &SubId) {
        let Some(t) = self.trackers.get_mut(sub) else { return };
        let Some(upto) = t.advance() else { return };
        let domain = t.domain.clone();
        let Some(b) = self.fed.broker(&domain) else { return };
        let broker_node = b.broker_node.clone();
        let subscriber = b.subs[sub].subscriber.clone();
        self.send(&subscriber, &broker_node, Cargo::Ack { sub: sub.clone(), upto }, 0);
    }

    // ---- faults and repair ----

    fn on_fault(&mut self, i: usize) {
        let f = &self.sc.faults[i];
        let hb = self.sc.sim.heartbeat_ms * 1000;
        let check_at = detection_time(self.now, hb, self.sc.sim.heartbeat_misses);
        match f.kind.clone() {
            FaultKind::NodeDown { node } => {
                if !self.topo.is_up(&node) {
                    return;
                }
                self.topo.set_node_state(&node, NodeState::Down);
                *self.node_epoch.get_mut(&node).expect("validated node") += 1;
                self.busy_until.remove(&node);
                self.pending_checks.insert(i);
                self.schedule(check_at, Event::HeartbeatCheck(i));
            }
            FaultKind::LinkDown { a, b } => {
                self.topo.set_link_state(&a, &b, NodeState::Down);
                *self.link_epoch.get_mut(&link_key(&a, &b)).expect("validated link") += 1;
                self.pending_checks.insert(i);
                self.schedule(check_at, Event::HeartbeatCheck(i));
            }
            FaultKind::NodeUp { node } => {
                if self.topo.is_up(&node) {
                    return;
                }
                self.topo.set_node_state(&node, NodeState::Up);
                *self.node_epoch.get_mut(&node).expect("validated node") += 1;
                self.flush_pending(|k| matches!(k, FaultKind::NodeDown { node: n } if n == &node));
                let domains: Vec<DomainId> = self.fed.brokers.keys().cloned().collect();
                for d in domains {
                    if self.fed.brokers[&d].broker_node == node {
                        for j in self.deferred.remove(&d).unwrap_or_default() {
                            self.repair(&d, j);
                        }
                    }
                    self.recover(&d, Some(&node));
                }
            }
            FaultKind::LinkUp { a, b } => {
                self.topo.set_link_state(&a, &b, NodeState::Up);
                *self.link_epoch.get_mut(&link_key(&a, &b)).expect("validated link") += 1;
                self.flush_pending(
                    |k| matches!(k, FaultKind::LinkDown { a: x, b: y } if link_key(x, y) == link_key(&a, &b)),
                );
                let domains: Vec<DomainId> = self.fed.brokers.keys().cloned().collect();
                for d in domains {
                    self.recover(&d, None);
                }
            }
        }
    }

    /// Repairs immediately for undetected failures of an element that just
    /// came back, since its in-flight work was lost.
    fn flush_pending(&mut self, is_same: impl Fn(&FaultKind) -> bool) {
        let hits: Vec<usize> =
            self.pending_checks.iter().copied().filter(|&j| is_same(&self.sc.faults[j].kind)).collect();
        for j in hits {
            self.pending_checks.remove(&j);
            self.detect(j);
        }
    }

    fn on_check(&mut self, i: usize) {
        if self.pending_checks.remove(&i) {
            self.detect(i);
        }
    }

    fn detect(&mut self, i: usize) {
        let domains: Vec<DomainId> = self.fed.brokers.keys().cloned().collect();
        for d in domains {
            let broker_node = self.fed.brokers[&d].broker_node.clone();
            if self.topo.is_up(&broker_node) {
                self.repair(&d, i);
            } else {
                self.deferred.entry(d).or_default().push(i);
            }
        }
    }

    fn repair(&mut self, d: &DomainId, i: usize) {
        let f = &self.sc.faults[i];
        let failed_at = crate::domain::ms_to_us(f.at_ms);
        let b = self.fed.broker_mut(d).expect("known domain");
        let (cause, plan) = match &f.kind {
            FaultKind::NodeDown { node } => (format!("node {node} down"), b.on_node_failure(node, &self.topo)),
            FaultKind::LinkDown { a, b: y } => (format!("link {a}-{y} down"), b.on_link_failure(a, y, &self.topo)),
            _ => return,
        };
        self.apply_plan(d, cause, failed_at, plan);
    }

    fn recover(&mut self, d: &DomainId, node: Option<&NodeId>) {
        let b = self.fed.broker_mut(d).expect("known domain");
        let plan = b.on_node_up(node, &self.topo);
        if !plan.is_empty() {
            let cause = node.map_or_else(|| "link up".to_string(), |n| format!("node {n} up"));
            self.apply_plan(d, cause, self.now, plan);
        }
    }

    fn apply_plan(&mut self, d: &DomainId, cause: String, failed_at: Micros, plan: RepairPlan) {
        for iid in plan.affected.iter().chain(&plan.resumed) {
            if !plan.suspended.contains(iid) {
                self.pending_recovery.insert(SubId::new(iid.as_str()), (failed_at, self.now));
            }
        }
        self.repairs.push(RepairRecord {
            domain: d.clone(),
            cause,
            failed_at_ms: failed_at as f64 / 1000.0,
            repaired_at_ms: self.now as f64 / 1000.0,
            affected: plan.affected.clone(),
            suspended: plan.suspended.clone(),
            replayed: plan.replay.values().map(|v| v.len() as u64).sum(),
        });
        self.execute(d, plan.actions);
    }

    // ---- report ----

    fn report(self) -> MetricsReport {
        let duration_us = self.end.max(1);
        let mut subs = Vec::new();
        for s in &self.sc.subscriptions {
            let kind = match s.kind {
                SubscriptionKind::Data { .. } => "data",
                SubscriptionKind::Inference { .. } => "inference",
                SubscriptionKind::ModelUpdate { .. } => "model_update",
            };
            let mut m = SubscriptionMetrics {
                sub_id: s.sub_id.clone(),
                kind: kind.into(),
                subscriber: s.subscriber.clone(),
                error: self.errors.get(&s.sub_id).cloned(),
                ..Default::default()
            };
            if let (Some(t), Some(b)) = (self.trackers.get(&s.sub_id), self.fed.owner_of(&s.sub_id)) {
                m.injected = b.buffers[&s.sub_id].accepted();
                for d in 1..=m.injected {
                    match t.outcome.get(&d) {
                        Some(Outcome::Covered) => m.covered += 1,
                        Some(Outcome::Filtered) => m.filtered += 1,
                        Some(Outcome::Superseded) => m.superseded += 1,
                        Some(Outcome::Dropped) => m.dropped += 1,
                        None => m.in_flight += 1,
                    }
                }
                m.delivered = t.delivered;
                m.duplicates = t.duplicates;
                m.applied_versions = t.applied.clone();
                m.stale_ignored = t.stale_ignored;
                if !t.latencies.is_empty() {
                    let mut l = t.latencies.clone();
                    l.sort_unstable();
                    m.latency_mean_ms = l.iter().sum::<u64>() as f64 / l.len() as f64 / 1000.0;
                    let rank = (l.len() * 95).div_ceil(100).max(1);
                    m.latency_p95_ms = l[rank - 1] as f64 / 1000.0;
                }
            }
            subs.push(m);
        }
        let t = &self.sc.topology;
        let links = t
            .links
            .iter()
            .map(|l| {
                let bytes = self.link_bytes.get(&l.key()).copied().unwrap_or(0);
                LinkMetrics {
                    a: l.a.clone(),
                    b: l.b.clone(),
                    bytes,
                    kb: bytes as f64 / 1000.0,
                    bridge: t.domain_of(&l.a) != t.domain_of(&l.b),
                }
            })
            .collect();
        let nodes = t
            .nodes
            .iter()
            .map(|n| {
                let busy = self.busy_us.get(&n.node_id).copied().unwrap_or(0);
                NodeMetrics {
                    node: n.node_id.clone(),
                    busy_us: busy,
                    busy_ms: busy as f64 / 1000.0,
                    utilization: busy as f64 / duration_us as f64,
                }
            })
            .collect();
        let mut executions = self.executions.clone();
        for (d, b) in &self.fed.brokers {
            for s in &b.graph().stages {
                executions.entry((d.clone(), s.key.clone())).or_insert_with(|| (s.spec.stage_id.clone(), s.node.clone(), 0));
            }
        }
        let stages = executions
            .into_iter()
            .map(|((domain, key), (stage_id, node, executions))| StageMetrics {
                domain,
                key,
                stage_id: stage_id.to_string(),
                node,
                executions,
            })
            .collect();
        let mut instances = Vec::new();
        let mut models = Vec::new();
        let mut suspensions = 0;
        for (d, b) in &self.fed.brokers {
            suspensions += b.suspensions;
            for (iid, rec) in &b.instances {
                instances.push(InstanceMetrics {
                    instance_id: iid.clone(),
                    repairs: rec.repairs,
                    suspended: !rec.is_active(),
                    recovery_ms: self.recovery_us.get(&rec.sub_id).map(|us| *us as f64 / 1000.0),
                });
            }
            for (m, versions) in &b.aggregated {
                models.push(ModelMetrics { model_id: m.clone(), domain: d.clone(), versions: versions.clone() });
            }
        }
        instances.sort_by(|a, b| a.instance_id.cmp(&b.instance_id));
        let mut r = MetricsReport {
            seed: 0,
            duration_ms: self.sc.sim.duration_ms,
            subscriptions: subs,
            links,
            nodes,
            stages,
            instances,
            repairs: self.repairs,
            models,
            totals: Default::default(),
            trace: self.opts.trace.then_some(self.trace),
        };
        r.totals.published = self.published;
        r.totals.suspensions = suspensions;
        r.fill_totals();
        r
    }
}

/// Runs the scenario to `duration_ms` and reports.
pub fn simulate(sc: &Scenario, seed: u64, opts: SimOptions) -> MetricsReport {
    let mut r = Sim::new(sc, seed, opts).run();
    r.seed = seed;
    r
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detection_bound() {
        assert_eq!(detection_time(5_000_000, 50_000, 3), 4_950_000 + 150_000);
        assert_eq!(detection_time(5_010_000, 50_000, 3), 5_000_000 + 150_000);
        for t in [1, 49_999, 50_000, 50_001, 7_777_777] {
            let d = detection_time(t, 50_000, 3);
            assert!(d >= t + 100_000 && d < t + 150_000, "{t} -> {d}");
        }
    }

    #[test]
    fn queue_orders_by_time_then_rank() {
        let mut h = BinaryHeap::new();
        h.push(Reverse(Queued { at: 5, rank: 5, seq: 1, event: Event::Publish(0) }));
        h.push(Reverse(Queued { at: 5, rank: 0, seq: 2, event: Event::Fault(0) }));
        h.push(Reverse(Queued { at: 1, rank: 5, seq: 3, event: Event::Publish(1) }));
        let order: Vec<u64> = std::iter::from_fn(|| h.pop().map(|Reverse(q)| q.seq)).collect();
        assert_eq!(order, vec![3, 2, 1]);
    }
}
