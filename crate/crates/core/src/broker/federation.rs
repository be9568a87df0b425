use std::collections::BTreeMap;

use crate::domain::{
    DomainId, LinkDescriptor, ModelDescriptor, ModelId, NodeId, Publication, SubId, Subscription, SubscriptionKind,
    Topic, Topology,
};

use super::{Action, BrokerConfig, BrokerError, BrokerState, PeerLink, RepairPlan, TopicLoad};

/// One broker per administrative domain, peered over bridge links.
#[derive(Clone, Debug, PartialEq)]
pub struct Federation {
    pub brokers: BTreeMap<DomainId, BrokerState>,
    /// Domain whose broker owns each subscription.
    pub owner: BTreeMap<SubId, DomainId>,
}

impl Federation {
    /// Creates a broker for every domain of `t` and links each pair of domains
    /// joined by a link.
    pub fn new(
        t: &Topology,
        config: BrokerConfig,
        bindings: &BTreeMap<Topic, NodeId>,
        loads: &BTreeMap<Topic, TopicLoad>,
    ) -> Self {
        let mut brokers = BTreeMap::new();
        for d in t.domains() {
            let node = t.broker_node(&d).expect("every domain has at least one node");
            brokers.insert(d.clone(), BrokerState::new(d, node, config, bindings.clone(), loads.clone()));
        }
        let mut fed = Self { brokers, owner: BTreeMap::new() };
        for l in &t.links {
            let (Some(da), Some(db)) = (t.domain_of(&l.a), t.domain_of(&l.b)) else { continue };
            if da != db {
                fed.peer(da, db, l);
                fed.peer(db, da, l);
            }
        }
        fed
    }

    fn peer(&mut self, from: &DomainId, to: &DomainId, bridge: &LinkDescriptor) {
        if let Some(b) = self.brokers.get_mut(from) {
            // The first bridge wins; later ones are alternate paths only.
            let _ = b.link_peer(PeerLink { peer: to.clone(), bridge: bridge.clone() });
        }
    }

    pub fn broker(&self, d: &DomainId) -> Option<&BrokerState> {
        self.brokers.get(d)
    }

    pub fn broker_mut(&mut self, d: &DomainId) -> Option<&mut BrokerState> {
        self.brokers.get_mut(d)
    }

    pub fn register_model(&mut self, domain: &DomainId, m: ModelDescriptor) -> Result<Vec<Action>, BrokerError> {
        self.brokers.get_mut(domain).ok_or_else(|| BrokerError::UnknownDomain(domain.clone()))?.register_model(m)
    }

    /// Domain of the broker registering `model`: `home` if it does, else the
    /// first peer (in domain order) that does over an up bridge.
    pub fn resolve(&self, home: &DomainId, model: &ModelId, t: &Topology) -> Result<DomainId, BrokerError> {
        let b = self.brokers.get(home).ok_or_else(|| BrokerError::UnknownDomain(home.clone()))?;
        if b.models.contains_key(model) {
            return Ok(home.clone());
        }
        for peer in &b.peers {
            let bridge_up = t.link(&peer.bridge.a, &peer.bridge.b).is_some_and(|l| l.is_up())
                && t.is_up(&peer.bridge.a)
                && t.is_up(&peer.bridge.b);
            let has = self.brokers.get(&peer.peer).is_some_and(|pb| pb.models.contains_key(model));
            if bridge_up && has {
                return Ok(peer.peer.clone());
            }
        }
        Err(BrokerError::UnknownModel(model.clone()))
    }

    /// Routes the subscription to the broker of its subscriber's domain.
    /// Model-update subscriptions go to the broker owning the model.
    pub fn subscribe(&mut self, sub: Subscription, t: &Topology) -> Result<(SubId, Vec<Action>), BrokerError> {
        if self.owner.contains_key(&sub.sub_id) {
            return Err(BrokerError::DuplicateSubscription(sub.sub_id));
        }
        let home = t.domain_of(&sub.subscriber).cloned().ok_or_else(|| BrokerError::UnknownNode(sub.subscriber.clone()))?;
        let (target, remote) = match &sub.kind {
            SubscriptionKind::Data { .. } => (home, None),
            SubscriptionKind::ModelUpdate { model_id, .. } => (self.resolve(&home, model_id, t)?, None),
            SubscriptionKind::Inference { model_id, .. } => {
                let owner = self.resolve(&home, model_id, t)?;
                if owner == home {
                    (home, None)
                } else {
                    let m = self.brokers[&owner].models[model_id].clone();
                    (home, Some((owner, m)))
                }
            }
        };
        let b = self.brokers.get_mut(&target).expect("resolved domains exist");
        let out = b.subscribe(sub, t, remote)?;
        self.owner.insert(out.0.clone(), target);
        Ok(out)
    }

    pub fn on_ack(&mut self, sub: &SubId, upto: u64) -> Result<(), BrokerError> {
        let d = self.owner.get(sub).ok_or_else(|| BrokerError::UnknownSubscription(sub.clone()))?;
        self.brokers.get_mut(d).expect("owner exists").on_ack(sub, upto)
    }

    pub fn on_publish(&mut self, p: &Publication) -> Vec<(DomainId, Action)> {
        self.brokers
            .iter_mut()
            .flat_map(|(d, b)| b.on_publish(p).into_iter().map(move |a| (d.clone(), a)))
            .collect()
    }

    pub fn on_node_failure(&mut self, failed: &NodeId, t: &Topology) -> Vec<(DomainId, RepairPlan)> {
        self.brokers.iter_mut().map(|(d, b)| (d.clone(), b.on_node_failure(failed, t))).collect()
    }

    pub fn on_link_failure(&mut self, a: &NodeId, b: &NodeId, t: &Topology) -> Vec<(DomainId, RepairPlan)> {
        self.brokers.iter_mut().map(|(d, s)| (d.clone(), s.on_link_failure(a, b, t))).collect()
    }

    pub fn on_node_up(&mut self, node: Option<&NodeId>, t: &Topology) -> Vec<(DomainId, RepairPlan)> {
        self.brokers.iter_mut().map(|(d, b)| (d.clone(), b.on_node_up(node, t))).collect()
    }

    /// Broker owning the subscription.
    pub fn owner_of(&self, sub: &SubId) -> Option<&BrokerState> {
        self.owner.get(sub).and_then(|d| self.brokers.get(d))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::broker::{DomainSpan, InstanceStatus};
    use crate::domain::{InstanceId, LayerSpec, NodeDescriptor, NodeState, Selectivity, TaskTag, Tier, TopicFilter};

    fn node(id: &str, tier: Tier, domain: &str) -> NodeDescriptor {
        NodeDescriptor {
            node_id: id.into(),
            tier,
            cpu_capacity: 10,
            mem_mb: 4096,
            has_accelerator: false,
            domain: domain.into(),
            state: NodeState::Up,
        }
    }

    /// Domain a: P - EA - CA; domain b: EB - CB; bridge CA - CB.
    fn topo() -> Topology {
        Topology {
            nodes: vec![
                node("P", Tier::Device, "a"),
                node("EA", Tier::Edge, "a"),
                node("CA", Tier::Cloud, "a"),
                node("EB", Tier::Edge, "b"),
                node("CB", Tier::Cloud, "b"),
            ],
            links: vec![
                LinkDescriptor::new("P", "EA", 2.0, 1.0),
                LinkDescriptor::new("EA", "CA", 5.0, 10.0),
                LinkDescriptor::new("CA", "CB", 20.0, 10.0),
                LinkDescriptor::new("CB", "EB", 2.0, 10.0),
            ],
            brokers: Default::default(),
        }
    }

    fn model() -> ModelDescriptor {
        ModelDescriptor {
            model_id: "m".into(),
            version: 1,
            task_tag: TaskTag::Telemetry,
            layers: vec![
                LayerSpec { compute_cost: 1, mem_mb: 1, selectivity: Selectivity::new(1, 2).unwrap(), needs_accelerator: false };
                2
            ],
            params: vec![],
        }
    }

    fn fed() -> Federation {
        let bindings = [(Topic::new("net/a").unwrap(), NodeId::new("P"))].into();
        Federation::new(&topo(), BrokerConfig::default(), &bindings, &BTreeMap::new())
    }

    fn inference(id: &str, subscriber: &str) -> Subscription {
        Subscription {
            sub_id: id.into(),
            subscriber: subscriber.into(),
            kind: SubscriptionKind::Inference {
                model_id: "m".into(),
                filter: TopicFilter::new("net/#").unwrap(),
                privacy_split: false,
                k: 2,
                funnel: None,
                gate: None,
            },
        }
    }

    #[test]
    fn brokers_are_peered_over_the_bridge() {
        let f = fed();
        assert_eq!(f.brokers.len(), 2);
        assert_eq!(f.brokers[&DomainId::new("a")].peers[0].peer, DomainId::new("b"));
        assert_eq!(f.brokers[&DomainId::new("b")].broker_node, NodeId::new("CB"));
    }

    #[test]
    fn remote_model_is_imported_from_its_owner() {
        let mut f = fed();
        let t = topo();
        f.register_model(&"b".into(), model()).unwrap();
        let (_, actions) = f.subscribe(inference("i", "EA"), &t).unwrap();
        let b = f.owner_of(&"i".into()).unwrap();
        assert_eq!(b.domain_id, DomainId::new("a"));
        let rec = &b.instances[&InstanceId::new("i")];
        assert_eq!(rec.span, DomainSpan::Cross { peer: "b".into() });
        assert_eq!(rec.status, InstanceStatus::Active);
        let import = actions.iter().find_map(|a| match a {
            Action::ImportModel { from, to, size_bytes, .. } => Some((from.clone(), to.clone(), *size_bytes)),
            _ => None,
        });
        assert_eq!(import, Some(("CB".into(), b.broker_node.clone(), model().wire_size())));
    }

    #[test]
    fn bridge_down_makes_remote_models_unknown() {
        let mut f = fed();
        let mut t = topo();
        f.register_model(&"b".into(), model()).unwrap();
        t.set_link_state(&"CA".into(), &"CB".into(), NodeState::Down);
        let err = f.subscribe(inference("i", "EA"), &t).unwrap_err();
        assert_eq!(err, BrokerError::UnknownModel("m".into()));
    }

    #[test]
    fn local_model_preferred() {
        let mut f = fed();
        let t = topo();
        f.register_model(&"a".into(), model()).unwrap();
        f.register_model(&"b".into(), model()).unwrap();
        f.subscribe(inference("i", "EA"), &t).unwrap();
        let rec = &f.owner_of(&"i".into()).unwrap().instances[&InstanceId::new("i")];
        assert_eq!(rec.span, DomainSpan::Local);
        assert!(rec.instance.placement.nodes().iter().all(|n| t.domain_of(n) == Some(&DomainId::new("a"))));
        let dup = f.subscribe(inference("i", "EB"), &t).unwrap_err();
        assert_eq!(dup, BrokerError::DuplicateSubscription("i".into()));
    }

    #[test]
    fn publications_reach_the_owning_broker_only() {
        let mut f = fed();
        let t = topo();
        f.register_model(&"b".into(), model()).unwrap();
        f.subscribe(inference("i", "EA"), &t).unwrap();
        let out = f.on_publish(&Publication::raw(Topic::new("net/a").unwrap(), "P", 1, 0, 100, vec![1.0]));
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].0, DomainId::new("a"));
    }
}
