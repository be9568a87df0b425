use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::broker::TopicLoad;
use crate::domain::{
    DomainId, ModelDescriptor, NodeId, SubId, Subscription, SubscriptionKind, Topic, TopicFilter, Topology,
};
use crate::placement::Objective;

use super::HarnessError;

fn default_heartbeat_ms() -> u64 {
    50
}

fn default_misses() -> u64 {
    3
}

fn default_capacity() -> usize {
    crate::broker::DEFAULT_BUFFER_CAPACITY
}

fn default_payload_len() -> usize {
    4
}

/// A model as declared in a scenario: the descriptor plus the domain whose
/// broker registers it. With `update_topic`, trainer publications on matching
/// topics are aggregated into new versions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioModel {
    #[serde(flatten)]
    pub descriptor: ModelDescriptor,
    pub domain: DomainId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub update_topic: Option<TopicFilter>,
}

/// Publication process of one topic.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopicWorkload {
    pub size_bytes: u64,
    pub rate_per_s: f64,
    /// Fixed inter-arrival `1 / rate` instead of Poisson arrivals.
    #[serde(default)]
    pub periodic: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_count: Option<u64>,
    #[serde(default)]
    pub start_ms: u64,
    /// No arrivals after this time.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stop_ms: Option<u64>,
    #[serde(default = "default_payload_len")]
    pub payload_len: usize,
}

impl TopicWorkload {
    pub fn load(&self) -> TopicLoad {
        TopicLoad { size_bytes: self.size_bytes, rate_per_s: self.rate_per_s }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FaultKind {
    NodeDown { node: NodeId },
    NodeUp { node: NodeId },
    LinkDown { a: NodeId, b: NodeId },
    LinkUp { a: NodeId, b: NodeId },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Fault {
    pub at_ms: f64,
    #[serde(flatten)]
    pub kind: FaultKind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub duration_ms: u64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_heartbeat_ms")]
    pub heartbeat_ms: u64,
    #[serde(default = "default_misses")]
    pub heartbeat_misses: u64,
    #[serde(default = "default_capacity")]
    pub buffer_capacity: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub topology: Topology,
    #[serde(default)]
    pub models: Vec<ScenarioModel>,
    /// Topic published by each node.
    #[serde(default)]
    pub bindings: BTreeMap<Topic, NodeId>,
    #[serde(default)]
    pub subscriptions: Vec<Subscription>,
    #[serde(default)]
    pub workload: BTreeMap<Topic, TopicWorkload>,
    #[serde(default)]
    pub faults: Vec<Fault>,
    #[serde(default)]
    pub objective: Objective,
    pub sim: SimConfig,
}

/// Parses and validates a scenario document.
pub fn load_scenario(text: &str) -> Result<Scenario, HarnessError> {
    let sc: Scenario = serde_json::from_str(text)
        .map_err(|e| HarnessError::Parse { line: e.line(), message: e.to_string() })?;
    validate_scenario(&sc)?;
    Ok(sc)
}

fn invalid(path: impl Into<String>, rule: impl Into<String>) -> HarnessError {
    HarnessError::Validation { path: path.into(), rule: rule.into() }
}

/// Checks every referential and range invariant; reports the first violation.
pub fn validate_scenario(sc: &Scenario) -> Result<(), HarnessError> {
    let t = &sc.topology;
    if t.nodes.is_empty() {
        return Err(invalid("topology.nodes", "at least one node is required"));
    }
    if let Some(e) = t.validate().into_iter().next() {
        return Err(invalid("topology", e.to_string()));
    }
    let domains = t.domains();
    let known = |n: &NodeId| t.node(n).is_some();

    let mut models = BTreeMap::new();
    for (i, m) in sc.models.iter().enumerate() {
        let path = format!("models[{i}]");
        let d = &m.descriptor;
        if d.layers.is_empty() {
            return Err(invalid(format!("{path}.layers"), "a model needs at least one layer"));
        }
        if !domains.contains(&m.domain) {
            return Err(invalid(format!("{path}.domain"), format!("unknown domain {}", m.domain)));
        }
        if let Some(j) = d.layers.iter().position(|l| l.compute_cost == 0) {
            return Err(invalid(format!("{path}.layers[{j}].compute_cost"), "must be positive"));
        }
        if models.insert(d.model_id.clone(), m).is_some_and(|prev| prev.domain == m.domain) {
            return Err(invalid(format!("{path}.model_id"), format!("duplicate model {} in one domain", d.model_id)));
        }
    }
    for (topic, node) in &sc.bindings {
        if !known(node) {
            return Err(invalid(format!("bindings.{topic}"), format!("unknown node {node}")));
        }
    }
    let mut ids = BTreeSet::new();
    for (i, s) in sc.subscriptions.iter().enumerate() {
        let path = format!("subscriptions[{i}]");
        if !ids.insert(&s.sub_id) {
            return Err(invalid(format!("{path}.sub_id"), format!("duplicate subscription {}", s.sub_id)));
        }
        if !known(&s.subscriber) {
            return Err(invalid(format!("{path}.subscriber"), format!("unknown node {}", s.subscriber)));
        }
        match &s.kind {
            SubscriptionKind::Data { .. } => {}
            SubscriptionKind::Inference { model_id, filter, k, .. } => {
                let Some(m) = models.get(model_id) else {
                    return Err(invalid(format!("{path}.model_id"), format!("unknown model {model_id}")));
                };
                if *k == 0 || *k > m.descriptor.layers.len() {
                    return Err(invalid(format!("{path}.k"), format!("must be in 1..={}", m.descriptor.layers.len())));
                }
                if !sc.bindings.keys().any(|t| filter.matches(t)) {
                    return Err(invalid(format!("{path}.filter"), "no binding matches the filter"));
                }
            }
            SubscriptionKind::ModelUpdate { model_id, .. } => {
                if !models.contains_key(model_id) {
                    return Err(invalid(format!("{path}.model_id"), format!("unknown model {model_id}")));
                }
            }
        }
    }
    for (topic, w) in &sc.workload {
        let path = format!("workload.{topic}");
        if !sc.bindings.contains_key(topic) {
            return Err(invalid(path, "workload topic has no binding"));
        }
        if !(w.rate_per_s.is_finite() && w.rate_per_s > 0.0) {
            return Err(invalid(format!("{path}.rate_per_s"), "must be positive"));
        }
        if w.size_bytes == 0 {
            return Err(invalid(format!("{path}.size_bytes"), "must be positive"));
        }
    }
    for (i, f) in sc.faults.iter().enumerate() {
        let path = format!("faults[{i}]");
        if !(f.at_ms.is_finite() && f.at_ms >= 0.0) {
            return Err(invalid(format!("{path}.at_ms"), "must be non-negative"));
        }
        match &f.kind {
            FaultKind::NodeDown { node } | FaultKind::NodeUp { node } => {
                if !known(node) {
                    return Err(invalid(format!("{path}.node"), format!("unknown node {node}")));
                }
            }
            FaultKind::LinkDown { a, b } | FaultKind::LinkUp { a, b } => {
                if t.link(a, b).is_none() {
                    return Err(invalid(path, format!("unknown link {a}-{b}")));
                }
            }
        }
    }
    sc.objective.check().map_err(|e| invalid("objective", e.to_string()))?;
    let sim = &sc.sim;
    if sim.duration_ms == 0 {
        return Err(invalid("sim.duration_ms", "must be positive"));
    }
    if sim.heartbeat_ms == 0 {
        return Err(invalid("sim.heartbeat_ms", "must be positive"));
    }
    if sim.heartbeat_misses == 0 {
        return Err(invalid("sim.heartbeat_misses", "must be positive"));
    }
    if sim.buffer_capacity == 0 {
        return Err(invalid("sim.buffer_capacity", "must be positive"));
    }
    Ok(())
}

impl Scenario {
    pub fn inference_subscriptions(&self) -> impl Iterator<Item = &Subscription> {
        self.subscriptions.iter().filter(|s| s.is_inference())
    }

    pub fn subscription(&self, id: &SubId) -> Option<&Subscription> {
        self.subscriptions.iter().find(|s| &s.sub_id == id)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenarios serialize")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "topology": {
            "nodes": [{"id": "A", "tier": "edge", "cpu_capacity": 4, "mem_mb": 512, "domain": "d"}],
            "links": []
        },
        "models": [],
        "bindings": {"net/a": "A"},
        "subscriptions": [{"sub_id": "s", "subscriber": "A", "kind": "data", "filter": "net/#"}],
        "workload": {"net/a": {"size_bytes": 100, "rate_per_s": 10, "periodic": true, "max_count": 10}},
        "faults": [],
        "objective": {"alpha": 1.0, "beta": 0.1},
        "sim": {"duration_ms": 2000, "seed": 1}
    }"#;

    #[test]
    fn minimal_scenario_loads() {
        let sc = load_scenario(MINIMAL).unwrap();
        assert_eq!(sc.sim.heartbeat_ms, 50);
        assert_eq!(sc.sim.heartbeat_misses, 3);
        assert_eq!(sc.workload.values().next().unwrap().payload_len, 4);
        let again = load_scenario(&sc.to_json()).unwrap();
        assert_eq!(again, sc);
    }

    #[test]
    fn unknown_link_endpoint_is_a_validation_error() {
        let text = MINIMAL.replace(r#""links": []"#, r#""links": [{"a": "A", "b": "Z", "latency_ms": 1, "bandwidth_kb_per_ms": 1}]"#);
        match load_scenario(&text) {
            Err(HarnessError::Validation { path, .. }) => assert_eq!(path, "topology"),
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn syntax_errors_carry_a_line() {
        let text = MINIMAL.replace(r#""faults": [],"#, r#""faults": [,"#);
        match load_scenario(&text) {
            Err(HarnessError::Parse { line, .. }) => assert_eq!(line, 10),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = MINIMAL.replace(r#""faults": [],"#, r#""faults": [], "extra": 1,"#);
        assert!(matches!(load_scenario(&text), Err(HarnessError::Parse { .. })));
    }

    #[test]
    fn unknown_subscriber_and_zero_duration() {
        let text = MINIMAL.replace(r#""subscriber": "A""#, r#""subscriber": "Q""#);
        assert!(matches!(
            load_scenario(&text),
            Err(HarnessError::Validation { path, .. }) if path == "subscriptions[0].subscriber"
        ));
        let text = MINIMAL.replace(r#""duration_ms": 2000"#, r#""duration_ms": 0"#);
        assert!(matches!(load_scenario(&text), Err(HarnessError::Validation { path, .. }) if path == "sim.duration_ms"));
    }
}
