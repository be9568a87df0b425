use serde::{Deserialize, Serialize};

use crate::domain::{DomainId, InstanceId, ModelId, NodeId, PublicationTag, SubId, Topic};

use super::HarnessError;

/// Outcome counters of one subscription.
///
/// Every accepted publication (`injected`) ends in exactly one of `covered`
/// (reached the subscriber, possibly folded with others), `filtered`,
/// `superseded`, `dropped` (evicted from the retransmit buffer) or is still
/// `in_flight` at the end of the run. `delivered` counts distinct received
/// publications; `duplicates` counts suppressed re-deliveries.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SubscriptionMetrics {
    pub sub_id: SubId,
    pub kind: String,
    pub subscriber: NodeId,
    pub injected: u64,
    pub delivered: u64,
    pub covered: u64,
    pub duplicates: u64,
    pub dropped: u64,
    pub filtered: u64,
    pub superseded: u64,
    pub in_flight: u64,
    pub latency_mean_ms: f64,
    pub latency_p95_ms: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub applied_versions: Vec<u64>,
    #[serde(default)]
    pub stale_ignored: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LinkMetrics {
    pub a: NodeId,
    pub b: NodeId,
    pub bytes: u64,
    pub kb: f64,
    pub bridge: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct NodeMetrics {
    pub node: NodeId,
    pub busy_us: u64,
    pub busy_ms: f64,
    pub utilization: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageMetrics {
    pub domain: DomainId,
    pub key: String,
    pub stage_id: String,
    pub node: NodeId,
    pub executions: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct InstanceMetrics {
    pub instance_id: InstanceId,
    pub repairs: u32,
    pub suspended: bool,
    /// Failure to first delivery after the latest repair.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub recovery_ms: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RepairRecord {
    pub domain: DomainId,
    pub cause: String,
    pub failed_at_ms: f64,
    pub repaired_at_ms: f64,
    pub affected: Vec<InstanceId>,
    pub suspended: Vec<InstanceId>,
    pub replayed: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelMetrics {
    pub model_id: ModelId,
    pub domain: DomainId,
    /// Versions produced by update aggregation, in order.
    pub versions: Vec<u64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Totals {
    pub published: u64,
    pub injected: u64,
    pub delivered: u64,
    pub duplicates: u64,
    pub dropped: u64,
    pub filtered: u64,
    pub superseded: u64,
    pub in_flight: u64,
    pub link_bytes: u64,
    pub link_kb: f64,
    pub bridge_kb: f64,
    pub stage_executions: u64,
    pub busy_ms: f64,
    pub repairs: u64,
    pub suspensions: u64,
}

/// One data-plane transfer, recorded when tracing is enabled.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub at_us: u64,
    pub kind: String,
    pub path: Vec<NodeId>,
    pub topic: Topic,
    pub source: String,
    pub seq: u64,
    pub tag: PublicationTag,
    pub bytes: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub seed: u64,
    pub duration_ms: u64,
    pub subscriptions: Vec<SubscriptionMetrics>,
    pub links: Vec<LinkMetrics>,
    pub nodes: Vec<NodeMetrics>,
    pub stages: Vec<StageMetrics>,
    pub instances: Vec<InstanceMetrics>,
    pub repairs: Vec<RepairRecord>,
    pub models: Vec<ModelMetrics>,
    pub totals: Totals,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace: Option<Vec<TraceEntry>>,
}

impl MetricsReport {
    pub fn subscription(&self, id: &str) -> Option<&SubscriptionMetrics> {
        self.subscriptions.iter().find(|s| s.sub_id.as_str() == id)
    }

    pub fn link(&self, a: &str, b: &str) -> Option<&LinkMetrics> {
        self.links.iter().find(|l| (l.a.as_str(), l.b.as_str()) == (a, b) || (l.a.as_str(), l.b.as_str()) == (b, a))
    }

    pub fn instance(&self, id: &str) -> Option<&InstanceMetrics> {
        self.instances.iter().find(|i| i.instance_id.as_str() == id)
    }

    /// Recomputes `totals` from the per-entity sections.
    pub fn fill_totals(&mut self) {
        let s = &self.subscriptions;
        let sum = |f: fn(&SubscriptionMetrics) -> u64| s.iter().map(f).sum::<u64>();
        let link_bytes: u64 = self.links.iter().map(|l| l.bytes).sum();
        let bridge_bytes: u64 = self.links.iter().filter(|l| l.bridge).map(|l| l.bytes).sum();
        let busy_us: u64 = self.nodes.iter().map(|n| n.busy_us).sum();
        self.totals = Totals {
            published: self.totals.published,
            injected: sum(|m| m.injected),
            delivered: sum(|m| m.delivered),
            duplicates: sum(|m| m.duplicates),
            dropped: sum(|m| m.dropped),
            filtered: sum(|m| m.filtered),
            superseded: sum(|m| m.superseded),
            in_flight: sum(|m| m.in_flight),
            link_bytes,
            link_kb: link_bytes as f64 / 1000.0,
            bridge_kb: bridge_bytes as f64 / 1000.0,
            stage_executions: self.stages.iter().map(|x| x.executions).sum(),
            busy_ms: busy_us as f64 / 1000.0,
            repairs: self.instances.iter().map(|i| u64::from(i.repairs)).sum(),
            suspensions: self.totals.suspensions,
        };
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Format {
    #[default]
    Json,
    Csv,
}

impl std::str::FromStr for Format {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "json" => Ok(Self::Json),
            "csv" => Ok(Self::Csv),
            other => Err(HarnessError::Format(other.to_string())),
        }
    }
}

/// Serializes a report. JSON nests every section; CSV writes the
/// subscription, link, node and totals sections, each under its own header
/// row and with the section name in the first column.
pub fn emit(r: &MetricsReport, format: Format) -> String {
    match format {
        Format::Json => serde_json::to_string_pretty(r).expect("reports serialize"),
        Format::Csv => emit_csv(r),
    }
}

pub fn parse_json(text: &str) -> Result<MetricsReport, HarnessError> {
    serde_json::from_str(text).map_err(|e| HarnessError::Parse { line: e.line(), message: e.to_string() })
}

fn emit_csv(r: &MetricsReport) -> String {
    let mut w = csv::WriterBuilder::new().flexible(true).from_writer(Vec::new());
    let mut row = |fields: Vec<String>| w.write_record(&fields).expect("in-memory writes succeed");
    row(
        [
            "section", "sub_id", "kind", "subscriber", "injected", "delivered", "covered", "duplicates", "dropped",
            "filtered", "superseded", "in_flight", "latency_mean_ms", "latency_p95_ms", "stale_ignored",
        ]
        .map(String::from)
        .to_vec(),
    );
    for s in &r.subscriptions {
        row(vec![
            "subscription".into(),
            s.sub_id.to_string(),
            s.kind.clone(),
            s.subscriber.to_string(),
            s.injected.to_string(),
            s.delivered.to_string(),
            s.covered.to_string(),
            s.duplicates.to_string(),
            s.dropped.to_string(),
            s.filtered.to_string(),
            s.superseded.to_string(),
            s.in_flight.to_string(),
            s.latency_mean_ms.to_string(),
            s.latency_p95_ms.to_string(),
            s.stale_ignored.to_string(),
        ]);
    }
    row(["section", "a", "b", "bytes", "kb", "bridge"].map(String::from).to_vec());
    for l in &r.links {
        row(vec![
            "link".into(),
            l.a.to_string(),
            l.b.to_string(),
            l.bytes.to_string(),
            l.kb.to_string(),
            l.bridge.to_string(),
        ]);
    }
    row(["section", "node", "busy_ms", "utilization"].map(String::from).to_vec());
    for n in &r.nodes {
        row(vec!["node".into(), n.node.to_string(), n.busy_ms.to_string(), n.utilization.to_string()]);
    }
    let t = &r.totals;
    row(
        [
            "section", "published", "injected", "delivered", "duplicates", "dropped", "filtered", "superseded",
            "in_flight", "link_kb", "bridge_kb", "stage_executions", "busy_ms", "repairs", "suspensions",
        ]
        .map(String::from)
        .to_vec(),
    );
    row(vec![
        "totals".into(),
        t.published.to_string(),
        t.injected.to_string(),
        t.delivered.to_string(),
        t.duplicates.to_string(),
        t.dropped.to_string(),
        t.filtered.to_string(),
        t.superseded.to_string(),
        t.in_flight.to_string(),
        t.link_kb.to_string(),
        t.bridge_kb.to_string(),
        t.stage_executions.to_string(),
        t.busy_ms.to_string(),
        t.repairs.to_string(),
        t.suspensions.to_string(),
    ]);
    String::from_utf8(w.into_inner().expect("in-memory writer flushes")).expect("csv output is utf-8")
}
