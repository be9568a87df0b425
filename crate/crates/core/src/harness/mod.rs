//! Scenario files, the deterministic discrete-event simulator and metrics.
//!
//! A run is a pure function of `(scenario, seed)`: time is integer
//! microseconds, sizes are integer bytes, every collection is ordered and
//! each topic draws arrivals from its own seeded stream.

mod metrics;
mod scenario;
mod sim;
mod workload;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::broker::{BrokerConfig, BrokerError, Federation, PlacementPolicy};
use crate::domain::{NodeId, SubId};
use crate::placement::{cost, CostReport, Placement, PlacementProblem};

pub use metrics::{
    emit, parse_json, Format, InstanceMetrics, LinkMetrics, MetricsReport, ModelMetrics, NodeMetrics,
    RepairRecord, StageMetrics, SubscriptionMetrics, Totals, TraceEntry,
};
pub use scenario::{load_scenario, validate_scenario, Fault, FaultKind, Scenario, ScenarioModel, SimConfig, TopicWorkload};
pub use sim::{detection_time, simulate, SimOptions};
pub use workload::TopicSource;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HarnessError {
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("invalid scenario at {path}: {rule}")]
    Validation { path: String, rule: String },
    #[error("unknown output format {0:?} (expected json or csv)")]
    Format(String),
    #[error("unknown scenario {0:?}")]
    UnknownScenario(String),
    #[error(transparent)]
    Broker(#[from] BrokerError),
}

/// Runs the scenario with upstream placement; `seed` overrides `sim.seed`.
pub fn run(sc: &Scenario, seed: u64) -> MetricsReport {
    simulate(sc, seed, SimOptions::default())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub upstream: MetricsReport,
    pub baseline: MetricsReport,
}

/// Runs the scenario twice on the same workload draws: once with upstream
/// placement and once with every stage at its subscriber.
pub fn compare(sc: &Scenario, seed: u64) -> Comparison {
    let with = |policy| simulate(sc, seed, SimOptions { policy, ..Default::default() });
    Comparison { upstream: with(PlacementPolicy::Upstream), baseline: with(PlacementPolicy::Baseline) }
}

/// Where one inference subscription's pipeline lands, and what it costs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlacedSubscription {
    pub sub_id: SubId,
    pub subscriber: NodeId,
    pub placement: Placement,
    pub cost: CostReport,
}

/// Resolves every inference subscription of the scenario at time zero under
/// `policy` without simulating.
pub fn place_scenario(sc: &Scenario, policy: PlacementPolicy) -> Result<Vec<PlacedSubscription>, HarnessError> {
    let config = BrokerConfig { buffer_capacity: sc.sim.buffer_capacity, objective: sc.objective, policy };
    let loads = sc.workload.iter().map(|(t, w)| (t.clone(), w.load())).collect();
    let mut fed = Federation::new(&sc.topology, config, &sc.bindings, &loads);
    for m in &sc.models {
        fed.register_model(&m.domain, m.descriptor.clone())?;
    }
    let mut out = Vec::new();
    for sub in sc.inference_subscriptions() {
        let (id, _) = fed.subscribe(sub.clone(), &sc.topology)?;
        let b = fed.owner_of(&id).expect("just subscribed");
        let rec = &b.instances[&crate::domain::InstanceId::new(id.as_str())];
        let problem = PlacementProblem::new(&rec.instance.pipeline, &sc.topology, &rec.workload)
            .with_objective(sc.objective)
            .with_eligible(&rec.eligible);
        out.push(PlacedSubscription {
            sub_id: id,
            subscriber: sub.subscriber.clone(),
            placement: rec.instance.placement.clone(),
            cost: cost(&rec.instance.placement, &problem).map_err(BrokerError::from)?,
        });
    }
    Ok(out)
}

/// Scenario files shipped with the crate. Their numbers are illustrative
/// fixtures, not measurements.
pub mod bundled {
    use super::{load_scenario, HarnessError, Scenario};

    pub const NAMES: [&str; 9] =
        ["nwdaf", "oran", "arvr", "nlp", "federation", "federation_local", "training", "privacy", "funnel"];

    /// The use-case scenarios (the remaining ones exercise single features).
    pub const USE_CASES: [&str; 4] = ["nwdaf", "oran", "arvr", "nlp"];

    pub fn text(name: &str) -> Option<&'static str> {
        Some(match name {
            "nwdaf" => include_str!("../../scenarios/nwdaf.json"),
            "oran" => include_str!("../../scenarios/oran.json"),
            "arvr" => include_str!("../../scenarios/arvr.json"),
            "nlp" => include_str!("../../scenarios/nlp.json"),
            "federation" => include_str!("../../scenarios/federation.json"),
            "federation_local" => include_str!("../../scenarios/federation_local.json"),
            "training" => include_str!("../../scenarios/training.json"),
            "privacy" => include_str!("../../scenarios/privacy.json"),
            "funnel" => include_str!("../../scenarios/funnel.json"),
            _ => return None,
        })
    }

    pub fn load(name: &str) -> Result<Scenario, HarnessError> {
        load_scenario(text(name).ok_or_else(|| HarnessError::UnknownScenario(name.to_string()))?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const ONE_HOP: &str = r#"{
        "topology": {
            "nodes": [
                {"id": "P", "tier": "device", "cpu_capacity": 4, "mem_mb": 512, "domain": "d"},
                {"id": "S", "tier": "cloud", "cpu_capacity": 40, "mem_mb": 4096, "domain": "d"}
            ],
            "links": [{"a": "P", "b": "S", "latency_ms": 2, "bandwidth_kb_per_ms": 1}]
        },
        "models": [{"model_id": "m", "version": 1, "task_tag": "telemetry", "domain": "d",
                    "layers": [{"compute_cost": 4, "mem_mb": 16, "selectivity": "1/2"}]}],
        "bindings": {"net/p": "P"},
        "subscriptions": [],
        "workload": {"net/p": {"size_bytes": 1000, "rate_per_s": 10, "periodic": true, "max_count": 10}},
        "objective": {"alpha": 1.0, "beta": 0.1},
        "sim": {"duration_ms": 2000, "seed": 1}
    }"#;

    fn with_subs(subs: &str) -> Scenario {
        load_scenario(&ONE_HOP.replace(r#""subscriptions": []"#, &format!(r#""subscriptions": {subs}"#))).unwrap()
    }

    #[test]
    fn no_subscriptions_means_no_work() {
        let r = run(&load_scenario(ONE_HOP).unwrap(), 1);
        assert_eq!(r.totals.published, 10);
        assert_eq!(r.totals.stage_executions, 0);
        assert_eq!(r.totals.link_bytes, 0);
    }

    #[test]
    fn periodic_data_subscription_receives_every_publication() {
        let sc = with_subs(r#"[{"sub_id": "s", "subscriber": "S", "kind": "data", "filter": "net/+"}]"#);
        let r = run(&sc, 1);
        let s = r.subscription("s").unwrap();
        assert_eq!((s.injected, s.delivered, s.dropped, s.duplicates, s.in_flight), (10, 10, 0, 0, 0));
        // 2 ms latency plus 1000 bytes at 1 KB/ms.
        assert_eq!(s.latency_mean_ms, 3.0);
        assert_eq!(r.link("P", "S").unwrap().bytes, 10_000);
    }

    #[test]
    fn inference_runs_once_per_publication() {
        let sc = with_subs(r#"[{"sub_id": "s", "subscriber": "S", "kind": "inference", "model_id": "m", "filter": "net/p"}]"#);
        let r = run(&sc, 1);
        let s = r.subscription("s").unwrap();
        assert_eq!((s.injected, s.delivered, s.in_flight), (10, 10, 0));
        assert_eq!(r.totals.stage_executions, 10);
    }

    #[test]
    fn runs_are_deterministic() {
        let sc = bundled::load("arvr").unwrap();
        assert_eq!(emit(&run(&sc, 9), Format::Json), emit(&run(&sc, 9), Format::Json));
        assert_ne!(run(&sc, 9).totals, run(&sc, 10).totals);
    }

    #[test]
    fn bundled_scenarios_load_and_place() {
        for name in bundled::NAMES {
            let sc = bundled::load(name).unwrap_or_else(|e| panic!("{name}: {e}"));
            let placed = place_scenario(&sc, PlacementPolicy::Upstream).unwrap();
            assert_eq!(placed.len(), sc.inference_subscriptions().count(), "{name}");
        }
        assert!(matches!(bundled::load("nope"), Err(HarnessError::UnknownScenario(_))));
    }

    #[test]
    fn upstream_moves_fewer_bytes_than_baseline() {
        for name in bundled::USE_CASES {
            let c = compare(&bundled::load(name).unwrap(), 1);
            assert!(c.upstream.totals.link_bytes < c.baseline.totals.link_bytes, "{name}");
            assert_eq!(c.upstream.totals.published, c.baseline.totals.published, "{name}");
        }
    }
}
