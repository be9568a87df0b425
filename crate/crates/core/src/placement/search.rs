use std::cmp::Ordering;
use std::collections::BTreeSet;

use crate::domain::{Micros, NodeId, NodeState, Pin, StageId};

use super::cost::Model;
use super::{Placement, PlacementError, PlacementProblem};

/// Largest assignment count `place_oracle` will enumerate.
pub const ORACLE_SPACE_LIMIT: u128 = 1_000_000;

/// Partial assignments the greedy backtracking may visit before giving up.
const GREEDY_VISIT_LIMIT: usize = 200_000;

type UpstreamKey = Vec<((usize, Micros), NodeId)>;

/// Exhaustive search over every up (and eligible) node for each unpinned
/// stage. Minimizes the objective; ties go to the assignment that is more
/// upstream stage by stage in topological order, then to lower node ids.
pub fn place_oracle(problem: &PlacementProblem) -> Result<Placement, PlacementError> {
    let m = Model::new(problem)?;
    let mut base = Placement::default();
    let mut free: Vec<StageId> = Vec::new();
    for s in &m.order {
        match m.pin_target(s) {
            Some(n) => {
                base.assignment.insert(s.clone(), n);
            }
            None => free.push(s.clone()),
        }
    }
    let nodes: Vec<NodeId> =
        problem.topology.up_nodes().into_iter().filter(|n| problem.is_eligible(n)).collect();
    let size = (nodes.len() as u128).checked_pow(free.len() as u32).unwrap_or(u128::MAX);
    if size > ORACLE_SPACE_LIMIT {
        return Err(PlacementError::SearchSpaceTooLarge { size });
    }
    if nodes.is_empty() && !free.is_empty() {
        return Err(PlacementError::NoFeasiblePlacement);
    }

    let mut best: Option<(f64, UpstreamKey, Placement)> = None;
    let mut digits = vec![0usize; free.len()];
    loop {
        let mut pl = base.clone();
        for (s, &d) in free.iter().zip(&digits) {
            pl.assignment.insert(s.clone(), nodes[d].clone());
        }
        if m.violations(&pl, false).is_empty() {
            let obj = m.objective(&pl);
            let key: UpstreamKey =
                free.iter().zip(&digits).map(|(s, &d)| (m.distance(s, &nodes[d]), nodes[d].clone())).collect();
            let better = match &best {
                None => true,
                Some((bo, bk, _)) => obj.total_cmp(bo).then_with(|| key.cmp(bk)) == Ordering::Less,
            };
            if better {
                best = Some((obj, key, pl));
            }
        }
        // Odometer increment; done when it wraps.
        let mut i = 0;
        while i < digits.len() {
            digits[i] += 1;
            if digits[i] < nodes.len() {
                break;
            }
            digits[i] = 0;
            i += 1;
        }
        if i == digits.len() {
            break;
        }
    }
    best.map(|(_, _, pl)| pl).ok_or(PlacementError::NoFeasiblePlacement)
}

/// Balanced upstream heuristic: greedy most-upstream assignment along the
/// publisher-to-subscriber routes, then best-improvement local search.
pub fn place_upstream(problem: &PlacementProblem) -> Result<Placement, PlacementError> {
    let m = Model::new(problem)?;
    let mut pl = Placement::default();
    let mut visits = 0;
    if !greedy(&m, 0, &mut pl, &mut visits) {
        return Err(PlacementError::NoFeasiblePlacement);
    }

    let mut current = m.objective(&pl);
    let limit = 100 * m.order.len();
    for _ in 0..limit {
        let mut best: Option<(f64, (usize, Micros), NodeId, StageId)> = None;
        for s in &m.order {
            if m.pin_target(s).is_some() {
                continue;
            }
            let here = pl.assignment[s].clone();
            for n in candidates(&m, s, &pl) {
                if n == here {
                    continue;
                }
                pl.assignment.insert(s.clone(), n.clone());
                let valid = m.violations(&pl, false).is_empty();
                let obj = m.objective(&pl);
                pl.assignment.insert(s.clone(), here.clone());
                if !valid || obj >= current {
                    continue;
                }
                let dist = m.distance(s, &n);
                let better = match &best {
                    None => true,
                    Some((bo, bd, bn, _)) => {
                        obj.total_cmp(bo).then_with(|| dist.cmp(bd)).then_with(|| n.cmp(bn)) == Ordering::Less
                    }
                };
                if better {
                    best = Some((obj, dist, n, s.clone()));
                }
            }
        }
        let Some((obj, _, n, s)) = best else { break };
        pl.assignment.insert(s, n);
        current = obj;
    }
    Ok(pl)
}

/// Every unpinned stage at the subscriber; pins honored. Feasibility is not
/// checked.
pub fn place_baseline_subscriber(problem: &PlacementProblem) -> Result<Placement, PlacementError> {
    let m = Model::new(problem)?;
    Ok(m
        .order
        .iter()
        .map(|s| (s.clone(), m.pin_target(s).unwrap_or_else(|| m.subscriber().clone())))
        .collect())
}

/// Re-places only the stages hosted on `failed` nodes; every other stage
/// keeps its node.
pub fn replan(
    pl: &Placement,
    failed: &BTreeSet<NodeId>,
    problem: &PlacementProblem,
) -> Result<Placement, PlacementError> {
    let w = problem.workload;
    for endpoint in w.publishers().iter().chain([&w.subscriber]) {
        if failed.contains(endpoint) {
            return Err(PlacementError::InstanceTerminated(endpoint.clone()));
        }
    }
    if !pl.assignment.values().any(|n| failed.contains(n)) {
        return Ok(pl.clone());
    }
    let mut topology = problem.topology.clone();
    for n in failed {
        topology.set_node_state(n, NodeState::Down);
    }
    let mut pipeline = problem.pipeline.clone();
    for stage in &mut pipeline.stages {
        if let Some(node) = pl.node_of(&stage.stage_id) {
            if !failed.contains(node) {
                stage.pin = Pin::AtNode(node.clone());
            }
        }
    }
    let sub = PlacementProblem { pipeline: &pipeline, topology: &topology, ..*problem };
    place_upstream(&sub)
}

/// Nodes where `stage` may run given its predecessors' nodes: those on every
/// input's route to the subscriber, upstream first, then every other eligible
/// up node by distance from the first input.
fn candidates(m: &Model, stage: &StageId, pl: &Placement) -> Vec<NodeId> {
    let t = m.problem.topology;
    let sources: Vec<NodeId> = if m.preds[stage].is_empty() {
        vec![m.problem.workload.entries[stage].publisher.clone()]
    } else {
        m.preds[stage].iter().filter_map(|p| pl.node_of(p).cloned()).collect()
    };
    let usable = |n: &NodeId| t.is_up(n) && m.problem.is_eligible(n);
    let routes: Option<Vec<Vec<NodeId>>> =
        sources.iter().map(|src| m.route(src, m.subscriber()).map(|r| r.path)).collect();
    let mut out: Vec<NodeId> = match routes.filter(|r| !r.is_empty()) {
        Some(routes) => routes[0]
            .iter()
            .filter(|n| usable(n) && routes[1..].iter().all(|r| r.contains(n)))
            .cloned()
            .collect(),
        None => Vec::new(),
    };
    let origin = sources.first().cloned().unwrap_or_else(|| m.publisher[stage].clone());
    let mut rest: Vec<((usize, Micros), NodeId)> = t
        .up_nodes()
        .into_iter()
        .filter(|n| usable(n) && !out.contains(n))
        .filter_map(|n| m.route(&origin, &n).map(|r| ((r.hops(), r.latency_us), n)))
        .collect();
    rest.sort();
    out.extend(rest.into_iter().map(|(_, n)| n));
    out
}

fn greedy(m: &Model, idx: usize, pl: &mut Placement, visits: &mut usize) -> bool {
    let Some(stage) = m.order.get(idx) else {
        return m.violations(pl, false).is_empty();
    };
    let options = match m.pin_target(stage) {
        Some(n) => vec![n],
        None => candidates(m, stage, pl),
    };
    for n in options {
        *visits += 1;
        if *visits > GREEDY_VISIT_LIMIT {
            return false;
        }
        pl.assignment.insert(stage.clone(), n);
        if m.violations(pl, true).is_empty() && greedy(m, idx + 1, pl, visits) {
            return true;
        }
        pl.assignment.remove(stage);
    }
    false
}
