//! Executable semantics of pipeline stages.
//!
//! Operators never advance time: `ts_us` is preserved by mappings and filters
//! and funnel emissions are stamped with the caller-supplied `now`. All time
//! passage belongs to the simulator.

mod catalog;
mod funnel;
mod update;

use thiserror::Error;

use crate::domain::{Publication, PublicationTag, StageId, StageKind, StageSpec};

pub use crate::domain::TriggerPolicy;
pub use catalog::{elementwise_mean, resolve_fn, resolve_predicate, CatalogFn, Predicate};
pub use funnel::{funnel_offer, funnel_tick, FunnelOutcome, FunnelState};
pub use update::{aggregate_updates, ModelUpdate};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum OperatorError {
    #[error("unknown function {0:?}")]
    UnknownFn(String),
    #[error("unknown predicate {0:?}")]
    UnknownPredicate(String),
    #[error("bad arguments for {name:?}: {reason}")]
    BadArgument { name: String, reason: String },
    #[error("stage {0} has the wrong kind for this operator")]
    WrongStageKind(StageId),
    #[error("publication arrived on {input}, which is not an input of funnel {funnel}")]
    UnexpectedInput { funnel: StageId, input: StageId },
    #[error("no updates to aggregate")]
    EmptyUpdates,
    #[error("updates mix model ids")]
    MixedModels,
    #[error("updates mix versions")]
    MixedVersions,
    #[error("update deltas differ in length")]
    LengthMismatch,
}

/// Applies a mapping stage: `size = max(1, ceil(size * selectivity))`, payload
/// through the catalog function, tag becomes derived.
pub fn apply_mapping(stage: &StageSpec, p: &Publication) -> Result<Publication, OperatorError> {
    let StageKind::Mapping { func } = &stage.kind else {
        return Err(OperatorError::WrongStageKind(stage.stage_id.clone()));
    };
    let f = resolve_fn(func)?;
    Ok(Publication {
        size_bytes: stage.selectivity.apply(p.size_bytes),
        payload: f.apply(&[&p.payload]),
        tag: PublicationTag::Derived,
        ..p.clone()
    })
}

/// Passes `p` (retagged, resized) iff the stage predicate holds.
pub fn inference_filter(stage: &StageSpec, p: &Publication) -> Result<Option<Publication>, OperatorError> {
    let StageKind::Filter { predicate } = &stage.kind else {
        return Err(OperatorError::WrongStageKind(stage.stage_id.clone()));
    };
    let pred = resolve_predicate(predicate)?;
    Ok(pred.holds(&p.payload).then(|| Publication {
        size_bytes: stage.selectivity.apply(p.size_bytes),
        tag: PublicationTag::Derived,
        ..p.clone()
    }))
}

/// Validates that a stage's function or predicate resolves in the catalog.
pub fn check_stage(stage: &StageSpec) -> Result<(), OperatorError> {
    match &stage.kind {
        StageKind::Mapping { func } | StageKind::Funnel { func, .. } => resolve_fn(func).map(|_| ()),
        StageKind::Filter { predicate } => resolve_predicate(predicate).map(|_| ()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{FnRef, Selectivity, Topic};
    use proptest::prelude::*;

    fn publication(size: u64, payload: Vec<f64>) -> Publication {
        Publication::raw(Topic::new("net/a").unwrap(), "P", 7, 42, size, payload)
    }

    fn mapping(func: FnRef, sel: f64) -> StageSpec {
        StageSpec::mapping("s", func, 1, Selectivity::from_f64(sel).unwrap())
    }

    #[test]
    fn identity_mapping_keeps_payload_and_size() {
        let out = apply_mapping(&mapping(FnRef::named("identity"), 1.0), &publication(100, vec![1.0, 2.0])).unwrap();
        assert_eq!(out.payload, vec![1.0, 2.0]);
        assert_eq!(out.size_bytes, 100);
        assert_eq!(out.tag, PublicationTag::Derived);
        assert_eq!((out.seq, out.ts_us, out.source.as_str()), (7, 42, "P"));
    }

    #[test]
    fn selectivity_halves_size() {
        let out = apply_mapping(&mapping(FnRef::named("identity"), 0.5), &publication(100, vec![])).unwrap();
        assert_eq!(out.size_bytes, 50);
    }

    #[test]
    fn affine_mapping() {
        let f = FnRef::named("affine").with_arg("a", 2.0).with_arg("b", 1.0);
        let out = apply_mapping(&mapping(f, 1.0), &publication(10, vec![1.0, 2.0, 3.0])).unwrap();
        assert_eq!(out.payload, vec![3.0, 5.0, 7.0]);
    }

    #[test]
    fn unknown_fn_is_an_error() {
        let err = apply_mapping(&mapping(FnRef::named("nope"), 1.0), &publication(10, vec![]));
        assert_eq!(err, Err(OperatorError::UnknownFn("nope".into())));
    }

    fn filter_stage(min: f64) -> StageSpec {
        StageSpec {
            kind: StageKind::Filter {
                predicate: FnRef::named("threshold").with_arg("index", 0.0).with_arg("min", min),
            },
            ..mapping(FnRef::named("identity"), 1.0)
        }
    }

    #[test]
    fn threshold_filter_passes_and_drops() {
        let pass = inference_filter(&filter_stage(5.0), &publication(10, vec![7.0, 0.0])).unwrap();
        assert_eq!(pass.map(|p| p.tag), Some(PublicationTag::Derived));
        assert_eq!(inference_filter(&filter_stage(5.0), &publication(10, vec![3.0])).unwrap(), None);
        let mut bad = filter_stage(0.0);
        bad.kind = StageKind::Filter { predicate: FnRef::named("maybe") };
        assert_eq!(
            inference_filter(&bad, &publication(1, vec![])),
            Err(OperatorError::UnknownPredicate("maybe".into()))
        );
    }

    proptest! {
        #[test]
        fn size_law_holds(size in 1u64..1_000_000, n in 1u128..1000, d in 1u128..1000) {
            let sel = Selectivity::new(n, d).unwrap();
            let stage = StageSpec::mapping("s", FnRef::named("identity"), 0, sel);
            let out = apply_mapping(&stage, &publication(size, vec![])).unwrap();
            let expected = ((size as u128 * n).div_ceil(d)).max(1) as u64;
            prop_assert_eq!(out.size_bytes, expected);
        }
    }
}
