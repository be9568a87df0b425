//! Neural publish/subscribe: subscriptions to data, inference and model
//! updates, compiled into distributed mapping/funnel pipelines and placed
//! across a device-edge-cloud continuum.
//!
//! The crate is layered bottom-up:
//!
//! - [`domain`]: topics, publications, models, pipelines, topology and routing.
//! - [`operators`]: executable semantics of mapping, funnel, filter and
//!   model-update aggregation stages.
//! - [`placement`]: cost model, feasibility, exhaustive and upstream-first
//!   placement, failure replanning and shared-prefix merging.
//! - [`broker`]: the per-domain broker state machine and federation.
//! - [`harness`]: scenario files, the deterministic discrete-event simulator
//!   and metrics output.

pub mod domain;
pub mod operators;
pub mod placement;
pub mod broker;
pub mod harness;

pub use domain::*;
