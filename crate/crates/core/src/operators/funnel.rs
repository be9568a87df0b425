use std::collections::BTreeSet;

use crate::domain::{
    Micros, Publication, PublicationTag, Selectivity, StageId, StageKind, StageSpec, Topic,
};

use super::{resolve_fn, CatalogFn, OperatorError, TriggerPolicy};

#[derive(Clone, Debug, PartialEq)]
struct Pending<M> {
    input: StageId,
    publication: Publication,
    meta: M,
}

/// Buffered state of one funnel stage.
///
/// `M` is opaque per-publication metadata carried alongside buffered inputs
/// and handed back when they are consumed or superseded; the simulator uses it
/// for lineage. Plain callers use `()`.
#[derive(Clone, Debug, PartialEq)]
pub struct FunnelState<M = ()> {
    stage_id: StageId,
    output_topic: Topic,
    func: CatalogFn,
    selectivity: Selectivity,
    policy: TriggerPolicy,
    inputs: BTreeSet<StageId>,
    pending: Vec<Pending<M>>,
    window_open_us: Option<Micros>,
    next_seq: u64,
}

/// Result of one offer or tick.
#[derive(Clone, Debug, PartialEq)]
pub struct FunnelOutcome<M = ()> {
    pub emitted: Option<Publication>,
    /// Metadata of every buffered input folded into `emitted`.
    pub consumed: Vec<M>,
    /// Metadata of a pending input replaced under newest-wins.
    pub superseded: Option<M>,
}

impl<M> FunnelOutcome<M> {
    fn nothing() -> Self {
        Self { emitted: None, consumed: Vec::new(), superseded: None }
    }
}

impl<M: Clone> FunnelState<M> {
    /// Builds the state for a funnel stage whose input edges come from
    /// `inputs`. Fails if the stage is not a funnel or its function does not
    /// resolve.
    pub fn new(
        stage: &StageSpec,
        inputs: impl IntoIterator<Item = StageId>,
        output_topic: Topic,
    ) -> Result<Self, OperatorError> {
        let StageKind::Funnel { func, trigger } = &stage.kind else {
            return Err(OperatorError::WrongStageKind(stage.stage_id.clone()));
        };
        let mut inputs: BTreeSet<StageId> = inputs.into_iter().collect();
        if let TriggerPolicy::Barrier { inputs: expected } = trigger {
            inputs = expected.iter().cloned().collect();
        }
        Ok(Self {
            stage_id: stage.stage_id.clone(),
            output_topic,
            func: resolve_fn(func)?,
            selectivity: stage.selectivity,
            policy: trigger.clone(),
            inputs,
            pending: Vec::new(),
            window_open_us: None,
            next_seq: 1,
        })
    }

    pub fn policy(&self) -> &TriggerPolicy {
        &self.policy
    }

    pub fn pending_len(&self) -> usize {
        self.pending.len()
    }

    pub fn window_open_us(&self) -> Option<Micros> {
        self.window_open_us
    }

    /// Sequence number the next emission will carry.
    pub fn next_seq(&self) -> u64 {
        self.next_seq
    }

    /// Restores the emission counter, e.g. after rebuilding a funnel on a new
    /// node, so downstream sequence numbers stay monotone.
    pub fn set_next_seq(&mut self, seq: u64) {
        self.next_seq = seq;
    }

    /// Drops all buffered inputs and closes any open window.
    pub fn clear(&mut self) -> Vec<M> {
        self.window_open_us = None;
        self.pending.drain(..).map(|p| p.meta).collect()
    }

    pub fn offer(
        &mut self,
        input: &StageId,
        p: Publication,
        meta: M,
        now: Micros,
    ) -> Result<FunnelOutcome<M>, OperatorError> {
        if !self.inputs.contains(input) {
            return Err(OperatorError::UnexpectedInput {
                funnel: self.stage_id.clone(),
                input: input.clone(),
            });
        }
        let mut outcome = FunnelOutcome::nothing();
        match &self.policy {
            TriggerPolicy::Barrier { .. } => {
                if let Some(i) = self.pending.iter().position(|x| &x.input == input) {
                    outcome.superseded = Some(self.pending.remove(i).meta);
                }
                self.pending.push(Pending { input: input.clone(), publication: p, meta });
                if self.pending.len() == self.inputs.len() {
                    self.emit_all(now, &mut outcome);
                }
            }
            TriggerPolicy::CountWindow { n } => {
                let n = *n as usize;
                self.pending.push(Pending { input: input.clone(), publication: p, meta });
                if self.pending.len() >= n {
                    self.emit_all(now, &mut outcome);
                }
            }
            TriggerPolicy::TimeWindow { .. } => {
                if self.window_open_us.is_none() {
                    self.window_open_us = Some(now);
                }
                self.pending.push(Pending { input: input.clone(), publication: p, meta });
            }
        }
        Ok(outcome)
    }

    /// Time-window deadline, if a window is open.
    pub fn deadline(&self) -> Option<Micros> {
        match (&self.policy, self.window_open_us) {
            (TriggerPolicy::TimeWindow { delta_ms }, Some(open)) => Some(open + delta_ms * 1000),
            _ => None,
        }
    }

    pub fn tick(&mut self, now: Micros) -> FunnelOutcome<M> {
        let mut outcome = FunnelOutcome::nothing();
        if let Some(deadline) = self.deadline() {
            if now >= deadline {
                self.emit_all(now, &mut outcome);
            }
        }
        outcome
    }

    fn emit_all(&mut self, now: Micros, outcome: &mut FunnelOutcome<M>) {
        self.window_open_us = None;
        if self.pending.is_empty() {
            return;
        }
        let mut batch: Vec<Pending<M>> = self.pending.drain(..).collect();
        batch.sort_by(|a, b| a.publication.sort_key().cmp(&b.publication.sort_key()));
        let payloads: Vec<&Vec<f64>> = batch.iter().map(|x| &x.publication.payload).collect();
        let total: u64 = batch.iter().map(|x| x.publication.size_bytes).sum();
        let emitted = Publication {
            topic: self.output_topic.clone(),
            source: self.stage_id.to_string(),
            seq: self.next_seq,
            ts_us: now,
            size_bytes: self.selectivity.apply(total),
            payload: self.func.apply(&payloads),
            tag: PublicationTag::Derived,
            semantic_tag: None,
        };
        self.next_seq += 1;
        outcome.emitted = Some(emitted);
        outcome.consumed = batch.into_iter().map(|x| x.meta).collect();
    }
}

/// Offers `p`, arriving over the edge from `input`, to the funnel.
pub fn funnel_offer(
    s: FunnelState,
    input: &StageId,
    p: Publication,
    now: Micros,
) -> Result<(FunnelState, Option<Publication>), OperatorError> {
    let mut s = s;
    let out = s.offer(input, p, (), now)?;
    Ok((s, out.emitted))
}

/// Flushes a time window whose deadline (`open + delta`, inclusive) has passed.
pub fn funnel_tick(s: FunnelState, now: Micros) -> (FunnelState, Option<Publication>) {
    let mut s = s;
    let out = s.tick(now);
    (s, out.emitted)
}
