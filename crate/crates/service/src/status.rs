//! Session status automaton.

use bope_core::config::Schedule;
use bope_core::session::Session;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Status {
    AwaitingResponse,
    ReadyForBatch,
    /// A batch has been proposed and its outcomes are outstanding, or an
    /// acquisition is being computed.
    RunningAcquisition,
    Complete,
    Failed,
}

impl Status {
    pub const ALL: [Status; 5] =
        [Status::AwaitingResponse, Status::ReadyForBatch, Status::RunningAcquisition, Status::Complete, Status::Failed];

    pub fn as_str(self) -> &'static str {
        match self {
            Status::AwaitingResponse => "awaiting-response",
            Status::ReadyForBatch => "ready-for-batch",
            Status::RunningAcquisition => "running-acquisition",
            Status::Complete => "complete",
            Status::Failed => "failed",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Verb {
    Create,
    NextQuery,
    Respond,
    ProposeBatch,
    CompleteBatch,
}

impl Verb {
    pub const ALL: [Verb; 5] = [Verb::Create, Verb::NextQuery, Verb::Respond, Verb::ProposeBatch, Verb::CompleteBatch];
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Denial {
    NotFound,
    Conflict,
}

/// Whether `verb` may run on a session in `status` (`None` = no such session).
pub fn check(status: Option<Status>, verb: Verb) -> Result<(), Denial> {
    use Status::*;
    use Verb::*;
    match (status, verb) {
        (None, Create) => Ok(()),
        (None, _) => Err(Denial::NotFound),
        (Some(_), Create) => Err(Denial::Conflict),
        (Some(ReadyForBatch), NextQuery | ProposeBatch) => Ok(()),
        (Some(AwaitingResponse), Respond) => Ok(()),
        (Some(RunningAcquisition), CompleteBatch) => Ok(()),
        (Some(_), _) => Err(Denial::Conflict),
    }
}

/// Result of a permitted verb, as far as the automaton is concerned.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Effect {
    /// The verb left a query pending.
    QueryPending,
    /// The verb left a batch awaiting outcomes.
    BatchPending,
    /// Nothing pending; the schedule is not finished.
    Idle,
    /// Nothing pending; the schedule is finished.
    Finished,
    /// A runtime failure.
    Failed,
}

/// Status after a permitted verb with the given effect.
pub fn next(effect: Effect) -> Status {
    match effect {
        Effect::QueryPending => Status::AwaitingResponse,
        Effect::BatchPending => Status::RunningAcquisition,
        Effect::Idle => Status::ReadyForBatch,
        Effect::Finished => Status::Complete,
        Effect::Failed => Status::Failed,
    }
}

/// Effects a verb can have when it succeeds.
pub fn possible_effects(verb: Verb) -> &'static [Effect] {
    match verb {
        Verb::Create => &[Effect::Idle, Effect::BatchPending, Effect::Failed],
        Verb::NextQuery => &[Effect::QueryPending, Effect::Failed],
        Verb::Respond => &[Effect::Idle, Effect::Finished, Effect::Failed],
        Verb::ProposeBatch => &[Effect::BatchPending, Effect::Idle, Effect::Finished, Effect::Failed],
        Verb::CompleteBatch => &[Effect::Idle, Effect::Finished, Effect::Failed],
    }
}

/// Whether the configured schedule has run its course.
pub fn schedule_finished(session: &Session) -> bool {
    let c = session.config();
    match c.schedule {
        Schedule::PeOnly => session.is_initialized() && session.comparisons() >= c.comparisons_per_stage,
        _ => session.batches_completed() >= c.n_batches,
    }
}

/// Status of a session from its state.
pub fn derive(session: &Session, failed: bool) -> Status {
    if failed {
        Status::Failed
    } else if session.pending_query().is_some() {
        Status::AwaitingResponse
    } else if session.pending_batch().is_some() {
        Status::RunningAcquisition
    } else if schedule_finished(session) {
        Status::Complete
    } else {
        Status::ReadyForBatch
    }
}
