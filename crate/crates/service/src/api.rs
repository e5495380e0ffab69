//! Request and response bodies. Every body carries `schema_version`.

use crate::status::Status;
use bope_core::config::LoopConfig;
use bope_core::session::{ModelSummary, PendingBatch, PendingQuery, Session, StageEvent, SCHEMA_VERSION};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateSessionRequest {
    pub schema_version: u32,
    /// A `LoopConfig` document; service default budgets fill a missing `budgets`.
    pub config: serde_json::Value,
    /// Existing outcome data for live sessions.
    #[serde(default)]
    pub initial_data: Option<InitialData>,
    /// Exported event log to replay (session import).
    #[serde(default)]
    pub events: Option<Vec<StageEvent>>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialData {
    pub designs: Vec<Vec<f64>>,
    pub outcomes: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VersionOnly {
    pub schema_version: u32,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RespondRequest {
    pub schema_version: u32,
    /// Id of the query being answered; the pending query when omitted.
    #[serde(default)]
    pub query_id: Option<u64>,
    pub choice: u8,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProposeRequest {
    pub schema_version: u32,
    #[serde(default)]
    pub q: Option<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompleteRequest {
    pub schema_version: u32,
    #[serde(default)]
    pub batch_id: Option<u64>,
    pub outcomes: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryView {
    pub query_id: u64,
    pub y1: Vec<f64>,
    pub y2: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x1: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x2: Option<Vec<f64>>,
    pub outcome_names: Vec<String>,
    /// Observed `[min, max]` of each outcome, for range context.
    pub outcome_ranges: Vec<[f64; 2]>,
    pub random: bool,
    pub degraded: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchView {
    pub batch_id: u64,
    pub designs: Vec<Vec<f64>>,
    pub input_names: Vec<String>,
    pub initial: bool,
    pub degraded: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionView {
    pub schema_version: u32,
    pub id: String,
    pub status: Status,
    pub config: LoopConfig,
    pub created_ms: u64,
    pub updated_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
    pub pending_query: Option<QueryView>,
    pub pending_batch: Option<BatchView>,
    pub event_count: usize,
    pub summary: ModelSummary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryResponse {
    pub schema_version: u32,
    pub status: Status,
    pub query: QueryView,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RespondResponse {
    pub schema_version: u32,
    pub accepted: bool,
    pub status: Status,
    pub summary: ModelSummary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchResponse {
    pub schema_version: u32,
    pub status: Status,
    pub batch: BatchView,
    /// Outcomes filled in by the benchmark evaluator.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub outcomes: Option<Vec<Vec<f64>>>,
    pub summary: ModelSummary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompleteResponse {
    pub schema_version: u32,
    pub status: Status,
    pub summary: ModelSummary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorDetail {
    pub kind: String,
    pub message: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub schema_version: u32,
    pub error: ErrorDetail,
}

pub fn outcome_names(session: &Session) -> Vec<String> {
    match &session.config().space {
        Some(s) if !s.outcome_names.is_empty() => s.outcome_names.clone(),
        _ => (1..=session.k()).map(|i| format!("y{i}")).collect(),
    }
}

pub fn input_names(session: &Session) -> Vec<String> {
    match &session.config().space {
        Some(s) if !s.input_names.is_empty() => s.input_names.clone(),
        _ => (1..=session.bounds().dim()).map(|i| format!("x{i}")).collect(),
    }
}

pub fn outcome_ranges(session: &Session) -> Vec<[f64; 2]> {
    let mut r = vec![[f64::INFINITY, f64::NEG_INFINITY]; session.k()];
    for rec in &session.experiments().records {
        for (o, v) in rec.y.iter().enumerate() {
            r[o][0] = r[o][0].min(*v);
            r[o][1] = r[o][1].max(*v);
        }
    }
    r.into_iter().map(|[lo, hi]| if lo <= hi { [lo, hi] } else { [0.0, 0.0] }).collect()
}

pub fn query_view(session: &Session, q: &PendingQuery) -> QueryView {
    QueryView {
        query_id: q.seq,
        y1: q.query.y1.clone(),
        y2: q.query.y2.clone(),
        x1: q.x1.clone(),
        x2: q.x2.clone(),
        outcome_names: outcome_names(session),
        outcome_ranges: outcome_ranges(session),
        random: q.random,
        degraded: q.degraded,
    }
}

pub fn batch_view(session: &Session, b: &PendingBatch) -> BatchView {
    BatchView {
        batch_id: b.seq,
        designs: b.designs.clone(),
        input_names: input_names(session),
        initial: b.initial,
        degraded: b.degraded,
    }
}

pub fn check_version(v: u32) -> Result<(), String> {
    if v == SCHEMA_VERSION {
        Ok(())
    } else {
        Err(format!("unsupported schema_version {v}; this service speaks {SCHEMA_VERSION}"))
    }
}
