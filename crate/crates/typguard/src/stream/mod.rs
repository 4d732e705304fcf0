//! In-generation guardrail loop over a stream of generation events.
//!
//! Every engine step runs three phases:
//!
//! 1. [`ingest_outputs`] appends new text to each request's state.
//! 2. [`assemble_evaluation_batch`] picks requests due for a check, the
//!    scorer labels them and [`apply_predictions`] marks toxic ones aborted.
//! 3. [`emit_outputs`] hands terminal requests back with an explicit stop
//!    reason and drops them from tracking.
//!
//! Word counts are whitespace-token counts, and the evaluation interval is
//! measured in words.

mod scorer;
mod sim;
mod trace;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prdc::FeatureSubset;

pub use scorer::{BatchScores, MarkerScorer, PipelineScorer, ScoreItem, Scorer, SyntheticScorer};
pub use sim::{run_simulation, CostModel, SimulationConfig, SimulationReport, SimulationSummary};
pub use trace::{parse_trace, read_trace, synthetic_trace, write_trace, EngineFinish, SyntheticRequest, TraceEvent};

/// Embeddings of a request's full text, keyed by view id.
pub type Checkpoint = BTreeMap<String, Vec<f32>>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FinishReason {
    Running,
    Stopped,
    LengthCapped,
    Aborted,
}

impl FinishReason {
    pub fn is_terminal(self) -> bool {
        self != FinishReason::Running
    }

    /// Stop reason carried by the final output record.
    pub fn as_str(self) -> &'static str {
        match self {
            FinishReason::Running => "running",
            FinishReason::Stopped => "stop",
            FinishReason::LengthCapped => "length",
            FinishReason::Aborted => "abort",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestState {
    pub req_id: String,
    pub text: String,
    pub word_count: usize,
    /// Word count at the last evaluation.
    pub last_predicted_at: usize,
    pub finish_reason: FinishReason,
    /// Latest checkpoint embeddings, if the trace carries them.
    pub checkpoint: Option<Checkpoint>,
    /// Ground-truth word position (1-based) of the first toxic content.
    pub toxic_onset: Option<usize>,
}

impl RequestState {
    fn new(req_id: &str) -> Self {
        RequestState {
            req_id: req_id.to_owned(),
            text: String::new(),
            word_count: 0,
            last_predicted_at: 0,
            finish_reason: FinishReason::Running,
            checkpoint: None,
            toxic_onset: None,
        }
    }

    /// Words generated since the last evaluation.
    pub fn gap(&self) -> usize {
        self.word_count - self.last_predicted_at
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Fallback {
    /// Wait for more candidates, up to `max_defer_rounds` steps.
    Defer,
    /// Evaluate whatever candidates exist.
    ReducedBatch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SchedulerConfig {
    pub interval_words: usize,
    pub min_batch_size: usize,
    /// Requests within this many words of the interval may join a short batch.
    pub near_slack_words: usize,
    pub max_defer_rounds: usize,
    pub fallback: Fallback,
    pub threshold: f64,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        SchedulerConfig {
            interval_words: 20,
            min_batch_size: 32,
            near_slack_words: 5,
            max_defer_rounds: 2,
            fallback: Fallback::Defer,
            threshold: crate::detectors::DEFAULT_THRESHOLD,
        }
    }
}

impl SchedulerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.interval_words == 0 || self.min_batch_size == 0 {
            return Err(Error::Parameter("interval_words and min_batch_size must be positive".into()));
        }
        if !self.threshold.is_finite() {
            return Err(Error::Parameter("threshold must be finite".into()));
        }
        Ok(())
    }
}

/// Audit-log entry for one step that had candidates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionRecord {
    pub step: u64,
    pub evaluated: Vec<String>,
    pub scores: Vec<f64>,
    pub labels: Vec<u8>,
    pub aborted: Vec<String>,
    pub deferred: bool,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub subset: Option<FeatureSubset>,
}

/// Tracked requests plus ids that already left tracking.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Tracker {
    pub active: BTreeMap<String, RequestState>,
    /// Terminal requests already emitted, with their final reason.
    pub retired: BTreeMap<String, FinishReason>,
    /// Consecutive rounds a short batch has been deferred.
    pub defer_rounds: usize,
}

impl Tracker {
    pub fn new() -> Self {
        Self::default()
    }
}

pub fn word_count(text: &str) -> usize {
    text.split_whitespace().count()
}

/// Phase 1. Appends each event's segment to its request, registering new
/// requests. A space is inserted when neither side supplies whitespace, so
/// segments are never glued into one word.
pub fn ingest_outputs(tracker: &mut Tracker, events: &[TraceEvent]) -> Result<()> {
    for ev in events {
        if let Some(reason) = tracker.retired.get(&ev.req) {
            return Err(Error::Protocol(format!(
                "event for request {:?} after it finished ({})",
                ev.req,
                reason.as_str()
            )));
        }
        let state = tracker.active.entry(ev.req.clone()).or_insert_with(|| RequestState::new(&ev.req));
        if state.finish_reason.is_terminal() {
            return Err(Error::Protocol(format!(
                "event for request {:?} in terminal state {}",
                ev.req,
                state.finish_reason.as_str()
            )));
        }
        let before = state.word_count;
        if !ev.segment.is_empty() {
            let glue = !state.text.is_empty()
                && !state.text.ends_with(char::is_whitespace)
                && !ev.segment.starts_with(char::is_whitespace);
            if glue {
                state.text.push(' ');
            }
            state.text.push_str(&ev.segment);
            state.word_count = word_count(&state.text);
        }
        if ev.toxic == Some(true) && state.toxic_onset.is_none() {
            state.toxic_onset = Some(before + 1);
        }
        if let Some(cp) = &ev.checkpoint_embeddings {
            state.checkpoint = Some(cp.clone());
        }
        match ev.engine_finish {
            Some(EngineFinish::Stop) => state.finish_reason = FinishReason::Stopped,
            Some(EngineFinish::Length) => state.finish_reason = FinishReason::LengthCapped,
            None => {}
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchPlan {
    pub req_ids: Vec<String>,
    pub texts: Vec<String>,
    pub fired: bool,
    /// True when candidates existed but the batch was held back.
    pub deferred: bool,
}

/// Phase 2 selection.
///
/// Primary candidates are running requests whose gap reached the interval.
/// A short primary set is topped up with near-threshold running requests and
/// requests that finished with unevaluated text. If it is still short, the
/// fallback decides between deferring and firing a reduced batch; after
/// `max_defer_rounds` deferrals the batch fires anyway. Candidates are
/// ordered by descending gap, then by request id.
fn by_gap(mut v: Vec<&RequestState>) -> Vec<&RequestState> {
    v.sort_by(|a, b| b.gap().cmp(&a.gap()).then_with(|| a.req_id.cmp(&b.req_id)));
    v
}

pub fn assemble_evaluation_batch(tracker: &mut Tracker, cfg: &SchedulerConfig) -> BatchPlan {
    let primary = by_gap(
        tracker
            .active
            .values()
            .filter(|s| s.finish_reason == FinishReason::Running && s.gap() >= cfg.interval_words)
            .collect(),
    );
    let plan = |chosen: Vec<&RequestState>, fired, deferred| BatchPlan {
        req_ids: chosen.iter().map(|s| s.req_id.clone()).collect(),
        texts: chosen.iter().map(|s| s.text.clone()).collect(),
        fired,
        deferred,
    };
    if primary.is_empty() {
        return plan(Vec::new(), false, false);
    }
    if primary.len() >= cfg.min_batch_size {
        tracker.defer_rounds = 0;
        return plan(primary, true, false);
    }
    let near_floor = cfg.interval_words.saturating_sub(cfg.near_slack_words).max(1);
    let candidates = by_gap(
        tracker
            .active
            .values()
            .filter(|s| match s.finish_reason {
                FinishReason::Running => s.gap() >= near_floor,
                FinishReason::Stopped | FinishReason::LengthCapped => s.gap() > 0,
                FinishReason::Aborted => false,
            })
            .collect(),
    );
    if candidates.len() >= cfg.min_batch_size || cfg.fallback == Fallback::ReducedBatch {
        tracker.defer_rounds = 0;
        return plan(candidates, true, false);
    }
    tracker.defer_rounds += 1;
    if tracker.defer_rounds > cfg.max_defer_rounds {
        tracker.defer_rounds = 0;
        return plan(candidates, true, false);
    }
    plan(Vec::new(), false, true)
}

/// Phase 2 action. Every evaluated request is stamped with its current word
/// count; label 0 aborts it. Returns the aborted ids in batch order.
pub fn apply_predictions(tracker: &mut Tracker, req_ids: &[String], labels: &[u8]) -> Result<Vec<String>> {
    if req_ids.len() != labels.len() {
        return Err(Error::Protocol(format!("{} labels for {} requests", labels.len(), req_ids.len())));
    }
    if let Some(missing) = req_ids.iter().find(|id| !tracker.active.contains_key(*id)) {
        return Err(Error::Protocol(format!("prediction for unknown request {missing:?}")));
    }
    let mut aborted = Vec::new();
    for (id, &label) in req_ids.iter().zip(labels) {
        let state = tracker.active.get_mut(id).unwrap();
        state.last_predicted_at = state.word_count;
        if label < crate::detectors::LABEL_SAFE {
            state.finish_reason = FinishReason::Aborted;
            aborted.push(id.clone());
        }
    }
    Ok(aborted)
}

/// Final record of a request leaving tracking.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalOutput {
    pub req_id: String,
    pub reason: String,
    pub text: String,
    pub word_count: usize,
}

/// Phase 3. Emits and purges every terminal request, in id order.
pub fn emit_outputs(tracker: &mut Tracker) -> Vec<FinalOutput> {
    let done: Vec<String> =
        tracker.active.values().filter(|s| s.finish_reason.is_terminal()).map(|s| s.req_id.clone()).collect();
    done.into_iter()
        .map(|id| {
            let s = tracker.active.remove(&id).unwrap();
            tracker.retired.insert(id, s.finish_reason);
            FinalOutput {
                req_id: s.req_id,
                reason: s.finish_reason.as_str().to_owned(),
                text: s.text,
                word_count: s.word_count,
            }
        })
        .collect()
}
