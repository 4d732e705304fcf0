//! Step-by-step replay of a trace through the three phases.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::{
    apply_predictions, assemble_evaluation_batch, emit_outputs, ingest_outputs, DecisionRecord, FinalOutput,
    SchedulerConfig, ScoreItem, Scorer, TraceEvent, Tracker,
};
use crate::detectors::predict_label;
use crate::error::{Error, Result};

/// Simulated costs, in milliseconds. The overhead ratio compares total
/// scorer cost with total generation cost.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CostModel {
    pub generation_ms_per_step: f64,
    pub scorer_ms_per_batch: f64,
    pub scorer_ms_per_request: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        CostModel { generation_ms_per_step: 25.0, scorer_ms_per_batch: 1.0, scorer_ms_per_request: 0.02 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimulationConfig {
    pub scheduler: SchedulerConfig,
    pub cost: CostModel,
    /// Marker word for the oracle and synthetic scorers.
    pub marker: String,
    pub seed: u64,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        SimulationConfig {
            scheduler: SchedulerConfig::default(),
            cost: CostModel::default(),
            marker: "[TOXIC]".into(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationSummary {
    pub aborts: usize,
    /// Mean of `abort word count − first toxic word` over aborts with a known onset.
    pub mean_abort_latency_words: Option<f64>,
    pub max_abort_latency_words: Option<usize>,
    /// Aborts of requests with no known toxic onset.
    pub unexplained_aborts: usize,
    /// Fired batches.
    pub evaluations: usize,
    pub evaluated_requests: usize,
    pub mean_batch: Option<f64>,
    pub deferred_rounds: usize,
    pub overhead_ratio: f64,
    pub steps: usize,
    /// Events dropped because their request was already aborted.
    pub suppressed_events: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationReport {
    pub decisions: Vec<DecisionRecord>,
    pub outputs: Vec<FinalOutput>,
    pub summary: SimulationSummary,
}

/// Replays `events` step by step. Events of an aborted request are dropped,
/// as the engine would no longer generate for it.
pub fn run_simulation(
    events: &[TraceEvent],
    scorer: &mut dyn Scorer,
    cfg: &SimulationConfig,
) -> Result<SimulationReport> {
    cfg.scheduler.validate()?;
    if events.windows(2).any(|w| w[1].step < w[0].step) {
        return Err(Error::Protocol("trace steps must not decrease".into()));
    }
    let mut tracker = Tracker::new();
    let mut aborted_ids = BTreeSet::new();
    let mut decisions = Vec::new();
    let mut outputs = Vec::new();
    let mut latencies = Vec::new();
    let (mut aborts, mut unexplained, mut suppressed) = (0, 0, 0);
    let (mut evaluations, mut evaluated_requests, mut deferred_rounds, mut steps) = (0, 0, 0, 0);
    let mut scorer_ms = 0.0;

    let mut start = 0;
    while start < events.len() {
        let step = events[start].step;
        let end = start + events[start..].iter().take_while(|e| e.step == step).count();
        let live: Vec<TraceEvent> = events[start..end]
            .iter()
            .filter(|e| {
                let dropped = aborted_ids.contains(&e.req);
                suppressed += usize::from(dropped);
                !dropped
            })
            .cloned()
            .collect();
        start = end;
        steps += 1;

        ingest_outputs(&mut tracker, &live)?;

        let plan = assemble_evaluation_batch(&mut tracker, &cfg.scheduler);
        if plan.deferred {
            deferred_rounds += 1;
            decisions.push(DecisionRecord {
                step,
                evaluated: Vec::new(),
                scores: Vec::new(),
                labels: Vec::new(),
                aborted: Vec::new(),
                deferred: true,
                subset: None,
            });
        } else if plan.fired {
            let items: Vec<ScoreItem<'_>> = plan
                .req_ids
                .iter()
                .map(|id| {
                    let s = &tracker.active[id];
                    ScoreItem { req_id: id, text: &s.text, word_count: s.word_count, checkpoint: s.checkpoint.as_ref() }
                })
                .collect();
            let out = scorer.score_batch(&items)?;
            if out.scores.len() != items.len() {
                return Err(Error::Protocol(format!(
                    "scorer returned {} scores for {} requests",
                    out.scores.len(),
                    items.len()
                )));
            }
            let labels: Vec<u8> = out.scores.iter().map(|&s| predict_label(s, cfg.scheduler.threshold)).collect();
            let aborted = apply_predictions(&mut tracker, &plan.req_ids, &labels)?;
            for id in &aborted {
                let s = &tracker.active[id];
                aborts += 1;
                match scorer.toxic_onset(&s.text).or(s.toxic_onset) {
                    Some(onset) if onset <= s.word_count => latencies.push(s.word_count - onset),
                    _ => unexplained += 1,
                }
                aborted_ids.insert(id.clone());
            }
            evaluations += 1;
            evaluated_requests += plan.req_ids.len();
            scorer_ms += cfg.cost.scorer_ms_per_batch + cfg.cost.scorer_ms_per_request * plan.req_ids.len() as f64;
            decisions.push(DecisionRecord {
                step,
                evaluated: plan.req_ids,
                scores: out.scores,
                labels,
                aborted,
                deferred: false,
                subset: out.subset,
            });
        }

        outputs.extend(emit_outputs(&mut tracker));
    }

    let generation_ms = steps as f64 * cfg.cost.generation_ms_per_step;
    Ok(SimulationReport {
        decisions,
        outputs,
        summary: SimulationSummary {
            aborts,
            mean_abort_latency_words: (!latencies.is_empty())
                .then(|| latencies.iter().sum::<usize>() as f64 / latencies.len() as f64),
            max_abort_latency_words: latencies.iter().copied().max(),
            unexplained_aborts: unexplained,
            evaluations,
            evaluated_requests,
            mean_batch: (evaluations > 0).then(|| evaluated_requests as f64 / evaluations as f64),
            deferred_rounds,
            overhead_ratio: if generation_ms > 0.0 { scorer_ms / generation_ms } else { 0.0 },
            steps,
            suppressed_events: suppressed,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::super::{synthetic_trace, Fallback, MarkerScorer, SyntheticRequest};
    use super::*;

    fn req(id: &str, total: usize, toxic_at: Option<usize>) -> SyntheticRequest {
        SyntheticRequest { req_id: id.into(), start_step: 0, total_words: total, toxic_at }
    }

    fn oracle_cfg() -> SimulationConfig {
        SimulationConfig {
            scheduler: SchedulerConfig {
                interval_words: 20,
                min_batch_size: 2,
                fallback: Fallback::ReducedBatch,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    #[test]
    fn empty_trace_gives_empty_summary() {
        let r = run_simulation(&[], &mut MarkerScorer::new("[TOXIC]"), &SimulationConfig::default()).unwrap();
        assert!(r.decisions.is_empty());
        assert_eq!(r.summary.aborts, 0);
        assert_eq!(r.summary.evaluations, 0);
        assert_eq!(r.summary.mean_batch, None);
        assert_eq!(r.summary.overhead_ratio, 0.0);
    }

    #[test]
    fn hand_stepped_three_request_trace() {
        // 5 words per step; b carries the marker at word 23.
        let reqs = [req("a", 60, None), req("b", 60, Some(23)), req("c", 60, None)];
        let events = synthetic_trace(&reqs, 5, "[TOXIC]", 1);
        let r = run_simulation(&events, &mut MarkerScorer::new("[TOXIC]"), &oracle_cfg()).unwrap();
        // Step 3 (20 words): a, b, c evaluated, all safe. Step 7 (40 words): b aborted.
        assert_eq!(r.decisions.len(), 2);
        assert_eq!(r.decisions[0].step, 3);
        assert_eq!(r.decisions[0].evaluated, vec!["a", "b", "c"]);
        assert_eq!(r.decisions[1].step, 7);
        assert_eq!(r.decisions[1].aborted, vec!["b"]);
        assert_eq!(r.summary.aborts, 1);
        assert_eq!(r.summary.mean_abort_latency_words, Some(17.0));
        let b = r.outputs.iter().find(|o| o.req_id == "b").unwrap();
        assert_eq!((b.reason.as_str(), b.word_count), ("abort", 40));
        assert_eq!(r.summary.suppressed_events, 4);
        // Survivors finish at 60 words in step 11 and leave unevaluated:
        // finished requests only join batches that some running request fires.
        assert!(r.outputs.iter().filter(|o| o.req_id != "b").all(|o| o.reason == "stop" && o.word_count == 60));
    }

    #[test]
    fn identical_inputs_reproduce_the_log() {
        let reqs = [req("a", 47, None), req("b", 33, Some(9)), req("c", 80, Some(70))];
        let events = synthetic_trace(&reqs, 3, "[TOXIC]", 4);
        let cfg = SimulationConfig {
            scheduler: SchedulerConfig { min_batch_size: 2, ..Default::default() },
            ..Default::default()
        };
        let a = run_simulation(&events, &mut MarkerScorer::new("[TOXIC]"), &cfg).unwrap();
        let b = run_simulation(&events, &mut MarkerScorer::new("[TOXIC]"), &cfg).unwrap();
        assert_eq!(a, b);
        assert!(a.outputs.iter().any(|o| o.req_id == "b" && o.reason == "abort"));
    }
}
