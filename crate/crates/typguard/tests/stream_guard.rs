use std::collections::BTreeMap;

use proptest::prelude::*;
use typguard::detectors::predict_label;
use typguard::stream::{
    apply_predictions, assemble_evaluation_batch, emit_outputs, ingest_outputs, run_simulation, synthetic_trace,
    Fallback, FinishReason, MarkerScorer, SchedulerConfig, ScoreItem, Scorer, SimulationConfig, SyntheticRequest,
    TraceEvent, Tracker,
};

const MARKER: &str = "[TOXIC]";

#[derive(Debug, Clone)]
struct Case {
    requests: Vec<SyntheticRequest>,
    words_per_step: usize,
    scheduler: SchedulerConfig,
    seed: u64,
}

impl Case {
    fn events(&self) -> Vec<TraceEvent> {
        synthetic_trace(&self.requests, self.words_per_step, MARKER, self.seed)
    }

    fn config(&self) -> SimulationConfig {
        SimulationConfig { scheduler: self.scheduler.clone(), seed: self.seed, ..Default::default() }
    }
}

fn request(i: usize) -> impl Strategy<Value = SyntheticRequest> {
    (0u64..6, 1usize..150, prop::option::of(0.0f64..1.0)).prop_map(move |(start, total, toxic)| SyntheticRequest {
        req_id: format!("r{i:02}"),
        start_step: start,
        total_words: total,
        toxic_at: toxic.map(|f| 1 + (f * total as f64) as usize % total),
    })
}

fn case(fallback: Option<Fallback>) -> impl Strategy<Value = Case> {
    let fallback = match fallback {
        Some(f) => Just(f).boxed(),
        None => prop_oneof![Just(Fallback::Defer), Just(Fallback::ReducedBatch)].boxed(),
    };
    (1usize..12, 1usize..8, 4usize..26, 1usize..7, 0usize..6, 0usize..4, fallback, any::<u64>()).prop_flat_map(
        |(n, w, interval, min_batch, slack, defer, fallback, seed)| {
            let reqs: Vec<_> = (0..n).map(request).collect();
            reqs.prop_map(move |requests| Case {
                requests,
                words_per_step: w,
                scheduler: SchedulerConfig {
                    interval_words: interval,
                    min_batch_size: min_batch,
                    near_slack_words: slack,
                    max_defer_rounds: defer,
                    fallback,
                    ..Default::default()
                },
                seed,
            })
        },
    )
}

/// Steps the three phases by hand. `check` sees the tracker after ingest
/// and the ids that were evaluated.
fn drive(case: &Case, mut check: impl FnMut(u64, &Tracker, &Tracker, &[String])) {
    let events = case.events();
    let mut tracker = Tracker::new();
    let mut scorer = MarkerScorer::new(MARKER);
    let mut steps: BTreeMap<u64, Vec<TraceEvent>> = BTreeMap::new();
    for ev in events {
        steps.entry(ev.step).or_default().push(ev);
    }
    for (step, evs) in steps {
        let live: Vec<TraceEvent> = evs.into_iter().filter(|e| !tracker.retired.contains_key(&e.req)).collect();
        ingest_outputs(&mut tracker, &live).unwrap();
        let before = tracker.clone();
        let plan = assemble_evaluation_batch(&mut tracker, &case.scheduler);
        if plan.fired {
            let items: Vec<ScoreItem<'_>> = plan
                .req_ids
                .iter()
                .map(|id| {
                    let s = &tracker.active[id];
                    ScoreItem { req_id: id, text: &s.text, word_count: s.word_count, checkpoint: None }
                })
                .collect();
            let scores = scorer.score_batch(&items).unwrap().scores;
            let labels: Vec<u8> = scores.iter().map(|&s| predict_label(s, case.scheduler.threshold)).collect();
            apply_predictions(&mut tracker, &plan.req_ids, &labels).unwrap();
        }
        check(step, &before, &tracker, &plan.req_ids);
        emit_outputs(&mut tracker);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn reduced_batch_evaluates_due_requests_at_once(case in case(Some(Fallback::ReducedBatch))) {
        drive(&case, |step, before, _, evaluated| {
            for s in before.active.values() {
                if s.finish_reason == FinishReason::Running && s.gap() >= case.scheduler.interval_words {
                    assert!(evaluated.contains(&s.req_id), "step {step}: {} due but not evaluated", s.req_id);
                }
            }
        });
    }

    #[test]
    fn deferral_is_bounded(case in case(Some(Fallback::Defer))) {
        // First step each request became due since its last evaluation.
        let mut due_since: BTreeMap<String, u64> = BTreeMap::new();
        let limit = case.scheduler.max_defer_rounds as u64;
        drive(&case, |step, before, _, evaluated| {
            for s in before.active.values() {
                let due = s.finish_reason == FinishReason::Running && s.gap() >= case.scheduler.interval_words;
                if due {
                    let since = *due_since.entry(s.req_id.clone()).or_insert(step);
                    if !evaluated.contains(&s.req_id) {
                        assert!(step < since + limit, "{} due since step {since}, still waiting at {step}", s.req_id);
                    }
                }
                if evaluated.contains(&s.req_id) || s.finish_reason.is_terminal() {
                    due_since.remove(&s.req_id);
                }
            }
        });
    }

    #[test]
    fn no_text_after_abort_and_every_request_leaves_once(case in case(None)) {
        let events = case.events();
        let report = run_simulation(&events, &mut MarkerScorer::new(MARKER), &case.config()).unwrap();
        prop_assert_eq!(report.outputs.len(), case.requests.len());
        let abort_step: BTreeMap<&str, u64> = report
            .decisions
            .iter()
            .flat_map(|d| d.aborted.iter().map(move |id| (id.as_str(), d.step)))
            .collect();
        let mut suppressed = 0;
        for out in &report.outputs {
            let mine = events.iter().filter(|e| e.req == out.req_id);
            let cutoff = abort_step.get(out.req_id.as_str()).copied().unwrap_or(u64::MAX);
            let kept: Vec<&str> = mine.clone().filter(|e| e.step <= cutoff).map(|e| e.segment.as_str()).collect();
            suppressed += mine.filter(|e| e.step > cutoff).count();
            prop_assert_eq!(&out.text, &kept.join(" "));
            prop_assert_eq!(out.word_count, out.text.split_whitespace().count());
            prop_assert_eq!(out.reason == "abort", abort_step.contains_key(out.req_id.as_str()));
            // Only text carrying the marker is ever aborted by the oracle.
            if out.reason == "abort" {
                prop_assert!(out.text.split_whitespace().any(|w| w == MARKER));
            }
        }
        prop_assert_eq!(report.summary.suppressed_events, suppressed);
    }

    #[test]
    fn toxic_requests_are_caught_within_the_bound(case in case(None)) {
        let s = &case.scheduler;
        let w = case.words_per_step;
        let bound = s.interval_words + (s.max_defer_rounds + 1) * w;
        let report = run_simulation(&case.events(), &mut MarkerScorer::new(MARKER), &case.config()).unwrap();
        for r in &case.requests {
            let Some(at) = r.toxic_at else { continue };
            let out = report.outputs.iter().find(|o| o.req_id == r.req_id).unwrap();
            if r.total_words >= at + bound {
                prop_assert_eq!(out.reason.as_str(), "abort", "{} stopped at {}", r.req_id, out.word_count);
            }
            if out.reason == "abort" {
                prop_assert!(out.word_count - at <= bound, "{}: latency {} > {}", r.req_id, out.word_count - at, bound);
            }
        }
        if let Some(max) = report.summary.max_abort_latency_words {
            prop_assert!(max <= bound);
        }
        prop_assert_eq!(report.summary.unexplained_aborts, 0);
    }

    #[test]
    fn identical_inputs_give_identical_logs(case in case(None)) {
        let events = case.events();
        let cfg = case.config();
        let a = run_simulation(&events, &mut MarkerScorer::new(MARKER), &cfg).unwrap();
        let b = run_simulation(&events, &mut MarkerScorer::new(MARKER), &cfg).unwrap();
        prop_assert_eq!(a, b);
        prop_assert_eq!(case.events(), events);
    }

    #[test]
    fn batches_reach_min_size_when_enough_requests_are_eligible(case in case(Some(Fallback::Defer))) {
        let mut never_forced = case.clone();
        never_forced.scheduler.max_defer_rounds = usize::MAX;
        let report = run_simulation(&never_forced.events(), &mut MarkerScorer::new(MARKER), &never_forced.config()).unwrap();
        for d in report.decisions.iter().filter(|d| !d.deferred) {
            prop_assert!(d.evaluated.len() >= case.scheduler.min_batch_size);
        }
    }
}

#[test]
fn synchronized_requests_always_fill_the_batch() {
    let requests: Vec<SyntheticRequest> = (0..8)
        .map(|i| SyntheticRequest { req_id: format!("r{i}"), start_step: 0, total_words: 200, toxic_at: None })
        .collect();
    let scheduler = SchedulerConfig { min_batch_size: 8, max_defer_rounds: 0, ..Default::default() };
    let cfg = SimulationConfig { scheduler, ..Default::default() };
    let report =
        run_simulation(&synthetic_trace(&requests, 3, MARKER, 0), &mut MarkerScorer::new(MARKER), &cfg).unwrap();
    assert!(!report.decisions.is_empty());
    assert!(report.decisions.iter().all(|d| !d.deferred && d.evaluated.len() == 8));
    assert_eq!(report.summary.aborts, 0);
}
