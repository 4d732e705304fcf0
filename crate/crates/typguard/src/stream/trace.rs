//! JSON-lines generation traces.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Checkpoint;
use crate::error::{Error, Result};
use crate::synth::rng_for;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EngineFinish {
    Stop,
    Length,
}

/// One generation event. `toxic` is optional ground truth: the segment
/// contains the request's first harmful content.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceEvent {
    pub step: u64,
    pub req: String,
    #[serde(default)]
    pub segment: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint_embeddings: Option<Checkpoint>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub engine_finish: Option<EngineFinish>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub toxic: Option<bool>,
}

/// Parses a trace. Blank lines are skipped; steps must not decrease.
pub fn parse_trace(text: &str) -> Result<Vec<TraceEvent>> {
    let mut out: Vec<TraceEvent> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let ev: TraceEvent =
            serde_json::from_str(line).map_err(|e| Error::Parse { line: i + 1, message: e.to_string() })?;
        if let Some(prev) = out.last() {
            if ev.step < prev.step {
                return Err(Error::Parse {
                    line: i + 1,
                    message: format!("step {} after step {}", ev.step, prev.step),
                });
            }
        }
        out.push(ev);
    }
    Ok(out)
}

pub fn read_trace(path: impl AsRef<Path>) -> Result<Vec<TraceEvent>> {
    parse_trace(&fs::read_to_string(path)?)
}

pub fn write_trace<W: Write>(mut out: W, events: &[TraceEvent]) -> Result<()> {
    for ev in events {
        serde_json::to_writer(&mut out, ev)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// A request for [`synthetic_trace`].
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticRequest {
    pub req_id: String,
    pub start_step: u64,
    pub total_words: usize,
    /// 1-based word position replaced by `marker`.
    pub toxic_at: Option<usize>,
}

/// Requests that emit `words_per_step` words per step from their start
/// step until `total_words`, then finish with `stop`. Filler words are drawn
/// from a small vocabulary with the seeded generator.
pub fn synthetic_trace(
    requests: &[SyntheticRequest],
    words_per_step: usize,
    marker: &str,
    seed: u64,
) -> Vec<TraceEvent> {
    const VOCAB: [&str; 8] = ["the", "model", "said", "that", "a", "plan", "was", "fine"];
    let mut rng = rng_for(seed, 0);
    let per_step = words_per_step.max(1);
    let mut events = Vec::new();
    let last = requests.iter().map(|r| r.start_step + r.total_words.div_ceil(per_step) as u64).max().unwrap_or(0);
    let mut emitted = vec![0usize; requests.len()];
    for step in 0..=last {
        for (r, done) in requests.iter().zip(emitted.iter_mut()) {
            if step < r.start_step || *done >= r.total_words {
                continue;
            }
            let n = per_step.min(r.total_words - *done);
            let mut toxic = false;
            let segment: Vec<&str> = (*done + 1..=*done + n)
                .map(|pos| {
                    if r.toxic_at == Some(pos) {
                        toxic = true;
                        marker
                    } else {
                        VOCAB[rng.random_range(0..VOCAB.len())]
                    }
                })
                .collect();
            *done += n;
            events.push(TraceEvent {
                step,
                req: r.req_id.clone(),
                segment: segment.join(" "),
                checkpoint_embeddings: None,
                engine_finish: (*done == r.total_words).then_some(EngineFinish::Stop),
                toxic: toxic.then_some(true),
            });
        }
    }
    events
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_reports_line_numbers() {
        let text = "{\"step\":0,\"req\":\"a\",\"segment\":\"hi\"}\n\n{\"step\":1,\"req\":\"a\",\"segment\":5}\n";
        match parse_trace(text) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        let back = "{\"step\":2,\"req\":\"a\"}\n{\"step\":1,\"req\":\"a\"}";
        assert!(matches!(parse_trace(back), Err(Error::Parse { line: 2, .. })));
        assert!(parse_trace("").unwrap().is_empty());
    }

    #[test]
    fn trace_round_trip_with_optional_fields() {
        let text =
            r#"{"step":3,"req":"r","segment":"a b","checkpoint_embeddings":{"v":[1.0,0.0]},"engine_finish":"length"}"#;
        let evs = parse_trace(text).unwrap();
        assert_eq!(evs[0].engine_finish, Some(EngineFinish::Length));
        let mut buf = Vec::new();
        write_trace(&mut buf, &evs).unwrap();
        assert_eq!(parse_trace(std::str::from_utf8(&buf).unwrap()).unwrap(), evs);
    }

    #[test]
    fn synthetic_trace_places_marker() {
        let reqs = [SyntheticRequest { req_id: "a".into(), start_step: 1, total_words: 12, toxic_at: Some(7) }];
        let evs = synthetic_trace(&reqs, 5, "[TOXIC]", 0);
        assert_eq!(evs.len(), 3);
        assert_eq!(evs[0].step, 1);
        assert_eq!(evs[1].toxic, Some(true));
        assert_eq!(evs[1].segment.split_whitespace().nth(1), Some("[TOXIC]"));
        assert_eq!(evs[2].engine_finish, Some(EngineFinish::Stop));
        assert_eq!(evs[2].segment.split_whitespace().count(), 2);
    }
}
