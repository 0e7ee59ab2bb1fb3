//! Run traces as newline-delimited JSON records.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image_io::write_atomic;
use crate::losses::LossBreakdown;

/// One refinement iteration of the guidance loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub step: usize,
    pub timestep: usize,
    pub iteration: usize,
    pub alpha: f64,
    pub losses: LossBreakdown,
    /// `NaN` (written as `null`) when the iteration was skipped.
    #[serde(with = "nullable_f64")]
    pub grad_norm: f64,
    pub skipped: bool,
}

/// One sampler step, written after its update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub timestep: usize,
    pub prev_timestep: usize,
    pub guided: bool,
    pub latent_rms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TraceEvent {
    Iteration(IterationRecord),
    Step(StepRecord),
}

mod nullable_f64 {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
    }
}

pub fn to_ndjson(events: &[TraceEvent]) -> Result<String> {
    let mut out = String::new();
    for e in events {
        out.push_str(&serde_json::to_string(e)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn write_trace(path: &Path, events: &[TraceEvent]) -> Result<()> {
    write_atomic(path, to_ndjson(events)?.as_bytes())
}

pub fn parse_ndjson(text: &str) -> Result<Vec<TraceEvent>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Invalid(format!("trace line {}: {e}", i + 1)))
        })
        .collect()
}

pub fn read_trace(path: &Path) -> Result<Vec<TraceEvent>> {
    parse_ndjson(&fs::read_to_string(path)?)
}

/// Per-step counts used by the `trace` command summary.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct TraceSummary {
    pub steps: usize,
    pub guided_steps: usize,
    pub iterations: usize,
    pub skipped: usize,
    pub steps_with_mask: usize,
    pub steps_with_kl: usize,
    pub steps_with_att: usize,
    pub steps_with_iou: usize,
}

pub fn summarize(events: &[TraceEvent]) -> TraceSummary {
    let mut s = TraceSummary::default();
    let mut last_step = None;
    for e in events {
        match e {
            TraceEvent::Step(r) => {
                s.steps += 1;
                s.guided_steps += r.guided as usize;
            }
            TraceEvent::Iteration(r) => {
                s.iterations += 1;
                s.skipped += r.skipped as usize;
                if last_step != Some(r.step) {
                    last_step = Some(r.step);
                    let a = r.losses.active;
                    s.steps_with_mask += a.mask as usize;
                    s.steps_with_kl += a.kl as usize;
                    s.steps_with_att += a.att as usize;
                    s.steps_with_iou += a.iou as usize;
                }
            }
        }
    }
    s
}
