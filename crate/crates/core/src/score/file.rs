//! JSON score documents.
//!
//! ```json
//! {
//!   "segments": [
//!     {"prompt": "ambient pads", "duration_seconds": 20},
//!     {"prompt": "driving techno", "duration_seconds": 30, "guidance_scale": 3.0}
//!   ],
//!   "transitions": [{"duration_seconds": 4}],
//!   "sampling": {"temperature": 1.0, "top_k": 250, "mode": "sample", "seed": 7}
//! }
//! ```
//!
//! `transitions` and `sampling` may be omitted or partially filled; missing
//! values take their defaults. Duplicate keys are always rejected; unknown
//! keys are rejected in strict mode and reported in lenient mode.

use serde::{Deserialize, Serialize};

use super::{Prompt, SamplingConfig, SamplingMode, Score, Segment, TransitionSpec};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ParseMode {
    #[default]
    Strict,
    Lenient,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadedScore {
    pub score: Score,
    /// Keys skipped in lenient mode, as dotted paths.
    pub ignored_keys: Vec<String>,
}

#[derive(Deserialize, Serialize)]
struct RawScore {
    segments: Vec<RawSegment>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    transitions: Option<Vec<RawTransition>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    sampling: Option<RawSampling>,
}

#[derive(Deserialize, Serialize)]
struct RawSegment {
    prompt: String,
    duration_seconds: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    guidance_scale: Option<f64>,
}

#[derive(Deserialize, Serialize, Default)]
struct RawTransition {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    duration_seconds: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    temperature_multiplier: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    top_k_multiplier: Option<f64>,
}

#[derive(Deserialize, Serialize, Default)]
struct RawSampling {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    temperature: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    top_k: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    mode: Option<RawMode>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    beam_width: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
}

#[derive(Deserialize, Serialize, Clone, Copy)]
#[serde(rename_all = "lowercase")]
enum RawMode {
    Sample,
    Greedy,
    Beam,
}

/// Parses a score in strict mode.
pub fn load_score(bytes: &[u8]) -> Result<Score> {
    load_score_with(bytes, ParseMode::Strict).map(|l| l.score)
}

pub fn load_score_with(bytes: &[u8], mode: ParseMode) -> Result<LoadedScore> {
    let mut de = serde_json::Deserializer::from_slice(bytes);
    let mut ignored = Vec::new();
    let raw: RawScore = serde_ignored::deserialize(&mut de, |path| ignored.push(path.to_string()))
        .and_then(|raw| de.end().map(|()| raw))
        .map_err(|e| Error::Parse {
            location: format!("line {}, column {}", e.line(), e.column()),
            message: e.to_string(),
        })?;
    if mode == ParseMode::Strict {
        if let Some(first) = ignored.first() {
            return Err(Error::Parse {
                location: first.clone(),
                message: "unknown field".into(),
            });
        }
    }
    Ok(LoadedScore {
        score: from_raw(raw)?,
        ignored_keys: ignored,
    })
}

/// Serializes every field explicitly, so the output loads back to an equal score.
pub fn save_score(score: &Score) -> Vec<u8> {
    let raw = to_raw(score);
    let mut out = serde_json::to_vec_pretty(&raw).expect("score serializes");
    out.push(b'\n');
    out
}

fn invalid(location: String, message: impl Into<String>) -> Error {
    Error::Parse {
        location,
        message: message.into(),
    }
}

fn positive(value: f64, location: impl FnOnce() -> String) -> Result<f64> {
    if value.is_finite() && value > 0.0 {
        Ok(value)
    } else {
        Err(invalid(location(), format!("must be positive, got {value}")))
    }
}

fn from_raw(raw: RawScore) -> Result<Score> {
    let mut segments = Vec::with_capacity(raw.segments.len());
    for (i, s) in raw.segments.into_iter().enumerate() {
        let duration_seconds = positive(s.duration_seconds, || {
            format!("segments[{i}].duration_seconds")
        })?;
        let guidance_scale = s
            .guidance_scale
            .map(|g| positive(g, || format!("segments[{i}].guidance_scale")))
            .transpose()?;
        segments.push(Segment {
            prompt: Prompt {
                text: s.prompt,
                guidance_scale,
            },
            duration_seconds,
        });
    }

    let boundaries = segments.len().saturating_sub(1);
    let raw_transitions = match raw.transitions {
        Some(t) if t.len() != boundaries => {
            return Err(invalid(
                "transitions".into(),
                format!(
                    "expected {boundaries} entries for {} segments, found {}",
                    segments.len(),
                    t.len()
                ),
            ))
        }
        Some(t) => t,
        None => (0..boundaries).map(|_| RawTransition::default()).collect(),
    };
    let defaults = TransitionSpec::default();
    let mut transitions = Vec::with_capacity(boundaries);
    for (i, t) in raw_transitions.into_iter().enumerate() {
        let duration_seconds = t
            .duration_seconds
            .map(|d| positive(d, || format!("transitions[{i}].duration_seconds")))
            .transpose()?
            .unwrap_or(defaults.duration_seconds);
        let multiplier = |value: Option<f64>, name: &str, default: f64| -> Result<f64> {
            match value {
                None => Ok(default),
                Some(m) if m >= 1.0 => Ok(m),
                Some(m) => Err(invalid(
                    format!("transitions[{i}].{name}"),
                    format!("must be at least 1, got {m}"),
                )),
            }
        };
        transitions.push(TransitionSpec {
            duration_seconds,
            temperature_multiplier: multiplier(
                t.temperature_multiplier,
                "temperature_multiplier",
                defaults.temperature_multiplier,
            )?,
            top_k_multiplier: multiplier(
                t.top_k_multiplier,
                "top_k_multiplier",
                defaults.top_k_multiplier,
            )?,
        });
    }

    let raw_sampling = raw.sampling.unwrap_or_default();
    let defaults = SamplingConfig::default();
    let at_least_one = |v: Option<u64>, name: &str, default: usize| -> Result<usize> {
        match v {
            None => Ok(default),
            Some(0) => Err(invalid(format!("sampling.{name}"), "must be at least 1")),
            Some(n) => usize::try_from(n)
                .map_err(|_| invalid(format!("sampling.{name}"), "value too large")),
        }
    };
    let sampling = SamplingConfig {
        base_temperature: raw_sampling
            .temperature
            .map(|t| positive(t, || "sampling.temperature".into()))
            .transpose()?
            .unwrap_or(defaults.base_temperature),
        base_top_k: at_least_one(raw_sampling.top_k, "top_k", defaults.base_top_k)?,
        mode: match raw_sampling.mode {
            None => defaults.mode,
            Some(RawMode::Sample) => SamplingMode::Sample,
            Some(RawMode::Greedy) => SamplingMode::Greedy,
            Some(RawMode::Beam) => SamplingMode::Beam,
        },
        beam_width: at_least_one(raw_sampling.beam_width, "beam_width", defaults.beam_width)?,
        seed: raw_sampling.seed.unwrap_or(defaults.seed),
    };

    Ok(Score {
        segments,
        transitions,
        sampling,
    })
}

fn to_raw(score: &Score) -> RawScore {
    RawScore {
        segments: score
            .segments
            .iter()
            .map(|s| RawSegment {
                prompt: s.prompt.text.clone(),
                duration_seconds: s.duration_seconds,
                guidance_scale: s.prompt.guidance_scale,
            })
            .collect(),
        transitions: Some(
            score
                .transitions
                .iter()
                .map(|t| RawTransition {
                    duration_seconds: Some(t.duration_seconds),
                    temperature_multiplier: Some(t.temperature_multiplier),
                    top_k_multiplier: Some(t.top_k_multiplier),
                })
                .collect(),
        ),
        sampling: Some(RawSampling {
            temperature: Some(score.sampling.base_temperature),
            top_k: Some(score.sampling.base_top_k as u64),
            mode: Some(match score.sampling.mode {
                SamplingMode::Sample => RawMode::Sample,
                SamplingMode::Greedy => RawMode::Greedy,
                SamplingMode::Beam => RawMode::Beam,
            }),
            beam_width: Some(score.sampling.beam_width as u64),
            seed: Some(score.sampling.seed),
        }),
    }
}
