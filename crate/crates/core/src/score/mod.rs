//! Composition-level input: prompts with durations, the transitions between
//! them, and the sampling settings for the whole piece.

mod file;
mod schedule;

use std::fmt;

pub use file::{load_score, load_score_with, save_score, LoadedScore, ParseMode};
pub use schedule::{compile_score, EffectiveParams, Schedule, Window};

/// Transitions longer than this produce audible artifacts.
pub const MAX_TRANSITION_SECONDS: f64 = 5.0;
/// Segments shorter than this are allowed but flagged.
pub const SHORT_SEGMENT_SECONDS: f64 = 2.0;

pub const DEFAULT_TRANSITION_SECONDS: f64 = 4.0;
pub const DEFAULT_TEMPERATURE_MULTIPLIER: f64 = 1.5;
pub const DEFAULT_TOP_K_MULTIPLIER: f64 = 2.0;
pub const DEFAULT_TEMPERATURE: f64 = 1.0;
pub const DEFAULT_TOP_K: usize = 250;
pub const DEFAULT_BEAM_WIDTH: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct Prompt {
    pub text: String,
    /// Classifier-free guidance scale, forwarded untouched to the backend.
    pub guidance_scale: Option<f64>,
}

impl Prompt {
    pub fn new(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            guidance_scale: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub prompt: Prompt,
    pub duration_seconds: f64,
}

impl Segment {
    pub fn new(text: impl Into<String>, duration_seconds: f64) -> Self {
        Self {
            prompt: Prompt::new(text),
            duration_seconds,
        }
    }
}

/// How one segment hands off to the next.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransitionSpec {
    pub duration_seconds: f64,
    pub temperature_multiplier: f64,
    pub top_k_multiplier: f64,
}

impl Default for TransitionSpec {
    fn default() -> Self {
        Self {
            duration_seconds: DEFAULT_TRANSITION_SECONDS,
            temperature_multiplier: DEFAULT_TEMPERATURE_MULTIPLIER,
            top_k_multiplier: DEFAULT_TOP_K_MULTIPLIER,
        }
    }
}

impl TransitionSpec {
    pub fn with_duration(duration_seconds: f64) -> Self {
        Self {
            duration_seconds,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SamplingMode {
    #[default]
    Sample,
    Greedy,
    Beam,
}

impl SamplingMode {
    pub fn as_str(self) -> &'static str {
        match self {
            SamplingMode::Sample => "sample",
            SamplingMode::Greedy => "greedy",
            SamplingMode::Beam => "beam",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplingConfig {
    pub base_temperature: f64,
    pub base_top_k: usize,
    pub mode: SamplingMode,
    /// Only consulted in beam mode.
    pub beam_width: usize,
    pub seed: u64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            base_temperature: DEFAULT_TEMPERATURE,
            base_top_k: DEFAULT_TOP_K,
            mode: SamplingMode::Sample,
            beam_width: DEFAULT_BEAM_WIDTH,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Score {
    pub segments: Vec<Segment>,
    /// One entry per segment boundary (`segments.len() - 1`).
    pub transitions: Vec<TransitionSpec>,
    pub sampling: SamplingConfig,
}

impl Score {
    /// Builds a score with default transitions at every boundary.
    pub fn from_segments(segments: Vec<Segment>) -> Self {
        let transitions = vec![TransitionSpec::default(); segments.len().saturating_sub(1)];
        Self {
            segments,
            transitions,
            sampling: SamplingConfig::default(),
        }
    }

    pub fn total_seconds(&self) -> f64 {
        self.segments.iter().map(|s| s.duration_seconds).sum()
    }

    /// Validates and returns the warnings, or fails with every error.
    pub fn check(&self, options: &ValidationOptions) -> crate::Result<Vec<Diagnostic>> {
        let diagnostics = validate_score(self, options);
        let errors: Vec<String> = diagnostics
            .iter()
            .filter(|d| d.severity == Severity::Error)
            .map(ToString::to_string)
            .collect();
        if errors.is_empty() {
            Ok(diagnostics)
        } else {
            Err(crate::Error::Validation(errors))
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ValidationOptions {
    /// Downgrades transitions over the 5-second limit from errors to warnings.
    pub allow_long_transitions: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Severity {
    Warning,
    Error,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Diagnostic {
    pub severity: Severity,
    /// Field path, e.g. `transitions[0].duration_seconds`.
    pub location: String,
    pub message: String,
}

impl Diagnostic {
    fn error(location: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            severity: Severity::Error,
            location: location.into(),
            message: message.into(),
        }
    }

    fn warning(location: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            severity: Severity::Warning,
            location: location.into(),
            message: message.into(),
        }
    }

    pub fn is_error(&self) -> bool {
        self.severity == Severity::Error
    }
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let level = match self.severity {
            Severity::Warning => "warning",
            Severity::Error => "error",
        };
        write!(f, "{level}: {}: {}", self.location, self.message)
    }
}

pub fn validate_score(score: &Score, options: &ValidationOptions) -> Vec<Diagnostic> {
    let mut out = Vec::new();
    if score.segments.is_empty() {
        out.push(Diagnostic::error("segments", "score has no segments"));
        return out;
    }
    for (i, seg) in score.segments.iter().enumerate() {
        if seg.prompt.text.trim().is_empty() {
            out.push(Diagnostic::error(
                format!("segments[{i}].prompt"),
                "prompt text is empty",
            ));
        }
        if seg.duration_seconds < SHORT_SEGMENT_SECONDS {
            out.push(Diagnostic::warning(
                format!("segments[{i}].duration_seconds"),
                format!(
                    "segment is {} s long; segments under {SHORT_SEGMENT_SECONDS} s rarely settle",
                    seg.duration_seconds
                ),
            ));
        }
    }
    if score.transitions.len() + 1 != score.segments.len() {
        out.push(Diagnostic::error(
            "transitions",
            format!(
                "expected {} transitions for {} segments, found {}",
                score.segments.len() - 1,
                score.segments.len(),
                score.transitions.len()
            ),
        ));
        return out;
    }
    for (i, t) in score.transitions.iter().enumerate() {
        let loc = format!("transitions[{i}].duration_seconds");
        if t.duration_seconds > MAX_TRANSITION_SECONDS {
            let msg = format!(
                "transition of {} s exceeds the {MAX_TRANSITION_SECONDS}-second limit; blend over an interval of 5 seconds or less",
                t.duration_seconds
            );
            if options.allow_long_transitions {
                out.push(Diagnostic::warning(
                    &loc,
                    format!("{msg} (allowed by override; expect artifacts)"),
                ));
            } else {
                out.push(Diagnostic::error(&loc, msg));
            }
        }
        let before = score.segments[i].duration_seconds;
        let after = score.segments[i + 1].duration_seconds;
        if t.duration_seconds >= before.min(after) {
            out.push(Diagnostic::error(
                &loc,
                format!(
                    "transition of {} s does not fit between segments of {before} s and {after} s",
                    t.duration_seconds
                ),
            ));
        }
    }
    out
}
