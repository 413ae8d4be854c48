//! Frame-exact compilation of a [`Score`] into per-frame decoding parameters.
//!
//! Placement rules:
//! - seconds convert to frames by round-half-up; segment boundaries are the
//!   rounded cumulative durations, so the frame total is the rounded sum;
//! - a transition of `N` frames is centered on its boundary, with `ceil(N/2)`
//!   frames before it and `floor(N/2)` after;
//! - frame `i` of a window (0-based) blends with weight `(i + 1) / (N + 1)`,
//!   so pure conditioning only ever occurs outside windows;
//! - temperature and top-k multipliers apply flat across the whole window.

use super::{Score, ValidationOptions};
use crate::distmath::BlendWeight;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EffectiveParams {
    /// Segment whose prompt is always queried.
    pub prompt_index_a: usize,
    /// Incoming segment, present only inside a window.
    pub prompt_index_b: Option<usize>,
    pub w: BlendWeight,
    pub temperature: f64,
    pub top_k: usize,
}

impl EffectiveParams {
    pub fn is_blending(&self) -> bool {
        self.prompt_index_b.is_some()
    }
}

/// A transition window in frame coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Window {
    /// Index of the outgoing segment; the incoming one is `outgoing + 1`.
    pub outgoing: usize,
    pub start: usize,
    pub len: usize,
    pub temperature: f64,
    pub top_k: usize,
}

impl Window {
    pub fn end(&self) -> usize {
        self.start + self.len
    }

    pub fn contains(&self, frame: usize) -> bool {
        (self.start..self.end()).contains(&frame)
    }

    pub fn weight(&self, frame: usize) -> BlendWeight {
        let i = frame - self.start;
        BlendWeight::new((i + 1) as f64 / (self.len + 1) as f64).expect("interior weight")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    total_frames: usize,
    frame_rate: f64,
    /// First frame of each segment.
    segment_starts: Vec<usize>,
    /// Non-empty windows in frame order.
    windows: Vec<Window>,
    entries: Vec<EffectiveParams>,
    base_temperature: f64,
    base_top_k: usize,
}

pub(crate) fn seconds_to_frames(seconds: f64, frame_rate: f64) -> usize {
    let x = seconds * frame_rate;
    // Absorb representation error so exact halves (e.g. 1.01 s at 50 fps) round up.
    (x + 0.5 + 1e-9 * x.abs().max(1.0)).floor() as usize
}

pub(crate) fn scaled_top_k(base: usize, multiplier: f64) -> usize {
    seconds_to_frames(base as f64, multiplier).max(1)
}

/// Compiles a validated score at the backend's frame rate.
pub fn compile_score(
    score: &Score,
    frame_rate: f64,
    options: &ValidationOptions,
) -> Result<Schedule> {
    if !(frame_rate.is_finite() && frame_rate > 0.0) {
        return Err(Error::Parameter(format!(
            "frame rate must be positive, got {frame_rate}"
        )));
    }
    score.check(options)?;

    let base_temperature = score.sampling.base_temperature;
    let base_top_k = score.sampling.base_top_k;

    let mut boundaries = Vec::with_capacity(score.segments.len() + 1);
    boundaries.push(0);
    let mut elapsed = 0.0;
    for seg in &score.segments {
        elapsed += seg.duration_seconds;
        boundaries.push(seconds_to_frames(elapsed, frame_rate));
    }
    let total_frames = *boundaries.last().expect("at least one segment");
    let segment_starts = boundaries[..score.segments.len()].to_vec();

    let mut windows: Vec<Window> = Vec::new();
    for (k, t) in score.transitions.iter().enumerate() {
        let len = seconds_to_frames(t.duration_seconds, frame_rate);
        if len == 0 {
            continue;
        }
        let boundary = boundaries[k + 1];
        let misfit = || {
            Error::Compile(format!(
                "transition {k} spans {len} frames and does not fit inside its two segments"
            ))
        };
        let start = boundary.checked_sub(len.div_ceil(2)).ok_or_else(misfit)?;
        let window = Window {
            outgoing: k,
            start,
            len,
            temperature: base_temperature * t.temperature_multiplier,
            top_k: scaled_top_k(base_top_k, t.top_k_multiplier),
        };
        if window.start < boundaries[k] || window.end() > boundaries[k + 2] {
            return Err(misfit());
        }
        if let Some(prev) = windows.last().copied() {
            if prev.end() > window.start {
                return Err(Error::Compile(format!(
                    "transition {} (frames {}..{}) overlaps transition {k} (frames {}..{})",
                    prev.outgoing,
                    prev.start,
                    prev.end(),
                    window.start,
                    window.end()
                )));
            }
        }
        windows.push(window);
    }

    let mut schedule = Schedule {
        total_frames,
        frame_rate,
        segment_starts,
        windows,
        entries: Vec::new(),
        base_temperature,
        base_top_k,
    };
    schedule.entries = (0..total_frames).map(|f| schedule.lookup(f)).collect();
    Ok(schedule)
}

impl Schedule {
    pub fn total_frames(&self) -> usize {
        self.total_frames
    }

    pub fn frame_rate(&self) -> f64 {
        self.frame_rate
    }

    pub fn windows(&self) -> &[Window] {
        &self.windows
    }

    pub fn segment_starts(&self) -> &[usize] {
        &self.segment_starts
    }

    pub fn entries(&self) -> &[EffectiveParams] {
        &self.entries
    }

    pub fn window_frames(&self) -> usize {
        self.windows.iter().map(|w| w.len).sum()
    }

    /// The window containing `frame`, if any.
    pub fn window_at(&self, frame: usize) -> Option<&Window> {
        let idx = self.windows.partition_point(|w| w.start <= frame);
        idx.checked_sub(1)
            .map(|i| &self.windows[i])
            .filter(|w| w.contains(frame))
    }

    /// Parameters for `frame`, found by binary search over windows and segments.
    pub fn params_at(&self, frame: usize) -> Result<EffectiveParams> {
        if frame >= self.total_frames {
            return Err(Error::Input(format!(
                "frame {frame} outside schedule of {} frames",
                self.total_frames
            )));
        }
        Ok(self.lookup(frame))
    }

    fn lookup(&self, frame: usize) -> EffectiveParams {
        if let Some(w) = self.window_at(frame) {
            return EffectiveParams {
                prompt_index_a: w.outgoing,
                prompt_index_b: Some(w.outgoing + 1),
                w: w.weight(frame),
                temperature: w.temperature,
                top_k: w.top_k,
            };
        }
        let segment = self.segment_starts.partition_point(|&s| s <= frame) - 1;
        EffectiveParams {
            prompt_index_a: segment,
            prompt_index_b: None,
            w: BlendWeight::ZERO,
            temperature: self.base_temperature,
            top_k: self.base_top_k,
        }
    }
}
