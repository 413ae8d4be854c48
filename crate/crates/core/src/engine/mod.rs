//! The decoding loop.
//!
//! Each frame: look up the scheduled parameters, make sure the live
//! contexts match the prompts they name, query logits, then per channel
//! `softmax(T) -> blend(w) -> top_k(K) -> sample`. The chosen frame is fed
//! back to every live context.
//!
//! Outside transition windows only one context exists. The incoming
//! context is opened at the first frame of its window, primed with the most
//! recent `priming_horizon` frames of history, and replaces the outgoing
//! context when the window closes.

mod beam;
mod conditioning;
pub mod output;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

pub use beam::beam_generate;

use self::conditioning::Conditioning;
use crate::backend::{Backend, FrameLogits, TokenFrame};
use crate::distmath::{self, argmax, Distribution};
use crate::error::{Error, Result};
use crate::par::{self, Parallelism};
use crate::score::{compile_score, EffectiveParams, SamplingMode, Schedule, Score, ValidationOptions};

pub const DEFAULT_PRIMING_HORIZON: usize = 500;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GenerateOptions {
    /// Most frames of history replayed into a newly opened context.
    pub priming_horizon: usize,
    pub validation: ValidationOptions,
    pub parallelism: Parallelism,
}

impl Default for GenerateOptions {
    fn default() -> Self {
        Self {
            priming_horizon: DEFAULT_PRIMING_HORIZON,
            validation: ValidationOptions::default(),
            parallelism: Parallelism::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Progress {
    pub frame: usize,
    pub total_frames: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WindowStats {
    /// Outgoing segment index.
    pub transition: usize,
    pub start: usize,
    pub len: usize,
    /// Mean entropy (nats) of the distributions tokens were drawn from.
    pub mean_entropy: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct GenerationStats {
    pub logits_queries: usize,
    pub appends: usize,
    pub contexts_opened: usize,
    pub windows: Vec<WindowStats>,
    /// Beam mode only: candidate tokens per channel considered at each frame.
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub expansion_width: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationResult {
    pub frames: Vec<TokenFrame>,
    pub per_frame_params: Vec<EffectiveParams>,
    pub stats: GenerationStats,
    /// Set when generation stopped early on a backend failure.
    pub truncated: bool,
}

/// Per-channel blended distributions, before top-k filtering.
pub(crate) fn blended_channels(
    logits_a: &FrameLogits,
    logits_b: Option<&FrameLogits>,
    params: &EffectiveParams,
    parallelism: Parallelism,
) -> Result<Vec<Distribution>> {
    if let Some(lb) = logits_b {
        if lb.len() != logits_a.len() {
            return Err(Error::Input("contexts disagree on channel count".into()));
        }
    }
    par::map_range(parallelism, logits_a.len(), |c| {
        let pa = distmath::softmax(&logits_a[c], params.temperature)?;
        match logits_b {
            Some(lb) if !params.w.is_zero() => {
                let pb = distmath::softmax(&lb[c], params.temperature)?;
                distmath::blend(&pa, &pb, params.w)
            }
            _ => Ok(pa),
        }
    })
    .into_iter()
    .collect()
}

/// Accumulates per-window entropy means.
#[derive(Debug, Default)]
struct EntropyTracker {
    sums: Vec<(f64, usize)>,
}

impl EntropyTracker {
    fn new(schedule: &Schedule) -> Self {
        Self {
            sums: vec![(0.0, 0); schedule.windows().len()],
        }
    }

    fn record(&mut self, schedule: &Schedule, frame: usize, entropy: f64) {
        if let Some(w) = schedule.window_at(frame) {
            let idx = schedule.windows().partition_point(|x| x.start < w.start);
            self.sums[idx].0 += entropy;
            self.sums[idx].1 += 1;
        }
    }

    fn finish(&self, schedule: &Schedule) -> Vec<WindowStats> {
        schedule
            .windows()
            .iter()
            .zip(&self.sums)
            .map(|(w, (sum, n))| WindowStats {
                transition: w.outgoing,
                start: w.start,
                len: w.len,
                mean_entropy: if *n == 0 { 0.0 } else { sum / *n as f64 },
            })
            .collect()
    }
}

/// Step-at-a-time decoder for sampling and greedy modes.
pub struct Decoder<'s, B: Backend> {
    score: &'s Score,
    schedule: Schedule,
    backend: B,
    options: GenerateOptions,
    history: Vec<TokenFrame>,
    params_log: Vec<EffectiveParams>,
    conditioning: Option<Conditioning>,
    rng: ChaCha8Rng,
    stats: GenerationStats,
    entropy: EntropyTracker,
    last_distributions: Vec<Distribution>,
}

impl<'s, B: Backend> Decoder<'s, B> {
    pub fn new(score: &'s Score, backend: B, options: GenerateOptions) -> Result<Self> {
        if score.sampling.mode == SamplingMode::Beam {
            return Err(Error::Parameter(
                "beam mode decodes whole sequences; use beam_generate".into(),
            ));
        }
        backend.info().validate()?;
        let schedule = compile_score(score, backend.info().frame_rate, &options.validation)?;
        let entropy = EntropyTracker::new(&schedule);
        Ok(Self {
            score,
            rng: ChaCha8Rng::seed_from_u64(score.sampling.seed),
            schedule,
            backend,
            options,
            history: Vec::new(),
            params_log: Vec::new(),
            conditioning: None,
            stats: GenerationStats::default(),
            entropy,
            last_distributions: Vec::new(),
        })
    }

    pub fn schedule(&self) -> &Schedule {
        &self.schedule
    }

    pub fn frame_index(&self) -> usize {
        self.history.len()
    }

    pub fn is_done(&self) -> bool {
        self.history.len() >= self.schedule.total_frames()
    }

    pub fn history(&self) -> &[TokenFrame] {
        &self.history
    }

    pub fn backend(&self) -> &B {
        &self.backend
    }

    pub fn backend_mut(&mut self) -> &mut B {
        &mut self.backend
    }

    pub fn stats(&self) -> &GenerationStats {
        &self.stats
    }

    /// The per-channel distributions the latest frame was drawn from.
    pub fn last_distributions(&self) -> &[Distribution] {
        &self.last_distributions
    }

    /// Context ids currently live: the outgoing one, then the incoming one.
    pub fn live_contexts(&self) -> Vec<crate::backend::ContextHandle> {
        self.conditioning
            .as_ref()
            .map(Conditioning::handles)
            .unwrap_or_default()
    }

    fn current_params(&self) -> Result<EffectiveParams> {
        self.schedule.params_at(self.history.len())
    }

    /// The per-channel distributions the next frame will be drawn from.
    ///
    /// Opens or hands off contexts as the schedule requires and issues the
    /// logits queries for this frame.
    pub fn next_distributions(&mut self) -> Result<Vec<Distribution>> {
        let params = self.current_params()?;
        Conditioning::sync(
            &mut self.conditioning,
            &params,
            self.score,
            &self.history,
            &mut self.backend,
            self.options.priming_horizon,
            &mut self.stats,
        )?;
        let cond = self
            .conditioning
            .as_ref()
            .ok_or_else(|| Error::Internal("sync left no live context".into()))?;
        let (la, lb) = cond.query(&mut self.backend, &params, &mut self.stats)?;
        blended_channels(&la, lb.as_ref(), &params, self.options.parallelism)?
            .iter()
            .map(|d| distmath::top_k_filter(d, params.top_k))
            .collect()
    }

    /// Decodes one frame and feeds it to every live context.
    pub fn step(&mut self) -> Result<TokenFrame> {
        let params = self.current_params()?;
        let dists = self.next_distributions()?;
        let tokens = match self.score.sampling.mode {
            SamplingMode::Greedy => dists.iter().map(|d| argmax(d) as u32).collect(),
            _ => dists
                .iter()
                .map(|d| distmath::sample(d, &mut self.rng).map(|t| t as u32))
                .collect::<Result<Vec<_>>>()?,
        };
        let frame = TokenFrame(tokens);
        let cond = self
            .conditioning
            .as_mut()
            .ok_or_else(|| Error::Internal("no live context after query".into()))?;
        cond.advance(&mut self.backend, &frame, &mut self.stats)?;

        let entropy = dists.iter().map(Distribution::entropy).sum::<f64>() / dists.len() as f64;
        let index = self.history.len();
        self.entropy.record(&self.schedule, index, entropy);
        self.history.push(frame.clone());
        self.params_log.push(params);
        self.last_distributions = dists;
        Ok(frame)
    }

    fn snapshot(&self, truncated: bool) -> GenerationResult {
        let mut stats = self.stats.clone();
        stats.windows = self.entropy.finish(&self.schedule);
        GenerationResult {
            frames: self.history.clone(),
            per_frame_params: self.params_log.clone(),
            stats,
            truncated,
        }
    }

    /// Releases backend contexts and returns what was generated.
    pub fn finish(mut self) -> Result<GenerationResult> {
        let truncated = !self.is_done();
        if let Some(cond) = self.conditioning.take() {
            cond.release(&mut self.backend)?;
        }
        Ok(self.snapshot(truncated))
    }

    /// Runs to the end of the schedule. A backend failure yields
    /// [`Error::Aborted`] carrying the frames produced so far.
    pub fn run(mut self, mut progress: Option<&mut dyn FnMut(Progress)>) -> Result<GenerationResult> {
        let total_frames = self.schedule.total_frames();
        while !self.is_done() {
            if let Err(source) = self.step() {
                let partial = self.snapshot(true);
                if let Some(cond) = self.conditioning.take() {
                    let _ = cond.release(&mut self.backend);
                }
                return Err(Error::Aborted {
                    partial: Box::new(partial),
                    source: Box::new(source),
                });
            }
            if let Some(sink) = progress.as_deref_mut() {
                sink(Progress {
                    frame: self.history.len(),
                    total_frames,
                });
            }
        }
        self.finish()
    }
}

/// Generates the whole score, dispatching on its sampling mode.
pub fn generate<B: Backend>(
    score: &Score,
    backend: B,
    options: &GenerateOptions,
    progress: Option<&mut dyn FnMut(Progress)>,
) -> Result<GenerationResult> {
    match score.sampling.mode {
        SamplingMode::Beam => beam_generate(score, backend, options, progress),
        _ => Decoder::new(score, backend, *options)?.run(progress),
    }
}

/// Generates one independent stream per seed, each against its own backend.
///
/// Streams run concurrently under [`Parallelism::Rayon`]; results are in
/// seed order either way.
pub fn generate_batch<B, F>(
    score: &Score,
    seeds: &[u64],
    make_backend: F,
    options: &GenerateOptions,
) -> Vec<Result<GenerationResult>>
where
    B: Backend,
    F: Fn() -> Result<B> + Sync + Send,
{
    par::map_slice(options.parallelism, seeds, |&seed| {
        let mut s = score.clone();
        s.sampling.seed = seed;
        let backend = make_backend()?;
        generate(&s, backend, options, None)
    })
}

#[cfg(test)]
mod tests;
