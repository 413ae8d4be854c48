//! Beam search over blended distributions.
//!
//! Every beam owns its own contexts. A step expands each beam over the
//! top-`K` tokens of each channel's blended distribution (so `K` doubles
//! inside windows, following the schedule), scores frames by the summed
//! log-probability of the blended distributions, and keeps the best `B`
//! frames overall. Ties prefer the lexicographically smaller frame, then
//! the beam ranked higher in the previous step.
//!
//! Scores use the blended distribution before top-k renormalization; top-k
//! only restricts which tokens are expanded.

use std::cmp::Ordering;

use super::conditioning::Conditioning;
use super::{blended_channels, GenerateOptions, GenerationResult, GenerationStats, Progress};
use crate::backend::{Backend, FrameLogits, TokenFrame};
use crate::distmath::{ranked_indices, Distribution};
use crate::error::{Error, Result};
use crate::par;
use crate::score::{compile_score, EffectiveParams, SamplingMode, Score};

struct Beam {
    history: Vec<TokenFrame>,
    log_prob: f64,
    conditioning: Option<Conditioning>,
    entropies: Vec<f64>,
}

#[derive(Debug, Clone)]
struct Candidate {
    beam: usize,
    log_prob: f64,
    tokens: Vec<u32>,
}

fn by_rank(x: &Candidate, y: &Candidate) -> Ordering {
    y.log_prob
        .total_cmp(&x.log_prob)
        .then_with(|| x.tokens.cmp(&y.tokens))
        .then_with(|| x.beam.cmp(&y.beam))
}

/// The `width` best joint frames for one beam, by summed channel log-prob.
///
/// Channels are merged one at a time keeping `width` partial frames; any
/// frame in the overall best `width` has its prefix among the best `width`
/// prefixes, so nothing is lost.
fn best_frames(channels: &[Distribution], top_k: usize, width: usize) -> (Vec<(f64, Vec<u32>)>, usize) {
    let mut partial: Vec<(f64, Vec<u32>)> = vec![(0.0, Vec::new())];
    let mut expansion = 0;
    for d in channels {
        let tokens: Vec<usize> = ranked_indices(d)
            .into_iter()
            .take(top_k)
            .filter(|&t| d[t] > 0.0)
            .collect();
        expansion = expansion.max(tokens.len());
        let mut next = Vec::with_capacity(partial.len() * tokens.len());
        for (lp, prefix) in &partial {
            for &t in &tokens {
                let mut frame = prefix.clone();
                frame.push(t as u32);
                next.push((lp + d[t].ln(), frame));
            }
        }
        next.sort_by(|x, y| y.0.total_cmp(&x.0).then_with(|| x.1.cmp(&y.1)));
        next.truncate(width);
        partial = next;
    }
    (partial, expansion)
}

fn release_all<B: Backend>(beams: &mut [Beam], backend: &mut B) {
    for beam in beams {
        if let Some(c) = beam.conditioning.take() {
            let _ = c.release(backend);
        }
    }
}

/// Runs beam search over the whole score and returns the best beam.
pub fn beam_generate<B: Backend>(
    score: &Score,
    mut backend: B,
    options: &GenerateOptions,
    mut progress: Option<&mut dyn FnMut(Progress)>,
) -> Result<GenerationResult> {
    if score.sampling.mode != SamplingMode::Beam {
        return Err(Error::Parameter("beam_generate needs sampling mode beam".into()));
    }
    let width = score.sampling.beam_width;
    if width == 0 {
        return Err(Error::Parameter("beam width must be at least 1".into()));
    }
    backend.info().validate()?;
    let schedule = compile_score(score, backend.info().frame_rate, &options.validation)?;
    let total_frames = schedule.total_frames();
    let mut stats = GenerationStats::default();
    let mut beams = vec![Beam {
        history: Vec::new(),
        log_prob: 0.0,
        conditioning: None,
        entropies: Vec::new(),
    }];

    for frame in 0..total_frames {
        let params = schedule.entries()[frame];
        match beam_step(score, &params, &mut beams, &mut backend, options, width, &mut stats) {
            Ok(expansion) => stats.expansion_width.push(expansion),
            Err(source) => {
                let partial = best_partial(&beams, &schedule, &stats);
                release_all(&mut beams, &mut backend);
                return Err(Error::Aborted {
                    partial: Box::new(partial),
                    source: Box::new(source),
                });
            }
        }
        if let Some(sink) = progress.as_deref_mut() {
            sink(Progress {
                frame: frame + 1,
                total_frames,
            });
        }
    }

    let result = best_partial(&beams, &schedule, &stats);
    let mut first_err = None;
    for beam in &mut beams {
        if let Some(c) = beam.conditioning.take() {
            if let Err(e) = c.release(&mut backend) {
                first_err.get_or_insert(e);
            }
        }
    }
    match first_err {
        Some(e) => Err(e),
        None => Ok(GenerationResult {
            truncated: false,
            ..result
        }),
    }
}

fn best_partial(beams: &[Beam], schedule: &crate::score::Schedule, stats: &GenerationStats) -> GenerationResult {
    let best = &beams[0];
    let n = best.history.len();
    let mut stats = stats.clone();
    stats.windows = schedule
        .windows()
        .iter()
        .map(|w| {
            let frames: Vec<f64> = (w.start..w.end().min(n)).map(|f| best.entropies[f]).collect();
            super::WindowStats {
                transition: w.outgoing,
                start: w.start,
                len: w.len,
                mean_entropy: if frames.is_empty() {
                    0.0
                } else {
                    frames.iter().sum::<f64>() / frames.len() as f64
                },
            }
        })
        .collect();
    GenerationResult {
        frames: best.history.clone(),
        per_frame_params: schedule.entries()[..n].to_vec(),
        stats,
        truncated: n < schedule.total_frames(),
    }
}

/// Advances every beam by one frame. Returns the per-channel expansion width.
fn beam_step<B: Backend>(
    score: &Score,
    params: &EffectiveParams,
    beams: &mut Vec<Beam>,
    backend: &mut B,
    options: &GenerateOptions,
    width: usize,
    stats: &mut GenerationStats,
) -> Result<usize> {
    let mut logits: Vec<(FrameLogits, Option<FrameLogits>)> = Vec::with_capacity(beams.len());
    for beam in beams.iter_mut() {
        Conditioning::sync(
            &mut beam.conditioning,
            params,
            score,
            &beam.history,
            backend,
            options.priming_horizon,
            stats,
        )?;
        let cond = beam.conditioning.as_ref().expect("synced");
        logits.push(cond.query(backend, params, stats)?);
    }

    // Distribution math and per-beam candidate search are independent per beam.
    let expanded = par::map_slice(options.parallelism, &logits, |(la, lb)| {
        let channels = blended_channels(la, lb.as_ref(), params, par::Parallelism::Sequential)?;
        let entropy =
            channels.iter().map(Distribution::entropy).sum::<f64>() / channels.len() as f64;
        let (frames, expansion) = best_frames(&channels, params.top_k, width);
        Ok::<_, Error>((frames, expansion, entropy))
    });

    let mut candidates = Vec::new();
    let mut expansion = 0;
    let mut entropies = Vec::with_capacity(beams.len());
    for (i, item) in expanded.into_iter().enumerate() {
        let (frames, e, entropy) = item?;
        expansion = expansion.max(e);
        entropies.push(entropy);
        candidates.extend(frames.into_iter().map(|(lp, tokens)| Candidate {
            beam: i,
            log_prob: beams[i].log_prob + lp,
            tokens,
        }));
    }
    candidates.sort_by(by_rank);
    candidates.truncate(width);
    if candidates.is_empty() {
        return Err(Error::Internal("beam search found no candidates".into()));
    }

    let mut children = vec![0usize; beams.len()];
    for c in &candidates {
        children[c.beam] += 1;
    }
    for (beam, &n) in beams.iter_mut().zip(&children) {
        if n == 0 {
            if let Some(c) = beam.conditioning.take() {
                c.release(backend)?;
            }
        }
    }

    let mut next = Vec::with_capacity(candidates.len());
    for c in candidates {
        let parent = &mut beams[c.beam];
        let frame = TokenFrame(c.tokens);
        children[c.beam] -= 1;
        // The last child inherits the parent's contexts; earlier ones fork.
        let mut conditioning = if children[c.beam] == 0 {
            parent.conditioning.take().expect("parent contexts")
        } else {
            parent
                .conditioning
                .as_ref()
                .expect("parent contexts")
                .fork(score, &parent.history, backend, stats)?
        };
        conditioning.advance(backend, &frame, stats)?;
        let mut history = parent.history.clone();
        history.push(frame);
        let mut beam_entropies = parent.entropies.clone();
        beam_entropies.push(entropies[c.beam]);
        next.push(Beam {
            history,
            log_prob: c.log_prob,
            conditioning: Some(conditioning),
            entropies: beam_entropies,
        });
    }
    *beams = next;
    Ok(expansion)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dist(v: &[f64]) -> Distribution {
        Distribution::new(v.to_vec()).unwrap()
    }

    #[test]
    fn joint_frames_match_enumeration() {
        let chans = [dist(&[0.5, 0.3, 0.2]), dist(&[0.1, 0.6, 0.3]), dist(&[0.25, 0.25, 0.5])];
        let (best, expansion) = best_frames(&chans, 3, 27);
        assert_eq!(expansion, 3);
        let mut all = Vec::new();
        for a in 0..3u32 {
            for b in 0..3u32 {
                for c in 0..3u32 {
                    let lp = chans[0][a as usize].ln() + chans[1][b as usize].ln() + chans[2][c as usize].ln();
                    all.push((lp, vec![a, b, c]));
                }
            }
        }
        all.sort_by(|x, y| y.0.total_cmp(&x.0).then_with(|| x.1.cmp(&y.1)));
        for width in [1, 4, 9, 27] {
            let (top, _) = best_frames(&chans, 3, width);
            assert_eq!(top.len(), width);
            for (got, want) in top.iter().zip(&all) {
                assert_eq!(got.1, want.1);
            }
        }
        assert_eq!(best.len(), 27);
    }

    #[test]
    fn expansion_limited_by_top_k() {
        let chans = [dist(&[0.4, 0.3, 0.2, 0.1])];
        let (frames, expansion) = best_frames(&chans, 2, 10);
        assert_eq!(expansion, 2);
        assert_eq!(frames.iter().map(|f| f.1[0]).collect::<Vec<_>>(), vec![0, 1]);
    }
}
