use std::mem;

use super::GenerationStats;
use crate::backend::{Backend, ContextHandle, FrameLogits, TokenFrame};
use crate::error::{Error, Result};
use crate::score::{EffectiveParams, Score};

/// A backend context fed `history[start..]` under one segment's prompt.
#[derive(Debug, Clone)]
pub(crate) struct Lane {
    pub prompt: usize,
    pub handle: ContextHandle,
    pub start: usize,
}

/// The outgoing context and, inside a window, the incoming one.
#[derive(Debug, Clone)]
pub(crate) struct Conditioning {
    pub a: Lane,
    pub b: Option<Lane>,
}

/// Opens a context for `prompt` and replays `history[start..]` into it.
fn open_lane<B: Backend>(
    prompt: usize,
    start: usize,
    score: &Score,
    history: &[TokenFrame],
    backend: &mut B,
    stats: &mut GenerationStats,
) -> Result<Lane> {
    let segment = score
        .segments
        .get(prompt)
        .ok_or_else(|| Error::Internal(format!("schedule names missing segment {prompt}")))?;
    let mut handle = backend.new_context(&segment.prompt)?;
    stats.contexts_opened += 1;
    let replay = &history[start..];
    if !replay.is_empty() {
        if let Err(e) = backend.append(&mut handle, replay) {
            let _ = backend.free_context(handle);
            return Err(e);
        }
        stats.appends += 1;
    }
    Ok(Lane {
        prompt,
        handle,
        start,
    })
}

fn primed_start(history: &[TokenFrame], horizon: usize) -> usize {
    history.len() - history.len().min(horizon)
}

impl Conditioning {
    /// Brings the live contexts in line with `params`: hands the incoming
    /// context over when a window closes, opens a primed incoming context
    /// when one opens, and releases anything no longer named.
    pub fn sync<B: Backend>(
        slot: &mut Option<Conditioning>,
        params: &EffectiveParams,
        score: &Score,
        history: &[TokenFrame],
        backend: &mut B,
        horizon: usize,
        stats: &mut GenerationStats,
    ) -> Result<()> {
        let start = primed_start(history, horizon);
        let cond = match slot {
            Some(c) => c,
            None => slot.insert(Conditioning {
                a: open_lane(params.prompt_index_a, start, score, history, backend, stats)?,
                b: None,
            }),
        };

        if cond.a.prompt != params.prompt_index_a {
            let incoming = match cond.b.take() {
                Some(b) if b.prompt == params.prompt_index_a => b,
                other => {
                    cond.b = other;
                    open_lane(params.prompt_index_a, start, score, history, backend, stats)?
                }
            };
            let outgoing = mem::replace(&mut cond.a, incoming);
            backend.free_context(outgoing.handle)?;
        }

        match params.prompt_index_b {
            Some(pb) if cond.b.as_ref().map(|b| b.prompt) != Some(pb) => {
                if let Some(stale) = cond.b.take() {
                    backend.free_context(stale.handle)?;
                }
                cond.b = Some(open_lane(pb, start, score, history, backend, stats)?);
            }
            None => {
                if let Some(stale) = cond.b.take() {
                    backend.free_context(stale.handle)?;
                }
            }
            _ => {}
        }
        Ok(())
    }

    pub fn handles(&self) -> Vec<ContextHandle> {
        let mut out = vec![self.a.handle.clone()];
        out.extend(self.b.as_ref().map(|b| b.handle.clone()));
        out
    }

    /// Queries the outgoing context, and the incoming one only when it
    /// carries weight.
    pub fn query<B: Backend>(
        &self,
        backend: &mut B,
        params: &EffectiveParams,
        stats: &mut GenerationStats,
    ) -> Result<(FrameLogits, Option<FrameLogits>)> {
        let (la, lb) = match &self.b {
            Some(b) if !params.w.is_zero() => {
                let (la, lb) = backend.logits_pair(&self.a.handle, &b.handle)?;
                stats.logits_queries += 2;
                (la, Some(lb))
            }
            _ => {
                stats.logits_queries += 1;
                (backend.logits(&self.a.handle)?, None)
            }
        };
        let info = backend.info();
        info.check_logits(&la)?;
        if let Some(lb) = &lb {
            info.check_logits(lb)?;
        }
        Ok((la, lb))
    }

    pub fn advance<B: Backend>(
        &mut self,
        backend: &mut B,
        frame: &TokenFrame,
        stats: &mut GenerationStats,
    ) -> Result<()> {
        let frames = std::slice::from_ref(frame);
        backend.append(&mut self.a.handle, frames)?;
        stats.appends += 1;
        if let Some(b) = &mut self.b {
            backend.append(&mut b.handle, frames)?;
            stats.appends += 1;
        }
        Ok(())
    }

    /// A copy of this conditioning on fresh contexts, each replaying the
    /// same slice of `history` its original was fed.
    pub fn fork<B: Backend>(
        &self,
        score: &Score,
        history: &[TokenFrame],
        backend: &mut B,
        stats: &mut GenerationStats,
    ) -> Result<Conditioning> {
        let a = open_lane(self.a.prompt, self.a.start, score, history, backend, stats)?;
        let b = match &self.b {
            Some(b) => match open_lane(b.prompt, b.start, score, history, backend, stats) {
                Ok(lane) => Some(lane),
                Err(e) => {
                    let _ = backend.free_context(a.handle);
                    return Err(e);
                }
            },
            None => None,
        };
        Ok(Conditioning { a, b })
    }

    pub fn release<B: Backend>(self, backend: &mut B) -> Result<()> {
        let first = backend.free_context(self.a.handle);
        if let Some(b) = self.b {
            backend.free_context(b.handle)?;
        }
        first
    }
}
