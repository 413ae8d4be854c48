//! Logit backends: the abstraction the engine decodes against, the
//! newline-delimited JSON wire protocol, and a client that speaks it to a
//! subprocess or TCP peer.

mod client;
pub mod protocol;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use client::{ClientOptions, ProtocolClient, Timeouts};
pub use protocol::{LogitEncoding, PROTOCOL_VERSION};

use crate::error::{Error, Result};
use crate::score::Prompt;

/// Capabilities a backend declares during the handshake.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendInfo {
    pub name: String,
    pub vocab_size: usize,
    pub channels: usize,
    pub frame_rate: f64,
    pub max_context_frames: usize,
    pub supports_decode: bool,
}

impl BackendInfo {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(Error::Input(format!("vocab_size {} < 2", self.vocab_size)));
        }
        if self.channels < 1 {
            return Err(Error::Input("channels must be at least 1".into()));
        }
        if !(self.frame_rate.is_finite() && self.frame_rate > 0.0) {
            return Err(Error::Input(format!("frame_rate {} not positive", self.frame_rate)));
        }
        if self.max_context_frames < 1 {
            return Err(Error::Input("max_context_frames must be at least 1".into()));
        }
        Ok(())
    }

    /// Checks a frame has one in-vocabulary token per channel.
    pub fn check_frame(&self, frame: &TokenFrame) -> Result<()> {
        if frame.len() != self.channels {
            return Err(Error::Input(format!(
                "frame has {} channels, backend expects {}",
                frame.len(),
                self.channels
            )));
        }
        if let Some(t) = frame.iter().find(|&&t| t as usize >= self.vocab_size) {
            return Err(Error::Input(format!(
                "token {t} outside vocabulary of {}",
                self.vocab_size
            )));
        }
        Ok(())
    }

    /// Checks a logits reply has `channels` vectors of `vocab_size` finite values.
    pub fn check_logits(&self, logits: &[Vec<f64>]) -> Result<()> {
        if logits.len() != self.channels {
            return Err(Error::protocol(
                crate::ErrorCode::BadRequest,
                format!(
                    "logits reply has {} channels, expected {}",
                    logits.len(),
                    self.channels
                ),
            ));
        }
        for (c, v) in logits.iter().enumerate() {
            if v.len() != self.vocab_size {
                return Err(Error::protocol(
                    crate::ErrorCode::BadRequest,
                    format!(
                        "logits for channel {c} have length {}, expected {}",
                        v.len(),
                        self.vocab_size
                    ),
                ));
            }
        }
        Ok(())
    }
}

/// One time step of generated tokens, one per codebook channel.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenFrame(pub Vec<u32>);

impl TokenFrame {
    pub fn new(tokens: Vec<u32>) -> Self {
        Self(tokens)
    }

    pub fn single(token: u32) -> Self {
        Self(vec![token])
    }
}

impl std::ops::Deref for TokenFrame {
    type Target = [u32];

    fn deref(&self) -> &[u32] {
        &self.0
    }
}

/// A live conditioning context on the backend.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContextHandle {
    pub id: u64,
    /// Frames fed so far.
    pub position: usize,
}

/// Per-channel logit vectors for the next frame of one context.
pub type FrameLogits = Vec<Vec<f64>>;

/// What a decode call wrote.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AudioInfo {
    pub path: PathBuf,
    pub sample_rate: u32,
    pub samples: u64,
    pub duration_seconds: f64,
}

/// A source of prompt-conditioned next-frame logits.
pub trait Backend {
    fn info(&self) -> &BackendInfo;

    fn new_context(&mut self, prompt: &Prompt) -> Result<ContextHandle>;

    /// Feeds frames to a context, advancing its position.
    fn append(&mut self, ctx: &mut ContextHandle, frames: &[TokenFrame]) -> Result<()>;

    /// Logits for the next frame; repeated calls without an append agree.
    fn logits(&mut self, ctx: &ContextHandle) -> Result<FrameLogits>;

    /// Logits for two contexts at once. Implementations may issue both
    /// requests before waiting on either.
    fn logits_pair(
        &mut self,
        a: &ContextHandle,
        b: &ContextHandle,
    ) -> Result<(FrameLogits, FrameLogits)> {
        Ok((self.logits(a)?, self.logits(b)?))
    }

    fn decode(&mut self, frames: &[TokenFrame], path: &Path) -> Result<AudioInfo>;

    fn free_context(&mut self, ctx: ContextHandle) -> Result<()>;
}

impl<B: Backend + ?Sized> Backend for &mut B {
    fn info(&self) -> &BackendInfo {
        (**self).info()
    }

    fn new_context(&mut self, prompt: &Prompt) -> Result<ContextHandle> {
        (**self).new_context(prompt)
    }

    fn append(&mut self, ctx: &mut ContextHandle, frames: &[TokenFrame]) -> Result<()> {
        (**self).append(ctx, frames)
    }

    fn logits(&mut self, ctx: &ContextHandle) -> Result<FrameLogits> {
        (**self).logits(ctx)
    }

    fn logits_pair(
        &mut self,
        a: &ContextHandle,
        b: &ContextHandle,
    ) -> Result<(FrameLogits, FrameLogits)> {
        (**self).logits_pair(a, b)
    }

    fn decode(&mut self, frames: &[TokenFrame], path: &Path) -> Result<AudioInfo> {
        (**self).decode(frames, path)
    }

    fn free_context(&mut self, ctx: ContextHandle) -> Result<()> {
        (**self).free_context(ctx)
    }
}

impl<B: Backend + ?Sized> Backend for Box<B> {
    fn info(&self) -> &BackendInfo {
        (**self).info()
    }

    fn new_context(&mut self, prompt: &Prompt) -> Result<ContextHandle> {
        (**self).new_context(prompt)
    }

    fn append(&mut self, ctx: &mut ContextHandle, frames: &[TokenFrame]) -> Result<()> {
        (**self).append(ctx, frames)
    }

    fn logits(&mut self, ctx: &ContextHandle) -> Result<FrameLogits> {
        (**self).logits(ctx)
    }

    fn logits_pair(
        &mut self,
        a: &ContextHandle,
        b: &ContextHandle,
    ) -> Result<(FrameLogits, FrameLogits)> {
        (**self).logits_pair(a, b)
    }

    fn decode(&mut self, frames: &[TokenFrame], path: &Path) -> Result<AudioInfo> {
        (**self).decode(frames, path)
    }

    fn free_context(&mut self, ctx: ContextHandle) -> Result<()> {
        (**self).free_context(ctx)
    }
}
