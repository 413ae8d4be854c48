//! A deterministic closed-form logit backend.
//!
//! For a context conditioned on `prompt` with history `h` (per channel),
//! the logit of token `t` is
//!
//! ```text
//! logit[t] = (2.0 if t in bias(prompt) else -1.0) + 0.5 * bigram(last(h), t)
//! ```
//!
//! - `bias(prompt)` is the `bias_size` tokens `t` with the smallest 64-bit
//!   FNV-1a hash of the string `"{t}:{prompt}"` (ties to the lower token).
//!   "alpha" and "beta" map to disjoint sets at the default sizes.
//! - `bigram` is a `(V + 1) x V` table of standard normal values drawn by
//!   ChaCha8 from [`BIGRAM_SEED`]; row `V` is the start row used when the
//!   history is empty.
//!
//! Decoding maps token `t` to a sine tone at `110 * 2^(t / 12)` Hz, one
//! frame per `1 / frame_rate` seconds.

mod render;
mod server;

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution as _, StandardNormal};

pub use render::{render_wav, token_frequency, MOCK_SAMPLE_RATE};
pub use server::{handle_line, serve};

use crate::backend::{AudioInfo, Backend, BackendInfo, ContextHandle, FrameLogits, TokenFrame};
use crate::error::{Error, Result};
use crate::score::Prompt;

/// Seed of the bigram table. Chosen so the "alpha" distribution at an empty
/// history puts at least 0.85 of its mass on its bias set (T = 1, V = 64).
pub const BIGRAM_SEED: u64 = 5229;

pub const BIAS_LOGIT: f64 = 2.0;
pub const BASE_LOGIT: f64 = -1.0;
pub const BIGRAM_SCALE: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct MockConfig {
    pub vocab_size: usize,
    pub channels: usize,
    pub frame_rate: f64,
    pub bias_size: usize,
    pub max_context_frames: usize,
    /// Live contexts allowed at once.
    pub max_contexts: usize,
    pub supports_decode: bool,
}

impl Default for MockConfig {
    fn default() -> Self {
        Self {
            vocab_size: 64,
            channels: 1,
            frame_rate: 50.0,
            bias_size: 8,
            max_context_frames: 4096,
            max_contexts: 1024,
            supports_decode: true,
        }
    }
}

impl MockConfig {
    pub fn info(&self) -> BackendInfo {
        BackendInfo {
            name: "mock".into(),
            vocab_size: self.vocab_size,
            channels: self.channels,
            frame_rate: self.frame_rate,
            max_context_frames: self.max_context_frames,
            supports_decode: self.supports_decode,
        }
    }
}

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0100_0000_01b3);
    }
    hash
}

/// The stateless closed-form model behind [`MockBackend`].
#[derive(Debug, Clone)]
pub struct MockModel {
    vocab_size: usize,
    bias_size: usize,
    bigram: Vec<f64>,
}

impl MockModel {
    pub fn new(vocab_size: usize, bias_size: usize) -> Self {
        Self::with_seed(vocab_size, bias_size, BIGRAM_SEED)
    }

    pub fn with_seed(vocab_size: usize, bias_size: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bigram = (0..(vocab_size + 1) * vocab_size)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        Self {
            vocab_size,
            bias_size: bias_size.min(vocab_size),
            bigram,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    /// Sorted bias tokens for a prompt.
    pub fn bias(&self, prompt: &str) -> Vec<usize> {
        let mut keyed: Vec<(u64, usize)> = (0..self.vocab_size)
            .map(|t| (fnv1a64(format!("{t}:{prompt}").as_bytes()), t))
            .collect();
        keyed.sort_unstable();
        let mut set: Vec<usize> = keyed[..self.bias_size].iter().map(|&(_, t)| t).collect();
        set.sort_unstable();
        set
    }

    /// `bigram(last, t)`; `last = None` selects the start row.
    pub fn bigram(&self, last: Option<u32>, t: usize) -> f64 {
        let row = last.map_or(self.vocab_size, |l| l as usize);
        self.bigram[row * self.vocab_size + t]
    }

    /// Logits for the next token of one channel whose previous token is `last`.
    pub fn logits(&self, prompt: &str, last: Option<u32>) -> Vec<f64> {
        self.logits_with_bias(&self.bias(prompt), last)
    }

    /// As [`logits`](Self::logits) with a precomputed sorted bias set.
    pub fn logits_with_bias(&self, bias: &[usize], last: Option<u32>) -> Vec<f64> {
        (0..self.vocab_size)
            .map(|t| {
                let base = if bias.binary_search(&t).is_ok() {
                    BIAS_LOGIT
                } else {
                    BASE_LOGIT
                };
                base + BIGRAM_SCALE * self.bigram(last, t)
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
struct MockContext {
    prompt: Prompt,
    bias: Vec<usize>,
    history: Vec<TokenFrame>,
}

/// Call counters for assertions on backend traffic.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MockStats {
    pub logits_queries: usize,
    /// Logits queries per context id.
    pub logits_by_context: BTreeMap<u64, usize>,
    pub appends: usize,
    pub frames_appended: usize,
    pub contexts_created: usize,
    pub contexts_freed: usize,
}

/// In-process mock backend. Also the state machine behind [`serve`].
#[derive(Debug, Clone)]
pub struct MockBackend {
    config: MockConfig,
    info: BackendInfo,
    model: MockModel,
    contexts: BTreeMap<u64, MockContext>,
    next_id: u64,
    stats: MockStats,
}

impl Default for MockBackend {
    fn default() -> Self {
        Self::new(MockConfig::default())
    }
}

impl MockBackend {
    pub fn new(config: MockConfig) -> Self {
        let info = config.info();
        let model = MockModel::new(config.vocab_size, config.bias_size);
        Self {
            config,
            info,
            model,
            contexts: BTreeMap::new(),
            next_id: 0,
            stats: MockStats::default(),
        }
    }

    pub fn model(&self) -> &MockModel {
        &self.model
    }

    pub fn config(&self) -> &MockConfig {
        &self.config
    }

    pub fn stats(&self) -> &MockStats {
        &self.stats
    }

    pub fn reset_stats(&mut self) {
        self.stats = MockStats::default();
    }

    pub fn live_contexts(&self) -> Vec<u64> {
        self.contexts.keys().copied().collect()
    }

    /// Frames fed to a live context, oldest first.
    pub fn context_history(&self, id: u64) -> Option<&[TokenFrame]> {
        self.contexts.get(&id).map(|c| c.history.as_slice())
    }

    pub fn context_prompt(&self, id: u64) -> Option<&Prompt> {
        self.contexts.get(&id).map(|c| &c.prompt)
    }

    fn context(&self, id: u64) -> Result<&MockContext> {
        self.contexts
            .get(&id)
            .ok_or_else(|| Error::protocol(crate::ErrorCode::BadRequest, format!("unknown context {id}")))
    }

    pub fn open(&mut self, prompt: &Prompt) -> Result<u64> {
        if prompt.text.trim().is_empty() {
            return Err(Error::Input("prompt text is empty".into()));
        }
        if self.contexts.len() >= self.config.max_contexts {
            return Err(Error::Capacity(format!(
                "{} contexts already live",
                self.contexts.len()
            )));
        }
        let id = self.next_id;
        self.next_id += 1;
        self.contexts.insert(
            id,
            MockContext {
                bias: self.model.bias(&prompt.text),
                prompt: prompt.clone(),
                history: Vec::new(),
            },
        );
        self.stats.contexts_created += 1;
        Ok(id)
    }

    /// Appends frames and returns the new position.
    pub fn feed(&mut self, id: u64, frames: &[TokenFrame]) -> Result<usize> {
        let position = self.context(id)?.history.len();
        if position + frames.len() > self.config.max_context_frames {
            return Err(Error::Capacity(format!(
                "context {id} at {position} frames cannot take {} more (limit {})",
                frames.len(),
                self.config.max_context_frames
            )));
        }
        for frame in frames {
            self.info.check_frame(frame)?;
        }
        let ctx = self.contexts.get_mut(&id).expect("checked above");
        ctx.history.extend_from_slice(frames);
        self.stats.appends += 1;
        self.stats.frames_appended += frames.len();
        Ok(ctx.history.len())
    }

    pub fn query(&mut self, id: u64) -> Result<FrameLogits> {
        let ctx = self.context(id)?;
        let last = ctx.history.last();
        let logits = (0..self.config.channels)
            .map(|c| self.model.logits_with_bias(&ctx.bias, last.map(|f| f[c])))
            .collect();
        self.stats.logits_queries += 1;
        *self.stats.logits_by_context.entry(id).or_default() += 1;
        Ok(logits)
    }

    pub fn release(&mut self, id: u64) -> Result<()> {
        self.contexts
            .remove(&id)
            .ok_or_else(|| Error::protocol(crate::ErrorCode::BadRequest, format!("unknown context {id}")))?;
        self.stats.contexts_freed += 1;
        Ok(())
    }

    pub fn render(&self, frames: &[TokenFrame], path: &Path) -> Result<AudioInfo> {
        if !self.config.supports_decode {
            return Err(Error::Unsupported("decode disabled on this mock".into()));
        }
        if frames.is_empty() {
            return Err(Error::Input("no frames to decode".into()));
        }
        for frame in frames {
            self.info.check_frame(frame)?;
        }
        render_wav(frames, self.config.frame_rate, path)
    }
}

impl Backend for MockBackend {
    fn info(&self) -> &BackendInfo {
        &self.info
    }

    fn new_context(&mut self, prompt: &Prompt) -> Result<ContextHandle> {
        Ok(ContextHandle {
            id: self.open(prompt)?,
            position: 0,
        })
    }

    fn append(&mut self, ctx: &mut ContextHandle, frames: &[TokenFrame]) -> Result<()> {
        ctx.position = self.feed(ctx.id, frames)?;
        Ok(())
    }

    fn logits(&mut self, ctx: &ContextHandle) -> Result<FrameLogits> {
        self.query(ctx.id)
    }

    fn decode(&mut self, frames: &[TokenFrame], path: &Path) -> Result<AudioInfo> {
        self.render(frames, path)
    }

    fn free_context(&mut self, ctx: ContextHandle) -> Result<()> {
        self.release(ctx.id)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distmath::softmax;

    #[test]
    fn alpha_and_beta_are_disjoint() {
        let m = MockModel::new(64, 8);
        let a = m.bias("alpha");
        let b = m.bias("beta");
        assert_eq!(a.len(), 8);
        assert_eq!(b.len(), 8);
        assert!(a.iter().all(|t| !b.contains(t)), "{a:?} vs {b:?}");
        assert_eq!(a, vec![0, 1, 8, 11, 30, 42, 60, 62]);
        assert_eq!(b, vec![4, 20, 22, 27, 29, 32, 56, 58]);
    }

    #[test]
    fn logits_follow_the_formula() {
        let m = MockModel::new(64, 8);
        let bias = m.bias("alpha");
        let l = m.logits("alpha", None);
        for (t, &logit) in l.iter().enumerate() {
            let base = if bias.contains(&t) { 2.0 } else { -1.0 };
            assert_eq!(logit, base + 0.5 * m.bigram(None, t));
        }
        let after = m.logits("alpha", Some(5));
        assert_eq!(after[bias[0]], 2.0 + 0.5 * m.bigram(Some(5), bias[0]));
        assert_eq!(m.logits("alpha", Some(5)), after);
    }

    #[test]
    fn alpha_mass_separation() {
        let m = MockModel::new(64, 8);
        let d = softmax(&m.logits("alpha", None), 1.0).unwrap();
        let mass = d.mass_on(&m.bias("alpha"));
        assert!(mass >= 0.85, "mass {mass}");
    }

    #[test]
    fn fnv_reference_values() {
        assert_eq!(fnv1a64(b""), 0xcbf2_9ce4_8422_2325);
        assert_eq!(fnv1a64(b"a"), 0xaf63_dc4c_8601_ec8c);
    }

    #[test]
    fn context_lifecycle() {
        let mut b = MockBackend::default();
        let mut c1 = b.new_context(&Prompt::new("alpha")).unwrap();
        let c2 = b.new_context(&Prompt::new("beta")).unwrap();
        assert_ne!(c1.id, c2.id);
        assert!(matches!(b.new_context(&Prompt::new(" ")), Err(Error::Input(_))));

        b.append(&mut c1, &[]).unwrap();
        assert_eq!(c1.position, 0);
        b.append(&mut c1, &[TokenFrame::single(3), TokenFrame::single(4)]).unwrap();
        assert_eq!(c1.position, 2);
        assert_eq!(b.context_history(c2.id).unwrap().len(), 0);
        assert!(b.append(&mut c1, &[TokenFrame::single(64)]).is_err());

        let first = b.logits(&c1).unwrap();
        assert_eq!(first, b.logits(&c1).unwrap());
        assert_eq!(first.len(), 1);
        assert_eq!(first[0].len(), 64);

        let id = c2.id;
        b.free_context(c2).unwrap();
        let again = ContextHandle { id, position: 0 };
        assert!(matches!(b.free_context(again), Err(Error::Protocol { .. })));
    }

    #[test]
    fn capacity_limits() {
        let mut b = MockBackend::new(MockConfig {
            max_context_frames: 3,
            max_contexts: 1,
            ..MockConfig::default()
        });
        let mut c = b.new_context(&Prompt::new("alpha")).unwrap();
        assert!(matches!(b.new_context(&Prompt::new("beta")), Err(Error::Capacity(_))));
        let frames = vec![TokenFrame::single(1); 3];
        b.append(&mut c, &frames).unwrap();
        assert!(matches!(b.append(&mut c, &frames[..1]), Err(Error::Capacity(_))));
        assert_eq!(c.position, 3);
    }
}
