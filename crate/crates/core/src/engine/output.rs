//! Token stream formats.
//!
//! JSONL: one record per frame,
//! `{"frame":i,"tokens":[..],"w":f,"temperature":f,"top_k":n}`, then one
//! trailing `{"stats":{..}}` record.
//!
//! Binary: a 16-byte little-endian header (`SGTK`, version `u16`, vocab
//! size `u32`, channels `u16`, frame rate `f32`) followed by `u32` tokens,
//! `channels` per frame.

use std::io::{self, Read, Write};

use serde::Serialize;

use super::{GenerationResult, GenerationStats};
use crate::backend::{BackendInfo, TokenFrame};
use crate::error::{Error, Result};

pub const BINARY_MAGIC: &[u8; 4] = b"SGTK";
pub const BINARY_VERSION: u16 = 1;
pub const BINARY_HEADER_LEN: usize = 16;

#[derive(Serialize)]
struct FrameRecord<'a> {
    frame: usize,
    tokens: &'a [u32],
    w: f64,
    temperature: f64,
    top_k: usize,
}

#[derive(Serialize)]
struct StatsRecord<'a> {
    stats: StatsBody<'a>,
}

#[derive(Serialize)]
struct StatsBody<'a> {
    frames: usize,
    truncated: bool,
    #[serde(flatten)]
    inner: &'a GenerationStats,
}

pub fn write_jsonl<W: Write>(result: &GenerationResult, mut out: W) -> io::Result<()> {
    for (i, (frame, params)) in result
        .frames
        .iter()
        .zip(&result.per_frame_params)
        .enumerate()
    {
        let record = FrameRecord {
            frame: i,
            tokens: frame,
            w: params.w.get(),
            temperature: params.temperature,
            top_k: params.top_k,
        };
        serde_json::to_writer(&mut out, &record)?;
        out.write_all(b"\n")?;
    }
    let stats = StatsRecord {
        stats: StatsBody {
            frames: result.frames.len(),
            truncated: result.truncated,
            inner: &result.stats,
        },
    };
    serde_json::to_writer(&mut out, &stats)?;
    out.write_all(b"\n")?;
    out.flush()
}

pub fn write_binary<W: Write>(frames: &[TokenFrame], info: &BackendInfo, mut out: W) -> Result<()> {
    let vocab = u32::try_from(info.vocab_size)
        .map_err(|_| Error::Input("vocabulary too large for binary output".into()))?;
    let channels = u16::try_from(info.channels)
        .map_err(|_| Error::Input("too many channels for binary output".into()))?;
    let mut header = Vec::with_capacity(BINARY_HEADER_LEN);
    header.extend_from_slice(BINARY_MAGIC);
    header.extend_from_slice(&BINARY_VERSION.to_le_bytes());
    header.extend_from_slice(&vocab.to_le_bytes());
    header.extend_from_slice(&channels.to_le_bytes());
    header.extend_from_slice(&(info.frame_rate as f32).to_le_bytes());
    out.write_all(&header)?;
    let mut body = Vec::with_capacity(frames.len() * info.channels * 4);
    for frame in frames {
        info.check_frame(frame)?;
        for &t in frame.iter() {
            body.extend_from_slice(&t.to_le_bytes());
        }
    }
    out.write_all(&body)?;
    out.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct BinaryStream {
    pub version: u16,
    pub vocab_size: u32,
    pub channels: u16,
    pub frame_rate: f32,
    pub frames: Vec<TokenFrame>,
}

pub fn read_binary<R: Read>(mut input: R) -> Result<BinaryStream> {
    let mut header = [0u8; BINARY_HEADER_LEN];
    input.read_exact(&mut header)?;
    if &header[0..4] != BINARY_MAGIC {
        return Err(Error::Input("not a token stream (bad magic)".into()));
    }
    let version = u16::from_le_bytes([header[4], header[5]]);
    let vocab_size = u32::from_le_bytes(header[6..10].try_into().expect("4 bytes"));
    let channels = u16::from_le_bytes([header[10], header[11]]);
    let frame_rate = f32::from_le_bytes(header[12..16].try_into().expect("4 bytes"));
    if channels == 0 {
        return Err(Error::Input("token stream declares zero channels".into()));
    }
    let mut body = Vec::new();
    input.read_to_end(&mut body)?;
    let frame_bytes = channels as usize * 4;
    if body.len() % frame_bytes != 0 {
        return Err(Error::Input("token stream ends mid-frame".into()));
    }
    let frames = body
        .chunks_exact(frame_bytes)
        .map(|chunk| {
            TokenFrame(
                chunk
                    .chunks_exact(4)
                    .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                    .collect(),
            )
        })
        .collect();
    Ok(BinaryStream {
        version,
        vocab_size,
        channels,
        frame_rate,
        frames,
    })
}
