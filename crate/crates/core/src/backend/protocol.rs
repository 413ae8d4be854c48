//! Wire messages. One JSON object per line in each direction; every reply
//! echoes the id of the request it answers. See `docs/protocol.md`.

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine as _;
use serde::{Deserialize, Serialize};

use super::{BackendInfo, TokenFrame};
use crate::error::{Error, ErrorCode, Result};

/// Semantic `major.minor`; peers with different majors refuse to talk.
pub const PROTOCOL_VERSION: &str = "1.0";

/// Returns the major component of a `major.minor` version string.
pub fn major_version(version: &str) -> Option<u64> {
    let (major, minor) = version.split_once('.')?;
    minor.parse::<u64>().ok()?;
    major.parse().ok()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LogitEncoding {
    /// Plain JSON numbers.
    #[default]
    Json,
    /// Base64 of little-endian `f32` values, one string per channel.
    B64f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Request {
    pub id: u64,
    #[serde(flatten)]
    pub op: Op,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Op {
    Handshake {
        version: String,
    },
    NewContext {
        prompt: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        guidance_scale: Option<f64>,
    },
    Append {
        ctx: u64,
        frames: Vec<TokenFrame>,
    },
    Logits {
        ctx: u64,
        #[serde(default, skip_serializing_if = "is_json")]
        encoding: LogitEncoding,
    },
    Decode {
        frames: Vec<TokenFrame>,
        path: String,
    },
    Free {
        ctx: u64,
    },
}

fn is_json(e: &LogitEncoding) -> bool {
    *e == LogitEncoding::Json
}

/// Reply envelope: `{"id":n,"ok":true, ...body}`.
#[derive(Debug, Clone, Serialize)]
pub struct Reply<T> {
    pub id: Option<u64>,
    pub ok: bool,
    #[serde(flatten)]
    pub body: T,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireError {
    pub code: ErrorCode,
    pub message: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: WireError,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HandshakeBody {
    pub version: String,
    pub info: BackendInfo,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ContextBody {
    pub ctx: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PositionBody {
    pub position: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LogitsBody {
    #[serde(default, skip_serializing_if = "is_json")]
    pub encoding: LogitEncoding,
    pub logits: LogitsPayload,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LogitsPayload {
    Json(Vec<Vec<f64>>),
    Packed(Vec<String>),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecodeBody {
    pub path: String,
    pub sample_rate: u32,
    pub samples: u64,
    pub duration_seconds: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Empty {}

impl LogitsPayload {
    pub fn encode(logits: &[Vec<f64>], encoding: LogitEncoding) -> Self {
        match encoding {
            LogitEncoding::Json => LogitsPayload::Json(logits.to_vec()),
            LogitEncoding::B64f32 => LogitsPayload::Packed(
                logits
                    .iter()
                    .map(|channel| {
                        let bytes: Vec<u8> = channel
                            .iter()
                            .flat_map(|&x| (x as f32).to_le_bytes())
                            .collect();
                        BASE64.encode(bytes)
                    })
                    .collect(),
            ),
        }
    }

    pub fn decode(self, encoding: LogitEncoding) -> Result<Vec<Vec<f64>>> {
        match (self, encoding) {
            (LogitsPayload::Json(v), LogitEncoding::Json) => Ok(v),
            (LogitsPayload::Packed(v), LogitEncoding::B64f32) => v
                .iter()
                .map(|s| {
                    let bytes = BASE64.decode(s).map_err(|e| {
                        Error::protocol(ErrorCode::BadRequest, format!("bad base64 logits: {e}"))
                    })?;
                    if bytes.len() % 4 != 0 {
                        return Err(Error::protocol(
                            ErrorCode::BadRequest,
                            "packed logits are not a whole number of f32 values",
                        ));
                    }
                    Ok(bytes
                        .chunks_exact(4)
                        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
                        .collect())
                })
                .collect(),
            _ => Err(Error::protocol(
                ErrorCode::BadRequest,
                "logits payload does not match its declared encoding",
            )),
        }
    }
}

/// Serializes a success reply as one line (without the newline).
pub fn ok_line<T: Serialize>(id: u64, body: T) -> String {
    serde_json::to_string(&Reply {
        id: Some(id),
        ok: true,
        body,
    })
    .expect("reply serializes")
}

pub fn error_line(id: Option<u64>, code: ErrorCode, message: impl Into<String>) -> String {
    serde_json::to_string(&Reply {
        id,
        ok: false,
        body: ErrorBody {
            error: WireError {
                code,
                message: message.into(),
            },
        },
    })
    .expect("reply serializes")
}
