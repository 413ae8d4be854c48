use std::collections::HashMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpStream;
use std::path::Path;
use std::process::{Child, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::thread;
use std::time::{Duration, Instant};

use serde::de::DeserializeOwned;
use serde_json::Value;

use super::protocol::{
    major_version, ContextBody, DecodeBody, Empty, HandshakeBody, LogitsBody, Op, PositionBody,
    Request, WireError, PROTOCOL_VERSION,
};
use super::{AudioInfo, Backend, BackendInfo, ContextHandle, FrameLogits, LogitEncoding, TokenFrame};
use crate::error::{Error, ErrorCode, Result};
use crate::score::Prompt;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Timeouts {
    pub handshake: Duration,
    /// Applies to every request after the handshake.
    pub step: Duration,
}

impl Default for Timeouts {
    fn default() -> Self {
        Self {
            handshake: Duration::from_secs(30),
            step: Duration::from_secs(60),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct ClientOptions {
    pub timeouts: Timeouts,
    pub encoding: LogitEncoding,
    /// Keep every line sent (`> `) and received (`< `).
    pub record_transcript: bool,
}

/// A [`Backend`] reached over the line protocol.
///
/// Writes are serialized through this client; replies may arrive in any
/// order and are matched to requests by id.
pub struct ProtocolClient {
    writer: Box<dyn Write + Send>,
    incoming: Receiver<std::io::Result<String>>,
    pending: HashMap<u64, Value>,
    next_id: u64,
    info: BackendInfo,
    options: ClientOptions,
    transcript: Vec<String>,
    child: Option<Child>,
}

impl ProtocolClient {
    /// Connects over arbitrary streams and performs the handshake.
    pub fn from_streams<R, W>(reader: R, writer: W, options: ClientOptions) -> Result<Self>
    where
        R: Read + Send + 'static,
        W: Write + Send + 'static,
    {
        Self::start(Box::new(reader), Box::new(writer), None, options)
    }

    /// Spawns `argv` and speaks the protocol over its stdin/stdout.
    /// The child's stderr is inherited.
    pub fn spawn(argv: &[String], options: ClientOptions) -> Result<Self> {
        let (program, args) = argv
            .split_first()
            .ok_or_else(|| Error::Parameter("empty backend command".into()))?;
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        Self::start(Box::new(stdout), Box::new(stdin), Some(child), options)
    }

    pub fn connect_tcp(addr: &str, options: ClientOptions) -> Result<Self> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        let reader = stream.try_clone()?;
        Self::start(Box::new(reader), Box::new(stream), None, options)
    }

    fn start(
        reader: Box<dyn Read + Send>,
        writer: Box<dyn Write + Send>,
        child: Option<Child>,
        options: ClientOptions,
    ) -> Result<Self> {
        let (tx, rx) = mpsc::channel();
        thread::Builder::new()
            .name("backend-reader".into())
            .spawn(move || {
                for line in BufReader::new(reader).lines() {
                    let stop = line.is_err();
                    if tx.send(line).is_err() || stop {
                        break;
                    }
                }
            })?;
        let mut client = Self {
            writer,
            incoming: rx,
            pending: HashMap::new(),
            next_id: 1,
            info: BackendInfo {
                name: String::new(),
                vocab_size: 0,
                channels: 0,
                frame_rate: 0.0,
                max_context_frames: 0,
                supports_decode: false,
            },
            options,
            transcript: Vec::new(),
            child,
        };
        client.info = client.handshake()?;
        Ok(client)
    }

    fn handshake(&mut self) -> Result<BackendInfo> {
        let id = self.send(Op::Handshake {
            version: PROTOCOL_VERSION.into(),
        })?;
        let body: HandshakeBody = self.receive(id, self.options.timeouts.handshake, "handshake")?;
        let ours = major_version(PROTOCOL_VERSION);
        if major_version(&body.version).is_none() || major_version(&body.version) != ours {
            return Err(Error::VersionMismatch {
                client: PROTOCOL_VERSION.into(),
                backend: body.version,
            });
        }
        body.info.validate().map_err(|e| {
            Error::protocol(ErrorCode::BadRequest, format!("handshake declares bad capabilities: {e}"))
        })?;
        Ok(body.info)
    }

    /// Lines exchanged so far, when recording is enabled.
    pub fn transcript(&self) -> &[String] {
        &self.transcript
    }

    pub fn take_transcript(&mut self) -> Vec<String> {
        std::mem::take(&mut self.transcript)
    }

    fn send(&mut self, op: Op) -> Result<u64> {
        let id = self.next_id;
        self.next_id += 1;
        let line = serde_json::to_string(&Request { id, op })?;
        if self.options.record_transcript {
            self.transcript.push(format!("> {line}"));
        }
        let framed = format!("{line}\n");
        let write = |w: &mut Box<dyn Write + Send>| -> std::io::Result<()> {
            w.write_all(framed.as_bytes())?;
            w.flush()
        };
        write(&mut self.writer).map_err(|e| match e.kind() {
            std::io::ErrorKind::BrokenPipe => Error::Disconnected,
            _ => Error::Io(e),
        })?;
        Ok(id)
    }

    /// Waits for the reply to `id` and decodes its body.
    fn receive<T: DeserializeOwned>(&mut self, id: u64, timeout: Duration, what: &str) -> Result<T> {
        let reply = self.await_reply(id, timeout)?;
        if reply.get("ok").and_then(Value::as_bool) != Some(true) {
            let err = reply
                .get("error")
                .cloned()
                .and_then(|e| serde_json::from_value::<WireError>(e).ok())
                .unwrap_or(WireError {
                    code: ErrorCode::Internal,
                    message: format!("unrecognized error reply to {what}"),
                });
            return Err(match err.code {
                ErrorCode::Capacity => Error::Capacity(err.message),
                ErrorCode::Unsupported => Error::Unsupported(err.message),
                code => Error::Protocol {
                    code,
                    message: err.message,
                },
            });
        }
        serde_json::from_value(reply).map_err(|e| {
            Error::protocol(ErrorCode::BadRequest, format!("malformed {what} reply: {e}"))
        })
    }

    fn await_reply(&mut self, id: u64, timeout: Duration) -> Result<Value> {
        if let Some(v) = self.pending.remove(&id) {
            return Ok(v);
        }
        let deadline = Instant::now() + timeout;
        loop {
            let remaining = deadline.saturating_duration_since(Instant::now());
            let line = match self.incoming.recv_timeout(remaining) {
                Ok(Ok(line)) => line,
                Ok(Err(e)) => return Err(Error::Io(e)),
                Err(RecvTimeoutError::Timeout) => return Err(Error::Timeout(timeout)),
                Err(RecvTimeoutError::Disconnected) => return Err(Error::Disconnected),
            };
            if line.trim().is_empty() {
                continue;
            }
            if self.options.record_transcript {
                self.transcript.push(format!("< {line}"));
            }
            let value: Value = serde_json::from_str(&line).map_err(|e| {
                Error::protocol(ErrorCode::BadRequest, format!("unparseable reply: {e}"))
            })?;
            match value.get("id") {
                Some(Value::Number(n)) if n.as_u64() == Some(id) => return Ok(value),
                Some(Value::Number(n)) => {
                    let other = n.as_u64().ok_or_else(|| {
                        Error::protocol(ErrorCode::BadRequest, "reply id is not an integer")
                    })?;
                    self.pending.insert(other, value);
                }
                // The peer could not read a request well enough to echo its id.
                Some(Value::Null) => return Ok(value),
                _ => {
                    return Err(Error::protocol(ErrorCode::BadRequest, "reply without an id"));
                }
            }
        }
    }

    fn call<T: DeserializeOwned>(&mut self, op: Op, what: &str) -> Result<T> {
        let id = self.send(op)?;
        self.receive(id, self.options.timeouts.step, what)
    }

    fn fetch_logits(&mut self, id: u64) -> Result<FrameLogits> {
        let body: LogitsBody = self.receive(id, self.options.timeouts.step, "logits")?;
        let logits = body.logits.decode(body.encoding)?;
        self.info.check_logits(&logits)?;
        Ok(logits)
    }
}

impl Backend for ProtocolClient {
    fn info(&self) -> &BackendInfo {
        &self.info
    }

    fn new_context(&mut self, prompt: &Prompt) -> Result<ContextHandle> {
        let body: ContextBody = self.call(
            Op::NewContext {
                prompt: prompt.text.clone(),
                guidance_scale: prompt.guidance_scale,
            },
            "new_context",
        )?;
        Ok(ContextHandle {
            id: body.ctx,
            position: 0,
        })
    }

    fn append(&mut self, ctx: &mut ContextHandle, frames: &[TokenFrame]) -> Result<()> {
        let body: PositionBody = self.call(
            Op::Append {
                ctx: ctx.id,
                frames: frames.to_vec(),
            },
            "append",
        )?;
        if body.position != ctx.position + frames.len() {
            return Err(Error::protocol(
                ErrorCode::Internal,
                format!(
                    "context {} reports position {}, expected {}",
                    ctx.id,
                    body.position,
                    ctx.position + frames.len()
                ),
            ));
        }
        ctx.position = body.position;
        Ok(())
    }

    fn logits(&mut self, ctx: &ContextHandle) -> Result<FrameLogits> {
        let id = self.send(Op::Logits {
            ctx: ctx.id,
            encoding: self.options.encoding,
        })?;
        self.fetch_logits(id)
    }

    fn logits_pair(
        &mut self,
        a: &ContextHandle,
        b: &ContextHandle,
    ) -> Result<(FrameLogits, FrameLogits)> {
        // Both requests go out before either reply is awaited.
        let encoding = self.options.encoding;
        let first = self.send(Op::Logits { ctx: a.id, encoding })?;
        let second = self.send(Op::Logits { ctx: b.id, encoding })?;
        let la = self.fetch_logits(first);
        let lb = self.fetch_logits(second);
        Ok((la?, lb?))
    }

    fn decode(&mut self, frames: &[TokenFrame], path: &Path) -> Result<AudioInfo> {
        if !self.info.supports_decode {
            return Err(Error::Unsupported(format!(
                "backend {} cannot decode audio",
                self.info.name
            )));
        }
        let body: DecodeBody = self.call(
            Op::Decode {
                frames: frames.to_vec(),
                path: path.to_string_lossy().into_owned(),
            },
            "decode",
        )?;
        Ok(AudioInfo {
            path: body.path.into(),
            sample_rate: body.sample_rate,
            samples: body.samples,
            duration_seconds: body.duration_seconds,
        })
    }

    fn free_context(&mut self, ctx: ContextHandle) -> Result<()> {
        let _: Empty = self.call(Op::Free { ctx: ctx.id }, "free")?;
        Ok(())
    }
}

impl Drop for ProtocolClient {
    fn drop(&mut self) {
        let Some(mut child) = self.child.take() else {
            return;
        };
        // Closing stdin asks the backend to exit.
        self.writer = Box::new(std::io::sink());
        let deadline = Instant::now() + Duration::from_secs(2);
        while Instant::now() < deadline {
            if let Ok(Some(_)) = child.try_wait() {
                return;
            }
            thread::sleep(Duration::from_millis(10));
        }
        let _ = child.kill();
        let _ = child.wait();
    }
}
