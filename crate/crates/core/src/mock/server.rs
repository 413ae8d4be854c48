use std::io::{self, BufRead, Write};
use std::path::Path;

use serde_json::Value;

use super::MockBackend;
use crate::backend::protocol::{
    error_line, major_version, ok_line, ContextBody, DecodeBody, Empty, HandshakeBody, LogitsBody, LogitsPayload,
    Op, PositionBody, Request, PROTOCOL_VERSION,
};
use crate::error::{Error, ErrorCode};

/// Runs the wire protocol over `reader`/`writer` until end of input.
///
/// Every input line gets exactly one reply line. Lines that do not parse
/// as a request get a `bad_request` error, echoing the id when one can
/// be recovered.
pub fn serve<R: BufRead, W: Write>(
    backend: &mut MockBackend,
    reader: R,
    mut writer: W,
) -> io::Result<()> {
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut reply = handle_line(backend, &line);
        reply.push('\n');
        writer.write_all(reply.as_bytes())?;
        writer.flush()?;
    }
    Ok(())
}

/// One request line in, one reply line out (no trailing newline).
pub fn handle_line(backend: &mut MockBackend, line: &str) -> String {
    let request: Request = match serde_json::from_str(line) {
        Ok(r) => r,
        Err(e) => {
            let id = serde_json::from_str::<Value>(line)
                .ok()
                .and_then(|v| v.get("id").and_then(Value::as_u64));
            return error_line(id, ErrorCode::BadRequest, format!("malformed request: {e}"));
        }
    };
    let id = request.id;
    let result = match request.op {
        Op::Handshake { version } if major_version(&version) != major_version(PROTOCOL_VERSION) => {
            Err(Error::Unsupported(format!(
                "protocol {version} requested; this backend speaks {PROTOCOL_VERSION}"
            )))
        }
        Op::Handshake { .. } => Ok(ok_line(
            id,
            HandshakeBody {
                version: PROTOCOL_VERSION.into(),
                info: backend.info.clone(),
            },
        )),
        Op::NewContext {
            prompt,
            guidance_scale,
        } => backend
            .open(&crate::score::Prompt {
                text: prompt,
                guidance_scale,
            })
            .map(|ctx| ok_line(id, ContextBody { ctx })),
        Op::Append { ctx, frames } => backend
            .feed(ctx, &frames)
            .map(|position| ok_line(id, PositionBody { position })),
        Op::Logits { ctx, encoding } => backend.query(ctx).map(|logits| {
            ok_line(
                id,
                LogitsBody {
                    encoding,
                    logits: LogitsPayload::encode(&logits, encoding),
                },
            )
        }),
        Op::Decode { frames, path } => backend.render(&frames, Path::new(&path)).map(|a| {
            ok_line(
                id,
                DecodeBody {
                    path,
                    sample_rate: a.sample_rate,
                    samples: a.samples,
                    duration_seconds: a.duration_seconds,
                },
            )
        }),
        Op::Free { ctx } => backend.release(ctx).map(|()| ok_line(id, Empty {})),
    };
    result.unwrap_or_else(|e: Error| error_line(Some(id), e.wire_code(), e.wire_message()))
}
