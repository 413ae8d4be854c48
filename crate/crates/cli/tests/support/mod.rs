#![allow(dead_code)]

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::{Arc, Mutex};
use std::thread;

pub fn segue() -> Command {
    Command::new(env!("CARGO_BIN_EXE_segue"))
}

pub fn mock_backend() -> &'static str {
    env!("CARGO_BIN_EXE_segue-mock-backend")
}

/// `--backend-cmd` value for the mock binary with extra flags.
pub fn mock_cmd(flags: &str) -> String {
    format!("{} {flags}", mock_backend()).trim_end().to_string()
}

pub fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests").join(name)
}

pub fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

pub fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

/// A chat-completions server that answers requests with canned message
/// contents, in order, and records every request body.
pub struct ChatServer {
    pub url: String,
    pub bodies: Arc<Mutex<Vec<String>>>,
}

impl ChatServer {
    pub fn start(replies: Vec<String>) -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}", listener.local_addr().unwrap());
        let bodies = Arc::new(Mutex::new(Vec::new()));
        let seen = Arc::clone(&bodies);
        thread::spawn(move || {
            let mut replies = replies.into_iter();
            for stream in listener.incoming() {
                let Ok(mut stream) = stream else { break };
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut length = 0usize;
                loop {
                    let mut line = String::new();
                    if reader.read_line(&mut line).unwrap_or(0) == 0 {
                        break;
                    }
                    let line = line.trim_end();
                    if line.is_empty() {
                        break;
                    }
                    if let Some((k, v)) = line.split_once(':') {
                        if k.eq_ignore_ascii_case("content-length") {
                            length = v.trim().parse().unwrap();
                        }
                    }
                }
                let mut body = vec![0u8; length];
                reader.read_exact(&mut body).unwrap();
                seen.lock().unwrap().push(String::from_utf8(body).unwrap());
                let content = replies.next().unwrap_or_default();
                let reply = serde_json::json!({
                    "id": "fixture",
                    "object": "chat.completion",
                    "choices": [{"index": 0, "message": {"role": "assistant", "content": content}}],
                })
                .to_string();
                let _ = write!(
                    stream,
                    "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{reply}",
                    reply.len()
                );
            }
        });
        Self { url, bodies }
    }

    pub fn requests(&self) -> usize {
        self.bodies.lock().unwrap().len()
    }
}

pub const GOLDEN_BACKEND_FLAGS: &str = "--vocab 16 --bias-size 4 --frame-rate 10";

/// Runs the golden score against the mock binary and returns the recorded
/// transcript. With `SEGUE_BLESS=1` the golden transcript is rewritten.
pub fn record_golden_transcript() -> String {
    let dir = tempfile::tempdir().unwrap();
    let transcript = dir.path().join("transcript.ndjson");
    let out = segue()
        .arg("generate")
        .arg(fixture("golden/score.json"))
        .args(["--backend-cmd", &mock_cmd(GOLDEN_BACKEND_FLAGS), "--quiet", "--out"])
        .arg(dir.path().join("tokens.jsonl"))
        .arg("--transcript")
        .arg(&transcript)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    let text = std::fs::read_to_string(&transcript).unwrap();
    if std::env::var_os("SEGUE_BLESS").is_some() {
        std::fs::write(fixture("golden/transcript.ndjson"), &text).unwrap();
    }
    text
}

pub fn golden_transcript() -> String {
    std::fs::read_to_string(fixture("golden/transcript.ndjson"))
        .expect("golden transcript missing; run the tests once with SEGUE_BLESS=1")
}

/// Feeds the request lines of a transcript to a fresh mock and returns the
/// first reply that differs from the recorded one.
pub fn replay_mismatch(transcript: &str) -> Option<(String, String)> {
    use segue_core::mock::{handle_line, MockBackend, MockConfig};
    let mut backend = MockBackend::new(MockConfig {
        vocab_size: 16,
        bias_size: 4,
        frame_rate: 10.0,
        ..MockConfig::default()
    });
    // Requests may be pipelined; the mock answers in order.
    let mut pending = std::collections::VecDeque::new();
    for line in transcript.lines() {
        if let Some(req) = line.strip_prefix("> ") {
            pending.push_back(handle_line(&mut backend, req));
        } else if let Some(reply) = line.strip_prefix("< ") {
            let want = pending.pop_front().unwrap_or_default();
            if want != reply {
                return Some((want, reply.to_string()));
            }
        }
    }
    pending.pop_front().map(|want| (want, String::new()))
}
