//! The mock logit backend as a protocol server, over stdio or TCP.

use std::io::{self, BufReader};
use std::net::TcpListener;
use std::process::ExitCode;
use std::thread;

use clap::Parser;
use segue_core::mock::{serve, MockBackend, MockConfig};

#[derive(Parser, Debug)]
#[command(name = "segue-mock-backend", version, about = "Deterministic mock logit backend")]
struct Args {
    #[arg(long, default_value_t = 64)]
    vocab: usize,
    #[arg(long, default_value_t = 1)]
    channels: usize,
    #[arg(long, default_value_t = 50.0)]
    frame_rate: f64,
    #[arg(long, default_value_t = 8)]
    bias_size: usize,
    #[arg(long, default_value_t = 4096)]
    max_context_frames: usize,
    #[arg(long, default_value_t = 1024)]
    max_contexts: usize,
    /// Refuse decode requests.
    #[arg(long)]
    no_decode: bool,
    /// Listen on host:port instead of stdio; each connection gets a fresh backend.
    #[arg(long, value_name = "ADDR")]
    tcp: Option<String>,
}

impl Args {
    fn config(&self) -> MockConfig {
        MockConfig {
            vocab_size: self.vocab,
            channels: self.channels,
            frame_rate: self.frame_rate,
            bias_size: self.bias_size,
            max_context_frames: self.max_context_frames,
            max_contexts: self.max_contexts,
            supports_decode: !self.no_decode,
        }
    }
}

fn main() -> ExitCode {
    let args = Args::parse();
    let config = args.config();
    if let Err(e) = config.info().validate() {
        eprintln!("segue-mock-backend: {e}");
        return ExitCode::from(2);
    }
    let result = match &args.tcp {
        None => {
            let mut backend = MockBackend::new(config);
            serve(&mut backend, io::stdin().lock(), io::stdout().lock())
        }
        Some(addr) => listen(addr, config),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("segue-mock-backend: {e}");
            ExitCode::FAILURE
        }
    }
}

fn listen(addr: &str, config: MockConfig) -> io::Result<()> {
    let listener = TcpListener::bind(addr)?;
    eprintln!("segue-mock-backend: listening on {}", listener.local_addr()?);
    for stream in listener.incoming() {
        let stream = stream?;
        stream.set_nodelay(true)?;
        let config = config.clone();
        thread::spawn(move || {
            let mut backend = MockBackend::new(config);
            let result = stream
                .try_clone()
                .and_then(|writer| serve(&mut backend, BufReader::new(stream), writer));
            if let Err(e) = result {
                eprintln!("segue-mock-backend: connection: {e}");
            }
        });
    }
    Ok(())
}
