//! `segue`: validate scores, generate token streams, plan scores with an LLM.
//!
//! Exit codes: 0 success, 1 validation errors, 2 parse errors, 3 backend
//! failure, 4 planner failure.

use std::fs::{self, File};
use std::io::{self, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use segue_core::backend::{Backend, BackendInfo, ClientOptions, LogitEncoding, ProtocolClient, Timeouts};
use segue_core::engine::output::{write_binary, write_jsonl};
use segue_core::engine::{generate, GenerateOptions, GenerationResult, Progress, DEFAULT_PRIMING_HORIZON};
use segue_core::mock::MockBackend;
use segue_core::planner::{self, HttpTransport, PlanRequest};
use segue_core::score::{
    compile_score, load_score_with, save_score, validate_score, ParseMode, Score, ValidationOptions,
};
use segue_core::Error;

const EXIT_VALIDATION: u8 = 1;
const EXIT_PARSE: u8 = 2;
const EXIT_BACKEND: u8 = 3;
const EXIT_PLANNER: u8 = 4;

#[derive(Parser)]
#[command(name = "segue", version, about = "Smooth prompt-to-prompt transitions for token-based music models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a score file and print its diagnostics.
    Validate(ValidateArgs),
    /// Decode a score into a token stream.
    Generate(GenerateArgs),
    /// Ask a chat model to write a score from a description.
    Plan(PlanArgs),
}

#[derive(Args)]
struct ScoreArgs {
    /// Score file, or `-` for stdin.
    score: PathBuf,
    /// Allow transitions longer than 5 seconds (reported as warnings).
    #[arg(long)]
    override_transition_limit: bool,
    /// Warn about unknown keys instead of rejecting them.
    #[arg(long)]
    lenient: bool,
}

#[derive(Args)]
struct ValidateArgs {
    #[command(flatten)]
    score: ScoreArgs,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Jsonl,
    Bin,
}

#[derive(Clone, Copy, ValueEnum)]
enum Encoding {
    Json,
    B64f32,
}

#[derive(Args)]
#[group(id = "backend", required = true, multiple = false)]
struct BackendArgs {
    /// Backend command line, spawned and spoken to over stdin/stdout.
    #[arg(long, value_name = "CMD", group = "backend")]
    backend_cmd: Option<String>,
    /// Backend listening at host:port.
    #[arg(long, value_name = "ADDR", group = "backend")]
    backend_tcp: Option<String>,
    /// Use the built-in mock backend in this process.
    #[arg(long, group = "backend")]
    inprocess: bool,
}

#[derive(Args)]
struct GenerateArgs {
    #[command(flatten)]
    score: ScoreArgs,
    #[command(flatten)]
    backend: BackendArgs,
    /// Token stream destination; `-` writes to stdout.
    #[arg(long, default_value = "-")]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = Format::Jsonl)]
    format: Format,
    /// Overrides the score's sampling seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Also decode to a WAV file (default: the output path with `.wav`).
    #[arg(long, value_name = "PATH", num_args = 0..=1)]
    render: Option<Option<PathBuf>>,
    /// Most frames of history replayed into a new context.
    #[arg(long, default_value_t = DEFAULT_PRIMING_HORIZON)]
    priming_horizon: usize,
    #[arg(long, value_enum, default_value_t = Encoding::Json)]
    logits_encoding: Encoding,
    /// Seconds to wait for each backend reply.
    #[arg(long, default_value_t = 60.0)]
    step_timeout: f64,
    /// Seconds to wait for the handshake.
    #[arg(long, default_value_t = 30.0)]
    handshake_timeout: f64,
    /// Write the protocol transcript here (subprocess and TCP backends).
    #[arg(long, value_name = "PATH")]
    transcript: Option<PathBuf>,
    /// Suppress progress lines.
    #[arg(long, short)]
    quiet: bool,
}

#[derive(Args)]
struct PlanArgs {
    /// What the piece should sound like.
    description: String,
    /// Total length in seconds.
    #[arg(long, default_value_t = 60.0)]
    duration: f64,
    #[arg(long, default_value_t = planner::DEFAULT_MAX_SEGMENTS)]
    max_segments: usize,
    /// Chat server base URL or full chat-completions URL.
    #[arg(long, default_value = planner::DEFAULT_ENDPOINT)]
    endpoint: String,
    #[arg(long, default_value = planner::DEFAULT_MODEL)]
    model: String,
    #[arg(long, env = "SEGUE_API_KEY", hide_env_values = true)]
    api_key: Option<String>,
    /// Print the request that would be sent and exit.
    #[arg(long)]
    dry_run: bool,
    /// Rescale segment durations to exactly `--duration`.
    #[arg(long)]
    clamp: bool,
    /// Score destination; `-` writes to stdout.
    #[arg(long, default_value = "-")]
    out: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("SEGUE_LOG", "warn")).init();
    let cli = Cli::parse();
    let code = match cli.command {
        Command::Validate(args) => cmd_validate(&args),
        Command::Generate(args) => cmd_generate(&args),
        Command::Plan(args) => cmd_plan(&args),
    };
    ExitCode::from(code)
}

fn is_stdio(path: &Path) -> bool {
    path.as_os_str() == "-"
}

fn read_input(path: &Path) -> io::Result<Vec<u8>> {
    if is_stdio(path) {
        let mut buf = Vec::new();
        io::stdin().read_to_end(&mut buf)?;
        Ok(buf)
    } else {
        fs::read(path)
    }
}

fn open_output(path: &Path) -> io::Result<Box<dyn Write>> {
    if is_stdio(path) {
        Ok(Box::new(BufWriter::new(io::stdout().lock())))
    } else {
        Ok(Box::new(BufWriter::new(File::create(path)?)))
    }
}

impl ScoreArgs {
    fn validation(&self) -> ValidationOptions {
        ValidationOptions {
            allow_long_transitions: self.override_transition_limit,
        }
    }

    /// Loads and validates, printing diagnostics. `Err` carries the exit code.
    fn load(&self) -> Result<Score, u8> {
        let bytes = read_input(&self.score).map_err(|e| {
            eprintln!("error: {}: {e}", self.score.display());
            EXIT_PARSE
        })?;
        let mode = if self.lenient { ParseMode::Lenient } else { ParseMode::Strict };
        let loaded = load_score_with(&bytes, mode).map_err(|e| {
            eprintln!("error: {}: {e}", self.score.display());
            EXIT_PARSE
        })?;
        for key in &loaded.ignored_keys {
            eprintln!("warning: {key}: unknown key ignored");
        }
        let diagnostics = validate_score(&loaded.score, &self.validation());
        for d in &diagnostics {
            eprintln!("{d}");
        }
        if diagnostics.iter().any(|d| d.is_error()) {
            return Err(EXIT_VALIDATION);
        }
        Ok(loaded.score)
    }
}

fn cmd_validate(args: &ValidateArgs) -> u8 {
    match args.score.load() {
        Ok(score) => {
            eprintln!(
                "ok: {} segments, {} s",
                score.segments.len(),
                score.total_seconds()
            );
            0
        }
        Err(code) => code,
    }
}

fn seconds(s: f64) -> Duration {
    Duration::try_from_secs_f64(s).unwrap_or(Duration::MAX)
}

fn connect(args: &GenerateArgs) -> anyhow::Result<ProtocolClient> {
    let options = ClientOptions {
        timeouts: Timeouts {
            handshake: seconds(args.handshake_timeout),
            step: seconds(args.step_timeout),
        },
        encoding: match args.logits_encoding {
            Encoding::Json => LogitEncoding::Json,
            Encoding::B64f32 => LogitEncoding::B64f32,
        },
        record_transcript: args.transcript.is_some(),
    };
    if let Some(cmd) = &args.backend.backend_cmd {
        let argv = shlex::split(cmd).filter(|a| !a.is_empty()).context("cannot parse --backend-cmd")?;
        ProtocolClient::spawn(&argv, options).with_context(|| format!("starting backend `{cmd}`"))
    } else {
        let addr = args.backend.backend_tcp.as_deref().expect("clap enforces one backend");
        ProtocolClient::connect_tcp(addr, options).with_context(|| format!("connecting to backend at {addr}"))
    }
}

fn cmd_generate(args: &GenerateArgs) -> u8 {
    let mut score = match args.score.load() {
        Ok(s) => s,
        Err(code) => return code,
    };
    if let Some(seed) = args.seed {
        score.sampling.seed = seed;
    }
    if args.backend.inprocess {
        return run_generation(args, &score, MockBackend::default());
    }
    match connect(args) {
        Ok(mut client) => {
            let code = run_generation(args, &score, &mut client);
            if let Some(path) = &args.transcript {
                let mut text = client.take_transcript().join("\n");
                text.push('\n');
                if let Err(e) = fs::write(path, text) {
                    eprintln!("error: writing transcript {}: {e}", path.display());
                    return code.max(EXIT_BACKEND);
                }
            }
            code
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            EXIT_BACKEND
        }
    }
}

fn write_stream(args: &GenerateArgs, result: &GenerationResult, info: &BackendInfo) -> anyhow::Result<()> {
    let mut out = open_output(&args.out).with_context(|| format!("opening {}", args.out.display()))?;
    match args.format {
        Format::Jsonl => write_jsonl(result, &mut out)?,
        Format::Bin => write_binary(&result.frames, info, &mut out)?,
    }
    out.flush()?;
    Ok(())
}

fn render_path(args: &GenerateArgs) -> Option<PathBuf> {
    match &args.render {
        None => None,
        Some(Some(path)) => Some(path.clone()),
        Some(None) if is_stdio(&args.out) => Some(PathBuf::from("segue.wav")),
        Some(None) => Some(args.out.with_extension("wav")),
    }
}

fn run_generation<B: Backend>(args: &GenerateArgs, score: &Score, mut backend: B) -> u8 {
    let info = backend.info().clone();
    if let Err(e) = compile_score(score, info.frame_rate, &args.score.validation()) {
        eprintln!("error: {e}");
        return EXIT_VALIDATION;
    }
    let options = GenerateOptions {
        priming_horizon: args.priming_horizon,
        validation: args.score.validation(),
        ..GenerateOptions::default()
    };
    let per_second = info.frame_rate.round().max(1.0) as usize;
    let mut progress = |p: Progress| {
        if !args.quiet && (p.frame.is_multiple_of(per_second) || p.frame == p.total_frames) {
            eprintln!(
                "generated {:.1} / {:.1} s",
                p.frame as f64 / info.frame_rate,
                p.total_frames as f64 / info.frame_rate
            );
        }
    };

    let (result, failure) = match generate(score, &mut backend, &options, Some(&mut progress)) {
        Ok(r) => (r, None),
        Err(Error::Aborted { partial, source }) => (*partial, Some(*source)),
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_BACKEND;
        }
    };

    if let Err(e) = write_stream(args, &result, &info) {
        eprintln!("error: writing token stream: {e:#}");
        return EXIT_BACKEND;
    }
    print_summary(&result, &info);
    if let Some(source) = failure {
        eprintln!("error: backend failed: {source}");
        eprintln!(
            "truncated: output holds the first {} frames ({:.2} s)",
            result.frames.len(),
            result.frames.len() as f64 / info.frame_rate
        );
        return EXIT_BACKEND;
    }

    if let Some(path) = render_path(args) {
        if !info.supports_decode {
            eprintln!("warning: backend {} cannot decode audio; --render skipped", info.name);
        } else {
            match backend.decode(&result.frames, &path) {
                Ok(audio) => eprintln!(
                    "rendered {} ({:.3} s at {} Hz)",
                    audio.path.display(),
                    audio.duration_seconds,
                    audio.sample_rate
                ),
                Err(e) => {
                    eprintln!("error: decode failed: {e}");
                    return EXIT_BACKEND;
                }
            }
        }
    }
    0
}

fn print_summary(result: &GenerationResult, info: &BackendInfo) {
    let s = &result.stats;
    eprintln!(
        "frames {} ({:.2} s), logits queries {}, appends {}, contexts {}",
        result.frames.len(),
        result.frames.len() as f64 / info.frame_rate,
        s.logits_queries,
        s.appends,
        s.contexts_opened
    );
    for w in &s.windows {
        eprintln!(
            "window {} -> {}: frames {}..{}, mean entropy {:.3} nats",
            w.transition,
            w.transition + 1,
            w.start,
            w.start + w.len,
            w.mean_entropy
        );
    }
}

fn cmd_plan(args: &PlanArgs) -> u8 {
    let request = PlanRequest {
        description: args.description.clone(),
        total_duration_seconds: args.duration,
        max_segments: args.max_segments,
        endpoint: args.endpoint.clone(),
        model: args.model.clone(),
        api_key: args.api_key.clone().filter(|k| !k.is_empty()),
    };
    if args.dry_run {
        return match dry_run(&request) {
            Ok(()) => 0,
            Err(e) => {
                eprintln!("error: {e:#}");
                EXIT_PLANNER
            }
        };
    }
    let plan = match planner::plan(&request, HttpTransport::default()) {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_PLANNER;
        }
    };
    for w in &plan.warnings {
        eprintln!("warning: {w}");
    }
    if plan.requests > 1 {
        eprintln!("note: the first reply needed a repair round-trip");
    }
    let score = if args.clamp {
        planner::clamp_plan(&plan.score, args.duration)
    } else {
        plan.score
    };
    let written = open_output(&args.out).and_then(|mut out| {
        out.write_all(&save_score(&score))?;
        out.flush()
    });
    match written {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: writing {}: {e}", args.out.display());
            EXIT_PLANNER
        }
    }
}

fn dry_run(request: &PlanRequest) -> anyhow::Result<()> {
    request.check_inputs()?;
    let body = planner::build_request(request);
    let shown = serde_json::json!({
        "url": request.completions_url()?,
        "authorization": if request.api_key.is_some() { "Bearer <redacted>" } else { "none" },
        "template": planner::PROMPT_TEMPLATE_VERSION,
        "body": body,
    });
    let mut out = io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, &shown)?;
    writeln!(out)?;
    Ok(())
}
