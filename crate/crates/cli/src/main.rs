//! `loopclose`: atlas management, ingestion, training, adaptation, querying,
//! evaluation and benchmarking from one binary.
//!
//! Exit codes: 0 on success, 1 on a domain error, 2 on a usage error.

mod commands;
mod config;

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{ArgGroup, Args, Parser, Subcommand};
use serde_json::{json, Value};

use config::Settings;

#[derive(Debug, Parser)]
#[command(name = "loopclose", version, about = "Loop-closure detection over a map atlas")]
struct Cli {
    /// `key = value` settings file; explicit flags take precedence.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Machine-readable JSON on stdout, errors included.
    #[arg(long, global = true)]
    json: bool,
    /// Only log errors.
    #[arg(long, global = true)]
    quiet: bool,
    /// Print the effective settings and exit.
    #[arg(long, global = true)]
    print_config: bool,
    /// Leave wall-clock values out of outputs.
    #[arg(long, global = true)]
    no_timestamps: bool,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Create an empty atlas, or a synthetic one with its query set.
    AtlasInit(AtlasInitArgs),
    /// Add one frame to an atlas.
    AtlasAdd(AtlasAddArgs),
    /// Filter, normalize and suppress a keypoint file.
    Ingest(IngestArgs),
    /// Train a network on an atlas.
    Train(TrainArgs),
    /// Grow a trained network by one submap from a few frames.
    Adapt(AdaptArgs),
    /// Rank atlas frames against a query frame.
    Query(QueryArgs),
    /// Score retrieval accuracy over a labelled query set.
    Eval(EvalArgs),
    /// Measure query latency.
    Bench(BenchArgs),
    /// Summarize an atlas, checkpoint, index or keypoint file.
    Inspect(InspectArgs),
}

#[derive(Debug, Args)]
struct AtlasInitArgs {
    dir: PathBuf,
    /// Fill the atlas with generated frames and write a query manifest.
    #[arg(long)]
    synthetic: bool,
    #[arg(long, default_value_t = 8, requires = "synthetic")]
    submaps: usize,
    #[arg(long, default_value_t = 10, requires = "synthetic")]
    frames: usize,
    #[arg(long, default_value_t = 0.1, requires = "synthetic")]
    noise: f64,
}

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("target").required(true).args(["submap", "new_submap"])))]
struct AtlasAddArgs {
    #[arg(long)]
    atlas: PathBuf,
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    keypoints: PathBuf,
    /// Existing submap to extend.
    #[arg(long)]
    submap: Option<usize>,
    /// Start a new submap with this frame.
    #[arg(long)]
    new_submap: bool,
    /// Pose text file: 9 rotation values row-major, then 3 translation values.
    #[arg(long)]
    pose: Option<PathBuf>,
    /// Reference the image by path instead of copying it into the atlas.
    #[arg(long)]
    link: bool,
}

#[derive(Debug, Args)]
struct IngestArgs {
    #[arg(long)]
    keypoints: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Image whose bounds keypoints must fall within.
    #[arg(long)]
    image: Option<PathBuf>,
    #[arg(long)]
    window_px: Option<u32>,
    #[arg(long)]
    min_score: Option<f32>,
    /// NMS neighbourhood: `square` or `circle`.
    #[arg(long)]
    window_shape: Option<String>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    atlas: PathBuf,
    /// Checkpoint to write.
    #[arg(long)]
    out: PathBuf,
    /// Checkpoint to continue from instead of a fresh network.
    #[arg(long)]
    init: Option<PathBuf>,
    /// Epoch log, appended as JSON lines. Defaults to metrics.jsonl beside --out.
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// Train on the first N submaps only.
    #[arg(long)]
    submaps: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    margin: Option<f64>,
    #[arg(long)]
    lambda_cls: Option<f64>,
    #[arg(long)]
    lambda_sim: Option<f64>,
    #[arg(long)]
    augment: bool,
    #[arg(long)]
    val_split: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
}

#[derive(Debug, Args)]
struct AdaptArgs {
    #[arg(long)]
    atlas: PathBuf,
    #[arg(long)]
    net: PathBuf,
    /// The new submap; must be the next class id of the network.
    #[arg(long)]
    submap: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    shots: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    augment: bool,
}

#[derive(Debug, Args)]
struct QueryArgs {
    #[arg(long)]
    atlas: PathBuf,
    #[arg(long)]
    net: PathBuf,
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    keypoints: PathBuf,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    threshold: Option<f64>,
    /// Index cache: loaded when present, otherwise built and written.
    #[arg(long)]
    index: Option<PathBuf>,
}

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("source").required(true).args(["atlas", "loopdb"])))]
struct EvalArgs {
    #[arg(long)]
    atlas: Option<PathBuf>,
    /// LoopDB-style directory holding submap folders and queries.json.
    #[arg(long)]
    loopdb: Option<PathBuf>,
    /// Query manifest; defaults to queries.json inside the atlas.
    #[arg(long, conflicts_with = "loopdb")]
    queries: Option<PathBuf>,
    #[arg(long)]
    net: PathBuf,
    #[arg(long)]
    threshold: Option<f64>,
    /// Dataset label in the table; defaults to the directory name.
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long, default_value = "loopclose")]
    method: String,
}

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("source").required(true).args(["atlas", "entries"])))]
struct BenchArgs {
    #[arg(long)]
    atlas: Option<PathBuf>,
    /// Benchmark against this many random embeddings instead of an atlas.
    #[arg(long)]
    entries: Option<usize>,
    #[arg(long)]
    net: PathBuf,
    #[arg(long)]
    n_queries: Option<usize>,
    /// Fail when the median latency exceeds this many milliseconds.
    #[arg(long)]
    require_median_ms: Option<f64>,
}

#[derive(Debug, Args)]
struct InspectArgs {
    path: PathBuf,
}

#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Domain(String),
}

impl From<loopclose::Error> for Failure {
    fn from(e: loopclose::Error) -> Self {
        Failure::Domain(e.to_string())
    }
}

/// What a command produced: a JSON document and its human rendering.
pub struct Output {
    pub json: Value,
    pub text: String,
}

pub struct Context {
    pub settings: Settings,
    pub timestamps: bool,
}

fn settings_for(cli: &Cli) -> Result<Settings, String> {
    let mut s = Settings::default();
    if let Some(path) = &cli.config {
        s.apply_file(path)?;
    }
    s.apply_flag("seed", cli.seed)?;
    match &cli.command {
        Some(Command::Ingest(a)) => {
            s.apply_flag("window-px", a.window_px)?;
            s.apply_flag("min-score", a.min_score)?;
            s.apply_flag("window-shape", a.window_shape.as_deref())?;
        }
        Some(Command::Train(a)) => {
            s.apply_flag("epochs", a.epochs)?;
            s.apply_flag("lr", a.lr)?;
            s.apply_flag("momentum", a.momentum)?;
            s.apply_flag("batch-size", a.batch_size)?;
            s.apply_flag("margin", a.margin)?;
            s.apply_flag("lambda-cls", a.lambda_cls)?;
            s.apply_flag("lambda-sim", a.lambda_sim)?;
            s.apply_flag("augment", a.augment.then_some(true))?;
            s.apply_flag("val-split", a.val_split)?;
            s.apply_flag("alpha", a.alpha)?;
        }
        Some(Command::Adapt(a)) => {
            s.apply_flag("shots", a.shots)?;
            s.apply_flag("steps", a.steps)?;
            s.apply_flag("lr", a.lr)?;
            s.apply_flag("momentum", a.momentum)?;
            s.apply_flag("augment", a.augment.then_some(true))?;
        }
        Some(Command::Query(a)) => {
            s.apply_flag("k", a.k)?;
            s.apply_flag("threshold", a.threshold)?;
        }
        Some(Command::Eval(a)) => s.apply_flag("threshold", a.threshold)?,
        Some(Command::Bench(a)) => s.apply_flag("n-queries", a.n_queries)?,
        _ => {}
    }
    Ok(s)
}

fn dispatch(command: &Command, ctx: &Context) -> Result<Output, Failure> {
    match command {
        Command::AtlasInit(a) => commands::atlas_init(ctx, &a.dir, a.synthetic.then_some((a.submaps, a.frames, a.noise))),
        Command::AtlasAdd(a) => commands::atlas_add(
            &a.atlas,
            &a.image,
            &a.keypoints,
            a.submap,
            a.pose.as_deref(),
            a.link,
        ),
        Command::Ingest(a) => commands::ingest(ctx, &a.keypoints, &a.out, a.image.as_deref()),
        Command::Train(a) => commands::train(ctx, &a.atlas, &a.out, a.init.as_deref(), a.metrics.as_deref(), a.submaps),
        Command::Adapt(a) => commands::adapt(ctx, &a.atlas, &a.net, a.submap, &a.out),
        Command::Query(a) => commands::query(ctx, &a.atlas, &a.net, &a.image, &a.keypoints, a.index.as_deref()),
        Command::Eval(a) => commands::eval(
            ctx,
            a.atlas.as_deref(),
            a.loopdb.as_deref(),
            a.queries.as_deref(),
            &a.net,
            a.dataset.as_deref(),
            &a.method,
        ),
        Command::Bench(a) => commands::bench(ctx, a.atlas.as_deref(), a.entries, &a.net, a.require_median_ms),
        Command::Inspect(a) => commands::inspect(&a.path),
    }
}

fn emit(text: &str) {
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(text.as_bytes());
    let _ = out.flush();
}

fn emit_json(value: &Value) {
    emit(&(serde_json::to_string_pretty(value).expect("json values serialize") + "\n"));
}

fn fail(json: bool, failure: Failure) -> ExitCode {
    let (kind, message, code) = match failure {
        Failure::Usage(m) => ("usage", m, 2),
        Failure::Domain(m) => ("domain", m, 1),
    };
    if json {
        emit_json(&json!({ "error": { "kind": kind, "message": message } }));
    } else {
        eprintln!("error: {message}");
    }
    ExitCode::from(code)
}

fn run(argv: Vec<String>) -> ExitCode {
    let wants_json = argv.iter().skip(1).any(|a| a == "--json");
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            emit(&e.render().to_string());
            return ExitCode::SUCCESS;
        }
        Err(e) if wants_json => {
            let msg = e.render().to_string();
            let msg = msg.trim_end().trim_start_matches("error: ").to_string();
            return fail(true, Failure::Usage(msg));
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(2);
        }
    };

    let mut logger = env_logger::Builder::new();
    logger
        .filter_level(if cli.quiet { log::LevelFilter::Error } else { log::LevelFilter::Info })
        .parse_default_env();
    if cli.no_timestamps {
        logger.format_timestamp(None);
    }
    let _ = logger.try_init();

    let settings = match settings_for(&cli) {
        Ok(s) => s,
        Err(e) => return fail(cli.json, Failure::Usage(e)),
    };
    if cli.print_config {
        if cli.json {
            emit_json(&serde_json::to_value(&settings).expect("settings serialize"));
        } else {
            emit(&settings.render());
        }
        return ExitCode::SUCCESS;
    }
    let Some(command) = &cli.command else {
        return fail(cli.json, Failure::Usage("a subcommand is required (see --help)".into()));
    };
    let ctx = Context {
        settings,
        timestamps: !cli.no_timestamps,
    };
    match dispatch(command, &ctx) {
        Ok(out) => {
            if cli.json {
                emit_json(&out.json);
            } else {
                emit(&out.text);
            }
            ExitCode::SUCCESS
        }
        Err(f) => fail(cli.json, f),
    }
}

fn main() -> ExitCode {
    run(std::env::args().collect())
}
