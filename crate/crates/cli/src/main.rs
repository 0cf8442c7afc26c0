//! `otseg`: run segmentations locally or through the job service.

mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use otseg_core::pipeline::io::{encode_mask, encode_rgb, encode_scribbles};
use otseg_core::pipeline::synthetic::{two_color, SyntheticSpec};
use otseg_core::transport::{mk_lp_oracle, CostMatrix};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "otseg", version, about = "Two-phase segmentation with optimal transport fidelity")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Segment one image, locally or on a running service (`--server`).
    Run(run::RunArgs),
    /// Reference solvers for testing.
    #[command(subcommand)]
    Oracle(Oracle),
    /// Start the HTTP job service.
    Serve(ServeArgs),
    /// Write a synthetic two-color test instance.
    Synth(SynthArgs),
}

#[derive(Subcommand)]
enum Oracle {
    /// Exact transport cost between two histograms (JSON arrays) under a
    /// cost matrix (JSON array of rows).
    Mk { a: PathBuf, b: PathBuf, cost: PathBuf },
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, default_value_t = otseg_service::DEFAULT_PORT)]
    port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
    #[arg(long, default_value = "otseg-data")]
    data_dir: PathBuf,
    /// Jobs running at once.
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Answer repeated submissions with the earlier job.
    #[arg(long)]
    cache: bool,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 128)]
    width: usize,
    #[arg(long, default_value_t = 128)]
    height: usize,
    #[arg(long, default_value_t = 0.05)]
    noise: f64,
    #[arg(long, default_value_t = 10)]
    stroke: usize,
    /// Add a patch of a color absent from both scribbles.
    #[arg(long)]
    novel: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

/// Failure with its exit code.
pub struct Failure {
    pub code: u8,
    pub message: String,
}

pub const EXIT_OTHER: u8 = 1;
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_SOLVER: u8 = 3;

impl Failure {
    pub fn new(code: u8, message: impl Into<String>) -> Self {
        Self { code, message: message.into() }
    }
}

impl From<otseg_core::Error> for Failure {
    fn from(e: otseg_core::Error) -> Self {
        let code = if e.is_config_error() {
            EXIT_CONFIG
        } else if e.is_solver_abort() {
            EXIT_SOLVER
        } else {
            EXIT_OTHER
        };
        Self::new(code, e.to_string())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Self::new(EXIT_OTHER, e.to_string())
    }
}

/// Applies `OTSEG_THREADS` to the global rayon pool.
fn thread_cap() -> Result<Option<usize>, Failure> {
    let Ok(raw) = std::env::var("OTSEG_THREADS") else { return Ok(None) };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Failure::new(EXIT_CONFIG, format!("OTSEG_THREADS must be a positive integer, got `{raw}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::new(EXIT_OTHER, e.to_string()))?;
    Ok(Some(n))
}

fn runtime(threads: Option<usize>) -> Result<tokio::runtime::Runtime, Failure> {
    let mut builder = tokio::runtime::Builder::new_multi_thread();
    if let Some(n) = threads {
        builder.worker_threads(n);
    }
    Ok(builder.enable_all().build()?)
}

fn read_json<T: serde::de::DeserializeOwned>(path: &PathBuf) -> Result<T, Failure> {
    let bytes = std::fs::read(path).map_err(|e| Failure::new(EXIT_CONFIG, format!("{}: {e}", path.display())))?;
    serde_json::from_slice(&bytes).map_err(|e| Failure::new(EXIT_CONFIG, format!("{}: {e}", path.display())))
}

#[derive(Serialize)]
struct OracleOutput {
    cost: f64,
    plan: Vec<Vec<f64>>,
    u: Vec<f64>,
    v: Vec<f64>,
    pivots: usize,
}

fn oracle_mk(a: &PathBuf, b: &PathBuf, cost: &PathBuf) -> Result<(), Failure> {
    let a: Vec<f64> = read_json(a)?;
    let b: Vec<f64> = read_json(b)?;
    let rows: Vec<Vec<f64>> = read_json(cost)?;
    let cost = CostMatrix::from_rows(&rows)?;
    let sol = mk_lp_oracle(&a, &b, &cost)?;
    let out = OracleOutput {
        cost: sol.cost,
        plan: sol.plan.to_rows(),
        u: sol.potentials.u,
        v: sol.potentials.v,
        pivots: sol.pivots,
    };
    println!("{}", serde_json::to_string(&out).expect("output serializes"));
    Ok(())
}

fn serve(args: &ServeArgs, threads: Option<usize>) -> Result<(), Failure> {
    let cfg = otseg_service::ServiceConfig {
        workers: args.workers,
        cache: args.cache,
        ..otseg_service::ServiceConfig::new(&args.data_dir)
    };
    runtime(threads)?.block_on(async {
        let app = otseg_service::App::open(cfg).map_err(|e| Failure::new(EXIT_CONFIG, e.to_string()))?;
        let listener = tokio::net::TcpListener::bind((args.host.as_str(), args.port)).await?;
        tracing::info!("listening on http://{}", listener.local_addr()?);
        otseg_service::serve(listener, app).await?;
        Ok(())
    })
}

fn synth(args: &SynthArgs) -> Result<(), Failure> {
    let inst = two_color(&SyntheticSpec {
        width: args.width,
        height: args.height,
        noise: args.noise,
        stroke: args.stroke,
        novel_patch: args.novel,
        seed: args.seed,
    })?;
    std::fs::create_dir_all(&args.out)?;
    std::fs::write(args.out.join("image.png"), encode_rgb(&inst.image)?)?;
    std::fs::write(args.out.join("scribbles.png"), encode_scribbles(&inst.scribbles)?)?;
    std::fs::write(args.out.join("truth.png"), encode_mask(&inst.truth, args.width, args.height)?)?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .with_writer(std::io::stderr)
        .init();

    let result = thread_cap().and_then(|threads| match &cli.command {
        Command::Run(args) => run::run(args, threads),
        Command::Oracle(Oracle::Mk { a, b, cost }) => oracle_mk(a, b, cost),
        Command::Serve(args) => serve(args, threads),
        Command::Synth(args) => synth(args),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("otseg: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
