use std::fs;
use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use promptseg_bench::{ablation_sweep, generate_records, parse_pairs, run_eval, write_synth_dataset, BackendSpec, RunConfig};
use promptseg_core::ingest::Manifest;
use promptseg_core::sbr::SbrConfig;
use promptseg_core::segmenter::synth::SynthSpec;
use promptseg_service::{AppState, ServiceConfig};

const EXIT_PARTIAL: u8 = 1;
const EXIT_FATAL: u8 = 2;

#[derive(Parser)]
#[command(name = "promptseg", version, about = "Point-prompt segmentation benchmark and annotation tools")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write prompt records for every instance in a manifest.
    Gen(GenArgs),
    /// Evaluate one (P, N) pair.
    Eval(EvalArgs),
    /// Evaluate a grid of (P, N) pairs.
    Sweep(SweepArgs),
    /// Write a synthetic dataset with a manifest.
    Synth(SynthArgs),
    /// Start the annotation service.
    Serve(ServeArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Table,
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory; results go to stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = default_workers())]
    workers: usize,
    /// Resize every image to the canonical 1024x1024 grid.
    #[arg(long)]
    canonical: bool,
}

#[derive(Args)]
struct GenArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, default_value = "1,3")]
    points: String,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, default_value = "baseline")]
    backend: String,
    #[arg(long, default_value = "1,3")]
    points: String,
    #[arg(long, value_enum, default_value = "csv")]
    format: Format,
    /// Treat backend masks that break prompt containment as errors.
    #[arg(long)]
    strict: bool,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, default_value = "baseline")]
    backend: String,
    #[arg(long, default_value = "1,0;1,3;3,0;3,3;5,0;5,3")]
    sweep: String,
    #[arg(long, value_enum, default_value = "csv")]
    format: Format,
    #[arg(long)]
    strict: bool,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 50)]
    images: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 256)]
    side: usize,
    #[arg(long, default_value_t = 8)]
    instances: usize,
    #[arg(long, default_value_t = 14.0)]
    radius_min: f64,
    #[arg(long, default_value_t = 26.0)]
    radius_max: f64,
    #[arg(long, default_value_t = 0.5)]
    contrast: f64,
    #[arg(long, default_value_t = 12.0)]
    noise: f64,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, default_value_t = 8080)]
    port: u16,
    #[arg(long)]
    remote_backend: Option<String>,
    #[arg(long)]
    persist_dir: Option<PathBuf>,
}

fn default_workers() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

fn single_pair(s: &str) -> Result<(usize, usize)> {
    match parse_pairs(s)?.as_slice() {
        [pair] => Ok(*pair),
        _ => bail!("--points takes exactly one P,N pair"),
    }
}

fn run_config(common: &Common, backend: &str, sweep: Vec<(usize, usize)>, strict: bool) -> Result<RunConfig> {
    let mut cfg = RunConfig::new(&common.manifest);
    cfg.backend = backend.parse::<BackendSpec>()?;
    cfg.sbr = SbrConfig { seed: common.seed, ..SbrConfig::default() };
    cfg.sweep = sweep;
    cfg.out = common.out.clone();
    cfg.workers = common.workers;
    cfg.canonical = common.canonical;
    cfg.strict = strict;
    cfg.validate()?;
    Ok(cfg)
}

fn emit(out: Option<&Path>, file: &str, text: &str) -> Result<()> {
    match out {
        Some(dir) => {
            fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            let path = dir.join(file);
            fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
        }
        None => {
            std::io::stdout().write_all(text.as_bytes())?;
            Ok(())
        }
    }
}

fn status(errored: usize) -> u8 {
    if errored > 0 {
        EXIT_PARTIAL
    } else {
        0
    }
}

fn gen(args: &GenArgs) -> Result<u8> {
    let (p, n) = single_pair(&args.points)?;
    let cfg = run_config(&args.common, "baseline", vec![(p, n)], false)?;
    let manifest = Manifest::read(&cfg.manifest)?;
    let (records, failures) = generate_records(&manifest, &cfg.options((p, n)))?;
    let text: String = records.iter().map(|r| r.to_json_line() + "\n").collect();
    emit(cfg.out.as_deref(), "prompts.jsonl", &text)?;
    for f in &failures {
        eprintln!("error: {}: {}", f.image_id, f.reason);
    }
    Ok(status(failures.len()))
}

fn eval(args: &EvalArgs) -> Result<u8> {
    let pair = single_pair(&args.points)?;
    let cfg = run_config(&args.common, &args.backend, vec![pair], args.strict)?;
    let report = run_eval(&cfg, pair)?;
    let (text, ext) = match args.format {
        Format::Csv => (report.to_csv(), "csv"),
        Format::Table => (report.to_text_table(), "txt"),
    };
    emit(cfg.out.as_deref(), &format!("eval_p{}_n{}.{ext}", pair.0, pair.1), &text)?;
    for f in &report.failures {
        eprintln!("error: {}: {}", f.image_id, f.reason);
    }
    Ok(status(report.failures.len()))
}

fn sweep(args: &SweepArgs) -> Result<u8> {
    let cfg = run_config(&args.common, &args.backend, parse_pairs(&args.sweep)?, args.strict)?;
    let table = ablation_sweep(&cfg)?;
    let (text, file) = match args.format {
        Format::Csv => (table.to_csv(), "sweep.csv"),
        Format::Table => (table.to_text_table(), "sweep.txt"),
    };
    emit(cfg.out.as_deref(), file, &text)?;
    if let Some(dir) = &cfg.out {
        fs::write(dir.join("sweep_meta.json"), table.meta_json())?;
    }
    Ok(status(table.total_errored()))
}

fn synth(args: &SynthArgs) -> Result<u8> {
    let spec = SynthSpec {
        side: args.side,
        n_instances: args.instances,
        radius_min: args.radius_min,
        radius_max: args.radius_max,
        contrast: args.contrast,
        noise_sigma: args.noise,
        seed: args.seed,
    };
    let manifest = write_synth_dataset(&args.out, &spec, args.images)?;
    println!("{}", manifest.display());
    Ok(0)
}

fn serve(args: &ServeArgs) -> Result<u8> {
    let config = ServiceConfig {
        remote_backend: args.remote_backend.clone(),
        persist_dir: args.persist_dir.clone(),
        ..ServiceConfig::default()
    };
    let state = AppState::new(&config)?;
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(async {
        let addr = SocketAddr::from(([0, 0, 0, 0], args.port));
        let listener = tokio::net::TcpListener::bind(addr).await.with_context(|| format!("binding {addr}"))?;
        eprintln!("listening on {}", listener.local_addr()?);
        promptseg_service::serve(listener, state).await?;
        Ok::<_, anyhow::Error>(())
    })?;
    Ok(0)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Gen(a) => gen(a),
        Command::Eval(a) => eval(a),
        Command::Sweep(a) => sweep(a),
        Command::Synth(a) => synth(a),
        Command::Serve(a) => serve(a),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_FATAL)
        }
    }
}
