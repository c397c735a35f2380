//! `virreq`: one binary for every workflow.

mod common;
mod data;
mod eval;
mod kb;
mod probes;
mod requests;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use common::{error_code, Ctx};

#[derive(Parser)]
#[command(name = "virreq", version, about = "Request-driven hierarchical segmentation toolkit")]
struct Cli {
    /// Print one JSON document on stdout instead of text.
    #[arg(long, global = true)]
    json: bool,
    /// Seed for every random choice this invocation makes.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads for per-image stages; defaults to the core count.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Corpus root holding kb/, gt/, images/, bundles/.
    #[arg(long = "data-dir", global = true, env = "VIRREQ_DATA_DIR")]
    data_dir: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Inspect and evolve knowledge-base versions.
    #[command(subcommand)]
    Kb(kb::KbCmd),
    /// Turn a ground-truth tree into its request stream.
    ParseRequests(requests::ParseArgs),
    /// Build trees by issuing requests to a backend.
    Run(requests::RunArgs),
    /// Draw probes from a region.
    SampleProbes(probes::ProbeArgs),
    /// Score predicted trees against ground truth.
    Eval(eval::EvalArgs),
    /// Generate a synthetic corpus.
    Gen(data::GenArgs),
    /// Drop annotations to simulate incomplete labeling.
    Subsample(data::SubsampleArgs),
    /// Start the annotation server.
    Serve(ServeArgs),
}

#[derive(clap::Args)]
struct ServeArgs {
    #[arg(long, default_value_t = 8080)]
    port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    host: std::net::IpAddr,
    /// Data directory; falls back to --data-dir.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Static UI assets to serve at `/`.
    #[arg(long)]
    ui: Option<PathBuf>,
    #[arg(long)]
    cors_origin: Option<String>,
    #[arg(long)]
    no_snapshots: bool,
}

fn serve(ctx: &Ctx, a: ServeArgs) -> anyhow::Result<()> {
    let data = a
        .data
        .or_else(|| ctx.data_dir.clone())
        .ok_or_else(|| common::input("serve needs --data or VIRREQ_DATA_DIR"))?;
    let cfg =
        virreq_server::ServerConfig { data, cors_origin: a.cors_origin, ui_dir: a.ui, snapshots: !a.no_snapshots };
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(virreq_server::serve(cfg, std::net::SocketAddr::new(a.host, a.port)))?;
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("could not size the worker pool: {e}");
        }
    }
    let ctx = Ctx { json: cli.json, seed: cli.seed, data_dir: cli.data_dir };
    let result = match cli.cmd {
        Command::Kb(c) => kb::run(&ctx, c),
        Command::ParseRequests(a) => requests::parse(&ctx, a),
        Command::Run(a) => requests::run(&ctx, a),
        Command::SampleProbes(a) => probes::run(&ctx, a),
        Command::Eval(a) => eval::run(&ctx, a),
        Command::Gen(a) => data::gen(&ctx, a),
        Command::Subsample(a) => data::subsample(&ctx, a),
        Command::Serve(a) => serve(&ctx, a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = error_code(&e);
            if ctx.json {
                let msg = format!("{e:#}");
                println!("{}", serde_json::json!({ "error": { "code": code, "message": msg } }));
            }
            eprintln!("error [{code}]: {e:#}");
            ExitCode::from(1)
        }
    }
}
