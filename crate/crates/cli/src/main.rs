//! `fedda`: command-line client of the simulator service.
//!
//! Without `--server` each invocation starts an in-process service on an
//! ephemeral loopback port and talks to it over HTTP like any other client.

use std::io::Write as _;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context as _};
use clap::{Args, Parser, Subcommand};
use fedda_api::RunRequest;
use fedda_client::{Client, ClientError};
use serde::Serialize;

#[derive(Debug, Parser)]
#[command(
    name = "fedda",
    version,
    about = "Federated divided space-time attention segmentation simulator",
    after_help = "Any other --key=value is a config override and wins over the config file."
)]
struct Cli {
    /// Service URL, e.g. http://127.0.0.1:8080. Without it an embedded
    /// service is started for this invocation.
    #[arg(long, global = true)]
    server: Option<String>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Debug, Clone, Args)]
struct Common {
    /// key=value config file
    #[arg(long)]
    config: Option<PathBuf>,
    /// output directory
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Write a synthetic multi-site dataset and its manifest
    Generate(Common),
    /// Federated training; writes weights and round logs
    Train(Common),
    /// Score saved weights on one site; writes metrics.csv
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// weights file [default: <out>/weights.fdwt]
        #[arg(long)]
        weights: Option<PathBuf>,
        /// site to score [default: the configured target]
        #[arg(long)]
        site: Option<String>,
    },
    /// Finite-difference check of every differentiable op and the model
    Gradcheck(Common),
    /// One training run per (alpha, beta) grid cell; writes sweep.csv
    Sweep(Common),
    /// All eight loss-term toggle combinations; writes ablation.csv
    Ablate(Common),
    /// Site-stratified subject-level fold plan; writes folds.csv
    Folds(Common),
    /// Run the HTTP service in the foreground
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
    },
}

/// Flags clap owns; every other `--key=value` is a config override.
const OWN_FLAGS: [&str; 9] = [
    "config", "out", "seed", "server", "weights", "site", "addr", "help", "version",
];

enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl From<ClientError> for Failure {
    fn from(e: ClientError) -> Self {
        if e.is_usage() {
            Failure::Usage(e.into())
        } else {
            Failure::Runtime(e.into())
        }
    }
}

fn split_overrides(args: impl IntoIterator<Item = String>) -> (Vec<String>, Vec<(String, String)>) {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    for a in args {
        match a.strip_prefix("--").and_then(|s| s.split_once('=')) {
            Some((k, v)) if !OWN_FLAGS.contains(&k) => overrides.push((k.to_string(), v.to_string())),
            _ => rest.push(a),
        }
    }
    (rest, overrides)
}

fn absolute(p: &Path) -> PathBuf {
    std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf())
}

fn request(common: &Common, overrides: &[(String, String)]) -> Result<RunRequest, Failure> {
    let config = match &common.config {
        Some(p) => std::fs::read_to_string(p)
            .with_context(|| format!("cannot read config {}", p.display()))
            .map_err(Failure::Usage)?,
        None => String::new(),
    };
    let mut all = Vec::new();
    if let Some(out) = &common.out {
        all.push(("out".to_string(), absolute(out).display().to_string()));
    }
    if let Some(seed) = common.seed {
        all.push(("seed".to_string(), seed.to_string()));
    }
    // the service may not share our working directory
    all.extend(overrides.iter().map(|(k, v)| match k.as_str() {
        "out" | "data" if !v.is_empty() => (k.clone(), absolute(Path::new(v)).display().to_string()),
        _ => (k.clone(), v.clone()),
    }));
    Ok(RunRequest::new(config, all))
}

fn print_json<T: Serialize>(v: &T) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(v).map_err(|e| Failure::Runtime(e.into()))?;
    println!("{text}");
    Ok(())
}

async fn serve(addr: SocketAddr) -> Result<(), Failure> {
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .with_context(|| format!("cannot bind {addr}"))
        .map_err(Failure::Runtime)?;
    let local = listener.local_addr().map_err(|e| Failure::Runtime(e.into()))?;
    println!("listening on http://{local}");
    let _ = std::io::stdout().flush();
    let shutdown = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    fedda_server::serve(listener, shutdown)
        .await
        .map_err(|e| Failure::Runtime(e.into()))
}

async fn run(cli: Cli, overrides: Vec<(String, String)>) -> Result<(), Failure> {
    if let Cmd::Serve { addr } = cli.cmd {
        if !overrides.is_empty() {
            return Err(Failure::Usage(anyhow!("serve takes no config overrides")));
        }
        return serve(addr).await;
    }
    let client = match &cli.server {
        Some(url) => Client::new(url.clone()),
        None => {
            let (addr, _) = fedda_server::spawn(([127, 0, 0, 1], 0).into())
                .await
                .context("cannot start embedded service")
                .map_err(Failure::Runtime)?;
            Client::new(format!("http://{addr}"))
        }
    };
    match &cli.cmd {
        Cmd::Generate(c) => print_json(&client.generate(&request(c, &overrides)?).await?),
        Cmd::Train(c) => print_json(&client.train(&request(c, &overrides)?).await?),
        Cmd::Evaluate { common, weights, site } => {
            let mut req = request(common, &overrides)?;
            req.weights = weights.as_deref().map(absolute);
            req.site = site.clone();
            print_json(&client.evaluate(&req).await?)
        }
        Cmd::Gradcheck(c) => {
            let r = client.gradcheck(&request(c, &overrides)?).await?;
            println!("{:<28} {:>14} {:>10}  result", "op", "max_rel_error", "tolerance");
            for row in &r.rows {
                let verdict = if row.pass() { "PASS" } else { "FAIL" };
                println!(
                    "{:<28} {:>14.3e} {:>10.0e}  {verdict}",
                    row.op, row.max_rel_error, row.tolerance
                );
            }
            println!("table written to {}", r.file.display());
            if r.pass {
                Ok(())
            } else {
                Err(Failure::Runtime(anyhow!("gradient check failed")))
            }
        }
        Cmd::Sweep(c) => print_json(&client.sweep(&request(c, &overrides)?).await?),
        Cmd::Ablate(c) => print_json(&client.ablate(&request(c, &overrides)?).await?),
        Cmd::Folds(c) => print_json(&client.folds(&request(c, &overrides)?).await?),
        Cmd::Serve { .. } => unreachable!(),
    }
}

fn main() -> ExitCode {
    let (args, overrides) = split_overrides(std::env::args());
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let default_level = if matches!(cli.cmd, Cmd::Serve { .. }) {
        "info"
    } else {
        "warn"
    };
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| default_level.into()))
        .init();
    let rt = match tokio::runtime::Runtime::new() {
        Ok(rt) => rt,
        Err(e) => {
            eprintln!("error: cannot start runtime: {e}");
            return ExitCode::from(2);
        }
    };
    match rt.block_on(run(cli, overrides)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
