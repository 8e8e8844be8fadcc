use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};
use irda_cli::api::{router, AppState};
use irda_cli::backend::Backends;
use irda_cli::commands::{self, emit_json, exit_code, Invalid, StatsInput};
use irda_cli::manifest::BackendSpec;
use irda_cli::store::Store;
use irda_core::reward::Metric;
use irda_core::stimulus::EnvKind;

#[derive(Parser)]
#[command(
    name = "irda",
    version,
    about = "Reflective dialogue alignment: sessions, studies and statistics"
)]
struct Cli {
    /// Seed for every random choice the command makes.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Env {
    Applefarm,
    Moralmachine,
}

impl From<Env> for EnvKind {
    fn from(e: Env) -> Self {
        match e {
            Env::Applefarm => EnvKind::AppleFarm,
            Env::Moralmachine => EnvKind::MoralMachine,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum BackendKind {
    /// Deterministic, offline.
    Scripted,
    /// OpenAI-compatible endpoint from IRDA_LLM_URL, IRDA_LLM_MODEL, IRDA_LLM_KEY.
    Http,
}

impl BackendKind {
    fn build(self) -> anyhow::Result<Backends> {
        let spec = match self {
            BackendKind::Scripted => BackendSpec::Scripted,
            BackendKind::Http => BackendSpec::Http {
                url: None,
                model: None,
                top_logprobs: None,
                max_attempts: None,
                min_interval_ms: None,
            },
        };
        Ok(Backends::from_spec(&spec)?)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum MetricArg {
    Accuracy,
    BalancedAccuracy,
}

impl From<MetricArg> for Metric {
    fn from(m: MetricArg) -> Self {
        match m {
            MetricArg::Accuracy => Metric::Accuracy,
            MetricArg::BalancedAccuracy => Metric::BalancedAccuracy,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a stimulus pool as JSON lines.
    GenPool {
        #[arg(long, value_enum)]
        env: Env,
        #[arg(long, default_value_t = 60)]
        count: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Cluster a pool and print the representatives.
    Cluster {
        #[arg(long, value_enum)]
        env: Env,
        /// Pool written by gen-pool; generated from the seed when absent.
        #[arg(long)]
        pool: Option<PathBuf>,
        #[arg(long, default_value_t = 60)]
        count: usize,
        /// Defaults to the environment's representative count.
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a simulated study from a manifest and print its report.
    Run {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate both reward models of a finished session directory.
    Evaluate {
        /// Directory holding events.jsonl and labels.json.
        #[arg(long)]
        session: PathBuf,
        #[arg(long, value_enum, default_value = "scripted")]
        backend: BackendKind,
        #[arg(long, value_enum)]
        metric: Option<MetricArg>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Agreement statistics and paired comparisons from a JSON input file.
    Stats {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 10_000)]
        resamples: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Serve the session API.
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long, default_value = "irda-data")]
        data_dir: PathBuf,
        #[arg(long, value_enum, default_value = "scripted")]
        backend: BackendKind,
        /// Bearer token clients must send.
        #[arg(long, env = "IRDA_API_TOKEN", hide_env_values = true)]
        token: Option<String>,
    },
}

fn execute(cli: Cli) -> anyhow::Result<()> {
    let seed = cli.seed.unwrap_or(0);
    match cli.command {
        Command::GenPool { env, count, out } => commands::gen_pool(env.into(), count, seed, out.as_deref()),
        Command::Cluster {
            env,
            pool,
            count,
            k,
            out,
        } => {
            let env = EnvKind::from(env);
            let summary = commands::cluster(env, pool.as_deref(), count, k.unwrap_or(env.default_k()), seed)?;
            emit_json(&summary, out.as_deref())
        }
        Command::Run { manifest, out } => emit_json(&commands::run(&manifest, cli.seed)?, out.as_deref()),
        Command::Evaluate {
            session,
            backend,
            metric,
            out,
        } => emit_json(
            &commands::evaluate(&session, backend.build()?, metric.map(Metric::from))?,
            out.as_deref(),
        ),
        Command::Stats { input, resamples, out } => {
            let text = std::fs::read_to_string(&input).with_context(|| format!("cannot read {}", input.display()))?;
            let parsed: StatsInput = serde_json::from_str(&text).map_err(|e| Invalid(format!("stats input: {e}")))?;
            emit_json(&commands::stats(&parsed, resamples, seed)?, out.as_deref())
        }
        Command::Serve {
            port,
            host,
            data_dir,
            backend,
            token,
        } => {
            let state = AppState {
                store: Arc::new(Store::new(&data_dir, backend.build()?)?),
                token: token.filter(|t| !t.is_empty()),
                default_seed: seed,
            };
            let runtime = tokio::runtime::Runtime::new()?;
            runtime.block_on(async move {
                let listener = tokio::net::TcpListener::bind((host.as_str(), port))
                    .await
                    .with_context(|| format!("cannot bind {host}:{port}"))?;
                eprintln!("irda listening on http://{}", listener.local_addr()?);
                axum::serve(listener, router(state))
                    .with_graceful_shutdown(async {
                        let _ = tokio::signal::ctrl_c().await;
                    })
                    .await?;
                Ok(())
            })
        }
    }
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
