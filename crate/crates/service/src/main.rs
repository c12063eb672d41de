use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand};
use milab_core::store::GroupKey;
use milab_service::commands::{self, LabelLevel, SimulateArgs};
use milab_service::config::{Backend, ServiceConfig};
use milab_service::{router, SystemClock};

#[derive(Parser)]
#[command(name = "milab", version, about = "MI session lab: study service and analysis tools")]
struct Cli {
    /// Service/gateway config file (TOML). The API key is read from the environment.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the HTTP session service.
    Serve {
        #[arg(long)]
        bind: Option<String>,
        #[arg(long, value_enum)]
        backend: Option<Backend>,
    },
    /// Self-play sessions between the counsellor and virtual clients.
    Simulate {
        #[arg(long)]
        backstories: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = milab_core::selfplay::DEFAULT_MAX_VOLLEYS)]
        max_volleys: usize,
        /// Directory for one JSON transcript per session.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Defaults to the config file's backend.
        #[arg(long, value_enum)]
        backend: Option<Backend>,
    },
    /// Segment and code transcripts; writes a conversations.csv.
    Annotate {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = milab_core::automisc::DEFAULT_CONTEXT_VOLLEYS)]
        context: usize,
        /// Defaults to the config file's backend.
        #[arg(long, value_enum)]
        backend: Option<Backend>,
    },
    /// %MIC, R:Q and %CT from a labelled conversations.csv.
    Metrics {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Inter-rater agreement from an item_id,rater_id,label CSV.
    Agreement {
        #[arg(long)]
        ratings: PathBuf,
        #[arg(long, value_enum, default_value = "5")]
        level: LabelLevel,
        #[arg(long, default_value_t = 0.05)]
        alpha: f64,
        #[arg(long, default_value_t = 1000)]
        sims: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write the JSON report here.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Ruler, CARE and MISC summaries from a data.csv.
    Report {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        demographics: Option<PathBuf>,
        /// sex, age, ethnicity or employment
        #[arg(long)]
        group_by: Option<GroupKey>,
    },
    /// Write data.csv and conversations.csv from a service journal.
    Export {
        #[arg(long)]
        journal: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        no_redact: bool,
    },
}

fn run(cli: Cli) -> Result<(), Box<dyn std::error::Error>> {
    let mut cfg = match &cli.config {
        Some(p) => ServiceConfig::load(p)?,
        None => ServiceConfig::default(),
    };
    match cli.command {
        Command::Serve { bind, backend } => {
            if let Some(b) = bind {
                cfg.bind = b;
            }
            if let Some(b) = backend {
                cfg.backend = b;
            }
            let state = commands::app_state(&cfg, Arc::new(SystemClock))?;
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(async {
                let listener = tokio::net::TcpListener::bind(&cfg.bind).await?;
                tracing::info!(addr = %cfg.bind, "listening");
                axum::serve(listener, router(state))
                    .with_graceful_shutdown(async {
                        let _ = tokio::signal::ctrl_c().await;
                    })
                    .await
            })?;
        }
        Command::Simulate { backstories, n, seed, max_volleys, out, backend } => {
            let args = SimulateArgs { backstories, n, seed, max_volleys, out };
            for t in commands::simulate(&cfg, backend.unwrap_or(cfg.backend), &args)? {
                println!(
                    "{}\t{} volleys{}",
                    t.participant_id,
                    t.volleys.len(),
                    if t.truncated { "\ttruncated" } else { "" }
                );
            }
        }
        Command::Annotate { input, out, context, backend } => {
            let r = commands::annotate(&cfg, backend.unwrap_or(cfg.backend), &input, &out, context)?;
            println!("annotated {} transcripts, {} rows -> {}", r.annotated, r.rows, out.display());
            for f in &r.failures {
                eprintln!("failed: {f}");
            }
            if !r.failures.is_empty() {
                return Err(format!("{} transcripts failed", r.failures.len()).into());
            }
        }
        Command::Metrics { input, json } => {
            let m = commands::metrics(&input)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&m)?);
            } else {
                print!("{}", commands::render_metrics(&m));
            }
        }
        Command::Agreement { ratings, level, alpha, sims, seed, json } => {
            let r = commands::agreement(&ratings, level, alpha, sims, seed)?;
            let body = serde_json::to_string_pretty(&r)?;
            match json {
                Some(path) => std::fs::write(path, body + "\n")?,
                None => println!("{body}"),
            }
            print!("{}", commands::render_agreement(&r));
        }
        Command::Report { data, out, demographics, group_by } => {
            print!("{}", commands::report(&data, &out, demographics.as_deref(), group_by)?);
        }
        Command::Export { journal, out, no_redact } => {
            let (p, rows) = commands::export(&journal, &out, !no_redact)?;
            println!("{p} participants, {rows} utterance rows -> {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::from_default_env())
        .with_writer(std::io::stderr)
        .init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
