//! `shuntgate` command-line client.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use shuntgate_client::{Client, ClientError};
use shuntgate_core::api::*;
use shuntgate_core::backends::{Dataset, SimulatedOracleConfig};
use shuntgate_core::distillation::DistillationPlan;
use shuntgate_core::harness::{
    ingest as read_dataset, seed_from_env, write_dataset, ExperimentConfig, ObjectiveSpec, RecordFormat, SplitName,
    SyntheticTaskSpec,
};
use shuntgate_core::metrics::EvaluationReport;
use shuntgate_core::router::RoutingOutcome;
use shuntgate_core::{ErrorKind, ShuntError};
use shuntgate_server::ServerConfig;

#[derive(Parser)]
#[command(name = "shuntgate", version, about = "Confidence-based small/large model cascade")]
struct Cli {
    /// Service root URL. Without it an in-process server is started.
    #[arg(long, global = true, env = "SHUNTGATE_SERVER")]
    server: Option<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the HTTP service.
    Serve(ServeArgs),
    /// Validate a JSONL/CSV record file and write it back out normalized.
    Ingest {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        format: Option<Format>,
        #[arg(long)]
        output: PathBuf,
    },
    /// Generate a synthetic dataset from a task spec (TOML).
    Synth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Sweep δ over a grid and pick one.
    Calibrate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "0.85:0.99:0.01")]
        grid: String,
        #[arg(long, value_enum, default_value_t = Objective::MatchLarge)]
        objective: Objective,
        #[arg(long)]
        target: Option<f64>,
        #[arg(long, value_enum)]
        split: Option<Split>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Train the learnable small model from a distillation plan.
    Distill {
        /// Plan JSON (as written by `run`). Built from `--config` when absent.
        #[arg(long, required_unless_present = "config")]
        plan: Option<PathBuf>,
        #[arg(long, conflicts_with = "plan")]
        config: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        /// `large:self` mini-batch ratio.
        #[arg(long)]
        ratio: Option<String>,
        /// Learnable checkpoint destination.
        #[arg(long, default_value = "learnable.ckpt.json")]
        output: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Route records through the cascade and write one outcome per line.
    Route {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Score outcomes against gold labels.
    Report {
        #[arg(long)]
        outcomes: PathBuf,
        #[arg(long)]
        gold: PathBuf,
        #[arg(long, value_enum, default_value_t = ReportFormat::Table)]
        format: ReportFormat,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Run a full experiment into a fresh run directory.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "runs")]
        out_dir: PathBuf,
    },
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:7878")]
    addr: SocketAddr,
    /// Accuracy of the simulated model behind /v1/classify.
    #[arg(long, default_value_t = 0.9)]
    oracle_accuracy: f64,
    #[arg(long, default_value_t = 0)]
    oracle_seed: u64,
    /// Records whose gold labels the simulated model may consult.
    #[arg(long)]
    gold: Option<PathBuf>,
    #[arg(long, default_value = "runs")]
    runs_root: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Jsonl,
    Csv,
}

impl From<Format> for RecordFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Jsonl => RecordFormat::Jsonl,
            Format::Csv => RecordFormat::Csv,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Objective {
    MatchLarge,
    MaxAccuracy,
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Validation,
}

#[derive(Clone, Copy, ValueEnum)]
enum ReportFormat {
    Table,
    Jsonl,
}

#[derive(Debug)]
enum CliError {
    Core(ShuntError),
    Client(ClientError),
}

impl From<ShuntError> for CliError {
    fn from(e: ShuntError) -> Self {
        CliError::Core(e)
    }
}

impl From<ClientError> for CliError {
    fn from(e: ClientError) -> Self {
        CliError::Client(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(e.into())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Core(e.into())
    }
}

impl CliError {
    fn kind(&self) -> ErrorKind {
        match self {
            CliError::Core(e) => e.kind(),
            CliError::Client(e) => e.kind(),
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Core(e) => e.fmt(f),
            CliError::Client(e) => e.fmt(f),
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn".into()))
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    let rt = match tokio::runtime::Builder::new_multi_thread().enable_all().build() {
        Ok(rt) => rt,
        Err(e) => {
            eprintln!("error: cannot start runtime: {e}");
            return ExitCode::from(1);
        }
    };
    match rt.block_on(dispatch(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.kind().exit_code() as u8)
        }
    }
}

async fn connect(server: Option<String>) -> Result<Client> {
    match server {
        Some(url) => Ok(Client::new(url)?),
        None => {
            let addr = shuntgate_server::spawn_local(ServerConfig::default()).await?;
            Ok(Client::new(format!("http://{addr}"))?)
        }
    }
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| ShuntError::config(format!("{}: {e}", path.display())).into())
}

fn load_config(path: &Path) -> Result<ExperimentConfig> {
    if !path.exists() {
        return Err(ShuntError::config(format!("{}: no such file", path.display())).into());
    }
    Ok(ExperimentConfig::load(path)?)
}

fn load_dataset(path: &Path, format: Option<Format>) -> Result<Dataset> {
    let format = match format {
        Some(f) => f.into(),
        None => RecordFormat::from_path(path)?,
    };
    if !path.exists() {
        return Err(ShuntError::config(format!("{}: no such file", path.display())).into());
    }
    Ok(read_dataset(path, format)?)
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn read_outcomes(path: &Path) -> Result<Vec<RoutingOutcome>> {
    let text = read_text(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(line).map_err(|e| ShuntError::Record {
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

fn render(report: &EvaluationReport, format: ReportFormat) -> Result<String> {
    Ok(match format {
        ReportFormat::Table => report.to_table(),
        ReportFormat::Jsonl => report.to_jsonl()?,
    })
}

async fn dispatch(cli: Cli) -> Result<()> {
    let server = cli.server;
    match cli.command {
        Command::Serve(args) => serve(args).await,
        Command::Ingest { input, format, output } => {
            let format = match format {
                Some(f) => f.into(),
                None => RecordFormat::from_path(&input)?,
            };
            let content = read_text(&input)?;
            let client = connect(server).await?;
            let data = client.ingest(&IngestRequest { format, content }).await?.samples;
            write_dataset(
                &data,
                &output,
                RecordFormat::from_path(&output).unwrap_or(RecordFormat::Jsonl),
            )?;
            println!("{} records written to {}", data.len(), output.display());
            Ok(())
        }
        Command::Synth { spec, output } => {
            let text = read_text(&spec)?;
            let mut task: SyntheticTaskSpec =
                toml::from_str(&text).map_err(|e| ShuntError::config(format!("{}: {e}", spec.display())))?;
            if let Some(seed) = seed_from_env()? {
                task.seed = seed;
            }
            let client = connect(server).await?;
            let data = client.synth(&SynthRequest { task }).await?.samples;
            write_dataset(
                &data,
                &output,
                RecordFormat::from_path(&output).unwrap_or(RecordFormat::Jsonl),
            )?;
            println!("{} samples written to {}", data.len(), output.display());
            Ok(())
        }
        Command::Calibrate {
            config,
            grid,
            objective,
            target,
            split,
            output,
        } => {
            let config = load_config(&config)?;
            let client = connect(server).await?;
            let result = client
                .calibrate(&CalibrateRequest {
                    config,
                    grid,
                    objective: match objective {
                        Objective::MatchLarge => ObjectiveSpec::MatchLarge,
                        Objective::MaxAccuracy => ObjectiveSpec::MaxAccuracy,
                    },
                    target,
                    split: split.map(|s| match s {
                        Split::Train => SplitName::Train,
                        Split::Validation => SplitName::Validation,
                    }),
                })
                .await?;
            println!("{:>7}  {:>9}  {:>9}", "delta", "accuracy", "query");
            for p in &result.sweep {
                println!(
                    "{:>7.4}  {:>8.2}%  {:>8.2}%",
                    p.delta,
                    p.accuracy * 100.0,
                    p.query_proportion * 100.0
                );
            }
            let note = if result.met { "" } else { " (objective not met)" };
            println!("chosen delta {}{note}", result.chosen_delta);
            if let Some(path) = output {
                write_json(&path, &result)?;
            }
            Ok(())
        }
        Command::Distill {
            plan,
            config,
            epochs,
            ratio,
            output,
            report,
        } => {
            let client = connect(server).await?;
            let plan: DistillationPlan = match (plan, config) {
                (Some(p), _) => serde_json::from_str(&read_text(&p)?)?,
                (None, Some(c)) => {
                    client
                        .partition(&PartitionRequest {
                            config: load_config(&c)?,
                        })
                        .await?
                }
                (None, None) => return Err(ShuntError::config("either --plan or --config is required").into()),
            };
            let out = client.distill(&DistillRequest { plan, epochs, ratio }).await?;
            write_json(&output, &out.checkpoint)?;
            if let Some(path) = report {
                write_json(&path, &out.report)?;
            }
            let pct = |v: Option<f64>| v.map_or("n/a".to_string(), |a| format!("{:.2}%", a * 100.0));
            println!(
                "epochs {}  easy {} -> {}  hard {} -> {}",
                out.report.epochs_run,
                pct(out.report.easy_accuracy_before),
                pct(out.report.easy_accuracy_after),
                pct(out.report.hard_accuracy_before),
                pct(out.report.hard_accuracy_after),
            );
            println!("checkpoint written to {}", output.display());
            Ok(())
        }
        Command::Route { config, input, output } => {
            let config = load_config(&config)?;
            let input = load_dataset(&input, None)?;
            let client = connect(server).await?;
            let resp = client.route(&RouteRequest { config, input }).await?;
            let mut body = String::new();
            for o in &resp.outcomes {
                body += &serde_json::to_string(o)?;
                body.push('\n');
            }
            std::fs::write(&output, body)?;
            let large = resp.outcomes.iter().filter(|o| !o.tier.is_small()).count();
            println!(
                "routed {} samples at delta {}; {} to the large model",
                resp.outcomes.len(),
                resp.delta,
                large
            );
            Ok(())
        }
        Command::Report {
            outcomes,
            gold,
            format,
            output,
        } => {
            let outcomes = read_outcomes(&outcomes)?;
            let gold = load_dataset(&gold, None)?;
            let client = connect(server).await?;
            let report = client.report(&ReportRequest { outcomes, gold }).await?;
            let text = render(&report, format)?;
            match output {
                Some(p) => std::fs::write(p, text)?,
                None => print!("{text}"),
            }
            Ok(())
        }
        Command::Run { config, out_dir } => {
            let config = load_config(&config)?;
            let out_dir = std::path::absolute(&out_dir)?;
            let client = connect(server).await?;
            let resp = client
                .run(&RunRequest {
                    config,
                    out_dir: Some(out_dir),
                })
                .await?;
            if let Some(r) = &resp.report {
                print!("{}", r.to_table());
            }
            println!("run directory: {}", resp.run_dir.display());
            Ok(())
        }
    }
}

async fn serve(args: ServeArgs) -> Result<()> {
    let mut gold = BTreeMap::new();
    if let Some(path) = &args.gold {
        for s in load_dataset(path, None)?.iter() {
            if let Some(g) = &s.gold_label {
                gold.insert(s.id.clone(), g.clone());
            }
        }
    }
    let config = ServerConfig {
        oracle: SimulatedOracleConfig::with_accuracy(args.oracle_accuracy, args.oracle_seed),
        gold,
        runs_root: args.runs_root,
    };
    let listener = tokio::net::TcpListener::bind(args.addr).await?;
    eprintln!("listening on http://{}", listener.local_addr()?);
    shuntgate_server::serve(listener, config, async {
        let _ = tokio::signal::ctrl_c().await;
    })
    .await?;
    Ok(())
}
