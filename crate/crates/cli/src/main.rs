mod interactive;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use thiserror::Error;

use tabletop_agent::config::{BackendSpec, ConfigError, ExperimentConfig, Mode, Scoring, SpecFactory};
use tabletop_agent::harness::{run_experiment, HarnessError};
use tabletop_agent::llm::{EndpointConfig, MockBackend, MockBehavior, MockServer};
use tabletop_agent::memory::{snapshot_from_log, TaskLog};
use tabletop_agent::report::{summary_text, write_comparison, MetricsTable};
use tabletop_agent::tasks::{TaskId, TaskRegistry};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Backend(String),
    #[error("{0}")]
    Internal(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 1,
            CliError::Backend(_) => 2,
            CliError::Internal(_) => 3,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(err: ConfigError) -> Self {
        CliError::Config(err.to_string())
    }
}

#[derive(Parser)]
#[command(name = "tabletop", version, about = "Run and inspect tabletop agent experiments")]
struct Cli {
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment over N trials and write a run directory.
    Run(RunArgs),
    /// Issue task commands by hand and watch each step.
    Interactive(InteractiveArgs),
    /// Merge the reports of one or more run directories.
    Report(ReportArgs),
    /// Print a task log and the state it describes.
    InspectLog(InspectArgs),
    /// Serve the mock model over the chat-completions wire format.
    ServeMock(ServeArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Switch {
    On,
    Off,
}

impl From<Switch> for bool {
    fn from(s: Switch) -> bool {
        matches!(s, Switch::On)
    }
}

/// Flags shared by `run` and `interactive`; each overrides the config file.
#[derive(Args)]
struct ExperimentArgs {
    /// Experiment config file (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    /// mock, mock:forgetful[:N], trace:<file>, openai or local.
    #[arg(long)]
    backend: Option<BackendSpec>,
    #[arg(long, value_enum)]
    memory: Option<Switch>,
    /// Reject replies holding more than one action.
    #[arg(long, value_enum)]
    strict: Option<Switch>,
    /// Model name for remote backends.
    #[arg(long)]
    model: Option<String>,
    /// Base URL for remote backends, e.g. http://127.0.0.1:8000/v1.
    #[arg(long)]
    base_url: Option<String>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    context_tokens: Option<usize>,
    /// Directory with replacement task and inventory fixtures.
    #[arg(long)]
    fixtures: Option<PathBuf>,
}

impl ExperimentArgs {
    fn resolve(&self) -> Result<ExperimentConfig, CliError> {
        let mut config = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(backend) = &self.backend {
            config.backend = backend.clone();
        }
        if let Some(memory) = self.memory {
            config.memory = memory.into();
        }
        if let Some(strict) = self.strict {
            config.strict_single_action = strict.into();
        }
        if self.model.is_some() || self.base_url.is_some() {
            let mut endpoint = config
                .endpoint
                .clone()
                .or_else(|| config.backend.default_endpoint())
                .unwrap_or_else(|| EndpointConfig::new("", ""));
            if let Some(model) = &self.model {
                endpoint.model = model.clone();
            }
            if let Some(url) = &self.base_url {
                endpoint.base_url = url.clone();
            }
            config.endpoint = Some(endpoint);
        }
        if let Some(t) = self.temperature {
            config.params.temperature = t;
        }
        if self.context_tokens.is_some() {
            config.context_tokens = self.context_tokens;
        }
        if self.fixtures.is_some() {
            config.fixtures_dir = self.fixtures.clone();
        }
        Ok(config)
    }
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    experiment: ExperimentArgs,
    #[arg(long)]
    mode: Option<Mode>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Trial worker threads; 0 uses every core.
    #[arg(long)]
    parallelism: Option<usize>,
    #[arg(long)]
    scoring: Option<Scoring>,
    /// Run directory; defaults to runs/<mode>-memory-<on|off>.
    #[arg(long, short)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct InteractiveArgs {
    #[command(flatten)]
    experiment: ExperimentArgs,
    /// Where logs, events and the transcript are saved on exit.
    #[arg(long, short, default_value = "interactive")]
    output: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// Run directories (or report.csv files) to merge.
    #[arg(required = true)]
    runs: Vec<PathBuf>,
    /// Where comparison.csv and summary.txt are written.
    #[arg(long, short, default_value = "report")]
    output: PathBuf,
}

#[derive(Args)]
struct InspectArgs {
    log: PathBuf,
    /// Task the log belongs to; defaults to the file name.
    #[arg(long)]
    task: Option<TaskId>,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:8000")]
    addr: String,
    /// mock or mock:forgetful[:N].
    #[arg(long, default_value = "mock")]
    backend: BackendSpec,
}

fn cmd_run(args: &RunArgs) -> Result<(), CliError> {
    let mut config = args.experiment.resolve()?;
    if let Some(mode) = args.mode {
        config.mode = mode;
    }
    if let Some(trials) = args.trials {
        config.trials = trials;
    }
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(parallelism) = args.parallelism {
        config.parallelism = parallelism;
    }
    if let Some(scoring) = args.scoring {
        config.retention_scoring = scoring;
    }
    config.validate()?;
    let registry = Arc::new(config.registry()?);
    let factory = SpecFactory::new(&config, registry.clone())?;
    let output = args.output.clone().unwrap_or_else(|| {
        PathBuf::from("runs").join(format!(
            "{}-memory-{}",
            config.mode,
            if config.memory { "on" } else { "off" }
        ))
    });
    let result = match run_experiment(&config, registry, &factory, Some(&output)) {
        Ok(result) => result,
        Err(HarnessError::NoValidTrials) => {
            return Err(CliError::Backend(format!(
                "all {} trials were aborted by backend failures",
                config.trials
            )))
        }
        Err(err) => return Err(CliError::Internal(err.to_string())),
    };
    print!("{}", result.table.to_text());
    println!("run directory: {}", output.display());
    match result.invalid_trials() {
        0 => Ok(()),
        n => Err(CliError::Backend(format!(
            "{n} of {} trials were aborted by backend failures",
            config.trials
        ))),
    }
}

fn cmd_report(args: &ReportArgs) -> Result<(), CliError> {
    let tables = args
        .runs
        .iter()
        .map(|path| MetricsTable::read(path).map_err(|e| CliError::Config(e.to_string())))
        .collect::<Result<Vec<_>, _>>()?;
    write_comparison(&tables, &args.output).map_err(|e| CliError::Internal(e.to_string()))?;
    print!("{}", summary_text(&tables));
    println!("comparison written to {}", args.output.display());
    Ok(())
}

fn task_from_path(path: &Path) -> Option<TaskId> {
    path.file_stem()?.to_str()?.parse().ok()
}

fn cmd_inspect(args: &InspectArgs) -> Result<(), CliError> {
    let task = args
        .task
        .or_else(|| task_from_path(&args.log))
        .ok_or_else(|| CliError::Config(format!("cannot tell the task of {}; pass --task", args.log.display())))?;
    let log = TaskLog::read_from(&args.log, task).map_err(|e| CliError::Config(e.to_string()))?;
    println!("{} task, {} entries", task, log.len());
    for (i, entry) in log.entries.iter().enumerate() {
        println!("{:>3}. {}", i + 1, entry.action);
    }
    if let Ok(snapshot) = snapshot_from_log(&log) {
        println!("final state:");
        for (container, labels) in &snapshot.container_contents {
            println!("  {}: {}", container.name(), labels.join(", "));
        }
        println!("  Remaining Objects: {}", snapshot.remaining.join(", "));
    }
    let registry = TaskRegistry::builtin();
    let mut world = registry.load_world(task);
    let replays = log.entries.iter().all(|e| world.apply_in_place(&e.action).is_ok());
    println!(
        "replays against the {} inventory: {}",
        task,
        if replays { "yes" } else { "no" }
    );
    if replays {
        println!("goal holds: {}", if registry.is_complete(task, &world) { "yes" } else { "no" });
    }
    Ok(())
}

fn cmd_serve(args: &ServeArgs) -> Result<(), CliError> {
    let behavior = match &args.backend {
        BackendSpec::Oracle => MockBehavior::Oracle,
        BackendSpec::Forgetful(window) => MockBehavior::Forgetful { window: *window },
        other => return Err(CliError::Config(format!("cannot serve `{other}`; use a mock backend"))),
    };
    let backend = MockBackend::new(behavior, Arc::new(TaskRegistry::builtin()));
    let server = MockServer::start(&args.addr, backend).map_err(|e| CliError::Backend(e.to_string()))?;
    println!("serving {} at {}", args.backend, server.base_url());
    server.join();
    Ok(())
}

fn init_tracing(verbose: u8) {
    let level = match verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::new(level))
        .with_writer(std::io::stderr)
        .try_init();
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            let _ = err.print();
            return if err.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    init_tracing(cli.verbose);
    let result = match &cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Interactive(args) => args.experiment.resolve().and_then(|config| {
            config.validate()?;
            interactive::cmd_interactive(&config, &args.output)
        }),
        Command::Report(args) => cmd_report(args),
        Command::InspectLog(args) => cmd_inspect(args),
        Command::ServeMock(args) => cmd_serve(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code())
        }
    }
}
