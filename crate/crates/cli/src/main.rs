use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use shortcut_lab::config::RunConfig;
use shortcut_lab::error::{LabError, Result, EXIT_OK};
use shortcut_lab::pipeline::{evaluate_checkpoint, Pipeline, Stage, StageStatus, CONFIG};

/// Shortcut-learning lab: generate data, find shortcuts, train debiased
/// classifiers and report on them.
#[derive(Debug, Parser)]
#[command(name = "shortcut-lab", version)]
struct Cli {
    /// TOML config; defaults to the run directory's snapshot, then built-ins.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set debias.lambda=0.5`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Run directory; relative paths resolve under $SHORTCUT_LAB_RUN_ROOT.
    #[arg(long, default_value = "run", global = true)]
    run_dir: PathBuf,
    /// Re-run stages even when their artifacts are current.
    #[arg(long, global = true)]
    force: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    GenData,
    TrainId,
    ExtractShortcuts,
    TrainBias,
    TrainDebias,
    /// Accuracy and confidence of a checkpoint on one split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "dev")]
        split: String,
    },
    Analyze,
    /// Every stage in order.
    Run,
}

fn resolve_run_dir(dir: &Path) -> PathBuf {
    match std::env::var_os("SHORTCUT_LAB_RUN_ROOT") {
        Some(root) if dir.is_relative() => PathBuf::from(root).join(dir),
        _ => dir.to_path_buf(),
    }
}

fn load_config(cli: &Cli, run_dir: &Path) -> Result<RunConfig> {
    let snapshot = run_dir.join(CONFIG);
    let path = cli
        .config
        .clone()
        .or_else(|| snapshot.exists().then_some(snapshot));
    RunConfig::load(path.as_deref(), &cli.overrides)
}

fn stages(command: &Command) -> Vec<Stage> {
    match command {
        Command::GenData => vec![Stage::GenData],
        Command::TrainId => vec![Stage::TrainId],
        Command::ExtractShortcuts => vec![Stage::ExtractShortcuts],
        Command::TrainBias => vec![Stage::TrainBias],
        Command::TrainDebias => vec![Stage::TrainDebias],
        Command::Analyze => vec![Stage::Analyze],
        Command::Run => Stage::ALL.to_vec(),
        Command::Eval { .. } => vec![],
    }
}

fn execute(cli: &Cli) -> Result<()> {
    let run_dir = resolve_run_dir(&cli.run_dir);
    let config = load_config(cli, &run_dir)?;
    if let Command::Eval { checkpoint, split } = &cli.command {
        let metrics = evaluate_checkpoint(&run_dir, checkpoint, split, config.data.max_seq_len)?;
        let _ = writeln!(std::io::stdout(), "{}", serde_json::to_string_pretty(&metrics).expect("metrics serialize"));
        return Ok(());
    }
    let mut pipeline = Pipeline::open(&run_dir, config)?;
    for (stage, status) in pipeline.run(&stages(&cli.command), cli.force)? {
        let word = match status {
            StageStatus::Executed => "done",
            StageStatus::Skipped => "up to date",
        };
        eprintln!("{:<18} {word}", stage.name());
    }
    if matches!(cli.command, Command::Analyze | Command::Run) {
        let _ = write!(std::io::stdout(), "{}", pipeline.report()?.summary());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::from(EXIT_OK as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(LabError::exit_code(&e) as u8)
        }
    }
}
