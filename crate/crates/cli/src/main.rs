use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use odflow::nn::CellKind;
use odflow::pipeline::{Pipeline, PipelineConfig, Stage, StageStatus};

/// Travel-flow clustering, NMF compression and demand forecasting pipeline.
#[derive(Debug, Parser)]
#[command(name = "odflow", version)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Global {
    /// Pipeline config (JSON). Defaults are used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Artifact directory.
    #[arg(long, global = true, default_value = "odflow-out")]
    out: PathBuf,
    /// Replace every seed in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Window length; the input length is reset to cover three hours.
    #[arg(long = "window-min", global = true, value_parser = ["60", "30"])]
    window_min: Option<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate (or import) trips, weather and holidays.
    Generate,
    /// Cluster training trips into flows.
    Cluster,
    /// Count trips per flow and window.
    Aggregate,
    /// Fit NMF on training counts and project the test span.
    Decompose,
    /// Train the forecasting models.
    Train,
    /// Predict the test span and score every model.
    Evaluate,
    /// Write comparison tables, traces and charts.
    Compare,
    /// Run all stages in order.
    Run,
    /// Input-length sweep over recurrent cell kinds.
    Sweep {
        /// Input lengths in windows.
        #[arg(long, value_delimiter = ',', default_values_t = [1usize, 2, 3, 4, 5, 6, 7, 8, 9])]
        lengths: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_values = ["rnn", "lstm", "gru"])]
        cells: Vec<CellKind>,
    },
    /// Weather/time feature ablation.
    Ablation {
        #[arg(long, value_delimiter = ',', default_values = ["rnn", "lstm", "gru"])]
        cells: Vec<CellKind>,
    },
    /// Print the effective config as JSON.
    ShowConfig,
}

fn load_config(g: &Global) -> Result<PipelineConfig> {
    let mut cfg = match &g.config {
        Some(p) => PipelineConfig::load(p).with_context(|| format!("reading config {}", p.display()))?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = g.seed {
        cfg.set_seed(seed);
    }
    if let Some(w) = &g.window_min {
        cfg.set_window(w.parse()?);
    }
    Ok(cfg)
}

fn report(stage: Stage, status: StageStatus) {
    let verb = match status {
        StageStatus::Ran => "done",
        StageStatus::Skipped => "up to date",
    };
    println!("{stage}: {verb}");
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli.global)?;
    if let Command::ShowConfig = cli.command {
        println!("{}", serde_json::to_string_pretty(&cfg)?);
        return Ok(());
    }
    let pipeline = Pipeline::new(&cli.global.out, cfg).context("invalid config")?;
    let single = |stage: Stage| -> Result<()> {
        report(stage, pipeline.run_stage(stage)?);
        Ok(())
    };
    match cli.command {
        Command::Generate => single(Stage::Generate)?,
        Command::Cluster => single(Stage::Cluster)?,
        Command::Aggregate => single(Stage::Aggregate)?,
        Command::Decompose => single(Stage::Decompose)?,
        Command::Train => single(Stage::Train)?,
        Command::Evaluate => single(Stage::Evaluate)?,
        Command::Compare => {
            single(Stage::Compare)?;
            let table = pipeline
                .root()
                .join(format!("compare/metrics_{}min.csv", pipeline.config().experiment.window_minutes));
            print!("{}", std::fs::read_to_string(&table)?);
        }
        Command::Run => {
            for stage in Stage::ALL {
                single(stage)?;
            }
        }
        Command::Sweep { lengths, cells } => {
            if lengths.is_empty() || cells.is_empty() {
                bail!("sweep needs at least one length and one cell kind");
            }
            let rows = pipeline.sweep(&lengths, &cells)?;
            println!("lag,cell,mape_at_1,mse,mae");
            for r in rows {
                let mape = r.mape_at_1.map(|v| format!("{v:.3}")).unwrap_or_default();
                println!("{},{},{mape},{:.5},{:.5}", r.lag, r.cell, r.mse, r.mae);
            }
        }
        Command::Ablation { cells } => {
            let rows = pipeline.ablation(&cells)?;
            println!("cell,features,mape_at_1,mse,mae");
            for r in rows {
                let mape = r.mape_at_1.map(|v| format!("{v:.3}")).unwrap_or_default();
                println!("{},{},{mape},{:.5},{:.5}", r.cell, r.features, r.mse, r.mae);
            }
        }
        Command::ShowConfig => unreachable!("handled above"),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
