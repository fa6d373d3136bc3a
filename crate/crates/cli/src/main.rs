use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::info;

use molal::dataio::{write_csv, Dataset, TaskType};
use molal::harness::{self, DatasetSpec, ExperimentConfig};
use molal::Result;

#[derive(Parser)]
#[command(name = "molal", version, about = "Pool-based active learning for molecular property prediction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct DataArgs {
    /// CSV with a `smiles` column and one column per label.
    csv: PathBuf,
    /// classification, multi or regression.
    #[arg(long = "schema")]
    task: TaskType,
    /// Comma-separated label columns (default: every non-SMILES column).
    #[arg(long, value_delimiter = ',')]
    labels: Vec<String>,
}

impl DataArgs {
    fn spec(&self) -> DatasetSpec {
        DatasetSpec {
            path: self.csv.clone(),
            task_type: self.task,
            label_columns: self.labels.clone(),
            split: None,
            ratios: [0.8, 0.1, 0.1],
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Validate a CSV and print a summary; optionally write the cleaned table.
    Ingest {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Scaffold split written as JSON.
    Split {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, value_delimiter = ',', default_values_t = [0.8, 0.1, 0.1])]
        ratios: Vec<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Every (strategy, seed, pool) run of an experiment; completed runs are skipped.
    Run {
        config: PathBuf,
        /// Concurrent runs; overrides MOLAL_WORKERS.
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Learning curves of every record in a results directory.
    Plot { dir: PathBuf },
    /// Diversity and informativeness table of a results directory.
    Analyze { dir: PathBuf },
}

fn summary(d: &Dataset) -> serde_json::Value {
    serde_json::json!({
        "molecules": d.len(),
        "task_type": d.schema.task_type,
        "labels": d.schema.columns,
        "hash": d.hash(),
    })
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").map_err(|e| molal::Error::Invalid(format!("{}: {e}", path.display())))
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Ingest { data, out } => {
            let d = harness::load_dataset(&data.spec())?;
            if let Some(out) = out {
                write_csv(&out, &d.schema, &d.records)?;
            }
            println!("{}", summary(&d));
        }
        Command::Split { data, ratios, out } => {
            let [a, b, c] = ratios[..] else {
                return Err(molal::Error::Config("--ratios takes three values".into()));
            };
            let spec = DatasetSpec {
                ratios: [a, b, c],
                ..data.spec()
            };
            let d = harness::load_dataset(&spec)?;
            let split = harness::load_split(&spec, &d)?;
            write_json(&out, &serde_json::to_value(&split)?)?;
            println!(
                "{}",
                serde_json::json!({
                    "train": split.train.len(),
                    "val": split.val.len(),
                    "test": split.test.len(),
                    "hash": d.hash(),
                })
            );
        }
        Command::Run { config, workers } => {
            let cfg = ExperimentConfig::load(&config)?;
            let workers = workers.unwrap_or_else(harness::workers_from_env);
            let s = harness::run_experiment(&cfg, workers)?;
            info!("{} runs completed, {} skipped", s.completed.len(), s.skipped.len());
            for p in &s.completed {
                println!("{}", p.display());
            }
        }
        Command::Plot { dir } => {
            for p in harness::plot_dir(&dir)? {
                println!("{}", p.display());
            }
        }
        Command::Analyze { dir } => {
            let out = harness::analyze_dir(&dir)?;
            print!("{}", std::fs::read_to_string(&out).unwrap_or_default());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
