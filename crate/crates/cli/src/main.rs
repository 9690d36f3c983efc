use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use greenfed::harness::{default_matrix, export_report, import_report, load_data, run_matrix, setup, ExportFormat};
use greenfed::{run_experiment, ExperimentConfig, Scheduler, Strategy};

#[derive(Parser)]
#[command(name = "greenfed", version, about = "Carbon-aware federated learning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write its report.
    Run {
        #[command(flatten)]
        common: Common,
        /// Output prefix; writes PREFIX.json and PREFIX.csv.
        #[arg(long, default_value = "report")]
        out: PathBuf,
    },
    /// Run a variant matrix and print the comparison table.
    Matrix {
        #[command(flatten)]
        common: Common,
        /// JSON array of configs; defaults to the six standard variants of --config.
        #[arg(long)]
        matrix: Option<PathBuf>,
        /// Output directory for per-run reports and comparison.csv.
        #[arg(long, default_value = "matrix-out")]
        out: PathBuf,
    },
    /// Print a learned Q-table as CSV, from a saved report or a fresh run.
    InspectQ {
        #[command(flatten)]
        common: Common,
        /// Existing JSON report to read instead of running.
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Emit the client data partition as JSON.
    Partition {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Common {
    /// JSON config file; flags below override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long, value_parser = parse_scheduler)]
    scheduler: Option<Scheduler>,
    #[arg(long, value_parser = parse_strategy)]
    strategy: Option<Strategy>,
    #[arg(long)]
    mnist_dir: Option<PathBuf>,
}

fn parse_scheduler(s: &str) -> Result<Scheduler, String> {
    serde_json::from_value(serde_json::Value::String(s.into()))
        .map_err(|_| format!("unknown scheduler '{s}' (rl_green, rl_only, green_only, random)"))
}

fn parse_strategy(s: &str) -> Result<Strategy, String> {
    serde_json::from_value(serde_json::Value::String(s.into()))
        .map_err(|_| format!("unknown strategy '{s}' (fedavg, fedprox, fedadam)"))
}

impl Common {
    fn apply(&self, mut config: ExperimentConfig) -> ExperimentConfig {
        if let Some(seed) = self.seed {
            config.master_seed = seed;
        }
        if let Some(rounds) = self.rounds {
            config.rounds = rounds;
        }
        if let Some(s) = self.scheduler {
            config.scheduler = s;
        }
        if let Some(s) = self.strategy {
            config.strategy = s;
        }
        if let Some(dir) = &self.mnist_dir {
            config.mnist_dir = dir.clone();
        }
        config
    }

    fn load(&self) -> Result<ExperimentConfig> {
        let base = match &self.config {
            Some(path) => {
                let text = read(path)?;
                ExperimentConfig::from_json(&text).with_context(|| format!("parsing {}", path.display()))?
            }
            None => ExperimentConfig::default(),
        };
        Ok(self.apply(base))
    }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn write(path: &Path, body: &str) -> Result<()> {
    fs::write(path, body).with_context(|| format!("writing {}", path.display()))
}

fn emit(out: Option<&Path>, body: &str) -> Result<()> {
    match out {
        Some(path) => write(path, body),
        None => {
            print!("{body}");
            Ok(())
        }
    }
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Run { common, out } => {
            let config = common.load()?;
            let report = run_experiment(&config)?;
            export_report(&report, ExportFormat::Json, &out.with_extension("json"))?;
            export_report(&report, ExportFormat::Csv, &out.with_extension("csv"))?;
            println!(
                "{}: accuracy {:.4}, cumulative CO2 {:.1} g, {:.2} g/round, {:.2} s/round, {:.2} MB exchanged",
                config.label(),
                report.final_accuracy,
                report.cumulative_co2_g,
                report.mean_round_co2_g,
                report.mean_round_time_s,
                report.total_communication_mb
            );
        }
        Command::Matrix { common, matrix, out } => {
            let configs: Vec<ExperimentConfig> = match &matrix {
                Some(path) => {
                    let list: Vec<ExperimentConfig> = serde_json::from_str(&read(path)?)
                        .with_context(|| format!("parsing {}", path.display()))?;
                    list.into_iter().map(|c| common.apply(c)).collect()
                }
                None => default_matrix(&common.load()?),
            };
            if configs.is_empty() {
                bail!("matrix is empty");
            }
            let (reports, table) = run_matrix(&configs)?;
            fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            for (i, report) in reports.iter().enumerate() {
                let stem = format!("{:02}-{}", i, report.config.label().replace(['/', '+'], "-"));
                export_report(report, ExportFormat::Json, &out.join(format!("{stem}.json")))?;
                export_report(report, ExportFormat::Csv, &out.join(format!("{stem}.csv")))?;
            }
            write(&out.join("comparison.csv"), &table.to_csv())?;
            print!("{}", table.render());
        }
        Command::InspectQ { common, report, out } => {
            let report = match &report {
                Some(path) => import_report(path)?,
                None => run_experiment(&common.load()?)?,
            };
            let Some(q) = &report.q_table else {
                bail!("scheduler {} does not learn a Q-table", report.config.scheduler.label());
            };
            emit(out.as_deref(), &q.to_csv())?;
        }
        Command::Partition { common, out } => {
            let config = common.load()?;
            config.validate()?;
            let (train, _) = load_data(&config)?;
            let s = setup(&config, &train)?;
            emit(out.as_deref(), &s.partition.to_json())?;
        }
    }
    Ok(())
}
