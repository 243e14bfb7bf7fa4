use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use hocbf_gp::experiment::benchmark::run_benchmark;
use hocbf_gp::experiment::config::ExperimentConfig;
use hocbf_gp::experiment::validation::{run_validation, Suite};

/// Overrides `output.directory` of a run config.
const OUTPUT_ENV: &str = "HOCBF_OUTPUT_DIR";

#[derive(Parser)]
#[command(name = "hocbf-exp", version, about = "GP-SOCP safety filter experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the nominal, oracle and GP arms of a benchmark config.
    Run {
        config: PathBuf,
        /// Output directory; takes precedence over the config and the environment.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Run property suites and print a JSON report.
    Validate {
        #[arg(value_enum)]
        suite: SuiteArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write the report to this file.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Print a default config.
    PrintDefaults {
        #[arg(value_enum, default_value_t = PlantArg::Acc)]
        plant: PlantArg,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SuiteArg {
    Kernel,
    Solver,
    Decomposition,
    Feasibility,
    All,
}

impl From<SuiteArg> for Suite {
    fn from(s: SuiteArg) -> Self {
        match s {
            SuiteArg::Kernel => Suite::Kernel,
            SuiteArg::Solver => Suite::Solver,
            SuiteArg::Decomposition => Suite::Decomposition,
            SuiteArg::Feasibility => Suite::Feasibility,
            SuiteArg::All => Suite::All,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum PlantArg {
    Acc,
    Suspension,
    Synthetic,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Run { config, output } => run(config, output),
        Command::Validate { suite, seed, report } => validate(suite.into(), seed, report),
        Command::PrintDefaults { plant } => {
            let cfg = match plant {
                PlantArg::Acc => ExperimentConfig::acc_default(),
                PlantArg::Suspension => ExperimentConfig::suspension_default(),
                PlantArg::Synthetic => ExperimentConfig::synthetic_default(),
            };
            match cfg.to_toml() {
                Ok(text) => {
                    print!("{text}");
                    ExitCode::SUCCESS
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::from(1)
                }
            }
        }
    }
}

fn run(config: PathBuf, output: Option<PathBuf>) -> ExitCode {
    let cfg = match ExperimentConfig::load(&config) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("error: {}: {e}", config.display());
            return ExitCode::from(2);
        }
    };
    let dir = output
        .or_else(|| std::env::var_os(OUTPUT_ENV).filter(|v| !v.is_empty()).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(&cfg.output.directory));
    match run_benchmark(&cfg, &dir) {
        Ok(summary) => {
            match serde_json::to_string_pretty(&summary) {
                Ok(text) => println!("{text}"),
                Err(e) => eprintln!("error: {e}"),
            }
            eprintln!("artifacts written to {}", dir.display());
            if summary.all_complete {
                ExitCode::SUCCESS
            } else {
                eprintln!("error: not every arm completed");
                ExitCode::from(1)
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn validate(suite: Suite, seed: u64, report: Option<PathBuf>) -> ExitCode {
    let rep = match run_validation(suite, seed) {
        Ok(rep) => rep,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    let text = match serde_json::to_string_pretty(&rep) {
        Ok(text) => text,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    println!("{text}");
    if let Some(path) = report {
        if let Err(e) = std::fs::write(&path, &text) {
            eprintln!("error: {}: {e}", path.display());
            return ExitCode::from(1);
        }
    }
    for s in rep.suites.iter().filter(|s| !s.passed) {
        eprintln!("suite {} failed {} of {} cases", s.suite, s.failure_count, s.cases);
        for f in &s.failures {
            eprintln!("  {f}");
        }
    }
    if rep.passed {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    }
}
