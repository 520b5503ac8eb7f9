use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use constellation::harness::{run_experiment, ExperimentConfig, HarnessError, MetricsReport};
use constellation::replication::CoalescingMode;

#[derive(Parser)]
#[command(name = "constellation", version, about = "Run replicated-middlebox experiments in a simulated WAN")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Toggle {
    On,
    Off,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment and write its metrics report.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the experiment seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory for report.json and CSV tables.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum)]
        coalescing: Option<Toggle>,
    },
    /// Run an experiment and check only that all replicas converged.
    VerifyConvergence {
        #[arg(long)]
        config: PathBuf,
    },
}

const EXIT_CHECK_FAILED: u8 = 1;
const EXIT_CONFIG: u8 = 2;

fn load(path: &Path) -> Result<ExperimentConfig, ExitCode> {
    ExperimentConfig::load(path).map_err(|e| {
        eprintln!("error: {e}");
        ExitCode::from(EXIT_CONFIG)
    })
}

fn run(cfg: &ExperimentConfig) -> Result<constellation::harness::RunOutput, ExitCode> {
    run_experiment(cfg).map_err(|e| {
        eprintln!("error: {e}");
        match e {
            HarnessError::Config(_) => ExitCode::from(EXIT_CONFIG),
            _ => ExitCode::from(EXIT_CHECK_FAILED),
        }
    })
}

fn summary(report: &MetricsReport) {
    println!("experiment: {}", report.experiment);
    println!("seed: {}", report.seed);
    println!("converged: {}", report.converged);
    for (name, ok) in &report.checks {
        println!("check {name}: {}", if *ok { "pass" } else { "FAIL" });
    }
    for f in &report.failures {
        println!("failure: {f}");
    }
    if let Some(l) = &report.leaked {
        println!("leaked packets: measured {} expected {}", l.measured_total, l.expected_total);
    }
    if let Some(c) = &report.coalescing {
        println!(
            "replication bytes: coalesced {} uncoalesced {} ratio {:.2}",
            c.bytes_coalesced, c.bytes_uncoalesced, c.ratio
        );
    }
    println!("replication bytes total: {}", report.total_replication_bytes);
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Run { config, seed, out, coalescing } => {
            let mut cfg = match load(&config) {
                Ok(c) => c,
                Err(code) => return code,
            };
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            match coalescing {
                Some(Toggle::Off) => cfg.coalescing = CoalescingMode::Off,
                Some(Toggle::On) if cfg.coalescing == CoalescingMode::Off => cfg.coalescing = CoalescingMode::Adaptive,
                _ => {}
            }
            let output = match run(&cfg) {
                Ok(o) => o,
                Err(code) => return code,
            };
            summary(&output.report);
            if let Some(dir) = out.or(cfg.output.clone()) {
                if let Err(e) = output.report.write_to(&dir, &output.artifacts) {
                    eprintln!("error: cannot write {}: {e}", dir.display());
                    return ExitCode::from(EXIT_CHECK_FAILED);
                }
                println!("report: {}", dir.join("report.json").display());
            }
            if output.report.all_checks_pass() {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(EXIT_CHECK_FAILED)
            }
        }
        Command::VerifyConvergence { config } => {
            let cfg = match load(&config) {
                Ok(c) => c,
                Err(code) => return code,
            };
            let output = match run(&cfg) {
                Ok(o) => o,
                Err(code) => return code,
            };
            println!("converged: {}", output.report.converged);
            if output.report.converged {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(EXIT_CHECK_FAILED)
            }
        }
    }
}
