use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use vpcoil::cli_io::{run, run_fields, Command, RunReport, Scenario};

#[derive(Parser)]
#[command(name = "vpcoil", version, about = "Coil-current optimal control of a Vlasov-Poisson plasma")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Args)]
struct Common {
    /// Scenario file.
    #[arg(long)]
    scenario: PathBuf,
    /// Output directory for all artifacts.
    #[arg(long)]
    out: PathBuf,
    /// Seed for every randomized step, overriding the scenario seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Upper bound on worker threads, also read from VPCOIL_WORKERS. The
    /// computation runs on one thread, so every positive value gives the same output.
    #[arg(long, env = "VPCOIL_WORKERS", default_value_t = 1)]
    workers: usize,
}

#[derive(Subcommand)]
enum Cmd {
    /// Tabulate coil fields and report their divergence.
    Fields {
        /// Scenario file supplying the coil file and table extent.
        #[arg(long, conflicts_with = "coils", required_unless_present = "coils")]
        scenario: Option<PathBuf>,
        /// Coil geometry file.
        #[arg(long)]
        coils: Option<PathBuf>,
        /// Half-width of the tabulation cube.
        #[arg(long = "box", default_value_t = 1.5)]
        half_width: f64,
        /// Table node spacing.
        #[arg(long, default_value_t = 0.25)]
        spacing: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Forward run with the starting control and its diagnostics.
    Simulate(Common),
    /// Run the configured solver and write the control and its log.
    Optimize(Common),
    /// Gradient, conservation, cutoff and KKT checks with a pass/fail report.
    Verify(Common),
    /// Fixed-point sweeps from random starts.
    ProbeUniqueness(Common),
    /// Sampled second-order check at the computed optimum.
    Ssc(Common),
}

fn execute(cmd: Cmd) -> vpcoil::Result<RunReport> {
    let (command, common) = match cmd {
        Cmd::Fields { scenario, coils, half_width, spacing, out } => {
            return match (scenario, coils) {
                (Some(path), _) => run(Command::Fields, &Scenario::load(&path)?, &out, None),
                (None, Some(coils)) => run_fields(&coils, half_width, spacing, &out),
                (None, None) => unreachable!("clap requires one of the two"),
            };
        }
        Cmd::Simulate(c) => (Command::Simulate, c),
        Cmd::Optimize(c) => (Command::Optimize, c),
        Cmd::Verify(c) => (Command::Verify, c),
        Cmd::ProbeUniqueness(c) => (Command::ProbeUniqueness, c),
        Cmd::Ssc(c) => (Command::Ssc, c),
    };
    if common.workers == 0 {
        return Err(vpcoil::Error::Config("worker count must be at least 1".into()));
    }
    let scenario = Scenario::load(&common.scenario)?;
    run(command, &scenario, &common.out, common.seed)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(rep) => {
            for line in &rep.summary {
                println!("{line}");
            }
            let failed = rep.failures();
            if failed.is_empty() {
                ExitCode::SUCCESS
            } else {
                for c in failed {
                    eprintln!("check failed: {} = {:e} (threshold {:e})", c.name, c.value, c.threshold);
                }
                ExitCode::from(1)
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
