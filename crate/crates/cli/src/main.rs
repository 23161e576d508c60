use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use perfhom_cli::commands::{load_config, run, Command, Context};

#[derive(Parser)]
#[command(
    name = "perfhom",
    version,
    about = "Homogenization experiments on perforated domains"
)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
    /// Experiment config; the golden configuration when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory, overriding `out` from the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for level-parallel work.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
}

#[derive(Subcommand)]
enum Cmd {
    /// Check the perforation field assumptions.
    GeometryCheck,
    /// Solve the periodic and defect correctors and dump the fields.
    Corrector,
    /// Run the ε-convergence study.
    Study {
        /// Run the rate fit on a synthetic ε² report instead of solving.
        #[arg(long)]
        self_test: bool,
    },
    /// Box Poincaré check and ε-scaling of the constant.
    Poincare,
    /// Every command, then the numbered acceptance criteria.
    All,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let cfg = match load_config(cli.config.as_deref()) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(e.exit_code());
        }
    };
    let (cmd, self_test) = match cli.command {
        Cmd::GeometryCheck => (Command::GeometryCheck, false),
        Cmd::Corrector => (Command::Corrector, false),
        Cmd::Study { self_test } => (Command::Study, self_test),
        Cmd::Poincare => (Command::Poincare, false),
        Cmd::All => (Command::All, false),
    };
    let ctx = Context {
        out: cli.out.unwrap_or_else(|| cfg.out.clone()),
        cfg,
        jobs: cli.jobs.max(1),
        self_test,
    };
    match run(cmd, &ctx) {
        Ok(verdicts) => {
            let mut failed = false;
            for v in &verdicts {
                println!("{v}");
                if !v.pass {
                    eprintln!("check failed: {}", v.name);
                    failed = true;
                }
            }
            if failed {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
