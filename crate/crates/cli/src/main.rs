use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use soft_ocp_cli::{bundled_tasks, output, resolve_config, run, TaskConfig, TaskError};

const EXIT_FAILURE: u8 = 1;
const EXIT_INVALID_CONFIG: u8 = 2;
const EXIT_NOT_CONVERGED: u8 = 3;

#[derive(Parser)]
#[command(
    name = "soft-ocp",
    version,
    about = "Optimal control studies for soft-actuated planar arms"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve a task and write its artifacts.
    Run {
        /// Config file, or the name of a bundled task.
        config: String,
        /// Output directory (overrides `output_dir`).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        max_iter: Option<usize>,
    },
    /// Parse and check a config without solving.
    Validate { config: String },
    /// Print the bundled task names.
    ListTasks,
}

fn load(arg: &str) -> Result<TaskConfig, ExitCode> {
    TaskConfig::load(&resolve_config(arg)).map_err(|e| {
        eprintln!("error: {e}");
        ExitCode::from(EXIT_INVALID_CONFIG)
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::ListTasks => {
            for t in bundled_tasks() {
                println!("{t}");
            }
            ExitCode::SUCCESS
        }
        Command::Validate { config } => match load(&config) {
            Ok(cfg) => {
                println!(
                    "{}: ok ({})",
                    cfg.name,
                    soft_ocp_cli::tasks::kind_label(cfg.kind)
                );
                ExitCode::SUCCESS
            }
            Err(code) => code,
        },
        Command::Run {
            config,
            out,
            seed,
            max_iter,
        } => {
            let mut cfg = match load(&config) {
                Ok(c) => c,
                Err(code) => return code,
            };
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(k) = max_iter {
                cfg.solver.max_iterations = Some(k);
            }
            let dir = out
                .or_else(|| cfg.output_dir.as_ref().map(PathBuf::from))
                .unwrap_or_else(|| PathBuf::from("out").join(&cfg.name));
            let outcome = match run(&cfg) {
                Ok(o) => o,
                Err(TaskError::Config(e)) => {
                    eprintln!("error: {e}");
                    return ExitCode::from(EXIT_INVALID_CONFIG);
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    return ExitCode::from(EXIT_FAILURE);
                }
            };
            if let Err(e) = output::write_all(&outcome, &dir) {
                eprintln!("error: cannot write artifacts to {}: {e}", dir.display());
                return ExitCode::from(EXIT_FAILURE);
            }
            print!("{}", output::summary_txt(&outcome));
            println!("artifacts written to {}", dir.display());
            if outcome.converged {
                ExitCode::SUCCESS
            } else {
                eprintln!("warning: solver did not converge");
                ExitCode::from(EXIT_NOT_CONVERGED)
            }
        }
    }
}
