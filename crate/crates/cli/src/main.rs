use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fedsim_cli::commands::{execute_gen_data, execute_run, execute_sweep, output_root, run_name, verify_run};
use fedsim_cli::{parse_config, parse_config_str, CliError};

#[derive(Parser)]
#[command(name = "fedsim", version, about = "Deterministic federated optimization simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment into $FEDSIM_OUT/<name>/.
    Run {
        config: PathBuf,
        /// Override a config value, e.g. `--set algorithm.alpha=0.1`.
        #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
        set: Vec<String>,
        /// Output directory name (default: `[run] name` or the file stem).
        #[arg(long)]
        name: Option<String>,
    },
    /// Run one experiment per value of a parameter.
    Sweep {
        config: PathBuf,
        /// alpha, participation, dirichlet_prior, mu_prox or lr.
        #[arg(long)]
        param: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', num_args = 0..)]
        values: Vec<f64>,
        #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
        set: Vec<String>,
        #[arg(long)]
        name: Option<String>,
    },
    /// Generate and dump the federated dataset a config describes.
    GenData {
        config: PathBuf,
        #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
        set: Vec<String>,
        #[arg(long)]
        name: Option<String>,
    },
    /// Re-check the invariants of a finished run directory.
    Verify { dir: PathBuf },
}

fn dispatch(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::Run { config, set, name } => {
            let cfg = parse_config(&config, &set)?;
            let name = name.unwrap_or_else(|| run_name(&cfg, Some(&config)));
            let dir = output_root().join(&name);
            let s = execute_run(&cfg, &name, &dir, &set)?;
            println!(
                "{}: {} rounds, {} comm units, train loss {:.6e}, stationarity {:.3e}",
                dir.display(),
                s.rounds,
                s.comm_units,
                s.final_train_loss,
                s.final_stationarity_norm
            );
        }
        Command::Sweep { config, param, values, set, name } => {
            let text = std::fs::read_to_string(&config).map_err(|e| CliError::Io(format!("{}: {e}", config.display())))?;
            let base = parse_config_str(&text, &set)?;
            let name = name.unwrap_or_else(|| format!("{}-sweep-{param}", run_name(&base, Some(&config))));
            let dir = output_root().join(&name);
            for row in execute_sweep(&text, &set, &param, &values, &name, &dir)? {
                println!(
                    "{param}={}: {}{}",
                    row.value,
                    row.status,
                    if row.best { " (best)" } else { "" }
                );
            }
            println!("{}", dir.join("summary.csv").display());
        }
        Command::GenData { config, set, name } => {
            let cfg = parse_config(&config, &set)?;
            let name = name.unwrap_or_else(|| run_name(&cfg, Some(&config)));
            let shards = execute_gen_data(&cfg, &name, &output_root().join(&name), &set)?;
            println!("{}", shards.display());
        }
        Command::Verify { dir } => {
            let probes = verify_run(&dir)?;
            let mut failed = Vec::new();
            for p in &probes {
                println!(
                    "{:<52} {:>10.3e} (tol {:.1e}) {}",
                    p.name,
                    p.value,
                    p.tolerance,
                    if p.passed() { "PASS" } else { "FAIL" }
                );
                if !p.passed() {
                    failed.push(p.name.clone());
                }
            }
            if !failed.is_empty() {
                return Err(CliError::Verify(failed.join("; ")));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("fedsim: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
