use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use qgda::commands::{self, Overrides};
use qgda::Result;
use qgda_core::filter::Algorithm;

#[derive(Parser)]
#[command(
    name = "qgda",
    version,
    about = "Two-layer channel model twin experiments with particle-filter assimilation"
)]
struct Cli {
    /// TOML experiment configuration; built-in desk defaults otherwise.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Filter seed (overrides the configuration).
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, value_parser = parse_algorithm)]
    algorithm: Option<Algorithm>,
    /// Output directory (overrides the configuration).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Spin the truth model up from rest.
    Spinup,
    /// Truth run on the fine grid, projected and observed.
    Truth,
    /// Synthesise the noise basis and save it.
    XiGen,
    /// Check the noise basis the runs would use.
    XiCheck,
    /// Build and save the initial ensemble.
    InitEnsemble,
    /// Assimilation run plus its free control.
    Assimilate,
    /// Time-mean metrics of a run directory (`--out`).
    Metrics,
    /// Refinement study of the stochastic scheme.
    Convergence,
}

fn parse_algorithm(s: &str) -> std::result::Result<Algorithm, String> {
    s.parse().map_err(|e| format!("{e}"))
}

fn run(cli: Cli) -> Result<()> {
    let ov = Overrides {
        seed: cli.seed,
        algorithm: cli.algorithm,
        out: cli.out.clone(),
    };
    if let Command::Metrics = cli.command {
        let dir = cli
            .out
            .ok_or_else(|| qgda::CliError::Config("metrics needs --out pointing at a run directory".into()))?;
        for (run, metric, mode, mean) in commands::metrics(&dir)? {
            println!("{run:<5} {metric:<6} {mode:<9} {mean:.6}");
        }
        return Ok(());
    }
    let cfg = commands::resolve(cli.config.as_deref(), &ov)?;
    match cli.command {
        Command::Spinup => {
            let path = commands::spinup(&cfg, |line| eprintln!("{line}"))?;
            println!("{}", path.display());
        }
        Command::Truth => println!("truth sha256 {}", commands::truth(&cfg)?),
        Command::XiGen => println!("{}", commands::xi_gen(&cfg)?.display()),
        Command::XiCheck => {
            let c = commands::xi_check(&cfg)?;
            println!(
                "modes {}  divergence {:.3e}  max speed {:.4}",
                c.modes, c.divergence, c.max_speed
            );
        }
        Command::InitEnsemble => println!("mean station spread {:.6} m/s", commands::init_ensemble(&cfg)?),
        Command::Assimilate => println!("{}", commands::assimilate(&cfg)?.display()),
        Command::Convergence => {
            let (stoch, det) = commands::convergence(&cfg)?;
            println!("fitted order: stochastic {stoch:.3}, deterministic {det:.3}");
        }
        Command::Metrics => unreachable!("handled above"),
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
