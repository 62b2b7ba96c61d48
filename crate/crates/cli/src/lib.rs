//! Experiment runner: TOML configuration, orchestration of the library,
//! run manifests and exporters.

pub mod commands;
pub mod config;
pub mod error;
pub mod export;
pub mod manifest;
pub mod table;

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

pub use commands::{Command, Outcome};
pub use error::CliError;

use config::{Format, Overrides, RunConfig};
use export::{write_format, TableStore};
use manifest::RunManifest;

#[derive(Debug, Parser)]
#[command(name = "kbzakai", version, about = "Riccati filter, Zakai solvers and acceptance checks")]
pub struct Cli {
    /// TOML run configuration, or a manifest.json to replay.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides simulation.seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Overrides output.dir.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Overrides simulation.n_paths.
    #[arg(long, global = true)]
    pub paths: Option<usize>,
    #[arg(long, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub action: Action,
}

#[derive(Debug, Subcommand)]
pub enum Action {
    /// Simulate signal and observation paths.
    Simulate,
    /// Run the Riccati filter along simulated paths.
    Filter,
    /// Solve the Zakai equation on a grid along the first path.
    Zakai,
    /// Compare closed form, grid and particle filters along the first path.
    Compare,
    /// Residual refinement and a-priori ratios for the divergence-form testbed.
    Testbed,
    /// Run the acceptance suite.
    Check,
    /// Re-export the tables of a finished run.
    Export {
        /// Run directory containing manifest.json.
        #[arg(long)]
        run: PathBuf,
        #[arg(long, value_enum)]
        format: Format,
    },
}

/// Loads a TOML configuration or the configuration stored in a manifest.
pub fn load_config(path: &Path) -> Result<RunConfig, CliError> {
    if path.extension().is_some_and(|e| e == "json") {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        let m: RunManifest =
            serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        m.config.ok_or_else(|| CliError::Config(format!("{}: manifest carries no configuration", path.display())))
    } else {
        if !path.exists() {
            return Err(CliError::Usage(format!("config file {} not found", path.display())));
        }
        config::load(path)
    }
}

pub fn run(cli: Cli) -> Result<Option<Outcome>, CliError> {
    let command = match cli.action {
        Action::Simulate => Command::Simulate,
        Action::Filter => Command::Filter,
        Action::Zakai => Command::Zakai,
        Action::Compare => Command::Compare,
        Action::Testbed => Command::Testbed,
        Action::Check => Command::Check,
        Action::Export { run, format } => {
            let manifest = RunManifest::load(&run)?;
            let store = TableStore::load(&run)?;
            let dir = cli.out.unwrap_or(run);
            std::fs::create_dir_all(&dir)?;
            let files = write_format(&dir, &store.tables, &manifest.manifest_id, format)?;
            if !cli.quiet {
                for f in files {
                    println!("{}", dir.join(f).display());
                }
            }
            return Ok(None);
        }
    };
    let config = match &cli.config {
        Some(p) => {
            let mut c = load_config(p)?;
            c.apply(&Overrides { seed: cli.seed, out: None, paths: cli.paths });
            Some(c)
        }
        None => None,
    };
    let outcome = commands::execute(command, config, cli.out.as_deref(), cli.quiet)?;
    if !cli.quiet {
        println!("manifest {} written to {}", outcome.manifest.manifest_id, outcome.dir.display());
    }
    Ok(Some(outcome))
}
