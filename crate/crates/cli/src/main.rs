use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use metaquant_cli::{config, pipeline, report, CliError};

#[derive(Parser)]
#[command(name = "metaquant", version, about = "Hybrid low-bit quantization through a weight-generating hypernetwork")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the stage named in a TOML config. Any key can be overridden with
    /// `--section.key=value`; METAQUANT_OUTPUT_DIR replaces output_dir.
    Run {
        config: PathBuf,
        #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Print the per-layer bitwidths of a search report.
    Report {
        search_json: PathBuf,
        /// Divide bitwidths by this instead of the searched range maximum.
        #[arg(long)]
        q_max: Option<u8>,
        /// Also write the normalized bitwidths as CSV here.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

fn execute(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Run { config: path, overrides } => {
            let cfg = config::load(&path, &config::parse_overrides(&overrides)?)?;
            pipeline::run(&cfg)?;
            eprintln!("artifacts in {}", cfg.output_dir.display());
        }
        Command::Report { search_json, q_max, csv } => {
            let text = std::fs::read_to_string(&search_json).map_err(|source| CliError::Io { path: search_json.clone(), source })?;
            let (table, rows) = report::report_policy(&text, q_max)?;
            print!("{table}");
            if let Some(out) = csv {
                std::fs::write(&out, rows).map_err(|source| CliError::Io { path: out, source })?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
