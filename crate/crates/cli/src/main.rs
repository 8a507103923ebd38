use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use rfim_core::output;
use rfim_core::scenario::{load_scenario_or_preset, HarnessError, PRESETS};
use rfim_core::sim::{self, SweepAxis};

/// Photonic RF interference management simulator.
#[derive(Parser)]
#[command(name = "rfim", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario and write a run directory.
    Simulate {
        /// Scenario file, or the name of a bundled preset.
        scenario: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the tuner only and print its result as JSON.
    Tune { scenario: String },
    /// Run the scenario at each value of one parameter.
    Sweep {
        scenario: String,
        /// order, sir_db, interferer_count, center_freq or delay_error; defaults to the scenario's [sweep].
        #[arg(long)]
        axis: Option<String>,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        values: Option<Vec<f64>>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Verify a run or sweep directory and re-render its tables.
    Report { dir: PathBuf },
    /// List bundled presets.
    Presets,
}

fn run(cli: Cli) -> Result<(), HarnessError> {
    match cli.command {
        Command::Simulate { scenario, out } => {
            let s = load_scenario_or_preset(&scenario)?;
            for w in s.validate()? {
                eprintln!("warning: {w}");
            }
            let report = sim::run_simulation(&s)?;
            output::emit_outputs(&report, &out)?;
            print!("{}", output::run_summary(&report));
            println!("wrote {}", out.display());
        }
        Command::Tune { scenario } => {
            let s = load_scenario_or_preset(&scenario)?;
            let result = sim::tune_scenario(&s)?;
            let text = serde_json::to_string_pretty(&result).map_err(|e| HarnessError::Format(e.to_string()))?;
            println!("{text}");
        }
        Command::Sweep {
            scenario,
            axis,
            values,
            out,
        } => {
            let s = load_scenario_or_preset(&scenario)?;
            let (axis, values) = match (axis, values, &s.sweep) {
                (Some(a), Some(v), _) => (a, v),
                (None, None, Some(sw)) => (sw.axis.clone(), sw.values.clone()),
                (Some(a), None, Some(sw)) if a == sw.axis => (a, sw.values.clone()),
                _ => {
                    return Err(HarnessError::Usage(
                        "sweep needs --axis and --values, or a [sweep] table in the scenario".into(),
                    ))
                }
            };
            let axis: SweepAxis = axis.parse()?;
            let reports = sim::run_sweep(&s, axis, &values)?;
            output::emit_sweep(axis, &values, &reports, &out)?;
            print!("{}", output::summary_table(axis, &values, &reports));
            println!("wrote {}", out.display());
        }
        Command::Report { dir } => {
            print!("{}", output::render_report(&dir)?);
        }
        Command::Presets => {
            for (name, _) in PRESETS {
                println!("{name}");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
