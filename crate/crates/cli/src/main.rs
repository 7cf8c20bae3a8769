use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use otpitch_cli::audio::run_audio_frames;
use otpitch_cli::config::{parse_methods, ExperimentConfig, Scenario};
use otpitch_cli::plots::emit_plot_data;
use otpitch_cli::runner::{read_json, run_simulate, run_sweep, ResultTable};
use otpitch_cli::selftest::run_selftest;
use otpitch_cli::{CliError, Result};

/// Optimal-transport multi-pitch estimation: simulation, Monte-Carlo
/// sweeps, and frame-wise audio analysis.
#[derive(Parser)]
#[command(name = "otpitch", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonArgs {
    /// JSON experiment configuration; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed for reproducible runs.
    #[arg(long)]
    seed: Option<u64>,
    /// Estimator selection: stoch | det | both.
    #[arg(long, default_value = "both")]
    method: String,
    /// Output directory.
    #[arg(long, default_value = "otpitch-out")]
    out: PathBuf,
    /// Trials per sweep point.
    #[arg(long)]
    trials: Option<usize>,
    /// Worker threads for Monte-Carlo trials (default: all cores).
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate one synthetic signal, estimate it, and write all artifacts.
    Simulate(CommonArgs),
    /// Gross-error rate versus SNR.
    SweepSnr(CommonArgs),
    /// Gross-error rate and spectral transport distance versus inharmonicity.
    SweepInharm(CommonArgs),
    /// Gross-error rate versus frequency-grid size.
    SweepGrid(CommonArgs),
    /// Frame-wise pitch tracks for a WAV or CSV recording.
    EstimateAudio {
        /// Input file (.wav mono 16-bit int / 32-bit float, or .csv).
        path: PathBuf,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Re-emit figure CSVs from a completed sweep's output directory.
    EmitPlots {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Run fast internal consistency checks.
    Selftest,
}

fn load_config(common: &CommonArgs, scenario: Scenario) -> Result<ExperimentConfig> {
    let mut config = match &common.config {
        Some(path) => {
            let mut c = ExperimentConfig::load(path)?;
            c.scenario = scenario;
            c
        }
        None => ExperimentConfig::for_scenario(scenario),
    };
    if let Some(seed) = common.seed {
        config.master_seed = seed;
    }
    if let Some(trials) = common.trials {
        config.trials = Some(trials);
    }
    if let Some(jobs) = common.jobs {
        config.jobs = Some(jobs);
    }
    config.validate()?;
    Ok(config)
}

fn sweep(common: &CommonArgs, scenario: Scenario) -> Result<()> {
    let config = load_config(common, scenario)?;
    let methods = parse_methods(&common.method)?;
    let output = run_sweep(&config, &methods)?;
    output.write(&common.out)?;
    emit_plot_data(&output.table, scenario, &common.out)?;
    let timeouts = output.table.rows.iter().filter(|r| r.timed_out).count();
    eprintln!(
        "wrote {} rows to {} ({} timed-out trials)",
        output.table.rows.len(),
        common.out.display(),
        timeouts
    );
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate(common) => {
            let config = load_config(&common, Scenario::SingleRun)?;
            let methods = parse_methods(&common.method)?;
            run_simulate(&config, &methods, &common.out)?;
            eprintln!("wrote simulation artifacts to {}", common.out.display());
            Ok(())
        }
        Command::SweepSnr(common) => sweep(&common, Scenario::SnrSweep),
        Command::SweepInharm(common) => sweep(&common, Scenario::InharmonicitySweep),
        Command::SweepGrid(common) => sweep(&common, Scenario::GridpointSweep),
        Command::EstimateAudio { path, common } => {
            let config = load_config(&common, Scenario::AudioFrames)?;
            let methods = parse_methods(&common.method)?;
            let track = run_audio_frames(&path, &config, &methods, &common.out)?;
            eprintln!(
                "wrote {} frame records to {}",
                track.frames.len(),
                common.out.display()
            );
            Ok(())
        }
        Command::EmitPlots { common } => {
            let table: ResultTable = read_json(&common.out.join("results.json"))?;
            let scenario = table.config.scenario;
            let files = emit_plot_data(&table, scenario, &common.out)?;
            eprintln!("wrote {}", files.join(", "));
            Ok(())
        }
        Command::Selftest => {
            let failures = run_selftest();
            if failures > 0 {
                Err(CliError::Data(format!("{failures} self-test checks failed")))
            } else {
                Ok(())
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
