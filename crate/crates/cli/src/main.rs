use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dreamforge_core::dataset::read_dataset;
use dreamforge_core::pipeline::{
    emit_report, run_synthesis, run_training, PipelineConfig, PipelineError, RunOptions, StageName, SynthesisOutcome,
};

/// Synthetic segmentation data curation.
///
/// Exit codes: 0 ok, 1 I/O error, 2 config error, 3 provider failure,
/// 4 degenerate or invalid data.
#[derive(Parser)]
#[command(name = "dreamforge", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Expand the vocabulary, synthesize, filter and export a dataset.
    Synth {
        #[arg(long)]
        config: PathBuf,
        /// Skip stages already completed in the work directory.
        #[arg(long)]
        resume: bool,
        /// Override the config seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Stop after the named stage.
        #[arg(long, value_parser = parse_stage)]
        stop_after: Option<StageName>,
    },
    /// Run the alignment training simulation on the synthesized dataset.
    TrainSim {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Regenerate and print the summary for a work directory.
    Report {
        /// Path to manifest.json.
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Check an exported dataset against its checksums and contracts.
    Validate {
        #[arg(long)]
        dataset: PathBuf,
    },
}

fn parse_stage(s: &str) -> Result<StageName, String> {
    s.parse()
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<PipelineConfig, PipelineError> {
    let mut config = PipelineConfig::load(path)?;
    if let Some(seed) = seed {
        config.seed = seed;
    }
    Ok(config)
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    match cli.command {
        Command::Synth {
            config,
            resume,
            seed,
            stop_after,
        } => {
            let config = load_config(&config, seed)?;
            match run_synthesis(&config, &RunOptions { resume, stop_after })? {
                SynthesisOutcome::Completed { export, .. } => {
                    println!(
                        "dataset written to {}: {} images, {} objects",
                        config.workdir.join("dataset").display(),
                        export.images,
                        export.objects
                    );
                }
                SynthesisOutcome::Stopped { after, .. } => println!("stopped after stage {after}"),
            }
        }
        Command::TrainSim {
            config,
            steps,
            lambda,
            seed,
        } => {
            let mut config = load_config(&config, seed)?;
            if let Some(steps) = steps {
                config.training.steps = steps;
            }
            if let Some(lambda) = lambda {
                config.training.lambda = lambda;
            }
            config.validate()?;
            let trace = run_training(&config)?;
            let fmt = |d: Option<f64>| d.map(|d| format!("{d:.6}")).unwrap_or_else(|| "n/a".into());
            println!(
                "{} steps at lambda {}: cosine distance {} -> {}",
                trace.steps.len(),
                trace.lambda,
                fmt(trace.first_distance()),
                fmt(trace.final_distance())
            );
        }
        Command::Report { manifest } => {
            if !manifest.is_file() {
                return Err(PipelineError::Config(format!("{} is not a file", manifest.display())));
            }
            let workdir = manifest.parent().unwrap_or(Path::new("."));
            let report = emit_report(workdir)?;
            report.write(workdir)?;
            print!("{}", report.markdown);
        }
        Command::Validate { dataset } => {
            let (records, vocab) = read_dataset(&dataset).map_err(|e| PipelineError::Data(e.to_string()))?;
            let objects: usize = records.iter().map(|r| r.objects.len()).sum();
            println!(
                "valid: {} images, {} objects, {} categories ({} novel)",
                records.len(),
                objects,
                vocab.len(),
                vocab.novel().count()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
