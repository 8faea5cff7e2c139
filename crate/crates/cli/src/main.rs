//! `mpstream`: runs the lesion classification pipeline one stage at a time.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mpstream_core::pipeline::{Pipeline, PipelineConfig, StageSummary};
use mpstream_core::trainer::JobFilter;
use mpstream_core::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "mpstream", version, about = "Multi-stream 3D DenseNet classification of mpMRI findings")]
struct Cli {
    /// Pipeline configuration (JSON). Missing fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed, overriding the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Output directory, overriding the configuration.
    #[arg(long, global = true)]
    output: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic phantom cohort.
    GenPhantom,
    /// Resample, crop and standardize every study.
    Preprocess,
    /// Sample patch sets from the preprocessed studies.
    Extract,
    /// Train the stream networks.
    Train {
        /// Restrict to matching jobs, e.g. `geometry=96,fold=2`.
        #[arg(long)]
        only: Option<String>,
    },
    /// Fit the stacked ensembles on frozen streams.
    Ensemble,
    /// Score the test-cohort findings.
    Predict,
    /// Compare predictions against ground truth.
    Evaluate,
    /// Rebuild tables and ROC figures from stored metrics.
    Report,
    /// Every stage in order.
    Run,
}

fn configure(cli: &Cli) -> Result<PipelineConfig> {
    let mut config = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = cli.seed {
        config.seed = s;
    }
    if let Some(w) = cli.workers {
        if w == 0 {
            return Err(Error::Usage("--workers must be at least 1".into()));
        }
        config.workers = w;
    }
    if let Some(o) = &cli.output {
        config.output = o.clone();
    }
    Ok(config)
}

fn print(s: &StageSummary) {
    println!("{} -> {}", s.stage, s.dir.display());
    for l in &s.lines {
        println!("  {l}");
    }
}

fn run(cli: Cli) -> Result<()> {
    let pipeline = Pipeline::new(configure(&cli)?)?;
    let none = JobFilter::default();
    let summary = match &cli.command {
        Command::GenPhantom => pipeline.gen_phantom()?,
        Command::Preprocess => pipeline.preprocess()?,
        Command::Extract => pipeline.extract()?,
        Command::Train { only } => match only {
            Some(f) => pipeline.train(&JobFilter::parse(f)?)?,
            None => pipeline.train(&none)?,
        },
        Command::Ensemble => pipeline.ensemble()?,
        Command::Predict => pipeline.predict()?,
        Command::Evaluate => pipeline.evaluate()?,
        Command::Report => pipeline.report()?,
        Command::Run => {
            pipeline.run_all()?.iter().for_each(print);
            return Ok(());
        }
    };
    print(&summary);
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
