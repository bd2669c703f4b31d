use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use cogsono::config::{parse_config, Experiment, ExperimentConfig, OutputFormat};
use cogsono::validation::run_validation;

#[derive(Parser)]
#[command(name = "cogsono", version, about = "Active-inference perception-action experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Closed-loop Doppler beam steering.
    Track(RunArgs),
    /// Active scanline subsampling of a synthetic image sequence.
    Subsample(RunArgs),
    /// Two-source separation with diffusion priors.
    Separate(RunArgs),
    /// Run the analytic-oracle checks and print a pass/fail table.
    Validate {
        /// Also write `validation.json` into this directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct RunArgs {
    /// JSON config; defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Replaces the config's seed list with this single seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides `output_dir` from the config.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Both)]
    format: Format,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Json,
    Both,
}

impl From<Format> for OutputFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Csv => OutputFormat::Csv,
            Format::Json => OutputFormat::Json,
            Format::Both => OutputFormat::Both,
        }
    }
}

fn run_experiment(experiment: Experiment, args: RunArgs) -> cogsono::Result<()> {
    let mut cfg = match &args.config {
        Some(p) => parse_config(p)?,
        None => ExperimentConfig::new(experiment),
    };
    if cfg.experiment != experiment {
        return Err(cogsono::Error::Config {
            path: "experiment".into(),
            message: format!(
                "config is for `{}` but the `{}` command was used",
                cfg.experiment.name(),
                experiment.name()
            ),
        });
    }
    if let Some(seed) = args.seed {
        cfg.seeds = vec![seed];
    }
    if let Some(out) = args.out {
        cfg.output_dir = out;
    }
    cfg.validate()?;
    for &seed in &cfg.seeds {
        let run = cfg.run(seed)?;
        let files = run.write(&cfg.output_dir, args.format.into())?;
        println!("{}", run.summary_line());
        for f in files {
            println!("  wrote {}", f.display());
        }
    }
    Ok(())
}

fn validate(out: Option<PathBuf>) -> cogsono::Result<bool> {
    let report = run_validation()?;
    print!("{}", report.table());
    if let Some(dir) = out {
        std::fs::create_dir_all(&dir)?;
        let path = dir.join("validation.json");
        std::fs::write(&path, serde_json::to_string_pretty(&report)? + "\n")?;
        println!("wrote {}", path.display());
    }
    println!("{}", if report.passed { "all checks passed" } else { "some checks FAILED" });
    Ok(report.passed)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Track(a) => run_experiment(Experiment::Track, a).map(|_| true),
        Command::Subsample(a) => run_experiment(Experiment::Subsample, a).map(|_| true),
        Command::Separate(a) => run_experiment(Experiment::Separate, a).map(|_| true),
        Command::Validate { out } => validate(out),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
