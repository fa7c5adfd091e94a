use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};
use coteach_cli::config::{ExperimentConfig, Method, Overrides};
use coteach_cli::manifest::RunManifest;
use coteach_cli::run::RunOptions;
use coteach_cli::{ablate, gen, is_usage_error, pipeline, report};
use coteach_core::GammaSetting;

/// Co-teaching domain expansion experiments on synthetic domain pairs.
#[derive(Parser, Debug)]
#[command(name = "coteach", version)]
struct Cli {
    /// JSON experiment config; defaults are used for missing fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run a single seed (overrides `seeds` and the dataset/train seed).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (for `gen`: the dataset file).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Reuse checkpoints from an earlier run whose digests still match.
    #[arg(long, global = true)]
    resume: bool,
    /// Worker threads; seeds run in parallel. Default: all cores.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a domain pair and write it as CSV.
    Gen,
    /// Train teachers and students for every seed and aggregate the results.
    Pipeline {
        /// Comma-separated methods, e.g. `source,uda_mmd,kdde,ct`.
        #[arg(long, value_delimiter = ',')]
        methods: Option<Vec<Method>>,
    },
    /// kdCT students over a list of gamma settings.
    AblateGamma {
        /// `beta:A,B` or `fixed:V`; repeat for several settings.
        #[arg(long = "setting")]
        settings: Vec<GammaSetting>,
    },
    /// Print the tables of a finished run and write an SVG chart.
    Report {
        manifest: PathBuf,
        /// SVG output path (default: report.svg next to the manifest).
        #[arg(long)]
        svg: Option<PathBuf>,
    },
}

fn finish(manifest: &RunManifest, table: &str) -> ExitCode {
    let failed: Vec<_> = manifest.seeds.iter().filter(|s| !s.ok).collect();
    for s in &failed {
        log::error!("seed {} failed: {}", s.seed, s.error.as_deref().unwrap_or("unknown error"));
    }
    println!("wrote {table}");
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    let mut overrides = Overrides {
        seed: cli.seed,
        out: cli.out.clone(),
        ..Overrides::default()
    };
    let opts = RunOptions {
        resume: cli.resume,
        jobs: cli.jobs,
    };
    match cli.command {
        Command::Gen => {
            // for `gen`, --out names the file, not a directory
            overrides.out = None;
            let cfg = ExperimentConfig::resolve(cli.config.as_deref(), &overrides)?;
            let path = gen::cmd_gen(&cfg, cli.out.as_deref())?;
            println!("wrote {}", path.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Pipeline { methods } => {
            overrides.methods = methods;
            let cfg = ExperimentConfig::resolve(cli.config.as_deref(), &overrides)?;
            let m = pipeline::cmd_pipeline(&cfg, &opts)?;
            Ok(finish(&m, &cfg.output_dir.join(pipeline::AGGREGATE).display().to_string()))
        }
        Command::AblateGamma { settings } => {
            if !settings.is_empty() {
                overrides.settings = Some(settings);
            }
            let cfg = ExperimentConfig::resolve(cli.config.as_deref(), &overrides)?;
            let m = ablate::cmd_ablate_gamma(&cfg, &opts)?;
            Ok(finish(&m, &cfg.output_dir.join(ablate::TABLE).display().to_string()))
        }
        Command::Report { manifest, svg } => {
            let r = report::cmd_report(&manifest, svg.as_deref())?;
            print!("{}", r.text);
            println!("\nwrote {}", r.svg_path.display());
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            if is_usage_error(&e) {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
