use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use sigdisc::pipeline::{Manifest, Pipeline, PipelineConfig};
use sigdisc::Error;

#[derive(Parser)]
#[command(name = "sigdisc", version, about = "Latent signature discovery from event records")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Common {
    /// Pipeline config (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads.
    #[arg(long, global = true, env = "SIGDISC_THREADS")]
    threads: Option<usize>,
    /// Root seed, overriding the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory, overriding the config.
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    /// Config override as `section.key=value`; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with planted sources.
    Synth,
    /// Compute curve parameters and preview curves.
    Curves,
    /// Sample discovery and evaluation matrices.
    Sample,
    /// Standardize the discovery matrix and fit the signature model.
    Fit,
    /// Project the evaluation matrix onto the signatures.
    Project,
    /// Render signature reports.
    Report {
        /// Only this signature.
        #[arg(long)]
        source: Option<usize>,
    },
    /// Compare expressions and raw variables as predictors.
    Eval,
    /// Run every stage the config supports.
    E2e,
}

fn run(cli: Cli) -> Result<Manifest, Error> {
    let c = cli.common;
    if let Some(n) = c.threads {
        if n == 0 {
            return Err(Error::Config("--threads must be >= 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(e.to_string()))?;
    }
    let config = c
        .config
        .ok_or_else(|| Error::Config("--config <file> is required".into()))?;
    let mut overrides = c.overrides;
    if let Some(seed) = c.seed {
        overrides.push(format!("seed={seed}"));
    }
    let mut cfg = PipelineConfig::load(&config, &overrides)?;
    if let Some(out) = c.output_dir {
        cfg.paths.output_dir = out;
    }
    let p = Pipeline::new(cfg);
    match cli.command {
        Command::Synth => p.synth(),
        Command::Curves => p.curves(),
        Command::Sample => p.sample(),
        Command::Fit => p.fit(),
        Command::Project => p.project(),
        Command::Report { source } => p.report(source),
        Command::Eval => p.eval().map(|(m, _)| m),
        Command::E2e => p.e2e(),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(m) => {
            println!("{}: ok ({} outputs, {:.0} ms)", m.stage, m.outputs.len(), m.timings_ms["total"]);
            println!("{}", serde_json::to_string(&m.summary).unwrap_or_default());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error[{}]: {e}", e.category());
            ExitCode::from(match e.category() {
                "config" => 2,
                "missing_input" => 3,
                _ => 1,
            })
        }
    }
}
