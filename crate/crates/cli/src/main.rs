use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use redcast::report::{synth_generate, Pipeline, PipelineConfig, PipelineSummary, StopAfter, SynthConfig};

/// Density-cluster features from social-media embeddings for epidemic
/// trend classification and forecasting.
#[derive(Parser, Debug)]
#[command(name = "redcast", version)]
struct Cli {
    /// Pipeline configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Restricts the run to one configured region.
    #[arg(long, global = true)]
    region: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Load and align inputs; writes the daily series per region.
    Ingest,
    /// Reduce embeddings; writes the reduced coordinates.
    Reduce,
    /// Density-cluster the reduced embeddings; writes labels and top words.
    Cluster,
    /// Build the daily feature groups.
    Features,
    /// Threshold-classification task; writes the accuracy and importance tables.
    Threshold,
    /// Forecasting ablation and significance tests.
    Forecast,
    /// Reduction × clustering grid through the threshold task, plus silhouette curves.
    Grid,
    /// Full pipeline: every stage and every table.
    Report,
    /// Generate a synthetic corpus with a planted leading-indicator cluster.
    Synth {
        #[arg(long, default_value_t = 360)]
        n_days: usize,
        #[arg(long, default_value_t = 8)]
        n_clusters: usize,
        /// Days the signal cluster leads the caseload.
        #[arg(long, default_value_t = 7)]
        lead: usize,
        #[arg(long, default_value_t = 5.0)]
        snr: f64,
    },
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let Some(path) = &cli.config else {
        bail!("--config is required for this command");
    };
    let mut cfg = PipelineConfig::load(path)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    if let Some(tag) = &cli.region {
        cfg.restrict_to(tag)?;
    }
    Ok(cfg)
}

fn synth(cli: &Cli, n_days: usize, n_clusters: usize, lead: usize, snr: f64) -> Result<()> {
    let dir = cli.out.clone().unwrap_or_else(|| PathBuf::from("synth"));
    let mut cfg = SynthConfig {
        n_days,
        n_clusters,
        lead,
        snr,
        ..SynthConfig::default()
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(tag) = &cli.region {
        cfg.region = tag.clone();
    }
    let corpus = synth_generate(&cfg)?;
    corpus.write(&dir).with_context(|| format!("writing {}", dir.display()))?;
    println!("{}", dir.display());
    eprintln!(
        "synth: {} posts, signal cluster(s) {:?}; run with --config {}",
        corpus.posts.len(),
        corpus.manifest.signal_clusters,
        dir.join("pipeline.toml").display()
    );
    Ok(())
}

fn report(summary: &PipelineSummary) {
    for path in &summary.outputs {
        println!("{}", path.display());
    }
    let hits = summary.cache.iter().filter(|e| e.hit).count();
    eprintln!(
        "config {}: {} outputs, cache {hits} hit(s) / {} miss(es)",
        summary.config_hash,
        summary.outputs.len(),
        summary.cache.len() - hits
    );
}

fn run(cli: &Cli) -> Result<()> {
    if let Command::Synth {
        n_days,
        n_clusters,
        lead,
        snr,
    } = cli.command
    {
        return synth(cli, n_days, n_clusters, lead, snr);
    }
    let pipeline = Pipeline::new(load_config(cli)?);
    let summary = match cli.command {
        Command::Ingest => pipeline.run_until(StopAfter::Ingest)?,
        Command::Reduce => pipeline.run_until(StopAfter::Reduce)?,
        Command::Cluster => pipeline.run_until(StopAfter::Cluster)?,
        Command::Features => pipeline.run_until(StopAfter::Features)?,
        Command::Threshold => pipeline.run_until(StopAfter::Threshold)?,
        Command::Forecast => pipeline.run_until(StopAfter::Forecast)?,
        Command::Grid => pipeline.run_grid()?,
        Command::Report => pipeline.run()?,
        Command::Synth { .. } => unreachable!("handled above"),
    };
    report(&summary);
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // core errors already embed their sources in their message
            let mut msg = e.to_string();
            for cause in e.chain().skip(1) {
                let c = cause.to_string();
                if !msg.contains(&c) {
                    msg = format!("{msg}: {c}");
                }
            }
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}

