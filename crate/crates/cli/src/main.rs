use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;

use slidekit_cli::commands::{self, render};
use slidekit_cli::{exit, CliError, CliResult, ConfigLayers, Outcome, PipelineConfig};

#[derive(Parser, Debug)]
#[command(name = "slidekit", version, about = "Whole-slide tiling, encoding and evaluation pipeline")]
struct Cli {
    /// Flat `key = value` config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for tiling and encoding (0 = all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(long, short, global = true)]
    verbose: bool,
    /// Override any config key, e.g. `--set num_queries=64`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    assignments: Vec<String>,
    /// Write the command's JSON summary here as well as to stdout.
    #[arg(long, global = true)]
    summary: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic slide (`.png`, or raw RGB with a JSON sidecar).
    Synth {
        #[arg(long, default_value_t = 8192)]
        width: u32,
        #[arg(long, default_value_t = 8192)]
        height: u32,
        #[arg(long, default_value_t = 3)]
        blobs: u32,
        #[arg(long)]
        out: PathBuf,
    },
    /// Segment tissue, plan regions and write the tile manifest.
    Tile {
        #[arg(long)]
        slide: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Encode manifest regions into pooled region features.
    Encode {
        #[arg(long)]
        slide: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        features: Option<PathBuf>,
        #[arg(long)]
        cache: Option<PathBuf>,
    },
    /// Compress region features to a fixed number of tokens.
    Compress {
        #[arg(long)]
        features: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Zero-shot classify feature rows against prompt-ensemble prototypes.
    Zeroshot {
        /// Defaults to the compressed token file.
        #[arg(long)]
        features: Option<PathBuf>,
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(long, default_value = "zeroshot.csv")]
        out: PathBuf,
    },
    /// Few-shot linear probe (bundled synthetic data unless features given).
    Probe {
        #[arg(long, requires = "labels")]
        features: Option<PathBuf>,
        #[arg(long, requires = "features")]
        labels: Option<PathBuf>,
        #[arg(long, default_value = "probe.csv")]
        out: PathBuf,
    },
    /// Train the attention MIL head on synthetic bags.
    Mil {
        #[arg(long, default_value_t = 160)]
        bags: usize,
        #[arg(long, default_value_t = 64)]
        dim: usize,
        #[arg(long, default_value = "mil_predictions.csv")]
        out: PathBuf,
    },
    /// BLEU-1..4 and ROUGE-L between line-aligned text files.
    Metrics {
        #[arg(long)]
        candidates: PathBuf,
        #[arg(long)]
        references: PathBuf,
    },
    /// Print the parameter-group plan for a training stage.
    Stageplan {
        #[arg(long)]
        stage: Option<u8>,
        /// Also tabulate the learning rate at every step of a run this long.
        #[arg(long)]
        total_steps: Option<u64>,
    },
}

fn resolve(cli: &Cli) -> CliResult<PipelineConfig> {
    let mut layers = ConfigLayers::default();
    if let Some(p) = &cli.config {
        layers.apply_file(p)?;
    }
    layers.apply_env(std::env::vars())?;
    if let Some(s) = cli.seed {
        layers.apply_flag("seed", s)?;
    }
    if let Some(t) = cli.threads {
        layers.apply_flag("threads", t)?;
    }
    layers.apply_assignments(&cli.assignments)?;
    let mut path_flag = |key: &str, v: &Option<PathBuf>| match v {
        Some(p) => layers.apply_flag(key, p.display()),
        None => Ok(()),
    };
    match &cli.command {
        Command::Tile { slide, manifest } => {
            path_flag("slide", slide)?;
            path_flag("manifest", manifest)?;
        }
        Command::Encode { slide, manifest, features, cache } => {
            path_flag("slide", slide)?;
            path_flag("manifest", manifest)?;
            path_flag("features", features)?;
            path_flag("feature_cache", cache)?;
        }
        Command::Compress { checkpoint, out, .. } => {
            path_flag("checkpoint", checkpoint)?;
            path_flag("compressed", out)?;
        }
        Command::Stageplan { stage: Some(s), .. } => layers.apply_flag("stage", s)?,
        _ => {}
    }
    layers.resolve()
}

fn emit<T: Serialize>(cli: &Cli, value: &T) -> CliResult<()> {
    println!("{}", render(value));
    if let Some(p) = &cli.summary {
        commands::write_json(value, p)?;
    }
    Ok(())
}

fn run(cli: &Cli) -> CliResult<Outcome> {
    let cfg = resolve(cli)?;
    if cfg.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.threads)
            .build_global()
            .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    }
    if cli.verbose {
        eprintln!("config: {}", render(&cfg));
    }
    match &cli.command {
        Command::Synth { width, height, blobs, out } => emit(cli, &commands::cmd_synth(&cfg, *width, *height, *blobs, out)?)?,
        Command::Tile { .. } => {
            let (summary, outcome) = commands::cmd_tile(&cfg)?;
            emit(cli, &summary)?;
            if outcome == Outcome::Warning {
                eprintln!("warning: no region passed the tissue threshold; manifest is empty");
            }
            return Ok(outcome);
        }
        Command::Encode { .. } => emit(cli, &commands::cmd_encode(&cfg)?)?,
        Command::Compress { features, .. } => {
            let input = features.clone().unwrap_or_else(|| cfg.features.clone());
            emit(cli, &commands::cmd_compress(&cfg, &input)?)?
        }
        Command::Zeroshot { features, labels, out } => {
            let input = features.clone().unwrap_or_else(|| cfg.compressed.clone());
            emit(cli, &commands::cmd_zeroshot(&cfg, &input, out, labels.as_deref())?)?
        }
        Command::Probe { features, labels, out } => {
            let given = features.as_deref().zip(labels.as_deref());
            emit(cli, &commands::cmd_probe(&cfg, given, out)?)?
        }
        Command::Mil { bags, dim, out } => emit(cli, &commands::cmd_mil(&cfg, *bags, *dim, out)?)?,
        Command::Metrics { candidates, references } => emit(cli, &commands::cmd_metrics(&cfg, candidates, references)?)?,
        Command::Stageplan { total_steps, .. } => emit(cli, &commands::cmd_stageplan(&cfg, *total_steps)?)?,
    }
    Ok(Outcome::Ok)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { exit::CONFIG as u8 } else { exit::OK as u8 });
        }
    };
    match run(&cli) {
        Ok(Outcome::Ok) => ExitCode::from(exit::OK as u8),
        Ok(Outcome::Warning) => ExitCode::from(exit::WARNING as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
