use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use color3d::stages;
use color3d::{PipelineConfig, Result};

#[derive(Parser)]
#[command(name = "color3d", version, about = "Consistent colorization of monochrome multi-view and dynamic scenes")]
struct Cli {
    /// TOML configuration file.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Overrides the master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset into paths.input.
    Synth,
    /// Pick the key view among the training views.
    SelectKeyview,
    /// Fine-tune the colorizer on the colorized key view.
    TrainColorizer,
    /// Predict chroma for every training view.
    ColorizeViews,
    /// Fit the Lab Gaussian scene.
    Reconstruct,
    /// Render every camera of the dataset.
    Render,
    /// Score the held-out views.
    Evaluate,
    /// Score the per-image colorization baseline on the held-out views.
    Baseline,
    /// Run every stage, skipping those that are up to date.
    RunAll,
}

fn load(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.paths.output = o.clone();
    }
    if cli.threads.is_some() {
        cfg.threads = cli.threads;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = load(cli)?;
    if let Some(n) = cfg.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| color3d::Error::Config(e.to_string()))?;
    }
    match cli.command {
        Command::Synth => {
            let s = stages::cmd_synth(&cfg)?;
            println!("wrote {} views and {} correspondence files to {}", s.views, s.correspondence_files, cfg.paths.input.display());
        }
        Command::SelectKeyview => {
            let r = stages::cmd_select_keyview(&cfg)?;
            println!("key view: {}", r.selected);
            if cfg.paths.key_view_color.is_none() {
                println!("colorize it and set paths.key_view_color before train-colorizer");
            }
        }
        Command::TrainColorizer => {
            let log = stages::cmd_train_colorizer(&cfg)?;
            if let Some(l) = log.records.last() {
                println!("final loss {:.6}", l.loss);
            }
        }
        Command::ColorizeViews => println!("colorized {} views", stages::cmd_colorize_views(&cfg)?),
        Command::Reconstruct => {
            let log = stages::cmd_reconstruct(&cfg)?;
            if let Some(r) = log.records.last() {
                println!("final loss {:.6}", r.total);
            }
        }
        Command::Render => println!("rendered {} views", stages::cmd_render(&cfg)?),
        Command::Evaluate => print!("{}", stages::cmd_evaluate(&cfg)?.summary()),
        Command::Baseline => print!("{}", color3d::evaluate::run_baseline(&cfg)?.summary()),
        Command::RunAll => {
            let s = stages::cmd_run_all(&cfg)?;
            if !s.skipped.is_empty() {
                println!("up to date: {}", s.skipped.join(", "));
            }
            if let Some(r) = s.report {
                print!("{}", r.summary());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
