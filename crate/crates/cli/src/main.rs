use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use soar::io::load_manifest;
use soar::pipeline::{init_thread_pool, Command, ConfigLayers, Pipeline, Stage};
use soar::train::denoise::serve;
use soar::train::IdentityDenoiser;
use soar::{Error, Result};

#[derive(Parser)]
#[command(name = "soar", version, about = "Articulated surfel avatars from monocular captures")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Fit shape and per-frame poses to the keypoints.
    RefinePose(StageArgs),
    /// Build and bind the surfel cloud and pretrain its scale head.
    Init(StageArgs),
    /// Fit the cloud to the observed frames.
    Reconstruct(StageArgs),
    /// Refine the reconstruction with a denoiser prior.
    SdsRefine(StageArgs),
    /// Write PNG channels for the configured cameras and poses.
    Render(StageArgs),
    /// Write an evaluation report against the manifest frames.
    Evaluate(StageArgs),
    /// Run every stage in order, then render and evaluate.
    Run(StageArgs),
    /// Answer denoiser requests on stdin/stdout.
    DenoiseServe {
        #[arg(long, value_enum, default_value_t = ServeMode::Identity)]
        mode: ServeMode,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ServeMode {
    /// Return each render unchanged.
    Identity,
}

#[derive(Args)]
struct StageArgs {
    /// Scene manifest (config key `manifest`).
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// TOML configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run seed (config key `seed`).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for checkpoints and artifacts (config key `out`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads (config key `threads`; environment SOAR_THREADS).
    #[arg(long)]
    threads: Option<usize>,
    /// Override any config key, e.g. `--set reconstruction.steps=200`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

fn toml_path(p: &std::path::Path) -> String {
    toml_string(&p.to_string_lossy())
}

fn toml_string(s: &str) -> String {
    let mut out = String::from("\"");
    for c in s.chars() {
        match c {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            c => out.push(c),
        }
    }
    out.push('"');
    out
}

fn run_commands(args: &StageArgs, commands: &[Command]) -> Result<()> {
    let mut sets = args.set.clone();
    if let Some(m) = &args.manifest {
        sets.push(format!("manifest={}", toml_path(m)));
    }
    if let Some(s) = args.seed {
        sets.push(format!("seed={s}"));
    }
    if let Some(o) = &args.out {
        sets.push(format!("out={}", toml_path(o)));
    }
    if let Some(t) = args.threads {
        sets.push(format!("threads={t}"));
    }
    let layers = ConfigLayers::new(args.config.as_deref(), &sets)?;
    // Asset loading already uses the pool, so size it from the file and flags first.
    let early = layers.resolve(None)?;
    init_thread_pool(early.threads)?;
    let manifest = early
        .manifest
        .ok_or_else(|| Error::InvalidArgument("no manifest given (use --manifest or the `manifest` config key)".into()))?;
    let scene = load_manifest(&manifest)?;
    let config = layers.resolve(scene.manifest.config.as_ref())?;
    let pipeline = Pipeline::new(&scene, &config);
    for &c in commands {
        let artifacts = pipeline.run(c)?;
        if let Some(p) = &artifacts.checkpoint {
            println!("{}: wrote {}", c.name(), p.display());
        }
        for f in &artifacts.files {
            log::info!("{}: wrote {}", c.name(), f.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let stage = |s| vec![Command::Stage(s)];
    let result = match &cli.command {
        Cmd::RefinePose(a) => run_commands(a, &stage(Stage::RefinePose)),
        Cmd::Init(a) => run_commands(a, &stage(Stage::Init)),
        Cmd::Reconstruct(a) => run_commands(a, &stage(Stage::Reconstruct)),
        Cmd::SdsRefine(a) => run_commands(a, &stage(Stage::SdsRefine)),
        Cmd::Render(a) => run_commands(a, &[Command::Render]),
        Cmd::Evaluate(a) => run_commands(a, &[Command::Evaluate]),
        Cmd::Run(a) => {
            let mut all: Vec<Command> = Stage::ALL.into_iter().map(Command::Stage).collect();
            all.extend([Command::Render, Command::Evaluate]);
            run_commands(a, &all)
        }
        Cmd::DenoiseServe { mode: ServeMode::Identity } => {
            serve(std::io::stdin().lock(), std::io::stdout().lock(), &mut IdentityDenoiser).map(|n| log::info!("served {n} requests"))
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
