//! `ebt`: drive footage of one person with speech from another.
//!
//! Exit codes: 0 success, 2 usage, 3 configuration or corrupt files,
//! 4 missing pipeline stage, 5 numeric failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use ebt::error::Error;
use ebt::pipeline::commands::{
    check_config_override, cmd_drive, cmd_eval, cmd_fitface, cmd_post, cmd_synth, cmd_train_a2e,
    cmd_train_id, cmd_train_render,
};
use ebt::pipeline::{PipelineConfig, Project};

#[derive(Parser)]
#[command(name = "ebt", version, about = "Audio-driven face reenactment pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// Project directory (created by `synth`).
    #[arg(long)]
    project: PathBuf,
    /// Config file; after `synth` it must match the project snapshot.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the config seed for this invocation.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus and initialize the project.
    #[command(name = "synth")]
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Fit face parameters to a sample of footage frames.
    #[command(name = "fitface")]
    Fitface {
        #[command(flatten)]
        common: Common,
    },
    /// Train the speaker classifier and the identity-removal transform.
    #[command(name = "train_id")]
    TrainId {
        #[command(flatten)]
        common: Common,
    },
    /// Train the audio-to-expression network jointly with identity removal.
    #[command(name = "train_a2e")]
    TrainA2e {
        #[command(flatten)]
        common: Common,
    },
    /// Train the mouth completion network.
    #[command(name = "train_render")]
    TrainRender {
        #[command(flatten)]
        common: Common,
    },
    /// Synthesize output frames for a driving audio clip.
    #[command(name = "drive")]
    Drive {
        #[command(flatten)]
        common: Common,
        /// WAV clip that drives the target footage.
        #[arg(long)]
        source_audio: PathBuf,
    },
    /// Re-run temporal filtering over the driven frames.
    #[command(name = "post")]
    Post {
        #[command(flatten)]
        common: Common,
    },
    /// Score the driven frames against ground truth.
    #[command(name = "eval")]
    Eval {
        #[command(flatten)]
        common: Common,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Synth { common }
            | Command::Fitface { common }
            | Command::TrainId { common }
            | Command::TrainA2e { common }
            | Command::TrainRender { common }
            | Command::Drive { common, .. }
            | Command::Post { common }
            | Command::Eval { common } => common,
        }
    }
}

fn run(cli: Cli) -> ebt::error::Result<()> {
    let common = cli.command.common();

    if let Ok(threads) = std::env::var("EBT_THREADS") {
        let n: usize = threads
            .parse()
            .map_err(|_| Error::Config(format!("EBT_THREADS must be a number, got {threads:?}")))?;
        if n == 0 {
            return Err(Error::Config("EBT_THREADS must be positive".into()));
        }
        // Later commands may have built the pool already in-process; the
        // CLI builds it exactly once, so a failure here is real.
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }

    match &cli.command {
        Command::Synth { common } => {
            let mut cfg = match &common.config {
                Some(path) => PipelineConfig::from_file(path)?,
                None => PipelineConfig::default(),
            };
            if let Some(seed) = common.seed {
                cfg.seed = seed;
            }
            cmd_synth(&common.project, &cfg)
        }
        other => {
            let project = Project::open(&common.project)?;
            check_config_override(&project, common.config.as_deref())?;
            drop(project);
            match other {
                Command::Fitface { .. } => cmd_fitface(&common.project),
                Command::TrainId { .. } => cmd_train_id(&common.project),
                Command::TrainA2e { .. } => cmd_train_a2e(&common.project),
                Command::TrainRender { .. } => cmd_train_render(&common.project),
                Command::Drive { source_audio, .. } => {
                    let outcome = cmd_drive(&common.project, source_audio, common.seed)?;
                    println!("drove {} frames", outcome.frames);
                    if let Some(r) = outcome.report {
                        print!("{}", r.to_kv());
                    }
                    Ok(())
                }
                Command::Post { .. } => cmd_post(&common.project),
                Command::Eval { .. } => {
                    let report = cmd_eval(&common.project)?;
                    print!("{}", report.to_kv());
                    Ok(())
                }
                Command::Synth { .. } => unreachable!("handled above"),
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("ebt: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
