//! `fct` binary: stage subcommands plus the end-to-end `run` pipeline.
//!
//! Exit codes: 0 on success, 1 for usage or configuration errors, 2 for
//! runtime and data errors.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use fct_cli::config::ExperimentConfig;
use fct_cli::pipeline::{
    describe_plan, run_pipeline, stage_eval, stage_gen_data, stage_simulate_costs,
    stage_train_embedder, stage_train_side_info, stage_train_transform, stage_update, Paths,
    Role,
};
use fct_core::Error;

#[derive(Parser)]
#[command(name = "fct", version, about = "Forward-compatible embedding updates at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct StageArgs {
    /// Experiment configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Replace every stage seed with values derived from this one.
    #[arg(long)]
    seed: Option<u64>,
    /// Artifact directory; defaults to the config's output_dir.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Sample the training and evaluation datasets.
    GenData(StageArgs),
    /// Train the old or new embedder.
    TrainEmbedder {
        #[command(flatten)]
        stage: StageArgs,
        /// Which embedder to train.
        #[arg(long, value_enum)]
        role: Role,
    },
    /// Train the side-information producer.
    TrainSideInfo(StageArgs),
    /// Train the old-to-new transformation.
    TrainTransform(StageArgs),
    /// Build galleries and evaluate the query/gallery pairings.
    Eval(StageArgs),
    /// Apply the trained transformation to a persisted gallery.
    Update {
        #[command(flatten)]
        stage: StageArgs,
        /// Gallery file to update; defaults to the old gallery artifact.
        #[arg(long)]
        gallery: Option<PathBuf>,
    },
    /// Write the strategy cost table for the configured deployment.
    SimulateCosts(StageArgs),
    /// Run every stage in order.
    Run {
        #[command(flatten)]
        stage: StageArgs,
        /// Print the resolved stage plan without executing it.
        #[arg(long)]
        dry_run: bool,
    },
}

impl Command {
    fn stage_args(&self) -> &StageArgs {
        match self {
            Command::GenData(s)
            | Command::TrainSideInfo(s)
            | Command::TrainTransform(s)
            | Command::Eval(s)
            | Command::SimulateCosts(s) => s,
            Command::TrainEmbedder { stage, .. }
            | Command::Update { stage, .. }
            | Command::Run { stage, .. } => stage,
        }
    }
}

fn execute(command: &Command) -> Result<(), Error> {
    let args = command.stage_args();
    let mut cfg = ExperimentConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.override_seed(seed);
    }
    let out = args.out.clone().unwrap_or_else(|| cfg.output_dir.clone());
    let paths = Paths::new(&out);
    match command {
        Command::GenData(_) => stage_gen_data(&cfg, &paths),
        Command::TrainEmbedder { role, .. } => stage_train_embedder(&cfg, &paths, *role),
        Command::TrainSideInfo(_) => stage_train_side_info(&cfg, &paths),
        Command::TrainTransform(_) => stage_train_transform(&cfg, &paths),
        Command::Eval(_) => stage_eval(&cfg, &paths).map(|_| ()),
        Command::Update { gallery, .. } => stage_update(&cfg, &paths, gallery.as_deref()),
        Command::SimulateCosts(_) => stage_simulate_costs(&cfg, &paths),
        Command::Run { dry_run, .. } => {
            if *dry_run {
                println!("{}", describe_plan(&cfg, &paths));
                Ok(())
            } else {
                run_pipeline(&cfg, &paths)
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests are successful exits; anything else
            // is a usage error.
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match execute(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) => ExitCode::from(1),
                _ => ExitCode::from(2),
            }
        }
    }
}
