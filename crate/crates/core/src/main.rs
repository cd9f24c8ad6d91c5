use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use glyphbooth::config::RunConfig;
use glyphbooth::pipeline::{self, RunDir, Which};
use glyphbooth::Result;

#[derive(Parser)]
#[command(
    name = "glyphbooth",
    version,
    about = "Personalize a glyph diffusion model and fine-tune it with rewards"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the seed in the config file.
    #[arg(long)]
    seed: Option<u64>,
    /// Parent directory of run directories.
    #[arg(long, default_value = "runs")]
    out: PathBuf,
    /// Overwrite existing artifacts.
    #[arg(long)]
    force: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum StageArg {
    Base,
    Personalized,
    Rl,
}

#[derive(Subcommand)]
enum Command {
    /// Train the base model on the synthetic world.
    Pretrain(Common),
    /// Bind the identifier to the reference subject.
    Personalize(Common),
    /// Reward fine-tuning of LoRA adapters on the personalized model.
    RlFinetune(Common),
    /// Draw samples for one prompt.
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        prompt: String,
        #[arg(long, default_value_t = 8)]
        n: usize,
        /// Which stage checkpoint of the run to sample from.
        #[arg(long, value_enum, default_value = "rl")]
        stage: StageArg,
        /// Sample from this checkpoint file instead of the run's own.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Also write a PNG grid.
        #[arg(long)]
        png: bool,
    },
    /// Fidelity report over every checkpoint in the run directory.
    Eval(Common),
}

fn setup(common: &Common) -> Result<(RunConfig, RunDir)> {
    let mut cfg = RunConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    pipeline::log_config(&cfg);
    let run = RunDir::open(&common.out, &cfg, common.force)?;
    log::info!("run directory {}", run.path().display());
    Ok((cfg, run))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Pretrain(c) => {
            let (cfg, run) = setup(&c)?;
            println!("{}", pipeline::pretrain(&cfg, &run)?.display());
        }
        Command::Personalize(c) => {
            let (cfg, run) = setup(&c)?;
            println!("{}", pipeline::personalize(&cfg, &run)?.display());
        }
        Command::RlFinetune(c) => {
            let (cfg, run) = setup(&c)?;
            println!("{}", pipeline::rl_finetune(&cfg, &run)?.display());
        }
        Command::Sample {
            common,
            prompt,
            n,
            stage,
            checkpoint,
            png,
        } => {
            let (cfg, run) = setup(&common)?;
            let which = match stage {
                StageArg::Base => Which::Base,
                StageArg::Personalized => Which::Personalized,
                StageArg::Rl => Which::Rl,
            };
            let (path, rows) =
                pipeline::sample(&cfg, &run, &prompt, n, which, checkpoint.as_deref(), png)?;
            println!("{}", path.display());
            println!("index,reward");
            for r in rows {
                println!("{},{}", r.index, r.reward);
            }
        }
        Command::Eval(c) => {
            let (cfg, run) = setup(&c)?;
            println!("{}", pipeline::evaluate(&cfg, &run)?.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
