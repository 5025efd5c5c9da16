//! `clinforge`: mixture, packing, fine-tuning, preference alignment and
//! evaluation from one binary.

mod commands;
mod config;
mod provenance;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::commands::Ctx;
use crate::config::RunConfig;
use crate::provenance::OutLock;

const EXIT_CONFIG: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

#[derive(Parser)]
#[command(name = "clinforge", version, about = "Clinical instruction tuning and preference alignment at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Run configuration (JSON).
    #[arg(long, default_value = "fixtures/e2e.json")]
    config: PathBuf,
    /// Override a config value, e.g. `--set sft.peak_lr=1e-4`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Override the run seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct StageArgs {
    #[command(flatten)]
    common: Common,
    /// Alignment stage, starting at 1.
    #[arg(long, default_value_t = 1)]
    stage: u32,
}

#[derive(Subcommand)]
enum Command {
    /// Sample the training mixture from the manifest into JSONL.
    Mix(Common),
    /// Render and pack the mixture into a fixed-length shard.
    Pack(Common),
    /// Supervised fine-tuning on the packed shard.
    Sft(Common),
    /// Build the preference pairs of one alignment stage.
    GenPrefs(StageArgs),
    /// Run DPO for one stage on its pair file.
    Dpo(StageArgs),
    /// Run every alignment stage: pairs, then DPO, per stage.
    Align(Common),
    /// Zero-shot multiple-choice evaluation.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to evaluate (default: last alignment stage, else SFT).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// mix, pack, sft, align and eval in one go.
    E2e(Common),
    /// Write the synthetic fixture set.
    Fixtures {
        #[arg(long, default_value = "fixtures")]
        out: PathBuf,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Mix(_) => "mix",
            Command::Pack(_) => "pack",
            Command::Sft(_) => "sft",
            Command::GenPrefs(_) => "gen-prefs",
            Command::Dpo(_) => "dpo",
            Command::Align(_) => "align",
            Command::Eval { .. } => "eval",
            Command::E2e(_) => "e2e",
            Command::Fixtures { .. } => "fixtures",
        }
    }

    fn common(&self) -> Option<&Common> {
        match self {
            Command::Mix(c) | Command::Pack(c) | Command::Sft(c) | Command::Align(c) | Command::E2e(c) => Some(c),
            Command::GenPrefs(s) | Command::Dpo(s) => Some(&s.common),
            Command::Eval { common, .. } => Some(common),
            Command::Fixtures { .. } => None,
        }
    }
}

fn init_threads() -> Result<(), String> {
    let Ok(raw) = std::env::var("CLINFORGE_THREADS") else {
        return Ok(());
    };
    let n: usize = raw.parse().map_err(|_| format!("CLINFORGE_THREADS={raw:?} is not a positive integer"))?;
    if n == 0 {
        return Err("CLINFORGE_THREADS must be positive".into());
    }
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| e.to_string())
}

fn load_config(c: &Common) -> Result<RunConfig, config::ConfigError> {
    let mut cfg = RunConfig::load(&c.config, &c.set)?;
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(o) = &c.out {
        cfg.paths.out = o.clone();
    }
    Ok(cfg)
}

fn run(command: Command, cfg: RunConfig) -> anyhow::Result<()> {
    let _lock = OutLock::acquire(&cfg.paths.out)?;
    let ctx = Ctx { command: command.name().to_string(), cfg };
    match command {
        Command::Mix(_) => commands::mix(&ctx),
        Command::Pack(_) => commands::pack_cmd(&ctx),
        Command::Sft(_) => commands::sft(&ctx),
        Command::GenPrefs(s) => commands::gen_prefs(&ctx, s.stage),
        Command::Dpo(s) => commands::dpo(&ctx, s.stage),
        Command::Align(_) => commands::align(&ctx),
        Command::Eval { checkpoint, .. } => commands::eval(&ctx, checkpoint),
        Command::E2e(_) => commands::e2e(&ctx),
        Command::Fixtures { .. } => unreachable!("handled before config loading"),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Err(e) = init_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(EXIT_CONFIG);
    }
    if let Command::Fixtures { out } = &cli.command {
        return match commands::fixtures(out) {
            Ok(()) => ExitCode::SUCCESS,
            Err(e) => {
                eprintln!("error: {e:#}");
                ExitCode::from(EXIT_RUNTIME)
            }
        };
    }
    let common = cli.command.common().expect("every other subcommand takes a config").clone();
    let cfg = match load_config(&common) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("config error: {e}");
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    match run(cli.command, cfg) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_RUNTIME)
        }
    }
}
