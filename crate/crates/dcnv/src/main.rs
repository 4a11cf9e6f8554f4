use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dcnv::commands::{self, CliError};
use dcnv::config::RunConfig;
use dcnv_core::episode::Split;

#[derive(Parser)]
#[command(name = "dcnv", version, about = "Navigation agent with language-generated visual filters")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic world, embeddings and the three episode splits.
    GenWorld {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        rooms_x: Option<usize>,
        #[arg(long)]
        rooms_y: Option<usize>,
        #[arg(long)]
        train_episodes: Option<usize>,
    },
    /// Train an agent and keep the checkpoint with the best validation SR.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: Model,
    },
    /// Greedy evaluation of a checkpoint on one split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: Model,
        #[arg(long, default_value = "val_seen")]
        split: String,
        /// Execute ground-truth actions instead of the policy.
        #[arg(long)]
        oracle: bool,
    },
    /// Dump step-by-step rollouts for selected episodes.
    Rollout {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: Model,
        #[arg(long, default_value = "val_seen")]
        split: String,
        /// Episode ids; all episodes of the split when omitted.
        #[arg(long = "episode")]
        episodes: Vec<String>,
    },
    /// Train the four filter/attention/embedding variants.
    Ablation {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: Model,
    },
    /// Train once per filter count.
    SweepFilters {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: Model,
        /// Comma-separated filter counts.
        #[arg(long, value_delimiter = ',')]
        filters: Option<Vec<usize>>,
    },
}

#[derive(Args)]
struct Common {
    /// JSON run config; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// World directory produced by gen-world.
    #[arg(long)]
    world: Option<PathBuf>,
    #[arg(long)]
    stopwords: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Worker threads (default: one per core).
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args)]
struct Model {
    #[arg(long)]
    static_filters: bool,
    #[arg(long)]
    no_attention: bool,
    #[arg(long)]
    scratch_embeddings: bool,
    #[arg(long)]
    filters_m: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    max_steps: Option<usize>,
    /// Execute oracle labels during training (debug).
    #[arg(long)]
    teacher_forcing: bool,
}

fn base_config(common: &Common) -> Result<RunConfig, CliError> {
    let mut cfg = match (&common.config, &common.checkpoint) {
        (Some(p), _) => RunConfig::load(p)?,
        (None, Some(ckpt)) => match commands::config_beside(ckpt) {
            Some(p) => {
                log::info!("using {}", p.display());
                let mut c = RunConfig::load(&p)?;
                c.paths.out_dir = None;
                c
            }
            None => RunConfig::default(),
        },
        _ => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = Some(s);
    }
    let p = &mut cfg.paths;
    for (slot, v) in [
        (&mut p.out_dir, &common.out),
        (&mut p.world_dir, &common.world),
        (&mut p.stopwords, &common.stopwords),
        (&mut p.checkpoint, &common.checkpoint),
    ] {
        if let Some(v) = v {
            *slot = Some(v.clone());
        }
    }
    if let Some(t) = common.threads {
        cfg.train.threads = t;
    }
    Ok(cfg)
}

fn apply_model(cfg: &mut RunConfig, m: &Model) {
    let t = &mut cfg.train;
    if m.static_filters {
        t.dynamic_filters = false;
    }
    if m.no_attention {
        t.attention = false;
    }
    if m.scratch_embeddings {
        t.pretrained_embeddings = false;
    }
    if m.teacher_forcing {
        t.teacher_forcing = true;
    }
    if let Some(v) = m.filters_m {
        t.n_filters = v;
    }
    if let Some(v) = m.hidden {
        t.instr_hidden = v;
        t.policy_hidden = v;
    }
    if let Some(v) = m.epochs {
        t.max_epochs = v;
    }
    if let Some(v) = m.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = m.lr {
        t.lr = v;
    }
    if let Some(v) = m.patience {
        t.patience = v;
    }
    if let Some(v) = m.max_steps {
        t.max_episode_steps = v;
    }
}

fn parse_split(s: &str) -> Result<Split, CliError> {
    Split::from_name(s).ok_or_else(|| {
        CliError::Validation(format!("unknown split `{s}` (train, val_seen, val_unseen)"))
    })
}

fn run(cli: Cli) -> Result<String, CliError> {
    match cli.command {
        Command::GenWorld {
            common,
            rooms_x,
            rooms_y,
            train_episodes,
        } => {
            let mut cfg = base_config(&common)?;
            if let Some(v) = rooms_x {
                cfg.world.rooms_x = v;
            }
            if let Some(v) = rooms_y {
                cfg.world.rooms_y = v;
            }
            if let Some(v) = train_episodes {
                cfg.world.train_episodes = v;
            }
            commands::gen_world(&mut cfg)
        }
        Command::Train { common, model } => {
            let mut cfg = base_config(&common)?;
            apply_model(&mut cfg, &model);
            commands::train(&mut cfg)
        }
        Command::Eval {
            common,
            model,
            split,
            oracle,
        } => {
            let mut cfg = base_config(&common)?;
            apply_model(&mut cfg, &model);
            commands::eval(&mut cfg, parse_split(&split)?, oracle)
        }
        Command::Rollout {
            common,
            model,
            split,
            episodes,
        } => {
            let mut cfg = base_config(&common)?;
            apply_model(&mut cfg, &model);
            commands::rollout_cmd(&mut cfg, parse_split(&split)?, &episodes)
        }
        Command::Ablation { common, model } => {
            let mut cfg = base_config(&common)?;
            apply_model(&mut cfg, &model);
            commands::ablation(&mut cfg)
        }
        Command::SweepFilters {
            common,
            model,
            filters,
        } => {
            let mut cfg = base_config(&common)?;
            apply_model(&mut cfg, &model);
            commands::sweep_filters(&mut cfg, filters)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(out) => {
            println!("{out}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
