use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use distill::pipeline::{
    self, ensure_dir, evaluate, files, filter_dataset, harvest, EvalRow, HarvestConfig, LoadedPolicy, PipelineConfig,
    PolicyKind, Report,
};
use distill::ppo::{GaussianPolicy, PolicyCheckpoint};
use distill::trajstore::{load_dataset, save_dataset};
use distill::Error;

#[derive(Parser)]
#[command(name = "distill", version, about = "Distill risky PPO policies into diffusion policies")]
struct Cli {
    /// Pipeline configuration (JSON). Missing keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured base seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the configured output directory.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Only print warnings and errors.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the PPO baseline.
    TrainPpo {
        /// Also write successful training episodes to the success dataset.
        #[arg(long)]
        harvest: bool,
    },
    /// Roll out a PPO checkpoint with stochastic actions.
    Collect {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Exact number of episodes; otherwise the harvest section applies.
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Keep only successful episodes.
    Filter {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit the diffusion policy on a success dataset.
    TrainDiffusion {
        #[arg(long)]
        data: PathBuf,
    },
    /// Success rate of one policy on the evaluation seeds.
    Evaluate {
        #[arg(long)]
        policy: PolicyKind,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Comparison table from evaluation files.
    Report {
        #[arg(long, num_args = 1.., required = true)]
        rows: Vec<PathBuf>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Self::TrainPpo { .. } => "train-ppo",
            Self::Collect { .. } => "collect",
            Self::Filter { .. } => "filter",
            Self::TrainDiffusion { .. } => "train-diffusion",
            Self::Evaluate { .. } => "evaluate",
            Self::Report { .. } => "report",
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.quiet { "warn" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    let stage = cli.command.name();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let code = match err.downcast_ref::<Error>() {
                Some(e) => {
                    eprintln!("distill {stage}: error: {e}");
                    e.exit_code()
                }
                None => {
                    eprintln!("distill {stage}: error: {err:#}");
                    3
                }
            };
            ExitCode::from(code as u8)
        }
    }
}

fn load_config(cli: &Cli) -> Result<PipelineConfig, Error> {
    let mut cfg = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(dir) = &cli.out_dir {
        cfg.out_dir = dir.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Uses the checkpoint's task unless a config file names a different one.
fn task_config(cli: &Cli, cfg: &PipelineConfig, env_id: distill::envs::EnvId) -> Result<PipelineConfig, Error> {
    if cli.config.is_some() && cfg.env_id != env_id {
        return Err(Error::Config(format!(
            "checkpoint is for {env_id} but the config selects {}",
            cfg.env_id
        )));
    }
    let mut cfg = cfg.clone();
    cfg.env_id = env_id;
    Ok(cfg)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = load_config(&cli)?;
    let out_dir = cfg.out_dir.clone();
    match &cli.command {
        Command::TrainPpo { harvest } => {
            let trainer = pipeline::run_train_ppo(&cfg, *harvest)?;
            let last = trainer.curve().last().copied();
            println!(
                "trained {} for {} steps; rolling success {:.3}; wrote {}",
                cfg.env_id,
                trainer.timesteps(),
                last.map_or(f64::NAN, |r| r.success_rate),
                out_dir.join(files::PPO_CHECKPOINT).display()
            );
        }
        Command::Collect {
            checkpoint,
            episodes,
            out,
        } => {
            let ckpt = PolicyCheckpoint::load(checkpoint)?;
            let cfg = task_config(&cli, &cfg, ckpt.env_id)?;
            let policy = GaussianPolicy::from_checkpoint(&ckpt)?;
            let env = cfg.env();
            if policy.obs_dim() != env.obs_dim() || policy.action_dim() != env.action_dim() {
                return Err(Error::Config("checkpoint dimensions do not match the environment".into()).into());
            }
            let hcfg = episodes.map_or_else(|| cfg.harvest.clone(), HarvestConfig::episodes);
            let result = harvest(&policy, env, &hcfg, cfg.seed)?;
            let path = output_path(out.as_deref(), &out_dir, files::DATASET)?;
            save_dataset(&result.dataset, &path)?;
            println!(
                "episodes: {}, successful: {}, env steps: {}; wrote {}",
                result.dataset.len(),
                result.successes,
                result.env_steps,
                path.display()
            );
        }
        Command::Filter { input, out } => {
            let dataset = load_dataset(input)?;
            let (kept, summary) = filter_dataset(&dataset, cfg.harvest.min_success_warning)?;
            if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
                ensure_dir(parent)?;
            }
            save_dataset(&kept, out)?;
            println!("{summary}");
        }
        Command::TrainDiffusion { data } => {
            let dataset = load_dataset(data)?;
            let task = dataset.first().map_or(cfg.env_id, |t| t.env_id);
            let cfg = task_config(&cli, &cfg, task)?;
            pipeline::run_train_diffusion(&cfg, &dataset)?;
            println!("wrote {}", out_dir.join(files::DENOISER).display());
        }
        Command::Evaluate {
            policy,
            checkpoint,
            episodes,
        } => {
            let (env_id, loaded) = LoadedPolicy::load(*policy, checkpoint)?;
            let mut cfg = task_config(&cli, &cfg, env_id)?;
            if let Some(n) = episodes {
                cfg.eval.episodes = *n;
                cfg.eval.seeds = None;
                cfg.validate()?;
            }
            let seeds = cfg.eval.episode_seeds();
            let row = evaluate(*policy, &loaded, &mut cfg.env(), &seeds, &checkpoint.display().to_string())?;
            ensure_dir(&out_dir)?;
            let path = out_dir.join(files::eval(*policy));
            row.save(&path)?;
            println!(
                "{} {}: {}/{} = {:.3} [{:.3}, {:.3}]; wrote {}",
                row.task,
                row.policy,
                row.successes,
                row.n,
                row.rate,
                row.ci_low,
                row.ci_high,
                path.display()
            );
        }
        Command::Report { rows } => {
            let rows = rows
                .iter()
                .map(|p| EvalRow::load(p).with_context(|| format!("reading {}", p.display())))
                .collect::<anyhow::Result<Vec<_>>>()?;
            let report = Report::new(rows)?;
            ensure_dir(&out_dir)?;
            report.save(&out_dir)?;
            print!("{}", report.to_text());
        }
    }
    Ok(())
}

fn output_path(explicit: Option<&Path>, out_dir: &Path, default: &str) -> Result<PathBuf, Error> {
    let path = explicit.map_or_else(|| out_dir.join(default), Path::to_path_buf);
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        ensure_dir(parent)?;
    }
    Ok(path)
}
