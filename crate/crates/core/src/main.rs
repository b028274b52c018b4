use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use parking_lot::Mutex;

use safety_credit::continual::FeedbackBuffer;
use safety_credit::experiment::service::{serve, ServiceState};
use safety_credit::experiment::{
    pretrain, run_analyze, run_eval, run_seed, seed_dir, AnalysisConfig, LabelingMode, RunConfig, RunHooks, RunStatus,
    RunSummary, SeedResult,
};
use safety_credit::safety::save_labeled;

#[derive(Parser)]
#[command(name = "safety-credit", about = "Safe RL from trajectory-level safety labels")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain the learned constraint on scripted offline data.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run the full training pipeline for every configured seed.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Also serve the label API; required for human labeling.
        #[arg(long)]
        serve: Option<SocketAddr>,
    },
    /// Evaluate a trained seed on fresh episodes.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        episodes: usize,
    },
    /// Credit-assignment diagnostics for an SSV checkpoint.
    Analyze {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        trajectories: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// TOML file with analysis settings.
        #[arg(long)]
        settings: Option<PathBuf>,
    },
    /// Serve a persisted feedback buffer.
    Serve {
        #[arg(long)]
        buffer: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8787")]
        addr: SocketAddr,
        #[arg(long)]
        config: PathBuf,
    },
}

fn load_config(path: &PathBuf) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(path)?;
    cfg.apply_overrides(|k| std::env::var(k).ok())?;
    Ok(cfg)
}

fn print_json<T: serde::Serialize>(v: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn train(cfg: &RunConfig, addr: Option<SocketAddr>) -> Result<()> {
    let human = cfg.labeling_mode() == LabelingMode::Human;
    if human && addr.is_none() {
        bail!("human labeling needs --serve");
    }
    let Some(addr) = addr else {
        let summary = safety_credit::experiment::run_train(cfg)?;
        return print_json(&summary);
    };
    let rt = tokio::runtime::Runtime::new()?;
    let geometry = cfg.env.build()?.geometry();
    let mut results: Vec<SeedResult> = Vec::new();
    for &seed in &cfg.seeds {
        let buffer = FeedbackBuffer::new(Vec::new()).shared();
        let status = Arc::new(Mutex::new(RunStatus::default()));
        let state = ServiceState {
            buffer: buffer.clone(),
            status: status.clone(),
            geometry: geometry.clone(),
        };
        let server = rt.spawn(serve(state, addr));
        let hooks = RunHooks {
            pretrained: None,
            buffer: Some(buffer.clone()),
            status: Some(status),
        };
        let res = run_seed(cfg, seed, hooks);
        server.abort();
        let _ = rt.block_on(server);
        buffer.lock().save(&seed_dir(cfg, seed).join("buffer"))?;
        results.push(res?);
    }
    let summary = RunSummary::from_results(cfg.mode, results);
    let path = cfg.output_dir.join("summary.json");
    std::fs::write(&path, serde_json::to_string_pretty(&summary)?).with_context(|| path.display().to_string())?;
    print_json(&summary)
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Pretrain { config } => {
            let cfg = load_config(&config)?;
            for &seed in &cfg.seeds {
                let pre = pretrain(&cfg, seed)?;
                let dir = seed_dir(&cfg, seed).join("pretrain");
                std::fs::create_dir_all(&dir)?;
                pre.model.to_checkpoint().save(&dir.join("model.json"))?;
                save_labeled(&dir, "offline", &pre.dataset)?;
                std::fs::write(dir.join("report.json"), serde_json::to_string_pretty(&pre.report)?)?;
                log::info!("seed {seed}: holdout accuracy {:?}", pre.report.holdout_accuracy);
            }
        }
        Command::Train { config, serve } => train(&load_config(&config)?, serve)?,
        Command::Eval { config, seed, episodes } => {
            let cfg = load_config(&config)?;
            let dir = seed_dir(&cfg, seed);
            let labeled = std::fs::read_to_string(dir.join("final_eval.json"))
                .ok()
                .and_then(|t| serde_json::from_str::<SeedResult>(&t).ok())
                .map_or(0, |r| r.labeled);
            let mut env = cfg.env.clone();
            env.seed = seed.wrapping_add(cfg.eval.seed_offset);
            let report = run_eval(&dir, &env, episodes, env.seed, labeled)?;
            print_json(&report)?;
        }
        Command::Analyze {
            checkpoint,
            trajectories,
            out,
            settings,
        } => {
            let cfg: AnalysisConfig = match settings {
                Some(p) => toml::from_str(&std::fs::read_to_string(&p)?)?,
                None => AnalysisConfig::default(),
            };
            let report = run_analyze(&checkpoint, &trajectories, &cfg, &out)?;
            log::info!(
                "{} trajectories, mean flat ratio {:?}, peak-in-range {:?}",
                report.trajectories.len(),
                report.mean_flat_ratio,
                report.peak_in_range_fraction
            );
        }
        Command::Serve { buffer, addr, config } => {
            let cfg = load_config(&config)?;
            let buf = FeedbackBuffer::load(&buffer)?.shared();
            let state = ServiceState {
                buffer: buf,
                status: Arc::new(Mutex::new(RunStatus::default())),
                geometry: cfg.env.build()?.geometry(),
            };
            tokio::runtime::Runtime::new()?.block_on(serve(state, addr))?;
        }
    }
    Ok(())
}
