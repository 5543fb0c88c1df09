//! The `clfb` command line.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use clfb_core::harness::{
    self, data_summary, gen_data, run_improve, run_learn_reward, run_train_latent, Dataset, ExperimentConfig,
    RewardMethod, CHECKPOINT_FILE,
};
use clfb_core::EncoderPair;
use clfb_gateway::{AppState, Assets};

pub const DATA_DIR: &str = "data";
pub const FROZEN_CHECKPOINT_FILE: &str = "checkpoint_frozen.json";

#[derive(Debug, Parser)]
#[command(name = "clfb", version, about = "Comparative language feedback workbench")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Cmd,
}

#[derive(Debug, Args)]
pub struct Global {
    /// TOML experiment config; defaults apply to anything left out.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the master seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Overrides the output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Cmd {
    /// Generate the trajectory pool, splits and labelled triplets.
    GenData,
    /// Train the trajectory and language encoders.
    TrainLatent {
        /// Keep the pretrained language encoder frozen throughout.
        #[arg(long)]
        frozen_language: bool,
        /// Continue from the existing checkpoint.
        #[arg(long)]
        resume: bool,
    },
    /// Run language-driven improvement against simulated humans.
    Improve {
        /// Encoder checkpoint (default: the co-finetuned one in the output directory).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Learn rewards from simulated language or comparison feedback.
    LearnReward {
        /// language, comparison, ablation-explicit, ablation-implicit or all.
        #[arg(long, default_value = "all")]
        method: String,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Serve live sessions over HTTP.
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

pub fn load_config(g: &Global) -> Result<ExperimentConfig> {
    let mut cfg = match &g.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = g.seed {
        cfg.master_seed = seed;
    }
    if let Some(out) = &g.out {
        cfg.output_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn read_data(cfg: &ExperimentConfig) -> Result<Dataset> {
    let dir = cfg.output_dir.join(DATA_DIR);
    Dataset::read(&dir).with_context(|| format!("reading data from {} (run `clfb gen-data` first)", dir.display()))
}

fn checkpoint_path(cfg: &ExperimentConfig, given: &Option<PathBuf>) -> PathBuf {
    given.clone().unwrap_or_else(|| cfg.output_dir.join(CHECKPOINT_FILE))
}

fn read_encoder(path: &Path) -> Result<EncoderPair> {
    if !path.exists() {
        bail!("no encoder checkpoint at {} (run `clfb train-latent` first)", path.display());
    }
    Ok(harness::read_checkpoint(path)?.encoder)
}

fn methods(arg: &str) -> Result<Vec<RewardMethod>> {
    if arg == "all" {
        return Ok(RewardMethod::ALL.to_vec());
    }
    arg.split(',').map(|m| m.trim().parse().map_err(anyhow::Error::from)).collect()
}

pub fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli.global)?;
    let out = cfg.output_dir.clone();
    match cli.command {
        Cmd::GenData => {
            let data = gen_data(&cfg)?;
            data.write(&out.join(DATA_DIR))?;
            let summary = data_summary(&data);
            summary.write(&out.join("data_summary.csv"))?;
            tracing::info!(trajectories = data.pool.len(), dir = %out.display(), "data written");
            print!("{}", summary.to_csv());
        }
        Cmd::TrainLatent { frozen_language, resume } => {
            let data = read_data(&cfg)?;
            let file = if frozen_language { FROZEN_CHECKPOINT_FILE } else { CHECKPOINT_FILE };
            let path = out.join(file);
            let start = if resume { Some(read_encoder(&path)?) } else { None };
            let (run, table) = run_train_latent(&cfg, &data, frozen_language, start)?;
            harness::write_json(&path, &harness::checkpoint_document(&cfg, &run))?;
            let method = if frozen_language { "frozen" } else { "cofinetune" };
            table.write(&out.join(format!("latent_{method}.csv")))?;
            let test = table.series("latent", method, &cfg.latent.seed.to_string(), "test_accuracy");
            tracing::info!(best_epoch = run.best_epoch, checkpoint = %path.display(), "encoders trained");
            if let Some((_, acc)) = test.last() {
                println!("test_accuracy {acc:.4}");
            }
        }
        Cmd::Improve { checkpoint } => {
            let data = read_data(&cfg)?;
            let enc = read_encoder(&checkpoint_path(&cfg, &checkpoint))?;
            let (summary, table) = run_improve(&cfg, &data, &enc)?;
            table.write(&out.join("improve.csv"))?;
            for (i, (m, s)) in summary.mean.iter().zip(&summary.std).enumerate() {
                println!("iteration {i:>2}  normalized_reward {m:.4} +/- {s:.4}");
            }
        }
        Cmd::LearnReward { method, checkpoint } => {
            let methods = methods(&method)?;
            let data = read_data(&cfg)?;
            let enc = read_encoder(&checkpoint_path(&cfg, &checkpoint))?;
            let (records, table) = run_learn_reward(&cfg, &data, &enc, &methods)?;
            table.write(&out.join("learn_reward.csv"))?;
            for r in &records {
                let last = r.run.checkpoints.last().expect("runs start with a checkpoint");
                println!(
                    "{:<18} {:<6} queries {:>3}  cross_entropy {:.4}  best_true_reward {:.4}",
                    r.method.name(),
                    r.label(),
                    last.queries,
                    last.cross_entropy,
                    last.best.normalized
                );
            }
        }
        Cmd::Serve { port, host, checkpoint } => {
            let path = checkpoint_path(&cfg, &checkpoint);
            let enc = read_encoder(&path).context("refusing to serve without trained encoders")?;
            let data = read_data(&cfg)?;
            let mut cfg = cfg;
            if cfg.serve.log_dir.is_none() {
                cfg.serve.log_dir = Some(out.join("sessions"));
            }
            let state = Arc::new(AppState::new(&cfg, Assets::new(&cfg, data, enc)?)?);
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::bind((host.as_str(), port)).await?;
                tracing::info!(addr = %listener.local_addr()?, "serving");
                clfb_gateway::serve(listener, state, async {
                    let _ = tokio::signal::ctrl_c().await;
                    tracing::info!("shutting down");
                })
                .await
            })?;
        }
    }
    Ok(())
}
