//! Batch tooling for the MTS3 engine: dataset generation, training,
//! evaluation and the ablation matrix. All outputs are files (datasets,
//! checkpoints, JSONL metrics, CSV tables); exit codes signal failure
//! class: 0 success, 2 usage/config, 3 data, 4 numeric failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use mts3::checkpoint::load_checkpoint;
use mts3::datagen::{gen_sine_terrain, gen_springmass, read_dataset, write_dataset};
use mts3::error::MtsError;
use mts3::model::{Mts3, Mts3Config};
use mts3::training::{
    evaluate, resume, run_ablations, train, write_ablation_outputs, write_metrics_csv,
    AblationPlan, TrainConfig,
};

#[derive(Parser)]
#[command(name = "mts3", version, about = "Multi time scale state space models")]
struct Cli {
    /// Worker threads for multi-run commands; 1 selects deterministic mode
    /// (wallclock fields zeroed). 0 uses all cores.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum System {
    Springmass,
    Terrain,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset in MTS3DAT1 format.
    GenData {
        #[arg(long, value_enum)]
        system: System,
        #[arg(long)]
        out: PathBuf,
        /// Number of trajectories.
        #[arg(long, default_value_t = 600)]
        traj: usize,
        /// Steps per trajectory.
        #[arg(long, default_value_t = 450)]
        len: usize,
        /// Seconds per step.
        #[arg(long, default_value_t = 0.02)]
        dt: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Steps between hidden-parameter switches (springmass).
        #[arg(long, default_value_t = 150)]
        regime_period: usize,
    },
    /// Train a model; writes checkpoints and a JSONL metrics log.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// JSON config; defaults are used (and echoed into the checkpoint)
        /// when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Continue from ckpt_last.mts3ckp in the output directory.
        #[arg(long, default_value_t = false)]
        resume: bool,
    },
    /// Evaluate a checkpoint: per-horizon RMSE and NLL.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        /// Comma-separated horizon buckets, in steps.
        #[arg(long, default_value = "30,100,300")]
        horizons: String,
        #[arg(long)]
        out: PathBuf,
        /// Override the context length (windows) stored in the checkpoint.
        #[arg(long)]
        context_windows: Option<usize>,
    },
    /// Train and evaluate the ablation/baseline matrix.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        /// Held-out data; when omitted the input is split 5:1.
        #[arg(long)]
        test_data: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

/// On-disk JSON config: model and training sections plus the ablation plan.
/// Unknown keys anywhere are rejected.
#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct FileConfig {
    model: Mts3Config,
    train: TrainConfig,
    seeds: Option<Vec<u64>>,
    h_sweep: Option<Vec<usize>>,
    horizons: Option<Vec<usize>>,
}

impl FileConfig {
    fn load(path: Option<&PathBuf>) -> Result<Self, MtsError> {
        let mut cfg = match path {
            None => FileConfig::default(),
            Some(p) => {
                let text = std::fs::read_to_string(p)?;
                serde_json::from_str(&text)
                    .map_err(|e| MtsError::Config(format!("config {}: {e}", p.display())))?
            }
        };
        if let Ok(seed) = std::env::var("MTS3_SEED") {
            let parsed = seed
                .parse::<u64>()
                .map_err(|_| MtsError::Config(format!("MTS3_SEED not a u64: {seed}")))?;
            cfg.model.seed = parsed;
        }
        Ok(cfg)
    }
}

fn exit_code_for(err: &MtsError) -> u8 {
    match err {
        MtsError::Config(_) | MtsError::DimMismatch(_) => 2,
        MtsError::Data(_) | MtsError::Io(_) | MtsError::Json(_) => 3,
        MtsError::NonFiniteLoss { .. }
        | MtsError::NonFiniteGradient { .. }
        | MtsError::NotPositiveDefinite { .. }
        | MtsError::NonPositiveVariance { .. } => 4,
    }
}

fn run(cli: Cli) -> Result<(), MtsError> {
    let threads = if cli.threads == 0 {
        std::thread::available_parallelism()
            .map(|n| n.get())
            .unwrap_or(1)
    } else {
        cli.threads
    };
    let deterministic = threads == 1;

    match cli.cmd {
        Cmd::GenData {
            system,
            out,
            traj,
            len,
            dt,
            seed,
            regime_period,
        } => {
            let batch = match system {
                System::Springmass => gen_springmass(traj, len, dt, regime_period, seed),
                System::Terrain => gen_sine_terrain(traj, len, dt, seed),
            };
            write_dataset(&batch, &out)?;
            let bytes = std::fs::metadata(&out)?.len();
            println!(
                "wrote {}: {} trajectories x {} steps, d_obs={}, d_act={}, {} bytes",
                out.display(),
                batch.n_traj,
                batch.t,
                batch.d_obs,
                batch.d_act,
                bytes
            );
            let mean_abs: f64 =
                batch.obs.iter().map(|x| x.abs()).sum::<f64>() / batch.obs.len() as f64;
            println!("observation mean |x| = {mean_abs:.4}");
            Ok(())
        }
        Cmd::Train {
            data,
            config,
            out,
            resume: do_resume,
        } => {
            let batch = read_dataset(&data)?;
            std::fs::create_dir_all(&out)?;
            if do_resume {
                let outcome = resume(&out, &batch, deterministic)?;
                println!(
                    "resumed: best val NLL {:.4} at epoch {}",
                    outcome.best_val_nll, outcome.best_epoch
                );
                return Ok(());
            }
            let mut cfg = FileConfig::load(config.as_ref())?;
            cfg.model.d_obs = batch.d_obs;
            cfg.model.d_act = batch.d_act;
            let mut model = Mts3::new(cfg.model.clone())?;
            let outcome = train(&mut model, &batch, &cfg.train, Some(&out), deterministic, 0)?;
            println!(
                "trained ({}): best val NLL {:.4} at epoch {}",
                if outcome.stopped_early {
                    "early stop"
                } else {
                    "full run"
                },
                outcome.best_val_nll,
                outcome.best_epoch
            );
            println!("checkpoints and metrics.jsonl in {}", out.display());
            Ok(())
        }
        Cmd::Eval {
            data,
            ckpt,
            horizons,
            out,
            context_windows,
        } => {
            let batch = read_dataset(&data)?;
            let loaded = load_checkpoint(&ckpt)?;
            let horizons: Vec<usize> = horizons
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse::<usize>()
                        .map_err(|_| MtsError::Config(format!("bad horizon: {s}")))
                })
                .collect::<Result<_, _>>()?;
            let context = context_windows.unwrap_or(loaded.meta.train.context_windows);
            let metrics = evaluate(&loaded.model, &batch, &loaded.meta.norm, &horizons, context)?;
            write_metrics_csv(&metrics, &out)?;
            for m in &metrics {
                println!(
                    "horizon {:4}  rmse {:.6}  nll {:.6}",
                    m.horizon, m.rmse, m.nll
                );
            }
            println!("table written to {}", out.display());
            Ok(())
        }
        Cmd::Ablate {
            data,
            test_data,
            config,
            out,
        } => {
            let cfg = FileConfig::load(config.as_ref())?;
            let (train_batch, test_batch) = match test_data {
                Some(p) => (read_dataset(&data)?, read_dataset(&p)?),
                None => {
                    let all = read_dataset(&data)?;
                    let n_train = all.n_traj * 5 / 6;
                    all.split(n_train)
                }
            };
            let mut model_cfg = cfg.model.clone();
            model_cfg.d_obs = train_batch.d_obs;
            model_cfg.d_act = train_batch.d_act;
            let mut plan = AblationPlan::default();
            if let Some(s) = cfg.seeds {
                plan.seeds = s;
            }
            if let Some(h) = cfg.h_sweep {
                plan.h_sweep = h;
            }
            if let Some(hz) = cfg.horizons {
                plan.horizons = hz;
            }
            let rows = run_ablations(
                &train_batch,
                &test_batch,
                &model_cfg,
                &cfg.train,
                &plan,
                threads,
            )?;
            write_ablation_outputs(&rows, &out)?;
            println!("variant,h,seed,horizon,rmse,nll");
            for r in &rows {
                for m in &r.metrics {
                    println!(
                        "{},{},{},{},{:.6},{:.6}",
                        r.variant, r.h, r.seed, m.horizon, m.rmse, m.nll
                    );
                }
            }
            println!("tables written to {}", out.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
