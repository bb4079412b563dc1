//! Training loop, evaluation harness and the ablation matrix.
//!
//! Training follows the imputation scheme: per minibatch a fresh mask hides
//! a fraction of steps and whole windows beyond a context prefix, the filter
//! predicts every next observation, and the Gaussian likelihood is
//! backpropagated through the inference equations with the fast-scale carry
//! cut at window boundaries. Validation and evaluation use the prediction
//! protocol instead: observed context, fully masked future.

use std::collections::VecDeque;
use std::io::Write;
use std::path::Path;
use std::sync::Mutex;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::datagen::{denormalize_obs, normalize, normalize_with, NormStats, TrajectoryBatch};
use crate::error::{MtsError, Result};
use crate::model::{
    context_mask, first_non_finite_step, gaussian_nll, next_step_targets, sample_imputation_mask,
    BatchInput, Mts3, Mts3Config, VariantFlags, LN_2PI,
};
use crate::nn::ParamStore;
use crate::tensor::Tape;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub clip_norm: f64,
    /// Early-stopping patience on validation NLL.
    pub patience: usize,
    pub val_fraction: f64,
    /// Context prefix, in windows, always observed (and used as the
    /// evaluation context).
    pub context_windows: usize,
    pub mask_fraction: f64,
    pub mask_window_fraction: f64,
    /// Probability of masking the whole tail after a random cut, the
    /// training analogue of the evaluation protocol.
    pub mask_suffix_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 32,
            lr: 3e-3,
            clip_norm: 5.0,
            patience: 15,
            val_fraction: 0.1,
            context_windows: 2,
            mask_fraction: 0.5,
            mask_window_fraction: 0.25,
            mask_suffix_fraction: 0.25,
        }
    }
}

/// One line of the newline-delimited JSON metrics log.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub split: String,
    pub nll: f64,
    pub rmse: f64,
    pub wallclock: f64,
}

pub struct TrainOutcome {
    pub records: Vec<MetricsRecord>,
    pub best_epoch: usize,
    pub best_val_nll: f64,
    pub stats: NormStats,
    pub stopped_early: bool,
}

/// Step-major batch assembly; mask rows combine the dataset's valid flags
/// with the per-trajectory imputation mask. The length is truncated to a
/// multiple of the window.
pub fn gather_batch(
    data: &TrajectoryBatch,
    idx: &[usize],
    masks: &[Vec<bool>],
    h: usize,
) -> BatchInput {
    let b = idx.len();
    let t = data.t - data.t % h;
    assert!(t > 0, "trajectories shorter than one window");
    let (d_o, d_a) = (data.d_obs, data.d_act);
    let mut input = BatchInput {
        n_traj: b,
        t,
        d_obs: d_o,
        d_act: d_a,
        obs: vec![0.0; t * b * d_o],
        acts: vec![0.0; t * b * d_a],
        mask: vec![0.0; t * b],
    };
    for s in 0..t {
        for (i, &traj) in idx.iter().enumerate() {
            let src_o = (traj * data.t + s) * d_o;
            let dst_o = (s * b + i) * d_o;
            input.obs[dst_o..dst_o + d_o].copy_from_slice(&data.obs[src_o..src_o + d_o]);
            let src_a = (traj * data.t + s) * d_a;
            let dst_a = (s * b + i) * d_a;
            input.acts[dst_a..dst_a + d_a].copy_from_slice(&data.acts[src_a..src_a + d_a]);
            let ok = data.valid[traj * data.t + s] == 1 && masks[i][s];
            input.mask[s * b + i] = if ok { 1.0 } else { 0.0 };
        }
    }
    input
}

/// RMSE and NLL on denormalized observations for target steps
/// `[context, context + horizon)`, one row per requested horizon.
#[derive(Clone, Debug, Serialize)]
pub struct HorizonMetrics {
    pub horizon: usize,
    pub rmse: f64,
    pub nll: f64,
}

/// Metrics from chunked filter predictions against raw (unnormalized)
/// observations. `preds` are normalized; `raw` holds the original batch in
/// the same trajectory order as filtering.
#[allow(clippy::too_many_arguments)]
fn bucket_metrics(
    pred_mean: &[f64],
    pred_var: &[f64],
    raw: &TrajectoryBatch,
    idx: &[usize],
    stats: &NormStats,
    t: usize,
    context: usize,
    horizons: &[usize],
) -> Vec<HorizonMetrics> {
    let b = idx.len();
    let d = raw.d_obs;
    let mut mean_den = pred_mean.to_vec();
    denormalize_obs(&mut mean_den, stats);
    // predictions exist for target steps 1..=t-1 (exclusive bound t)
    horizons
        .iter()
        .map(|&hz| {
            let hi = (context + hz).min(t);
            if context + hz > t {
                eprintln!(
                    "warning: horizon {hz} exceeds available steps; truncated to {}",
                    hi.saturating_sub(context)
                );
            }
            let mut sse = 0.0;
            let mut nll = 0.0;
            let mut count = 0usize;
            for tg in context..hi {
                for (i, &traj) in idx.iter().enumerate() {
                    let row = (tg - 1) * b + i;
                    let truth = raw.obs_at(traj, tg);
                    for j in 0..d {
                        let m = mean_den[row * d + j];
                        let v = pred_var[row * d + j] * stats.obs_std[j] * stats.obs_std[j];
                        let r = truth[j] - m;
                        sse += r * r;
                        nll += 0.5 * (LN_2PI + v.ln() + r * r / v);
                        count += 1;
                    }
                }
            }
            let n = count.max(1) as f64;
            HorizonMetrics {
                horizon: hz,
                rmse: (sse / n).sqrt(),
                nll: nll / n,
            }
        })
        .collect()
}

/// Evaluate a trained model: filter the context, predict the masked future,
/// report denormalized RMSE and NLL per horizon bucket.
pub fn evaluate(
    model: &Mts3,
    test: &TrajectoryBatch,
    stats: &NormStats,
    horizons: &[usize],
    context_windows: usize,
) -> Result<Vec<HorizonMetrics>> {
    let h = model.cfg.h;
    let t = test.t - test.t % h;
    let context = context_windows * h;
    if context >= t {
        return Err(MtsError::Config(format!(
            "context of {context} steps leaves no future in {t}-step trajectories"
        )));
    }
    let normed = normalize_with(test.clone(), stats);
    let idx: Vec<usize> = (0..test.n_traj).collect();
    let cmask = context_mask(t, context);
    let masks: Vec<Vec<bool>> = vec![cmask; test.n_traj];
    let input = gather_batch(&normed, &idx, &masks, h);
    let out = model.filter_trajectory(&input);
    Ok(bucket_metrics(
        &out.pred_mean,
        &out.pred_var,
        test,
        &idx,
        stats,
        t,
        context,
        horizons,
    ))
}

struct EarlyStopper {
    best: f64,
    best_epoch: usize,
    wait: usize,
    patience: usize,
    best_params: Option<ParamStore>,
}

impl EarlyStopper {
    fn observe(&mut self, epoch: usize, val: f64, store: &ParamStore) -> bool {
        if val < self.best {
            self.best = val;
            self.best_epoch = epoch;
            self.wait = 0;
            self.best_params = Some(store.clone());
            false
        } else {
            self.wait += 1;
            self.wait > self.patience
        }
    }
}

/// Train with imputation masking, Adam and gradient clipping. Writes
/// `metrics.jsonl`, `ckpt_best.mts3ckp` and `ckpt_last.mts3ckp` into
/// `out_dir` when given. In `deterministic` mode wallclock fields are
/// written as 0.0 so logs are byte-identical across runs.
pub fn train(
    model: &mut Mts3,
    data: &TrajectoryBatch,
    tc: &TrainConfig,
    out_dir: Option<&Path>,
    deterministic: bool,
    start_epoch: usize,
) -> Result<TrainOutcome> {
    let h = model.cfg.h;
    let seed = model.cfg.seed;
    model.store.adam.lr = tc.lr;

    // trajectory-level split, seed-deterministic
    let mut split_rng = ChaCha12Rng::seed_from_u64(seed ^ 0x51D1_7EA5);
    let mut order: Vec<usize> = (0..data.n_traj).collect();
    shuffle(&mut order, &mut split_rng);
    let n_val = ((data.n_traj as f64 * tc.val_fraction).round() as usize)
        .clamp(1, data.n_traj.saturating_sub(1));
    let val_idx: Vec<usize> = order[..n_val].to_vec();
    let train_idx: Vec<usize> = order[n_val..].to_vec();

    let train_raw = data.select(&train_idx);
    let val_raw = data.select(&val_idx);
    let (train_norm, stats) = normalize(train_raw.clone());
    let val_norm = normalize_with(val_raw.clone(), &stats);

    let t = train_norm.t - train_norm.t % h;
    let context = (tc.context_windows * h).min(t.saturating_sub(h));
    let (mask_frac, win_frac, suffix_frac) = if model.cfg.variant.no_imputation {
        (0.0, 0.0, 0.0)
    } else {
        (
            tc.mask_fraction,
            tc.mask_window_fraction,
            tc.mask_suffix_fraction,
        )
    };

    let mut rng = ChaCha12Rng::seed_from_u64(seed ^ 0x7EA1_1077);
    let mut records: Vec<MetricsRecord> = Vec::new();
    let mut stopper = EarlyStopper {
        best: f64::INFINITY,
        best_epoch: start_epoch,
        wait: 0,
        patience: tc.patience,
        best_params: None,
    };
    let mut stopped_early = false;
    let t0 = Instant::now();
    let clock = |t0: &Instant| if deterministic { 0.0 } else { t0.elapsed().as_secs_f64() };

    let all_val: Vec<usize> = (0..val_norm.n_traj).collect();
    let val_cmask = vec![context_mask(t, context); val_norm.n_traj];
    let val_input = gather_batch(&val_norm, &all_val, &val_cmask, h);
    // the last step of the trajectory has no next-step target
    let val_horizon = t - context - 1;

    for epoch in start_epoch..tc.epochs {
        let mut idx: Vec<usize> = (0..train_norm.n_traj).collect();
        shuffle(&mut idx, &mut rng);
        let mut train_nll_sum = 0.0;
        let mut train_sse = 0.0;
        let mut train_count = 0.0;

        for (batch_no, chunk) in idx.chunks(tc.batch_size).enumerate() {
            // imputation mask resampled for every minibatch
            let masks: Vec<Vec<bool>> = chunk
                .iter()
                .map(|_| sample_imputation_mask(t, h, context, mask_frac, win_frac, suffix_frac, &mut rng))
                .collect();
            let input = gather_batch(&train_norm, chunk, &masks, h);
            let (targets, weights) = next_step_targets(&input);

            let tape = Tape::new();
            let bind = model.store.bind(&tape);
            let (task0, state0) = crate::model::init_beliefs(&model.cfg);
            let graph = model.filter_batch(&tape, &bind, &input, &state0, &task0, true, true);
            let loss = gaussian_nll(&tape, graph.pred_mean, graph.pred_var, &targets, &weights);
            let loss_val = loss.item();
            if !loss_val.is_finite() {
                let step = first_non_finite_step(
                    &graph.pred_mean.value(),
                    &graph.pred_var.value(),
                    input.n_traj,
                    input.d_obs,
                );
                return Err(MtsError::NonFiniteLoss {
                    epoch,
                    batch: batch_no,
                    step,
                });
            }
            let grads = tape.backward(loss);
            let mut pgrads = model.store.gather_grads(&bind, &grads);
            ParamStore::clip_gradients(&mut pgrads, tc.clip_norm);
            model.store.adam_step(&pgrads)?;

            let n_rows: f64 = weights.iter().sum();
            train_nll_sum += loss_val * n_rows;
            train_count += n_rows;
            // denormalized train RMSE over the same next-step targets
            let pm = graph.pred_mean.value();
            let d = input.d_obs;
            for (row, &w) in weights.iter().enumerate() {
                if w > 0.0 {
                    for j in 0..d {
                        let r = (targets[row * d + j] - pm[row * d + j]) * stats.obs_std[j];
                        train_sse += r * r;
                    }
                }
            }
        }

        let train_nll = train_nll_sum / train_count.max(1.0);
        let train_rmse = (train_sse / (train_count.max(1.0) * train_norm.d_obs as f64)).sqrt();
        records.push(MetricsRecord {
            epoch,
            split: "train".into(),
            nll: train_nll,
            rmse: train_rmse,
            wallclock: clock(&t0),
        });

        let val_out = model.filter_trajectory(&val_input);
        let vm = bucket_metrics(
            &val_out.pred_mean,
            &val_out.pred_var,
            &val_raw,
            &all_val,
            &stats,
            t,
            context,
            &[val_horizon],
        );
        let val_nll = vm[0].nll;
        records.push(MetricsRecord {
            epoch,
            split: "val".into(),
            nll: val_nll,
            rmse: vm[0].rmse,
            wallclock: clock(&t0),
        });

        let is_best = val_nll < stopper.best;
        let stop = stopper.observe(epoch, val_nll, &model.store);
        if let Some(dir) = out_dir {
            if is_best {
                save_checkpoint(
                    &dir.join("ckpt_best.mts3ckp"),
                    model,
                    tc,
                    &stats,
                    epoch,
                    stopper.best,
                    seed,
                    rng.get_word_pos(),
                )?;
            }
            save_checkpoint(
                &dir.join("ckpt_last.mts3ckp"),
                model,
                tc,
                &stats,
                epoch,
                stopper.best,
                seed,
                rng.get_word_pos(),
            )?;
        }
        if stop {
            stopped_early = true;
            break;
        }
    }

    // leave the best-validation parameters in the model
    if let Some(best) = stopper.best_params {
        let adam = model.store.adam.clone();
        model.store = best;
        model.store.adam = adam;
    }
    if let Some(dir) = out_dir {
        let mut f = std::fs::File::create(dir.join("metrics.jsonl"))?;
        for r in &records {
            serde_json::to_writer(&mut f, r)?;
            f.write_all(b"\n")?;
        }
    }
    Ok(TrainOutcome {
        records,
        best_epoch: stopper.best_epoch,
        best_val_nll: stopper.best,
        stats,
        stopped_early,
    })
}

/// Resume training from `ckpt_last.mts3ckp` in `dir`.
pub fn resume(dir: &Path, data: &TrajectoryBatch, deterministic: bool) -> Result<TrainOutcome> {
    let ck = load_checkpoint(&dir.join("ckpt_last.mts3ckp"))?;
    let mut model = ck.model;
    let tc = ck.meta.train.clone();
    let start = ck.meta.epoch + 1;
    train(&mut model, data, &tc, Some(dir), deterministic, start)
}

fn shuffle(v: &mut [usize], rng: &mut ChaCha12Rng) {
    for i in (1..v.len()).rev() {
        let j = rng.gen_range(0..=i);
        v.swap(i, j);
    }
}

/// One cell of the ablation/baseline matrix.
#[derive(Clone, Debug, Serialize)]
pub struct AblationRow {
    pub variant: String,
    pub h: usize,
    pub seed: u64,
    pub metrics: Vec<HorizonMetrics>,
}

pub struct AblationPlan {
    pub variants: Vec<(String, VariantFlags)>,
    pub h_sweep: Vec<usize>,
    pub seeds: Vec<u64>,
    pub horizons: Vec<usize>,
}

impl Default for AblationPlan {
    fn default() -> Self {
        Self {
            variants: vec![
                ("full".into(), VariantFlags::default()),
                (
                    "no_task".into(),
                    VariantFlags {
                        no_task: true,
                        ..Default::default()
                    },
                ),
                (
                    "no_action_abstraction".into(),
                    VariantFlags {
                        no_action_abstraction: true,
                        ..Default::default()
                    },
                ),
                (
                    "identity_obs_model".into(),
                    VariantFlags {
                        identity_obs_model: true,
                        ..Default::default()
                    },
                ),
                (
                    "no_imputation".into(),
                    VariantFlags {
                        no_imputation: true,
                        ..Default::default()
                    },
                ),
            ],
            h_sweep: vec![2, 5, 15, 45, 150],
            seeds: vec![0, 1, 2],
            horizons: vec![30, 100, 300],
        }
    }
}

struct AblationJob {
    variant: String,
    flags: VariantFlags,
    h: usize,
    seed: u64,
}

/// Train and evaluate every variant and every H of the sweep, each over all
/// seeds, in a small worker pool. All jobs share the same data; contexts are
/// held comparable in *steps* across different H.
pub fn run_ablations(
    train_data: &TrajectoryBatch,
    test_data: &TrajectoryBatch,
    model_cfg: &Mts3Config,
    tc: &TrainConfig,
    plan: &AblationPlan,
    threads: usize,
) -> Result<Vec<AblationRow>> {
    let mut jobs: VecDeque<AblationJob> = VecDeque::new();
    for &seed in &plan.seeds {
        for (name, flags) in &plan.variants {
            jobs.push_back(AblationJob {
                variant: name.clone(),
                flags: *flags,
                h: model_cfg.h,
                seed,
            });
        }
        for &h in &plan.h_sweep {
            if h != model_cfg.h {
                jobs.push_back(AblationJob {
                    variant: "full".into(),
                    flags: VariantFlags::default(),
                    h,
                    seed,
                });
            }
        }
    }
    let context_steps = tc.context_windows * model_cfg.h;
    let queue = Mutex::new(jobs);
    let results: Mutex<Vec<AblationRow>> = Mutex::new(Vec::new());
    let errors: Mutex<Vec<MtsError>> = Mutex::new(Vec::new());
    let n_workers = threads.max(1);

    std::thread::scope(|scope| {
        for _ in 0..n_workers {
            scope.spawn(|| loop {
                let job = match queue.lock().unwrap().pop_front() {
                    Some(j) => j,
                    None => break,
                };
                let run = || -> Result<AblationRow> {
                    let mut cfg = model_cfg.clone();
                    cfg.variant = job.flags;
                    cfg.h = job.h;
                    cfg.seed = job.seed;
                    let mut job_tc = tc.clone();
                    job_tc.context_windows =
                        ((context_steps as f64 / job.h as f64).round() as usize).max(1);
                    let mut model = Mts3::new(cfg)?;
                    let outcome = train(&mut model, train_data, &job_tc, None, true, 0)?;
                    let metrics = evaluate(
                        &model,
                        test_data,
                        &outcome.stats,
                        &plan.horizons,
                        job_tc.context_windows,
                    )?;
                    Ok(AblationRow {
                        variant: job.variant.clone(),
                        h: job.h,
                        seed: job.seed,
                        metrics,
                    })
                };
                match run() {
                    Ok(row) => results.lock().unwrap().push(row),
                    Err(e) => errors.lock().unwrap().push(e),
                }
            });
        }
    });

    let errs = errors.into_inner().unwrap();
    if let Some(e) = errs.into_iter().next() {
        return Err(e);
    }
    let mut rows = results.into_inner().unwrap();
    rows.sort_by(|a, b| {
        (a.variant.as_str(), a.h, a.seed).cmp(&(b.variant.as_str(), b.h, b.seed))
    });
    Ok(rows)
}

/// Write ablation rows as a machine-readable CSV:
/// `variant,h,seed,horizon,rmse,nll`.
pub fn write_ablation_csv(rows: &[AblationRow], path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "variant,h,seed,horizon,rmse,nll")?;
    for r in rows {
        for m in &r.metrics {
            writeln!(
                f,
                "{},{},{},{},{:.6},{:.6}",
                r.variant, r.h, r.seed, m.horizon, m.rmse, m.nll
            )?;
        }
    }
    Ok(())
}

pub fn write_metrics_csv(metrics: &[HorizonMetrics], path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "horizon,rmse,nll")?;
    for m in metrics {
        writeln!(f, "{},{:.6},{:.6}", m.horizon, m.rmse, m.nll)?;
    }
    Ok(())
}

/// Output directory layout for `ablate`: one CSV per variant plus the
/// merged table.
pub fn write_ablation_outputs(rows: &[AblationRow], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_ablation_csv(rows, &dir.join("ablations.csv"))?;
    let mut variants: Vec<String> = rows.iter().map(|r| r.variant.clone()).collect();
    variants.sort();
    variants.dedup();
    for v in variants {
        let sub: Vec<AblationRow> = rows.iter().filter(|r| r.variant == v).cloned().collect();
        write_ablation_csv(&sub, &dir.join(format!("{v}.csv")))?;
    }
    Ok(())
}
