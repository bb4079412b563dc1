//! Composition of the two time scales into the full model: windowing,
//! belief initialization, imputation-aware filtering over whole
//! trajectories, decoding, the training loss and the ablation variants.
//!
//! The filter runs batched: trajectories are flattened step-major
//! (`[T·B, d]`, block `s` holding all batch rows of step `s`), encoders run
//! once over the whole flattened array, and the recurrence slices per-step
//! rows back out. Prediction row `s` always decodes the prior belief of step
//! `s+1`, i.e. it predicts the *next* observation.

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MtsError, Result};
use crate::factored::FactoredCov;
use crate::fts::{task_coupling, window_rollforward, FtsNet, WindowStep};
use crate::gaussian::{DiagGaussian, FactoredBelief};
use crate::nn::{Activation, Binding, Mlp, ParamStore, VAR_FLOOR};
use crate::sts::{task_predict, task_update, task_update_identity, StsNet};
use crate::tensor::{Tape, Tensor};

pub const LN_2PI: f64 = 1.837877066409345483560659472811;

/// Ablation switches; the full model leaves all of them off.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VariantFlags {
    /// Drop the slow time scale entirely (single-timescale model, C = 0).
    pub no_task: bool,
    /// Keep the slow scale but give it no abstract actions.
    pub no_action_abstraction: bool,
    /// Full-rank observation model `h = I` with pure diagonal covariances.
    pub identity_obs_model: bool,
    /// Train on one-step-ahead prediction only (no imputation masking).
    pub no_imputation: bool,
}

/// Temporal encoding appended to set-encoder inputs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum TemporalEncoding {
    /// The single normalized scalar `t / H`.
    Normalized,
    /// `sin/cos` pairs of `2π·f·t/H`, `f = 1..=pairs`.
    Sinusoidal { pairs: usize },
}

impl TemporalEncoding {
    pub fn dim(&self) -> usize {
        match self {
            TemporalEncoding::Normalized => 1,
            TemporalEncoding::Sinusoidal { pairs } => 2 * pairs,
        }
    }

    fn fill(&self, row: &mut [f64], t_in_window: usize, h: usize) {
        let frac = (t_in_window + 1) as f64 / h as f64;
        match self {
            TemporalEncoding::Normalized => row[0] = frac,
            TemporalEncoding::Sinusoidal { pairs } => {
                for f in 0..*pairs {
                    let arg = 2.0 * std::f64::consts::PI * (f + 1) as f64 * frac;
                    row[2 * f] = arg.sin();
                    row[2 * f + 1] = arg.cos();
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Mts3Config {
    /// Observation dimension (taken from the dataset when zero).
    pub d_obs: usize,
    /// Action dimension (taken from the dataset when zero).
    pub d_act: usize,
    /// Latent observation dimension; the state is `2·d_z`.
    pub d_z: usize,
    /// Task latent half-dimension; the task is `2·d_l`. Must equal `d_z`
    /// unless `no_task`.
    pub d_l: usize,
    /// Fast steps per slow step (window length).
    pub h: usize,
    /// Seconds per fast step.
    pub dt: f64,
    pub enc_hidden: usize,
    pub set_hidden: usize,
    pub dec_hidden: usize,
    pub ctrl_hidden: usize,
    pub activation: Activation,
    pub temporal: TemporalEncoding,
    pub variant: VariantFlags,
    pub seed: u64,
}

impl Default for Mts3Config {
    fn default() -> Self {
        Self {
            d_obs: 0,
            d_act: 0,
            d_z: 15,
            d_l: 15,
            h: 15,
            dt: 0.02,
            enc_hidden: 120,
            set_hidden: 240,
            dec_hidden: 120,
            ctrl_hidden: 120,
            activation: Activation::Relu,
            temporal: TemporalEncoding::Normalized,
            variant: VariantFlags::default(),
            seed: 0,
        }
    }
}

impl Mts3Config {
    pub fn validate(&self) -> Result<()> {
        if self.h < 1 {
            return Err(MtsError::Config("h must be >= 1".into()));
        }
        if self.d_obs == 0 || self.d_act == 0 || self.d_z == 0 || self.d_l == 0 {
            return Err(MtsError::Config("all dimensions must be positive".into()));
        }
        if !self.variant.no_task && self.d_l != self.d_z {
            return Err(MtsError::Config(
                "d_l must equal d_z so the task coupling stays block-of-diagonals".into(),
            ));
        }
        Ok(())
    }

    /// Latent observation width (`2·d_z` under the full-rank model).
    pub fn w_dim(&self) -> usize {
        if self.variant.identity_obs_model {
            2 * self.d_z
        } else {
            self.d_z
        }
    }

    /// Abstract observation width.
    pub fn beta_dim(&self) -> usize {
        if self.variant.identity_obs_model {
            2 * self.d_l
        } else {
            self.d_l
        }
    }

    pub fn d_alpha(&self) -> usize {
        2 * self.d_l
    }
}

/// Discretization rule of thumb: the per-level window factor `T^(1/N)`.
pub fn suggest_window(t: usize, n_levels: usize) -> usize {
    assert!(t >= 1 && n_levels >= 2);
    (t as f64).powf(1.0 / n_levels as f64).round().max(1.0) as usize
}

/// Plain-value Gaussian belief, used to carry state across tapes.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BeliefValues {
    pub rows: usize,
    pub d: usize,
    pub mean_u: Vec<f64>,
    pub mean_l: Vec<f64>,
    pub su: Vec<f64>,
    pub sl: Vec<f64>,
    pub ss: Vec<f64>,
}

impl BeliefValues {
    /// Zero mean, `Σ = 10·I` initial belief.
    pub fn init(d: usize) -> Self {
        Self {
            rows: 1,
            d,
            mean_u: vec![0.0; d],
            mean_l: vec![0.0; d],
            su: vec![10.0; d],
            sl: vec![10.0; d],
            ss: vec![0.0; d],
        }
    }

    pub fn to_tensors<'t>(&self, tape: &'t Tape) -> FactoredBelief<'t> {
        FactoredBelief {
            mean_u: tape.leaf(self.rows, self.d, self.mean_u.clone()),
            mean_l: tape.leaf(self.rows, self.d, self.mean_l.clone()),
            cov: FactoredCov {
                su: tape.leaf(self.rows, self.d, self.su.clone()),
                sl: tape.leaf(self.rows, self.d, self.sl.clone()),
                ss: tape.leaf(self.rows, self.d, self.ss.clone()),
            },
        }
    }

    pub fn from_tensors(b: &FactoredBelief<'_>) -> Self {
        let rows = b.mean_u.rows().max(b.cov.su.rows()).max(b.cov.ss.rows());
        let d = b.mean_u.cols();
        // components may still sit at [1, d] through broadcasting; tile them
        let expand = |t: &Tensor<'_>| -> Vec<f64> {
            let v = t.value();
            if t.rows() == rows {
                v
            } else {
                let mut out = Vec::with_capacity(rows * d);
                for _ in 0..rows {
                    out.extend_from_slice(&v);
                }
                out
            }
        };
        Self {
            rows,
            d,
            mean_u: expand(&b.mean_u),
            mean_l: expand(&b.mean_l),
            su: expand(&b.cov.su),
            sl: expand(&b.cov.sl),
            ss: expand(&b.cov.ss),
        }
    }

    pub fn all_finite_positive(&self) -> bool {
        self.mean_u.iter().chain(&self.mean_l).all(|x| x.is_finite())
            && self.su.iter().chain(&self.sl).all(|x| x.is_finite() && *x > 0.0)
            && self.ss.iter().all(|x| x.is_finite())
    }
}

/// Initial beliefs for both scales.
pub fn init_beliefs(cfg: &Mts3Config) -> (BeliefValues, BeliefValues) {
    (BeliefValues::init(cfg.d_l), BeliefValues::init(cfg.d_z))
}

/// One minibatch flattened step-major: row `s·B + i` holds trajectory `i`
/// at step `s`.
#[derive(Clone)]
pub struct BatchInput {
    pub n_traj: usize,
    pub t: usize,
    pub d_obs: usize,
    pub d_act: usize,
    pub obs: Vec<f64>,
    pub acts: Vec<f64>,
    /// 1.0 where the filter may consume the observation.
    pub mask: Vec<f64>,
}

impl BatchInput {
    /// The `h`-step window `k` as its own input.
    pub fn window(&self, k: usize, h: usize) -> BatchInput {
        let b = self.n_traj;
        let rows = h * b;
        let start = k * h * b;
        BatchInput {
            n_traj: b,
            t: h,
            d_obs: self.d_obs,
            d_act: self.d_act,
            obs: self.obs[start * self.d_obs..(start + rows) * self.d_obs].to_vec(),
            acts: self.acts[start * self.d_act..(start + rows) * self.d_act].to_vec(),
            mask: self.mask[start..start + rows].to_vec(),
        }
    }
}

/// Differentiable filter outputs on one tape.
pub struct FilterGraph<'t> {
    /// `[T·B, d_obs]`: row `s` is the predictive mean for observation `s+1`.
    pub pred_mean: Tensor<'t>,
    pub pred_var: Tensor<'t>,
    /// Prior state variances feeding the variance decoder, `[T·B, w_dim]`.
    pub prior_su: Tensor<'t>,
    /// The observation input leaf (for gradient-flow diagnostics).
    pub obs_leaf: Tensor<'t>,
    pub state_carry: FactoredBelief<'t>,
    pub task_carry: FactoredBelief<'t>,
}

/// Plain-value filter outputs from the chunked (no-grad) driver.
pub struct FilterValues {
    pub pred_mean: Vec<f64>,
    pub pred_var: Vec<f64>,
    pub prior_su: Vec<f64>,
    pub state_carry: BeliefValues,
    pub task_carry: BeliefValues,
}

/// The full two-scale model: parameters plus architecture handles.
pub struct Mts3 {
    pub cfg: Mts3Config,
    pub store: ParamStore,
    pub fts: FtsNet,
    pub sts: StsNet,
    pub dec_mean: Mlp,
    pub dec_var: Mlp,
}

impl Mts3 {
    /// Build all parameters; every variant constructs the same layout so
    /// ablations stay seed-comparable (unused nets simply receive no
    /// gradient).
    pub fn new(cfg: Mts3Config) -> Result<Self> {
        cfg.validate()?;
        let mut rng = rand::SeedableRng::seed_from_u64(cfg.seed);
        let mut store = ParamStore::new();
        let fts = FtsNet::new(
            &mut store,
            &mut rng,
            cfg.d_obs,
            cfg.d_act,
            cfg.d_z,
            cfg.w_dim(),
            cfg.enc_hidden,
            cfg.ctrl_hidden,
            cfg.activation,
        );
        let sts = StsNet::new(
            &mut store,
            &mut rng,
            cfg.d_obs,
            cfg.d_act,
            cfg.temporal.dim(),
            cfg.d_l,
            cfg.beta_dim(),
            cfg.set_hidden,
            cfg.activation,
        );
        let dec_mean = Mlp::new(
            &mut store,
            &mut rng,
            "dec.mean",
            2 * cfg.d_z,
            cfg.dec_hidden,
            cfg.d_obs,
            cfg.activation,
        );
        let dec_var = Mlp::new(
            &mut store,
            &mut rng,
            "dec.var",
            cfg.w_dim(),
            cfg.dec_hidden,
            cfg.d_obs,
            cfg.activation,
        );
        Ok(Self {
            cfg,
            store,
            fts,
            sts,
            dec_mean,
            dec_var,
        })
    }

    /// Run the filter over `input` on one tape, differentiably.
    ///
    /// `is_start`: the first window of `input` is the global first window,
    /// so its task prior is the initial belief itself (no predict).
    /// `cut_gradients`: stop gradients on the fast-scale carry between
    /// windows; the slow chain always keeps gradient flow.
    pub fn filter_batch<'t>(
        &self,
        tape: &'t Tape,
        bind: &Binding<'t>,
        input: &BatchInput,
        init_state: &BeliefValues,
        init_task: &BeliefValues,
        is_start: bool,
        cut_gradients: bool,
    ) -> FilterGraph<'t> {
        let cfg = &self.cfg;
        let (b, t, h) = (input.n_traj, input.t, cfg.h);
        assert!(t % h == 0, "filter_batch: t={t} not a multiple of h={h}");
        assert_eq!(input.obs.len(), t * b * cfg.d_obs, "obs length");
        assert_eq!(input.mask.len(), t * b, "mask length");
        let n_win = t / h;
        let d_z = cfg.d_z;
        let identity = cfg.variant.identity_obs_model;

        let obs_flat = tape.leaf(t * b, cfg.d_obs, input.obs.clone());
        let acts_flat = tape.leaf(t * b, cfg.d_act, input.acts.clone());
        let mask_col = tape.leaf(t * b, 1, input.mask.clone());

        let tau_dim = cfg.temporal.dim();
        let mut tau_data = vec![0.0; t * b * tau_dim];
        for s in 0..t {
            let mut row = vec![0.0; tau_dim];
            cfg.temporal.fill(&mut row, s % h, h);
            for i in 0..b {
                tau_data[((s * b) + i) * tau_dim..((s * b) + i + 1) * tau_dim]
                    .copy_from_slice(&row);
            }
        }
        let tau = tape.leaf(t * b, tau_dim, tau_data);

        // Encoders, vectorized over every step at once.
        let w_all = self.fts.encode_obs(bind, obs_flat);
        let drift_all = self.fts.control_model(bind, acts_flat);
        let b_u_all = drift_all.slice_cols(0, d_z);
        let b_l_all = drift_all.slice_cols(d_z, d_z);
        let use_task = !cfg.variant.no_task;
        let beta_all = use_task.then(|| self.sts.encode_abstract_obs(bind, tape, obs_flat, tau));
        let alpha_all = (use_task && !cfg.variant.no_action_abstraction)
            .then(|| self.sts.encode_actions(bind, tape, acts_flat, tau));

        let a_block = self.fts.a.bind(bind);
        let c_block = self.fts.c.bind(bind);
        let q = self.fts.q.bind(bind);
        let x_block = self.sts.x.bind(bind);
        let y = bind.get(self.sts.y);
        let s_noise = self.sts.s.bind(bind);

        let mut state = init_state.to_tensors(tape);
        let mut task_post = init_task.to_tensors(tape);

        let mut mean_parts: Vec<Tensor<'t>> = Vec::with_capacity(t);
        let mut su_parts: Vec<Tensor<'t>> = Vec::with_capacity(t);

        for k in 0..n_win {
            let window_rows = |all: Tensor<'t>, s: usize| all.slice_rows((k * h + s) * b, b);

            // slow scale: prior for this window
            let task_prior = if use_task {
                if is_start && k == 0 {
                    Some(task_post)
                } else {
                    let act = alpha_all.as_ref().map(|alpha| {
                        let encoded: Vec<DiagGaussian<'t>> = (0..h)
                            .map(|s| DiagGaussian {
                                mean: window_rows(alpha.mean, s),
                                var: window_rows(alpha.var, s),
                            })
                            .collect();
                        self.sts.aggregate_actions(bind, &encoded)
                    });
                    Some(task_predict(
                        &task_post,
                        act.as_ref(),
                        &x_block,
                        y,
                        &s_noise,
                        identity,
                    ))
                }
            } else {
                None
            };
            let coupling = task_prior.as_ref().map(|tp| task_coupling(&c_block, tp));

            // fast scale over the window, conditioned on the frozen prior
            let steps: Vec<WindowStep<'t>> = (0..h)
                .map(|s| {
                    let w = DiagGaussian {
                        mean: window_rows(w_all.mean, s),
                        var: window_rows(w_all.var, s),
                    };
                    let mask = mask_col.slice_rows((k * h + s) * b, b);
                    let mut drift_u = window_rows(b_u_all, s);
                    let mut drift_l = window_rows(b_l_all, s);
                    if let Some((cu, cl, _)) = &coupling {
                        drift_u = drift_u + *cu;
                        drift_l = drift_l + *cl;
                    }
                    WindowStep {
                        w: Some(w),
                        mask: Some(mask),
                        drift_u,
                        drift_l,
                    }
                })
                .collect();
            let task_cov = coupling.as_ref().map(|(_, _, cov)| cov);
            let roll = window_rollforward(&state, &a_block, &q, task_cov, &steps, identity);

            for prior in roll.priors.iter().skip(1).chain(std::iter::once(&roll.carry)) {
                mean_parts.push(tape.concat_cols(&[prior.mean_u, prior.mean_l]));
                su_parts.push(if identity {
                    tape.concat_cols(&[prior.cov.su, prior.cov.sl])
                } else {
                    prior.cov.su
                });
            }

            // slow scale: condition on this window's abstract observations
            // (they inform the *next* window's prior)
            if let (Some(prior), Some(beta)) = (task_prior, beta_all.as_ref()) {
                let window_mask = &input.mask[k * h * b..(k + 1) * h * b];
                task_post = if window_mask.iter().all(|&m| m == 0.0) {
                    prior
                } else {
                    let obs_list: Vec<DiagGaussian<'t>> = (0..h)
                        .map(|s| DiagGaussian {
                            mean: window_rows(beta.mean, s),
                            var: window_rows(beta.var, s),
                        })
                        .collect();
                    let weights: Vec<Tensor<'t>> = (0..h)
                        .map(|s| mask_col.slice_rows((k * h + s) * b, b))
                        .collect();
                    if identity {
                        task_update_identity(&prior, tape, &obs_list, Some(&weights))
                    } else {
                        task_update(&prior, &obs_list, Some(&weights))
                    }
                };
            }

            state = if cut_gradients {
                roll.carry.stop_gradient()
            } else {
                roll.carry
            };
        }

        let mean_stack = tape.concat_rows(&mean_parts);
        let su_stack = tape.concat_rows(&su_parts);
        let pred_mean = self.dec_mean.forward(bind, mean_stack);
        let pred_var = self
            .dec_var
            .forward(bind, su_stack)
            .softplus()
            .add_scalar(VAR_FLOOR);

        FilterGraph {
            pred_mean,
            pred_var,
            prior_su: su_stack,
            obs_leaf: obs_flat,
            state_carry: state,
            task_carry: task_post,
        }
    }

    /// Memory-bounded filtering: one fresh tape per window, carries passed
    /// as plain values. Produces the same numbers as [`Self::filter_batch`].
    pub fn filter_trajectory(&self, input: &BatchInput) -> FilterValues {
        let h = self.cfg.h;
        let t = input.t - input.t % h;
        assert!(t > 0, "trajectory shorter than one window");
        let n_win = t / h;
        let (mut task, mut state) = {
            let (task, state) = init_beliefs(&self.cfg);
            (task, state)
        };
        let rows = t * input.n_traj;
        let mut out = FilterValues {
            pred_mean: Vec::with_capacity(rows * self.cfg.d_obs),
            pred_var: Vec::with_capacity(rows * self.cfg.d_obs),
            prior_su: Vec::with_capacity(rows * self.cfg.w_dim()),
            state_carry: state.clone(),
            task_carry: task.clone(),
        };
        for k in 0..n_win {
            let tape = Tape::new();
            let bind = self.store.bind(&tape);
            let win = input.window(k, h);
            let g = self.filter_batch(&tape, &bind, &win, &state, &task, k == 0, false);
            out.pred_mean.extend(g.pred_mean.value());
            out.pred_var.extend(g.pred_var.value());
            out.prior_su.extend(g.prior_su.value());
            state = BeliefValues::from_tensors(&g.state_carry);
            task = BeliefValues::from_tensors(&g.task_carry);
        }
        out.state_carry = state;
        out.task_carry = task;
        out
    }
}

/// Next-step targets and loss weights for a batch: row `s` of the
/// prediction stack targets observation `s+1`; the final step of each
/// trajectory has no target and gets weight zero.
pub fn next_step_targets(input: &BatchInput) -> (Vec<f64>, Vec<f64>) {
    let (b, t, d) = (input.n_traj, input.t, input.d_obs);
    let mut targets = vec![0.0; t * b * d];
    let mut weights = vec![0.0; t * b];
    for s in 0..t.saturating_sub(1) {
        let src = (s + 1) * b * d;
        let dst = s * b * d;
        targets[dst..dst + b * d].copy_from_slice(&input.obs[src..src + b * d]);
        for i in 0..b {
            weights[s * b + i] = 1.0;
        }
    }
    (targets, weights)
}

/// Mean Gaussian negative log-likelihood per step and dimension:
/// `0.5·(ln 2π + ln σ² + (o−μ)²/σ²)`, weighted rows, averaged over the
/// weighted count times `d_obs`.
pub fn gaussian_nll<'t>(
    tape: &'t Tape,
    pred_mean: Tensor<'t>,
    pred_var: Tensor<'t>,
    targets: &[f64],
    weights: &[f64],
) -> Tensor<'t> {
    let rows = pred_mean.rows();
    let d = pred_mean.cols();
    assert_eq!(targets.len(), rows * d, "targets shape");
    assert_eq!(weights.len(), rows, "weights shape");
    let target = tape.leaf(rows, d, targets.to_vec());
    let weight = tape.leaf(rows, 1, weights.to_vec());
    let resid = target - pred_mean;
    let elem = (pred_var.log() + resid.square() / pred_var).add_scalar(LN_2PI);
    let weighted = elem * weight;
    let count: f64 = weights.iter().sum::<f64>() * d as f64;
    weighted.sum_all().scale(0.5 / count.max(1.0))
}

/// Locate the first non-finite prediction row, for diagnostics.
pub fn first_non_finite_step(pred_mean: &[f64], pred_var: &[f64], b: usize, d: usize) -> usize {
    for (idx, (m, v)) in pred_mean.iter().zip(pred_var).enumerate() {
        if !m.is_finite() || !v.is_finite() {
            return idx / (b * d);
        }
    }
    0
}

/// Imputation mask for one trajectory: context steps always observed;
/// beyond the context, whole windows drop with `window_fraction`, single
/// steps with `fraction`, and with probability `suffix_fraction` the whole
/// tail after a random cut is masked, which trains prediction horizons of
/// every length up to the full trajectory.
pub fn sample_imputation_mask(
    t: usize,
    h: usize,
    context_len: usize,
    fraction: f64,
    window_fraction: f64,
    suffix_fraction: f64,
    rng: &mut ChaCha12Rng,
) -> Vec<bool> {
    assert!((0.0..=1.0).contains(&fraction));
    assert!((0.0..=1.0).contains(&window_fraction));
    assert!((0.0..=1.0).contains(&suffix_fraction));
    let n_win = t / h;
    let mut window_masked = vec![false; n_win + 1];
    for (k, wm) in window_masked.iter_mut().enumerate() {
        if k * h >= context_len && window_fraction > 0.0 {
            *wm = rng.gen_range(0.0..1.0) < window_fraction;
        }
    }
    let suffix_cut = if suffix_fraction > 0.0 && rng.gen_range(0.0..1.0) < suffix_fraction {
        rng.gen_range(context_len.min(t)..=t)
    } else {
        t
    };
    (0..t)
        .map(|s| {
            if s < context_len {
                return true;
            }
            if s >= suffix_cut {
                return false;
            }
            if window_masked[(s / h).min(n_win)] {
                return false;
            }
            if fraction > 0.0 {
                rng.gen_range(0.0..1.0) >= fraction
            } else {
                true
            }
        })
        .collect()
}

/// Evaluation-protocol mask: observed context, fully masked future.
pub fn context_mask(t: usize, context_len: usize) -> Vec<bool> {
    (0..t).map(|s| s < context_len).collect()
}
