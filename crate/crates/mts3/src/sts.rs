//! Slow-time-scale SSM: abstract observations and abstract actions over an
//! H-step window, task predict and task update for the latent task belief.
//!
//! Per window `k` the layer aggregates the window's encoded actions into one
//! abstract action `α_k` (Bayesian aggregation with a learnable prior),
//! advances the task belief through the linear transition `l_k = X l_{k-1} +
//! Y α_k + noise`, and conditions on the window's encoded observations with
//! the permutation-invariant batch update.

use rand_chacha::ChaCha12Rng;

use crate::factored::{BlockDiag2x2, DiagPair, FactoredCov};
use crate::gaussian::{
    bayes_aggregate, factored_batch_update, factored_predict, DiagGaussian, FactoredBelief,
};
use crate::nn::{Activation, Binding, GaussHeadNet, ParamId, ParamStore, VAR_FLOOR};
use crate::tensor::{Tape, Tensor};

/// Transition-matrix diagonals `[[uu, ul], [lu, ll]]` as four parameters.
#[derive(Clone)]
pub struct BlockParams {
    pub uu: ParamId,
    pub ul: ParamId,
    pub lu: ParamId,
    pub ll: ParamId,
}

impl BlockParams {
    /// Diagonals start at `diag`, off-diagonals at `off`.
    pub fn new(store: &mut ParamStore, name: &str, d: usize, diag: f64, off: f64) -> Self {
        Self {
            uu: store.add(&format!("{name}.uu"), 1, d, vec![diag; d]),
            ul: store.add(&format!("{name}.ul"), 1, d, vec![off; d]),
            lu: store.add(&format!("{name}.lu"), 1, d, vec![off; d]),
            ll: store.add(&format!("{name}.ll"), 1, d, vec![diag; d]),
        }
    }

    pub fn bind<'t>(&self, bind: &Binding<'t>) -> BlockDiag2x2<'t> {
        BlockDiag2x2 {
            uu: bind.get(self.uu),
            ul: bind.get(self.ul),
            lu: bind.get(self.lu),
            ll: bind.get(self.ll),
        }
    }
}

/// Softplus-transformed diagonal transition noise for a split state.
#[derive(Clone)]
pub struct NoiseParams {
    pub raw: ParamId,
    d: usize,
}

pub const NOISE_FLOOR: f64 = 1e-6;

/// Inverse of softplus, for initializing raw positive parameters.
pub fn softplus_inv(v: f64) -> f64 {
    if v > 30.0 {
        v
    } else {
        (v.exp() - 1.0).ln()
    }
}

impl NoiseParams {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, init_var: f64) -> Self {
        let raw_init = softplus_inv(init_var - NOISE_FLOOR);
        Self {
            raw: store.add(name, 1, 2 * d, vec![raw_init; 2 * d]),
            d,
        }
    }

    /// Positive noise variances, split into the two halves.
    pub fn bind<'t>(&self, bind: &Binding<'t>) -> DiagPair<'t> {
        let v = bind.get(self.raw).softplus().add_scalar(NOISE_FLOOR);
        DiagPair {
            upper: v.slice_cols(0, self.d),
            lower: v.slice_cols(self.d, self.d),
        }
    }
}

/// Parameters of the slow time scale: set encoders, transition `X`, action
/// coupling `Y`, noise `S` and the aggregation prior.
pub struct StsNet {
    pub enc_obs: GaussHeadNet,
    pub enc_act: GaussHeadNet,
    pub x: BlockParams,
    pub y: ParamId,
    pub s: NoiseParams,
    pub act_prior_mean: ParamId,
    pub act_prior_var_raw: ParamId,
    pub d_l: usize,
    pub d_alpha: usize,
}

impl StsNet {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha12Rng,
        d_obs: usize,
        d_act: usize,
        tau_dim: usize,
        d_l: usize,
        beta_dim: usize,
        set_hidden: usize,
        act: Activation,
    ) -> Self {
        let d_alpha = 2 * d_l;
        let enc_obs = GaussHeadNet::new(
            store,
            rng,
            "sts.enc_obs",
            d_obs + tau_dim,
            set_hidden,
            beta_dim,
            act,
        );
        let enc_act = GaussHeadNet::new(
            store,
            rng,
            "sts.enc_act",
            d_act + tau_dim,
            set_hidden,
            d_alpha,
            act,
        );
        let x = BlockParams::new(store, "sts.x", d_l, 1.0, 0.2);
        // Y starts at zero so the action channel switches on gradually.
        let y = store.add("sts.y", 2 * d_l, d_alpha, vec![0.0; 2 * d_l * d_alpha]);
        let s = NoiseParams::new(store, "sts.s", d_l, 0.05);
        let act_prior_mean = store.add("sts.act_prior_mean", 1, d_alpha, vec![0.0; d_alpha]);
        // σ₀ starts at exactly 1 after the softplus + floor transform
        let sigma0_raw = softplus_inv(1.0 - VAR_FLOOR);
        let act_prior_var_raw = store.add(
            "sts.act_prior_var_raw",
            1,
            d_alpha,
            vec![sigma0_raw; d_alpha],
        );
        Self {
            enc_obs,
            enc_act,
            x,
            y,
            s,
            act_prior_mean,
            act_prior_var_raw,
            d_l,
            d_alpha,
        }
    }

    /// Encode raw observations with their within-window temporal encoding
    /// into abstract observations `(β, ν)`. `obs` is `[n, d_obs]`, `tau` a
    /// matching `[n, 1]` column.
    pub fn encode_abstract_obs<'t>(
        &self,
        bind: &Binding<'t>,
        tape: &'t Tape,
        obs: Tensor<'t>,
        tau: Tensor<'t>,
    ) -> DiagGaussian<'t> {
        let input = tape.concat_cols(&[obs, tau]);
        let (mean, var) = self.enc_obs.forward(bind, input);
        DiagGaussian { mean, var }
    }

    /// Encode raw actions into per-step latent actions `(α_t, ρ_t)`.
    pub fn encode_actions<'t>(
        &self,
        bind: &Binding<'t>,
        tape: &'t Tape,
        acts: Tensor<'t>,
        tau: Tensor<'t>,
    ) -> DiagGaussian<'t> {
        let input = tape.concat_cols(&[acts, tau]);
        let (mean, var) = self.enc_act.forward(bind, input);
        DiagGaussian { mean, var }
    }

    /// Learnable aggregation prior `(μ₀, σ₀)`.
    pub fn action_prior<'t>(&self, bind: &Binding<'t>) -> DiagGaussian<'t> {
        DiagGaussian {
            mean: bind.get(self.act_prior_mean),
            var: bind
                .get(self.act_prior_var_raw)
                .softplus()
                .add_scalar(VAR_FLOOR),
        }
    }

    /// Bayesian aggregation of the window's encoded actions into the
    /// abstract action posterior. An empty window returns the prior.
    pub fn aggregate_actions<'t>(
        &self,
        bind: &Binding<'t>,
        encoded: &[DiagGaussian<'t>],
    ) -> DiagGaussian<'t> {
        bayes_aggregate(&self.action_prior(bind), encoded, None)
    }
}

/// Marginalized task transition: `μ⁻ = X μ⁺ + Y μ_α`,
/// `Σ⁻ = X Σ⁺ Xᵀ + Y Σ_α Yᵀ + S`. With no abstract action the drift and the
/// `Y Σ_α Yᵀ` term vanish.
///
/// `Y Σ_α Yᵀ` is dense in general; it is projected onto the
/// block-of-diagonals pattern (the three diagonals are kept, the rest
/// dropped) so the factorization stays closed.
pub fn task_predict<'t>(
    prev: &FactoredBelief<'t>,
    act: Option<&DiagGaussian<'t>>,
    x: &BlockDiag2x2<'t>,
    y: Tensor<'t>,
    s: &DiagPair<'t>,
    diag_cov: bool,
) -> FactoredBelief<'t> {
    let d_l = prev.dim();
    let (drift_u, drift_l, extra) = match act {
        Some(a) => {
            let drift = a.mean.matmul_tb(y); // [n, 2d_l]
            let y_u = y.slice_rows(0, d_l);
            let y_l = y.slice_rows(d_l, d_l);
            let su = a.var.matmul_tb(y_u.square());
            let sl = a.var.matmul_tb(y_l.square());
            let ss = a.var.matmul_tb(y_u * y_l);
            (
                Some(drift.slice_cols(0, d_l)),
                Some(drift.slice_cols(d_l, d_l)),
                Some(FactoredCov { su, sl, ss }),
            )
        }
        None => (None, None, None),
    };
    let mut out = factored_predict(prev, x, drift_u, drift_l, extra.as_ref(), s);
    if diag_cov {
        out.cov.ss = out.cov.ss.scale(0.0);
    }
    out
}

/// Condition the task prior on the window's abstract observations.
/// Masked (absent) observations simply shrink the list; per-row weights
/// handle masks that differ across a batch.
pub fn task_update<'t>(
    prior: &FactoredBelief<'t>,
    obs: &[DiagGaussian<'t>],
    weights: Option<&[Tensor<'t>]>,
) -> FactoredBelief<'t> {
    factored_batch_update(prior, obs, weights)
}

/// Task update for the full-rank observation model (`h = I`, diagonal
/// covariance): both halves are observed, so the update is plain Bayesian
/// aggregation on the concatenated state.
pub fn task_update_identity<'t>(
    prior: &FactoredBelief<'t>,
    tape: &'t Tape,
    obs: &[DiagGaussian<'t>],
    weights: Option<&[Tensor<'t>]>,
) -> FactoredBelief<'t> {
    if obs.is_empty() {
        return *prior;
    }
    let d = prior.dim();
    let prior_diag = DiagGaussian {
        mean: tape.concat_cols(&[prior.mean_u, prior.mean_l]),
        var: tape.concat_cols(&[prior.cov.su, prior.cov.sl]),
    };
    let post = bayes_aggregate(&prior_diag, obs, weights);
    FactoredBelief {
        mean_u: post.mean.slice_cols(0, d),
        mean_l: post.mean.slice_cols(d, d),
        cov: FactoredCov {
            su: post.var.slice_cols(0, d),
            sl: post.var.slice_cols(d, d),
            ss: prior.cov.ss.scale(0.0),
        },
    }
}
