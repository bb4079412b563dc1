//! Fast-time-scale SSM: latent-observation encoding, task-conditioned
//! prediction and per-step observation updates over one window.
//!
//! Within a window the task belief is frozen, so its contribution to the
//! prediction — the drift `C μ_l` and the covariance `C Σ_l Cᵀ` — is
//! computed once per window by the caller and passed in. Observation masks
//! are per-row column tensors; a masked step blends back to the prior,
//! which keeps imputation semantics exact while staying batched.

use rand::Rng;
use rand_chacha::ChaCha12Rng;

use crate::factored::{propagate_cov, BlockDiag2x2, DiagPair, FactoredCov};
use crate::gaussian::{factored_obs_update, factored_predict, DiagGaussian, FactoredBelief};
use crate::nn::{Activation, Binding, GaussHeadNet, Mlp, ParamStore};
use crate::sts::{BlockParams, NoiseParams};
use crate::tensor::Tensor;

/// Parameters of the fast time scale: observation encoder, control network
/// `b(a)`, transition `A`, task coupling `C` and noise `Q`.
pub struct FtsNet {
    pub enc: GaussHeadNet,
    pub ctrl: Mlp,
    pub a: BlockParams,
    pub c: BlockParams,
    pub q: NoiseParams,
    pub d_z: usize,
}

impl FtsNet {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha12Rng,
        d_obs: usize,
        d_act: usize,
        d_z: usize,
        w_dim: usize,
        enc_hidden: usize,
        ctrl_hidden: usize,
        act: Activation,
    ) -> Self {
        let enc = GaussHeadNet::new(store, rng, "fts.enc", d_obs, enc_hidden, w_dim, act);
        let ctrl = Mlp::new(store, rng, "fts.ctrl", d_act, ctrl_hidden, 2 * d_z, act);
        // zero output layer: the control drift starts neutral, otherwise the
        // near-unit transition amplifies random drift over masked stretches
        store.param_mut(ctrl.w2).value.fill(0.0);
        store.param_mut(ctrl.b2).value.fill(0.0);
        let a = BlockParams::new(store, "fts.a", d_z, 1.0, 0.2);
        // small nonzero start: the slow chain is reachable from the loss only
        // through C, and an exactly-zero C starves it of gradient
        let c = BlockParams::new(store, "fts.c", d_z, 0.0, 0.0);
        for id in [c.uu, c.ul, c.lu, c.ll] {
            for v in store.param_mut(id).value.iter_mut() {
                *v = rng.gen_range(-0.1..0.1);
            }
        }
        let q = NoiseParams::new(store, "fts.q", d_z, 0.05);
        Self {
            enc,
            ctrl,
            a,
            c,
            q,
            d_z,
        }
    }

    /// Latent observation `(w, σ)` from a raw observation batch.
    pub fn encode_obs<'t>(&self, bind: &Binding<'t>, obs: Tensor<'t>) -> DiagGaussian<'t> {
        let (mean, var) = self.enc.forward(bind, obs);
        DiagGaussian { mean, var }
    }

    /// Nonlinear control drift `b(a)`, `[n, 2·d_z]`.
    pub fn control_model<'t>(&self, bind: &Binding<'t>, acts: Tensor<'t>) -> Tensor<'t> {
        self.ctrl.forward(bind, acts)
    }
}

/// Task-conditioned prediction: `factored_predict` with drift
/// `b(a) + C μ_l` and extra covariance `C Σ_l Cᵀ` (both precomputed by the
/// caller, since the task is frozen for the window).
pub fn fts_predict<'t>(
    prior: &FactoredBelief<'t>,
    a: &BlockDiag2x2<'t>,
    drift_u: Tensor<'t>,
    drift_l: Tensor<'t>,
    task_cov: Option<&FactoredCov<'t>>,
    q: &DiagPair<'t>,
    diag_cov: bool,
) -> FactoredBelief<'t> {
    let mut out = factored_predict(prior, a, Some(drift_u), Some(drift_l), task_cov, q);
    if diag_cov {
        out.cov.ss = out.cov.ss.scale(0.0);
    }
    out
}

fn blend<'t>(mask: Tensor<'t>, updated: Tensor<'t>, prior: Tensor<'t>) -> Tensor<'t> {
    prior + mask * (updated - prior)
}

fn blend_belief<'t>(
    mask: Option<Tensor<'t>>,
    updated: FactoredBelief<'t>,
    prior: &FactoredBelief<'t>,
) -> FactoredBelief<'t> {
    match mask {
        None => updated,
        Some(m) => FactoredBelief {
            mean_u: blend(m, updated.mean_u, prior.mean_u),
            mean_l: blend(m, updated.mean_l, prior.mean_l),
            cov: FactoredCov {
                su: blend(m, updated.cov.su, prior.cov.su),
                sl: blend(m, updated.cov.sl, prior.cov.sl),
                ss: blend(m, updated.cov.ss, prior.cov.ss),
            },
        },
    }
}

/// Observation update for one step. `w = None` (masked step) returns the
/// prior unchanged; a per-row `mask` blends update and prior row-wise.
pub fn fts_update<'t>(
    prior: &FactoredBelief<'t>,
    w: Option<&DiagGaussian<'t>>,
    mask: Option<Tensor<'t>>,
) -> FactoredBelief<'t> {
    match w {
        None => *prior,
        Some(w) => blend_belief(mask, factored_obs_update(prior, w), prior),
    }
}

/// Observation update for the full-rank observation model (`h = I`,
/// diagonal covariance): both halves are updated elementwise.
pub fn fts_update_identity<'t>(
    prior: &FactoredBelief<'t>,
    w: Option<&DiagGaussian<'t>>,
    mask: Option<Tensor<'t>>,
) -> FactoredBelief<'t> {
    let Some(w) = w else { return *prior };
    let d = prior.dim();
    let w_u = DiagGaussian {
        mean: w.mean.slice_cols(0, d),
        var: w.var.slice_cols(0, d),
    };
    let w_l = DiagGaussian {
        mean: w.mean.slice_cols(d, d),
        var: w.var.slice_cols(d, d),
    };
    let denom_u = prior.cov.su + w_u.var;
    let gain_u = prior.cov.su / denom_u;
    let denom_l = prior.cov.sl + w_l.var;
    let gain_l = prior.cov.sl / denom_l;
    let updated = FactoredBelief {
        mean_u: prior.mean_u + gain_u * (w_u.mean - prior.mean_u),
        mean_l: prior.mean_l + gain_l * (w_l.mean - prior.mean_l),
        cov: FactoredCov {
            su: prior.cov.su * w_u.var / denom_u,
            sl: prior.cov.sl * w_l.var / denom_l,
            ss: prior.cov.ss.scale(0.0),
        },
    };
    blend_belief(mask, updated, prior)
}

/// One fast-scale step of a window.
pub struct WindowStep<'t> {
    /// Latent observation for the step; `None` when globally masked.
    pub w: Option<DiagGaussian<'t>>,
    /// Per-row observation mask (1 = observed), when masks differ in-batch.
    pub mask: Option<Tensor<'t>>,
    /// Full drift for the step (control plus task coupling), upper half.
    pub drift_u: Tensor<'t>,
    /// Full drift, lower half.
    pub drift_l: Tensor<'t>,
}

pub struct RollOut<'t> {
    /// Prior belief *before* the update at each step; `priors[0]` is the
    /// initial belief of the window.
    pub priors: Vec<FactoredBelief<'t>>,
    /// Posterior after each step's (possibly masked) update.
    pub posteriors: Vec<FactoredBelief<'t>>,
    /// Prior of step `H+1`: initializes the next window.
    pub carry: FactoredBelief<'t>,
}

/// Alternate update/predict over the window. Emits every prior (the
/// predictive likelihood reads the priors of steps `2..=H+1`), every
/// posterior, and the one-step-ahead carry.
pub fn window_rollforward<'t>(
    init: &FactoredBelief<'t>,
    a: &BlockDiag2x2<'t>,
    q: &DiagPair<'t>,
    task_cov: Option<&FactoredCov<'t>>,
    steps: &[WindowStep<'t>],
    identity_obs: bool,
) -> RollOut<'t> {
    let mut priors = Vec::with_capacity(steps.len());
    let mut posteriors = Vec::with_capacity(steps.len());
    let mut belief = *init;
    for step in steps {
        priors.push(belief);
        let posterior = if identity_obs {
            fts_update_identity(&belief, step.w.as_ref(), step.mask)
        } else {
            fts_update(&belief, step.w.as_ref(), step.mask)
        };
        posteriors.push(posterior);
        belief = fts_predict(
            &posterior,
            a,
            step.drift_u,
            step.drift_l,
            task_cov,
            q,
            identity_obs,
        );
    }
    RollOut {
        priors,
        posteriors,
        carry: belief,
    }
}

/// `C μ_l` drift and `C Σ_l Cᵀ` covariance for one window's frozen task
/// belief.
pub fn task_coupling<'t>(
    c: &BlockDiag2x2<'t>,
    task: &FactoredBelief<'t>,
) -> (Tensor<'t>, Tensor<'t>, FactoredCov<'t>) {
    let drift_u = c.uu * task.mean_u + c.ul * task.mean_l;
    let drift_l = c.lu * task.mean_u + c.ll * task.mean_l;
    let cov = propagate_cov(c, &task.cov);
    (drift_u, drift_l, cov)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn make_net(store: &mut ParamStore, rng: &mut ChaCha12Rng, d_z: usize) -> FtsNet {
        FtsNet::new(store, rng, 3, 2, d_z, d_z, 16, 16, Activation::Relu)
    }

    fn random_state<'a>(tape: &'a Tape, rng: &mut ChaCha12Rng, d: usize) -> FactoredBelief<'a> {
        let su: Vec<f64> = (0..d).map(|_| rng.gen_range(0.4..2.0)).collect();
        let sl: Vec<f64> = (0..d).map(|_| rng.gen_range(0.4..2.0)).collect();
        let ss: Vec<f64> = (0..d)
            .map(|i| rng.gen_range(-0.7..0.7) * (su[i] * sl[i]).sqrt())
            .collect();
        FactoredBelief {
            mean_u: tape.leaf(1, d, (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()),
            mean_l: tape.leaf(1, d, (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()),
            cov: FactoredCov {
                su: tape.leaf(1, d, su),
                sl: tape.leaf(1, d, sl),
                ss: tape.leaf(1, d, ss),
            },
        }
    }

    #[test]
    fn encoder_variance_floored_and_deterministic() {
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let net = make_net(&mut store, &mut rng, 4);
        store.param_mut(net.enc.w_var).value.fill(0.0);
        store.param_mut(net.enc.b_var).value.fill(-200.0);
        let tape = Tape::new();
        let bind = store.bind(&tape);
        let o = tape.leaf(1, 3, vec![0.2, 0.4, -0.1]);
        let w1 = net.encode_obs(&bind, o);
        let w2 = net.encode_obs(&bind, o);
        assert_eq!(w1.mean.value(), w2.mean.value());
        for v in w1.var.value() {
            assert!(v >= 1e-8 * 0.999 && v < 1e-7);
        }
    }

    #[test]
    fn zero_weight_control_gives_zero_drift() {
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let net = make_net(&mut store, &mut rng, 4);
        store.param_mut(net.ctrl.w1).value.fill(0.0);
        store.param_mut(net.ctrl.w2).value.fill(0.0);
        let tape = Tape::new();
        let bind = store.bind(&tape);
        let a = tape.leaf(1, 2, vec![3.0, -4.0]);
        let b = net.control_model(&bind, a);
        assert!(b.value().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn linear_control_net_reduces_to_matrix() {
        // hidden = identity-ish passthrough using relu on positive inputs
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let net = FtsNet::new(&mut store, &mut rng, 3, 2, 1, 1, 2, 2, Activation::Relu);
        // w1 = [[1,0],[0,1]], b1 = [10,10] keeps relu linear; w2 recovers B·a
        store
            .param_mut(net.ctrl.w1)
            .value
            .copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
        store
            .param_mut(net.ctrl.b1)
            .value
            .copy_from_slice(&[10.0, 10.0]);
        store
            .param_mut(net.ctrl.w2)
            .value
            .copy_from_slice(&[2.0, -1.0, 0.5, 0.25]);
        // cancel the bias shift: b2 = -(10,10)·w2
        store
            .param_mut(net.ctrl.b2)
            .value
            .copy_from_slice(&[-25.0, 7.5]);
        let tape = Tape::new();
        let bind = store.bind(&tape);
        let a = tape.leaf(1, 2, vec![0.5, -0.25]);
        let b = net.control_model(&bind, a);
        // B = [[2,-1],[0.5,0.25]]ᵀ applied to a
        let expect = [2.0 * 0.5 + 0.5 * (-0.25), -1.0 * 0.5 + 0.25 * (-0.25)];
        for (x, e) in b.value().iter().zip(expect) {
            assert!((x - e).abs() < 1e-12, "{x} vs {e}");
        }
    }

    #[test]
    fn control_gradient_matches_finite_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        let mut store = ParamStore::new();
        let net = make_net(&mut store, &mut rng, 2);
        let a_data = vec![0.37, -0.61];
        let eval = |a_val: &[f64]| {
            let tape = Tape::new();
            let bind = store.bind(&tape);
            let a = tape.leaf(1, 2, a_val.to_vec());
            net.control_model(&bind, a).square().sum_all().item()
        };
        let tape = Tape::new();
        let bind = store.bind(&tape);
        let a = tape.leaf(1, 2, a_data.clone());
        let y = net.control_model(&bind, a).square().sum_all();
        let g = tape.backward(y);
        let ga = g.get_or_zero(a);
        for i in 0..2 {
            let mut p = a_data.clone();
            p[i] += 1e-5;
            let mut m = a_data.clone();
            m[i] -= 1e-5;
            let fd = (eval(&p) - eval(&m)) / 2e-5;
            assert!((ga[i] - fd).abs() / fd.abs().max(1.0) < 1e-6);
        }
    }

    #[test]
    fn predict_without_task_matches_plain_kernel() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let tape = Tape::new();
        let d = 3;
        let prior = random_state(&tape, &mut rng, d);
        let a = BlockDiag2x2 {
            uu: tape.full(1, d, 1.0),
            ul: tape.full(1, d, 0.2),
            lu: tape.full(1, d, 0.2),
            ll: tape.full(1, d, 1.0),
        };
        let q = DiagPair {
            upper: tape.full(1, d, 0.05),
            lower: tape.full(1, d, 0.05),
        };
        let zero = tape.full(1, d, 0.0);
        let with_task_zero = {
            let zero_cov = FactoredCov {
                su: tape.full(1, d, 0.0),
                sl: tape.full(1, d, 0.0),
                ss: tape.full(1, d, 0.0),
            };
            fts_predict(&prior, &a, zero, zero, Some(&zero_cov), &q, false)
        };
        let without = fts_predict(&prior, &a, zero, zero, None, &q, false);
        assert_eq!(with_task_zero.mean_u.value(), without.mean_u.value());
        assert_eq!(with_task_zero.cov.su.value(), without.cov.su.value());
        assert_eq!(with_task_zero.cov.ss.value(), without.cov.ss.value());
    }

    #[test]
    fn task_uncertainty_inflates_state_cov_additively() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let tape = Tape::new();
        let d = 2;
        let prior = random_state(&tape, &mut rng, d);
        let a = BlockDiag2x2 {
            uu: tape.full(1, d, 1.0),
            ul: tape.full(1, d, 0.0),
            lu: tape.full(1, d, 0.0),
            ll: tape.full(1, d, 1.0),
        };
        let c = BlockDiag2x2 {
            uu: tape.full(1, d, 1.0),
            ul: tape.full(1, d, 0.0),
            lu: tape.full(1, d, 0.0),
            ll: tape.full(1, d, 1.0),
        };
        let task = random_state(&tape, &mut rng, d);
        let (du, dl, cov) = task_coupling(&c, &task);
        let q = DiagPair {
            upper: tape.full(1, d, 1e-12),
            lower: tape.full(1, d, 1e-12),
        };
        let out = fts_predict(&prior, &a, du, dl, Some(&cov), &q, false);
        // A = I, C = I: state cov grows by exactly the task cov (plus tiny q)
        for ((o, p), t) in out
            .cov
            .su
            .value()
            .iter()
            .zip(prior.cov.su.value())
            .zip(task.cov.su.value())
        {
            assert!((o - (p + t)).abs() < 1e-9);
        }
    }

    #[test]
    fn masked_step_is_identity_and_carry_is_one_predict() {
        let mut rng = ChaCha12Rng::seed_from_u64(14);
        let tape = Tape::new();
        let d = 3;
        let init = random_state(&tape, &mut rng, d);
        let a = BlockDiag2x2 {
            uu: tape.full(1, d, 0.95),
            ul: tape.full(1, d, 0.1),
            lu: tape.full(1, d, -0.05),
            ll: tape.full(1, d, 0.9),
        };
        let q = DiagPair {
            upper: tape.full(1, d, 0.02),
            lower: tape.full(1, d, 0.02),
        };
        let zero = tape.full(1, d, 0.0);
        let steps: Vec<WindowStep> = (0..4)
            .map(|_| WindowStep {
                w: None,
                mask: None,
                drift_u: zero,
                drift_l: zero,
            })
            .collect();
        let out = window_rollforward(&init, &a, &q, None, &steps, false);
        // all masked: posteriors equal priors
        for (pr, po) in out.priors.iter().zip(&out.posteriors) {
            assert_eq!(pr.mean_u.value(), po.mean_u.value());
            assert_eq!(pr.cov.su.value(), po.cov.su.value());
        }
        // carry = predict applied to the last posterior
        let manual = fts_predict(out.posteriors.last().unwrap(), &a, zero, zero, None, &q, false);
        assert_eq!(out.carry.mean_u.value(), manual.mean_u.value());
        assert_eq!(out.carry.cov.sl.value(), manual.cov.sl.value());
    }

    #[test]
    fn exact_observation_snaps_state() {
        let mut rng = ChaCha12Rng::seed_from_u64(15);
        let tape = Tape::new();
        let d = 2;
        let prior = random_state(&tape, &mut rng, d);
        let w = DiagGaussian {
            mean: tape.leaf(1, d, vec![3.0, -3.0]),
            var: tape.full(1, d, 1e-12),
        };
        let post = fts_update(&prior, Some(&w), None);
        for (m, e) in post.mean_u.value().iter().zip([3.0, -3.0]) {
            assert!((m - e).abs() < 1e-8);
        }
    }

    #[test]
    fn per_row_mask_blends_rows_independently() {
        let tape = Tape::new();
        let d = 2;
        // two batch rows with identical priors
        let prior = FactoredBelief {
            mean_u: tape.leaf(2, d, vec![0.0, 0.0, 0.0, 0.0]),
            mean_l: tape.leaf(2, d, vec![0.0; 4]),
            cov: FactoredCov {
                su: tape.full(2, d, 1.0),
                sl: tape.full(2, d, 1.0),
                ss: tape.full(2, d, 0.0),
            },
        };
        let w = DiagGaussian {
            mean: tape.full(2, d, 2.0),
            var: tape.full(2, d, 1.0),
        };
        let mask = tape.leaf(2, 1, vec![1.0, 0.0]);
        let post = fts_update(&prior, Some(&w), Some(mask));
        let mu = post.mean_u.value();
        assert!((mu[0] - 1.0).abs() < 1e-12); // updated row
        assert_eq!(mu[2], 0.0); // masked row keeps prior
        let su = post.cov.su.value();
        assert!((su[0] - 0.5).abs() < 1e-12);
        assert_eq!(su[2], 1.0);
    }
}
