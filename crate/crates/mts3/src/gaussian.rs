//! Reusable Gaussian inference kernels shared by both time scales:
//! Bayesian aggregation of observation sets, the factorized Kalman
//! observation update, its permutation-invariant batch form, and the
//! factorized prediction update.
//!
//! All kernels are pure tensor functions; when an optional `weights` slice
//! is given, each observation carries a per-row weight in `{0, 1}` (column
//! tensors) so imputation masks can differ across a batch. A weight of zero
//! contributes nothing, which makes a fully-masked row equivalent to "no
//! observation".

use crate::factored::{
    add_cov, factored_invert_clamped, factored_invert_prec_clamped, propagate_cov, BlockDiag2x2,
    DiagPair, FactoredCov,
};
use crate::tensor::Tensor;

/// Diagonal Gaussian over a latent vector.
#[derive(Clone, Copy, Debug)]
pub struct DiagGaussian<'t> {
    pub mean: Tensor<'t>,
    pub var: Tensor<'t>,
}

/// Gaussian belief over a split latent `[upper, lower]` with
/// block-of-diagonals covariance.
#[derive(Clone, Copy, Debug)]
pub struct FactoredBelief<'t> {
    pub mean_u: Tensor<'t>,
    pub mean_l: Tensor<'t>,
    pub cov: FactoredCov<'t>,
}

impl<'t> FactoredBelief<'t> {
    pub fn dim(&self) -> usize {
        self.mean_u.cols()
    }

    /// Forward-identical copy with gradient flow cut on every component.
    pub fn stop_gradient(&self) -> FactoredBelief<'t> {
        FactoredBelief {
            mean_u: self.mean_u.stop_gradient(),
            mean_l: self.mean_l.stop_gradient(),
            cov: FactoredCov {
                su: self.cov.su.stop_gradient(),
                sl: self.cov.sl.stop_gradient(),
                ss: self.cov.ss.stop_gradient(),
            },
        }
    }
}

/// Closed-form Gaussian conditioning of a diagonal prior on a set of
/// independent diagonal observations; permutation invariant.
///
/// `var⁺ = (1⊘σ₀ + Σᵢ wᵢ⊘ρᵢ)⁻¹`, `mean⁺ = μ₀ + var⁺ ⊙ Σᵢ wᵢ(αᵢ − μ₀)⊘ρᵢ`.
pub fn bayes_aggregate<'t>(
    prior: &DiagGaussian<'t>,
    obs: &[DiagGaussian<'t>],
    weights: Option<&[Tensor<'t>]>,
) -> DiagGaussian<'t> {
    if obs.is_empty() {
        return *prior;
    }
    let d = prior.mean.cols();
    if let Some(w) = weights {
        assert_eq!(w.len(), obs.len(), "bayes_aggregate: weights mismatch");
    }
    let mut prec_sum: Option<Tensor<'t>> = None;
    let mut resid_sum: Option<Tensor<'t>> = None;
    for (i, o) in obs.iter().enumerate() {
        assert_eq!(o.mean.cols(), d, "bayes_aggregate: dim mismatch");
        let mut prec = o.var.recip();
        let mut resid = (o.mean - prior.mean) / o.var;
        if let Some(w) = weights {
            prec = prec * w[i];
            resid = resid * w[i];
        }
        prec_sum = Some(match prec_sum {
            Some(s) => s + prec,
            None => prec,
        });
        resid_sum = Some(match resid_sum {
            Some(s) => s + resid,
            None => resid,
        });
    }
    let var = (prior.var.recip() + prec_sum.unwrap()).recip();
    let mean = prior.mean + var * resid_sum.unwrap();
    DiagGaussian { mean, var }
}

/// Factorized Kalman observation update with observation model `H = [I, 0]`
/// and diagonal observation noise. Equals the dense Kalman update.
pub fn factored_obs_update<'t>(
    prior: &FactoredBelief<'t>,
    w: &DiagGaussian<'t>,
) -> FactoredBelief<'t> {
    assert_eq!(w.mean.cols(), prior.dim(), "obs update: dim mismatch");
    let denom = prior.cov.su + w.var;
    let gain_u = prior.cov.su / denom;
    let gain_l = prior.cov.ss / denom;
    let resid = w.mean - prior.mean_u;

    let mean_u = prior.mean_u + gain_u * resid;
    let mean_l = prior.mean_l + gain_l * resid;
    let su = prior.cov.su * w.var / denom;
    let ss = prior.cov.ss * w.var / denom;
    let sl = prior.cov.sl - prior.cov.ss * gain_l;
    FactoredBelief {
        mean_u,
        mean_l,
        cov: FactoredCov { su, sl, ss },
    }
}

/// Permutation-invariant batch observation update: the prior is moved to
/// precision form, every observation adds `1⊘ν` to the upper precision
/// block, and the mean update applies the posterior covariance to the
/// precision-weighted residual sum. Equals a fold of incremental updates.
pub fn factored_batch_update<'t>(
    prior: &FactoredBelief<'t>,
    obs: &[DiagGaussian<'t>],
    weights: Option<&[Tensor<'t>]>,
) -> FactoredBelief<'t> {
    if obs.is_empty() {
        return *prior;
    }
    let d = prior.dim();
    if let Some(w) = weights {
        assert_eq!(w.len(), obs.len(), "batch update: weights mismatch");
    }
    let mut prec_sum: Option<Tensor<'t>> = None;
    let mut resid_sum: Option<Tensor<'t>> = None;
    for (i, o) in obs.iter().enumerate() {
        assert_eq!(o.mean.cols(), d, "batch update: dim mismatch");
        let mut prec = o.var.recip();
        let mut resid = (o.mean - prior.mean_u) / o.var;
        if let Some(w) = weights {
            prec = prec * w[i];
            resid = resid * w[i];
        }
        prec_sum = Some(match prec_sum {
            Some(s) => s + prec,
            None => prec,
        });
        resid_sum = Some(match resid_sum {
            Some(s) => s + resid,
            None => resid,
        });
    }
    let prior_prec = factored_invert_clamped(&prior.cov);
    let post_prec = crate::factored::FactoredPrec {
        lu: prior_prec.lu + prec_sum.unwrap(),
        ll: prior_prec.ll,
        ls: prior_prec.ls,
    };
    let cov = factored_invert_prec_clamped(&post_prec);
    let resid = resid_sum.unwrap();
    let mean_u = prior.mean_u + cov.su * resid;
    let mean_l = prior.mean_l + cov.ss * resid;
    FactoredBelief { mean_u, mean_l, cov }
}

/// Factorized prediction update: affine mean map plus drift, covariance
/// `A Σ Aᵀ + extra + Q`. The drift carries whatever the caller composed
/// (control input, task coupling); `extra` carries an already-propagated
/// covariance term such as `C Σ_l Cᵀ`.
pub fn factored_predict<'t>(
    prior: &FactoredBelief<'t>,
    a: &BlockDiag2x2<'t>,
    drift_u: Option<Tensor<'t>>,
    drift_l: Option<Tensor<'t>>,
    extra: Option<&FactoredCov<'t>>,
    q: &DiagPair<'t>,
) -> FactoredBelief<'t> {
    assert_eq!(a.dim(), prior.dim(), "predict: dim mismatch");
    let mut mean_u = a.uu * prior.mean_u + a.ul * prior.mean_l;
    let mut mean_l = a.lu * prior.mean_u + a.ll * prior.mean_l;
    if let Some(du) = drift_u {
        mean_u = mean_u + du;
    }
    if let Some(dl) = drift_l {
        mean_l = mean_l + dl;
    }
    let mut cov = propagate_cov(a, &prior.cov);
    if let Some(e) = extra {
        cov = add_cov(&cov, e);
    }
    cov.su = cov.su + q.upper;
    cov.sl = cov.sl + q.lower;
    FactoredBelief { mean_u, mean_l, cov }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn diag<'t>(tape: &'t Tape, mean: &[f64], var: &[f64]) -> DiagGaussian<'t> {
        DiagGaussian {
            mean: tape.leaf(1, mean.len(), mean.to_vec()),
            var: tape.leaf(1, var.len(), var.to_vec()),
        }
    }

    fn belief<'t>(
        tape: &'t Tape,
        mu: &[f64],
        ml: &[f64],
        su: &[f64],
        sl: &[f64],
        ss: &[f64],
    ) -> FactoredBelief<'t> {
        FactoredBelief {
            mean_u: tape.leaf(1, mu.len(), mu.to_vec()),
            mean_l: tape.leaf(1, ml.len(), ml.to_vec()),
            cov: FactoredCov {
                su: tape.leaf(1, su.len(), su.to_vec()),
                sl: tape.leaf(1, sl.len(), sl.to_vec()),
                ss: tape.leaf(1, ss.len(), ss.to_vec()),
            },
        }
    }

    fn random_belief<'t>(tape: &'t Tape, rng: &mut ChaCha12Rng, d: usize) -> FactoredBelief<'t> {
        let su: Vec<f64> = (0..d).map(|_| rng.gen_range(0.3..2.5)).collect();
        let sl: Vec<f64> = (0..d).map(|_| rng.gen_range(0.3..2.5)).collect();
        let ss: Vec<f64> = (0..d)
            .map(|i| rng.gen_range(-0.8..0.8) * (su[i] * sl[i]).sqrt())
            .collect();
        let mu: Vec<f64> = (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let ml: Vec<f64> = (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect();
        belief(tape, &mu, &ml, &su, &sl, &ss)
    }

    #[test]
    fn aggregate_empty_returns_prior() {
        let tape = Tape::new();
        let prior = diag(&tape, &[0.0, 0.0], &[1.0, 1.0]);
        let post = bayes_aggregate(&prior, &[], None);
        assert_eq!(post.mean.value(), prior.mean.value());
        assert_eq!(post.var.value(), prior.var.value());
    }

    #[test]
    fn aggregate_product_of_unit_gaussians() {
        let tape = Tape::new();
        let prior = diag(&tape, &[0.0], &[1.0]);
        let post = bayes_aggregate(&prior, &[diag(&tape, &[1.0], &[1.0])], None);
        assert!((post.mean.value()[0] - 0.5).abs() < 1e-15);
        assert!((post.var.value()[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn aggregate_two_obs_matches_sequential_conditioning() {
        let tape = Tape::new();
        let prior = diag(&tape, &[0.0], &[1.0]);
        let obs = [diag(&tape, &[1.0], &[1.0]), diag(&tape, &[1.0], &[1.0])];
        let post = bayes_aggregate(&prior, &obs, None);
        // sequential oracle: condition twice
        let step1 = bayes_aggregate(&prior, &obs[..1], None);
        let step2 = bayes_aggregate(&step1, &obs[1..], None);
        assert!((post.mean.value()[0] - 2.0 / 3.0).abs() < 1e-14);
        assert!((post.var.value()[0] - 1.0 / 3.0).abs() < 1e-14);
        assert!((post.mean.value()[0] - step2.mean.value()[0]).abs() < 1e-14);
        assert!((post.var.value()[0] - step2.var.value()[0]).abs() < 1e-14);
    }

    #[test]
    fn aggregate_posterior_variance_never_exceeds_prior() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let tape = Tape::new();
        for _ in 0..20 {
            let d = 4;
            let pv: Vec<f64> = (0..d).map(|_| rng.gen_range(0.1..3.0)).collect();
            let prior = diag(&tape, &vec![0.0; d], &pv);
            let obs: Vec<_> = (0..5)
                .map(|_| {
                    let m: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
                    let v: Vec<f64> = (0..d).map(|_| rng.gen_range(0.1..4.0)).collect();
                    diag(&tape, &m, &v)
                })
                .collect();
            let post = bayes_aggregate(&prior, &obs, None);
            for (a, b) in post.var.value().iter().zip(&pv) {
                assert!(a <= b);
            }
        }
    }

    #[test]
    fn obs_update_uninformative_limit() {
        let tape = Tape::new();
        let prior = belief(&tape, &[0.5, -1.0], &[0.2, 0.1], &[1.0, 2.0], &[1.5, 1.0], &[0.3, -0.4]);
        let w = diag(&tape, &[7.0, -7.0], &[1e12, 1e12]);
        let post = factored_obs_update(&prior, &w);
        for (field, prior_field) in [
            (post.mean_u, prior.mean_u),
            (post.mean_l, prior.mean_l),
            (post.cov.su, prior.cov.su),
            (post.cov.sl, prior.cov.sl),
            (post.cov.ss, prior.cov.ss),
        ] {
            for (a, b) in field.value().iter().zip(prior_field.value()) {
                assert!((a - b).abs() / b.abs().max(1.0) < 1e-6, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn obs_update_exact_limit_snaps_mean() {
        let tape = Tape::new();
        let prior = belief(&tape, &[0.0], &[0.0], &[2.0], &[2.0], &[0.5]);
        let w = diag(&tape, &[3.0], &[1e-12]);
        let post = factored_obs_update(&prior, &w);
        assert!((post.mean_u.value()[0] - 3.0).abs() < 1e-9);
        assert!(post.cov.su.value()[0] < 1e-11);
    }

    #[test]
    fn batch_update_empty_returns_prior() {
        let tape = Tape::new();
        let prior = belief(&tape, &[0.1], &[0.2], &[1.0], &[1.0], &[0.0]);
        let post = factored_batch_update(&prior, &[], None);
        assert_eq!(post.mean_u.value(), prior.mean_u.value());
        assert_eq!(post.cov.su.value(), prior.cov.su.value());
    }

    #[test]
    fn batch_update_single_obs_equals_incremental() {
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        for _ in 0..30 {
            let tape = Tape::new();
            let d = 3;
            let prior = random_belief(&tape, &mut rng, d);
            let m: Vec<f64> = (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let v: Vec<f64> = (0..d).map(|_| rng.gen_range(0.05..3.0)).collect();
            let w = diag(&tape, &m, &v);
            let batch = factored_batch_update(&prior, &[w], None);
            let inc = factored_obs_update(&prior, &w);
            for (a, b) in [
                (batch.mean_u, inc.mean_u),
                (batch.mean_l, inc.mean_l),
                (batch.cov.su, inc.cov.su),
                (batch.cov.sl, inc.cov.sl),
                (batch.cov.ss, inc.cov.ss),
            ] {
                for (x, y) in a.value().iter().zip(b.value()) {
                    assert!(
                        (x - y).abs() / x.abs().max(y.abs()).max(1.0) < 1e-10,
                        "{x} vs {y}"
                    );
                }
            }
        }
    }

    #[test]
    fn batch_update_equals_fold_and_is_permutation_invariant() {
        let mut rng = ChaCha12Rng::seed_from_u64(23);
        let tape = Tape::new();
        let d = 4;
        let prior = random_belief(&tape, &mut rng, d);
        let obs: Vec<_> = (0..30)
            .map(|_| {
                let m: Vec<f64> = (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect();
                let v: Vec<f64> = (0..d).map(|_| rng.gen_range(0.05..3.0)).collect();
                diag(&tape, &m, &v)
            })
            .collect();

        let batch = factored_batch_update(&prior, &obs, None);

        let mut fold = prior;
        for o in &obs {
            fold = factored_obs_update(&fold, o);
        }
        for (a, b) in [
            (batch.mean_u, fold.mean_u),
            (batch.mean_l, fold.mean_l),
            (batch.cov.su, fold.cov.su),
            (batch.cov.sl, fold.cov.sl),
            (batch.cov.ss, fold.cov.ss),
        ] {
            for (x, y) in a.value().iter().zip(b.value()) {
                assert!(
                    (x - y).abs() / x.abs().max(y.abs()).max(1.0) < 1e-8,
                    "fold mismatch {x} vs {y}"
                );
            }
        }

        // shuffled set gives an identical posterior
        let mut shuffled = obs.clone();
        for i in (1..shuffled.len()).rev() {
            shuffled.swap(i, rng.gen_range(0..=i));
        }
        let batch2 = factored_batch_update(&prior, &shuffled, None);
        for (a, b) in [
            (batch.mean_u, batch2.mean_u),
            (batch.cov.su, batch2.cov.su),
            (batch.cov.sl, batch2.cov.sl),
            (batch.cov.ss, batch2.cov.ss),
        ] {
            for (x, y) in a.value().iter().zip(b.value()) {
                assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0));
            }
        }
    }

    #[test]
    fn batch_update_precision_monotone_and_pd() {
        let mut rng = ChaCha12Rng::seed_from_u64(31);
        let tape = Tape::new();
        let d = 5;
        let prior = random_belief(&tape, &mut rng, d);
        let obs: Vec<_> = (0..10)
            .map(|_| {
                let m: Vec<f64> = (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect();
                let v: Vec<f64> = (0..d).map(|_| rng.gen_range(0.05..3.0)).collect();
                diag(&tape, &m, &v)
            })
            .collect();
        let post = factored_batch_update(&prior, &obs, None);
        let prior_prec = crate::factored::factored_invert(&prior.cov).unwrap();
        let post_prec = crate::factored::factored_invert(&post.cov).unwrap();
        for (a, b) in post_prec.lu.value().iter().zip(prior_prec.lu.value()) {
            assert!(a >= &b);
        }
        let su = post.cov.su.value();
        let sl = post.cov.sl.value();
        let ss = post.cov.ss.value();
        for i in 0..d {
            assert!(su[i] * sl[i] - ss[i] * ss[i] > 0.0);
        }
    }

    #[test]
    fn predict_identity_noop_and_noise_add() {
        let tape = Tape::new();
        let d = 2;
        let prior = belief(&tape, &[0.4, -0.6], &[1.0, 2.0], &[1.0, 1.5], &[2.0, 0.5], &[0.1, 0.0]);
        let eye = BlockDiag2x2 {
            uu: tape.full(1, d, 1.0),
            ul: tape.full(1, d, 0.0),
            lu: tape.full(1, d, 0.0),
            ll: tape.full(1, d, 1.0),
        };
        let q0 = DiagPair {
            upper: tape.full(1, d, 0.0),
            lower: tape.full(1, d, 0.0),
        };
        let out = factored_predict(&prior, &eye, None, None, None, &q0);
        assert_eq!(out.mean_u.value(), prior.mean_u.value());
        assert_eq!(out.cov.su.value(), prior.cov.su.value());

        let q = DiagPair {
            upper: tape.leaf(1, d, vec![0.3, 0.4]),
            lower: tape.leaf(1, d, vec![0.1, 0.2]),
        };
        let out = factored_predict(&prior, &eye, None, None, None, &q);
        assert_eq!(out.cov.su.value(), vec![1.3, 1.9]);
        assert_eq!(out.cov.sl.value(), vec![2.1, 0.7]);
        assert_eq!(out.mean_u.value(), prior.mean_u.value());
    }
}
