//! Dense-matrix reference implementations used by the test suites: textbook
//! Kalman predict/update (Joseph form) and stacked-observation Gaussian
//! conditioning. Slow by design; every factored kernel has a dense twin here
//! and randomized equivalence tests bind the two.

use nalgebra::{DMatrix, DVector};

use crate::error::{MtsError, Result};

/// `mean⁺ = A·mean + drift`, `cov⁺ = A·cov·Aᵀ + addcov`, symmetrized.
pub fn dense_kalman_predict(
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
    a: &DMatrix<f64>,
    drift: &DVector<f64>,
    addcov: &DMatrix<f64>,
) -> (DVector<f64>, DMatrix<f64>) {
    let mean_out = a * mean + drift;
    let cov_out = a * cov * a.transpose() + addcov;
    (mean_out, symmetrize(&cov_out))
}

/// Joseph-form Kalman observation update.
pub fn dense_kalman_update(
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
    h: &DMatrix<f64>,
    obs_mean: &DVector<f64>,
    obs_cov: &DMatrix<f64>,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let innov_cov = h * cov * h.transpose() + obs_cov;
    let inv = innov_cov
        .clone()
        .try_inverse()
        .ok_or_else(|| MtsError::Data("singular innovation covariance".into()))?;
    let gain = cov * h.transpose() * inv;
    let resid = obs_mean - h * mean;
    let mean_out = mean + &gain * resid;
    let n = mean.len();
    let ikh = DMatrix::<f64>::identity(n, n) - &gain * h;
    let cov_out = &ikh * cov * ikh.transpose() + &gain * obs_cov * gain.transpose();
    Ok((mean_out, symmetrize(&cov_out)))
}

/// Precision-form conditioning of a `2d`-dimensional prior on a set of
/// `d`-dimensional observations, each with observation model `H = [I, 0]`
/// and diagonal noise. The stacked derivation evaluated directly.
pub fn dense_batch_condition(
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
    obs: &[(DVector<f64>, DVector<f64>)],
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    if obs.is_empty() {
        return Ok((mean.clone(), cov.clone()));
    }
    let n = mean.len();
    let d = n / 2;
    let prior_prec = cov
        .clone()
        .try_inverse()
        .ok_or_else(|| MtsError::Data("singular prior covariance".into()))?;
    let mut post_prec = prior_prec;
    let mut weighted_resid = DVector::<f64>::zeros(n);
    for (obs_mean, obs_var) in obs {
        assert_eq!(obs_mean.len(), d, "dense_batch_condition: obs dim");
        for i in 0..d {
            post_prec[(i, i)] += 1.0 / obs_var[i];
            weighted_resid[i] += (obs_mean[i] - mean[i]) / obs_var[i];
        }
    }
    let post_cov = post_prec
        .try_inverse()
        .ok_or_else(|| MtsError::Data("singular posterior precision".into()))?;
    let mean_out = mean + &post_cov * weighted_resid;
    Ok((mean_out, symmetrize(&post_cov)))
}

fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}
