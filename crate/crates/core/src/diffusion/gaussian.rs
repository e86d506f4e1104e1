use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{contract, domain, shape, Error, Result};

/// `N(mean, variance · I)`.
#[derive(Debug, Clone, PartialEq)]
pub struct IsotropicGaussian {
    pub mean: Vec<f64>,
    pub variance: f64,
}

impl IsotropicGaussian {
    pub fn new(mean: Vec<f64>, variance: f64) -> Result<Self> {
        if !(variance > 0.0 && variance.is_finite()) {
            return Err(domain!(
                "Gaussian variance must be positive and finite, got {variance}"
            ));
        }
        Ok(Self { mean, variance })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn log_density(&self, x: &[f64]) -> f64 {
        let d = self.dim() as f64;
        let sq: f64 = x.iter().zip(&self.mean).map(|(a, m)| (a - m).powi(2)).sum();
        -0.5 * d * (2.0 * std::f64::consts::PI * self.variance).ln() - sq / (2.0 * self.variance)
    }
}

/// Reverse-process covariance choice: `β̃_t I` or `β_t I`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarianceMode {
    Beta,
    #[default]
    BetaTilde,
}

impl VarianceMode {
    /// Variance of the step `t → t-1` with `α_{t-1}² = α_t² / (1 - β_t)`.
    /// Zero for the beta-tilde mode at the very first step.
    pub fn variance(self, beta_t: f64, alpha_t: f64) -> f64 {
        match self {
            VarianceMode::Beta => beta_t,
            VarianceMode::BetaTilde => {
                let a2 = alpha_t * alpha_t;
                let prev = a2 / (1.0 - beta_t);
                ((1.0 - prev) / (1.0 - a2) * beta_t).max(0.0)
            }
        }
    }
}

impl FromStr for VarianceMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "beta" => Ok(Self::Beta),
            "beta_tilde" => Ok(Self::BetaTilde),
            other => Err(contract!(
                "unknown variance mode {other:?} (expected beta or beta_tilde)"
            )),
        }
    }
}

fn check_same_len(a: &[f64], b: &[f64], what: &str) -> Result<()> {
    if a.len() != b.len() {
        return Err(shape!("{what}: lengths {} and {} differ", a.len(), b.len()));
    }
    Ok(())
}

fn check_open_unit(name: &str, v: f64) -> Result<()> {
    if !(v > 0.0 && v < 1.0) {
        return Err(domain!("{name} = {v} is outside (0, 1)"));
    }
    Ok(())
}

/// `x_t = α_t x_0 + √(1-α_t²) ε`.
pub fn forward_diffuse(x0: &[f64], alpha_t: f64, eps: &[f64]) -> Result<Vec<f64>> {
    check_same_len(x0, eps, "forward_diffuse")?;
    if !(alpha_t > 0.0 && alpha_t <= 1.0) {
        return Err(domain!("alpha_t = {alpha_t} is outside (0, 1]"));
    }
    let sigma = (1.0 - alpha_t * alpha_t).sqrt();
    Ok(x0
        .iter()
        .zip(eps)
        .map(|(x, e)| alpha_t * x + sigma * e)
        .collect())
}

/// Variance of `q(x_{t+τ} | x_t)`: `1 - α²_{t+τ} / α²_t`.
pub fn skipped_forward_variance(alpha_t: f64, alpha_t_plus_tau: f64) -> Result<f64> {
    if !(alpha_t_plus_tau > 0.0 && alpha_t_plus_tau < alpha_t && alpha_t <= 1.0) {
        return Err(domain!(
            "need 0 < alpha_(t+tau) < alpha_t <= 1, got {alpha_t_plus_tau} and {alpha_t}"
        ));
    }
    Ok(1.0 - (alpha_t_plus_tau / alpha_t).powi(2))
}

/// Posterior of the short chain with `x̂_0` re-expressed through `(x_t, ε̂)`.
pub fn reparam_posterior(
    x_t: &[f64],
    eps_hat: &[f64],
    beta_hat_n: f64,
    alpha_hat_n: f64,
) -> Result<IsotropicGaussian> {
    check_same_len(x_t, eps_hat, "reparam_posterior")?;
    check_open_unit("alpha_hat_n", alpha_hat_n)?;
    let a2 = alpha_hat_n * alpha_hat_n;
    if !(beta_hat_n > 0.0 && beta_hat_n < 1.0 - a2) {
        return Err(domain!(
            "degenerate posterior: beta_hat_n = {beta_hat_n} must lie in (0, 1 - alpha_hat_n^2 = {})",
            1.0 - a2
        ));
    }
    let x_coef = 1.0 / (1.0 - beta_hat_n).sqrt();
    let e_coef = beta_hat_n / ((1.0 - beta_hat_n) * (1.0 - a2)).sqrt();
    let mean = x_t
        .iter()
        .zip(eps_hat)
        .map(|(x, e)| x_coef * x - e_coef * e)
        .collect();
    let prev_a2 = a2 / (1.0 - beta_hat_n);
    IsotropicGaussian::new(mean, (1.0 - prev_a2) / (1.0 - a2) * beta_hat_n)
}

/// Mean of the reverse step `(x_t - β_t ε / √(1-α_t²)) / √(1-β_t)`.
pub fn ddpm_reverse_mean(x_t: &[f64], eps_pred: &[f64], beta_t: f64, alpha_t: f64) -> Vec<f64> {
    let e_coef = beta_t / (1.0 - alpha_t * alpha_t).sqrt();
    let scale = 1.0 / (1.0 - beta_t).sqrt();
    x_t.iter()
        .zip(eps_pred)
        .map(|(x, e)| scale * (x - e_coef * e))
        .collect()
}

/// Reverse transition `p_θ(x_{t-1} | x_t)`.
pub fn ddpm_reverse(
    x_t: &[f64],
    eps_pred: &[f64],
    beta_t: f64,
    alpha_t: f64,
    mode: VarianceMode,
) -> Result<IsotropicGaussian> {
    check_same_len(x_t, eps_pred, "ddpm_reverse")?;
    check_open_unit("beta_t", beta_t)?;
    check_open_unit("alpha_t", alpha_t)?;
    if mode == VarianceMode::BetaTilde && alpha_t * alpha_t >= 1.0 - beta_t {
        return Err(domain!(
            "beta-tilde variance vanishes: alpha_t^2 = {} >= 1 - beta_t",
            alpha_t * alpha_t
        ));
    }
    IsotropicGaussian::new(
        ddpm_reverse_mean(x_t, eps_pred, beta_t, alpha_t),
        mode.variance(beta_t, alpha_t),
    )
}

/// Forward posterior `q(x_{t-1} | x_t, x_0)` of the training chain, `t >= 2`.
pub fn forward_posterior(
    x_t: &[f64],
    x0: &[f64],
    beta_t: f64,
    alpha_t: f64,
    alpha_prev: f64,
) -> Result<IsotropicGaussian> {
    check_same_len(x_t, x0, "forward_posterior")?;
    let delta = 1.0 - alpha_t * alpha_t;
    let delta_prev = 1.0 - alpha_prev * alpha_prev;
    let c0 = alpha_prev * beta_t / delta;
    let ct = (1.0 - beta_t).sqrt() * delta_prev / delta;
    let mean = x0.iter().zip(x_t).map(|(a, b)| c0 * a + ct * b).collect();
    IsotropicGaussian::new(mean, delta_prev / delta * beta_t)
}

/// `KL(p ‖ q)` for isotropic Gaussians.
pub fn gaussian_kl_isotropic(p: &IsotropicGaussian, q: &IsotropicGaussian) -> Result<f64> {
    check_same_len(&p.mean, &q.mean, "gaussian_kl_isotropic")?;
    let d = p.dim() as f64;
    let ratio = p.variance / q.variance;
    let sq: f64 = p
        .mean
        .iter()
        .zip(&q.mean)
        .map(|(a, b)| (a - b).powi(2))
        .sum();
    Ok(0.5 * (d * ratio - d - d * ratio.ln() + sq / q.variance))
}
