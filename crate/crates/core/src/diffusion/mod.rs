//! Closed-form diffusion quantities.
//!
//! Indices follow the usual 1-based convention: `beta(t)` and `alpha(t)` for
//! `t = 1..=T`, with `alpha(0) = 1` so the forward marginal degenerates to the
//! data itself at `t = 0`.

mod elbo;
mod gaussian;
mod losses;

pub use elbo::{elbo_terms, ElboTerms, McEstimate};
pub use gaussian::{
    ddpm_reverse, ddpm_reverse_mean, forward_diffuse, forward_posterior, gaussian_kl_isotropic,
    reparam_posterior, skipped_forward_variance, IsotropicGaussian, VarianceMode,
};
pub use losses::{
    beta_upper_bound, l_ddpm, l_score, l_step, r_theta, LogTermVariant, StepLossBreakdown,
};

use serde::{Deserialize, Serialize};

use crate::error::{domain, shape, Result};
use crate::nn::Tensor;

/// Full process configuration: a linear training schedule of `T` steps and the
/// skip factor `tau` linking it to the short sampling chain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiffusionSpec {
    #[serde(rename = "T")]
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub tau: usize,
    pub dim: usize,
}

impl DiffusionSpec {
    pub fn validate(&self) -> Result<()> {
        if self.tau < 1 || self.tau >= self.steps {
            return Err(domain!(
                "need 1 <= tau < T, got tau={} T={}",
                self.tau,
                self.steps
            ));
        }
        if self.dim == 0 {
            return Err(shape!("data dimension must be positive"));
        }
        check_linear_endpoints(self.beta_start, self.beta_end)
    }

    /// `N = ⌊T/τ⌋`, the longest sampling chain.
    pub fn max_sampling_steps(&self) -> usize {
        self.steps / self.tau
    }
}

fn check_linear_endpoints(start: f64, end: f64) -> Result<()> {
    if !(start > 0.0 && start <= end && end < 1.0) {
        return Err(domain!(
            "need 0 < beta_start <= beta_end < 1, got {start} and {end}"
        ));
    }
    Ok(())
}

/// Noise scales `β_t` with their cumulative signal scales `α_t = Π_{i≤t} √(1-β_i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(betas: Vec<f64>) -> Result<Self> {
        let alphas = cumulative_alpha(&betas)?;
        Ok(Self { betas, alphas })
    }

    /// `β_t = β_start + (t/T)(β_end - β_start)` for `t = 1..=T`.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        check_linear_endpoints(beta_start, beta_end)?;
        let betas = (1..=steps)
            .map(|t| {
                if t == steps {
                    beta_end
                } else {
                    beta_start + (t as f64 / steps as f64) * (beta_end - beta_start)
                }
            })
            .collect();
        Self::new(betas)
    }

    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    /// `β_t`, 1-based.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    /// `α_t`, 1-based, with `α_0 = 1`.
    pub fn alpha(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alphas[t - 1]
        }
    }

    /// `δ_t = 1 - α_t²`.
    pub fn delta(&self, t: usize) -> f64 {
        1.0 - self.alpha(t).powi(2)
    }
}

pub fn linear_schedule(spec: &DiffusionSpec) -> Result<NoiseSchedule> {
    spec.validate()?;
    NoiseSchedule::linear(spec.steps, spec.beta_start, spec.beta_end)
}

pub fn cumulative_alpha(betas: &[f64]) -> Result<Vec<f64>> {
    let mut acc = 1.0;
    betas
        .iter()
        .enumerate()
        .map(|(i, &b)| {
            if !(b > 0.0 && b < 1.0) {
                return Err(domain!("beta[{i}] = {b} is outside (0, 1)"));
            }
            acc *= (1.0 - b).sqrt();
            Ok(acc)
        })
        .collect()
}

/// Noise predictor `ε(x, α)`: the score network or an analytic stand-in.
pub trait EpsPredictor: Sync {
    fn dim(&self) -> usize;

    /// Predicts noise for each row of `x` (shape `n × dim`) at noise scale `alphas[i]`.
    fn predict_batch(&self, x: &Tensor, alphas: &[f64]) -> Result<Tensor>;

    fn predict(&self, x: &[f64], alpha: f64) -> Result<Vec<f64>> {
        let t = Tensor::matrix(1, x.len(), x.to_vec())?;
        Ok(self.predict_batch(&t, &[alpha])?.into_data())
    }
}

/// Wraps a per-vector closure as an [`EpsPredictor`].
pub struct FnPredictor<F> {
    dim: usize,
    f: F,
}

impl<F> FnPredictor<F>
where
    F: Fn(&[f64], f64) -> Vec<f64> + Sync,
{
    pub fn new(dim: usize, f: F) -> Self {
        Self { dim, f }
    }
}

impl<F> EpsPredictor for FnPredictor<F>
where
    F: Fn(&[f64], f64) -> Vec<f64> + Sync,
{
    fn dim(&self) -> usize {
        self.dim
    }

    fn predict_batch(&self, x: &Tensor, alphas: &[f64]) -> Result<Tensor> {
        check_batch(self.dim, x, alphas)?;
        let data = x
            .row_iter()
            .zip(alphas)
            .flat_map(|(r, &a)| (self.f)(r, a))
            .collect();
        Tensor::matrix(x.rows(), self.dim, data)
    }
}

pub(crate) fn check_batch(dim: usize, x: &Tensor, alphas: &[f64]) -> Result<()> {
    if x.last_dim() != dim || x.rows() != alphas.len() {
        return Err(shape!(
            "predictor of dim {dim} got input {:?} with {} noise scales",
            x.shape(),
            alphas.len()
        ));
    }
    Ok(())
}
