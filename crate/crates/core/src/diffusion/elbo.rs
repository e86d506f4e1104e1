use serde::{Deserialize, Serialize};

use super::gaussian::{ddpm_reverse, forward_posterior, gaussian_kl_isotropic, VarianceMode};
use super::losses::reconstruction_terms;
use super::{EpsPredictor, NoiseSchedule};
use crate::error::{contract, Result};
use crate::nn::Tensor;
use crate::rng;

/// Sample mean with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub mean: f64,
    pub std_err: f64,
    pub draws: usize,
}

impl McEstimate {
    pub fn from_samples(values: &[f64]) -> Result<Self> {
        let n = values.len();
        if n == 0 {
            return Err(contract!("Monte-Carlo estimate needs at least one draw"));
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std_err = if n > 1 {
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            (var / n as f64).sqrt()
        } else {
            0.0
        };
        Ok(Self {
            mean,
            std_err,
            draws: n,
        })
    }

    /// Half-width of the normal-approximation 95% interval.
    pub fn half_width_95(&self) -> f64 {
        1.959_963_984_540_054 * self.std_err
    }
}

/// Terms of the standard evidence lower bound at a single data point.
#[derive(Debug, Clone, PartialEq)]
pub struct ElboTerms {
    /// `KL(q(x_{t-1}|x_t,x_0) ‖ p_θ(x_{t-1}|x_t))` for `t = 2..=T`, in order.
    pub kl: Vec<McEstimate>,
    /// `-E log p_θ(x_0 | x_1)`.
    pub reconstruction: McEstimate,
    /// `KL(q(x_T|x_0) ‖ N(0, I))`, exact.
    pub prior: f64,
}

impl ElboTerms {
    pub fn f_elbo(&self) -> f64 {
        -self.kl.iter().map(|k| k.mean).sum::<f64>() - self.reconstruction.mean - self.prior
    }
}

fn noisy_batch(
    x0: &[f64],
    alpha_t: f64,
    draws: usize,
    seed: u64,
    label: &str,
    t: usize,
) -> Result<Tensor> {
    let mut rng = rng::stream(seed, label, t as u64);
    let sigma = (1.0 - alpha_t * alpha_t).sqrt();
    let data = (0..draws)
        .flat_map(|_| {
            x0.iter()
                .map(|&x| alpha_t * x + sigma * rng::normal(&mut rng))
                .collect::<Vec<f64>>()
        })
        .collect();
    Tensor::matrix(draws, x0.len(), data)
}

/// Monte-Carlo estimates of every ELBO term for the data point `x0`.
///
/// The reverse process uses the beta-tilde covariance for `t >= 2`; the
/// reconstruction step uses `β_1`.
pub fn elbo_terms(
    schedule: &NoiseSchedule,
    x0: &[f64],
    predictor: &dyn EpsPredictor,
    mc_draws: usize,
    seed: u64,
) -> Result<ElboTerms> {
    if mc_draws == 0 {
        return Err(contract!("elbo_terms needs at least one draw"));
    }
    if schedule.is_empty() {
        return Err(contract!("elbo_terms needs a non-empty schedule"));
    }
    let steps = schedule.len();
    let mut kl = Vec::with_capacity(steps.saturating_sub(1));
    for t in 2..=steps {
        let (beta, alpha, alpha_prev) =
            (schedule.beta(t), schedule.alpha(t), schedule.alpha(t - 1));
        let xt = noisy_batch(x0, alpha, mc_draws, seed, "elbo-kl", t)?;
        let eps = predictor.predict_batch(&xt, &vec![alpha; mc_draws])?;
        let values = xt
            .row_iter()
            .zip(eps.row_iter())
            .map(|(x, e)| {
                let q = forward_posterior(x, x0, beta, alpha, alpha_prev)?;
                let p = ddpm_reverse(x, e, beta, alpha, VarianceMode::BetaTilde)?;
                gaussian_kl_isotropic(&q, &p)
            })
            .collect::<Result<Vec<_>>>()?;
        kl.push(McEstimate::from_samples(&values)?);
    }

    let x1 = noisy_batch(x0, schedule.alpha(1), mc_draws, seed, "elbo-rec", 1)?;
    let rec = reconstruction_terms(x0, &x1, predictor, schedule.beta(1), schedule.alpha(1))?;

    let a_t = schedule.alpha(steps);
    let d = x0.len() as f64;
    let var = 1.0 - a_t * a_t;
    let mean_sq: f64 = x0.iter().map(|x| (a_t * x).powi(2)).sum();
    let prior = 0.5 * (d * var - d - d * var.ln() + mean_sq);

    Ok(ElboTerms {
        kl,
        reconstruction: McEstimate::from_samples(&rec)?,
        prior,
    })
}
