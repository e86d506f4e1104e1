use serde::{Deserialize, Serialize};

use super::EpsPredictor;
use crate::error::{contract, domain, shape, Result};
use crate::nn::Tensor;

fn sq_dist(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(shape!("lengths {} and {} differ", a.len(), b.len()));
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum())
}

/// `‖ε - ε_θ‖²`.
pub fn l_ddpm(eps_true: &[f64], eps_pred: &[f64]) -> Result<f64> {
    sq_dist(eps_true, eps_pred)
}

/// Largest admissible `β̂_n` given its successor:
/// `min{1 - α̂²_{n+1}/(1-β̂_{n+1}), β̂_{n+1}}`.
pub fn beta_upper_bound(alpha_hat_next: f64, beta_hat_next: f64) -> Result<f64> {
    if !(alpha_hat_next > 0.0 && alpha_hat_next < 1.0) {
        return Err(domain!(
            "alpha_hat_(n+1) = {alpha_hat_next} is outside (0, 1)"
        ));
    }
    if !(beta_hat_next > 0.0 && beta_hat_next < 1.0) {
        return Err(domain!(
            "beta_hat_(n+1) = {beta_hat_next} is outside (0, 1)"
        ));
    }
    let a2 = alpha_hat_next * alpha_hat_next;
    if a2 >= 1.0 - beta_hat_next {
        return Err(domain!(
            "alpha_hat_(n+1)^2 = {a2} must be below 1 - beta_hat_(n+1) = {}",
            1.0 - beta_hat_next
        ));
    }
    Ok((1.0 - a2 / (1.0 - beta_hat_next)).min(beta_hat_next))
}

/// Score-network KL in closed form:
/// `β̂_n / (2(1 - β̂_n - α̂_n²)) · ‖ε - ε_θ‖²`.
pub fn l_score(
    eps_true: &[f64],
    eps_pred: &[f64],
    beta_hat_n: f64,
    alpha_hat_n: f64,
) -> Result<f64> {
    let denom = 1.0 - beta_hat_n - alpha_hat_n * alpha_hat_n;
    if !(beta_hat_n > 0.0 && denom > 0.0) {
        return Err(domain!(
            "l_score needs beta_hat_n > 0 and 1 - beta_hat_n - alpha_hat_n^2 > 0, got {beta_hat_n} and {denom}"
        ));
    }
    Ok(beta_hat_n / (2.0 * denom) * sq_dist(eps_true, eps_pred)?)
}

/// Coefficient on `log(δ_t/β̂_n)` in the step loss.
///
/// `Quarter` (config value `"paper"`) uses a fixed `1/4`; `Exact` uses `D/2`,
/// which is what the Gaussian KL between the two step distributions evaluates to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LogTermVariant {
    #[default]
    #[serde(rename = "paper")]
    Quarter,
    Exact,
}

impl LogTermVariant {
    pub fn coefficient(self, dim: usize) -> f64 {
        match self {
            LogTermVariant::Quarter => 0.25,
            LogTermVariant::Exact => dim as f64 / 2.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLossBreakdown {
    pub norm_term: f64,
    pub log_term: f64,
    pub trace_term: f64,
    pub total: f64,
    pub delta_t: f64,
}

/// Schedule-network step loss at junction scale `α_t` with candidate `β̂_n`:
///
/// ```text
/// δ/(2(δ-β̂)) ‖ε - (β̂/δ) ε_θ‖² + k·log(δ/β̂) + (D/2)(β̂/δ - 1),   δ = 1 - α_t²
/// ```
pub fn l_step(
    eps: &[f64],
    eps_pred: &[f64],
    alpha_t: f64,
    beta_hat_n: f64,
    variant: LogTermVariant,
) -> Result<StepLossBreakdown> {
    if eps.len() != eps_pred.len() {
        return Err(shape!(
            "l_step: lengths {} and {} differ",
            eps.len(),
            eps_pred.len()
        ));
    }
    let delta = 1.0 - alpha_t * alpha_t;
    if !(beta_hat_n > 0.0 && beta_hat_n < delta && delta < 1.0) {
        return Err(domain!(
            "l_step needs 0 < beta_hat_n < delta_t < 1, got {beta_hat_n} and {delta}"
        ));
    }
    let d = eps.len();
    let ratio = beta_hat_n / delta;
    let resid: f64 = eps
        .iter()
        .zip(eps_pred)
        .map(|(e, p)| (e - ratio * p).powi(2))
        .sum();
    let norm_term = delta / (2.0 * (delta - beta_hat_n)) * resid;
    let log_term = variant.coefficient(d) * (delta / beta_hat_n).ln();
    let trace_term = d as f64 / 2.0 * (ratio - 1.0);
    Ok(StepLossBreakdown {
        norm_term,
        log_term,
        trace_term,
        total: norm_term + log_term + trace_term,
        delta_t: delta,
    })
}

/// Per-sample reconstruction terms `-log N(x0; μ_θ(x̂_1), β̂_1 I)`.
pub(crate) fn reconstruction_terms(
    x0: &[f64],
    x1_samples: &Tensor,
    predictor: &dyn EpsPredictor,
    beta_1: f64,
    alpha_1: f64,
) -> Result<Vec<f64>> {
    if x1_samples.rows() == 0 {
        return Err(contract!(
            "reconstruction term needs at least one x_1 sample"
        ));
    }
    if !(beta_1 > 0.0 && beta_1 < 1.0) {
        return Err(domain!("beta_1 = {beta_1} is outside (0, 1)"));
    }
    if x1_samples.last_dim() != x0.len() {
        return Err(shape!(
            "x_1 samples have dim {}, x_0 has {}",
            x1_samples.last_dim(),
            x0.len()
        ));
    }
    let eps = predictor.predict_batch(x1_samples, &vec![alpha_1; x1_samples.rows()])?;
    let d = x0.len() as f64;
    let log_norm = 0.5 * d * (2.0 * std::f64::consts::PI * beta_1).ln();
    // The first step's noise coefficient β̂₁/√(1-α̂₁²) is √β̂₁ when α̂₁² = 1 - β̂₁.
    let root = beta_1.sqrt();
    let scale = 1.0 / (1.0 - beta_1).sqrt();
    Ok(x1_samples
        .row_iter()
        .zip(eps.row_iter())
        .map(|(x1, e)| {
            let sq: f64 = x0
                .iter()
                .zip(x1.iter().zip(e))
                .map(|(a, (x, ev))| (a - scale * (x - root * ev)).powi(2))
                .sum();
            log_norm + sq / (2.0 * beta_1)
        })
        .collect())
}

/// Monte-Carlo reconstruction term over the given `x̂_1` draws.
pub fn r_theta(
    x0: &[f64],
    x1_samples: &Tensor,
    predictor: &dyn EpsPredictor,
    beta_1: f64,
    alpha_1: f64,
) -> Result<f64> {
    let terms = reconstruction_terms(x0, x1_samples, predictor, beta_1, alpha_1)?;
    Ok(terms.iter().sum::<f64>() / terms.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::FnPredictor;

    #[test]
    fn l_ddpm_examples() {
        assert_eq!(l_ddpm(&[0.3, -1.0], &[0.3, -1.0]).unwrap(), 0.0);
        assert_eq!(l_ddpm(&[1.0, 0.0], &[0.0, 0.0]).unwrap(), 1.0);
        assert!(l_ddpm(&[1.0], &[0.0, 0.0]).is_err());
    }

    #[test]
    fn upper_bound_examples() {
        assert!((beta_upper_bound(0.5, 0.5).unwrap() - 0.5).abs() < 1e-15);
        assert!((beta_upper_bound(0.9, 0.1).unwrap() - 0.1).abs() < 1e-15);
        assert!((beta_upper_bound(0.3, 0.8).unwrap() - 0.55).abs() < 1e-15);
        assert!(beta_upper_bound(0.9, 0.5).is_err());
        assert!(beta_upper_bound(0.0, 0.5).is_err());
        assert!(beta_upper_bound(0.5, 1.0).is_err());
    }

    #[test]
    fn l_score_examples() {
        assert_eq!(l_score(&[1.0], &[1.0], 0.2, 0.6_f64.sqrt()).unwrap(), 0.0);
        // coefficient 0.2 / (2 · 0.2) = 0.5
        let v = l_score(&[1.0, 0.0], &[0.0, 0.0], 0.2, 0.6_f64.sqrt()).unwrap();
        assert!((v - 0.5).abs() < 1e-12);
        assert!(l_score(&[1.0], &[0.0], 0.5, 0.8).is_err());
    }

    #[test]
    fn l_step_examples() {
        let alpha: f64 = 0.6;
        let delta = 1.0 - alpha * alpha;
        let beta = delta / std::f64::consts::E;
        let eps = [0.4, -1.2, 0.9];
        let pred: Vec<f64> = eps.iter().map(|e| e * delta / beta).collect();
        let b = l_step(&eps, &pred, alpha, beta, LogTermVariant::Quarter).unwrap();
        assert!(b.norm_term.abs() < 1e-12);
        let c = 0.25 + 1.5 * (1.0 / std::f64::consts::E - 1.0);
        assert!((b.total - c).abs() < 1e-12);
        assert!((b.total - (b.norm_term + b.log_term + b.trace_term)).abs() < 1e-12);
        assert_eq!(b.delta_t, delta);
        assert!(l_step(&eps, &pred, alpha, delta, LogTermVariant::Quarter).is_err());
        assert!(l_step(&eps, &pred[..2], alpha, beta, LogTermVariant::Quarter).is_err());
    }

    #[test]
    fn r_theta_examples() {
        let zero = FnPredictor::new(1, |_: &[f64], _| vec![0.0]);
        let beta = 1.0 / (2.0 * std::f64::consts::PI);
        let alpha = (1.0 - beta).sqrt();
        // x1 chosen so the reconstruction is perfect: x1/√(1-β) = x0.
        let x1 = Tensor::matrix(1, 1, vec![0.8 * (1.0 - beta).sqrt()]).unwrap();
        let v = r_theta(&[0.8], &x1, &zero, beta, alpha).unwrap();
        assert!(v.abs() < 1e-12);
        let empty = Tensor::zeros(vec![0, 1]);
        assert!(matches!(
            r_theta(&[0.8], &empty, &zero, beta, alpha),
            Err(crate::Error::Contract(_))
        ));
    }
}
