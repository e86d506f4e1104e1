//! Closed-form losses against KL divergences of explicitly built Gaussians.

use bddm::diffusion::{
    ddpm_reverse, forward_posterior, gaussian_kl_isotropic, l_score, l_step, reparam_posterior,
    LogTermVariant, VarianceMode,
};
use proptest::prelude::*;

/// Diagonal-Gaussian KL, one coordinate at a time.
fn kl(m_p: &[f64], v_p: f64, m_q: &[f64], v_q: f64) -> f64 {
    m_p.iter()
        .zip(m_q)
        .map(|(a, b)| 0.5 * ((v_p / v_q) + (a - b).powi(2) / v_q - 1.0 - (v_p / v_q).ln()))
        .sum()
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9 * b.abs().max(1.0)
}

fn vectors(d: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<f64>)> {
    let v = move || prop::collection::vec(-4.0f64..4.0, d);
    (v(), v(), v())
}

proptest! {
    #[test]
    fn score_loss_is_the_same_variance_kl(
        (x, eps, pred) in (1usize..5).prop_flat_map(vectors),
        alpha in 0.01f64..0.99,
        frac in 0.01f64..0.99,
    ) {
        let a2 = alpha * alpha;
        let beta = (1.0 - a2) * frac;
        let x0: Vec<f64> = x.iter().zip(&eps).map(|(v, e)| (v - (1.0 - a2).sqrt() * e) / alpha).collect();
        let prev2 = a2 / (1.0 - beta);
        let var = beta * (1.0 - prev2) / (1.0 - a2);
        let q: Vec<f64> = x0
            .iter()
            .zip(&x)
            .map(|(z, v)| prev2.sqrt() * beta / (1.0 - a2) * z + (1.0 - beta).sqrt() * (1.0 - prev2) / (1.0 - a2) * v)
            .collect();
        let p: Vec<f64> =
            x.iter().zip(&pred).map(|(v, e)| (v - beta / (1.0 - a2).sqrt() * e) / (1.0 - beta).sqrt()).collect();
        let oracle = kl(&p, var, &q, var);
        prop_assert!(close(l_score(&eps, &pred, beta, alpha).unwrap(), oracle));
        let lib = gaussian_kl_isotropic(
            &ddpm_reverse(&x, &pred, beta, alpha, VarianceMode::BetaTilde).unwrap(),
            &reparam_posterior(&x, &eps, beta, alpha).unwrap(),
        ).unwrap();
        prop_assert!(close(lib, oracle));
    }

    #[test]
    fn step_loss_is_the_kl_of_the_step_pair(
        (x0, eps, pred) in (1usize..5).prop_flat_map(vectors),
        alpha in 0.05f64..0.995,
        frac in 0.01f64..0.99,
    ) {
        let d = x0.len() as f64;
        let delta = 1.0 - alpha * alpha;
        let beta = delta * frac;
        let x_t: Vec<f64> = x0.iter().zip(&eps).map(|(z, e)| alpha * z + delta.sqrt() * e).collect();
        let p: Vec<f64> =
            x_t.iter().zip(&pred).map(|(v, e)| (v - beta / delta.sqrt() * e) / (1.0 - beta).sqrt()).collect();
        let q: Vec<f64> = x0.iter().map(|z| alpha * z / (1.0 - beta).sqrt()).collect();
        let oracle = kl(&p, beta * (delta - beta) / (delta * (1.0 - beta)), &q, (delta - beta) / (1.0 - beta));
        let exact = l_step(&eps, &pred, alpha, beta, LogTermVariant::Exact).unwrap();
        let quarter = l_step(&eps, &pred, alpha, beta, LogTermVariant::Quarter).unwrap();
        prop_assert!(close(exact.total, oracle));
        prop_assert!(close(exact.total - quarter.total, (d / 2.0 - 0.25) * (delta / beta).ln()));
    }

    #[test]
    fn forward_posterior_matches_bayes_rule(
        x0 in -3.0f64..3.0,
        x_t in -3.0f64..3.0,
        alpha_prev in 0.2f64..0.99,
        beta in 0.001f64..0.5,
    ) {
        // q(x_{t-1}|x_0) = N(α' x0, 1-α'²), q(x_t|x_{t-1}) = N(√(1-β) x_{t-1}, β):
        // multiply the two precisions and precision-weighted means.
        let prior_var = 1.0 - alpha_prev * alpha_prev;
        let lik_prec = (1.0 - beta) / beta;
        let prec = 1.0 / prior_var + lik_prec;
        let mean = (alpha_prev * x0 / prior_var + (1.0 - beta).sqrt() * x_t / beta) / prec;
        let alpha = alpha_prev * (1.0 - beta).sqrt();
        let q = forward_posterior(&[x_t], &[x0], beta, alpha, alpha_prev).unwrap();
        prop_assert!(close(q.mean[0], mean));
        prop_assert!(close(q.variance, 1.0 / prec));
    }
}
