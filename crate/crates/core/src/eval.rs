//! Analytic Gaussian oracle, sample-quality metrics and the bound comparison.

use rand::RngCore;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffusion::{
    ddpm_reverse, forward_posterior, gaussian_kl_isotropic, l_score, l_step, linear_schedule,
    DiffusionSpec, EpsPredictor, LogTermVariant, McEstimate, NoiseSchedule, VarianceMode,
};
use crate::error::{contract, domain, shape, Result};
use crate::nn::Tensor;
use crate::rng;
use crate::training::DataSampler;

/// Isotropic Gaussian data `N(μ, s² I)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianDataSpec {
    pub mu: Vec<f64>,
    pub s2: f64,
}

impl GaussianDataSpec {
    pub fn new(mu: Vec<f64>, s2: f64) -> Result<Self> {
        if mu.is_empty() {
            return Err(shape!("data mean must have at least one entry"));
        }
        if !(s2 >= 0.0 && s2.is_finite()) {
            return Err(domain!("data variance s2 = {s2} must be finite and >= 0"));
        }
        Ok(Self { mu, s2 })
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }
}

impl DataSampler for GaussianDataSpec {
    fn dim(&self) -> usize {
        self.mu.len()
    }

    fn draw(&self, rng: &mut dyn RngCore, out: &mut [f64]) {
        let s = self.s2.sqrt();
        for (o, m) in out.iter_mut().zip(&self.mu) {
            *o = m + s * rng::normal(rng);
        }
    }
}

/// `E[ε | x_t] = √(1-α²)(x_t - αμ) / (α²s² + 1 - α²)`.
pub fn analytic_eps(spec: &GaussianDataSpec, x_t: &[f64], alpha_t: f64) -> Result<Vec<f64>> {
    if x_t.len() != spec.dim() {
        return Err(shape!(
            "x_t has {} entries, data has {}",
            x_t.len(),
            spec.dim()
        ));
    }
    if !(alpha_t > 0.0 && alpha_t < 1.0) {
        return Err(domain!("alpha_t = {alpha_t} is outside (0, 1)"));
    }
    let a2 = alpha_t * alpha_t;
    let c = (1.0 - a2).sqrt() / (a2 * spec.s2 + 1.0 - a2);
    Ok(x_t
        .iter()
        .zip(&spec.mu)
        .map(|(x, m)| c * (x - alpha_t * m))
        .collect())
}

/// The MMSE noise predictor as an [`EpsPredictor`].
#[derive(Debug, Clone, PartialEq)]
pub struct AnalyticEps {
    pub spec: GaussianDataSpec,
}

impl EpsPredictor for AnalyticEps {
    fn dim(&self) -> usize {
        self.spec.dim()
    }

    fn predict_batch(&self, x: &Tensor, alphas: &[f64]) -> Result<Tensor> {
        crate::diffusion::check_batch(self.dim(), x, alphas)?;
        let mut data = Vec::with_capacity(x.len());
        for (row, &a) in x.row_iter().zip(alphas) {
            data.extend(analytic_eps(&self.spec, row, a)?);
        }
        Tensor::matrix(x.rows(), self.dim(), data)
    }
}

/// Irreducible `L_ddpm` under `t ~ U{1..T}`: `(1/T) Σ_t D α_t²s² / (α_t²s² + 1 - α_t²)`.
pub fn mmse_risk(spec: &GaussianDataSpec, schedule: &NoiseSchedule) -> f64 {
    let d = spec.dim() as f64;
    let total: f64 = schedule
        .alphas()
        .iter()
        .map(|a| {
            let a2s = a * a * spec.s2;
            d * a2s / (a2s + 1.0 - a * a)
        })
        .sum();
    total / schedule.len() as f64
}

/// Monte-Carlo `E‖ε - ε̂(x_t, α_t)‖²` at a fixed `t`.
pub fn ddpm_loss_at(
    predictor: &dyn EpsPredictor,
    data: &dyn DataSampler,
    schedule: &NoiseSchedule,
    t: usize,
    draws: usize,
    seed: u64,
) -> Result<McEstimate> {
    if !(1..=schedule.len()).contains(&t) {
        return Err(domain!("t = {t} is outside 1..={}", schedule.len()));
    }
    let d = data.dim();
    let alpha = schedule.alpha(t);
    let sigma = (1.0 - alpha * alpha).sqrt();
    let mut x = Vec::with_capacity(draws * d);
    let mut eps = Vec::with_capacity(draws * d);
    let mut x0 = vec![0.0; d];
    let mut e = vec![0.0; d];
    for k in 0..draws {
        let mut r = rng::stream(seed, "ddpm-loss", ((t as u64) << 32) | k as u64);
        data.draw(&mut r, &mut x0);
        rng::fill_normal(&mut r, &mut e);
        x.extend(x0.iter().zip(&e).map(|(a, b)| alpha * a + sigma * b));
        eps.extend_from_slice(&e);
    }
    let pred = predictor.predict_batch(&Tensor::matrix(draws, d, x)?, &vec![alpha; draws])?;
    let losses: Vec<f64> = pred
        .row_iter()
        .zip(eps.chunks(d))
        .map(|(p, e)| p.iter().zip(e).map(|(a, b)| (a - b).powi(2)).sum())
        .collect();
    McEstimate::from_samples(&losses)
}

fn rbf(a: &[f64], b: &[f64], inv_two_h2: f64) -> f64 {
    let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
    (-d2 * inv_two_h2).exp()
}

/// Sum of `k(a_i, b_j)` over all pairs, skipping `i == j` when `same`.
/// Rows are reduced in parallel and then summed in index order.
fn kernel_sum(a: &Tensor, b: &Tensor, inv_two_h2: f64, same: bool) -> f64 {
    let rows: Vec<f64> = (0..a.rows())
        .into_par_iter()
        .map(|i| {
            let ai = a.row(i);
            (0..b.rows())
                .filter(|&j| !(same && i == j))
                .map(|j| rbf(ai, b.row(j), inv_two_h2))
                .sum()
        })
        .collect();
    rows.iter().sum()
}

/// Unbiased `MMD²` with kernel `exp(-‖x-y‖²/(2h²))`.
pub fn mmd_rbf(a: &Tensor, b: &Tensor, bandwidth: f64) -> Result<f64> {
    if a.last_dim() != b.last_dim() {
        return Err(shape!(
            "sample dims {} and {} differ",
            a.last_dim(),
            b.last_dim()
        ));
    }
    if a.rows() < 2 || b.rows() < 2 {
        return Err(contract!(
            "unbiased MMD needs at least 2 samples per side, got {} and {}",
            a.rows(),
            b.rows()
        ));
    }
    if !(bandwidth > 0.0 && bandwidth.is_finite()) {
        return Err(domain!(
            "bandwidth must be positive and finite, got {bandwidth}"
        ));
    }
    let g = 1.0 / (2.0 * bandwidth * bandwidth);
    let (m, n) = (a.rows() as f64, b.rows() as f64);
    let kaa = kernel_sum(a, a, g, true) / (m * (m - 1.0));
    let kbb = kernel_sum(b, b, g, true) / (n * (n - 1.0));
    let kab = kernel_sum(a, b, g, false) / (m * n);
    Ok(kaa + kbb - 2.0 * kab)
}

/// Upper bound on pooled points used by [`median_bandwidth`].
pub const BANDWIDTH_SUBSAMPLE: usize = 1024;

/// Median pairwise distance over the pooled samples, thinned by an even stride
/// to at most [`BANDWIDTH_SUBSAMPLE`] points.
pub fn median_bandwidth(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.last_dim() != b.last_dim() {
        return Err(shape!(
            "sample dims {} and {} differ",
            a.last_dim(),
            b.last_dim()
        ));
    }
    let pooled: Vec<&[f64]> = a.row_iter().chain(b.row_iter()).collect();
    let stride = pooled.len().div_ceil(BANDWIDTH_SUBSAMPLE).max(1);
    let pts: Vec<&[f64]> = pooled.into_iter().step_by(stride).collect();
    let mut dists: Vec<f64> = Vec::with_capacity(pts.len() * pts.len() / 2);
    for i in 0..pts.len() {
        for j in i + 1..pts.len() {
            dists.push(
                pts[i]
                    .iter()
                    .zip(pts[j])
                    .map(|(x, y)| (x - y).powi(2))
                    .sum::<f64>()
                    .sqrt(),
            );
        }
    }
    if dists.is_empty() {
        return Err(contract!(
            "median bandwidth needs at least two pooled samples"
        ));
    }
    dists.sort_by(f64::total_cmp);
    let mid = dists.len() / 2;
    let h = if dists.len() % 2 == 1 {
        dists[mid]
    } else {
        0.5 * (dists[mid - 1] + dists[mid])
    };
    if h <= 0.0 {
        return Err(domain!(
            "all pooled samples coincide; median bandwidth is zero"
        ));
    }
    Ok(h)
}

/// Per-`t` KL parts of the two lower bounds (larger is tighter) with 95% half-widths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundSweep {
    pub t_values: Vec<usize>,
    pub f_elbo: Vec<McEstimate>,
    pub f_bddm: Vec<McEstimate>,
    /// Paired per-draw difference `F_bddm - F_elbo`.
    pub gap: Vec<McEstimate>,
    pub mc_draws: usize,
    pub seed: u64,
    pub variant: LogTermVariant,
}

impl BoundSweep {
    /// Fraction of grid points where the mean of `F_bddm` is at least that of `F_elbo`.
    pub fn tighter_fraction(&self) -> f64 {
        let hits = self
            .f_bddm
            .iter()
            .zip(&self.f_elbo)
            .filter(|(b, e)| b.mean >= e.mean)
            .count();
        hits as f64 / self.t_values.len() as f64
    }

    pub fn to_csv(&self) -> String {
        use crate::json::format_f64 as f;
        let mut out = String::from(
            "t,f_elbo,f_elbo_half_width,f_bddm,f_bddm_half_width,gap,gap_half_width\n",
        );
        for (k, t) in self.t_values.iter().enumerate() {
            let (e, b, g) = (&self.f_elbo[k], &self.f_bddm[k], &self.gap[k]);
            out.push_str(&format!(
                "{t},{},{},{},{},{},{}\n",
                f(e.mean),
                f(e.half_width_95()),
                f(b.mean),
                f(b.half_width_95()),
                f(g.mean),
                f(g.half_width_95())
            ));
        }
        out
    }
}

/// Compares the two bounds at each `t` with `β̂ = β`. Each draw takes its own
/// `x_0` and `ε`, and both bounds share the draw.
///
/// `F_elbo(t) = -KL(q(x_{t-1}|x_t,x_0) ‖ p(x_{t-1}|x_t))` and
/// `F_bddm(t) = -L_score + L_step`, both with the beta-tilde reverse variance.
pub fn bound_sweep(
    predictor: &dyn EpsPredictor,
    spec: &DiffusionSpec,
    data: &dyn DataSampler,
    t_values: &[usize],
    mc_draws: usize,
    variant: LogTermVariant,
    seed: u64,
) -> Result<BoundSweep> {
    spec.validate()?;
    if t_values.is_empty() {
        return Err(contract!("bound sweep needs at least one t"));
    }
    if mc_draws < 2 {
        return Err(contract!(
            "bound sweep needs at least 2 draws per t, got {mc_draws}"
        ));
    }
    if let Some(&t) = t_values
        .iter()
        .find(|&&t| t < spec.tau || t + spec.tau > spec.steps)
    {
        return Err(domain!(
            "t = {t} is outside [tau, T - tau] = [{}, {}]",
            spec.tau,
            spec.steps.saturating_sub(spec.tau)
        ));
    }
    if data.dim() != spec.dim || predictor.dim() != spec.dim {
        return Err(shape!(
            "data/predictor/spec dims {} / {} / {} differ",
            data.dim(),
            predictor.dim(),
            spec.dim
        ));
    }
    let schedule = linear_schedule(spec)?;
    let d = spec.dim;
    let mut sweep = BoundSweep {
        t_values: t_values.to_vec(),
        f_elbo: Vec::new(),
        f_bddm: Vec::new(),
        gap: Vec::new(),
        mc_draws,
        seed,
        variant,
    };
    for &t in t_values {
        let (beta, alpha, alpha_prev) =
            (schedule.beta(t), schedule.alpha(t), schedule.alpha(t - 1));
        let sigma = (1.0 - alpha * alpha).sqrt();
        let mut x0s = vec![0.0; mc_draws * d];
        let mut eps = vec![0.0; mc_draws * d];
        for (k, (x0, e)) in x0s.chunks_mut(d).zip(eps.chunks_mut(d)).enumerate() {
            let mut r = rng::stream(seed, "bound-sweep", ((t as u64) << 32) | k as u64);
            data.draw(&mut r, x0);
            rng::fill_normal(&mut r, e);
        }
        let xt: Vec<f64> = x0s
            .iter()
            .zip(&eps)
            .map(|(a, b)| alpha * a + sigma * b)
            .collect();
        let pred = predictor.predict_batch(
            &Tensor::matrix(mc_draws, d, xt.clone())?,
            &vec![alpha; mc_draws],
        )?;

        let per_draw: Vec<(f64, f64)> = (0..mc_draws)
            .into_par_iter()
            .map(|k| -> Result<(f64, f64)> {
                let (x0, e, x, p) = (
                    &x0s[k * d..][..d],
                    &eps[k * d..][..d],
                    &xt[k * d..][..d],
                    pred.row(k),
                );
                let q = forward_posterior(x, x0, beta, alpha, alpha_prev)?;
                let model = ddpm_reverse(x, p, beta, alpha, VarianceMode::BetaTilde)?;
                let elbo = -gaussian_kl_isotropic(&q, &model)?;
                let bddm = -l_score(e, p, beta, alpha)? + l_step(e, p, alpha, beta, variant)?.total;
                Ok((elbo, bddm))
            })
            .collect::<Result<_>>()?;
        let elbo: Vec<f64> = per_draw.iter().map(|v| v.0).collect();
        let bddm: Vec<f64> = per_draw.iter().map(|v| v.1).collect();
        let gap: Vec<f64> = per_draw.iter().map(|v| v.1 - v.0).collect();
        sweep.f_elbo.push(McEstimate::from_samples(&elbo)?);
        sweep.f_bddm.push(McEstimate::from_samples(&bddm)?);
        sweep.gap.push(McEstimate::from_samples(&gap)?);
    }
    Ok(sweep)
}
