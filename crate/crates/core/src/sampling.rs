//! Generation along a short schedule with the DDPM or DDIM reverse process.
//!
//! Element `i` of a batch owns two streams: `(seed, "sample-init", i)` for its
//! starting noise and `(seed, "sample-noise", i)` for noise injected on the way
//! down. The last step always returns the mean.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::diffusion::{EpsPredictor, VarianceMode};
use crate::error::{contract, domain, Error, Result};
use crate::nn::Tensor;
use crate::rng::{self, StreamRng};
use crate::scheduling::PredictedSchedule;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Process {
    #[default]
    Ddpm,
    Ddim,
}

impl FromStr for Process {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ddpm" => Ok(Self::Ddpm),
            "ddim" => Ok(Self::Ddim),
            other => Err(contract!(
                "unknown process {other:?} (expected ddpm or ddim)"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    #[serde(default)]
    pub process: Process,
    /// DDIM noise level; 0 makes the trajectory deterministic after the first draw.
    #[serde(default)]
    pub ddim_eta: f64,
    /// DDPM only.
    #[serde(default)]
    pub variance_mode: VarianceMode,
    pub seed: u64,
}

impl SamplerConfig {
    pub fn new(process: Process, seed: u64) -> Self {
        Self {
            process,
            ddim_eta: 0.0,
            variance_mode: VarianceMode::default(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.ddim_eta >= 0.0 && self.ddim_eta.is_finite()) {
            return Err(domain!(
                "ddim_eta must be finite and >= 0, got {}",
                self.ddim_eta
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleBatch {
    /// `count × D`.
    pub samples: Tensor,
    pub schedule: PredictedSchedule,
    pub seed: u64,
}

const INIT_LABEL: &str = "sample-init";
const NOISE_LABEL: &str = "sample-noise";

struct Trajectory {
    x: Vec<f64>,
    noise: Vec<StreamRng>,
    count: usize,
    dim: usize,
}

impl Trajectory {
    fn start(count: usize, dim: usize, seed: u64, noise_label: &str) -> Self {
        let mut x = vec![0.0; count * dim];
        for (i, row) in x.chunks_mut(dim).enumerate() {
            rng::fill_normal(&mut rng::stream(seed, INIT_LABEL, i as u64), row);
        }
        let noise = (0..count)
            .map(|i| rng::stream(seed, noise_label, i as u64))
            .collect();
        Self {
            x,
            noise,
            count,
            dim,
        }
    }

    fn predict(&self, score_net: &dyn EpsPredictor, alpha: f64) -> Result<Tensor> {
        let x = Tensor::matrix(self.count, self.dim, self.x.clone())?;
        score_net.predict_batch(&x, &vec![alpha; self.count])
    }

    /// `x ← a·x + b·ε + sd·z`, one `z` per entry from the element's own stream.
    fn update(&mut self, eps: &Tensor, a: f64, b: f64, sd: f64) {
        for ((row, e), r) in self
            .x
            .chunks_mut(self.dim)
            .zip(eps.row_iter())
            .zip(&mut self.noise)
        {
            for (v, ev) in row.iter_mut().zip(e) {
                *v = a * *v + b * ev;
                if sd > 0.0 {
                    *v += sd * rng::normal(r);
                }
            }
        }
    }

    fn finish(self, schedule: &PredictedSchedule, seed: u64) -> Result<SampleBatch> {
        if let Some(bad) = self.x.iter().find(|v| !v.is_finite()) {
            return Err(domain!("sampling produced a non-finite value {bad}"));
        }
        Ok(SampleBatch {
            samples: Tensor::matrix(self.count, self.dim, self.x)?,
            schedule: schedule.clone(),
            seed,
        })
    }
}

fn check(schedule: &PredictedSchedule, config: &SamplerConfig) -> Result<()> {
    config.validate()?;
    if schedule.is_empty() {
        return Err(contract!("cannot sample with an empty schedule"));
    }
    Ok(())
}

/// DDPM reverse process from `x̂_{N_s} ~ N(0, I)` down to `x̂_0`, with the
/// score net conditioned on `α̂_n = Π_{i≤n} √(1-β̂_i)`.
pub fn sample_ddpm(
    score_net: &dyn EpsPredictor,
    schedule: &PredictedSchedule,
    count: usize,
    config: &SamplerConfig,
) -> Result<SampleBatch> {
    check(schedule, config)?;
    let betas = schedule.betas();
    let alphas = schedule.alphas();
    let mut traj = Trajectory::start(count, score_net.dim(), config.seed, NOISE_LABEL);
    for n in (0..betas.len()).rev() {
        let (beta, alpha) = (betas[n], alphas[n]);
        let eps = traj.predict(score_net, alpha)?;
        let scale = 1.0 / (1.0 - beta).sqrt();
        let e_coef = -scale * beta / (1.0 - alpha * alpha).sqrt();
        let sd = if n == 0 {
            0.0
        } else {
            config.variance_mode.variance(beta, alpha).sqrt()
        };
        traj.update(&eps, scale, e_coef, sd);
    }
    traj.finish(schedule, config.seed)
}

pub fn sample_ddim(
    score_net: &dyn EpsPredictor,
    schedule: &PredictedSchedule,
    count: usize,
    config: &SamplerConfig,
) -> Result<SampleBatch> {
    sample_ddim_with(score_net, schedule, count, config, NOISE_LABEL)
}

/// DDIM transition `x_{n-1} = (α_{n-1}/α_n)(x - ς ε) + σ_n z` with
/// `σ_n = η √((1-α²_{n-1})/(1-α²_n)) √β̂_n` and
/// `ς = √(1-α²_n) - (α_n/α_{n-1}) √(1-α²_{n-1}-σ²_n)`, `α_0 = 1`.
fn sample_ddim_with(
    score_net: &dyn EpsPredictor,
    schedule: &PredictedSchedule,
    count: usize,
    config: &SamplerConfig,
    noise_label: &str,
) -> Result<SampleBatch> {
    check(schedule, config)?;
    let betas = schedule.betas();
    let alphas = schedule.alphas();
    let mut traj = Trajectory::start(count, score_net.dim(), config.seed, noise_label);
    for n in (0..betas.len()).rev() {
        let a = alphas[n];
        let a_prev = if n == 0 { 1.0 } else { alphas[n - 1] };
        let (d, d_prev) = (1.0 - a * a, 1.0 - a_prev * a_prev);
        let sigma = if n == 0 {
            0.0
        } else {
            config.ddim_eta * (d_prev / d).sqrt() * betas[n].sqrt()
        };
        let radicand = d_prev - sigma * sigma;
        if radicand < 0.0 {
            return Err(domain!(
                "ddim_eta = {} makes the step-{} noise exceed its budget",
                config.ddim_eta,
                n + 1
            ));
        }
        let varsigma = d.sqrt() - (a / a_prev) * radicand.sqrt();
        let eps = traj.predict(score_net, a)?;
        let ratio = a_prev / a;
        traj.update(&eps, ratio, -ratio * varsigma, sigma);
    }
    traj.finish(schedule, config.seed)
}

pub fn sample(
    score_net: &dyn EpsPredictor,
    schedule: &PredictedSchedule,
    count: usize,
    config: &SamplerConfig,
) -> Result<SampleBatch> {
    match config.process {
        Process::Ddpm => sample_ddpm(score_net, schedule, count, config),
        Process::Ddim => sample_ddim(score_net, schedule, count, config),
    }
}
