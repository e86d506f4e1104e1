//! Seedable training loops for the score network and the schedule network.
//!
//! Every batch element `i` of step `s` draws its data, time index and noise
//! from its own stream `(seed, label, s·B + i)`, so a run is a pure function
//! of its configuration.

use std::time::{Duration, Instant};

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::diffusion::{
    linear_schedule, DiffusionSpec, EpsPredictor, LogTermVariant, NoiseSchedule,
};
use crate::error::{contract, domain, shape, Result};
use crate::networks::{embed_noise_scale, ScheduleNet, ScoreNet};
use crate::nn::{
    adam_step, clip_global_norm, Activation, AdamConfig, AdamState, MlpModel, Tape, Tensor,
};
use crate::rng;

/// Source of i.i.d. training data.
pub trait DataSampler: Sync {
    fn dim(&self) -> usize;

    /// Writes one draw into `out` (length `dim()`).
    fn draw(&self, rng: &mut dyn RngCore, out: &mut [f64]);
}

fn default_grad_clip() -> f64 {
    10.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub spec: DiffusionSpec,
    #[serde(default)]
    pub loss_variant: LogTermVariant,
    /// Hidden widths; the network default when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hidden: Option<Vec<usize>>,
    /// Checkpoint hook period in steps; 0 disables intermediate checkpoints.
    #[serde(default)]
    pub checkpoint_every: usize,
    #[serde(default = "default_grad_clip")]
    pub grad_clip: f64,
}

impl TrainConfig {
    pub fn new(spec: DiffusionSpec, steps: usize, batch_size: usize, lr: f64, seed: u64) -> Self {
        Self {
            steps,
            batch_size,
            lr,
            seed,
            spec,
            loss_variant: LogTermVariant::default(),
            hidden: None,
            checkpoint_every: 0,
            grad_clip: default_grad_clip(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(contract!("steps must be positive"));
        }
        if self.batch_size == 0 {
            return Err(contract!("batch_size must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(contract!("lr must be positive and finite, got {}", self.lr));
        }
        if !(self.grad_clip > 0.0) {
            return Err(contract!(
                "grad_clip must be positive, got {}",
                self.grad_clip
            ));
        }
        self.spec.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub loss_curve: Vec<f64>,
    pub skipped: u64,
    pub seed: u64,
    /// Path of the final checkpoint, filled in by whoever persists it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<String>,
    /// Excluded from artifacts so reruns stay byte-identical.
    #[serde(skip)]
    pub wall_time: Duration,
}

impl TrainReport {
    /// Fraction of batch elements skipped over the whole run.
    pub fn skip_rate(&self, batch_size: usize) -> f64 {
        self.skipped as f64 / (self.loss_curve.len() * batch_size) as f64
    }

    pub fn trailing_mean(&self, window: usize) -> f64 {
        let w = window.min(self.loss_curve.len()).max(1);
        let tail = &self.loss_curve[self.loss_curve.len() - w..];
        tail.iter().sum::<f64>() / tail.len() as f64
    }
}

/// Called with `(completed_steps, model)` every `checkpoint_every` steps.
pub type CheckpointHook<'a> = dyn FnMut(usize, &MlpModel) -> Result<()> + 'a;

struct Optimizer {
    state: AdamState,
    config: AdamConfig,
    clip: f64,
}

impl Optimizer {
    fn new(mlp: &MlpModel, cfg: &TrainConfig) -> Self {
        Self {
            state: AdamState::new(mlp.params()),
            config: AdamConfig::with_lr(cfg.lr),
            clip: cfg.grad_clip,
        }
    }

    fn apply(&mut self, mlp: &mut MlpModel, mut grads: Vec<Tensor>) -> Result<()> {
        clip_global_norm(&mut grads, self.clip);
        adam_step(&mut mlp.params_mut(), &grads, &mut self.state, &self.config)
    }
}

fn check_sampler(sampler: &dyn DataSampler, spec: &DiffusionSpec) -> Result<()> {
    if sampler.dim() != spec.dim {
        return Err(shape!(
            "data sampler has dim {}, spec expects {}",
            sampler.dim(),
            spec.dim
        ));
    }
    Ok(())
}

fn finite_loss(step: usize, loss: f64) -> Result<f64> {
    if !loss.is_finite() {
        return Err(domain!("non-finite loss {loss} at step {step}"));
    }
    Ok(loss)
}

fn maybe_checkpoint(
    cfg: &TrainConfig,
    step: usize,
    mlp: &MlpModel,
    hook: &mut CheckpointHook,
) -> Result<()> {
    if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 {
        hook(step + 1, mlp)?;
    }
    Ok(())
}

/// One noisy training element: `x_t = α x0 + √(1-α²) ε`.
struct Element {
    x_t: Vec<f64>,
    eps: Vec<f64>,
    t: usize,
}

fn draw_element(
    sampler: &dyn DataSampler,
    schedule: &NoiseSchedule,
    rng: &mut rng::StreamRng,
    t_range: std::ops::RangeInclusive<usize>,
) -> Element {
    let d = sampler.dim();
    let mut x0 = vec![0.0; d];
    sampler.draw(rng, &mut x0);
    let t = rng.random_range(t_range);
    let mut eps = vec![0.0; d];
    rng::fill_normal(rng, &mut eps);
    let a = schedule.alpha(t);
    let s = (1.0 - a * a).sqrt();
    let x_t = x0.iter().zip(&eps).map(|(x, e)| a * x + s * e).collect();
    Element { x_t, eps, t }
}

fn score_net_for(cfg: &TrainConfig) -> Result<ScoreNet> {
    match &cfg.hidden {
        Some(h) => ScoreNet::new(cfg.spec.dim, h, Activation::Tanh, cfg.seed),
        None => ScoreNet::with_default_widths(cfg.spec.dim, cfg.seed),
    }
}

fn schedule_net_for(cfg: &TrainConfig) -> Result<ScheduleNet> {
    match &cfg.hidden {
        Some(h) => ScheduleNet::new(cfg.spec.dim, h, Activation::Tanh, cfg.seed),
        None => ScheduleNet::with_default_widths(cfg.spec.dim, cfg.seed),
    }
}

pub fn train_score(
    sampler: &dyn DataSampler,
    config: &TrainConfig,
) -> Result<(ScoreNet, TrainReport)> {
    train_score_with(sampler, config, &mut |_, _| Ok(()))
}

/// Minimizes `‖ε - ε_θ(x_t, α_t)‖²` with `t ~ U{1..T}`, averaged over the batch.
pub fn train_score_with(
    sampler: &dyn DataSampler,
    config: &TrainConfig,
    hook: &mut CheckpointHook,
) -> Result<(ScoreNet, TrainReport)> {
    config.validate()?;
    check_sampler(sampler, &config.spec)?;
    let started = Instant::now();
    let schedule = linear_schedule(&config.spec)?;
    let mut net = score_net_for(config)?;
    let mut opt = Optimizer::new(net.mlp(), config);
    let (b, d) = (config.batch_size, config.spec.dim);
    let mut loss_curve = Vec::with_capacity(config.steps);

    for step in 0..config.steps {
        let mut x = Vec::with_capacity(b * d);
        let mut target = Vec::with_capacity(b * d);
        let mut alphas = Vec::with_capacity(b);
        for i in 0..b {
            let mut r = rng::stream(config.seed, "score-batch", (step * b + i) as u64);
            let el = draw_element(sampler, &schedule, &mut r, 1..=config.spec.steps);
            x.extend_from_slice(&el.x_t);
            target.extend_from_slice(&el.eps);
            alphas.push(schedule.alpha(el.t));
        }
        let input = embed_noise_scale(&Tensor::matrix(b, d, x)?, &alphas)?;

        let mut tape = Tape::new();
        let vars = net.mlp().register(&mut tape);
        let input = tape.leaf(input);
        let target = tape.leaf(Tensor::matrix(b, d, target)?);
        let pred = net.predict_on_tape(&mut tape, &vars, input)?;
        let diff = tape.sub(pred, target)?;
        let sq = tape.square(diff);
        let total = tape.sum(sq);
        let loss = tape.scale(total, 1.0 / b as f64);
        loss_curve.push(finite_loss(step, tape.value(loss).item())?);

        let grads = tape.backward(loss)?;
        let params = net.mlp().params();
        let g = vars
            .ordered()
            .into_iter()
            .zip(params)
            .map(|(v, p)| grads.get_or_zeros(v, p))
            .collect();
        opt.apply(net.mlp_mut(), g)?;
        maybe_checkpoint(config, step, net.mlp(), hook)?;
    }

    let report = TrainReport {
        loss_curve,
        skipped: 0,
        seed: config.seed,
        checkpoint: None,
        wall_time: started.elapsed(),
    };
    Ok((net, report))
}

pub fn train_schedule(
    score_net: &dyn EpsPredictor,
    sampler: &dyn DataSampler,
    config: &TrainConfig,
) -> Result<(ScheduleNet, TrainReport)> {
    train_schedule_with(score_net, sampler, config, &mut |_, _| Ok(()))
}

/// Per-element constants of the step loss once `ε_θ` is frozen.
struct StepRow {
    /// `bound / δ_t`, so that `β̂_n / δ_t = ratio · scale`.
    scale: f64,
    eps_sq: f64,
    cross: f64,
    pred_sq: f64,
}

/// Fits `σ_φ` by minimizing the step loss at junction `t ~ U{τ..T-τ}` with
/// `β̂_{n+1} = 1 - α²_{t+τ}/α²_t`. The score network is only read.
///
/// With `s = β̂_n/δ_t` the per-element loss is
/// `(‖ε‖² - 2s⟨ε,ε_θ⟩ + s²‖ε_θ‖²) / (2(1-s)) - k·ln s + (D/2)(s - 1)`.
/// Elements with `s ≥ 1` are skipped and counted.
pub fn train_schedule_with(
    score_net: &dyn EpsPredictor,
    sampler: &dyn DataSampler,
    config: &TrainConfig,
    hook: &mut CheckpointHook,
) -> Result<(ScheduleNet, TrainReport)> {
    config.validate()?;
    check_sampler(sampler, &config.spec)?;
    if score_net.dim() != config.spec.dim {
        return Err(shape!(
            "score network has dim {}, spec expects {}",
            score_net.dim(),
            config.spec.dim
        ));
    }
    let spec = config.spec;
    if 2 * spec.tau > spec.steps {
        return Err(domain!(
            "junction range [tau, T - tau] is empty for tau={} T={}",
            spec.tau,
            spec.steps
        ));
    }
    let started = Instant::now();
    let schedule = linear_schedule(&spec)?;
    let mut net = schedule_net_for(config)?;
    let mut opt = Optimizer::new(net.mlp(), config);
    let (b, d) = (config.batch_size, spec.dim);
    let k = config.loss_variant.coefficient(d);
    let half_d = d as f64 / 2.0;
    let mut loss_curve = Vec::with_capacity(config.steps);
    let mut skipped = 0u64;

    for step in 0..config.steps {
        let mut x = Vec::with_capacity(b * d);
        let mut eps_all = Vec::with_capacity(b * d);
        let mut alphas = Vec::with_capacity(b);
        let mut rows = Vec::with_capacity(b);
        for i in 0..b {
            let mut r = rng::stream(config.seed, "schedule-batch", (step * b + i) as u64);
            let el = draw_element(sampler, &schedule, &mut r, spec.tau..=spec.steps - spec.tau);
            assert!(
                el.t >= spec.tau && el.t <= spec.steps - spec.tau,
                "junction t={} escaped its range",
                el.t
            );
            let a_t = schedule.alpha(el.t);
            let a_next = schedule.alpha(el.t + spec.tau);
            let beta_next = 1.0 - (a_next * a_next) / (a_t * a_t);
            let delta = 1.0 - a_t * a_t;
            let bound = (1.0 - a_next * a_next / (1.0 - beta_next)).min(beta_next);
            rows.push(StepRow {
                scale: bound / delta,
                eps_sq: 0.0,
                cross: 0.0,
                pred_sq: 0.0,
            });
            x.extend_from_slice(&el.x_t);
            eps_all.extend_from_slice(&el.eps);
            alphas.push(a_t);
        }
        let x = Tensor::matrix(b, d, x)?;
        let pred = score_net.predict_batch(&x, &alphas)?;
        for ((row, e), p) in rows.iter_mut().zip(eps_all.chunks(d)).zip(pred.row_iter()) {
            row.eps_sq = e.iter().map(|v| v * v).sum();
            row.cross = e.iter().zip(p).map(|(a, b)| a * b).sum();
            row.pred_sq = p.iter().map(|v| v * v).sum();
        }

        let mut tape = Tape::new();
        let vars = net.mlp().register(&mut tape);
        let input = tape.leaf(x);
        let ratio = net.ratio_on_tape(&mut tape, &vars, input)?;
        let keep: Vec<usize> = tape
            .value(ratio)
            .data()
            .iter()
            .zip(&rows)
            .enumerate()
            .filter(|(_, (&r, row))| r * row.scale < 1.0)
            .map(|(i, _)| i)
            .collect();
        skipped += (b - keep.len()) as u64;
        if keep.is_empty() {
            return Err(domain!(
                "every batch element at step {step} violated beta_hat_n < delta_t"
            ));
        }
        let n = keep.len();
        let column = |f: &dyn Fn(&StepRow) -> f64| -> Result<Tensor> {
            Tensor::matrix(n, 1, keep.iter().map(|&i| f(&rows[i])).collect())
        };
        let scale = tape.leaf(column(&|r| r.scale)?);
        let a = tape.leaf(column(&|r| r.eps_sq)?);
        let minus_2b = tape.leaf(column(&|r| -2.0 * r.cross)?);
        let c = tape.leaf(column(&|r| r.pred_sq)?);

        let kept = tape.gather_rows(ratio, keep)?;
        let s = tape.mul(kept, scale)?;
        let s2 = tape.square(s);
        let lin = tape.mul(s, minus_2b)?;
        let quad = tape.mul(s2, c)?;
        let num = tape.add(a, lin)?;
        let num = tape.add(num, quad)?;
        let den = tape.scale(s, -2.0);
        let den = tape.offset(den, 2.0);
        let norm_term = tape.div(num, den)?;
        let ln_s = tape.ln(s);
        let log_term = tape.scale(ln_s, -k);
        let trace = tape.scale(s, half_d);
        let trace = tape.offset(trace, -half_d);
        let per_row = tape.add(norm_term, log_term)?;
        let per_row = tape.add(per_row, trace)?;
        let loss = tape.mean(per_row);
        loss_curve.push(finite_loss(step, tape.value(loss).item())?);

        let grads = tape.backward(loss)?;
        let params = net.mlp().params();
        let g = vars
            .ordered()
            .into_iter()
            .zip(params)
            .map(|(v, p)| grads.get_or_zeros(v, p))
            .collect();
        opt.apply(net.mlp_mut(), g)?;
        maybe_checkpoint(config, step, net.mlp(), hook)?;
    }

    let report = TrainReport {
        loss_curve,
        skipped,
        seed: config.seed,
        checkpoint: None,
        wall_time: started.elapsed(),
    };
    Ok((net, report))
}
