//! Backward noise-schedule prediction and the two schedule searches.
//!
//! A short schedule is predicted from a seed pair `(α̂_N, β̂_N)` by walking
//! backward: each step runs one reverse-process update on a noisy trajectory
//! and asks the ratio model how much smaller the next noise scale should be.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffusion::{cumulative_alpha, ddpm_reverse, EpsPredictor, VarianceMode};
use crate::error::{contract, domain, Error, Result};
use crate::networks::{f_phi, RatioModel};
use crate::rng;

/// Seed pair and stopping rules for backward prediction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSeed {
    #[serde(rename = "alpha_hat_N")]
    pub alpha_hat: f64,
    #[serde(rename = "beta_hat_N")]
    pub beta_hat: f64,
    #[serde(rename = "N_max")]
    pub max_steps: usize,
    pub beta_floor: f64,
}

impl ScheduleSeed {
    pub fn new(alpha_hat: f64, beta_hat: f64, max_steps: usize, beta_floor: f64) -> Result<Self> {
        let seed = Self {
            alpha_hat,
            beta_hat,
            max_steps,
            beta_floor,
        };
        seed.validate()?;
        Ok(seed)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha_hat > 0.0 && self.alpha_hat < 1.0) {
            return Err(domain!(
                "alpha_hat_N = {} is outside (0, 1)",
                self.alpha_hat
            ));
        }
        if !(self.beta_hat > 0.0 && self.beta_hat < 1.0) {
            return Err(domain!("beta_hat_N = {} is outside (0, 1)", self.beta_hat));
        }
        if self.alpha_hat * self.alpha_hat >= 1.0 - self.beta_hat {
            return Err(domain!(
                "seed needs alpha_hat_N^2 < 1 - beta_hat_N, got {} and {}",
                self.alpha_hat * self.alpha_hat,
                1.0 - self.beta_hat
            ));
        }
        if self.max_steps == 0 {
            return Err(contract!("N_max must be positive"));
        }
        if !(self.beta_floor >= 0.0 && self.beta_floor < 1.0) {
            return Err(domain!(
                "beta_floor = {} is outside [0, 1)",
                self.beta_floor
            ));
        }
        Ok(())
    }
}

/// Sampling schedule `β̂_1 < … < β̂_{N_s}` in ascending order.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PredictedSchedule {
    betas_hat: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<ScheduleSeed>,
    beta_floor: f64,
}

#[derive(Deserialize)]
struct ScheduleRecord {
    betas_hat: Vec<f64>,
    #[serde(default)]
    seed: Option<ScheduleSeed>,
    beta_floor: f64,
}

impl<'de> Deserialize<'de> for PredictedSchedule {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> std::result::Result<Self, D::Error> {
        let r = ScheduleRecord::deserialize(de)?;
        Self::new(r.betas_hat, r.seed, r.beta_floor).map_err(serde::de::Error::custom)
    }
}

impl PredictedSchedule {
    /// Validates monotonicity, the floor, and (with a seed) the upper bound of
    /// every entry against its successor along the backward noise scales.
    pub fn new(betas_hat: Vec<f64>, seed: Option<ScheduleSeed>, beta_floor: f64) -> Result<Self> {
        if betas_hat.is_empty() {
            return Err(Error::EmptySchedule("schedule has no steps".into()));
        }
        for (n, &b) in betas_hat.iter().enumerate() {
            if !(b > 0.0 && b < 1.0) {
                return Err(domain!("beta_hat_{} = {b} is outside (0, 1)", n + 1));
            }
            if b < beta_floor {
                return Err(domain!(
                    "beta_hat_{} = {b} is below the floor {beta_floor}",
                    n + 1
                ));
            }
        }
        if let Some(w) = betas_hat.windows(2).position(|w| w[0] >= w[1]) {
            return Err(domain!(
                "schedule is not strictly increasing at n={}: {} >= {}",
                w + 1,
                betas_hat[w],
                betas_hat[w + 1]
            ));
        }
        if let Some(seed) = seed {
            seed.validate()?;
            let top = *betas_hat.last().expect("non-empty");
            if top != seed.beta_hat {
                return Err(contract!(
                    "last entry {top} differs from the seed beta_hat_N {}",
                    seed.beta_hat
                ));
            }
            let alphas = backward_alphas(&betas_hat, seed.alpha_hat);
            for n in 0..betas_hat.len() - 1 {
                let bound = crate::diffusion::beta_upper_bound(alphas[n + 1], betas_hat[n + 1])?;
                if betas_hat[n] >= bound {
                    return Err(domain!(
                        "beta_hat_{} = {} violates its upper bound {bound}",
                        n + 1,
                        betas_hat[n]
                    ));
                }
            }
        }
        Ok(Self {
            betas_hat,
            seed,
            beta_floor,
        })
    }

    /// Hand-specified schedule (dense references, exhaustive-search winners).
    pub fn from_betas(betas_hat: Vec<f64>) -> Result<Self> {
        Self::new(betas_hat, None, 0.0)
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas_hat
    }

    pub fn len(&self) -> usize {
        self.betas_hat.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas_hat.is_empty()
    }

    pub fn seed(&self) -> Option<&ScheduleSeed> {
        self.seed.as_ref()
    }

    pub fn beta_floor(&self) -> f64 {
        self.beta_floor
    }

    /// `α̂_n = Π_{i≤n} √(1-β̂_i)`, the scales used during sampling.
    pub fn alphas(&self) -> Vec<f64> {
        cumulative_alpha(&self.betas_hat).expect("validated on construction")
    }
}

/// `α̂_n` recovered from `α̂_{N_s}` by `α̂_n = α̂_{n+1} / √(1-β̂_{n+1})`.
fn backward_alphas(betas: &[f64], alpha_top: f64) -> Vec<f64> {
    let mut alphas = vec![0.0; betas.len()];
    let last = betas.len() - 1;
    alphas[last] = alpha_top;
    for n in (0..last).rev() {
        alphas[n] = alphas[n + 1] / (1.0 - betas[n + 1]).sqrt();
    }
    alphas
}

/// Predicts a schedule backward from `seed`, running a beta-tilde reverse step
/// on a single trajectory `x̂_N ~ N(0, I)` to feed the ratio model.
pub fn predict_schedule(
    schedule_net: &dyn RatioModel,
    score_net: &dyn EpsPredictor,
    seed: ScheduleSeed,
    rng_seed: u64,
) -> Result<PredictedSchedule> {
    seed.validate()?;
    if schedule_net.dim() != score_net.dim() {
        return Err(contract!(
            "schedule net dim {} vs score net dim {}",
            schedule_net.dim(),
            score_net.dim()
        ));
    }
    if seed.beta_hat < seed.beta_floor {
        return Err(Error::EmptySchedule(format!(
            "beta_hat_N = {} is already below the floor {}",
            seed.beta_hat, seed.beta_floor
        )));
    }
    let mut r = rng::stream(rng_seed, "predict-schedule", 0);
    let mut x = vec![0.0; score_net.dim()];
    rng::fill_normal(&mut r, &mut x);

    let mut betas = vec![seed.beta_hat];
    let (mut alpha_next, mut beta_next) = (seed.alpha_hat, seed.beta_hat);
    while betas.len() < seed.max_steps {
        let eps = score_net.predict(&x, alpha_next)?;
        let step = ddpm_reverse(&x, &eps, beta_next, alpha_next, VarianceMode::BetaTilde)?;
        let sd = step.variance.sqrt();
        x = step
            .mean
            .iter()
            .map(|m| m + sd * rng::normal(&mut r))
            .collect();

        let beta = f_phi(schedule_net, &x, alpha_next, beta_next)?;
        let alpha = alpha_next / (1.0 - beta_next).sqrt();
        if beta < seed.beta_floor {
            break;
        }
        log::debug!("predicted beta_hat = {beta:e} at alpha_hat = {alpha:.6}");
        betas.push(beta);
        alpha_next = alpha;
        beta_next = beta;
    }
    betas.reverse();
    PredictedSchedule::new(betas, Some(seed), seed.beta_floor)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricDirection {
    Minimize,
    Maximize,
}

/// Scores a candidate schedule; `seed` is the candidate's own stream seed.
pub trait ScheduleMetric: Sync {
    fn name(&self) -> &str;

    fn direction(&self) -> MetricDirection;

    fn evaluate(&self, schedule: &PredictedSchedule, seed: u64) -> Result<f64>;
}

/// [`ScheduleMetric`] backed by a closure.
pub struct FnMetric<F> {
    name: String,
    direction: MetricDirection,
    f: F,
}

impl<F> FnMetric<F>
where
    F: Fn(&PredictedSchedule, u64) -> Result<f64> + Sync,
{
    pub fn new(name: impl Into<String>, direction: MetricDirection, f: F) -> Self {
        Self {
            name: name.into(),
            direction,
            f,
        }
    }
}

impl<F> ScheduleMetric for FnMetric<F>
where
    F: Fn(&PredictedSchedule, u64) -> Result<f64> + Sync,
{
    fn name(&self) -> &str {
        &self.name
    }

    fn direction(&self) -> MetricDirection {
        self.direction
    }

    fn evaluate(&self, schedule: &PredictedSchedule, seed: u64) -> Result<f64> {
        (self.f)(schedule, seed)
    }
}

/// `(α̂_N, β̂_N) = (0.1·α_T·i, 0.1·j)` for `i, j = 1..=M`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeedGrid {
    pub m: usize,
    pub alpha_final: f64,
    pub max_steps: usize,
    pub beta_floor: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridPoint {
    pub i: usize,
    pub j: usize,
}

impl SeedGrid {
    pub fn validate(&self) -> Result<()> {
        if !(1..=9).contains(&self.m) {
            return Err(contract!("grid size M must be in 1..=9, got {}", self.m));
        }
        if !(self.alpha_final > 0.0 && self.alpha_final < 1.0) {
            return Err(domain!("alpha_T = {} is outside (0, 1)", self.alpha_final));
        }
        Ok(())
    }

    /// Row-major `(i, j)` order; this is also the tie-break order.
    pub fn points(&self) -> Vec<GridPoint> {
        (1..=self.m)
            .flat_map(|i| (1..=self.m).map(move |j| GridPoint { i, j }))
            .collect()
    }

    pub fn seed_at(&self, p: GridPoint) -> ScheduleSeed {
        ScheduleSeed {
            alpha_hat: 0.1 * self.alpha_final * p.i as f64,
            beta_hat: 0.1 * p.j as f64,
            max_steps: self.max_steps,
            beta_floor: self.beta_floor,
        }
    }

    fn stream_seed(&self, p: GridPoint) -> u64 {
        rng::derive_indexed(
            self.seed,
            "grid-candidate",
            ((p.i as u64) << 32) | p.j as u64,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateResult {
    pub i: usize,
    pub j: usize,
    #[serde(rename = "alpha_hat_N")]
    pub alpha_hat: f64,
    #[serde(rename = "beta_hat_N")]
    pub beta_hat: f64,
    pub betas_hat: Option<Vec<f64>>,
    pub metric: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSearchReport {
    pub metric_name: String,
    pub direction: MetricDirection,
    pub candidates: Vec<CandidateResult>,
    pub best: usize,
}

impl ScheduleSearchReport {
    pub fn winner(&self) -> &CandidateResult {
        &self.candidates[self.best]
    }

    /// Winning schedule, rebuilt and revalidated from the report.
    pub fn best_schedule(&self, grid: &SeedGrid) -> Result<PredictedSchedule> {
        let w = self.winner();
        let betas = w
            .betas_hat
            .clone()
            .ok_or_else(|| contract!("winner has no schedule"))?;
        PredictedSchedule::new(
            betas,
            Some(grid.seed_at(GridPoint { i: w.i, j: w.j })),
            grid.beta_floor,
        )
    }
}

fn evaluate_point(
    schedule_net: &dyn RatioModel,
    score_net: &dyn EpsPredictor,
    grid: &SeedGrid,
    metric: &dyn ScheduleMetric,
    p: GridPoint,
) -> CandidateResult {
    let seed = grid.seed_at(p);
    let stream = grid.stream_seed(p);
    let outcome = predict_schedule(schedule_net, score_net, seed, stream).and_then(|s| {
        let m = metric.evaluate(&s, stream)?;
        if !m.is_finite() {
            return Err(domain!("metric {} is not finite: {m}", metric.name()));
        }
        Ok((s, m))
    });
    let (betas_hat, metric, error) = match outcome {
        Ok((s, m)) => (Some(s.betas().to_vec()), Some(m), None),
        Err(e) => (None, None, Some(e.to_string())),
    };
    CandidateResult {
        i: p.i,
        j: p.j,
        alpha_hat: seed.alpha_hat,
        beta_hat: seed.beta_hat,
        betas_hat,
        metric,
        error,
    }
}

/// Lower is better after orienting by direction; ties go to the smaller key.
fn better(direction: MetricDirection, a: (f64, (usize, usize)), b: (f64, (usize, usize))) -> bool {
    let ord = match direction {
        MetricDirection::Minimize => a.0.total_cmp(&b.0),
        MetricDirection::Maximize => b.0.total_cmp(&a.0),
    };
    ord.then(a.1.cmp(&b.1)).is_lt()
}

/// Evaluates `points` (any order) in parallel. Each candidate draws from a
/// stream keyed by its grid position, so the winner is order independent.
pub fn search_points(
    schedule_net: &dyn RatioModel,
    score_net: &dyn EpsPredictor,
    grid: &SeedGrid,
    points: &[GridPoint],
    metric: &dyn ScheduleMetric,
) -> Result<ScheduleSearchReport> {
    grid.validate()?;
    let candidates: Vec<CandidateResult> = points
        .par_iter()
        .map(|&p| evaluate_point(schedule_net, score_net, grid, metric, p))
        .collect();
    let mut best: Option<usize> = None;
    for (k, c) in candidates.iter().enumerate() {
        let Some(m) = c.metric else { continue };
        let replace = match best {
            None => true,
            Some(b) => {
                let cur = &candidates[b];
                better(
                    metric.direction(),
                    (m, (c.i, c.j)),
                    (cur.metric.expect("scored"), (cur.i, cur.j)),
                )
            }
        };
        if replace {
            best = Some(k);
        }
    }
    let best = best.ok_or_else(|| {
        let first = candidates
            .iter()
            .find_map(|c| c.error.clone())
            .unwrap_or_default();
        Error::SearchFailed(format!(
            "all {} candidates failed; first error: {first}",
            candidates.len()
        ))
    })?;
    for c in &candidates {
        match (c.metric, &c.error) {
            (Some(m), _) => log::info!(
                "seed ({:.4}, {:.2}) -> {} = {m:e}",
                c.alpha_hat,
                c.beta_hat,
                metric.name()
            ),
            (None, Some(e)) => {
                log::info!("seed ({:.4}, {:.2}) failed: {e}", c.alpha_hat, c.beta_hat)
            }
            (None, None) => {}
        }
    }
    Ok(ScheduleSearchReport {
        metric_name: metric.name().to_string(),
        direction: metric.direction(),
        candidates,
        best,
    })
}

/// `M²` seed grid search in canonical order.
pub fn grid_search_seed(
    schedule_net: &dyn RatioModel,
    score_net: &dyn EpsPredictor,
    grid: &SeedGrid,
    metric: &dyn ScheduleMetric,
) -> Result<ScheduleSearchReport> {
    grid.validate()?;
    search_points(schedule_net, score_net, grid, &grid.points(), metric)
}

/// Largest step count the exhaustive baseline accepts.
pub const GS_MAX_STEPS: usize = 6;

pub fn gs_candidate_count(steps: usize) -> Result<u64> {
    if steps == 0 {
        return Err(contract!("exhaustive search needs at least one step"));
    }
    if steps > GS_MAX_STEPS {
        return Err(contract!(
            "exhaustive search over {steps} steps would score 9^{steps} = {} schedules; at most {GS_MAX_STEPS} steps are supported",
            9u64.pow(steps as u32)
        ));
    }
    Ok(9u64.pow(steps as u32))
}

/// Candidate `index` of the `steps`-step exhaustive grid: step `n` (ascending)
/// takes `m_n · 10^{-6(N-n+1)/N}` with mantissa `m_n ∈ 1..=9`; step 1 is the
/// most significant digit of `index` in base 9.
pub fn gs_candidate(steps: usize, index: u64) -> Result<Vec<f64>> {
    let count = gs_candidate_count(steps)?;
    if index >= count {
        return Err(contract!(
            "candidate index {index} out of range for {count} schedules"
        ));
    }
    let mut digits = vec![0u64; steps];
    let mut rest = index;
    for d in digits.iter_mut().rev() {
        *d = rest % 9;
        rest /= 9;
    }
    Ok(digits
        .iter()
        .enumerate()
        .map(|(n, &d)| {
            let exponent = -6.0 * (steps - n) as f64 / steps as f64;
            (d + 1) as f64 * 10f64.powf(exponent)
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GsBaselineReport {
    pub steps: usize,
    pub candidate_count: u64,
    pub metric_name: String,
    pub direction: MetricDirection,
    pub best_index: u64,
    pub best_metric: f64,
    pub betas_hat: Vec<f64>,
    pub failed: u64,
}

/// Exhaustive `9^N` search; candidates are scored in parallel and reduced by
/// (metric, index), which is order independent.
pub fn gs_baseline(
    steps: usize,
    metric: &dyn ScheduleMetric,
    seed: u64,
) -> Result<GsBaselineReport> {
    let count = gs_candidate_count(steps)?;
    log::info!("exhaustive search over {count} candidate schedules");
    let direction = metric.direction();
    let scored: Vec<Option<f64>> = (0..count)
        .into_par_iter()
        .map(|k| {
            let betas = gs_candidate(steps, k).ok()?;
            let schedule = PredictedSchedule::from_betas(betas).ok()?;
            let m = metric
                .evaluate(&schedule, rng::derive_indexed(seed, "gs-candidate", k))
                .ok()?;
            m.is_finite().then_some(m)
        })
        .collect();
    let failed = scored.iter().filter(|m| m.is_none()).count() as u64;
    let mut best: Option<(f64, u64)> = None;
    for (k, m) in scored.iter().enumerate() {
        let Some(m) = *m else { continue };
        let k = k as u64;
        if best
            .is_none_or(|(bm, bk)| better(direction, (m, (k as usize, 0)), (bm, (bk as usize, 0))))
        {
            best = Some((m, k));
        }
    }
    let (best_metric, best_index) = best
        .ok_or_else(|| Error::SearchFailed(format!("all {count} exhaustive candidates failed")))?;
    Ok(GsBaselineReport {
        steps,
        candidate_count: count,
        metric_name: metric.name().to_string(),
        direction,
        best_index,
        best_metric,
        betas_hat: gs_candidate(steps, best_index)?,
        failed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::FnPredictor;
    use crate::networks::ConstantRatio;
    use proptest::prelude::*;

    fn zero_score() -> FnPredictor<impl Fn(&[f64], f64) -> Vec<f64> + Sync> {
        FnPredictor::new(2, |x: &[f64], _| vec![0.0; x.len()])
    }

    fn recurrence(seed: ScheduleSeed, r: f64) -> Vec<f64> {
        let mut out = vec![seed.beta_hat];
        let (mut a, mut b) = (seed.alpha_hat, seed.beta_hat);
        while out.len() < seed.max_steps {
            let bound = (1.0 - a * a / (1.0 - b)).min(b);
            let next_b = bound * r;
            let next_a = a / (1.0 - b).sqrt();
            if next_b < seed.beta_floor {
                break;
            }
            out.push(next_b);
            a = next_a;
            b = next_b;
        }
        out.reverse();
        out
    }

    #[test]
    fn constant_ratio_matches_scalar_recurrence() {
        for r in [0.3, 0.5, 0.9] {
            let seed = ScheduleSeed::new(0.3, 0.5, 12, 1e-4).unwrap();
            let s = predict_schedule(&ConstantRatio { dim: 2, ratio: r }, &zero_score(), seed, 1)
                .unwrap();
            let oracle = recurrence(seed, r);
            assert_eq!(s.betas().len(), oracle.len());
            for (a, b) in s.betas().iter().zip(&oracle) {
                assert!((a - b).abs() <= 1e-15 * b);
            }
            for w in s.betas().windows(2) {
                assert!(w[0] <= r * w[1] * (1.0 + 1e-12));
            }
        }
    }

    #[test]
    fn floor_above_seed_is_an_empty_schedule() {
        let seed = ScheduleSeed::new(0.3, 0.01, 5, 0.02).unwrap();
        let err = predict_schedule(
            &ConstantRatio { dim: 2, ratio: 0.5 },
            &zero_score(),
            seed,
            0,
        )
        .unwrap_err();
        assert!(matches!(err, Error::EmptySchedule(_)));
    }

    #[test]
    fn seed_values_are_valid() {
        for (a, b) in [(0.68, 0.53), (0.62, 0.42), (0.67, 0.12)] {
            let seed = ScheduleSeed::new(a, b, 20, 1e-4).unwrap();
            let s = predict_schedule(
                &ConstantRatio { dim: 2, ratio: 0.4 },
                &zero_score(),
                seed,
                3,
            )
            .unwrap();
            assert!(!s.is_empty());
        }
        assert!(ScheduleSeed::new(0.9, 0.5, 5, 0.0).is_err());
    }

    #[test]
    fn schedule_constructor_rejects_bad_sequences() {
        assert!(matches!(
            PredictedSchedule::from_betas(vec![]),
            Err(Error::EmptySchedule(_))
        ));
        assert!(PredictedSchedule::from_betas(vec![0.2, 0.1]).is_err());
        assert!(PredictedSchedule::from_betas(vec![0.1, 0.1]).is_err());
        assert!(PredictedSchedule::new(vec![0.01, 0.1], None, 0.05).is_err());
        let s = PredictedSchedule::from_betas(vec![0.1, 0.2]).unwrap();
        let text = crate::json::to_string(&s).unwrap();
        let back: PredictedSchedule = serde_json::from_str(&text).unwrap();
        assert_eq!(back, s);
        assert!(serde_json::from_str::<PredictedSchedule>(
            r#"{"betas_hat":[0.3,0.2],"beta_floor":0}"#
        )
        .is_err());
    }

    fn grid(m: usize) -> SeedGrid {
        SeedGrid {
            m,
            alpha_final: 0.078,
            max_steps: 10,
            beta_floor: 1e-4,
            seed: 5,
        }
    }

    fn sum_metric() -> FnMetric<impl Fn(&PredictedSchedule, u64) -> Result<f64> + Sync> {
        // Smaller total noise plus a per-candidate jitter drawn from its own stream.
        FnMetric::new(
            "sum",
            MetricDirection::Minimize,
            |s: &PredictedSchedule, seed| {
                Ok(s.betas().iter().sum::<f64>() + 1e-3 * (seed % 1000) as f64)
            },
        )
    }

    #[test]
    fn grid_sizes() {
        let net = ConstantRatio { dim: 2, ratio: 0.5 };
        let r = grid_search_seed(&net, &zero_score(), &grid(9), &sum_metric()).unwrap();
        assert_eq!(r.candidates.len(), 81);
        let r1 = grid_search_seed(&net, &zero_score(), &grid(1), &sum_metric()).unwrap();
        assert_eq!(r1.candidates.len(), 1);
        assert!((r1.candidates[0].alpha_hat - 0.1 * 0.078).abs() < 1e-15);
        assert!((r1.candidates[0].beta_hat - 0.1).abs() < 1e-15);
        assert!(grid_search_seed(&net, &zero_score(), &grid(0), &sum_metric()).is_err());
        assert!(grid_search_seed(&net, &zero_score(), &grid(10), &sum_metric()).is_err());
    }

    #[test]
    fn winner_is_extremum_and_order_free() {
        let net = ConstantRatio { dim: 2, ratio: 0.5 };
        let g = grid(6);
        let r = grid_search_seed(&net, &zero_score(), &g, &sum_metric()).unwrap();
        let min = r
            .candidates
            .iter()
            .filter_map(|c| c.metric)
            .fold(f64::INFINITY, f64::min);
        assert_eq!(r.winner().metric, Some(min));

        let mut pts = g.points();
        pts.reverse();
        pts.rotate_left(7);
        let shuffled = search_points(&net, &zero_score(), &g, &pts, &sum_metric()).unwrap();
        assert_eq!(
            (shuffled.winner().i, shuffled.winner().j),
            (r.winner().i, r.winner().j)
        );
        assert_eq!(shuffled.winner().metric, r.winner().metric);

        let max = FnMetric::new(
            "sum",
            MetricDirection::Maximize,
            |s: &PredictedSchedule, _| Ok(s.betas().iter().sum::<f64>()),
        );
        let r = grid_search_seed(&net, &zero_score(), &g, &max).unwrap();
        let top = r
            .candidates
            .iter()
            .filter_map(|c| c.metric)
            .fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(r.winner().metric, Some(top));
        assert!(r.best_schedule(&g).is_ok());
    }

    #[test]
    fn all_failures_is_a_search_failure() {
        let net = ConstantRatio { dim: 2, ratio: 0.5 };
        let bad = FnMetric::new(
            "bad",
            MetricDirection::Minimize,
            |_: &PredictedSchedule, _| Err(domain!("nope")),
        );
        let err = grid_search_seed(&net, &zero_score(), &grid(2), &bad).unwrap_err();
        assert!(matches!(err, Error::SearchFailed(_)));
    }

    #[test]
    fn gs_enumeration() {
        let one: Vec<Vec<f64>> = (0..9).map(|k| gs_candidate(1, k).unwrap()).collect();
        for (k, c) in one.iter().enumerate() {
            assert!((c[0] - (k + 1) as f64 * 1e-6).abs() < 1e-21);
        }
        let first = gs_candidate(2, 0).unwrap();
        let last = gs_candidate(2, 80).unwrap();
        assert!((first[0] - 1e-6).abs() < 1e-21 && (first[1] - 1e-3).abs() < 1e-18);
        assert!((last[0] - 9e-6).abs() < 1e-20 && (last[1] - 9e-3).abs() < 1e-17);
        assert!(gs_candidate(2, 81).is_err());
        assert!(gs_candidate_count(7)
            .unwrap_err()
            .to_string()
            .contains("9^7"));
        assert!(gs_candidate_count(0).is_err());
    }

    #[test]
    fn gs_counts_by_enumeration() {
        for n in 1..=3 {
            let mut seen = std::collections::BTreeSet::new();
            let mut k = 0u64;
            while let Ok(c) = gs_candidate(n, k) {
                assert!(PredictedSchedule::from_betas(c.clone()).is_ok());
                seen.insert(c.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
                k += 1;
            }
            assert_eq!(seen.len() as u64, 9u64.pow(n as u32));
            assert_eq!(gs_candidate_count(n).unwrap(), seen.len() as u64);
        }
    }

    #[test]
    fn gs_baseline_picks_best() {
        let metric = FnMetric::new(
            "dist",
            MetricDirection::Minimize,
            |s: &PredictedSchedule, _| Ok((s.betas()[0] - 3e-6).abs() + (s.betas()[1] - 7e-3).abs()),
        );
        let r = gs_baseline(2, &metric, 0).unwrap();
        assert_eq!(r.candidate_count, 81);
        assert!((r.betas_hat[0] - 3e-6).abs() < 1e-20);
        assert!((r.betas_hat[1] - 7e-3).abs() < 1e-17);
        assert!(gs_baseline(7, &metric, 0).is_err());
    }

    proptest! {
        #[test]
        fn predicted_schedules_are_increasing_and_floored(
            a in 0.01f64..0.95,
            b in 0.01f64..0.99,
            r in 0.05f64..0.999,
            floor in 1e-6f64..1e-2,
            seed in any::<u64>(),
        ) {
            prop_assume!(a * a < 1.0 - b);
            let s = ScheduleSeed::new(a, b, 15, floor).unwrap();
            let p = predict_schedule(&ConstantRatio { dim: 2, ratio: r }, &zero_score(), s, seed).unwrap();
            prop_assert!(p.betas().windows(2).all(|w| w[0] < w[1]));
            prop_assert!(p.betas().iter().all(|&v| v >= floor));
            prop_assert_eq!(*p.betas().last().unwrap(), b);
        }
    }
}
