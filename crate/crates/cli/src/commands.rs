//! Subcommand implementations. Each takes fully resolved options and writes
//! its artifacts; `main` only parses flags and maps errors to exit codes.

use std::path::{Path, PathBuf};

use bddm::diffusion::{linear_schedule, DiffusionSpec, EpsPredictor, VarianceMode};
use bddm::eval::{bound_sweep, median_bandwidth, mmd_rbf, AnalyticEps};
use bddm::networks::{NetworkCheckpoint, ScoreNet};
use bddm::nn::{MlpModel, Tensor};
use bddm::rng;
use bddm::sampling::{sample, Process, SamplerConfig};
use bddm::scheduling::{
    grid_search_seed, gs_baseline, gs_candidate_count, MetricDirection, PredictedSchedule,
    ScheduleMetric, ScheduleSearchReport, SeedGrid, GS_MAX_STEPS,
};
use bddm::training::{train_schedule_with, train_score_with};
use serde::{Deserialize, Serialize};

use crate::artifacts::{
    check_spec, fingerprint, load_schedule_net, load_score, read_json, read_samples_csv,
    samples_to_csv, write_json, write_text, SampleSidecar, ScheduleFile, TrainArtifact,
};
use crate::config::ExperimentConfig;
use crate::datasets::Dataset;
use crate::{CliError, CliResult};

/// `dir/stem.suffix` next to `path`, e.g. `score.json` → `score.report.json`.
pub fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    path.with_file_name(format!("{stem}.{suffix}"))
}

fn load_config(path: &Path, seed: Option<u64>) -> CliResult<(ExperimentConfig, Dataset)> {
    let mut config = ExperimentConfig::load(path)?;
    if let Some(s) = seed {
        config.seed = s;
    }
    let data = config.dataset.build()?;
    Ok((config, data))
}

/// Held-out draws for `evaluate`; never used by training or selection.
pub const HELD_OUT_LABEL: &str = "held-out";
const SEARCH_EVAL_LABEL: &str = "search-eval";

pub struct TrainScoreArgs<'a> {
    pub config: &'a Path,
    pub seed: Option<u64>,
    pub out: &'a Path,
}

/// Writes the score checkpoint at `out` and the report at `<stem>.report.json`.
pub fn train_score(args: &TrainScoreArgs) -> CliResult<TrainArtifact> {
    let (config, data) = load_config(args.config, args.seed)?;
    let spec = config.spec;
    let seed = config.stage_seed("train-score");
    let train = config.train_score.to_train_config(spec, seed);
    let out = args.out;
    let mut hook = |step: usize, model: &MlpModel| -> bddm::Result<()> {
        let net = ScoreNet::from_mlp(model.clone())?;
        write_json(
            &sibling(out, &format!("step{step}.json")),
            &NetworkCheckpoint::score(&net, spec, config.seed),
        )
        .map_err(|e| bddm::Error::Contract(e.to_string()))
    };
    let (net, mut report) = train_score_with(&data, &train, &mut hook)?;
    log::info!(
        "score training took {:?}; final loss {:e}",
        report.wall_time,
        report.trailing_mean(1000)
    );
    write_json(out, &NetworkCheckpoint::score(&net, spec, config.seed))?;
    report.checkpoint = Some(out.display().to_string());
    let artifact = TrainArtifact {
        spec,
        master_seed: config.seed,
        report,
    };
    write_json(&sibling(out, "report.json"), &artifact)?;
    Ok(artifact)
}

pub struct TrainScheduleArgs<'a> {
    pub config: &'a Path,
    pub seed: Option<u64>,
    pub score: &'a Path,
    pub out: &'a Path,
}

pub fn train_schedule(args: &TrainScheduleArgs) -> CliResult<TrainArtifact> {
    let (config, data) = load_config(args.config, args.seed)?;
    let spec = config.spec;
    let (score, ck) = load_score(args.score)?;
    check_spec(&spec, &ck.spec, "score checkpoint")?;
    let before = fingerprint(score.mlp());
    let seed = config.stage_seed("train-schedule");
    let train = config.train_schedule.to_train_config(spec, seed);
    let out = args.out;
    let mut hook = |step: usize, model: &MlpModel| -> bddm::Result<()> {
        let net = bddm::networks::ScheduleNet::from_mlp(model.clone())?;
        let ck = NetworkCheckpoint::schedule(&net, spec, config.seed, before.clone());
        write_json(&sibling(out, &format!("step{step}.json")), &ck)
            .map_err(|e| bddm::Error::Contract(e.to_string()))
    };
    let (net, mut report) = train_schedule_with(&score, &data, &train, &mut hook)?;
    if fingerprint(score.mlp()) != before {
        return Err(CliError::Compat(
            "score network changed during schedule training".into(),
        ));
    }
    log::info!(
        "schedule training took {:?}; skipped {} of {} elements",
        report.wall_time,
        report.skipped,
        report.loss_curve.len() * train.batch_size
    );
    write_json(
        out,
        &NetworkCheckpoint::schedule(&net, spec, config.seed, before),
    )?;
    report.checkpoint = Some(out.display().to_string());
    let artifact = TrainArtifact {
        spec,
        master_seed: config.seed,
        report,
    };
    write_json(&sibling(out, "report.json"), &artifact)?;
    Ok(artifact)
}

/// MMD² between samples drawn under a candidate schedule and a fixed reference
/// set. The bandwidth comes from the reference set alone so every candidate is
/// measured with the same kernel.
pub struct MmdMetric<'a> {
    pub score: &'a dyn EpsPredictor,
    pub reference: Tensor,
    pub bandwidth: f64,
    pub samples: usize,
    pub sampler: SamplerConfig,
}

impl<'a> MmdMetric<'a> {
    pub fn new(
        score: &'a dyn EpsPredictor,
        reference: Tensor,
        samples: usize,
        sampler: SamplerConfig,
    ) -> CliResult<Self> {
        let empty = Tensor::zeros(vec![0, reference.last_dim()]);
        let bandwidth = median_bandwidth(&reference, &empty)?;
        Ok(Self {
            score,
            reference,
            bandwidth,
            samples,
            sampler,
        })
    }
}

impl ScheduleMetric for MmdMetric<'_> {
    fn name(&self) -> &str {
        "mmd2"
    }

    fn direction(&self) -> MetricDirection {
        MetricDirection::Minimize
    }

    fn evaluate(&self, schedule: &PredictedSchedule, seed: u64) -> bddm::Result<f64> {
        let batch = sample(
            self.score,
            schedule,
            self.samples,
            &SamplerConfig {
                seed,
                ..self.sampler
            },
        )?;
        mmd_rbf(&batch.samples, &self.reference, self.bandwidth)
    }
}

fn search_metric<'a>(
    config: &ExperimentConfig,
    data: &Dataset,
    score: &'a ScoreNet,
) -> CliResult<MmdMetric<'a>> {
    let s = &config.schedule_search;
    let reference = data.draw_set(s.eval_count, config.seed, SEARCH_EVAL_LABEL);
    MmdMetric::new(
        score,
        reference,
        s.metric_samples,
        config.sampler.with_seed(0),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchArtifact {
    pub spec: DiffusionSpec,
    pub master_seed: u64,
    pub grid: SeedGrid,
    pub report: ScheduleSearchReport,
}

pub struct ScheduleArgs<'a> {
    pub config: &'a Path,
    pub seed: Option<u64>,
    pub score: &'a Path,
    pub schedule_net: &'a Path,
    pub grid_m: Option<usize>,
    pub out: &'a Path,
}

/// Writes the winning schedule at `out` and every candidate at `<stem>.search.json`.
pub fn schedule(args: &ScheduleArgs) -> CliResult<SearchArtifact> {
    let (config, data) = load_config(args.config, args.seed)?;
    let spec = config.spec;
    let (score, score_ck) = load_score(args.score)?;
    let (net, net_ck) = load_schedule_net(args.schedule_net)?;
    check_spec(&spec, &score_ck.spec, "score checkpoint")?;
    check_spec(&spec, &net_ck.spec, "schedule checkpoint")?;
    let hash = fingerprint(score.mlp());
    if net_ck.score_fingerprint.as_deref() != Some(hash.as_str()) {
        return Err(CliError::Compat(format!(
            "schedule network was trained against a different score network ({:?}, have {hash})",
            net_ck.score_fingerprint
        )));
    }
    let training = linear_schedule(&spec)?;
    let grid = SeedGrid {
        m: args.grid_m.unwrap_or(config.schedule_search.grid_m),
        alpha_final: training.alpha(spec.steps),
        max_steps: config.max_schedule_steps(),
        beta_floor: training.beta(1),
        seed: config.stage_seed("schedule-search"),
    };
    if !(1..=9).contains(&grid.m) {
        return Err(CliError::Usage(format!(
            "--grid-m must be in 1..=9, got {}",
            grid.m
        )));
    }
    let metric = search_metric(&config, &data, &score)?;
    let report = grid_search_seed(&net, &score, &grid, &metric)?;
    let best = report.best_schedule(&grid)?;
    log::info!(
        "best seed ({}, {}) gives {} steps: {:?}",
        report.winner().i,
        report.winner().j,
        best.len(),
        best.betas()
    );
    write_json(
        args.out,
        &ScheduleFile {
            schedule: best,
            spec,
            master_seed: config.seed,
        },
    )?;
    let artifact = SearchArtifact {
        spec,
        master_seed: config.seed,
        grid,
        report,
    };
    write_json(&sibling(args.out, "search.json"), &artifact)?;
    Ok(artifact)
}

pub struct SampleArgs<'a> {
    pub schedule: &'a Path,
    pub score: &'a Path,
    pub count: usize,
    /// `ddpm` or `ddim`; `None` keeps the config value (or ddpm).
    pub process: Option<&'a str>,
    pub eta: Option<f64>,
    pub variance_mode: Option<&'a str>,
    pub config: Option<&'a Path>,
    /// Defaults to a stream derived from the schedule file's master seed.
    pub seed: Option<u64>,
    pub out: &'a Path,
}

/// Writes `count` rows to the CSV at `out` and the sampler settings to `<stem>.json`.
pub fn sample_cmd(args: &SampleArgs) -> CliResult<SampleSidecar> {
    let file: ScheduleFile = read_json(args.schedule)?;
    let (score, ck) = load_score(args.score)?;
    check_spec(&file.spec, &ck.spec, "score checkpoint")?;
    let mut sampler = match args.config {
        Some(p) => {
            let config = ExperimentConfig::load(p)?;
            check_spec(&file.spec, &config.spec, "config")?;
            config.sampler
        }
        None => Default::default(),
    };
    if let Some(p) = args.process {
        sampler.process = p
            .parse::<Process>()
            .map_err(|e| CliError::Usage(e.to_string()))?;
    }
    if let Some(v) = args.variance_mode {
        sampler.variance_mode = v
            .parse::<VarianceMode>()
            .map_err(|e| CliError::Usage(e.to_string()))?;
    }
    if let Some(eta) = args.eta {
        sampler.ddim_eta = eta;
    }
    let seed = args
        .seed
        .unwrap_or_else(|| rng::derive_seed(file.master_seed, "sample"));
    let config = sampler.with_seed(seed);
    config
        .validate()
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let batch = sample(&score, &file.schedule, args.count, &config)?;
    write_text(args.out, &samples_to_csv(&batch.samples, file.spec.dim))?;
    let sidecar = SampleSidecar {
        spec: file.spec,
        master_seed: file.master_seed,
        sampler: config,
        count: args.count,
        betas_hat: file.schedule.betas().to_vec(),
    };
    write_json(&sibling(args.out, "json"), &sidecar)?;
    Ok(sidecar)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundsSidecar {
    pub spec: DiffusionSpec,
    pub master_seed: u64,
    pub rows: usize,
    pub predictor: String,
    pub mc_draws: usize,
    pub tighter_fraction: f64,
}

pub struct CompareBoundsArgs<'a> {
    pub config: &'a Path,
    pub seed: Option<u64>,
    /// Without a checkpoint the closed-form predictor of a Gaussian dataset is used.
    pub score: Option<&'a Path>,
    pub out: &'a Path,
}

pub fn compare_bounds(args: &CompareBoundsArgs) -> CliResult<BoundsSidecar> {
    let (config, data) = load_config(args.config, args.seed)?;
    let spec = config.spec;
    let loaded;
    let analytic;
    let (predictor, name): (&dyn EpsPredictor, String) = match (args.score, data.as_gaussian()) {
        (Some(p), _) => {
            let (net, ck) = load_score(p)?;
            check_spec(&spec, &ck.spec, "score checkpoint")?;
            loaded = net;
            (&loaded, p.display().to_string())
        }
        (None, Some(g)) => {
            analytic = AnalyticEps { spec: g.clone() };
            (&analytic, "analytic".to_string())
        }
        (None, None) => {
            return Err(CliError::Usage(
                "compare-bounds needs --score unless the dataset is gaussian".into(),
            ));
        }
    };
    let t_values = config.bound_t_values();
    let b = &config.bounds;
    let sweep = bound_sweep(
        predictor,
        &spec,
        &data,
        &t_values,
        b.mc_draws,
        b.loss_variant,
        config.stage_seed("bounds"),
    )?;
    write_text(args.out, &sweep.to_csv())?;
    let sidecar = BoundsSidecar {
        spec,
        master_seed: config.seed,
        rows: t_values.len(),
        predictor: name,
        mc_draws: b.mc_draws,
        tighter_fraction: sweep.tighter_fraction(),
    };
    write_json(&sibling(args.out, "json"), &sidecar)?;
    Ok(sidecar)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GsArtifact {
    pub spec: DiffusionSpec,
    pub master_seed: u64,
    pub report: bddm::scheduling::GsBaselineReport,
}

pub struct GsBaselineArgs<'a> {
    pub config: &'a Path,
    pub seed: Option<u64>,
    pub score: &'a Path,
    pub steps: usize,
    pub out: &'a Path,
}

/// Exhaustive `9^N` schedule search; refuses `N > 6`.
pub fn gs_baseline_cmd(args: &GsBaselineArgs) -> CliResult<GsArtifact> {
    if args.steps == 0 || args.steps > GS_MAX_STEPS {
        let msg = gs_candidate_count(args.steps)
            .err()
            .map(|e| e.to_string())
            .unwrap_or_default();
        return Err(CliError::Usage(format!(
            "--steps must be in 1..={GS_MAX_STEPS}: {msg}"
        )));
    }
    let (config, data) = load_config(args.config, args.seed)?;
    let spec = config.spec;
    let (score, ck) = load_score(args.score)?;
    check_spec(&spec, &ck.spec, "score checkpoint")?;
    let metric = search_metric(&config, &data, &score)?;
    let report = gs_baseline(args.steps, &metric, config.stage_seed("gs-baseline"))?;
    log::info!(
        "scored {} candidates ({} failed)",
        report.candidate_count,
        report.failed
    );
    let schedule = PredictedSchedule::from_betas(report.betas_hat.clone())?;
    write_json(
        args.out,
        &ScheduleFile {
            schedule,
            spec,
            master_seed: config.seed,
        },
    )?;
    let artifact = GsArtifact {
        spec,
        master_seed: config.seed,
        report,
    };
    write_json(&sibling(args.out, "search.json"), &artifact)?;
    Ok(artifact)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub spec: DiffusionSpec,
    pub master_seed: u64,
    pub count: usize,
    pub held_out: usize,
    pub bandwidth: f64,
    pub mmd2: f64,
    pub mean: Vec<f64>,
    /// Row-major `D × D` sample covariance.
    pub covariance: Vec<f64>,
}

pub struct EvaluateArgs<'a> {
    pub config: &'a Path,
    pub seed: Option<u64>,
    pub samples: &'a Path,
    pub out: &'a Path,
}

/// MMD² of a sample CSV against held-out data, plus its first two moments.
pub fn evaluate(args: &EvaluateArgs) -> CliResult<EvalReport> {
    let (config, data) = load_config(args.config, args.seed)?;
    let spec = config.spec;
    let samples = read_samples_csv(args.samples)?;
    if samples.last_dim() != spec.dim {
        return Err(CliError::Compat(format!(
            "samples have dim {}, spec.dim is {}",
            samples.last_dim(),
            spec.dim
        )));
    }
    if samples.rows() < 2 {
        return Err(CliError::Usage(format!(
            "evaluate needs at least 2 samples, got {}",
            samples.rows()
        )));
    }
    let held = data.draw_set(config.evaluate.held_out, config.seed, HELD_OUT_LABEL);
    let bandwidth = median_bandwidth(&held, &Tensor::zeros(vec![0, spec.dim]))?;
    let mmd2 = mmd_rbf(&samples, &held, bandwidth)?;
    let (mean, covariance) = moments(&samples);
    let report = EvalReport {
        spec,
        master_seed: config.seed,
        count: samples.rows(),
        held_out: held.rows(),
        bandwidth,
        mmd2,
        mean,
        covariance,
    };
    write_json(args.out, &report)?;
    Ok(report)
}

/// Sample mean and unbiased covariance of the rows of `x` (at least 2 rows).
pub fn moments(x: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let (n, d) = (x.rows(), x.last_dim());
    let mut mean = vec![0.0; d];
    for row in x.row_iter() {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v / n as f64;
        }
    }
    let mut cov = vec![0.0; d * d];
    for row in x.row_iter() {
        for a in 0..d {
            for b in 0..d {
                cov[a * d + b] += (row[a] - mean[a]) * (row[b] - mean[b]) / (n - 1) as f64;
            }
        }
    }
    (mean, cov)
}
