//! Artifact files. JSON is written with 17 significant digits per float so
//! reruns are byte-identical; every artifact records its spec and master seed.

use std::fs;
use std::path::Path;

use bddm::diffusion::DiffusionSpec;
use bddm::json::format_f64;
use bddm::networks::{NetworkCheckpoint, ScheduleNet, ScoreNet};
use bddm::nn::{MlpModel, Tensor};
use bddm::sampling::SamplerConfig;
use bddm::scheduling::PredictedSchedule;
use bddm::training::TrainReport;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{CliError, CliResult};

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn write_text(path: &Path, text: &str) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, text).map_err(io_err(path))
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> CliResult<()> {
    let text = bddm::json::to_string(value)
        .map_err(|e| CliError::Config(format!("serializing {}: {e}", path.display())))?;
    write_text(path, &text)
}

/// Parses JSON, naming the offending key path on failure
/// (for example `spec.T: missing field` or `train_score.lr: invalid type`).
pub fn parse_json<T: DeserializeOwned>(text: &str, origin: &str) -> CliResult<T> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let inner = e.inner().to_string();
        let mut path = e.path().to_string();
        if let Some(field) = inner
            .strip_prefix("missing field `")
            .and_then(|r| r.split('`').next())
        {
            path = if path == "." {
                field.to_string()
            } else {
                format!("{path}.{field}")
            };
        }
        CliError::Config(format!("{origin}: key `{path}`: {inner}"))
    })
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    parse_json(&text, &path.display().to_string())
}

/// SHA-256 over the layer layout and the little-endian bits of every parameter.
pub fn fingerprint(model: &MlpModel) -> String {
    let mut h = Sha256::new();
    for d in model.layer_dims() {
        h.update((*d as u64).to_le_bytes());
    }
    for v in model.flat_params() {
        h.update(v.to_bits().to_le_bytes());
    }
    hex::encode(h.finalize())
}

pub fn load_score(path: &Path) -> CliResult<(ScoreNet, NetworkCheckpoint)> {
    let ck: NetworkCheckpoint = read_json(path)?;
    let net = ck
        .clone()
        .into_score()
        .map_err(|e| CliError::Compat(format!("{}: {e}", path.display())))?;
    Ok((net, ck))
}

pub fn load_schedule_net(path: &Path) -> CliResult<(ScheduleNet, NetworkCheckpoint)> {
    let ck: NetworkCheckpoint = read_json(path)?;
    let net = ck
        .clone()
        .into_schedule()
        .map_err(|e| CliError::Compat(format!("{}: {e}", path.display())))?;
    Ok((net, ck))
}

pub fn check_spec(expected: &DiffusionSpec, found: &DiffusionSpec, what: &str) -> CliResult<()> {
    if expected != found {
        return Err(CliError::Compat(format!(
            "{what} was built for {found:?}, but the config uses {expected:?}"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainArtifact {
    pub spec: DiffusionSpec,
    pub master_seed: u64,
    pub report: TrainReport,
}

/// Persisted sampling schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleFile {
    #[serde(flatten)]
    pub schedule: PredictedSchedule,
    pub spec: DiffusionSpec,
    pub master_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleSidecar {
    pub spec: DiffusionSpec,
    pub master_seed: u64,
    pub sampler: SamplerConfig,
    pub count: usize,
    pub betas_hat: Vec<f64>,
}

/// One row per sample, columns `x1..xD`.
pub fn samples_to_csv(samples: &Tensor, dim: usize) -> String {
    let header: Vec<String> = (1..=dim).map(|k| format!("x{k}")).collect();
    let mut out = header.join(",");
    out.push('\n');
    for row in samples.row_iter() {
        let cells: Vec<String> = row.iter().map(|v| format_f64(*v)).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

pub fn read_samples_csv(path: &Path) -> CliResult<Tensor> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| CliError::Config(format!("{}: empty file", path.display())))?;
    let dim = header.split(',').count();
    let mut data = Vec::new();
    for (k, line) in lines.enumerate() {
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != dim {
            return Err(CliError::Config(format!(
                "{}: line {} has {} columns, expected {dim}",
                path.display(),
                k + 2,
                cells.len()
            )));
        }
        for c in cells {
            let v: f64 = c.trim().parse().map_err(|e| {
                CliError::Config(format!("{}: line {}: {e}", path.display(), k + 2))
            })?;
            data.push(v);
        }
    }
    let rows = data.len() / dim;
    Ok(Tensor::matrix(rows, dim, data)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn missing_key_names_the_full_path() {
        #[derive(Debug, Deserialize)]
        #[allow(dead_code)]
        struct Outer {
            spec: DiffusionSpec,
        }
        let err = parse_json::<Outer>(
            r#"{"spec": {"beta_start": 0.1, "beta_end": 0.2, "tau": 1, "dim": 1}}"#,
            "cfg",
        )
        .unwrap_err()
        .to_string();
        assert!(err.contains("spec.T"), "{err}");
        let err = parse_json::<Outer>("{\n \"spec\": 3}", "cfg")
            .unwrap_err()
            .to_string();
        assert!(err.contains("line 2"), "{err}");
    }

    #[test]
    fn csv_round_trip() {
        let t = Tensor::matrix(2, 2, vec![0.1, -2.0, 1.0 / 3.0, 5e-300]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.csv");
        write_text(&p, &samples_to_csv(&t, 2)).unwrap();
        assert_eq!(read_samples_csv(&p).unwrap(), t);
        let empty = Tensor::zeros(vec![0, 2]);
        assert_eq!(samples_to_csv(&empty, 2), "x1,x2\n");
    }

    #[test]
    fn fingerprint_tracks_parameters() {
        let mut net = ScoreNet::new(1, &[4], bddm::nn::Activation::Tanh, 0).unwrap();
        let a = fingerprint(net.mlp());
        assert_eq!(a, fingerprint(net.mlp()));
        let mut p = net.mlp().flat_params();
        p[0] += 1e-12;
        net.mlp_mut().set_flat_params(&p).unwrap();
        assert_ne!(a, fingerprint(net.mlp()));
    }

    #[test]
    fn schedule_file_round_trip() {
        let spec = DiffusionSpec {
            steps: 20,
            beta_start: 1e-4,
            beta_end: 0.05,
            tau: 2,
            dim: 1,
        };
        let f = ScheduleFile {
            schedule: PredictedSchedule::from_betas(vec![0.01, 0.3]).unwrap(),
            spec,
            master_seed: 4,
        };
        let text = bddm::json::to_string(&f).unwrap();
        assert!(text.contains("\"betas_hat\""));
        assert_eq!(parse_json::<ScheduleFile>(&text, "x").unwrap(), f);
    }
}
