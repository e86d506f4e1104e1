//! Synthetic data generators. Draw `i` of a set labelled `label` always comes
//! from stream `(seed, label, i)`.

use std::f64::consts::PI;

use bddm::eval::GaussianDataSpec;
use bddm::nn::Tensor;
use bddm::rng;
use bddm::training::DataSampler;
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::{CliError, CliResult};

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureComponent {
    pub mean: Vec<f64>,
    pub s2: f64,
    #[serde(default = "one")]
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetConfig {
    Gaussian {
        mu: Vec<f64>,
        s2: f64,
    },
    Mixture {
        components: Vec<MixtureComponent>,
    },
    /// Two-dimensional spiral, scaled to roughly unit spread.
    SwissRoll {
        noise: f64,
    },
}

impl DatasetConfig {
    pub fn dim(&self) -> usize {
        match self {
            DatasetConfig::Gaussian { mu, .. } => mu.len(),
            DatasetConfig::Mixture { components } => components.first().map_or(0, |c| c.mean.len()),
            DatasetConfig::SwissRoll { .. } => 2,
        }
    }

    pub fn build(&self) -> CliResult<Dataset> {
        let bad = |m: String| Err(CliError::Config(format!("dataset: {m}")));
        match self {
            DatasetConfig::Gaussian { mu, s2 } => {
                Ok(Dataset::Gaussian(GaussianDataSpec::new(mu.clone(), *s2)?))
            }
            DatasetConfig::Mixture { components } => {
                if components.is_empty() {
                    return bad("mixture needs at least one component".into());
                }
                let d = components[0].mean.len();
                let mut cumulative = Vec::with_capacity(components.len());
                let mut total = 0.0;
                for (k, c) in components.iter().enumerate() {
                    if c.mean.len() != d || d == 0 {
                        return bad(format!(
                            "component {k} has dim {}, expected {d}",
                            c.mean.len()
                        ));
                    }
                    if !(c.s2 >= 0.0 && c.weight > 0.0 && c.s2.is_finite() && c.weight.is_finite())
                    {
                        return bad(format!("component {k} needs s2 >= 0 and weight > 0"));
                    }
                    total += c.weight;
                    cumulative.push(total);
                }
                for w in &mut cumulative {
                    *w /= total;
                }
                Ok(Dataset::Mixture {
                    components: components.clone(),
                    cumulative,
                })
            }
            DatasetConfig::SwissRoll { noise } => {
                if !(*noise >= 0.0 && noise.is_finite()) {
                    return bad(format!("swiss_roll noise must be >= 0, got {noise}"));
                }
                Ok(Dataset::SwissRoll { noise: *noise })
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Dataset {
    Gaussian(GaussianDataSpec),
    Mixture {
        components: Vec<MixtureComponent>,
        cumulative: Vec<f64>,
    },
    SwissRoll {
        noise: f64,
    },
}

impl Dataset {
    pub fn as_gaussian(&self) -> Option<&GaussianDataSpec> {
        match self {
            Dataset::Gaussian(g) => Some(g),
            _ => None,
        }
    }

    /// `n × D` draws, row `i` from stream `(seed, label, i)`.
    pub fn draw_set(&self, n: usize, seed: u64, label: &str) -> Tensor {
        let d = self.dim();
        let mut data = vec![0.0; n * d];
        for (i, row) in data.chunks_mut(d).enumerate() {
            self.draw(&mut rng::stream(seed, label, i as u64), row);
        }
        Tensor::matrix(n, d, data).expect("finite draws")
    }
}

impl DataSampler for Dataset {
    fn dim(&self) -> usize {
        match self {
            Dataset::Gaussian(g) => g.dim(),
            Dataset::Mixture { components, .. } => components[0].mean.len(),
            Dataset::SwissRoll { .. } => 2,
        }
    }

    fn draw(&self, r: &mut dyn RngCore, out: &mut [f64]) {
        match self {
            Dataset::Gaussian(g) => g.draw(r, out),
            Dataset::Mixture {
                components,
                cumulative,
            } => {
                let u: f64 = r.random();
                let k = cumulative
                    .iter()
                    .position(|&c| u < c)
                    .unwrap_or(components.len() - 1);
                let c = &components[k];
                let s = c.s2.sqrt();
                for (o, m) in out.iter_mut().zip(&c.mean) {
                    *o = m + s * rng::normal(r);
                }
            }
            Dataset::SwissRoll { noise } => {
                let t = 1.5 * PI * (1.0 + 2.0 * r.random::<f64>());
                out[0] = t * t.cos() / 5.0 + noise * rng::normal(r);
                out[1] = t * t.sin() / 5.0 + noise * rng::normal(r);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mixture() -> DatasetConfig {
        DatasetConfig::Mixture {
            components: vec![
                MixtureComponent {
                    mean: vec![-1.0, 0.0],
                    s2: 0.01,
                    weight: 3.0,
                },
                MixtureComponent {
                    mean: vec![1.0, 0.0],
                    s2: 0.01,
                    weight: 1.0,
                },
            ],
        }
    }

    #[test]
    fn mixture_weights_are_respected() {
        let ds = mixture().build().unwrap();
        let x = ds.draw_set(4000, 1, "t");
        let left = x.row_iter().filter(|r| r[0] < 0.0).count() as f64 / 4000.0;
        assert!((left - 0.75).abs() < 0.03, "{left}");
    }

    #[test]
    fn draws_are_deterministic_per_index() {
        let ds = DatasetConfig::SwissRoll { noise: 0.1 }.build().unwrap();
        let a = ds.draw_set(10, 4, "x");
        let b = ds.draw_set(20, 4, "x");
        assert_eq!(a.data(), &b.data()[..20]);
        assert_ne!(a.data(), ds.draw_set(10, 5, "x").data());
    }

    #[test]
    fn invalid_datasets_are_config_errors() {
        let bad = DatasetConfig::Mixture {
            components: vec![
                MixtureComponent {
                    mean: vec![0.0],
                    s2: 1.0,
                    weight: 1.0,
                },
                MixtureComponent {
                    mean: vec![0.0, 1.0],
                    s2: 1.0,
                    weight: 1.0,
                },
            ],
        };
        assert!(matches!(bad.build(), Err(CliError::Config(_))));
        assert!(matches!(
            DatasetConfig::Mixture { components: vec![] }.build(),
            Err(CliError::Config(_))
        ));
        assert!(DatasetConfig::Gaussian {
            mu: vec![0.0],
            s2: -1.0
        }
        .build()
        .is_err());
    }

    #[test]
    fn tagged_json_form() {
        let text = r#"{"kind":"gaussian","mu":[2.0],"s2":1.0}"#;
        let d: DatasetConfig = serde_json::from_str(text).unwrap();
        assert_eq!(
            d,
            DatasetConfig::Gaussian {
                mu: vec![2.0],
                s2: 1.0
            }
        );
        assert_eq!(d.dim(), 1);
    }
}
