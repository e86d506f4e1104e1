//! Score network `ε_θ(x, α)` and schedule network `σ_φ(x) ∈ (0,1)`.

use serde::{Deserialize, Serialize};

use crate::diffusion::{beta_upper_bound, check_batch, DiffusionSpec, EpsPredictor};
use crate::error::{contract, domain, shape, Result};
use crate::nn::{Activation, MlpModel, MlpVars, Tape, Tensor, Var};

pub const DEFAULT_SCORE_HIDDEN: [usize; 2] = [128, 128];
pub const DEFAULT_SCHEDULE_HIDDEN: [usize; 2] = [64, 64];

/// Appends the noise-scale embedding `[α, √(1-α²)]` to every row of `x`.
pub fn embed_noise_scale(x: &Tensor, alphas: &[f64]) -> Result<Tensor> {
    if x.rows() != alphas.len() {
        return Err(shape!(
            "{} rows but {} noise scales",
            x.rows(),
            alphas.len()
        ));
    }
    let d = x.last_dim();
    let mut data = Vec::with_capacity(x.rows() * (d + 2));
    for (row, &a) in x.row_iter().zip(alphas) {
        if !(a > 0.0 && a <= 1.0) {
            return Err(domain!("noise scale alpha = {a} is outside (0, 1]"));
        }
        data.extend_from_slice(row);
        data.push(a);
        data.push((1.0 - a * a).sqrt());
    }
    Tensor::matrix(x.rows(), d + 2, data)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreNet {
    mlp: MlpModel,
}

impl ScoreNet {
    pub fn new(dim: usize, hidden: &[usize], activation: Activation, seed: u64) -> Result<Self> {
        let mut dims = vec![dim + 2];
        dims.extend_from_slice(hidden);
        dims.push(dim);
        Self::from_mlp(MlpModel::new(dims, activation, Activation::Identity, seed)?)
    }

    pub fn with_default_widths(dim: usize, seed: u64) -> Result<Self> {
        Self::new(dim, &DEFAULT_SCORE_HIDDEN, Activation::Tanh, seed)
    }

    pub fn from_mlp(mlp: MlpModel) -> Result<Self> {
        if mlp.input_dim() != mlp.output_dim() + 2 {
            return Err(shape!(
                "score MLP must map D+2 -> D, got {} -> {}",
                mlp.input_dim(),
                mlp.output_dim()
            ));
        }
        if mlp.output_activation() != Activation::Identity {
            return Err(contract!("score MLP needs an identity output head"));
        }
        Ok(Self { mlp })
    }

    pub fn mlp(&self) -> &MlpModel {
        &self.mlp
    }

    pub fn mlp_mut(&mut self) -> &mut MlpModel {
        &mut self.mlp
    }

    /// Records the prediction for an already embedded input batch.
    pub fn predict_on_tape(&self, tape: &mut Tape, vars: &MlpVars, embedded: Var) -> Result<Var> {
        self.mlp.forward_on_tape(tape, vars, embedded)
    }
}

impl EpsPredictor for ScoreNet {
    fn dim(&self) -> usize {
        self.mlp.output_dim()
    }

    fn predict_batch(&self, x: &Tensor, alphas: &[f64]) -> Result<Tensor> {
        check_batch(self.dim(), x, alphas)?;
        self.mlp.forward(&embed_noise_scale(x, alphas)?)
    }
}

/// `ε_θ(x, α)` for a single vector.
pub fn score_predict(net: &ScoreNet, x: &[f64], alpha: f64) -> Result<Vec<f64>> {
    net.predict(x, alpha)
}

/// Ratio model `σ(x) ∈ (0,1)` driving backward schedule prediction.
pub trait RatioModel: Sync {
    fn dim(&self) -> usize;

    fn ratio_batch(&self, x: &Tensor) -> Result<Vec<f64>>;

    fn ratio(&self, x: &[f64]) -> Result<f64> {
        let t = Tensor::matrix(1, x.len(), x.to_vec())?;
        Ok(self.ratio_batch(&t)?[0])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleNet {
    mlp: MlpModel,
}

impl ScheduleNet {
    pub fn new(dim: usize, hidden: &[usize], activation: Activation, seed: u64) -> Result<Self> {
        let mut dims = vec![dim];
        dims.extend_from_slice(hidden);
        dims.push(1);
        Self::from_mlp(MlpModel::new(dims, activation, Activation::Sigmoid, seed)?)
    }

    pub fn with_default_widths(dim: usize, seed: u64) -> Result<Self> {
        Self::new(dim, &DEFAULT_SCHEDULE_HIDDEN, Activation::Tanh, seed)
    }

    pub fn from_mlp(mlp: MlpModel) -> Result<Self> {
        if mlp.output_activation() != Activation::Sigmoid {
            return Err(contract!("schedule MLP needs a sigmoid output head"));
        }
        Ok(Self { mlp })
    }

    pub fn mlp(&self) -> &MlpModel {
        &self.mlp
    }

    pub fn mlp_mut(&mut self) -> &mut MlpModel {
        &mut self.mlp
    }

    /// Records the pooled ratio (`n × 1`) for a batch of noisy inputs.
    pub fn ratio_on_tape(&self, tape: &mut Tape, vars: &MlpVars, x: Var) -> Result<Var> {
        let out = self.mlp.forward_on_tape(tape, vars, x)?;
        Ok(tape.row_mean(out))
    }
}

impl RatioModel for ScheduleNet {
    fn dim(&self) -> usize {
        self.mlp.input_dim()
    }

    /// Sigmoid outputs averaged over the output entries of each row.
    fn ratio_batch(&self, x: &Tensor) -> Result<Vec<f64>> {
        let out = self.mlp.forward(x)?;
        let k = out.last_dim() as f64;
        Ok(out.row_iter().map(|r| r.iter().sum::<f64>() / k).collect())
    }
}

/// Constant ratio; a stand-in for a trained schedule network.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConstantRatio {
    pub dim: usize,
    pub ratio: f64,
}

impl RatioModel for ConstantRatio {
    fn dim(&self) -> usize {
        self.dim
    }

    fn ratio_batch(&self, x: &Tensor) -> Result<Vec<f64>> {
        if x.last_dim() != self.dim {
            return Err(shape!(
                "ratio model of dim {} got {:?}",
                self.dim,
                x.shape()
            ));
        }
        Ok(vec![self.ratio; x.rows()])
    }
}

pub fn sigma_ratio(net: &dyn RatioModel, x: &[f64]) -> Result<f64> {
    net.ratio(x)
}

/// `β̂_n = min{1 - α̂²_{n+1}/(1-β̂_{n+1}), β̂_{n+1}} · σ(x_t)`.
pub fn f_phi(
    net: &dyn RatioModel,
    x_t: &[f64],
    alpha_hat_next: f64,
    beta_hat_next: f64,
) -> Result<f64> {
    let bound = beta_upper_bound(alpha_hat_next, beta_hat_next)?;
    Ok(bound * net.ratio(x_t)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NetworkKind {
    Score,
    Schedule,
}

/// On-disk network: the MLP layout plus the process it was trained for.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkCheckpoint {
    pub kind: NetworkKind,
    pub spec: DiffusionSpec,
    pub seed: u64,
    /// Fingerprint of the frozen score network a schedule network was trained against.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score_fingerprint: Option<String>,
    #[serde(flatten)]
    pub model: MlpModel,
}

impl NetworkCheckpoint {
    pub fn score(net: &ScoreNet, spec: DiffusionSpec, seed: u64) -> Self {
        Self {
            kind: NetworkKind::Score,
            spec,
            seed,
            score_fingerprint: None,
            model: net.mlp.clone(),
        }
    }

    pub fn schedule(
        net: &ScheduleNet,
        spec: DiffusionSpec,
        seed: u64,
        score_fingerprint: String,
    ) -> Self {
        Self {
            kind: NetworkKind::Schedule,
            spec,
            seed,
            score_fingerprint: Some(score_fingerprint),
            model: net.mlp.clone(),
        }
    }

    pub fn into_score(self) -> Result<ScoreNet> {
        if self.kind != NetworkKind::Score {
            return Err(contract!(
                "checkpoint holds a {:?} network, expected score",
                self.kind
            ));
        }
        ScoreNet::from_mlp(self.model)
    }

    pub fn into_schedule(self) -> Result<ScheduleNet> {
        if self.kind != NetworkKind::Schedule {
            return Err(contract!(
                "checkpoint holds a {:?} network, expected schedule",
                self.kind
            ));
        }
        ScheduleNet::from_mlp(self.model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn zero_score(dim: usize) -> ScoreNet {
        let mut net = ScoreNet::new(dim, &[8], Activation::Tanh, 0).unwrap();
        let n = net.mlp().param_count();
        net.mlp_mut().set_flat_params(&vec![0.0; n]).unwrap();
        net
    }

    #[test]
    fn zero_score_net_predicts_zero() {
        let net = zero_score(3);
        assert_eq!(
            score_predict(&net, &[1.0, -2.0, 0.5], 0.4).unwrap(),
            vec![0.0; 3]
        );
    }

    #[test]
    fn score_output_shape_and_alpha_domain() {
        for dim in [1, 2, 5] {
            let net = ScoreNet::new(dim, &[16, 16], Activation::Relu, 7).unwrap();
            assert_eq!(
                score_predict(&net, &vec![0.3; dim], 1.0).unwrap().len(),
                dim
            );
            assert!(score_predict(&net, &vec![0.3; dim], 0.0).is_err());
            assert!(score_predict(&net, &vec![0.3; dim], 1.2).is_err());
        }
        let net = ScoreNet::with_default_widths(2, 0).unwrap();
        assert_eq!(net.mlp().layer_dims(), &[4, 128, 128, 2]);
    }

    #[test]
    fn zero_schedule_net_gives_half() {
        let mut net = ScheduleNet::new(2, &[4], Activation::Tanh, 0).unwrap();
        let n = net.mlp().param_count();
        net.mlp_mut().set_flat_params(&vec![0.0; n]).unwrap();
        assert_eq!(sigma_ratio(&net, &[3.0, -1.0]).unwrap(), 0.5);
        assert_eq!(
            ScheduleNet::with_default_widths(3, 0)
                .unwrap()
                .mlp()
                .layer_dims(),
            &[3, 64, 64, 1]
        );
    }

    #[test]
    fn pooling_is_mean_of_sigmoids() {
        let mlp = MlpModel::new(vec![2, 6, 4], Activation::Tanh, Activation::Sigmoid, 5).unwrap();
        let net = ScheduleNet::from_mlp(mlp.clone()).unwrap();
        let x = Tensor::matrix(1, 2, vec![0.7, -0.2]).unwrap();
        let out = mlp.forward(&x).unwrap();
        let mut naive = 0.0;
        for v in out.data() {
            naive += v;
        }
        naive /= out.len() as f64;
        assert!((net.ratio(&[0.7, -0.2]).unwrap() - naive).abs() < 1e-12);
    }

    #[test]
    fn f_phi_with_constant_ratio() {
        let half = ConstantRatio { dim: 1, ratio: 0.5 };
        assert!((f_phi(&half, &[0.0], 0.5, 0.5).unwrap() - 0.25).abs() < 1e-15);
        assert!(f_phi(&half, &[0.0], 0.9, 0.5).is_err());
    }

    #[test]
    fn checkpoint_round_trip_and_kind_check() {
        let spec = DiffusionSpec {
            steps: 50,
            beta_start: 1e-4,
            beta_end: 0.05,
            tau: 5,
            dim: 2,
        };
        let net = ScoreNet::new(2, &[8], Activation::Tanh, 3).unwrap();
        let ck = NetworkCheckpoint::score(&net, spec, 3);
        let text = crate::json::to_string(&ck).unwrap();
        assert!(text.contains("\"kind\": \"score\""));
        let back: NetworkCheckpoint = serde_json::from_str(&text).unwrap();
        assert_eq!(back, ck);
        assert!(back.clone().into_schedule().is_err());
        assert_eq!(back.into_score().unwrap(), net);
    }
}
