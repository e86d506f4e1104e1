use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tape::{linear_forward, sigmoid, Tape, Var};
use super::tensor::Tensor;
use crate::error::{contract, shape, Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Tanh,
    Relu,
    Sigmoid,
}

impl Activation {
    fn apply(self, t: &Tensor) -> Tensor {
        match self {
            Activation::Identity => t.clone(),
            Activation::Tanh => t.map(f64::tanh),
            Activation::Relu => t.map(|v| v.max(0.0)),
            Activation::Sigmoid => t.map(sigmoid),
        }
    }

    fn record(self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Activation::Identity => x,
            Activation::Tanh => tape.tanh(x),
            Activation::Relu => tape.relu(x),
            Activation::Sigmoid => tape.sigmoid(x),
        }
    }
}

/// Dense multilayer perceptron. Layer `i` maps `dims[i] → dims[i+1]` with a
/// `dims[i+1] × dims[i]` weight matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MlpRecord", into = "MlpRecord")]
pub struct MlpModel {
    layer_dims: Vec<usize>,
    weights: Vec<Tensor>,
    biases: Vec<Tensor>,
    hidden_activation: Activation,
    output_activation: Activation,
}

/// Handles of an MLP's parameters recorded on a tape, in layer order.
#[derive(Debug, Clone)]
pub struct MlpVars {
    pub weights: Vec<Var>,
    pub biases: Vec<Var>,
}

impl MlpVars {
    /// `[w0, b0, w1, b1, ...]`, matching [`MlpModel::params`].
    pub fn ordered(&self) -> Vec<Var> {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(&w, &b)| [w, b])
            .collect()
    }
}

impl MlpModel {
    /// Seeded init: every parameter uniform in `±1/√fan_in`.
    pub fn new(
        layer_dims: Vec<usize>,
        hidden_activation: Activation,
        output_activation: Activation,
        seed: u64,
    ) -> Result<Self> {
        check_activations(hidden_activation, output_activation)?;
        if layer_dims.len() < 2 || layer_dims.contains(&0) {
            return Err(shape!(
                "an MLP needs at least two non-zero layer widths, got {layer_dims:?}"
            ));
        }
        let mut rng = rng::stream(seed, "mlp-init", 0);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for pair in layer_dims.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            let mut draw = |n: usize| -> Vec<f64> {
                (0..n).map(|_| rng.random_range(-bound..bound)).collect()
            };
            weights.push(Tensor::from_raw(
                vec![fan_out, fan_in],
                draw(fan_out * fan_in),
            ));
            biases.push(Tensor::from_raw(vec![fan_out], draw(fan_out)));
        }
        Ok(Self {
            layer_dims,
            weights,
            biases,
            hidden_activation,
            output_activation,
        })
    }

    pub fn from_parts(
        layer_dims: Vec<usize>,
        weights: Vec<Tensor>,
        biases: Vec<Tensor>,
        hidden_activation: Activation,
        output_activation: Activation,
    ) -> Result<Self> {
        check_activations(hidden_activation, output_activation)?;
        let layers = layer_dims.len().saturating_sub(1);
        if layers == 0 || weights.len() != layers || biases.len() != layers {
            return Err(shape!(
                "{} layer widths need {layers} weight/bias pairs, got {}/{}",
                layer_dims.len(),
                weights.len(),
                biases.len()
            ));
        }
        for (i, (w, b)) in weights.iter().zip(&biases).enumerate() {
            let (fan_in, fan_out) = (layer_dims[i], layer_dims[i + 1]);
            if w.shape() != [fan_out, fan_in] || b.shape() != [fan_out] {
                return Err(shape!(
                    "layer {i}: expected W {fan_out}x{fan_in} and b {fan_out}, got {:?} and {:?}",
                    w.shape(),
                    b.shape()
                ));
            }
        }
        Ok(Self {
            layer_dims,
            weights,
            biases,
            hidden_activation,
            output_activation,
        })
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_dims.last().expect("validated non-empty")
    }

    pub fn hidden_activation(&self) -> Activation {
        self.hidden_activation
    }

    pub fn output_activation(&self) -> Activation {
        self.output_activation
    }

    pub fn param_count(&self) -> usize {
        self.layer_dims.windows(2).map(|p| p[1] * (p[0] + 1)).sum()
    }

    /// Parameters in `[w0, b0, w1, b1, ...]` order.
    pub fn params(&self) -> Vec<&Tensor> {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| [w, b])
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.weights
            .iter_mut()
            .zip(self.biases.iter_mut())
            .flat_map(|(w, b)| [w, b])
            .collect()
    }

    /// All parameters flattened in [`MlpModel::params`] order.
    pub fn flat_params(&self) -> Vec<f64> {
        self.params()
            .into_iter()
            .flat_map(|t| t.data().iter().copied())
            .collect()
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(shape!(
                "expected {} parameters, got {}",
                self.param_count(),
                flat.len()
            ));
        }
        let mut offset = 0;
        for p in self.params_mut() {
            let n = p.len();
            p.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    fn check_input(&self, input: &Tensor) -> Result<()> {
        if input.shape().is_empty() || input.last_dim() != self.input_dim() {
            return Err(shape!(
                "MLP expects last dimension {}, got shape {:?}",
                self.input_dim(),
                input.shape()
            ));
        }
        Ok(())
    }

    /// Tape-free forward pass; accepts a single vector or a batch of rows.
    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        self.check_input(input)?;
        let last = self.weights.len() - 1;
        let mut h = input.clone();
        for (i, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let z = linear_forward(&h, w, b)?;
            h = if i == last {
                self.output_activation
            } else {
                self.hidden_activation
            }
            .apply(&z);
        }
        Ok(h)
    }

    /// Records every parameter as a leaf.
    pub fn register(&self, tape: &mut Tape) -> MlpVars {
        MlpVars {
            weights: self.weights.iter().map(|w| tape.leaf(w.clone())).collect(),
            biases: self.biases.iter().map(|b| tape.leaf(b.clone())).collect(),
        }
    }

    /// Forward pass recorded on `tape`; values match [`MlpModel::forward`] bit for bit.
    pub fn forward_on_tape(&self, tape: &mut Tape, vars: &MlpVars, input: Var) -> Result<Var> {
        self.check_input(tape.value(input))?;
        let last = self.weights.len() - 1;
        let mut h = input;
        for (i, (&w, &b)) in vars.weights.iter().zip(&vars.biases).enumerate() {
            let z = tape.linear(h, w, b)?;
            let act = if i == last {
                self.output_activation
            } else {
                self.hidden_activation
            };
            h = act.record(tape, z);
        }
        Ok(h)
    }
}

fn check_activations(hidden: Activation, output: Activation) -> Result<()> {
    if !matches!(hidden, Activation::Tanh | Activation::Relu) {
        return Err(contract!(
            "hidden activation must be tanh or relu, got {hidden:?}"
        ));
    }
    if !matches!(output, Activation::Identity | Activation::Sigmoid) {
        return Err(contract!(
            "output activation must be identity or sigmoid, got {output:?}"
        ));
    }
    Ok(())
}

/// On-disk MLP layout: weights flattened row-major per layer.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MlpRecord {
    pub layer_dims: Vec<usize>,
    pub hidden_activation: Activation,
    pub output_activation: Activation,
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

impl From<MlpModel> for MlpRecord {
    fn from(m: MlpModel) -> Self {
        Self {
            layer_dims: m.layer_dims,
            hidden_activation: m.hidden_activation,
            output_activation: m.output_activation,
            weights: m.weights.into_iter().map(Tensor::into_data).collect(),
            biases: m.biases.into_iter().map(Tensor::into_data).collect(),
        }
    }
}

impl TryFrom<MlpRecord> for MlpModel {
    type Error = Error;

    fn try_from(r: MlpRecord) -> Result<Self> {
        let layers = r.layer_dims.len().saturating_sub(1);
        if r.weights.len() != layers || r.biases.len() != layers {
            return Err(shape!(
                "checkpoint lists {} weight/bias arrays for {layers} layers",
                r.weights.len()
            ));
        }
        let mut weights = Vec::with_capacity(layers);
        let mut biases = Vec::with_capacity(layers);
        for (i, (w, b)) in r.weights.into_iter().zip(r.biases).enumerate() {
            let (fan_in, fan_out) = (r.layer_dims[i], r.layer_dims[i + 1]);
            weights.push(Tensor::new(vec![fan_out, fan_in], w)?);
            biases.push(Tensor::new(vec![fan_out], b)?);
        }
        Self::from_parts(
            r.layer_dims,
            weights,
            biases,
            r.hidden_activation,
            r.output_activation,
        )
    }
}
