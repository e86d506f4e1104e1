use super::tensor::Tensor;
use crate::error::{shape, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates, one pair per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let m: Vec<Vec<f64>> = params.into_iter().map(|p| vec![0.0; p.len()]).collect();
        Self {
            step: 0,
            v: m.clone(),
            m,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(
    params: &mut [&mut Tensor],
    grads: &[Tensor],
    state: &mut AdamState,
    config: &AdamConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(shape!(
            "{} parameters, {} gradients, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        ));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.len() != state.m[i].len() {
            return Err(shape!(
                "parameter {i}: shape {:?} vs gradient {:?}",
                p.shape(),
                g.shape()
            ));
        }
    }
    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - config.beta1.powf(t);
    let bc2 = 1.0 - config.beta2.powf(t);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        for (((pv, &gv), mv), vv) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            *mv = config.beta1 * *mv + (1.0 - config.beta1) * gv;
            *vv = config.beta2 * *vv + (1.0 - config.beta2) * gv * gv;
            let m_hat = *mv / bc1;
            let v_hat = *vv / bc2;
            *pv -= config.lr * m_hat / (v_hat.sqrt() + config.eps);
        }
    }
    Ok(())
}

/// Rescales `grads` in place so their joint L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads.iter().map(Tensor::norm_sq).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params_and_counts_step() {
        let mut p = Tensor::vector(vec![1.0, -2.0]).unwrap();
        let before = p.clone();
        let mut state = AdamState::new([&p]);
        let g = Tensor::zeros(vec![2]);
        adam_step(&mut [&mut p], &[g], &mut state, &AdamConfig::default()).unwrap();
        assert_eq!(p, before);
        assert_eq!(state.step(), 1);
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut p = Tensor::vector(vec![0.0, 0.0, 0.0]).unwrap();
        let mut state = AdamState::new([&p]);
        let g = Tensor::vector(vec![3.0, -0.5, 1e-3]).unwrap();
        let cfg = AdamConfig {
            lr: 0.1,
            eps: 1e-8,
            ..AdamConfig::default()
        };
        adam_step(&mut [&mut p], &[g.clone()], &mut state, &cfg).unwrap();
        // m̂ = g and v̂ = g², so the update is -lr·g/(|g|+eps).
        for (pv, gv) in p.data().iter().zip(g.data()) {
            let expect = -0.1 * gv / (gv.abs() + 1e-8);
            assert!((pv - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn quadratic_converges_like_scalar_reference() {
        // Scalar reference Adam run on f(p) = ½(p-1)², written out independently.
        let (lr, b1, b2, eps) = (0.1_f64, 0.9_f64, 0.999_f64, 1e-8_f64);
        let (mut p_ref, mut m, mut v) = (0.0_f64, 0.0_f64, 0.0_f64);
        for t in 1..=100 {
            let g = p_ref - 1.0;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            p_ref -= lr * (m / (1.0 - b1.powi(t))) / ((v / (1.0 - b2.powi(t))).sqrt() + eps);
        }

        let mut p = Tensor::vector(vec![0.0; 3]).unwrap();
        let mut state = AdamState::new([&p]);
        let cfg = AdamConfig {
            lr,
            beta1: b1,
            beta2: b2,
            eps,
        };
        for _ in 0..100 {
            let g = p.map(|x| x - 1.0);
            adam_step(&mut [&mut p], &[g], &mut state, &cfg).unwrap();
        }
        let dist = p
            .data()
            .iter()
            .map(|x| (x - 1.0).powi(2))
            .sum::<f64>()
            .sqrt();
        assert!(dist < 1e-2, "distance {dist}");
        assert!(p.data().iter().all(|x| (x - p_ref).abs() < 1e-12));
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut p = Tensor::vector(vec![0.0; 2]).unwrap();
        let mut state = AdamState::new([&p]);
        let g = Tensor::vector(vec![0.0; 3]).unwrap();
        assert!(adam_step(&mut [&mut p], &[g], &mut state, &AdamConfig::default()).is_err());
    }

    #[test]
    fn clipping_caps_global_norm() {
        let mut g = vec![Tensor::vector(vec![30.0, 40.0]).unwrap()];
        let n = clip_global_norm(&mut g, 10.0);
        assert_eq!(n, 50.0);
        assert!((g[0].norm_sq().sqrt() - 10.0).abs() < 1e-12);
    }
}
