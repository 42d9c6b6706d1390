//! Adam with bias-corrected moments.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig { lr, ..Default::default() }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &[&Tensor]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape())).collect::<Vec<_>>();
        AdamState { config, m: zeros(), v: zeros(), step: 0 }
    }

    /// One update in place. `names` label the blocks in error messages.
    /// Nothing is modified if any gradient is rejected.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[&Tensor], names: &[String]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::invalid(format!(
                "adam: {} accumulators, {} params, {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            let name = names.get(i).map_or_else(|| format!("block {i}"), Clone::clone);
            if p.shape() != g.shape() || p.shape() != self.m[i].shape() {
                return Err(Error::invalid(format!(
                    "adam: gradient for {name} has shape {:?}, parameter {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
            if !g.all_finite() {
                return Err(Error::NonFinite(format!("gradient of {name}")));
            }
        }

        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            let pd = p.data_mut();
            for (((w, &gi), mi), vi) in pd.iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("p{i}")).collect()
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut p = Tensor::vector(vec![1.0, -2.0, 0.5]);
        let g = Tensor::vector(vec![0.3, -7.0, 1e-3]);
        let cfg = AdamConfig::with_lr(0.01);
        let mut state = AdamState::new(cfg, &[&p]);
        state.step(&mut [&mut p], &[&g], &names(1)).unwrap();
        // m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps)
        let expected: Vec<f64> = [1.0, -2.0, 0.5]
            .iter()
            .zip(g.data())
            .map(|(w, gi)| w - 0.01 * gi / (gi.abs() + 1e-8))
            .collect();
        for (a, b) in p.data().iter().zip(&expected) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!((p.data()[0] - 0.99).abs() < 1e-9);
        assert!((p.data()[1] + 1.99).abs() < 1e-9);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn zero_gradient_keeps_params_and_decays_moments() {
        let mut p = Tensor::vector(vec![1.0, 2.0]);
        let mut state = AdamState::new(AdamConfig::default(), &[&p]);
        state.step(&mut [&mut p], &[&Tensor::vector(vec![1.0, 1.0])], &names(1)).unwrap();
        let after_first = p.clone();
        let m1 = state.m[0].clone();
        state.step(&mut [&mut p], &[&Tensor::vector(vec![0.0, 0.0])], &names(1)).unwrap();
        for (a, b) in state.m[0].data().iter().zip(m1.data()) {
            assert!((a - 0.9 * b).abs() < 1e-15);
        }
        // parameters still move with nonzero momentum; with fresh state they do not
        assert_ne!(p, after_first);
        let mut q = Tensor::vector(vec![1.0, 2.0]);
        let mut fresh = AdamState::new(AdamConfig::default(), &[&q]);
        fresh.step(&mut [&mut q], &[&Tensor::vector(vec![0.0, 0.0])], &names(1)).unwrap();
        assert_eq!(q.data(), &[1.0, 2.0]);
        assert_eq!(fresh.step, 1);
    }

    #[test]
    fn non_finite_gradient_names_block() {
        let mut a = Tensor::vector(vec![1.0]);
        let mut b = Tensor::vector(vec![1.0]);
        let mut state = AdamState::new(AdamConfig::default(), &[&a, &b]);
        let err = state
            .step(
                &mut [&mut a, &mut b],
                &[&Tensor::vector(vec![0.0]), &Tensor::vector(vec![f64::NAN])],
                &["encoder.0.weight".into(), "decoder.0.bias".into()],
            )
            .unwrap_err();
        assert!(err.to_string().contains("decoder.0.bias"));
        assert_eq!(state.step, 0);
        assert_eq!(a.data(), &[1.0]);
    }

    #[test]
    fn identical_runs_are_bit_identical() {
        let run = || {
            let mut p = Tensor::vector(vec![0.1, 0.2, 0.3]);
            let mut s = AdamState::new(AdamConfig::default(), &[&p]);
            for k in 0..50 {
                let g = p.map(|w| (w * k as f64).sin());
                s.step(&mut [&mut p], &[&g], &names(1)).unwrap();
            }
            p.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn minimizes_quadratic() {
        let mut p = Tensor::vector(vec![3.0, -4.0]);
        let mut s = AdamState::new(AdamConfig::with_lr(0.05), &[&p]);
        for _ in 0..2000 {
            let g = p.map(|w| 2.0 * w);
            s.step(&mut [&mut p], &[&g], &names(1)).unwrap();
        }
        assert!(p.data().iter().all(|w| w.abs() < 1e-2));
    }
}
