use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment buffers, one per parameter tensor.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update. Non-finite gradients abort without
    /// touching the parameters.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]], hp: &AdamConfig) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} parameters, {} gradients",
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != g.len() {
                return Err(Error::ShapeMismatch(format!("parameter {i}: {} vs {}", p.len(), g.len())));
            }
            if let Some(j) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::Diverged(format!(
                    "non-finite gradient at parameter {i} element {j} (step {})",
                    self.step + 1
                )));
            }
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = self.m.clone();
        } else if self.m.len() != params.len() || self.m.iter().zip(params.iter()).any(|(m, p)| m.len() != p.len()) {
            return Err(Error::ShapeMismatch("parameter layout changed between steps".into()));
        }

        self.step += 1;
        let bc1 = 1.0 - hp.beta1.powi(self.step as i32);
        let bc2 = 1.0 - hp.beta2.powi(self.step as i32);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            for j in 0..p.len() {
                m[j] = hp.beta1 * m[j] + (1.0 - hp.beta1) * g[j];
                v[j] = hp.beta2 * v[j] + (1.0 - hp.beta2) * g[j] * g[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                p[j] -= hp.lr * m_hat / (v_hat.sqrt() + hp.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = vec![1.0, -2.0];
        let mut st = AdamState::new();
        for _ in 0..3 {
            st.step(&mut [&mut p], &[&[0.0, 0.0]], &AdamConfig::default()).unwrap();
        }
        assert_eq!(p, vec![1.0, -2.0]);
        assert_eq!(st.step_count(), 3);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = vec![0.5];
        let mut st = AdamState::new();
        st.step(&mut [&mut p], &[&[1.0]], &AdamConfig::default()).unwrap();
        // m_hat = v_hat = 1, so the step is lr / (1 + eps)
        let expected = 0.5 - 1e-3 / (1.0 + 1e-8);
        assert!((p[0] - expected).abs() < 1e-15);
        assert!((0.5 - p[0] - 1e-3).abs() < 1e-10);
    }

    #[test]
    fn matches_hand_rolled_two_steps() {
        let hp = AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        };
        let mut p = vec![1.0];
        let mut st = AdamState::new();
        st.step(&mut [&mut p], &[&[2.0]], &hp).unwrap();
        st.step(&mut [&mut p], &[&[-1.0]], &hp).unwrap();

        let (mut m, mut v, mut x) = (0.0f64, 0.0f64, 1.0f64);
        for (t, g) in [(1, 2.0f64), (2, -1.0)] {
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            x -= 0.1 * (m / (1.0 - 0.9f64.powi(t))) / ((v / (1.0 - 0.999f64.powi(t))).sqrt() + 1e-8);
        }
        assert!((p[0] - x).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let mut p = vec![1.0];
        let mut st = AdamState::new();
        let r = st.step(&mut [&mut p], &[&[f64::NAN]], &AdamConfig::default());
        assert!(matches!(r, Err(Error::Diverged(_))));
        assert_eq!(p, vec![1.0]);
    }
}
