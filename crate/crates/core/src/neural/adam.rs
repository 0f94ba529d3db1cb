use serde::{Deserialize, Serialize};

use super::Parameters;
use crate::error::{CalmError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay, applied as `θ ← θ(1 − lr·wd)` before the moment update.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// First and second moment estimates, flattened in `Parameters::slices` order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub t: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamState {
    pub fn new<P: Parameters>(config: AdamConfig, params: &P) -> Self {
        let n = params.len();
        Self {
            config,
            t: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    /// One AdamW step. Non-finite gradients abort before anything is modified.
    pub fn step<P: Parameters>(&mut self, params: &mut P, grads: &P) -> Result<()> {
        if grads.len() != self.m.len() || params.len() != self.m.len() {
            return Err(CalmError::InvalidArgument(
                "optimizer state does not match the parameter set".into(),
            ));
        }
        if !grads.all_finite() {
            return Err(CalmError::NonFinite(format!(
                "non-finite gradient at optimizer step {}",
                self.t + 1
            )));
        }
        let c = self.config;
        self.t += 1;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        let decay = 1.0 - c.lr * c.weight_decay;
        let mut k = 0;
        for (p, g) in params.slices_mut().into_iter().zip(grads.slices()) {
            for (pi, &gi) in p.iter_mut().zip(g) {
                let m = &mut self.m[k];
                let v = &mut self.v[k];
                *m = c.beta1 * *m + (1.0 - c.beta1) * gi;
                *v = c.beta2 * *v + (1.0 - c.beta2) * gi * gi;
                *pi *= decay;
                *pi -= c.lr * (*m / bc1) / ((*v / bc2).sqrt() + c.eps);
                k += 1;
            }
        }
        if !params.all_finite() {
            return Err(CalmError::NonFinite(format!(
                "parameters became non-finite at optimizer step {}",
                self.t
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::{Layer, MlpParams};
    use nalgebra::{DMatrix, DVector};

    fn params(vals: &[f64]) -> MlpParams {
        MlpParams {
            layers: vec![Layer {
                w: DMatrix::from_column_slice(vals.len(), 1, vals),
                b: DVector::zeros(1),
            }],
        }
    }

    #[test]
    fn zero_lr_leaves_parameters_unchanged() {
        let mut p = params(&[1.0, -2.0, 3.0]);
        let before = p.clone();
        let mut s = AdamState::new(AdamConfig { lr: 0.0, ..Default::default() }, &p);
        s.step(&mut p, &params(&[0.3, 0.1, -5.0])).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_moves_by_lr_against_the_sign() {
        let mut p = params(&[1.0, 1.0]);
        let mut s = AdamState::new(AdamConfig::default(), &p);
        s.step(&mut p, &params(&[4.0, -0.01])).unwrap();
        let w = &p.layers[0].w;
        assert!((w[0] - (1.0 - 1e-3)).abs() < 1e-9);
        assert!((w[1] - (1.0 + 1e-3)).abs() < 1e-6);
    }

    #[test]
    fn decay_is_applied_before_the_moment_update() {
        let cfg = AdamConfig { lr: 0.1, weight_decay: 0.5, ..Default::default() };
        let mut p = params(&[2.0]);
        let mut s = AdamState::new(cfg, &p);
        s.step(&mut p, &params(&[0.0])).unwrap();
        assert!((p.layers[0].w[0] - 2.0 * 0.95).abs() < 1e-15);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut p = params(&[5.0, -3.0]);
        let mut s = AdamState::new(AdamConfig { lr: 0.05, ..Default::default() }, &p);
        for _ in 0..3000 {
            let g = params(&[2.0 * p.layers[0].w[0], 2.0 * p.layers[0].w[1]]);
            s.step(&mut p, &g).unwrap();
        }
        assert!(p.layers[0].w.amax() < 1e-3);
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let mut p = params(&[1.0]);
        let before = p.clone();
        let mut s = AdamState::new(AdamConfig::default(), &p);
        let err = s.step(&mut p, &params(&[f64::NAN])).unwrap_err();
        assert!(matches!(err, CalmError::NonFinite(_)));
        assert_eq!(p, before);
    }
}
