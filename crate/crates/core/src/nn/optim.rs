use serde::{Deserialize, Serialize};

use super::{check_shapes, GradientSet, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub decay: f64,
    pub eps: f64,
    /// Per-network gradient norm threshold; 0 disables clipping.
    pub clip_norm: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            lr: 1e-4,
            decay: 0.99,
            eps: 1e-5,
            clip_norm: 40.0,
        }
    }
}

impl OptimizerConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            out.push(format!("optimizer.lr must be > 0, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.decay) {
            out.push(format!("optimizer.decay must be in [0, 1), got {}", self.decay));
        }
        if !(self.eps > 0.0) {
            out.push(format!("optimizer.eps must be > 0, got {}", self.eps));
        }
        if !(self.clip_norm >= 0.0) {
            out.push(format!("optimizer.clip_norm must be >= 0, got {}", self.clip_norm));
        }
        out
    }
}

/// Rescales `grads` so its global norm is at most `threshold`.
/// Returns the norm before clipping.
pub fn clip_by_norm(grads: &mut GradientSet, threshold: f64) -> f64 {
    let norm = grads.norm();
    if threshold > 0.0 && norm > threshold {
        grads.scale(threshold / norm);
    }
    norm
}

/// Running mean of squared gradients, one buffer per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct RmsPropState {
    pub mean_square: Vec<Tensor>,
}

impl RmsPropState {
    pub fn new(params: &[Tensor]) -> Self {
        RmsPropState {
            mean_square: params
                .iter()
                .map(|t| Tensor::zeros(format!("{}.ms", t.name), t.shape.clone()))
                .collect(),
        }
    }

    /// `ms <- decay*ms + (1-decay)*g^2; p <- p - lr*g/sqrt(ms + eps)`,
    /// after clipping a copy of `grads`.
    pub fn apply(&mut self, params: &mut [Tensor], grads: &GradientSet, cfg: &OptimizerConfig) -> Result<()> {
        check_shapes(params, &grads.tensors)?;
        check_shapes(&self.mean_square, &grads.tensors)?;
        grads.check_finite()?;
        let norm = grads.norm();
        let scale = if cfg.clip_norm > 0.0 && norm > cfg.clip_norm {
            cfg.clip_norm / norm
        } else {
            1.0
        };
        for ((p, g), ms) in params.iter_mut().zip(&grads.tensors).zip(&mut self.mean_square) {
            for ((w, &gi), m) in p.data.iter_mut().zip(&g.data).zip(&mut ms.data) {
                let gi = gi * scale;
                *m = cfg.decay * *m + (1.0 - cfg.decay) * gi * gi;
                *w -= cfg.lr * gi / (*m + cfg.eps).sqrt();
            }
        }
        if params.iter().any(|t| t.data.iter().any(|w| !w.is_finite())) {
            return Err(Error::NonFinite("parameters after update".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(value: f64) -> Vec<Tensor> {
        vec![Tensor {
            name: "w".into(),
            shape: vec![1],
            data: vec![value],
        }]
    }

    #[test]
    fn single_step_matches_closed_form() {
        let cfg = OptimizerConfig::default();
        let mut params = one(0.5);
        let mut st = RmsPropState::new(&params);
        let g = GradientSet { tensors: one(2.0) };
        st.apply(&mut params, &g, &cfg).unwrap();
        // ms = 0.01 * 4 = 0.04; step = 1e-4 * 2 / sqrt(0.04 + 1e-5)
        let expected = 0.5 - 1e-4 * 2.0 / (0.04f64 + 1e-5).sqrt();
        assert_eq!(params[0].data[0], expected);
        assert!((params[0].data[0] - 0.499000125).abs() < 1e-8);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut params = one(0.5);
        let mut st = RmsPropState::new(&params);
        let g = GradientSet { tensors: one(0.0) };
        st.apply(&mut params, &g, &OptimizerConfig::default()).unwrap();
        assert_eq!(params[0].data[0], 0.5);
    }

    #[test]
    fn clipping_halves_double_norm() {
        let mut g = GradientSet {
            tensors: vec![Tensor {
                name: "w".into(),
                shape: vec![2],
                data: vec![48.0, 64.0],
            }],
        };
        let before = clip_by_norm(&mut g, 40.0);
        assert_eq!(before, 80.0);
        assert_eq!(g.tensors[0].data, vec![24.0, 32.0]);
    }

    #[test]
    fn rejects_bad_gradients() {
        let mut params = one(0.5);
        let mut st = RmsPropState::new(&params);
        let nan = GradientSet { tensors: one(f64::NAN) };
        assert!(matches!(
            st.apply(&mut params, &nan, &OptimizerConfig::default()),
            Err(Error::NonFinite(_))
        ));
        let wrong = GradientSet {
            tensors: vec![Tensor::zeros("w", vec![2])],
        };
        assert!(matches!(
            st.apply(&mut params, &wrong, &OptimizerConfig::default()),
            Err(Error::Shape(_))
        ));
        assert_eq!(params[0].data[0], 0.5);
    }
}
