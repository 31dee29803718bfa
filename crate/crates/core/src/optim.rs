//! AdamW, the warmup/linear-decay schedule and global-norm clipping.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    /// Number of updates applied so far.
    pub t: u64,
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
}

impl AdamW {
    pub fn new<'a>(cfg: AdamWConfig, params: impl IntoIterator<Item = &'a Arc<Matrix>>) -> Self {
        let (m, v) = params
            .into_iter()
            .map(|p| (Matrix::zeros(p.rows(), p.cols()), Matrix::zeros(p.rows(), p.cols())))
            .unzip();
        Self { cfg, t: 0, m, v }
    }

    pub fn step(&mut self, params: Vec<&mut Arc<Matrix>>, grads: &[Matrix], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Invalid(format!(
                "optimizer tracks {} tensors, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.t += 1;
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for (i, p) in params.into_iter().enumerate() {
            let g = grads[i].data();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let w = Arc::make_mut(p).data_mut();
            for j in 0..w.len() {
                m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
                v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                w[j] -= lr * (mh / (vh.sqrt() + eps) + weight_decay * w[j]);
            }
        }
        Ok(())
    }
}

/// Linear warmup from 0 to `peak` over `warmup` steps, then linear decay to 0 at `total`.
pub fn lr_at(step: usize, total: usize, warmup: usize, peak: f64) -> f64 {
    if total == 0 {
        return 0.0;
    }
    if step < warmup {
        return peak * step as f64 / warmup as f64;
    }
    let rest = total.saturating_sub(warmup).max(1);
    peak * (total.saturating_sub(step)) as f64 / rest as f64
}

/// Scales gradients so their global L2 norm is at most `max_norm`; returns the pre-clip norm.
pub fn clip_grad_norm(grads: &mut [Matrix], max_norm: f64) -> f64 {
    let norm = grads.iter().map(Matrix::sum_sq).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_endpoints() {
        assert_eq!(lr_at(0, 100, 10, 1e-3), 0.0);
        assert!((lr_at(10, 100, 10, 1e-3) - 1e-3).abs() < 1e-15);
        assert_eq!(lr_at(100, 100, 10, 1e-3), 0.0);
        assert!(lr_at(99, 100, 10, 1e-3) < 2e-5);
        assert_eq!(lr_at(5, 10, 0, 1.0), 0.5);
    }

    #[test]
    fn clipping_caps_the_norm() {
        let mut g = vec![Matrix::from_vec(1, 2, vec![3.0, 4.0])];
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((g[0].data()[0] - 0.6).abs() < 1e-12);
        let mut small = vec![Matrix::from_vec(1, 1, vec![0.5])];
        clip_grad_norm(&mut small, 1.0);
        assert_eq!(small[0].data()[0], 0.5);
    }

    #[test]
    fn adamw_minimizes_a_quadratic() {
        let mut p = Arc::new(Matrix::from_vec(1, 2, vec![3.0, -2.0]));
        let mut opt = AdamW::new(AdamWConfig::default(), [&p]);
        for _ in 0..2000 {
            let g = p.scale(2.0);
            opt.step(vec![&mut p], &[g], 0.01).unwrap();
        }
        assert!(p.max_abs() < 1e-2, "{:?}", p.data());
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = Arc::new(Matrix::from_vec(1, 1, vec![1.0]));
        let mut opt = AdamW::new(AdamWConfig::default(), [&p]);
        opt.step(vec![&mut p], &[Matrix::from_vec(1, 1, vec![0.3])], 0.1).unwrap();
        assert!((p.data()[0] - 0.9).abs() < 1e-6);
    }
}
