//! Decoupled-weight-decay Adam with a linear decay schedule and global-norm
//! clipping.

use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::numerics::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient norm ceiling; 0 disables clipping.
    pub clip_norm: f64,
    pub total_steps: usize,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 5e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            clip_norm: 1.0,
            total_steps: 2000,
        }
    }
}

impl AdamWConfig {
    /// `lr · max(0, 1 − step / total_steps)` for the update that follows
    /// `step` completed updates.
    pub fn lr_at(&self, step: usize) -> f64 {
        if self.total_steps == 0 {
            return 0.0;
        }
        self.lr * (1.0 - step as f64 / self.total_steps as f64).max(0.0)
    }
}

/// First and second moments per parameter. Frozen parameters keep empty
/// moment buffers.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamWState {
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl AdamWState {
    pub fn new(params: &[Tensor<f32>]) -> Self {
        Self {
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
        }
    }
}

/// Rescale `grads` so their joint L2 norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut [Option<Vec<f32>>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flatten()
        .flat_map(|g| g.iter())
        .map(|&x| (x as f64) * (x as f64))
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = (max_norm / norm) as f32;
        grads.iter_mut().flatten().for_each(|g| g.iter_mut().for_each(|x| *x *= s));
    }
    norm
}

/// One update of every parameter that has a gradient. `step` is the number
/// of updates already applied; parameters with `None` are left untouched,
/// weight decay included.
pub fn optimizer_step(
    params: &mut [Tensor<f32>],
    names: &[String],
    grads: &[Option<Vec<f32>>],
    state: &mut AdamWState,
    step: usize,
    cfg: &AdamWConfig,
) -> Result<(), TrainError> {
    for (i, g) in grads.iter().enumerate() {
        if let Some(g) = g {
            if let Some(c) = g.iter().position(|x| !x.is_finite()) {
                return Err(TrainError::NonFiniteGrad {
                    param: names[i].clone(),
                    coord: c,
                });
            }
        }
    }
    let lr = cfg.lr_at(step);
    let t = (step + 1) as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let (b1, b2) = (cfg.beta1 as f32, cfg.beta2 as f32);
    for (i, g) in grads.iter().enumerate() {
        let Some(g) = g else { continue };
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        let p = params[i].data_mut();
        for j in 0..p.len() {
            m[j] = b1 * m[j] + (1.0 - b1) * g[j];
            v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
            let mhat = m[j] as f64 / bc1;
            let vhat = v[j] as f64 / bc2;
            let upd = mhat / (vhat.sqrt() + cfg.eps) + cfg.weight_decay * p[j] as f64;
            p[j] = (p[j] as f64 - lr * upd) as f32;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(x: f32) -> Vec<Tensor<f32>> {
        vec![Tensor::new(vec![1], vec![x]).unwrap()]
    }

    fn names() -> Vec<String> {
        vec!["w".into()]
    }

    #[test]
    fn zero_grad_no_decay_is_fixed_point() {
        let mut p = scalar(0.7);
        let mut st = AdamWState::new(&p);
        let cfg = AdamWConfig {
            lr: 0.1,
            weight_decay: 0.0,
            total_steps: 10,
            ..AdamWConfig::default()
        };
        optimizer_step(&mut p, &names(), &[Some(vec![0.0])], &mut st, 0, &cfg).unwrap();
        assert_eq!(p[0].data(), &[0.7]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = scalar(0.0);
        let mut st = AdamWState::new(&p);
        let cfg = AdamWConfig {
            lr: 0.1,
            weight_decay: 0.0,
            total_steps: 1_000_000,
            ..AdamWConfig::default()
        };
        optimizer_step(&mut p, &names(), &[Some(vec![1.0])], &mut st, 0, &cfg).unwrap();
        assert!((p[0].data()[0] + 0.1).abs() < 1e-6);
    }

    #[test]
    fn schedule_endpoint_freezes() {
        let mut p = scalar(0.5);
        let mut st = AdamWState::new(&p);
        let cfg = AdamWConfig {
            lr: 0.1,
            total_steps: 4,
            ..AdamWConfig::default()
        };
        optimizer_step(&mut p, &names(), &[Some(vec![1.0])], &mut st, 4, &cfg).unwrap();
        assert_eq!(p[0].data(), &[0.5]);
    }

    #[test]
    fn schedule_is_linear() {
        let cfg = AdamWConfig {
            lr: 1e-3,
            total_steps: 8,
            ..AdamWConfig::default()
        };
        for s in 0..=10 {
            let expect = 1e-3 * (1.0 - s as f64 / 8.0).max(0.0);
            assert_eq!(cfg.lr_at(s), expect);
        }
    }

    #[test]
    fn frozen_parameter_untouched_even_with_decay() {
        let mut p = scalar(0.5);
        let mut st = AdamWState::new(&p);
        let cfg = AdamWConfig {
            lr: 0.1,
            weight_decay: 0.5,
            ..AdamWConfig::default()
        };
        optimizer_step(&mut p, &names(), &[None], &mut st, 0, &cfg).unwrap();
        assert_eq!(p[0].data(), &[0.5]);
    }

    #[test]
    fn non_finite_grad_names_parameter() {
        let mut p = scalar(0.5);
        let mut st = AdamWState::new(&p);
        let err = optimizer_step(
            &mut p,
            &names(),
            &[Some(vec![f32::NAN])],
            &mut st,
            0,
            &AdamWConfig::default(),
        )
        .unwrap_err();
        assert!(err.to_string().contains('w'));
        assert_eq!(p[0].data(), &[0.5]);
    }

    #[test]
    fn clipping_caps_global_norm() {
        let mut g = vec![Some(vec![3.0f32]), None, Some(vec![4.0])];
        let n = clip_global_norm(&mut g, 1.0);
        assert!((n - 5.0).abs() < 1e-12);
        assert!((g[0].as_ref().unwrap()[0] - 0.6).abs() < 1e-6);
        assert!((g[2].as_ref().unwrap()[0] - 0.8).abs() < 1e-6);
        let mut small = vec![Some(vec![0.3f32])];
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small[0].as_ref().unwrap()[0], 0.3);
    }
}
