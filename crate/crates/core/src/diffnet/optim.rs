use serde::{Deserialize, Serialize};

use super::{Grads, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Adam with bias correction. Moment buffers live here; the step counter
/// lives in the [`ParamStore`] so it is checkpointed with the weights.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &ParamStore) -> Self {
        Self::with_betas(params, 0.9, 0.999, 1e-8)
    }

    pub fn with_betas(params: &ParamStore, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros: Vec<Tensor> = params
            .iter()
            .map(|(_, t)| Tensor::zeros(t.rows(), t.cols()))
            .collect();
        Self {
            beta1,
            beta2,
            eps,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Applies one update. Parameters without a gradient entry are treated
    /// as having zero gradient (their moments still decay).
    pub fn step(&mut self, params: &mut ParamStore, grads: &Grads, lr: f64) -> Result<()> {
        if grads.len() > params.len() {
            return Err(Error::UnknownParameter(format!(
                "gradient index {}",
                grads.len() - 1
            )));
        }
        for (id, g) in grads.iter() {
            if !g.all_finite() {
                return Err(Error::NonFiniteGradient(params.name(id).to_string()));
            }
            if g.shape() != params.get(id).shape() {
                return Err(Error::ShapeMismatch {
                    node: params.name(id).to_string(),
                    detail: format!(
                        "gradient {:?} vs parameter {:?}",
                        g.shape(),
                        params.get(id).shape()
                    ),
                });
            }
        }
        params.bump_step();
        let t = params.step() as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            let i = id.index();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            match grads.get(id) {
                Some(g) => {
                    for ((mi, vi), gi) in m.iter_mut().zip(v.iter_mut()).zip(g.data()) {
                        *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                        *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                    }
                }
                None => {
                    if m.iter().all(|&x| x == 0.0) && v.iter().all(|&x| x == 0.0) {
                        continue;
                    }
                    m.iter_mut().for_each(|x| *x *= self.beta1);
                    v.iter_mut().for_each(|x| *x *= self.beta2);
                }
            }
            let p = params.get_mut(id).data_mut();
            for ((pi, mi), vi) in p.iter_mut().zip(m.iter()).zip(v.iter()) {
                let mhat = mi / bc1;
                let vhat = vi / bc2;
                *pi -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Linear warmup from 0 to `base` over the first `warmup` fraction of
/// `total_steps`, then linear decay to 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearSchedule {
    pub base: f64,
    pub warmup_proportion: f64,
    pub total_steps: u64,
}

impl LinearSchedule {
    pub fn lr(&self, step: u64) -> f64 {
        let total = self.total_steps.max(1) as f64;
        let warm = (self.warmup_proportion * total).max(1.0);
        let s = step as f64;
        if s < warm {
            self.base * (s + 1.0) / warm
        } else {
            let rest = (total - warm).max(1.0);
            (self.base * (1.0 - (s - warm) / rest)).max(self.base * 0.01)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_grads_leave_params() {
        let mut ps = ParamStore::new();
        let id = ps.add("x", Tensor::row(&[1.0, 2.0])).unwrap();
        let mut adam = Adam::new(&ps);
        let mut g = Grads::zeros_like(&ps);
        g.set(id, Tensor::zeros(1, 2));
        adam.step(&mut ps, &g, 0.1).unwrap();
        assert_eq!(ps.get(id).data(), &[1.0, 2.0]);
        assert_eq!(ps.step(), 1);
    }

    #[test]
    fn first_step_is_minus_lr() {
        let mut ps = ParamStore::new();
        let id = ps.add("x", Tensor::scalar(0.0)).unwrap();
        let mut adam = Adam::new(&ps);
        let mut g = Grads::zeros_like(&ps);
        g.set(id, Tensor::scalar(1.0));
        adam.step(&mut ps, &g, 0.1).unwrap();
        // m̂ = 1, v̂ = 1 → Δ = −0.1·1/(1 + 1e-8)
        assert!((ps.get(id).item() + 0.1).abs() < 1e-8);
    }

    #[test]
    fn non_finite_gradient_names_param() {
        let mut ps = ParamStore::new();
        let id = ps.add("weights", Tensor::scalar(0.0)).unwrap();
        let mut adam = Adam::new(&ps);
        let mut g = Grads::zeros_like(&ps);
        g.set(id, Tensor::scalar(f64::NAN));
        match adam.step(&mut ps, &g, 0.1) {
            Err(Error::NonFiniteGradient(name)) => assert_eq!(name, "weights"),
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(ps.step(), 0);
    }

    #[test]
    fn schedule_warms_then_decays() {
        let s = LinearSchedule {
            base: 1e-3,
            warmup_proportion: 0.1,
            total_steps: 100,
        };
        assert!(s.lr(0) < s.lr(5));
        assert!((s.lr(9) - 1e-3).abs() < 1e-15);
        assert!(s.lr(50) < 1e-3);
        assert!(s.lr(99) > 0.0);
    }
}
