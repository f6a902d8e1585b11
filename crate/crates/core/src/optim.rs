//! First-order optimizers over flat parameter vectors.

use serde::{Deserialize, Serialize};

use crate::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

/// Stateful optimizer. `step` *ascends* the objective whose gradient it is given.
#[derive(Debug, Clone)]
pub struct Optimizer<T> {
    kind: OptimizerKind,
    lr: T,
    m: Vec<T>,
    v: Vec<T>,
    t: i32,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

impl<T: Scalar> Optimizer<T> {
    pub fn new(kind: OptimizerKind, n_params: usize, lr: T) -> Self {
        let state = if kind == OptimizerKind::Adam { n_params } else { 0 };
        Self {
            kind,
            lr,
            m: vec![T::zero(); state],
            v: vec![T::zero(); state],
            t: 0,
        }
    }

    pub fn learning_rate(&self) -> T {
        self.lr
    }

    pub fn set_learning_rate(&mut self, lr: T) {
        self.lr = lr;
    }

    pub fn step(&mut self, params: &mut [T], grad: &[T]) {
        assert_eq!(params.len(), grad.len());
        self.t += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, &g) in params.iter_mut().zip(grad) {
                    *p = *p + self.lr * g;
                }
            }
            OptimizerKind::Adam => {
                assert_eq!(self.m.len(), params.len());
                let (b1, b2) = (T::lit(BETA1), T::lit(BETA2));
                let c1 = T::one() - b1.powi(self.t);
                let c2 = T::one() - b2.powi(self.t);
                for i in 0..params.len() {
                    let g = grad[i];
                    self.m[i] = b1 * self.m[i] + (T::one() - b1) * g;
                    self.v[i] = b2 * self.v[i] + (T::one() - b2) * g * g;
                    let mh = self.m[i] / c1;
                    let vh = self.v[i] / c2;
                    params[i] = params[i] + self.lr * mh / (vh.sqrt() + T::lit(EPS));
                }
            }
        }
    }
}

/// Rescale `grad` in place to Euclidean norm at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_grad_norm<T: Scalar>(grad: &mut [T], max_norm: T) -> T {
    let norm = grad.iter().map(|g| *g * *g).sum::<T>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grad.iter_mut().for_each(|g| *g = *g * s);
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_ascends_concave_quadratic() {
        let mut p = vec![3.0f64];
        let mut opt = Optimizer::new(OptimizerKind::Sgd, 1, 0.1);
        for _ in 0..200 {
            let g = vec![-2.0 * (p[0] - 1.0)];
            opt.step(&mut p, &g);
        }
        assert!((p[0] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn adam_first_step_is_lr_times_sign() {
        let mut p = vec![0.0f64, 0.0];
        let mut opt = Optimizer::new(OptimizerKind::Adam, 2, 0.01);
        opt.step(&mut p, &[5.0, -0.2]);
        assert!((p[0] - 0.01).abs() < 1e-8);
        assert!((p[1] + 0.01).abs() < 1e-7);
    }

    #[test]
    fn clipping() {
        let mut g = vec![3.0f64, 4.0];
        assert_eq!(clip_grad_norm(&mut g, 10.0), 5.0);
        assert_eq!(g, vec![3.0, 4.0]);
        clip_grad_norm(&mut g, 1.0);
        assert!((g[0] - 0.6).abs() < 1e-15 && (g[1] - 0.8).abs() < 1e-15);
    }
}
