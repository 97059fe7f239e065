//! First-order optimisers over flat parameter lists.

use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

/// Plain gradient descent or Adam, with optional global-norm clipping.
#[derive(Clone, Debug)]
pub struct Optimizer<T> {
    kind: OptimizerKind,
    lr: f64,
    clip: Option<f64>,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: i32,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(kind: OptimizerKind, lr: f64, clip: Option<f64>) -> Self {
        Self {
            kind,
            lr,
            clip,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> i32 {
        self.step
    }

    /// Global L2 norm of a gradient list.
    pub fn grad_norm(grads: &[Tensor<T>]) -> f64 {
        grads
            .iter()
            .flat_map(|g| g.data().iter())
            .map(|x| x.as_f64() * x.as_f64())
            .sum::<f64>()
            .sqrt()
    }

    /// Applies one update. `params` and `grads` pair up by index.
    pub fn update(&mut self, params: &mut [&mut Tensor<T>], grads: &[Tensor<T>]) {
        debug_assert_eq!(params.len(), grads.len());
        self.step += 1;
        let mut factor = 1.0;
        if let Some(c) = self.clip {
            let n = Self::grad_norm(grads);
            if n > c {
                factor = c / n;
            }
        }
        let factor = T::of(factor);
        match self.kind {
            OptimizerKind::Sgd => {
                let lr = T::of(self.lr);
                for (p, g) in params.iter_mut().zip(grads) {
                    for (x, &d) in p.data_mut().iter_mut().zip(g.data()) {
                        *x -= lr * factor * d;
                    }
                }
            }
            OptimizerKind::Adam => {
                if self.m.is_empty() {
                    self.m = grads.iter().map(|g| vec![T::zero(); g.len()]).collect();
                    self.v = self.m.clone();
                }
                let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
                let c1 = T::of(1.0 - self.beta1.powi(self.step));
                let c2 = T::of(1.0 - self.beta2.powi(self.step));
                let (lr, eps) = (T::of(self.lr), T::of(self.eps));
                for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
                    let (m, v) = (&mut self.m[i], &mut self.v[i]);
                    for (j, (x, &d)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                        let d = d * factor;
                        m[j] = b1 * m[j] + (T::one() - b1) * d;
                        v[j] = b2 * v[j] + (T::one() - b2) * d * d;
                        let mh = m[j] / c1;
                        let vh = v[j] / c2;
                        *x -= lr * mh / (vh.sqrt() + eps);
                    }
                }
            }
        }
    }
}
