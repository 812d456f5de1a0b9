use serde::{Deserialize, Serialize};

use super::graph::{Gradients, ParamStore};
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Linear warm-up to `base_lr` over `warmup_epochs`, constant afterwards.
pub fn warmup_schedule(epoch: usize, base_lr: f64, warmup_epochs: usize) -> f64 {
    if warmup_epochs == 0 {
        return base_lr;
    }
    base_lr * ((epoch + 1) as f64 / warmup_epochs as f64).min(1.0)
}

/// AdamW with decoupled weight decay.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update of every parameter. Moments are kept in 32-bit regardless
    /// of `T`.
    pub fn step<T: Scalar>(&mut self, params: &mut ParamStore<T>, grads: &Gradients<T>, lr: f64) -> Result<()> {
        if grads.tensors.len() != params.len() {
            return Err(Error::Shape(format!(
                "{} gradients for {} parameters",
                grads.tensors.len(),
                params.len()
            )));
        }
        if self.m.is_empty() {
            self.m = (0..params.len()).map(|i| vec![0.0; params.get(i).len()]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() {
            return Err(Error::Shape("optimizer state does not match parameters".into()));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for i in 0..params.len() {
            let g: &Tensor<T> = grads.get(i);
            let p = params.get_mut(i);
            if g.shape() != p.shape() || self.m[i].len() != p.len() {
                return Err(Error::Shape(format!(
                    "parameter {i}: gradient {:?} vs parameter {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, x) in p.data_mut().iter_mut().enumerate() {
                let gj = g.data()[j].to_f64().unwrap_or(f64::NAN);
                let mj = self.beta1 * m[j] as f64 + (1.0 - self.beta1) * gj;
                let vj = self.beta2 * v[j] as f64 + (1.0 - self.beta2) * gj * gj;
                m[j] = mj as f32;
                v[j] = vj as f32;
                let mhat = mj / bc1;
                let vhat = vj / bc2;
                let xv = x.to_f64().unwrap_or(f64::NAN);
                let updated = xv - lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * xv);
                *x = T::lit(updated);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Graph;

    #[test]
    fn warmup_endpoints() {
        assert!((warmup_schedule(14, 1e-4, 15) - 1e-4).abs() < 1e-18);
        assert!((warmup_schedule(0, 1e-4, 15) - 1e-4 / 15.0).abs() < 1e-18);
        assert_eq!(warmup_schedule(40, 1e-4, 15), 1e-4);
    }

    #[test]
    fn zero_gradient_without_decay_is_fixed_point() {
        let mut store = ParamStore::<f32>::new();
        store.add("w", Tensor::matrix(1, 3, vec![0.5, -1.0, 2.0]));
        let before = store.clone();
        let grads = Gradients {
            tensors: vec![Tensor::zeros(&[1, 3])],
        };
        let mut opt = AdamW::new(0.0);
        for _ in 0..5 {
            opt.step(&mut store, &grads, 1e-2).unwrap();
        }
        assert_eq!(store, before);
    }

    #[test]
    fn one_step_on_square_decreases() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("x", Tensor::matrix(1, 1, vec![1.0]));
        let mut g = Graph::new();
        let x = g.param(&store, id);
        let zero = g.leaf(Tensor::matrix(1, 1, vec![0.0]));
        // huber with a large delta is x²/2; its gradient matches x² up to scale
        let loss = g.huber(x, zero, 10.0).unwrap();
        let grads = g.backward(loss, &store).unwrap();
        let mut opt = AdamW::new(0.01);
        opt.step(&mut store, &grads, 0.1).unwrap();
        let x1 = store.get(id).data()[0];
        assert!(x1 * x1 < 1.0, "{x1}");
    }
}
