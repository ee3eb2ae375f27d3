use super::params::ParamSet;
use super::tensor::Tensor;

/// Adaptive-moment optimiser over one [`ParamSet`]. Non-trainable entries
/// and entries without a gradient are left untouched.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    step: i32,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &ParamSet, lr: f32, beta1: f32, beta2: f32) -> Self {
        let zeros: Vec<Tensor> = params.entries().iter().map(|e| Tensor::zeros(e.value.shape())).collect();
        Adam {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps_taken(&self) -> i32 {
        self.step
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &[Option<Tensor>]) {
        assert_eq!(grads.len(), params.len(), "one gradient slot per parameter");
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step);
        let bc2 = 1.0 - self.beta2.powi(self.step);
        for (k, (entry, grad)) in params.entries_mut().iter_mut().zip(grads).enumerate() {
            let Some(grad) = grad else { continue };
            if !entry.trainable {
                continue;
            }
            let m = self.m[k].data_mut();
            let v = self.v[k].data_mut();
            for (((p, &g), mi), vi) in entry.value.data_mut().iter_mut().zip(grad.data()).zip(m).zip(v) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * g;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * g * g;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *p -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}
