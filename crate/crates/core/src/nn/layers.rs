use rand::Rng;

use super::graph::{Graph, Var};
use super::params::{Binding, ParamId, ParamSet};
use super::tensor::Tensor;

/// Whether a forward pass runs in training mode (batch statistics, dropout
/// masks drawn from the given generator) or inference mode.
pub enum Phase<'r, R: Rng> {
    Eval,
    Train(&'r mut R),
}

impl<R: Rng> Phase<'_, R> {
    pub fn is_train(&self) -> bool {
        matches!(self, Phase::Train(_))
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        params: &mut ParamSet,
        name: &str,
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_c * kernel * kernel;
        let weight = params.add_he(format!("{name}.weight"), &[out_c, in_c, kernel, kernel], fan_in, rng);
        let bias = params.add(format!("{name}.bias"), Tensor::zeros(&[out_c]), true);
        Conv2d {
            weight,
            bias,
            stride,
            pad,
        }
    }

    pub fn forward(&self, g: &mut Graph, bind: &mut Binding, x: Var) -> Var {
        let w = bind.var(g, self.weight);
        let b = bind.var(g, self.bias);
        g.conv2d(x, w, Some(b), self.stride, self.pad)
    }
}

#[derive(Clone, Debug)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Dense {
    pub fn new<R: Rng>(params: &mut ParamSet, name: &str, inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let weight = params.add_he(format!("{name}.weight"), &[outputs, inputs], inputs, rng);
        let bias = params.add(format!("{name}.bias"), Tensor::zeros(&[outputs]), true);
        Dense { weight, bias }
    }

    pub fn forward(&self, g: &mut Graph, bind: &mut Binding, x: Var) -> Var {
        let w = bind.var(g, self.weight);
        let b = bind.var(g, self.bias);
        g.linear(x, w, Some(b))
    }
}

/// Batch normalisation with Keras-style momentum:
/// `running = momentum * running + (1 - momentum) * batch`.
#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub momentum: f32,
    pub eps: f32,
}

impl BatchNorm2d {
    pub fn new(params: &mut ParamSet, name: &str, channels: usize, momentum: f32) -> Self {
        BatchNorm2d {
            gamma: params.add(format!("{name}.gamma"), Tensor::full(&[channels], 1.0), true),
            beta: params.add(format!("{name}.beta"), Tensor::zeros(&[channels]), true),
            running_mean: params.add(format!("{name}.running_mean"), Tensor::zeros(&[channels]), false),
            running_var: params.add(format!("{name}.running_var"), Tensor::full(&[channels], 1.0), false),
            momentum,
            eps: 1e-3,
        }
    }

    pub fn forward(&self, g: &mut Graph, bind: &mut Binding, x: Var, train: bool) -> Var {
        let gamma = bind.var(g, self.gamma);
        let beta = bind.var(g, self.beta);
        if train {
            let (y, mean, var) = g.batch_norm(x, gamma, beta, self.eps, None);
            let m = self.momentum;
            let blend = |old: &Tensor, new: &[f32]| {
                let data = old.data().iter().zip(new).map(|(o, n)| m * o + (1.0 - m) * n).collect();
                Tensor::from_vec(old.shape(), data)
            };
            let params = bind.params();
            let new_mean = blend(params.get(self.running_mean), &mean);
            let new_var = blend(params.get(self.running_var), &var);
            bind.push_update(self.running_mean, new_mean);
            bind.push_update(self.running_var, new_var);
            y
        } else {
            let params = bind.params();
            let mean = params.get(self.running_mean).data().to_vec();
            let var = params.get(self.running_var).data().to_vec();
            g.batch_norm(x, gamma, beta, self.eps, Some((&mean, &var))).0
        }
    }
}
