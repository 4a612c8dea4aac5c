//! Parameterized layers built on the graph engine.

use rand::Rng;

use crate::error::TensorError;
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor, Var};

/// Layer normalization epsilon.
pub const LN_EPS: f64 = 1e-5;

/// Anything that owns named parameter tensors.
///
/// Visit order is fixed per type and defines the canonical parameter order
/// used by checkpoints and the optimizer.
pub trait Module<T: Scalar> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>));

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t| n += t.numel());
        n
    }
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Moves gradients of every bound parameter from the graph into the module.
pub fn store_grads<T: Scalar, M: Module<T> + ?Sized>(g: &Graph<T>, module: &mut M) {
    module.visit_mut("", &mut |_, t| {
        if !g.store_grad(t) {
            t.zero_grad();
        }
    });
}

/// `y = x W + b` over the last dimension.
#[derive(Clone, Debug)]
pub struct Linear<T> {
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}

impl<T: Scalar> Linear<T> {
    /// Uniform init in ±1/sqrt(fan_in), zero bias.
    pub fn new<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, bias: bool, rng: &mut R) -> Self {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        Self {
            weight: Tensor::uniform(&[fan_in, fan_out], -bound, bound, rng).into_param(),
            bias: bias.then(|| Tensor::zeros(&[fan_out]).into_param()),
        }
    }

    pub fn zeros(fan_in: usize, fan_out: usize, bias: bool) -> Self {
        Self {
            weight: Tensor::zeros(&[fan_in, fan_out]).into_param(),
            bias: bias.then(|| Tensor::zeros(&[fan_out]).into_param()),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn fan_out(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn forward(&self, g: &mut Graph<T>, x: Var) -> Result<Var, TensorError> {
        let w = g.param(&self.weight);
        let b = self.bias.as_ref().map(|b| g.param(b));
        g.linear(x, w, b)
    }
}

impl<T: Scalar> Module<T> for Linear<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        f(&join(prefix, "weight"), &self.weight);
        if let Some(b) = &self.bias {
            f(&join(prefix, "bias"), b);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(&join(prefix, "bias"), b);
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

impl<T: Scalar> LayerNorm<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Tensor::ones(&[channels]).into_param(),
            beta: Tensor::zeros(&[channels]).into_param(),
        }
    }

    pub fn forward(&self, g: &mut Graph<T>, x: Var) -> Result<Var, TensorError> {
        let gamma = g.param(&self.gamma);
        let beta = g.param(&self.beta);
        g.layer_norm(x, gamma, beta, T::of(LN_EPS))
    }
}

impl<T: Scalar> Module<T> for LayerNorm<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        f(&join(prefix, "gamma"), &self.gamma);
        f(&join(prefix, "beta"), &self.beta);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        f(&join(prefix, "gamma"), &mut self.gamma);
        f(&join(prefix, "beta"), &mut self.beta);
    }
}

/// Depthwise `k×k` convolution with per-channel bias over an `H×W×C` map.
#[derive(Clone, Debug)]
pub struct DepthwiseConv<T> {
    pub kernel: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> DepthwiseConv<T> {
    pub fn new<R: Rng + ?Sized>(size: usize, channels: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (size * size) as f64;
        Self {
            kernel: Tensor::uniform(&[size, size, channels], -bound, bound, rng).into_param(),
            bias: Tensor::zeros(&[channels]).into_param(),
        }
    }

    pub fn forward(&self, g: &mut Graph<T>, x: Var) -> Result<Var, TensorError> {
        let k = g.param(&self.kernel);
        let b = g.param(&self.bias);
        let y = g.depthwise_conv2d(x, k)?;
        g.add(y, b)
    }
}

impl<T: Scalar> Module<T> for DepthwiseConv<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        f(&join(prefix, "kernel"), &self.kernel);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        f(&join(prefix, "kernel"), &mut self.kernel);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn linear_param_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for c in [1usize, 3, 16] {
            let l = Linear::<f32>::new(c, 2 * c, true, &mut rng);
            assert_eq!(l.num_params(), 2 * c * c + 2 * c);
        }
    }

    #[test]
    fn store_grads_fills_bound_params() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut lin = Linear::<f64>::new(3, 2, true, &mut rng);
        let mut g = Graph::new();
        let x = g.input(Tensor::ones(&[4, 3]));
        let y = lin.forward(&mut g, x).unwrap();
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        store_grads(&g, &mut lin);
        assert_eq!(lin.bias.as_ref().unwrap().grad().unwrap(), &[4.0, 4.0]);
        assert_eq!(lin.weight.grad().unwrap(), &[4.0; 6]);
    }
}
