//! Affine layers and ReLU MLPs with explicit forward caches and hand-written backward passes.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::{affine, affine_transpose_acc, outer_acc, Tensor};

/// Anything that owns trainable tensors.
///
/// Visiting order is fixed; checkpoints, optimizers and gradient checks rely on it.
pub trait Parameterized {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor));

    fn parameter_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t| n += t.len());
        n
    }

    fn zero_(&mut self) {
        self.visit_mut("", &mut |_, t| t.fill(0.0));
    }

    /// All parameters concatenated in visiting order.
    fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.parameter_count());
        self.visit("", &mut |_, t| out.extend_from_slice(t.data()));
        out
    }

    /// Inverse of [`Parameterized::to_flat`]; panics on a length mismatch.
    fn load_flat(&mut self, flat: &[f64]) {
        let mut at = 0;
        self.visit_mut("", &mut |_, t| {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[at..at + n]);
            at += n;
        });
        assert_eq!(at, flat.len(), "flat parameter vector has the wrong length");
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    /// `out × in`, row-major.
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn zeros(n_in: usize, n_out: usize) -> Self {
        Linear {
            weight: Tensor::zeros(&[n_out, n_in]),
            bias: Tensor::zeros(&[n_out]),
        }
    }

    /// Uniform in `±1/√fan_in`.
    pub fn init<R: Rng + ?Sized>(n_in: usize, n_out: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (n_in.max(1) as f64).sqrt();
        Linear {
            weight: Tensor::uniform(&[n_out, n_in], bound, rng),
            bias: Tensor::uniform(&[n_out], bound, rng),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.output_dim()];
        affine(self.weight.data(), self.bias.data(), x, &mut y);
        y
    }

    /// Accumulates parameter gradients into `grad` and input gradient into `dx`.
    pub fn backward(&self, x: &[f64], dy: &[f64], grad: &mut Linear, dx: Option<&mut [f64]>) {
        outer_acc(grad.weight.data_mut(), dy, x);
        for (b, g) in grad.bias.data_mut().iter_mut().zip(dy) {
            *b += g;
        }
        if let Some(dx) = dx {
            affine_transpose_acc(self.weight.data(), dy, dx);
        }
    }

    pub fn flops(&self) -> u64 {
        (self.weight.len()) as u64
    }
}

impl Parameterized for Linear {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

/// Feed-forward stack: ReLU between layers, identity on the output layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

/// Per-call activations kept for the backward pass.
#[derive(Clone, Debug, Default)]
pub struct MlpCache {
    /// Input to each layer (post-ReLU for all but the first).
    inputs: Vec<Vec<f64>>,
    /// Pre-activation output of each hidden layer.
    hidden_pre: Vec<Vec<f64>>,
}

impl Mlp {
    /// `dims = [in, hidden.., out]`.
    pub fn init<R: Rng + ?Sized>(dims: &[usize], rng: &mut R) -> Self {
        assert!(dims.len() >= 2, "an MLP needs at least input and output dims");
        Mlp {
            layers: dims.windows(2).map(|w| Linear::init(w[0], w[1], rng)).collect(),
        }
    }

    pub fn zeros(dims: &[usize]) -> Self {
        Mlp {
            layers: dims.windows(2).map(|w| Linear::zeros(w[0], w[1])).collect(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map(Linear::output_dim).unwrap_or(0)
    }

    pub fn flops(&self) -> u64 {
        self.layers.iter().map(Linear::flops).sum()
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        self.forward_cached(x).0
    }

    pub fn forward_cached(&self, x: &[f64]) -> (Vec<f64>, MlpCache) {
        let mut cache = MlpCache {
            inputs: Vec::with_capacity(self.layers.len()),
            hidden_pre: Vec::with_capacity(self.layers.len().saturating_sub(1)),
        };
        let mut cur = x.to_vec();
        let last = self.layers.len() - 1;
        for (k, layer) in self.layers.iter().enumerate() {
            let pre = layer.forward(&cur);
            cache.inputs.push(cur);
            if k == last {
                return (pre, cache);
            }
            cur = pre.iter().map(|v| v.max(0.0)).collect();
            cache.hidden_pre.push(pre);
        }
        unreachable!("MLP has at least one layer")
    }

    /// Returns the gradient with respect to the input.
    pub fn backward(&self, cache: &MlpCache, dout: &[f64], grad: &mut Mlp) -> Vec<f64> {
        let mut dy = dout.to_vec();
        for k in (0..self.layers.len()).rev() {
            let layer = &self.layers[k];
            let mut dx = vec![0.0; layer.input_dim()];
            layer.backward(&cache.inputs[k], &dy, &mut grad.layers[k], Some(&mut dx));
            if k > 0 {
                for (d, pre) in dx.iter_mut().zip(&cache.hidden_pre[k - 1]) {
                    if *pre <= 0.0 {
                        *d = 0.0;
                    }
                }
            }
            dy = dx;
        }
        dy
    }
}

impl Parameterized for Mlp {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        for (k, l) in self.layers.iter().enumerate() {
            l.visit(&join(prefix, &format!("layer{k}")), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (k, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&join(prefix, &format!("layer{k}")), f);
        }
    }
}
