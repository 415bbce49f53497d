//! Fully connected layers.

use crate::autodiff::Backend;
use crate::error::Result;
use crate::rng::SeedRng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Tanh,
    Sigmoid,
}

/// Affine layer `x W + b` with `W: [in, out]`, `b: [1, out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<S: Scalar = f64> {
    pub weight: Tensor<S>,
    pub bias: Tensor<S>,
}

impl<S: Scalar> Linear<S> {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self { weight: Tensor::zeros(&[input, output]), bias: Tensor::zeros(&[1, output]) }
    }

    /// Glorot-normal weights, zero bias.
    pub fn glorot(input: usize, output: usize, rng: &mut SeedRng) -> Self {
        let std = (2.0 / (input + output) as f64).sqrt();
        let data = (0..input * output).map(|_| S::lit(std * rng.normal())).collect();
        Self { weight: Tensor::new(vec![input, output], data).expect("sized"), bias: Tensor::zeros(&[1, output]) }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.cols()
    }

    /// Uses parameter slots `slot` (weight) and `slot + 1` (bias).
    pub fn forward<B: Backend<S>>(&self, b: &mut B, slot: usize, x: &B::Value) -> Result<B::Value> {
        let w = b.param(slot, &self.weight);
        let bias = b.param(slot + 1, &self.bias);
        let h = b.matmul(x, &w)?;
        b.add(&h, &bias)
    }
}

/// Stack of linear layers; `hidden` activation between layers, `output`
/// activation after the last one.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp<S: Scalar = f64> {
    pub layers: Vec<Linear<S>>,
    pub hidden: Activation,
    pub output: Activation,
}

impl<S: Scalar> Mlp<S> {
    pub fn new(layers: Vec<Linear<S>>, hidden: Activation, output: Activation) -> Self {
        Self { layers, hidden, output }
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, Linear::input_dim)
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, Linear::output_dim)
    }

    pub fn param_count(&self) -> usize {
        2 * self.layers.len()
    }

    pub fn params(&self) -> Vec<&Tensor<S>> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<S>> {
        self.layers.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias]).collect()
    }

    /// Uses parameter slots `slot .. slot + param_count()`.
    pub fn forward<B: Backend<S>>(&self, b: &mut B, slot: usize, x: &B::Value) -> Result<B::Value> {
        let mut h = x.clone();
        let last = self.layers.len().saturating_sub(1);
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(b, slot + 2 * i, &h)?;
            let act = if i == last { self.output } else { self.hidden };
            h = match act {
                Activation::Identity => h,
                Activation::Tanh => b.tanh(&h)?,
                Activation::Sigmoid => b.sigmoid(&h)?,
            };
        }
        Ok(h)
    }
}
