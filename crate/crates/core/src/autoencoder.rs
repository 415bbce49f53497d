//! Shared MLP autoencoder producing the representation the flow operates on.

use crate::autodiff::{Backend, Eager};
use crate::data::PIXELS;
use crate::error::{Error, Result};
use crate::nn::{Activation, Linear, Mlp};
use crate::rng::SeedRng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Encoder `768 -> hidden -> dim` (tanh, linear), decoder
/// `dim -> hidden -> 768` (tanh, sigmoid).
#[derive(Clone, Debug, PartialEq)]
pub struct AeModel<S: Scalar = f64> {
    pub encoder: Mlp<S>,
    pub decoder: Mlp<S>,
}

impl<S: Scalar> AeModel<S> {
    pub fn new(hidden: usize, dim: usize, rng: &mut SeedRng) -> Self {
        Self::from_layers([
            Linear::glorot(PIXELS, hidden, rng),
            Linear::glorot(hidden, dim, rng),
            Linear::glorot(dim, hidden, rng),
            Linear::glorot(hidden, PIXELS, rng),
        ])
    }

    pub fn zeros(hidden: usize, dim: usize) -> Self {
        Self::from_layers([
            Linear::zeros(PIXELS, hidden),
            Linear::zeros(hidden, dim),
            Linear::zeros(dim, hidden),
            Linear::zeros(hidden, PIXELS),
        ])
    }

    fn from_layers([e1, e2, d1, d2]: [Linear<S>; 4]) -> Self {
        Self {
            encoder: Mlp::new(vec![e1, e2], Activation::Tanh, Activation::Identity),
            decoder: Mlp::new(vec![d1, d2], Activation::Tanh, Activation::Sigmoid),
        }
    }

    pub fn dim(&self) -> usize {
        self.encoder.output_dim()
    }

    pub fn hidden(&self) -> usize {
        self.encoder.layers[0].output_dim()
    }

    pub fn params(&self) -> Vec<&Tensor<S>> {
        let mut p = self.encoder.params();
        p.extend(self.decoder.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<S>> {
        let mut p = self.encoder.params_mut();
        p.extend(self.decoder.params_mut());
        p
    }

    /// Checks layer dimensions chain correctly and all weights are finite.
    pub fn validate(&self) -> Result<()> {
        let chain = |m: &Mlp<S>| m.layers.windows(2).all(|w| w[0].output_dim() == w[1].input_dim());
        let ok = self.encoder.input_dim() == PIXELS
            && self.decoder.output_dim() == PIXELS
            && self.encoder.output_dim() == self.decoder.input_dim()
            && chain(&self.encoder)
            && chain(&self.decoder);
        if !ok {
            return Err(Error::Shape("autoencoder layer dimensions are inconsistent".into()));
        }
        if self.params().iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite("autoencoder parameters".into()));
        }
        Ok(())
    }

    pub fn encode_with<B: Backend<S>>(&self, b: &mut B, pixels: &B::Value) -> Result<B::Value> {
        self.encoder.forward(b, 0, pixels)
    }

    pub fn decode_with<B: Backend<S>>(&self, b: &mut B, x: &B::Value) -> Result<B::Value> {
        self.decoder.forward(b, self.encoder.param_count(), x)
    }

    /// Batch of images `[n, 768]` with values in `[0, 1]` to codes `[n, dim]`.
    pub fn encode(&self, pixels: &Tensor<S>) -> Result<Tensor<S>> {
        if pixels.rank() != 2 || pixels.cols() != PIXELS {
            return Err(Error::Shape(format!("expected [n, {PIXELS}] pixels, got {:?}", pixels.shape())));
        }
        if pixels.data().iter().any(|v| !(*v >= S::zero() && *v <= S::one())) {
            return Err(Error::Config("pixel values must lie in [0, 1]".into()));
        }
        self.encode_with(&mut Eager, pixels)
    }

    /// Codes `[n, dim]` to images `[n, 768]`; the sigmoid keeps outputs in `[0, 1]`.
    pub fn decode(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        if x.rank() != 2 || x.cols() != self.dim() {
            return Err(Error::Shape(format!("expected [n, {}] codes, got {:?}", self.dim(), x.shape())));
        }
        if !x.is_finite() {
            return Err(Error::NonFinite("decode input".into()));
        }
        self.decode_with(&mut Eager, x)
    }

    /// Mean squared error per pixel between `pixels` and their reconstruction.
    pub fn reconstruction_loss<B: Backend<S>>(&self, b: &mut B, pixels: &Tensor<S>) -> Result<B::Value> {
        let n = pixels.numel();
        let target = b.input(pixels.clone());
        let code = self.encode_with(b, &target)?;
        let recon = self.decode_with(b, &code)?;
        let diff = b.sub(&recon, &target)?;
        let sq = b.mul(&diff, &diff)?;
        let total = b.sum(&sq)?;
        b.scale(&total, S::one() / S::lit(n as f64))
    }
}

/// Per-dimension affine standardization of representations, fitted on the
/// training union.
#[derive(Clone, Debug, PartialEq)]
pub struct Standardizer<S: Scalar = f64> {
    pub mean: Tensor<S>,
    pub std: Tensor<S>,
}

impl<S: Scalar> Standardizer<S> {
    pub fn fit(codes: &Tensor<S>) -> Result<Self> {
        let (n, d) = (codes.rows(), codes.cols());
        if n < 2 {
            return Err(Error::TooFewSamples { needed: 2, got: n });
        }
        let mut mean = vec![0.0; d];
        for r in 0..n {
            for (m, v) in mean.iter_mut().zip(codes.row(r)) {
                *m += v.as_f64();
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; d];
        for r in 0..n {
            for ((s, v), m) in var.iter_mut().zip(codes.row(r)).zip(&mean) {
                *s += (v.as_f64() - m).powi(2);
            }
        }
        let mut std = Vec::with_capacity(d);
        for (j, s) in var.iter().enumerate() {
            let sd = (s / n as f64).sqrt();
            if !(sd > 1e-12) {
                return Err(Error::ZeroVariance(j));
            }
            std.push(S::lit(sd));
        }
        Ok(Self {
            mean: Tensor::new(vec![1, d], mean.into_iter().map(S::lit).collect())?,
            std: Tensor::new(vec![1, d], std)?,
        })
    }

    pub fn identity(d: usize) -> Self {
        Self { mean: Tensor::zeros(&[1, d]), std: Tensor::full(&[1, d], S::one()) }
    }

    pub fn dim(&self) -> usize {
        self.mean.cols()
    }

    pub fn apply(&self, codes: &Tensor<S>) -> Result<Tensor<S>> {
        self.zip(codes, |v, m, s| (v - m) / s)
    }

    pub fn invert(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        self.zip(x, |v, m, s| v * s + m)
    }

    fn zip(&self, t: &Tensor<S>, f: impl Fn(S, S, S) -> S) -> Result<Tensor<S>> {
        let d = self.dim();
        if t.rank() != 2 || t.cols() != d {
            return Err(Error::Shape(format!("expected [n, {d}], got {:?}", t.shape())));
        }
        let data = t
            .data()
            .chunks(d)
            .flat_map(|row| row.iter().zip(self.mean.data()).zip(self.std.data()).map(|((&v, &m), &s)| f(v, m, s)))
            .collect();
        Tensor::new(t.shape().to_vec(), data)
    }
}
