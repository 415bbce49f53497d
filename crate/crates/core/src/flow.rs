//! Conditional invertible flow `z = flow(x | y)`.
//!
//! Each block applies, in order: an activation normalization (per-dimension
//! affine map with data-dependent initialization), a fixed permutation of the
//! coordinates, and an affine coupling whose scale and shift come from an MLP
//! that sees the passive half of the input and the dataset embedding. Coupling
//! scales are soft-clamped to `clamp * tanh(s / clamp)` so every block stays
//! invertible whatever the parameter values.
//!
//! Parameter slots (shared by [`FlowModel::params`] and the taped forward):
//! slot 0 is the embedding table, block `k` owns slots `1 + 6k ..= 6 + 6k`
//! (actnorm bias, actnorm log-scale, conditioner weight/bias x 2).

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Backend, Eager};
use crate::error::{Error, Result};
use crate::nn::{Activation, Linear, Mlp};
use crate::rng::SeedRng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const SLOTS_PER_BLOCK: usize = 6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowConfig {
    pub dim: usize,
    pub blocks: usize,
    /// Conditioner hidden width.
    pub hidden: usize,
    pub embed_dim: usize,
    pub n_labels: usize,
    pub clamp: f64,
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.blocks == 0 || self.hidden == 0 || self.embed_dim == 0 || self.n_labels == 0 {
            return Err(Error::Config(format!("flow dimensions must be positive: {self:?}")));
        }
        if !(self.clamp > 0.0 && self.clamp.is_finite()) {
            return Err(Error::Config("coupling clamp must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ActNorm<S: Scalar = f64> {
    pub bias: Tensor<S>,
    /// Log of the (strictly positive) scale.
    pub log_scale: Tensor<S>,
    pub initialized: bool,
}

impl<S: Scalar> ActNorm<S> {
    fn unit(dim: usize, initialized: bool) -> Self {
        Self { bias: Tensor::zeros(&[1, dim]), log_scale: Tensor::zeros(&[1, dim]), initialized }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlowBlock<S: Scalar = f64> {
    pub actnorm: ActNorm<S>,
    /// Output column `j` takes input column `permutation[j]`.
    pub permutation: Vec<usize>,
    pub conditioner: Mlp<S>,
    /// Passive columns come first in even blocks and last in odd blocks.
    pub passive_first: bool,
}

impl<S: Scalar> FlowBlock<S> {
    fn dim(&self) -> usize {
        self.permutation.len()
    }

    fn passive_width(&self) -> usize {
        self.dim() / 2
    }

    fn ranges(&self) -> (Range<usize>, Range<usize>) {
        let (d, p) = (self.dim(), self.passive_width());
        if self.passive_first {
            (0..p, p..d)
        } else {
            (d - p..d, 0..d - p)
        }
    }

    fn permutation_matrix(&self, inverse: bool) -> Tensor<S> {
        let d = self.dim();
        let mut m = Tensor::zeros(&[d, d]);
        for (j, &src) in self.permutation.iter().enumerate() {
            let (r, c) = if inverse { (j, src) } else { (src, j) };
            m.data_mut()[r * d + c] = S::one();
        }
        m
    }

    fn is_identity_permutation(&self) -> bool {
        self.permutation.iter().enumerate().all(|(i, &p)| i == p)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlowModel<S: Scalar = f64> {
    pub blocks: Vec<FlowBlock<S>>,
    /// `[n_labels, embed_dim]`.
    pub embedding: Tensor<S>,
    pub clamp: S,
}

/// Output of a forward pass: codes `[n, d]` and per-sample log-determinants `[n, 1]`.
#[derive(Clone, Debug)]
pub struct FlowOutput<V> {
    pub z: V,
    pub logdet: V,
}

impl<S: Scalar> FlowModel<S> {
    /// Randomly initialized model: seeded permutations, Glorot first conditioner
    /// layer, zero last layer (so every coupling starts as the identity),
    /// standard-normal embeddings, actnorm awaiting data initialization.
    pub fn new(cfg: &FlowConfig, rng: &mut SeedRng) -> Result<Self> {
        cfg.validate()?;
        let embedding = Tensor::new(
            vec![cfg.n_labels, cfg.embed_dim],
            (0..cfg.n_labels * cfg.embed_dim).map(|_| S::lit(rng.normal())).collect(),
        )?;
        let blocks = (0..cfg.blocks)
            .map(|k| {
                let permutation = rng.permutation(cfg.dim);
                let (p, a) = (cfg.dim / 2, cfg.dim - cfg.dim / 2);
                let conditioner = Mlp::new(
                    vec![Linear::glorot(p + cfg.embed_dim, cfg.hidden, rng), Linear::zeros(cfg.hidden, 2 * a)],
                    Activation::Tanh,
                    Activation::Identity,
                );
                FlowBlock {
                    actnorm: ActNorm::unit(cfg.dim, false),
                    permutation,
                    conditioner,
                    passive_first: k % 2 == 0,
                }
            })
            .collect();
        Ok(Self { blocks, embedding, clamp: S::lit(cfg.clamp) })
    }

    /// Exact identity map: zero conditioners and embeddings, unit initialized
    /// actnorm, identity permutations.
    pub fn identity(cfg: &FlowConfig) -> Result<Self> {
        cfg.validate()?;
        let blocks = (0..cfg.blocks)
            .map(|k| {
                let (p, a) = (cfg.dim / 2, cfg.dim - cfg.dim / 2);
                FlowBlock {
                    actnorm: ActNorm::unit(cfg.dim, true),
                    permutation: (0..cfg.dim).collect(),
                    conditioner: Mlp::new(
                        vec![Linear::zeros(p + cfg.embed_dim, cfg.hidden), Linear::zeros(cfg.hidden, 2 * a)],
                        Activation::Tanh,
                        Activation::Identity,
                    ),
                    passive_first: k % 2 == 0,
                }
            })
            .collect();
        Ok(Self { blocks, embedding: Tensor::zeros(&[cfg.n_labels, cfg.embed_dim]), clamp: S::lit(cfg.clamp) })
    }

    pub fn dim(&self) -> usize {
        self.blocks.first().map_or(0, FlowBlock::dim)
    }

    pub fn n_labels(&self) -> usize {
        self.embedding.rows()
    }

    pub fn embed_dim(&self) -> usize {
        self.embedding.cols()
    }

    pub fn config(&self) -> FlowConfig {
        FlowConfig {
            dim: self.dim(),
            blocks: self.blocks.len(),
            hidden: self.blocks.first().map_or(0, |b| b.conditioner.layers[0].output_dim()),
            embed_dim: self.embed_dim(),
            n_labels: self.n_labels(),
            clamp: self.clamp.as_f64(),
        }
    }

    pub fn is_initialized(&self) -> bool {
        self.blocks.iter().all(|b| b.actnorm.initialized)
    }

    pub fn params(&self) -> Vec<&Tensor<S>> {
        let mut p = vec![&self.embedding];
        for b in &self.blocks {
            p.push(&b.actnorm.bias);
            p.push(&b.actnorm.log_scale);
            p.extend(b.conditioner.params());
        }
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<S>> {
        let mut p = vec![&mut self.embedding];
        for b in &mut self.blocks {
            p.push(&mut b.actnorm.bias);
            p.push(&mut b.actnorm.log_scale);
            p.extend(b.conditioner.params_mut());
        }
        p
    }

    /// Structural invariants: consistent dimensions, bijective permutations,
    /// finite parameters.
    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        for (k, b) in self.blocks.iter().enumerate() {
            let mut seen = vec![false; d];
            for &p in &b.permutation {
                if p >= d || std::mem::replace(&mut seen[p], true) {
                    return Err(Error::Config(format!("block {k} permutation is not a bijection")));
                }
            }
            if b.dim() != d
                || b.conditioner.input_dim() != b.passive_width() + self.embed_dim()
                || b.conditioner.output_dim() != 2 * (d - b.passive_width())
                || b.actnorm.bias.shape() != [1, d]
                || b.actnorm.log_scale.shape() != [1, d]
            {
                return Err(Error::Shape(format!("block {k} dimensions are inconsistent")));
            }
        }
        if self.params().iter().any(|p| !p.is_finite()) || !self.clamp.is_finite() {
            return Err(Error::NonFinite("flow parameters".into()));
        }
        Ok(())
    }

    fn check_call(&self, x: &Tensor<S>, labels: &[usize]) -> Result<()> {
        if !self.is_initialized() {
            return Err(Error::NotInitialized);
        }
        self.check_inputs(x, labels)
    }

    fn check_inputs(&self, x: &Tensor<S>, labels: &[usize]) -> Result<()> {
        if x.rank() != 2 || x.cols() != self.dim() || x.rows() != labels.len() {
            return Err(Error::Shape(format!(
                "expected [{}, {}] input, got {:?}",
                labels.len(),
                self.dim(),
                x.shape()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= self.n_labels()) {
            return Err(Error::UnknownLabel(bad));
        }
        if !x.is_finite() {
            return Err(Error::NonFinite("flow input".into()));
        }
        Ok(())
    }

    fn one_hot(&self, labels: &[usize]) -> Tensor<S> {
        let n = self.n_labels();
        let mut t = Tensor::zeros(&[labels.len(), n]);
        for (r, &y) in labels.iter().enumerate() {
            t.data_mut()[r * n + y] = S::one();
        }
        t
    }

    /// Scale and shift for the active half, given the passive half.
    fn coupling_params<B: Backend<S>>(
        &self,
        b: &mut B,
        k: usize,
        passive: Option<&B::Value>,
        emb: &B::Value,
    ) -> Result<(B::Value, B::Value)> {
        let block = &self.blocks[k];
        let active = block.dim() - block.passive_width();
        let input = match passive {
            Some(p) => b.concat(p, emb)?,
            None => emb.clone(),
        };
        let out = block.conditioner.forward(b, 1 + SLOTS_PER_BLOCK * k + 2, &input)?;
        let raw = b.slice(&out, 0, active)?;
        let shift = b.slice(&out, active, 2 * active)?;
        let s = b.scale(&raw, S::one() / self.clamp)?;
        let s = b.tanh(&s)?;
        let s = b.scale(&s, self.clamp)?;
        Ok((s, shift))
    }

    fn split<B: Backend<S>>(&self, b: &mut B, k: usize, h: &B::Value) -> Result<(Option<B::Value>, B::Value)> {
        let (passive, active) = self.blocks[k].ranges();
        let p = if passive.is_empty() { None } else { Some(b.slice(h, passive.start, passive.end)?) };
        Ok((p, b.slice(h, active.start, active.end)?))
    }

    fn merge<B: Backend<S>>(
        &self,
        b: &mut B,
        k: usize,
        passive: Option<&B::Value>,
        active: B::Value,
    ) -> Result<B::Value> {
        match passive {
            None => Ok(active),
            Some(p) if self.blocks[k].passive_first => b.concat(p, &active),
            Some(p) => b.concat(&active, p),
        }
    }

    /// `z = flow(x | y)` on any backend, without precondition checks.
    pub fn forward_with<B: Backend<S>>(
        &self,
        b: &mut B,
        x: &B::Value,
        labels: &[usize],
    ) -> Result<FlowOutput<B::Value>> {
        let n = labels.len();
        let table = b.param(0, &self.embedding);
        let onehot = b.input(self.one_hot(labels));
        let emb = b.matmul(&onehot, &table)?;
        let mut h = x.clone();
        let mut logdet = b.input(Tensor::zeros(&[n, 1]));
        for (k, block) in self.blocks.iter().enumerate() {
            let base = 1 + SLOTS_PER_BLOCK * k;
            let bias = b.param(base, &block.actnorm.bias);
            let log_scale = b.param(base + 1, &block.actnorm.log_scale);
            let scale = b.exp(&log_scale)?;
            h = b.add(&h, &bias)?;
            h = b.mul(&h, &scale)?;
            let ls_total = b.sum(&log_scale)?;
            logdet = b.add(&logdet, &ls_total)?;

            if !block.is_identity_permutation() {
                let perm = b.input(block.permutation_matrix(false));
                h = b.matmul(&h, &perm)?;
            }

            let (passive, active) = self.split(b, k, &h)?;
            let (s, t) = self.coupling_params(b, k, passive.as_ref(), &emb)?;
            let es = b.exp(&s)?;
            let active = b.mul(&active, &es)?;
            let active = b.add(&active, &t)?;
            h = self.merge(b, k, passive.as_ref(), active)?;
            let ones = b.input(Tensor::full(&[b.get(&s).cols(), 1], S::one()));
            let s_rows = b.matmul(&s, &ones)?;
            logdet = b.add(&logdet, &s_rows)?;
        }
        Ok(FlowOutput { z: h, logdet })
    }

    /// Forward map and per-sample log-determinant.
    pub fn forward(&self, x: &Tensor<S>, labels: &[usize]) -> Result<(Tensor<S>, Tensor<S>)> {
        self.check_call(x, labels)?;
        let out = self.forward_with(&mut Eager, x, labels)?;
        Ok((out.z, out.logdet))
    }

    /// Exact inverse, block by block in reverse order.
    pub fn inverse(&self, z: &Tensor<S>, labels: &[usize]) -> Result<Tensor<S>> {
        self.check_call(z, labels)?;
        let b = &mut Eager;
        let emb = b.matmul(&self.one_hot(labels), &self.embedding)?;
        let mut h = z.clone();
        for (k, block) in self.blocks.iter().enumerate().rev() {
            let (passive, active) = self.split(b, k, &h)?;
            let (s, t) = self.coupling_params(b, k, passive.as_ref(), &emb)?;
            let active = b.sub(&active, &t)?;
            let inv = b.scale(&s, -S::one())?;
            let inv = b.exp(&inv)?;
            let active = b.mul(&active, &inv)?;
            h = self.merge(b, k, passive.as_ref(), active)?;

            if !block.is_identity_permutation() {
                h = b.matmul(&h, &block.permutation_matrix(true))?;
            }

            let inv_scale = block.actnorm.log_scale.map(|v| (-v).exp());
            h = b.mul(&h, &inv_scale)?;
            let neg_bias = block.actnorm.bias.map(|v| -v);
            h = b.add(&h, &neg_bias)?;
        }
        Ok(h)
    }

    /// `log p(x | y) = log N(flow(x | y); 0, I) + log |det J|`, per sample `[n, 1]`.
    pub fn log_prob(&self, x: &Tensor<S>, labels: &[usize]) -> Result<Tensor<S>> {
        let (z, logdet) = self.forward(x, labels)?;
        let d = self.dim();
        let norm = S::lit(0.5 * d as f64 * (2.0 * std::f64::consts::PI).ln());
        let data = (0..labels.len())
            .map(|r| {
                let sq: S = z.row(r).iter().map(|&v| v * v).sum();
                -S::lit(0.5) * sq - norm + logdet.data()[r]
            })
            .collect::<Vec<_>>();
        let out = Tensor::new(vec![labels.len(), 1], data)?;
        if !out.is_finite() {
            return Err(Error::NonFinite("log_prob".into()));
        }
        Ok(out)
    }

    /// Mean negative log-likelihood of a batch as a differentiable scalar.
    pub fn nll<B: Backend<S>>(&self, b: &mut B, x: &Tensor<S>, labels: &[usize]) -> Result<B::Value> {
        self.check_call(x, labels)?;
        let n = S::lit(labels.len() as f64);
        let xv = b.input(x.clone());
        let out = self.forward_with(b, &xv, labels)?;
        let sq = b.mul(&out.z, &out.z)?;
        let sq = b.sum(&sq)?;
        let sq = b.scale(&sq, S::lit(0.5) / n)?;
        let ld = b.sum(&out.logdet)?;
        let ld = b.scale(&ld, -S::one() / n)?;
        let total = b.add(&sq, &ld)?;
        b.shift(&total, S::lit(0.5 * self.dim() as f64 * (2.0 * std::f64::consts::PI).ln()))
    }

    /// Data-dependent actnorm initialization: block by block, sets each
    /// actnorm so the batch leaves it with zero mean and unit variance per
    /// dimension, then pushes the batch through the rest of the block.
    pub fn actnorm_data_init(&mut self, x: &Tensor<S>, labels: &[usize]) -> Result<()> {
        if self.blocks.iter().any(|b| b.actnorm.initialized) {
            return Err(Error::AlreadyInitialized);
        }
        self.check_inputs(x, labels)?;
        let n = labels.len();
        if n < 2 {
            return Err(Error::TooFewSamples { needed: 2, got: n });
        }
        let d = self.dim();
        let b = &mut Eager;
        let emb = b.matmul(&self.one_hot(labels), &self.embedding)?;
        let mut h = x.clone();
        for k in 0..self.blocks.len() {
            let mut bias = Vec::with_capacity(d);
            let mut log_scale = Vec::with_capacity(d);
            for j in 0..d {
                let col = (0..n).map(|r| h.get(r, j).as_f64());
                let mean = col.clone().sum::<f64>() / n as f64;
                let var = col.map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
                let std = var.sqrt();
                if !(std > 1e-12 * mean.abs().max(1.0)) {
                    return Err(Error::ZeroVariance(j));
                }
                bias.push(S::lit(-mean));
                log_scale.push(S::lit(-std.ln()));
            }
            let an = &mut self.blocks[k].actnorm;
            an.bias = Tensor::new(vec![1, d], bias)?;
            an.log_scale = Tensor::new(vec![1, d], log_scale)?;
            an.initialized = true;

            // propagate through this block only
            let block = &self.blocks[k];
            h = b.add(&h, &block.actnorm.bias)?;
            h = b.mul(&h, &block.actnorm.log_scale.map(S::exp))?;
            if !block.is_identity_permutation() {
                h = b.matmul(&h, &block.permutation_matrix(false))?;
            }
            let (passive, active) = self.split(b, k, &h)?;
            let (s, t) = self.coupling_params(b, k, passive.as_ref(), &emb)?;
            let es = b.exp(&s)?;
            let active = b.mul(&active, &es)?;
            let active = b.add(&active, &t)?;
            h = self.merge(b, k, passive.as_ref(), active)?;
        }
        Ok(())
    }
}
