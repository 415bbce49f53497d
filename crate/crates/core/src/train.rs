//! Two-stage training: the autoencoder on the union of all datasets, then the
//! conditional flow on the frozen, standardized representations.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Eager, Graph};
use crate::autoencoder::{AeModel, Standardizer};
use crate::data::{self, Observation};
use crate::error::{Error, Result};
use crate::flow::{FlowConfig, FlowModel};
use crate::optim::{Adam, AdamConfig};
use crate::rng::SeedRng;
use crate::tensor::Tensor;

// Random stream ids; each consumer of randomness gets its own.
const STREAM_AE_INIT: u64 = 1;
const STREAM_AE_SHUFFLE: u64 = 2;
const STREAM_FLOW_INIT: u64 = 3;
const STREAM_FLOW_SHUFFLE: u64 = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub seed: u64,
    pub batch_size: usize,
    pub ae_lr: f64,
    pub ae_epochs: usize,
    pub flow_lr: f64,
    pub flow_epochs: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clamp: f64,
    /// Representation dimension.
    pub dim: usize,
    /// Autoencoder hidden width.
    pub hidden: usize,
    pub embed_dim: usize,
    pub blocks: usize,
    /// Conditioner hidden width.
    pub flow_hidden: usize,
    /// Samples used for actnorm data initialization.
    pub actnorm_init_size: usize,
    pub schedule: LrSchedule,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub manifest: Option<String>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            batch_size: 64,
            ae_lr: 1e-3,
            ae_epochs: 20,
            flow_lr: 5e-4,
            flow_epochs: 100,
            weight_decay: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clamp: 2.0,
            dim: 16,
            hidden: 128,
            embed_dim: 8,
            blocks: 8,
            flow_hidden: 32,
            actnorm_init_size: 1024,
            schedule: LrSchedule::Cosine,
            manifest: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.to_string()));
        if !(self.ae_lr > 0.0 && self.flow_lr > 0.0) {
            return bad("learning rates must be positive");
        }
        if self.batch_size < 2 {
            return bad("batch size must be at least 2");
        }
        if self.ae_epochs < 1 || self.flow_epochs < 1 {
            return bad("epochs must be at least 1");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return bad("Adam betas must be in [0, 1) and eps positive");
        }
        if self.weight_decay < 0.0 {
            return bad("weight decay must be non-negative");
        }
        if self.actnorm_init_size < 2 {
            return bad("actnorm initialization needs at least 2 samples");
        }
        self.flow_config(2).validate()
    }

    fn adam(&self, lr: f64) -> AdamConfig {
        AdamConfig { lr, beta1: self.beta1, beta2: self.beta2, eps: self.eps, weight_decay: self.weight_decay }
    }

    pub fn flow_config(&self, n_labels: usize) -> FlowConfig {
        FlowConfig {
            dim: self.dim,
            blocks: self.blocks,
            hidden: self.flow_hidden,
            embed_dim: self.embed_dim,
            n_labels,
            clamp: self.clamp,
        }
    }
}

/// Learning-rate schedule over all optimizer steps of a stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    Constant,
    /// Cosine decay from the base rate to 1% of it.
    Cosine,
}

impl LrSchedule {
    pub fn rate(self, base: f64, step: usize, total: usize) -> f64 {
        match self {
            LrSchedule::Constant => base,
            LrSchedule::Cosine => {
                let floor = 0.01 * base;
                let progress = step as f64 / total.max(1) as f64;
                floor + 0.5 * (base - floor) * (1.0 + (std::f64::consts::PI * progress).cos())
            }
        }
    }
}

/// Checks that no epoch average exceeds the best earlier average by more than
/// `max(rel * |best|, abs)`.
pub fn trace_within_band(trace: &[f64], rel: f64, abs: f64) -> bool {
    let mut best = f64::INFINITY;
    for &v in trace {
        if !v.is_finite() || (best.is_finite() && v > best + (rel * best.abs()).max(abs)) {
            return false;
        }
        best = best.min(v);
    }
    true
}

/// Tolerance band for autoencoder epoch losses (relative).
pub const AE_TRACE_BAND: f64 = 0.10;
/// Tolerance band for flow epoch NLL, in nats per sample.
pub const FLOW_TRACE_BAND: f64 = 0.5;

#[derive(Clone, Debug)]
pub struct AeTraining {
    pub model: AeModel<f64>,
    pub standardizer: Standardizer<f64>,
    /// Mean per-pixel MSE of each epoch.
    pub trace: Vec<f64>,
}

fn check_labels(observations: &[Observation]) -> Result<usize> {
    if observations.is_empty() {
        return Err(Error::TooFewSamples { needed: 2, got: 0 });
    }
    let mut seen = std::collections::BTreeSet::new();
    observations.iter().for_each(|o| {
        seen.insert(o.label);
    });
    if seen.len() < 2 {
        return Err(Error::Config("training needs at least 2 dataset labels".into()));
    }
    Ok(seen.iter().max().map_or(0, |m| m + 1))
}

fn batch_pixels(observations: &[Observation], idx: &[usize]) -> Tensor<f64> {
    let data = idx.iter().flat_map(|&i| observations[i].pixels.iter().copied()).collect();
    Tensor::new(vec![idx.len(), data::PIXELS], data).expect("fixed pixel count")
}

fn collect_grads(g: &Graph<f64>, grads: &crate::autodiff::Gradients<f64>, params: &[&Tensor<f64>]) -> Vec<Tensor<f64>> {
    params
        .iter()
        .enumerate()
        .map(|(slot, p)| g.slot(slot).and_then(|v| grads.get(v)).cloned().unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect()
}

/// Mean per-pixel MSE of `model` on `observations`.
pub fn reconstruction_mse(model: &AeModel<f64>, observations: &[Observation]) -> Result<f64> {
    let mut total = 0.0;
    for chunk in observations.chunks(512) {
        let p = data::pixel_matrix(chunk);
        let recon = model.decode(&model.encode(&p)?)?;
        total += p.data().iter().zip(recon.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
    }
    Ok(total / (observations.len() * data::PIXELS) as f64)
}

pub fn train_autoencoder(config: &TrainConfig, observations: &[Observation]) -> Result<AeTraining> {
    config.validate()?;
    check_labels(observations)?;
    let mut model = AeModel::new(config.hidden, config.dim, &mut SeedRng::with_stream(config.seed, STREAM_AE_INIT));
    let mut opt = Adam::new(config.adam(config.ae_lr));
    let mut shuffle = SeedRng::with_stream(config.seed, STREAM_AE_SHUFFLE);
    let mut order: Vec<usize> = (0..observations.len()).collect();
    let mut trace = Vec::with_capacity(config.ae_epochs);
    let total_steps = config.ae_epochs * order.len().div_ceil(config.batch_size);

    for epoch in 0..config.ae_epochs {
        shuffle.shuffle(&mut order);
        let mut total = 0.0;
        for (step, idx) in order.chunks(config.batch_size).enumerate() {
            opt.config.lr = config.schedule.rate(config.ae_lr, opt.steps() as usize, total_steps);
            let pixels = batch_pixels(observations, idx);
            let mut g = Graph::new();
            let loss = model.reconstruction_loss(&mut g, &pixels).map_err(|e| divergence(e, epoch, step))?;
            let value = g.value(loss).item();
            if !value.is_finite() {
                return Err(Error::Divergence { epoch, step, loss: value });
            }
            let grads = g.backward(loss).map_err(|e| divergence(e, epoch, step))?;
            let grads = collect_grads(&g, &grads, &model.params());
            opt.step(model.params_mut(), &grads.iter().collect::<Vec<_>>()).map_err(|e| divergence(e, epoch, step))?;
            total += value * idx.len() as f64;
        }
        trace.push(total / observations.len() as f64);
    }

    let codes = encode_all(&model, observations)?;
    let standardizer = Standardizer::fit(&codes)?;
    Ok(AeTraining { model, standardizer, trace })
}

fn divergence(e: Error, epoch: usize, step: usize) -> Error {
    if e.is_numeric() {
        Error::Divergence { epoch, step, loss: f64::NAN }
    } else {
        e
    }
}

/// Codes `[n, dim]` of every observation.
pub fn encode_all(model: &AeModel<f64>, observations: &[Observation]) -> Result<Tensor<f64>> {
    let mut data = Vec::with_capacity(observations.len() * model.dim());
    for chunk in observations.chunks(512) {
        data.extend(model.encode(&data::pixel_matrix(chunk))?.into_data());
    }
    Tensor::new(vec![observations.len(), model.dim()], data)
}

#[derive(Clone, Debug)]
pub struct FlowTraining {
    pub model: FlowModel<f64>,
    /// Mean NLL (nats per sample) of each epoch's batches.
    pub trace: Vec<f64>,
    /// Mean NLL on the whole training set right after actnorm initialization.
    pub initial_nll: f64,
    /// Mean NLL on the whole training set after the last epoch.
    pub final_nll: f64,
}

fn rows(x: &Tensor<f64>, idx: &[usize]) -> Tensor<f64> {
    let d = x.cols();
    let data = idx.iter().flat_map(|&i| x.row(i).iter().copied()).collect();
    Tensor::new(vec![idx.len(), d], data).expect("row subset")
}

/// Mean NLL of `model` over `(x, labels)`, evaluated in chunks.
pub fn mean_nll(model: &FlowModel<f64>, x: &Tensor<f64>, labels: &[usize]) -> Result<f64> {
    let mut total = 0.0;
    let all: Vec<usize> = (0..labels.len()).collect();
    for idx in all.chunks(1024) {
        let ys: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
        total += model.nll(&mut Eager, &rows(x, idx), &ys)?.item() * idx.len() as f64;
    }
    Ok(total / labels.len() as f64)
}

/// Maximum-likelihood training of the flow on standardized codes `x`.
pub fn train_flow(config: &TrainConfig, x: &Tensor<f64>, labels: &[usize], n_labels: usize) -> Result<FlowTraining> {
    config.validate()?;
    let mut model =
        FlowModel::new(&config.flow_config(n_labels), &mut SeedRng::with_stream(config.seed, STREAM_FLOW_INIT))?;
    let mut shuffle = SeedRng::with_stream(config.seed, STREAM_FLOW_SHUFFLE);
    let mut order: Vec<usize> = (0..labels.len()).collect();
    shuffle.shuffle(&mut order);

    let init_idx = &order[..config.actnorm_init_size.min(order.len())];
    let init_labels: Vec<usize> = init_idx.iter().map(|&i| labels[i]).collect();
    model.actnorm_data_init(&rows(x, init_idx), &init_labels)?;
    let initial_nll = mean_nll(&model, x, labels)?;

    let mut opt = Adam::new(config.adam(config.flow_lr));
    let mut trace = Vec::with_capacity(config.flow_epochs);
    let total_steps = config.flow_epochs * order.len().div_ceil(config.batch_size);
    for epoch in 0..config.flow_epochs {
        if epoch > 0 {
            shuffle.shuffle(&mut order);
        }
        let mut total = 0.0;
        for (step, idx) in order.chunks(config.batch_size).enumerate() {
            opt.config.lr = config.schedule.rate(config.flow_lr, opt.steps() as usize, total_steps);
            let ys: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let mut g = Graph::new();
            let loss = model.nll(&mut g, &rows(x, idx), &ys).map_err(|e| divergence(e, epoch, step))?;
            let value = g.value(loss).item();
            if !value.is_finite() {
                return Err(Error::Divergence { epoch, step, loss: value });
            }
            let grads = g.backward(loss).map_err(|e| divergence(e, epoch, step))?;
            let grads = collect_grads(&g, &grads, &model.params());
            opt.step(model.params_mut(), &grads.iter().collect::<Vec<_>>()).map_err(|e| divergence(e, epoch, step))?;
            total += value * idx.len() as f64;
        }
        trace.push(total / labels.len() as f64);
    }
    let final_nll = mean_nll(&model, x, labels)?;
    Ok(FlowTraining { model, trace, initial_nll, final_nll })
}

/// Encodes and standardizes the observations with the frozen autoencoder, then
/// trains the flow on them.
pub fn train_cinn(
    config: &TrainConfig,
    observations: &[Observation],
    ae: &AeModel<f64>,
    standardizer: &Standardizer<f64>,
) -> Result<FlowTraining> {
    let n_labels = check_labels(observations)?;
    let x = standardizer.apply(&encode_all(ae, observations)?)?;
    train_flow(config, &x, &data::labels(observations), n_labels)
}
