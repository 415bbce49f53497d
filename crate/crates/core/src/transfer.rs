//! Projection between datasets and conditional sampling with a trained
//! checkpoint.

use crate::checkpoint::Checkpoint;
use crate::data::PIXELS;
use crate::error::{Error, Result};
use crate::rng::SeedRng;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Projection {
    /// Decoded images `[n, 768]`.
    pub pixels: Tensor<f64>,
    /// Content codes `[n, d]` shared by source and target.
    pub z: Tensor<f64>,
    /// Standardized representations `[n, d]` under the target label.
    pub x_target: Tensor<f64>,
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ZStats {
    pub mean: f64,
    pub std: f64,
    pub norm: f64,
}

/// Summary of one row of `z`.
pub fn z_stats(z: &[f64]) -> ZStats {
    let n = z.len().max(1) as f64;
    let mean = z.iter().sum::<f64>() / n;
    let var = z.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    ZStats { mean, std: var.sqrt(), norm: z.iter().map(|v| v * v).sum::<f64>().sqrt() }
}

fn check_labels(ck: &Checkpoint, labels: &[usize], n: usize) -> Result<()> {
    if labels.len() != n {
        return Err(Error::Shape(format!("{} labels for {n} rows", labels.len())));
    }
    match labels.iter().find(|&&l| l >= ck.n_labels()) {
        Some(&l) => Err(Error::UnknownLabel(l)),
        None => Ok(()),
    }
}

/// Standardized representations of `pixels` `[n, 768]`.
pub fn represent(ck: &Checkpoint, pixels: &Tensor<f64>) -> Result<Tensor<f64>> {
    ck.standardizer.apply(&ck.autoencoder.encode(pixels)?)
}

/// Decodes standardized representations back to pixels.
pub fn render_codes(ck: &Checkpoint, x: &Tensor<f64>) -> Result<Tensor<f64>> {
    ck.autoencoder.decode(&ck.standardizer.invert(x)?)
}

/// `x* = flow^-1(flow(x | from) | to)` on standardized representations.
pub fn project_codes(
    ck: &Checkpoint,
    x: &Tensor<f64>,
    from: &[usize],
    to: &[usize],
) -> Result<(Tensor<f64>, Tensor<f64>)> {
    check_labels(ck, from, x.rows())?;
    check_labels(ck, to, x.rows())?;
    let flow = ck.flow()?;
    let (z, _) = flow.forward(x, from)?;
    let x_target = flow.inverse(&z, to)?;
    Ok((z, x_target))
}

/// Projects images from their source datasets onto target datasets.
pub fn project(ck: &Checkpoint, pixels: &Tensor<f64>, from: &[usize], to: &[usize]) -> Result<Projection> {
    if pixels.rank() != 2 || pixels.cols() != PIXELS {
        return Err(Error::Shape(format!("expected [n, {PIXELS}] pixels, got {:?}", pixels.shape())));
    }
    let x = represent(ck, pixels)?;
    let (z, x_target) = project_codes(ck, &x, from, to)?;
    let pixels = render_codes(ck, &x_target)?;
    Ok(Projection { pixels, z, x_target })
}

/// `count` content codes; item `i` draws from its own stream of `seed`, so a
/// batch agrees element-wise with single draws.
pub fn sample_z(dim: usize, count: usize, seed: u64) -> Tensor<f64> {
    let data = (0..count)
        .flat_map(|i| {
            let mut rng = SeedRng::with_stream(seed, i as u64);
            (0..dim).map(move |_| rng.normal())
        })
        .collect();
    Tensor::new(vec![count, dim], data).expect("sized buffer")
}

/// Standardized representations sampled for `label`.
pub fn sample_codes(ck: &Checkpoint, label: usize, count: usize, seed: u64) -> Result<Tensor<f64>> {
    check_labels(ck, &[label], 1)?;
    let flow = ck.flow()?;
    flow.inverse(&sample_z(flow.dim(), count, seed), &vec![label; count])
}

/// Decoded images sampled for `label`.
pub fn sample(ck: &Checkpoint, label: usize, count: usize, seed: u64) -> Result<Tensor<f64>> {
    render_codes(ck, &sample_codes(ck, label, count, seed)?)
}

/// Largest absolute error of `flow^-1(flow(x | y) | y)` against `x`.
pub fn latent_roundtrip_error(ck: &Checkpoint, x: &Tensor<f64>, labels: &[usize]) -> Result<f64> {
    let (_, back) = project_codes(ck, x, labels, labels)?;
    Ok(x.data().iter().zip(back.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batch_sampling_matches_single_draws() {
        let batch = sample_z(5, 4, 77);
        for i in 0..4 {
            let mut rng = SeedRng::with_stream(77, i as u64);
            let single: Vec<f64> = (0..5).map(|_| rng.normal()).collect();
            assert_eq!(batch.row(i), single.as_slice());
        }
    }

    #[test]
    fn z_stats_values() {
        let s = z_stats(&[3.0, 4.0]);
        assert_eq!(s, ZStats { mean: 3.5, std: 0.5, norm: 5.0 });
    }
}
