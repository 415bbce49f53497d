//! Operations shared by the command line and the service. Both front ends
//! call these, which is what keeps their outputs byte-identical.

use bias_lens::checkpoint::{Checkpoint, Registry};
use bias_lens::data::{self, PIXELS};
use bias_lens::tensor::Tensor;
use bias_lens::transfer::{self, ZStats};
use bias_lens::{imageio, Error, Result, SeedRng};

#[derive(Clone, Debug)]
pub struct ProjectOutput {
    pub png: Vec<u8>,
    pub z_stats: ZStats,
    /// The input was not 16x16 and was resized first.
    pub resized: bool,
}

pub fn label_of(registry: &Registry, name: &str) -> Result<usize> {
    Ok(registry.find(name)?.id)
}

/// Projects one image given as HWC pixels from dataset `from` onto `to`.
pub fn project_pixels(ck: &Checkpoint, pixels: &[f64], from: &str, to: &str) -> Result<ProjectOutput> {
    let from = label_of(&ck.registry, from)?;
    let to = label_of(&ck.registry, to)?;
    let input = Tensor::new(vec![1, PIXELS], pixels.to_vec())?;
    let p = transfer::project(ck, &input, &[from], &[to])?;
    Ok(ProjectOutput {
        png: imageio::encode_png(p.pixels.row(0))?,
        z_stats: transfer::z_stats(p.z.row(0)),
        resized: false,
    })
}

/// Projects a PNG of any accepted size.
pub fn project_png(ck: &Checkpoint, png: &[u8], from: &str, to: &str) -> Result<ProjectOutput> {
    let decoded = imageio::decode_png(png)?;
    let mut out = project_pixels(ck, &decoded.pixels, from, to)?;
    out.resized = decoded.resized;
    Ok(out)
}

/// `count` generated images for `dataset` as PNGs.
pub fn sample_pngs(ck: &Checkpoint, dataset: &str, count: usize, seed: u64) -> Result<Vec<Vec<u8>>> {
    if count == 0 {
        return Err(Error::Config("count must be at least 1".into()));
    }
    let label = label_of(&ck.registry, dataset)?;
    let images = transfer::sample(ck, label, count, seed)?;
    (0..count).map(|i| imageio::encode_png(images.row(i))).collect()
}

/// Sample `index` of a registered dataset, as stored in the training data.
pub fn dataset_png(registry: &Registry, dataset: &str, index: usize) -> Result<Vec<u8>> {
    let spec = registry.find(dataset)?;
    if index >= spec.count {
        return Err(Error::Config(format!(
            "dataset `{dataset}` has {} samples, index {index} is out of range",
            spec.count
        )));
    }
    imageio::encode_png(&data::regenerate(spec, registry.seed, index)?.pixels)
}

/// `count` distinct sample indices of `dataset`, chosen by `seed`.
pub fn pick_indices(registry: &Registry, dataset: &str, count: usize, seed: u64) -> Result<Vec<usize>> {
    let spec = registry.find(dataset)?;
    if count == 0 || count > spec.count {
        return Err(Error::Config(format!("count must be in 1..={}", spec.count)));
    }
    let mut idx = SeedRng::new(seed).permutation(spec.count);
    idx.truncate(count);
    Ok(idx)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn picked_indices_are_distinct_and_seeded() {
        let registry = Registry { seed: 3, datasets: data::default_family(50) };
        let a = pick_indices(&registry, "highq", 20, 9).unwrap();
        let mut sorted = a.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), 20);
        assert!(a.iter().all(|&i| i < 50));
        assert_eq!(a, pick_indices(&registry, "highq", 20, 9).unwrap());
        assert!(pick_indices(&registry, "highq", 51, 9).is_err());
        assert!(matches!(pick_indices(&registry, "nope", 1, 9), Err(Error::UnknownDataset(_))));
    }

    #[test]
    fn dataset_png_rejects_out_of_range() {
        let registry = Registry { seed: 3, datasets: data::default_family(5) };
        assert!(dataset_png(&registry, "lowq", 4).is_ok());
        assert!(matches!(dataset_png(&registry, "lowq", 5), Err(Error::Config(_))));
    }
}
