//! Procedural dataset families.
//!
//! Every dataset in a family renders the same kind of content (a colored disc
//! with position, size and hue) through its own style map. Datasets differ in
//! two independent ways: the rendering style (blur, noise, palette, brightness)
//! and the marginal distribution of content (curation skew).
//!
//! On disk a family is a directory with `manifest.json` and one binary sample
//! file per dataset: `u32` count, then per sample 768 `f64` pixels, a `u32`
//! label and 4 `f64` content values, all little-endian.

use std::collections::HashSet;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::RngCore;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeedRng;
use crate::tensor::{read_exact, read_u32, Tensor};

pub const IMAGE_SIDE: usize = 16;
pub const CHANNELS: usize = 3;
pub const PIXELS: usize = IMAGE_SIDE * IMAGE_SIDE * CHANNELS;
pub const CONTENT_DIM: usize = 4;
pub const MANIFEST_VERSION: u32 = 1;

const BACKGROUND: f64 = 0.2;
const POSITION_SPAN: f64 = 3.5;
const BASE_RADIUS: f64 = 3.0;
const RADIUS_SPAN: f64 = 1.5;
const HUE_SPAN: f64 = 1.8;
const COLOR_MID: f64 = 0.55;
const COLOR_AMPLITUDE: f64 = 0.25;

/// Ground-truth content: position x, position y, size, hue; each in `[-1, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContentFactor(pub [f64; CONTENT_DIM]);

impl ContentFactor {
    pub const NAMES: [&'static str; CONTENT_DIM] = ["pos_x", "pos_y", "size", "hue"];

    /// I.i.d. uniform on `[-1, 1]^4`.
    pub fn sample_uniform(rng: &mut SeedRng) -> Self {
        Self(std::array::from_fn(|_| rng.uniform_range(-1.0, 1.0)))
    }

    pub fn validate(&self) -> Result<()> {
        if self.0.iter().all(|v| v.is_finite() && (-1.0..=1.0).contains(v)) {
            Ok(())
        } else {
            Err(Error::Config(format!("content {:?} outside [-1, 1]", self.0)))
        }
    }
}

/// Dataset-specific rendering transform.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StyleMap {
    /// Hue rotation in radians, `[-1, 1]`.
    pub palette_shift: f64,
    /// Gaussian blur radius in pixels, `[0, 4]`; sigma is half the radius.
    pub blur_radius: f64,
    /// Standard deviation of additive pixel noise, `[0, 0.25]`.
    pub noise: f64,
    /// Constant added to every pixel, `[-0.3, 0.3]`.
    pub brightness: f64,
}

impl StyleMap {
    pub fn identity() -> Self {
        Self { palette_shift: 0.0, blur_radius: 0.0, noise: 0.0, brightness: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        let check = |name: &str, v: f64, lo: f64, hi: f64| {
            if v.is_finite() && (lo..=hi).contains(&v) {
                Ok(())
            } else {
                Err(Error::Config(format!("style parameter {name}={v} outside [{lo}, {hi}]")))
            }
        };
        check("palette_shift", self.palette_shift, -1.0, 1.0)?;
        check("blur_radius", self.blur_radius, 0.0, 4.0)?;
        check("noise", self.noise, 0.0, 0.25)?;
        check("brightness", self.brightness, -0.3, 0.3)
    }

    pub fn describe(&self) -> String {
        format!(
            "blur {:.2}px, noise {:.3}, brightness {:+.2}, palette shift {:+.2} rad",
            self.blur_radius, self.noise, self.brightness, self.palette_shift
        )
    }
}

/// Curation bias: content with `content[dim] > 0` is kept with relative weight
/// `positive`, the rest with weight `negative` (rejection sampling).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Skew {
    pub dim: usize,
    pub positive: f64,
    pub negative: f64,
}

impl Skew {
    pub fn validate(&self) -> Result<()> {
        let ok = |w: f64| w.is_finite() && w > 0.0;
        if self.dim >= CONTENT_DIM || !ok(self.positive) || !ok(self.negative) {
            return Err(Error::Config(format!("invalid skew {self:?}")));
        }
        Ok(())
    }

    fn accept_probability(&self, c: &ContentFactor) -> f64 {
        let w = if c.0[self.dim] > 0.0 { self.positive } else { self.negative };
        w / self.positive.max(self.negative)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub name: String,
    pub id: usize,
    pub style: StyleMap,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub skew: Option<Skew>,
    pub count: usize,
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() {
            return Err(Error::Config("dataset name must not be empty".into()));
        }
        self.style.validate()?;
        if let Some(skew) = &self.skew {
            skew.validate()?;
        }
        Ok(())
    }

    /// Draws content from this dataset's (possibly skewed) marginal.
    pub fn sample_content(&self, rng: &mut SeedRng) -> ContentFactor {
        loop {
            let c = ContentFactor::sample_uniform(rng);
            match &self.skew {
                None => return c,
                Some(skew) => {
                    if rng.uniform() < skew.accept_probability(&c) {
                        return c;
                    }
                }
            }
        }
    }
}

/// Checks the registry invariants: at least two datasets, ids `0..n` in order,
/// unique names, valid styles.
pub fn validate_registry(specs: &[DatasetSpec]) -> Result<()> {
    if specs.len() < 2 {
        return Err(Error::Config(format!("a family needs at least 2 datasets, got {}", specs.len())));
    }
    let mut names = HashSet::new();
    for (i, spec) in specs.iter().enumerate() {
        spec.validate()?;
        if spec.id != i {
            return Err(Error::Config(format!("dataset `{}` has id {}, expected {i}", spec.name, spec.id)));
        }
        if !names.insert(spec.name.as_str()) {
            return Err(Error::Config(format!("duplicate dataset name `{}`", spec.name)));
        }
    }
    Ok(())
}

/// Three datasets sharing content: a blurred, noisy and slightly dimmed one, a
/// sharp clean one, and a brighter re-colored one that over-represents large
/// discs 2:1.
pub fn default_family(count: usize) -> Vec<DatasetSpec> {
    vec![
        DatasetSpec {
            name: "lowq".into(),
            id: 0,
            style: StyleMap { palette_shift: 0.0, blur_radius: 2.0, noise: 0.1, brightness: -0.08 },
            skew: None,
            count,
        },
        DatasetSpec {
            name: "highq".into(),
            id: 1,
            style: StyleMap { palette_shift: 0.0, blur_radius: 0.0, noise: 0.01, brightness: 0.0 },
            skew: None,
            count,
        },
        DatasetSpec {
            name: "skewed".into(),
            id: 2,
            style: StyleMap { palette_shift: 0.6, blur_radius: 1.0, noise: 0.01, brightness: 0.15 },
            skew: Some(Skew { dim: 2, positive: 2.0, negative: 1.0 }),
            count,
        },
    ]
}

#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    /// `16 x 16 x 3`, row-major with interleaved channels, values in `[0, 1]`.
    pub pixels: Vec<f64>,
    pub label: usize,
    pub content: ContentFactor,
}

fn disc_color(hue: f64) -> [f64; CHANNELS] {
    std::array::from_fn(|ch| COLOR_MID + COLOR_AMPLITUDE * (hue - 2.0 * std::f64::consts::PI * ch as f64 / 3.0).cos())
}

fn gaussian_kernel(radius: f64) -> Vec<f64> {
    let sigma = radius / 2.0;
    let half = (3.0 * sigma).ceil() as i64;
    let mut k: Vec<f64> = (-half..=half).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= total);
    k
}

/// Separable Gaussian blur with edge replication.
fn blur(img: &mut [f64], radius: f64) {
    let kernel = gaussian_kernel(radius);
    let half = (kernel.len() / 2) as i64;
    let n = IMAGE_SIDE as i64;
    let idx = |y: i64, x: i64, ch: usize| ((y * n + x) as usize) * CHANNELS + ch;
    for horizontal in [true, false] {
        let src = img.to_vec();
        for y in 0..n {
            for x in 0..n {
                for ch in 0..CHANNELS {
                    let mut acc = 0.0;
                    for (k, w) in kernel.iter().enumerate() {
                        let o = k as i64 - half;
                        let (sy, sx) =
                            if horizontal { (y, (x + o).clamp(0, n - 1)) } else { ((y + o).clamp(0, n - 1), x) };
                        acc += w * src[idx(sy, sx, ch)];
                    }
                    img[idx(y, x, ch)] = acc;
                }
            }
        }
    }
}

/// Renders `content` under `style`. Deterministic in `(content, style, seed)`;
/// the seed only drives the additive noise.
pub fn render_pixels(content: &ContentFactor, style: &StyleMap, seed: u64) -> Result<Vec<f64>> {
    content.validate()?;
    style.validate()?;
    let [px, py, size, hue] = content.0;
    let center = (IMAGE_SIDE as f64 - 1.0) / 2.0;
    let (cx, cy) = (center + POSITION_SPAN * px, center + POSITION_SPAN * py);
    let radius = BASE_RADIUS + RADIUS_SPAN * size;
    let color = disc_color(HUE_SPAN * hue + style.palette_shift);

    let mut img = vec![0.0; PIXELS];
    for y in 0..IMAGE_SIDE {
        for x in 0..IMAGE_SIDE {
            let dist = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)).sqrt();
            let cover = (radius - dist + 0.5).clamp(0.0, 1.0);
            for ch in 0..CHANNELS {
                img[(y * IMAGE_SIDE + x) * CHANNELS + ch] = BACKGROUND * (1.0 - cover) + color[ch] * cover;
            }
        }
    }
    if style.blur_radius > 0.0 {
        blur(&mut img, style.blur_radius);
    }
    let mut rng = SeedRng::new(seed);
    for v in img.iter_mut() {
        let noise = if style.noise > 0.0 { style.noise * rng.normal() } else { 0.0 };
        *v = (*v + style.brightness + noise).clamp(0.0, 1.0);
    }
    Ok(img)
}

pub fn render(content: &ContentFactor, spec: &DatasetSpec, seed: u64) -> Result<Observation> {
    Ok(Observation { pixels: render_pixels(content, &spec.style, seed)?, label: spec.id, content: *content })
}

fn sample_stream(label: usize, index: usize) -> u64 {
    ((label as u64) << 32) | index as u64
}

/// Observation `index` of dataset `spec` in a family generated with `seed`.
pub fn regenerate(spec: &DatasetSpec, seed: u64, index: usize) -> Result<Observation> {
    let mut rng = SeedRng::with_stream(seed, sample_stream(spec.id, index));
    let content = spec.sample_content(&mut rng);
    render(&content, spec, rng.next_u64())
}

/// All observations of one dataset, generated in parallel. Each sample has its
/// own random stream, so the result does not depend on scheduling.
pub fn render_dataset(spec: &DatasetSpec, seed: u64) -> Result<Vec<Observation>> {
    spec.validate()?;
    (0..spec.count).into_par_iter().map(|i| regenerate(spec, seed, i)).collect()
}

/// Union of all datasets of a family, in registry order.
pub fn render_family(specs: &[DatasetSpec], seed: u64) -> Result<Vec<Observation>> {
    validate_registry(specs)?;
    let mut all = Vec::with_capacity(specs.iter().map(|s| s.count).sum());
    for spec in specs {
        all.extend(render_dataset(spec, seed)?);
    }
    Ok(all)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    #[serde(flatten)]
    pub spec: DatasetSpec,
    pub file: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub seed: u64,
    pub image: ImageShape,
    pub content_dim: usize,
    pub datasets: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn specs(&self) -> Vec<DatasetSpec> {
        self.datasets.iter().map(|e| e.spec.clone()).collect()
    }
}

/// Input format for `gen`: the datasets to render.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FamilySpec {
    pub datasets: Vec<DatasetSpec>,
}

pub fn write_samples<W: Write>(w: &mut W, observations: &[Observation]) -> Result<()> {
    w.write_all(&(observations.len() as u32).to_le_bytes())?;
    for obs in observations {
        for v in &obs.pixels {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&(obs.label as u32).to_le_bytes())?;
        for v in &obs.content.0 {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    let mut buf = [0u8; 8];
    read_exact(r, &mut buf)?;
    Ok(f64::from_le_bytes(buf))
}

pub fn read_samples<R: Read>(r: &mut R) -> Result<Vec<Observation>> {
    let count = read_u32(r)? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let pixels = (0..PIXELS).map(|_| read_f64(r)).collect::<Result<Vec<_>>>()?;
        let label = read_u32(r)? as usize;
        let mut content = [0.0; CONTENT_DIM];
        for c in content.iter_mut() {
            *c = read_f64(r)?;
        }
        out.push(Observation { pixels, label, content: ContentFactor(content) });
    }
    Ok(out)
}

/// Renders every dataset and writes the sample files plus `manifest.json` into `dir`.
pub fn generate_family(specs: &[DatasetSpec], seed: u64, dir: &Path) -> Result<Manifest> {
    validate_registry(specs)?;
    fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(specs.len());
    for spec in specs {
        let observations = render_dataset(spec, seed)?;
        let file = format!("{}.bin", spec.name);
        let mut w = BufWriter::new(File::create(dir.join(&file))?);
        write_samples(&mut w, &observations)?;
        w.flush()?;
        entries.push(ManifestEntry { spec: spec.clone(), file });
    }
    let manifest = Manifest {
        format_version: MANIFEST_VERSION,
        seed,
        image: ImageShape { height: IMAGE_SIDE, width: IMAGE_SIDE, channels: CHANNELS },
        content_dim: CONTENT_DIM,
        datasets: entries,
    };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let manifest: Manifest = serde_json::from_slice(&fs::read(dir.join("manifest.json"))?)?;
    if manifest.format_version != MANIFEST_VERSION {
        return Err(Error::Version { found: manifest.format_version, expected: MANIFEST_VERSION });
    }
    validate_registry(&manifest.specs())?;
    Ok(manifest)
}

/// Manifest plus the union of all sample files, in registry order.
pub fn load_family(dir: &Path) -> Result<(Manifest, Vec<Observation>)> {
    let manifest = read_manifest(dir)?;
    let mut all = Vec::new();
    for entry in &manifest.datasets {
        let mut r = BufReader::new(File::open(dir.join(&entry.file))?);
        let obs = read_samples(&mut r)?;
        if obs.len() != entry.spec.count || obs.iter().any(|o| o.label != entry.spec.id) {
            return Err(Error::Format(format!("sample file {} disagrees with manifest", entry.file)));
        }
        all.extend(obs);
    }
    Ok((manifest, all))
}

/// Stratified split: within each label a seeded permutation sends
/// `round(ratio * n)` samples to the first partition. Returns indices.
pub fn split_indices(labels: &[usize], ratio: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Config(format!("split ratio {ratio} must be in (0, 1)")));
    }
    let n_labels = labels.iter().copied().max().map_or(0, |m| m + 1);
    let (mut first, mut second) = (Vec::new(), Vec::new());
    for label in 0..n_labels {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == label).collect();
        if idx.is_empty() {
            continue;
        }
        SeedRng::with_stream(seed, label as u64).shuffle(&mut idx);
        let cut = (ratio * idx.len() as f64).round() as usize;
        if cut == 0 || cut == idx.len() {
            return Err(Error::EmptySplit(label));
        }
        first.extend_from_slice(&idx[..cut]);
        second.extend_from_slice(&idx[cut..]);
    }
    Ok((first, second))
}

pub fn split(observations: &[Observation], ratio: f64, seed: u64) -> Result<(Vec<Observation>, Vec<Observation>)> {
    let labels: Vec<usize> = observations.iter().map(|o| o.label).collect();
    let (a, b) = split_indices(&labels, ratio, seed)?;
    let pick = |idx: Vec<usize>| idx.into_iter().map(|i| observations[i].clone()).collect();
    Ok((pick(a), pick(b)))
}

/// `[n, 768]` matrix of pixels.
pub fn pixel_matrix(observations: &[Observation]) -> Tensor<f64> {
    let data = observations.iter().flat_map(|o| o.pixels.iter().copied()).collect();
    Tensor::new(vec![observations.len(), PIXELS], data).expect("fixed pixel count")
}

pub fn labels(observations: &[Observation]) -> Vec<usize> {
    observations.iter().map(|o| o.label).collect()
}
