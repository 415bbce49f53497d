//! Bias and transfer metrics: prior match of content codes, a classifier
//! probe for label information, Gaussian 2-Wasserstein distances, a content
//! regressor against ground truth, and image style statistics.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::{self, Observation, CHANNELS, CONTENT_DIM, IMAGE_SIDE};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::train::encode_all;
use crate::transfer;

fn to_matrix(t: &Tensor<f64>) -> DMatrix<f64> {
    DMatrix::from_row_slice(t.rows(), t.cols(), t.data())
}

fn mean_and_cov(x: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = x.nrows() as f64;
    let mean = x.row_mean().transpose();
    let mut centered = x.clone();
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let cov = centered.transpose() * &centered / (n - 1.0);
    (mean, cov)
}

/// `(‖mean‖₂, ‖cov − I‖_F)` of the rows of `z` (unbiased covariance).
pub fn z_normality(z: &Tensor<f64>) -> Result<(f64, f64)> {
    if z.rank() != 2 || z.rows() < 2 {
        return Err(Error::TooFewSamples { needed: 2, got: if z.rank() == 2 { z.rows() } else { 0 } });
    }
    let (mean, cov) = mean_and_cov(&to_matrix(z));
    let d = z.cols();
    Ok((mean.norm(), (cov - DMatrix::identity(d, d)).norm()))
}

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// Ridge added to both covariances before taking square roots.
pub const W2_RIDGE: f64 = 1e-6;

/// Squared 2-Wasserstein distance between Gaussian fits of the rows of `a`
/// and `b`: `‖μa−μb‖² + tr(Σa + Σb − 2 (Σb^½ Σa Σb^½)^½)`.
pub fn gaussian_w2(a: &Tensor<f64>, b: &Tensor<f64>) -> Result<f64> {
    if a.rank() != 2 || b.rank() != 2 || a.cols() != b.cols() {
        return Err(Error::Shape(format!("feature shapes {:?} and {:?}", a.shape(), b.shape())));
    }
    let d = a.cols();
    for t in [a, b] {
        if t.rows() < d + 1 {
            return Err(Error::TooFewSamples { needed: d + 1, got: t.rows() });
        }
    }
    let ridge = DMatrix::identity(d, d) * W2_RIDGE;
    let (ma, ca) = mean_and_cov(&to_matrix(a));
    let (mb, cb) = mean_and_cov(&to_matrix(b));
    let (ca, cb) = (ca + &ridge, cb + &ridge);
    let sb = sym_sqrt(&cb);
    let cross = sym_sqrt(&(&sb * &ca * &sb));
    let w2 = (ma - mb).norm_squared() + (ca.trace() + cb.trace() - 2.0 * cross.trace());
    Ok(w2.max(0.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelProbe {
    pub accuracy: f64,
    /// Test recall of each label.
    pub per_label_accuracy: Vec<f64>,
    /// `H(y) − cross-entropy` on the test half, floored at 0 (nats).
    pub mi_lower_bound: f64,
    pub label_entropy: f64,
    pub chance: f64,
}

/// L2 penalty of the probe classifier, per training sample.
pub const PROBE_L2: f64 = 1e-4;

/// Multinomial logistic regression fitted by Newton's method. Rows of `x`
/// get a trailing constant feature. Returns weights `[features + 1, k]`.
fn fit_logistic(x: &DMatrix<f64>, y: &[usize], k: usize, l2: f64) -> Result<DMatrix<f64>> {
    let (n, p) = (x.nrows(), x.ncols() + 1);
    let xb = x.clone().insert_column(p - 1, 1.0);
    let lambda = l2 * n as f64;
    let objective = |w: &DMatrix<f64>| {
        let probs = softmax(&(&xb * w));
        let nll: f64 = (0..n).map(|i| -probs[(i, y[i])].max(1e-300).ln()).sum();
        nll + 0.5 * lambda * w.norm_squared()
    };
    let mut w = DMatrix::zeros(p, k);
    let mut current = objective(&w);
    for _ in 0..100 {
        let probs = softmax(&(&xb * &w));
        let mut resid = probs.clone();
        for i in 0..n {
            resid[(i, y[i])] -= 1.0;
        }
        let grad = xb.transpose() * resid + &w * lambda;
        let mut hess = DMatrix::<f64>::identity(p * k, p * k) * lambda;
        for i in 0..n {
            let xi = xb.row(i);
            let outer = xi.transpose() * xi;
            for a in 0..k {
                for b in a..k {
                    let c = probs[(i, a)] * (if a == b { 1.0 } else { 0.0 } - probs[(i, b)]);
                    if c != 0.0 {
                        let mut block = hess.view_mut((a * p, b * p), (p, p));
                        block += &outer * c;
                    }
                }
            }
        }
        for a in 0..k {
            for b in 0..a {
                let upper = hess.view((b * p, a * p), (p, p)).transpose();
                hess.view_mut((a * p, b * p), (p, p)).copy_from(&upper);
            }
        }
        // column-major flattening: class a occupies entries a*p .. a*p+p
        let g = DVector::from_column_slice(grad.as_slice());
        let step =
            hess.cholesky().ok_or_else(|| Error::NonFinite("probe Hessian is not positive definite".into()))?.solve(&g);
        let step = DMatrix::from_column_slice(p, k, step.as_slice());
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..30 {
            let candidate = &w - &step * t;
            let value = objective(&candidate);
            if value <= current {
                w = candidate;
                current = value;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted || step.amax() * t < 1e-10 {
            break;
        }
    }
    if w.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("probe weights".into()));
    }
    Ok(w)
}

fn softmax(logits: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = logits.clone();
    for mut row in out.row_iter_mut() {
        let m = row.max();
        row.apply(|v| *v = (*v - m).exp());
        let s = row.sum();
        row /= s;
    }
    out
}

fn entropy(labels: &[usize], k: usize) -> f64 {
    let n = labels.len() as f64;
    let mut counts = vec![0usize; k];
    labels.iter().for_each(|&l| counts[l] += 1);
    counts.iter().filter(|&&c| c > 0).map(|&c| c as f64 / n).map(|p| -p * p.ln()).sum()
}

/// Trains a multinomial logistic classifier on a stratified half of `(z, y)`
/// and evaluates it on the other half.
pub fn label_probe(z: &Tensor<f64>, labels: &[usize], seed: u64) -> Result<LabelProbe> {
    if z.rank() != 2 || z.rows() != labels.len() {
        return Err(Error::Shape(format!("{:?} codes for {} labels", z.shape(), labels.len())));
    }
    let k = labels.iter().copied().max().map_or(0, |m| m + 1);
    let present = (0..k).filter(|l| labels.contains(l)).count();
    if present < 2 {
        return Err(Error::Config("label probe needs at least 2 labels".into()));
    }
    let (train, test) = data::split_indices(labels, 0.5, seed)?;
    let pick = |idx: &[usize]| {
        let m = DMatrix::from_fn(idx.len(), z.cols(), |r, c| z.get(idx[r], c));
        let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
        (m, y)
    };
    let (x_train, y_train) = pick(&train);
    let (x_test, y_test) = pick(&test);
    let w = fit_logistic(&x_train, &y_train, k, PROBE_L2)?;
    let probs = softmax(&(x_test.clone().insert_column(z.cols(), 1.0) * w));

    let mut correct = vec![0usize; k];
    let mut totals = vec![0usize; k];
    let mut ce = 0.0;
    for (i, &y) in y_test.iter().enumerate() {
        let row = probs.row(i);
        let predicted = row.iter().enumerate().fold(0, |best, (j, &v)| if v > row[best] { j } else { best });
        totals[y] += 1;
        correct[y] += usize::from(predicted == y);
        ce -= row[y].max(1e-300).ln();
    }
    ce /= y_test.len() as f64;
    let h = entropy(&y_test, k);
    Ok(LabelProbe {
        accuracy: correct.iter().sum::<usize>() as f64 / y_test.len() as f64,
        per_label_accuracy: correct
            .iter()
            .zip(&totals)
            .map(|(&c, &t)| if t == 0 { 0.0 } else { c as f64 / t as f64 })
            .collect(),
        mi_lower_bound: (h - ce).max(0.0),
        label_entropy: h,
        chance: 1.0 / present as f64,
    })
}

/// Ridge penalty of the content regressor.
pub const CONTENT_RIDGE: f64 = 1e-3;

/// Ridge regressor from autoencoder codes to the ground-truth content factor,
/// using a constant, linear and pairwise-product features of standardized codes.
#[derive(Clone, Debug, PartialEq)]
pub struct ContentProbe {
    mean: Vec<f64>,
    std: Vec<f64>,
    weights: DMatrix<f64>,
}

fn quadratic_features(codes: &[f64], mean: &[f64], std: &[f64]) -> Vec<f64> {
    let u: Vec<f64> = codes.iter().zip(mean).zip(std).map(|((c, m), s)| (c - m) / s).collect();
    let mut f = Vec::with_capacity(1 + u.len() * (u.len() + 3) / 2);
    f.push(1.0);
    f.extend(&u);
    for i in 0..u.len() {
        for j in i..u.len() {
            f.push(u[i] * u[j]);
        }
    }
    f
}

impl ContentProbe {
    /// Fits on codes `[n, d]` and the matching content factors.
    pub fn fit(codes: &Tensor<f64>, content: &[[f64; CONTENT_DIM]]) -> Result<Self> {
        let (n, d) = (codes.rows(), codes.cols());
        if n != content.len() {
            return Err(Error::Shape(format!("{n} codes for {} targets", content.len())));
        }
        let n_features = 1 + d * (d + 3) / 2;
        if n <= n_features {
            return Err(Error::TooFewSamples { needed: n_features + 1, got: n });
        }
        for j in 0..CONTENT_DIM {
            if variance(content.iter().map(|c| c[j])) <= 1e-12 {
                return Err(Error::ZeroVariance(j));
            }
        }
        let mean: Vec<f64> = (0..d).map(|j| (0..n).map(|r| codes.get(r, j)).sum::<f64>() / n as f64).collect();
        let std: Vec<f64> = (0..d).map(|j| (variance((0..n).map(|r| codes.get(r, j))).sqrt()).max(1e-12)).collect();
        let mut xtx = DMatrix::<f64>::zeros(n_features, n_features);
        let mut xty = DMatrix::<f64>::zeros(n_features, CONTENT_DIM);
        for (r, target) in content.iter().enumerate() {
            let f = DVector::from_vec(quadratic_features(codes.row(r), &mean, &std));
            xtx.syger(1.0, &f, &f, 1.0);
            for (j, t) in target.iter().enumerate() {
                xty.column_mut(j).axpy(*t, &f, 1.0);
            }
        }
        xtx.fill_upper_triangle_with_lower_triangle();
        for i in 1..n_features {
            xtx[(i, i)] += CONTENT_RIDGE * n as f64;
        }
        let weights =
            xtx.cholesky().ok_or_else(|| Error::NonFinite("content probe normal equations".into()))?.solve(&xty);
        Ok(Self { mean, std, weights })
    }

    pub fn predict(&self, codes: &Tensor<f64>) -> Result<Vec<[f64; CONTENT_DIM]>> {
        if codes.rank() != 2 || codes.cols() != self.mean.len() {
            return Err(Error::Shape(format!("expected [n, {}] codes, got {:?}", self.mean.len(), codes.shape())));
        }
        Ok((0..codes.rows())
            .map(|r| {
                let f = DVector::from_vec(quadratic_features(codes.row(r), &self.mean, &self.std));
                let out = self.weights.transpose() * f;
                std::array::from_fn(|j| out[j])
            })
            .collect())
    }
}

fn variance(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    values.map(|v| (v - mean).powi(2)).sum::<f64>() / n
}

/// Coefficient of determination per content dimension.
pub fn r2(predicted: &[[f64; CONTENT_DIM]], truth: &[[f64; CONTENT_DIM]]) -> Result<[f64; CONTENT_DIM]> {
    if predicted.len() != truth.len() || truth.len() < 2 {
        return Err(Error::Shape(format!("{} predictions for {} targets", predicted.len(), truth.len())));
    }
    let mut out = [0.0; CONTENT_DIM];
    for (j, o) in out.iter_mut().enumerate() {
        let mean = truth.iter().map(|t| t[j]).sum::<f64>() / truth.len() as f64;
        let ss_tot: f64 = truth.iter().map(|t| (t[j] - mean).powi(2)).sum();
        if ss_tot <= 1e-12 {
            return Err(Error::ZeroVariance(j));
        }
        let ss_res: f64 = predicted.iter().zip(truth).map(|(p, t)| (p[j] - t[j]).powi(2)).sum();
        *o = 1.0 - ss_res / ss_tot;
    }
    Ok(out)
}

/// Mean squared discrete Laplacian (4-neighbour stencil, edge replication)
/// over all pixels and channels of one HWC image.
pub fn laplacian_energy(pixels: &[f64]) -> f64 {
    let n = IMAGE_SIDE as i64;
    let at = |y: i64, x: i64, ch: usize| pixels[((y.clamp(0, n - 1) * n + x.clamp(0, n - 1)) as usize) * CHANNELS + ch];
    let mut total = 0.0;
    for y in 0..n {
        for x in 0..n {
            for ch in 0..CHANNELS {
                let lap =
                    at(y - 1, x, ch) + at(y + 1, x, ch) + at(y, x - 1, ch) + at(y, x + 1, ch) - 4.0 * at(y, x, ch);
                total += lap * lap;
            }
        }
    }
    total / pixels.len() as f64
}

pub fn brightness(pixels: &[f64]) -> f64 {
    pixels.iter().sum::<f64>() / pixels.len() as f64
}

/// Style features of one image: mean of each channel and the square root of
/// its Laplacian energy.
pub fn style_features(pixels: &[f64]) -> [f64; CHANNELS + 1] {
    let mut f = [0.0; CHANNELS + 1];
    for px in pixels.chunks(CHANNELS) {
        for (acc, v) in f.iter_mut().zip(px) {
            *acc += v;
        }
    }
    let count = (pixels.len() / CHANNELS) as f64;
    f.iter_mut().take(CHANNELS).for_each(|v| *v /= count);
    f[CHANNELS] = laplacian_energy(pixels).sqrt();
    f
}

/// `[n, 4]` style feature matrix of an image batch `[n, 768]`.
pub fn style_matrix(pixels: &Tensor<f64>) -> Tensor<f64> {
    let data = (0..pixels.rows()).flat_map(|r| style_features(pixels.row(r))).collect();
    Tensor::new(vec![pixels.rows(), CHANNELS + 1], data).expect("sized buffer")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StyleStats {
    pub brightness: f64,
    pub laplacian_energy: f64,
}

pub fn style_stats(pixels: &Tensor<f64>) -> StyleStats {
    let n = pixels.rows().max(1) as f64;
    StyleStats {
        brightness: (0..pixels.rows()).map(|r| brightness(pixels.row(r))).sum::<f64>() / n,
        laplacian_energy: (0..pixels.rows()).map(|r| laplacian_energy(pixels.row(r))).sum::<f64>() / n,
    }
}

/// Two-sided exact sign test on paired differences (zeros dropped).
pub fn sign_test(differences: &[f64]) -> f64 {
    let positive = differences.iter().filter(|&&d| d > 0.0).count();
    let n = differences.iter().filter(|&&d| d != 0.0).count();
    if n == 0 {
        return 1.0;
    }
    let k = positive.min(n - positive);
    // P(X <= k) for X ~ Binomial(n, 1/2), summed in log space
    let mut log_c = 0.0;
    let mut terms = Vec::with_capacity(k + 1);
    for i in 0..=k {
        if i > 0 {
            log_c += ((n - i + 1) as f64).ln() - (i as f64).ln();
        }
        terms.push(log_c - n as f64 * std::f64::consts::LN_2);
    }
    let m = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let tail = m.exp() * terms.iter().map(|t| (t - m).exp()).sum::<f64>();
    (2.0 * tail).min(1.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetStyle {
    pub name: String,
    pub real: StyleStats,
    pub reconstructed: StyleStats,
    pub sampled: StyleStats,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairMetrics {
    pub from: String,
    pub to: String,
    /// Content regressor R² of projected images against source content.
    pub content_r2: Vec<f64>,
    pub content_r2_mean: f64,
    /// Gaussian W2 of projected style features to the target and source datasets.
    pub style_w2_target: f64,
    pub style_w2_source: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiasReport {
    pub datasets: Vec<String>,
    pub n_evaluated: usize,
    pub z_mean_norm: f64,
    pub z_cov_fro_dist: f64,
    /// Label probe on content codes `z`.
    pub label_probe: LabelProbe,
    /// Label probe on the standardized representations before the flow.
    pub representation_probe: LabelProbe,
    /// Symmetric matrix of Gaussian W2 distances between per-dataset `z` distributions.
    pub z_distance: Vec<Vec<f64>>,
    /// Content regressor R² on unmodified held-out images.
    pub content_r2_real: Vec<f64>,
    pub pairs: Vec<PairMetrics>,
    pub style: Vec<DatasetStyle>,
}

impl BiasReport {
    /// The distance matrix as CSV with a header row of dataset names.
    pub fn distance_csv(&self) -> String {
        let mut out = format!("dataset,{}\n", self.datasets.join(","));
        for (name, row) in self.datasets.iter().zip(&self.z_distance) {
            let cells: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
            out.push_str(&format!("{name},{}\n", cells.join(",")));
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub seed: u64,
    /// Samples drawn per dataset for sampled style statistics.
    pub samples_per_dataset: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { seed: 0, samples_per_dataset: 500 }
    }
}

fn rows_of(t: &Tensor<f64>, idx: &[usize]) -> Tensor<f64> {
    let data = idx.iter().flat_map(|&i| t.row(i).iter().copied()).collect();
    Tensor::new(vec![idx.len(), t.cols()], data).expect("row subset")
}

/// Full evaluation of a trained checkpoint on held-out observations with
/// ground-truth content.
pub fn evaluate(ck: &Checkpoint, observations: &[Observation], config: &EvalConfig) -> Result<BiasReport> {
    let flow = ck.flow()?;
    let k = ck.n_labels();
    let labels = data::labels(observations);
    if let Some(&l) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::UnknownLabel(l));
    }
    let pixels = data::pixel_matrix(observations);
    let x = transfer::represent(ck, &pixels)?;
    let (z, _) = flow.forward(&x, &labels)?;
    let (z_mean_norm, z_cov_fro_dist) = z_normality(&z)?;
    let z_probe = label_probe(&z, &labels, config.seed)?;
    let representation_probe = label_probe(&x, &labels, config.seed)?;

    let by_label: Vec<Vec<usize>> = (0..k).map(|l| (0..labels.len()).filter(|&i| labels[i] == l).collect()).collect();
    let mut z_distance = vec![vec![0.0; k]; k];
    for a in 0..k {
        for b in a + 1..k {
            let d = gaussian_w2(&rows_of(&z, &by_label[a]), &rows_of(&z, &by_label[b]))?;
            z_distance[a][b] = d;
            z_distance[b][a] = d;
        }
    }

    // content probe: fit on one half, evaluate on the other
    let (fit_idx, test_idx) = data::split_indices(&labels, 0.5, config.seed)?;
    let codes = encode_all(&ck.autoencoder, observations)?;
    let content: Vec<[f64; CONTENT_DIM]> = observations.iter().map(|o| o.content.0).collect();
    let pick_content = |idx: &[usize]| idx.iter().map(|&i| content[i]).collect::<Vec<_>>();
    let probe = ContentProbe::fit(&rows_of(&codes, &fit_idx), &pick_content(&fit_idx))?;
    let content_r2_real = r2(&probe.predict(&rows_of(&codes, &test_idx))?, &pick_content(&test_idx))?.to_vec();

    let test_by_label: Vec<Vec<usize>> =
        (0..k).map(|l| test_idx.iter().copied().filter(|&i| labels[i] == l).collect()).collect();
    let recon: Vec<Tensor<f64>> =
        test_by_label.iter().map(|idx| transfer::render_codes(ck, &rows_of(&x, idx))).collect::<Result<_>>()?;
    let recon_features: Vec<Tensor<f64>> = recon.iter().map(style_matrix).collect();

    let names: Vec<String> = ck.registry.datasets.iter().map(|d| d.name.clone()).collect();
    let mut pairs = Vec::new();
    for from in 0..k {
        for to in 0..k {
            if from == to {
                continue;
            }
            let idx = &test_by_label[from];
            let (_, x_target) =
                transfer::project_codes(ck, &rows_of(&x, idx), &vec![from; idx.len()], &vec![to; idx.len()])?;
            let projected = transfer::render_codes(ck, &x_target)?;
            let predicted = probe.predict(&ck.autoencoder.encode(&projected)?)?;
            let r = r2(&predicted, &pick_content(idx))?;
            let features = style_matrix(&projected);
            pairs.push(PairMetrics {
                from: names[from].clone(),
                to: names[to].clone(),
                content_r2: r.to_vec(),
                content_r2_mean: r.iter().sum::<f64>() / CONTENT_DIM as f64,
                style_w2_target: gaussian_w2(&features, &recon_features[to])?,
                style_w2_source: gaussian_w2(&features, &recon_features[from])?,
            });
        }
    }

    let mut style = Vec::new();
    for label in 0..k {
        let real = rows_of(&pixels, &by_label[label]);
        let sampled = transfer::sample(ck, label, config.samples_per_dataset, config.seed)?;
        style.push(DatasetStyle {
            name: names[label].clone(),
            real: style_stats(&real),
            reconstructed: style_stats(&recon[label]),
            sampled: style_stats(&sampled),
        });
    }

    Ok(BiasReport {
        datasets: names,
        n_evaluated: observations.len(),
        z_mean_norm,
        z_cov_fro_dist,
        label_probe: z_probe,
        representation_probe,
        z_distance,
        content_r2_real,
        pairs,
        style,
    })
}
