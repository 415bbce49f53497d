use bias_lens::data::{self, CONTENT_DIM};
use bias_lens::metrics::{self, ContentProbe};
use bias_lens::tensor::Tensor;
use bias_lens::{Error, SeedRng};
use proptest::prelude::*;

fn gaussian(n: usize, mean: &[f64], std: &[f64], rng: &mut SeedRng) -> Tensor<f64> {
    let d = mean.len();
    let data = (0..n * d).map(|i| mean[i % d] + std[i % d] * rng.normal()).collect();
    Tensor::new(vec![n, d], data).unwrap()
}

#[test]
fn z_normality_of_scaled_normal_draws() {
    // N(0, 4I): cov - I = 3I, so the Frobenius distance is 3 sqrt(d)
    let d = 16;
    let mut rng = SeedRng::new(1);
    let z = gaussian(40_000, &vec![0.0; d], &vec![2.0; d], &mut rng);
    let (mean_norm, dist) = metrics::z_normality(&z).unwrap();
    assert!(mean_norm < 0.06, "{mean_norm}");
    assert!((dist - 3.0 * (d as f64).sqrt()).abs() < 0.3, "{dist}");
}

#[test]
fn z_normality_of_standard_normal_draws_is_near_zero() {
    // Monte-Carlo floor of ||cov - I||_F is about sqrt(d (d + 1) / n)
    let d = 16;
    let n = 12_000;
    let mut rng = SeedRng::new(2);
    let z = gaussian(n, &vec![0.0; d], &vec![1.0; d], &mut rng);
    let (mean_norm, dist) = metrics::z_normality(&z).unwrap();
    let floor = ((d * (d + 1)) as f64 / n as f64).sqrt();
    assert!(mean_norm < 0.08);
    assert!(dist < 1.5 * floor, "{dist} vs {floor}");
}

#[test]
fn w2_of_diagonal_gaussians_matches_closed_form() {
    // diagonal covariances commute: W2^2 = |m1 - m2|^2 + sum (s1 - s2)^2
    let mut rng = SeedRng::new(3);
    let a = gaussian(30_000, &[0.0, 0.0], &[1.0, 2.0], &mut rng);
    let b = gaussian(30_000, &[1.0, 0.0], &[2.0, 1.0], &mut rng);
    let expected = 1.0 + 1.0 + 1.0;
    let w2 = metrics::gaussian_w2(&a, &b).unwrap();
    assert!((w2 - expected).abs() < 0.1, "{w2}");
}

#[test]
fn label_probe_on_independent_codes_is_at_chance() {
    let mut rng = SeedRng::new(4);
    let n = 3000;
    let z = gaussian(n, &[0.0; 8], &[1.0; 8], &mut rng);
    let labels: Vec<usize> = (0..n).map(|i| i % 3).collect();
    let probe = metrics::label_probe(&z, &labels, 0).unwrap();
    assert!((probe.accuracy - 1.0 / 3.0).abs() < 0.05, "{}", probe.accuracy);
    assert!(probe.mi_lower_bound < 0.02);
    assert!((probe.label_entropy - 3f64.ln()).abs() < 1e-12);
    assert_eq!(probe.chance, 1.0 / 3.0);
}

#[test]
fn label_probe_on_one_hot_codes_recovers_the_label_entropy() {
    let n = 600;
    let labels: Vec<usize> = (0..n).map(|i| i % 3).collect();
    let data = labels.iter().flat_map(|&l| (0..3).map(move |j| if j == l { 4.0 } else { 0.0 })).collect();
    let z = Tensor::new(vec![n, 3], data).unwrap();
    let probe = metrics::label_probe(&z, &labels, 1).unwrap();
    assert_eq!(probe.accuracy, 1.0);
    assert!(probe.per_label_accuracy.iter().all(|&a| a == 1.0));
    assert!((probe.mi_lower_bound - 3f64.ln()).abs() < 0.05, "{}", probe.mi_lower_bound);
}

fn binomial_two_sided(n: u64, k: u64) -> f64 {
    // direct sum of C(n, i) / 2^n for i <= min(k, n - k)
    let k = k.min(n - k);
    let mut total = 0.0;
    let mut c = 1.0f64;
    for i in 0..=k {
        if i > 0 {
            c = c * (n - i + 1) as f64 / i as f64;
        }
        total += c;
    }
    (2.0 * total / 2f64.powi(n as i32)).min(1.0)
}

#[test]
fn sign_test_matches_direct_binomial_sum() {
    for (pos, neg) in [(15usize, 5usize), (3, 17), (10, 10), (30, 1), (0, 12)] {
        let d: Vec<f64> =
            std::iter::repeat_n(1.0, pos).chain(std::iter::repeat_n(-0.5, neg)).chain([0.0, 0.0]).collect();
        let expected = binomial_two_sided((pos + neg) as u64, pos as u64);
        assert!((metrics::sign_test(&d) - expected).abs() < 1e-12, "{pos}/{neg}");
    }
}

#[test]
fn content_probe_recovers_quadratic_content() {
    let mut rng = SeedRng::new(6);
    let n = 2000;
    let codes = gaussian(n, &[0.0; 5], &[1.0; 5], &mut rng);
    let content: Vec<[f64; CONTENT_DIM]> = (0..n)
        .map(|i| {
            let r = codes.row(i);
            [0.5 * r[0], r[1] * r[2] * 0.3, 0.2 * r[3] - 0.1 * r[4], 0.4 * r[0] * r[0] - 0.4]
        })
        .collect();
    let probe = ContentProbe::fit(&codes, &content).unwrap();
    let r2 = metrics::r2(&probe.predict(&codes).unwrap(), &content).unwrap();
    assert!(r2.iter().all(|&v| v > 0.99), "{r2:?}");
}

#[test]
fn laplacian_energy_of_a_checkerboard() {
    // alternating 0/1 in one channel: interior pixels have |lap| = 4, edges
    // and corners fewer neighbours of the opposite colour
    let side = data::IMAGE_SIDE;
    let mut pixels = vec![0.0; data::PIXELS];
    for y in 0..side {
        for x in 0..side {
            pixels[(y * side + x) * 3] = ((x + y) % 2) as f64;
        }
    }
    let mut expected = 0.0;
    for y in 0..side {
        for x in 0..side {
            let edges =
                usize::from(x == 0) + usize::from(x == side - 1) + usize::from(y == 0) + usize::from(y == side - 1);
            // replicated edge neighbours equal the centre and contribute 0
            let opposite = 4 - edges;
            expected += (opposite * opposite) as f64;
        }
    }
    expected /= data::PIXELS as f64;
    assert!((metrics::laplacian_energy(&pixels) - expected).abs() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn w2_is_symmetric_and_nonnegative(seed in 0u64..1000, shift in -2.0f64..2.0, scale in 0.3f64..3.0) {
        let mut rng = SeedRng::new(seed);
        let a = gaussian(200, &[0.0, 0.0, 0.0], &[1.0, 1.0, 1.0], &mut rng);
        let b = gaussian(200, &[shift, 0.0, 1.0], &[scale, 1.0, 0.5], &mut rng);
        let ab = metrics::gaussian_w2(&a, &b).unwrap();
        let ba = metrics::gaussian_w2(&b, &a).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - ba).abs() < 1e-8 * (1.0 + ab));
        prop_assert!(metrics::gaussian_w2(&a, &a).unwrap() < 1e-9);
    }

    #[test]
    fn split_partitions_every_label(sizes in proptest::collection::vec(2usize..40, 2..5), ratio in 0.2f64..0.8, seed in 0u64..1000) {
        let labels: Vec<usize> = sizes.iter().enumerate().flat_map(|(l, &n)| std::iter::repeat_n(l, n)).collect();
        let cut = |n: usize| (ratio * n as f64).round() as usize;
        if let Some(l) = sizes.iter().position(|&n| cut(n) == 0 || cut(n) == n) {
            prop_assert!(matches!(data::split_indices(&labels, ratio, seed), Err(Error::EmptySplit(e)) if e == l));
            return Ok(());
        }
        let (a, b) = data::split_indices(&labels, ratio, seed).unwrap();
        let mut all: Vec<usize> = a.iter().chain(&b).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..labels.len()).collect::<Vec<_>>());
        for (l, &n) in sizes.iter().enumerate() {
            let in_a = a.iter().filter(|&&i| labels[i] == l).count();
            prop_assert_eq!(in_a, cut(n));
        }
    }
}
