use bias_lens::data::{self, ContentFactor, DatasetSpec, FamilySpec, Skew, StyleMap};
use bias_lens::metrics::brightness;
use bias_lens::{Error, SeedRng};

fn spec(name: &str, id: usize, style: StyleMap, skew: Option<Skew>, count: usize) -> DatasetSpec {
    DatasetSpec { name: name.into(), id, style, skew, count }
}

#[test]
fn brightness_bias_shifts_mean_brightness() {
    let bright = StyleMap { brightness: 0.2, ..StyleMap::identity() };
    let mut rng = SeedRng::new(11);
    let mut diff = 0.0;
    for i in 0..1000 {
        let c = ContentFactor::sample_uniform(&mut rng);
        let a = data::render_pixels(&c, &bright, i).unwrap();
        let b = data::render_pixels(&c, &StyleMap::identity(), i).unwrap();
        diff += brightness(&a) - brightness(&b);
    }
    let diff = diff / 1000.0;
    assert!((diff - 0.2).abs() < 0.02, "{diff}");
}

#[test]
fn skew_weights_set_the_fraction_of_positive_content() {
    // acceptance weight 3 for content[2] > 0 against 1 otherwise, on a
    // symmetric uniform marginal: P(size > 0) = 3 / (3 + 1)
    let s = spec("s", 0, StyleMap::identity(), Some(Skew { dim: 2, positive: 3.0, negative: 1.0 }), 0);
    let mut rng = SeedRng::new(5);
    let n = 8000;
    let positive = (0..n).filter(|_| s.sample_content(&mut rng).0[2] > 0.0).count();
    let frac = positive as f64 / n as f64;
    assert!((frac - 0.75).abs() < 0.02, "{frac}");
}

#[test]
fn unskewed_content_is_uniform_on_the_box() {
    let s = spec("s", 0, StyleMap::identity(), None, 0);
    let mut rng = SeedRng::new(6);
    let n = 20000;
    let mut mean = [0.0; 4];
    let mut sq = [0.0; 4];
    for _ in 0..n {
        let c = s.sample_content(&mut rng);
        for j in 0..4 {
            assert!((-1.0..=1.0).contains(&c.0[j]));
            mean[j] += c.0[j] / n as f64;
            sq[j] += c.0[j] * c.0[j] / n as f64;
        }
    }
    for j in 0..4 {
        // uniform on [-1, 1]: mean 0, second moment 1/3
        assert!(mean[j].abs() < 0.02);
        assert!((sq[j] - 1.0 / 3.0).abs() < 0.02);
    }
}

#[test]
fn generated_directories_are_identical_for_the_same_seed() {
    let specs = data::default_family(40);
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    data::generate_family(&specs, 7, a.path()).unwrap();
    data::generate_family(&specs, 7, b.path()).unwrap();
    let mut names: Vec<_> = std::fs::read_dir(a.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert_eq!(names.len(), 4);
    for name in names {
        assert_eq!(std::fs::read(a.path().join(&name)).unwrap(), std::fs::read(b.path().join(&name)).unwrap());
    }
    let c = tempfile::tempdir().unwrap();
    data::generate_family(&specs, 8, c.path()).unwrap();
    assert_ne!(std::fs::read(a.path().join("lowq.bin")).unwrap(), std::fs::read(c.path().join("lowq.bin")).unwrap());
}

#[test]
fn family_roundtrips_through_files() {
    let specs = data::default_family(25);
    let dir = tempfile::tempdir().unwrap();
    let manifest = data::generate_family(&specs, 3, dir.path()).unwrap();
    assert_eq!(manifest.specs(), specs);
    let (read, observations) = data::load_family(dir.path()).unwrap();
    assert_eq!(read, manifest);
    assert_eq!(observations, data::render_family(&specs, 3).unwrap());
    assert_eq!(observations[30], data::regenerate(&specs[1], 3, 5).unwrap());
}

#[test]
fn manifest_disagreement_is_detected() {
    let specs = data::default_family(10);
    let dir = tempfile::tempdir().unwrap();
    data::generate_family(&specs, 3, dir.path()).unwrap();
    let path = dir.path().join("manifest.json");
    let text = std::fs::read_to_string(&path).unwrap().replacen("\"count\": 10", "\"count\": 11", 1);
    std::fs::write(&path, text).unwrap();
    assert!(matches!(data::load_family(dir.path()), Err(Error::Format(_))));
}

#[test]
fn family_spec_parses_from_json() {
    let json = r#"{"datasets": [
        {"name": "a", "id": 0, "count": 5, "style": {"palette_shift": 0, "blur_radius": 1, "noise": 0.05, "brightness": 0}},
        {"name": "b", "id": 1, "count": 5, "style": {"palette_shift": 0.5, "blur_radius": 0, "noise": 0, "brightness": 0.1},
         "skew": {"dim": 2, "positive": 3, "negative": 1}}
    ]}"#;
    let family: FamilySpec = serde_json::from_str(json).unwrap();
    data::validate_registry(&family.datasets).unwrap();
    assert_eq!(family.datasets[1].skew.as_ref().unwrap().positive, 3.0);
}

#[test]
fn style_changes_pixels_only_through_the_style_map() {
    let mut rng = SeedRng::new(2);
    let c = ContentFactor::sample_uniform(&mut rng);
    let specs = data::default_family(1);
    let lowq = data::render(&c, &specs[0], 9).unwrap();
    let highq = data::render(&c, &specs[1], 9).unwrap();
    assert_eq!(lowq.content, highq.content);
    let mse: f64 =
        lowq.pixels.iter().zip(&highq.pixels).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / lowq.pixels.len() as f64;
    assert!(mse > 0.0);
    let clean = data::render_pixels(&c, &StyleMap::identity(), 1).unwrap();
    assert_eq!(clean, data::render_pixels(&c, &StyleMap::identity(), 2).unwrap());
}
