//! Acceptance suite: runs the default experiment end to end through the
//! command line and checks every criterion at its stated tolerance. Prints
//! one PASS/FAIL line per criterion.
//!
//! Criteria listed in `KNOWN_SHORTFALLS` are still measured and reported as
//! FAIL when they miss; they do not fail the test binary. Anything else that
//! misses exits non-zero.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::Arc;
use std::time::Instant;

use axum::body::Body;
use axum::http::Request;
use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use bias_lens::autodiff::{finite_diff_grad, relative_error, Eager, Graph};
use bias_lens::checkpoint::Checkpoint;
use bias_lens::data::{self, PIXELS};
use bias_lens::flow::{FlowConfig, FlowModel};
use bias_lens::metrics::{self, BiasReport};
use bias_lens::tensor::Tensor;
use bias_lens::train::{self, TrainConfig};
use bias_lens::{imageio, transfer, SeedRng};
use bias_lens_cli::cli::sample_file_name;
use bias_lens_cli::service::{router, AppState, ProjectResponse, SampleResponse};
use http_body_util::BodyExt;
use serde_json::json;
use tower::ServiceExt;

const KNOWN_SHORTFALLS: &[(&str, &str)] = &[(
    "P5",
    "the covariance of held-out z stays above 0.3 at 2000 samples per dataset; the flow overfits its training codes",
)];

const TRAIN_SEED: &str = "1";
const VAL_SEED: &str = "1001";
const TRAIN_COUNT: &str = "2000";
const VAL_COUNT: &str = "4000";

struct Outcome {
    id: &'static str,
    title: &'static str,
    pass: bool,
    detail: String,
}

fn outcome(id: &'static str, title: &'static str, pass: bool, detail: String) -> Outcome {
    Outcome { id, title, pass, detail }
}

fn bin(cwd: &Path) -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_bias-lens"));
    c.current_dir(cwd);
    c
}

fn cli(cwd: &Path, args: &[&str]) {
    let out = bin(cwd).args(args).output().expect("spawn bias-lens");
    if !out.status.success() {
        panic!("bias-lens {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    }
}

fn randn(rows: usize, cols: usize, rng: &mut SeedRng) -> Tensor<f64> {
    Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| rng.normal()).collect()).unwrap()
}

fn max_abs_diff(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Random flow with every parameter moved away from its initial value.
fn perturbed_flow(dim: usize, blocks: usize, seed: u64) -> FlowModel<f64> {
    let cfg = FlowConfig { dim, blocks, hidden: 12, embed_dim: 3, n_labels: 3, clamp: 2.0 };
    let mut rng = SeedRng::new(seed);
    let mut m = FlowModel::new(&cfg, &mut rng).unwrap();
    for b in &mut m.blocks {
        b.actnorm.initialized = true;
    }
    for p in m.params_mut() {
        for v in p.data_mut() {
            *v += 0.4 * rng.normal();
        }
    }
    m
}

fn roundtrip_error(flow: &FlowModel<f64>, n: usize, seed: u64) -> f64 {
    let mut rng = SeedRng::new(seed);
    let x = randn(n, flow.dim(), &mut rng);
    let labels: Vec<usize> = (0..n).map(|_| rng.below(flow.n_labels())).collect();
    let (z, _) = flow.forward(&x, &labels).unwrap();
    max_abs_diff(&flow.inverse(&z, &labels).unwrap(), &x)
}

fn p1(ck: &Checkpoint) -> Outcome {
    let trained = roundtrip_error(ck.flow().unwrap(), 100, 1);
    let cfg = ck.flow().unwrap().config();
    let mut fresh = FlowModel::new(&cfg, &mut SeedRng::new(2)).unwrap();
    let mut rng = SeedRng::new(3);
    let init_x = randn(64, cfg.dim, &mut rng);
    fresh.actnorm_data_init(&init_x, &(0..64).map(|i| i % cfg.n_labels).collect::<Vec<_>>()).unwrap();
    let untrained =
        roundtrip_error(&fresh, 100, 4).max(roundtrip_error(&perturbed_flow(cfg.dim, cfg.blocks, 5), 100, 6));
    let worst = trained.max(untrained);
    outcome(
        "P1",
        "bijectivity",
        worst < 1e-9,
        format!("max |inv(fwd(x)) - x| trained {trained:.2e}, untrained {untrained:.2e} (< 1e-9)"),
    )
}

fn jacobian_logdet(m: &FlowModel<f64>, x: &[f64], y: usize) -> f64 {
    let d = x.len();
    let eps = 1e-6;
    let mut jac = nalgebra::DMatrix::<f64>::zeros(d, d);
    for i in 0..d {
        let (mut up, mut down) = (x.to_vec(), x.to_vec());
        up[i] += eps;
        down[i] -= eps;
        let (zu, _) = m.forward(&Tensor::new(vec![1, d], up).unwrap(), &[y]).unwrap();
        let (zd, _) = m.forward(&Tensor::new(vec![1, d], down).unwrap(), &[y]).unwrap();
        for r in 0..d {
            jac[(r, i)] = (zu.data()[r] - zd.data()[r]) / (2.0 * eps);
        }
    }
    jac.determinant().abs().ln()
}

fn p2() -> Outcome {
    let mut worst: f64 = 0.0;
    for (dim, seed) in [(2, 21), (4, 22), (6, 23)] {
        let m = perturbed_flow(dim, 4, seed);
        let mut rng = SeedRng::new(seed + 100);
        for trial in 0..10 {
            let x: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
            let (_, ld) = m.forward(&Tensor::new(vec![1, dim], x.clone()).unwrap(), &[trial % 3]).unwrap();
            worst = worst.max((ld.item() - jacobian_logdet(&m, &x, trial % 3)).abs());
        }
    }
    outcome(
        "P2",
        "log-det exactness",
        worst < 1e-4,
        format!("max |logdet - log|det J_fd|| over d in {{2,4,6}}: {worst:.2e} (< 1e-4)"),
    )
}

fn p3() -> Outcome {
    let m = perturbed_flow(4, 2, 31);
    let mut rng = SeedRng::new(32);
    let x = randn(8, 4, &mut rng);
    let labels: Vec<usize> = (0..8).map(|i| i % 3).collect();
    let mut g = Graph::new();
    let loss = m.nll(&mut g, &x, &labels).unwrap();
    let grads = g.backward(loss).unwrap();
    let mut worst: f64 = 0.0;
    for slot in 0..m.params().len() {
        let analytic = grads.get(g.slot(slot).unwrap()).unwrap();
        let numeric = finite_diff_grad(
            |p| {
                let mut mm = m.clone();
                *mm.params_mut()[slot] = p.clone();
                Ok(mm.nll(&mut Eager, &x, &labels)?.item())
            },
            m.params()[slot],
            1e-6,
        )
        .unwrap();
        worst = worst.max(relative_error(analytic, &numeric));
    }
    outcome(
        "P3",
        "gradient correctness",
        worst < 1e-6,
        format!("max relative error over {} parameter tensors: {worst:.2e} (< 1e-6)", m.params().len()),
    )
}

fn p4() -> Outcome {
    let mut rng = SeedRng::new(41);
    let n = 1500;
    let labels: Vec<usize> = (0..n).map(|i| i % 3).collect();
    let xs: Vec<f64> = labels
        .iter()
        .map(|&l| match l {
            0 => -2.0 + 0.5 * rng.normal(),
            1 => 1.0 + rng.normal(),
            _ => (if rng.uniform() < 0.5 { -1.5 } else { 2.0 }) + 0.4 * rng.normal(),
        })
        .collect();
    let x = Tensor::new(vec![n, 1], xs).unwrap();
    let config =
        TrainConfig { dim: 1, blocks: 4, flow_hidden: 16, embed_dim: 4, flow_epochs: 30, ..Default::default() };
    let flow = train::train_flow(&config, &x, &labels, 3).unwrap();

    let points = 4001;
    let h = 20.0 / (points - 1) as f64;
    let grid = Tensor::new(vec![points, 1], (0..points).map(|i| -10.0 + h * i as f64).collect()).unwrap();
    let mut worst: f64 = 0.0;
    let mut integrals = Vec::new();
    for label in 0..3 {
        let p: Vec<f64> =
            flow.model.log_prob(&grid, &vec![label; points]).unwrap().data().iter().map(|v| v.exp()).collect();
        let integral = h * (p.iter().sum::<f64>() - 0.5 * (p[0] + p[points - 1]));
        worst = worst.max((integral - 1.0).abs());
        integrals.push(format!("{integral:.5}"));
    }
    outcome(
        "P4",
        "density normalization",
        worst < 0.01,
        format!(
            "trapezoid integrals per label [{}], NLL {:.3} -> {:.3} (1 +/- 0.01)",
            integrals.join(", "),
            flow.initial_nll,
            flow.final_nll
        ),
    )
}

fn p5(report: &BiasReport) -> Outcome {
    let pass = report.z_mean_norm < 0.1 && report.z_cov_fro_dist < 0.3;
    outcome(
        "P5",
        "prior match",
        pass,
        format!(
            "held-out n={}: |mean| {:.4} (< 0.1), |cov - I|_F {:.4} (< 0.3)",
            report.n_evaluated, report.z_mean_norm, report.z_cov_fro_dist
        ),
    )
}

fn p6(report: &BiasReport) -> Outcome {
    let z = &report.label_probe;
    let base = &report.representation_probe;
    let pass = (z.accuracy - z.chance).abs() < 0.05 && z.mi_lower_bound < 0.05 && base.accuracy > 0.9;
    outcome(
        "P6",
        "disentanglement",
        pass,
        format!(
            "probe on z {:.4} (chance {:.4} +/- 0.05), MI bound {:.4} nats (< 0.05), probe on representation {:.4} (> 0.9)",
            z.accuracy, z.chance, z.mi_lower_bound, base.accuracy
        ),
    )
}

fn p7(report: &BiasReport) -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for p in &report.pairs {
        pass &= p.content_r2_mean > 0.8 && p.style_w2_target < p.style_w2_source;
        parts.push(format!(
            "{}->{} R2 {:.3} W2 {:.4}/{:.4}",
            p.from, p.to, p.content_r2_mean, p.style_w2_target, p.style_w2_source
        ));
    }
    outcome("P7", "projection semantics", pass, format!("R2 > 0.8, W2 target < source: {}", parts.join("; ")))
}

fn laplacian_shift(ck: &Checkpoint, obs: &[data::Observation], from: usize, to: usize) -> (f64, usize, f64) {
    let source: Vec<data::Observation> = obs.iter().filter(|o| o.label == from).take(500).cloned().collect();
    let n = source.len();
    let pixels = data::pixel_matrix(&source);
    let moved = transfer::project(ck, &pixels, &vec![from; n], &vec![to; n]).unwrap().pixels;
    let same = transfer::project(ck, &pixels, &vec![from; n], &vec![from; n]).unwrap().pixels;
    let diffs: Vec<f64> =
        (0..n).map(|i| metrics::laplacian_energy(moved.row(i)) - metrics::laplacian_energy(same.row(i))).collect();
    let mean = diffs.iter().sum::<f64>() / n as f64;
    (mean, diffs.iter().filter(|&&d| d > 0.0).count(), metrics::sign_test(&diffs))
}

fn p8(ck: &Checkpoint, val: &[data::Observation]) -> Outcome {
    let lowq = ck.registry.find("lowq").unwrap().id;
    let highq = ck.registry.find("highq").unwrap().id;
    let (up, up_pos, up_p) = laplacian_shift(ck, val, lowq, highq);
    let (down, down_pos, down_p) = laplacian_shift(ck, val, highq, lowq);
    let pass = up > 0.0 && up_p < 0.01 && down < 0.0 && down_p < 0.01;
    outcome(
        "P8",
        "quality transfer",
        pass,
        format!(
            "lowq->highq mean dLap {up:+.5} ({up_pos}/500 up, p {up_p:.1e}); highq->lowq {down:+.5} ({down_pos}/500 up, p {down_p:.1e}) (p < 0.01)"
        ),
    )
}

/// Small fixed-seed pipeline through the CLI in `dir`, with relative paths.
fn small_pipeline(dir: &Path) -> (Vec<u8>, Vec<u8>) {
    fs::create_dir_all(dir).unwrap();
    let config = TrainConfig { ae_epochs: 3, flow_epochs: 5, ..Default::default() };
    fs::write(dir.join("config.json"), serde_json::to_string(&config).unwrap()).unwrap();
    cli(dir, &["gen", "--count", "300", "--seed", "5", "--out", "data"]);
    cli(dir, &["train-ae", "--data", "data", "--config", "config.json", "--seed", "9", "--out", "ae.blens"]);
    cli(dir, &["train-flow", "--ckpt", "ae.blens", "--data", "data", "--out", "model.blens"]);
    cli(dir, &["eval", "--ckpt", "model.blens", "--data", "data", "--out", "report.json"]);
    (fs::read(dir.join("model.blens")).unwrap(), fs::read(dir.join("report.json")).unwrap())
}

fn p9(work: &Path) -> Outcome {
    let (ck_a, report_a) = small_pipeline(&work.join("run-a"));
    let (ck_b, report_b) = small_pipeline(&work.join("run-b"));
    let same_ck = ck_a == ck_b;
    let same_report = report_a == report_b;
    outcome(
        "P9",
        "determinism",
        same_ck && same_report,
        format!(
            "checkpoint {} bytes identical: {same_ck}; report {} bytes identical: {same_report}",
            ck_a.len(),
            report_a.len()
        ),
    )
}

async fn post(app: &axum::Router, uri: &str, body: serde_json::Value) -> Vec<u8> {
    let req = Request::post(uri).header("content-type", "application/json").body(Body::from(body.to_string())).unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    assert!(resp.status().is_success(), "{uri}: {}", resp.status());
    resp.into_body().collect().await.unwrap().to_bytes().to_vec()
}

fn p10(work: &Path, ckpt: &Path, ck: &Checkpoint) -> Outcome {
    let dir = work.join("p10");
    fs::create_dir_all(&dir).unwrap();
    let mut mismatches = Vec::new();
    let ckpt = ckpt.to_str().unwrap();

    // seeded dataset sample as the CLI input
    let source = data::regenerate(ck.registry.find("lowq").unwrap(), ck.registry.seed, 17).unwrap();
    let input_png = imageio::encode_png(&source.pixels).unwrap();
    fs::write(dir.join("in.png"), &input_png).unwrap();
    cli(&dir, &["project", "--ckpt", ckpt, "--in", "in.png", "--from", "lowq", "--to", "highq", "--out", "out.png"]);
    let cli_project = fs::read(dir.join("out.png")).unwrap();
    let decoded = imageio::decode_png(&input_png).unwrap().pixels;
    let lib_project = transfer::project(ck, &Tensor::new(vec![1, PIXELS], decoded).unwrap(), &[0], &[1]).unwrap();
    if cli_project != imageio::encode_png(lib_project.pixels.row(0)).unwrap() {
        mismatches.push("CLI project vs library");
    }

    let (count, seed) = (8, 77);
    cli(&dir, &["sample", "--ckpt", ckpt, "--dataset", "skewed", "--count", "8", "--seed", "77", "--out", "samples"]);
    let cli_samples: Vec<Vec<u8>> =
        (0..count).map(|i| fs::read(dir.join("samples").join(sample_file_name("skewed", i))).unwrap()).collect();
    let lib_images = transfer::sample(ck, 2, count, seed).unwrap();
    if (0..count).any(|i| cli_samples[i] != imageio::encode_png(lib_images.row(i)).unwrap()) {
        mismatches.push("CLI sample vs library");
    }

    let app = router(Arc::new(AppState { checkpoint: ck.clone(), report: None }));
    let runtime = tokio::runtime::Builder::new_current_thread().enable_all().build().unwrap();
    let (by_pixels, by_ref, sampled) = runtime.block_on(async {
        let by_pixels =
            post(&app, "/api/project", json!({"pixels": BASE64.encode(&input_png), "from": "lowq", "to": "highq"}))
                .await;
        let by_ref =
            post(&app, "/api/project", json!({"sample_ref": {"dataset": "lowq", "index": 17}, "to": "highq"})).await;
        let sampled = post(&app, "/api/sample", json!({"dataset": "skewed", "count": count, "seed": seed})).await;
        (by_pixels, by_ref, sampled)
    });
    for (name, body) in
        [("service project (pixels) vs CLI", by_pixels), ("service project (sample_ref) vs CLI", by_ref)]
    {
        let r: ProjectResponse = serde_json::from_slice(&body).unwrap();
        if BASE64.decode(r.pixels).unwrap() != cli_project {
            mismatches.push(name);
        }
    }
    let r: SampleResponse = serde_json::from_slice(&sampled).unwrap();
    if r.images.iter().map(|b| BASE64.decode(b).unwrap()).ne(cli_samples.iter().cloned()) {
        mismatches.push("service sample vs CLI");
    }
    let detail = if mismatches.is_empty() {
        "project and sample byte-identical across library, CLI and service".to_string()
    } else {
        format!("mismatches: {}", mismatches.join(", "))
    };
    outcome("P10", "interface consistency", mismatches.is_empty(), detail)
}

fn main() {
    let work: PathBuf = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    let _ = fs::remove_dir_all(&work);
    fs::create_dir_all(&work).unwrap();

    let start = Instant::now();
    cli(&work, &["gen", "--count", TRAIN_COUNT, "--seed", TRAIN_SEED, "--out", "train"]);
    cli(&work, &["gen", "--count", VAL_COUNT, "--seed", VAL_SEED, "--out", "val"]);
    cli(&work, &["train-ae", "--data", "train", "--val", "val", "--out", "ae.blens"]);
    cli(&work, &["train-flow", "--ckpt", "ae.blens", "--data", "train", "--out", "model.blens"]);
    cli(&work, &["eval", "--ckpt", "model.blens", "--data", "val", "--out", "report.json"]);
    let pipeline_secs = start.elapsed().as_secs_f64();

    let ckpt = work.join("model.blens");
    let ck = Checkpoint::load(&ckpt).unwrap();
    let report: BiasReport = serde_json::from_slice(&fs::read(work.join("report.json")).unwrap()).unwrap();
    let (_, val) = data::load_family(&work.join("val")).unwrap();

    let outcomes = vec![
        p1(&ck),
        p2(),
        p3(),
        p4(),
        p5(&report),
        p6(&report),
        p7(&report),
        p8(&ck, &val),
        p9(&work),
        p10(&work, &ckpt, &ck),
    ];

    let mut summary = String::new();
    writeln!(summary, "acceptance: default experiment ({TRAIN_COUNT}/dataset) pipeline took {pipeline_secs:.0}s")
        .unwrap();
    writeln!(
        summary,
        "acceptance: autoencoder validation MSE {:.5}, flow NLL {:.3} -> {:.3}",
        ck.record.ae_val_mse.unwrap_or(f64::NAN),
        ck.record.flow_initial_nll.unwrap_or(f64::NAN),
        ck.record.flow_final_nll.unwrap_or(f64::NAN)
    )
    .unwrap();
    let mut unexpected = 0;
    for o in &outcomes {
        let known = KNOWN_SHORTFALLS.iter().find(|(id, _)| *id == o.id);
        let status = if o.pass { "PASS" } else { "FAIL" };
        writeln!(summary, "{} {status} {}: {}", o.id, o.title, o.detail).unwrap();
        match (o.pass, known) {
            (false, Some((_, why))) => writeln!(summary, "   known shortfall: {why}").unwrap(),
            (false, None) => unexpected += 1,
            (true, Some(_)) => writeln!(summary, "   listed as a known shortfall but passed this run").unwrap(),
            (true, None) => {}
        }
    }
    let passed = outcomes.iter().filter(|o| o.pass).count();
    writeln!(summary, "acceptance: {passed}/{} criteria passed, {unexpected} unexpected failures", outcomes.len())
        .unwrap();
    print!("{summary}");
    if unexpected > 0 {
        std::process::exit(1);
    }
}
