//! Command-line front end.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 I/O or file
//! format error, 3 numeric failure (NaN/Inf, divergence).

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use bias_lens::checkpoint::{Checkpoint, Registry, TrainingRecord};
use bias_lens::data::{self, FamilySpec};
use bias_lens::metrics::{self, BiasReport, EvalConfig};
use bias_lens::train::{self, TrainConfig};
use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;

use crate::ops;
use crate::service::{self, AppState};

pub const EXIT_USAGE: i32 = 1;
pub const EXIT_IO: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

pub const DEFAULT_ADDR: &str = "127.0.0.1:8080";

#[derive(Parser, Debug)]
#[command(
    name = "bias-lens",
    version,
    about = "Disentangle dataset bias with a shared autoencoder and a conditional flow"
)]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// Seed; overrides the seed in --config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// JSON config file (training or evaluation settings).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output file or directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render a dataset family into a directory.
    Gen {
        /// Family spec JSON (`{"datasets": [...]}`); the default family if omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Samples per dataset for the default family.
        #[arg(long, default_value_t = 2000)]
        count: usize,
    },
    /// Train the autoencoder on a generated family.
    TrainAe {
        #[arg(long)]
        data: PathBuf,
        /// Held-out family for the validation MSE.
        #[arg(long)]
        val: Option<PathBuf>,
        /// Write the per-epoch loss as CSV.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Train the conditional flow on top of an autoencoder checkpoint.
    TrainFlow {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Project one PNG from one dataset onto another.
    Project {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        from: String,
        #[arg(long)]
        to: String,
    },
    /// Sample images for a dataset.
    Sample {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        dataset: String,
        #[arg(long, default_value_t = 16)]
        count: usize,
    },
    /// Evaluate a trained checkpoint on a family with ground-truth content.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Write the z distance matrix as CSV.
        #[arg(long)]
        distances: Option<PathBuf>,
    },
    /// Serve the HTTP/JSON API.
    Serve {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, env = "BIASLENS_ADDR", default_value = DEFAULT_ADDR)]
        addr: String,
        /// Report JSON written by `eval`.
        #[arg(long, conflicts_with = "data")]
        report: Option<PathBuf>,
        /// Evaluate on this family at startup instead of loading a report.
        #[arg(long)]
        data: Option<PathBuf>,
    },
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { 0 };
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &anyhow::Error) -> i32 {
    for cause in e.chain() {
        if let Some(err) = cause.downcast_ref::<bias_lens::Error>() {
            return if err.is_numeric() {
                EXIT_NUMERIC
            } else if err.is_io() {
                EXIT_IO
            } else {
                EXIT_USAGE
            };
        }
        if cause.is::<std::io::Error>() || cause.is::<serde_json::Error>() {
            return EXIT_IO;
        }
    }
    EXIT_USAGE
}

fn required_out(common: &Common) -> anyhow::Result<&Path> {
    match &common.out {
        Some(p) => Ok(p),
        None => bail!("--out is required for this command"),
    }
}

fn read_json<T: DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_slice(&bytes).with_context(|| format!("parsing {}", path.display()))
}

fn write_file(path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn load_checkpoint(path: &Path) -> anyhow::Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn load_family(dir: &Path) -> anyhow::Result<(data::Manifest, Vec<data::Observation>)> {
    data::load_family(dir).with_context(|| format!("loading dataset family from {}", dir.display()))
}

/// `epoch,loss` rows.
pub fn trace_csv(trace: &[f64]) -> String {
    let mut out = String::from("epoch,loss\n");
    for (i, v) in trace.iter().enumerate() {
        out.push_str(&format!("{i},{v}\n"));
    }
    out
}

fn train_config(common: &Common) -> anyhow::Result<TrainConfig> {
    let mut config = match &common.config {
        Some(p) => read_json(p)?,
        None => TrainConfig::default(),
    };
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    config.validate()?;
    Ok(config)
}

fn eval_config(common: &Common) -> anyhow::Result<EvalConfig> {
    let mut config: EvalConfig = match &common.config {
        Some(p) => read_json(p)?,
        None => EvalConfig::default(),
    };
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    Ok(config)
}

/// Evaluates `ck` on the family stored in `dir`.
pub fn evaluate_dir(ck: &Checkpoint, dir: &Path, config: &EvalConfig) -> anyhow::Result<BiasReport> {
    let (manifest, observations) = load_family(dir)?;
    if manifest.specs().iter().map(|s| &s.name).ne(ck.registry.datasets.iter().map(|s| &s.name)) {
        bail!("datasets in {} do not match the checkpoint registry", dir.display());
    }
    Ok(metrics::evaluate(ck, &observations, config)?)
}

fn execute(cli: Cli) -> anyhow::Result<()> {
    let common = cli.common;
    match cli.command {
        Command::Gen { spec, count } => {
            let out = required_out(&common)?;
            let specs = match spec {
                Some(p) => read_json::<FamilySpec>(&p)?.datasets,
                None => data::default_family(count),
            };
            let manifest = data::generate_family(&specs, common.seed.unwrap_or(0), out)?;
            let total: usize = manifest.datasets.iter().map(|d| d.spec.count).sum();
            eprintln!("wrote {} datasets ({total} samples) to {}", manifest.datasets.len(), out.display());
        }
        Command::TrainAe { data: dir, val, trace } => {
            let out = required_out(&common)?;
            let mut config = train_config(&common)?;
            let (manifest, observations) = load_family(&dir)?;
            config.manifest = Some(dir.join("manifest.json").display().to_string());
            let result = train::train_autoencoder(&config, &observations)?;
            let ae_val_mse = match val {
                Some(v) => Some(train::reconstruction_mse(&result.model, &load_family(&v)?.1)?),
                None => None,
            };
            if let Some(mse) = ae_val_mse {
                eprintln!("validation MSE {mse:.6}");
            }
            if let Some(t) = trace {
                write_file(&t, trace_csv(&result.trace).as_bytes())?;
            }
            let ck = Checkpoint {
                config,
                registry: Registry { seed: manifest.seed, datasets: manifest.specs() },
                autoencoder: result.model,
                standardizer: result.standardizer,
                flow: None,
                record: TrainingRecord { ae_trace: result.trace, ae_val_mse, ..Default::default() },
            };
            ck.save(out).with_context(|| format!("writing {}", out.display()))?;
        }
        Command::TrainFlow { ckpt, data: dir, trace } => {
            let out = required_out(&common)?;
            let mut ck = load_checkpoint(&ckpt)?;
            if common.config.is_some() {
                let config = train_config(&common)?;
                if config.dim != ck.autoencoder.dim() || config.hidden != ck.autoencoder.hidden() {
                    bail!("config dim/hidden do not match the autoencoder in {}", ckpt.display());
                }
                ck.config = TrainConfig { manifest: ck.config.manifest.clone(), ..config };
            } else if let Some(seed) = common.seed {
                ck.config.seed = seed;
            }
            let (manifest, observations) = load_family(&dir)?;
            if manifest.specs() != ck.registry.datasets {
                bail!("datasets in {} do not match the checkpoint registry", dir.display());
            }
            let result = train::train_cinn(&ck.config, &observations, &ck.autoencoder, &ck.standardizer)?;
            eprintln!("flow NLL {:.4} -> {:.4}", result.initial_nll, result.final_nll);
            if let Some(t) = trace {
                write_file(&t, trace_csv(&result.trace).as_bytes())?;
            }
            ck.record.flow_trace = result.trace;
            ck.record.flow_initial_nll = Some(result.initial_nll);
            ck.record.flow_final_nll = Some(result.final_nll);
            ck.flow = Some(result.model);
            ck.save(out).with_context(|| format!("writing {}", out.display()))?;
        }
        Command::Project { ckpt, input, from, to } => {
            let out = required_out(&common)?;
            let ck = load_checkpoint(&ckpt)?;
            let png = fs::read(&input).with_context(|| format!("reading {}", input.display()))?;
            let result = ops::project_png(&ck, &png, &from, &to)?;
            write_file(out, &result.png)?;
            println!("{}", serde_json::to_string(&result.z_stats)?);
        }
        Command::Sample { ckpt, dataset, count } => {
            let out = required_out(&common)?;
            let ck = load_checkpoint(&ckpt)?;
            let images = ops::sample_pngs(&ck, &dataset, count, common.seed.unwrap_or(0))?;
            fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
            for (i, png) in images.iter().enumerate() {
                write_file(&out.join(sample_file_name(&dataset, i)), png)?;
            }
        }
        Command::Eval { ckpt, data: dir, distances } => {
            let ck = load_checkpoint(&ckpt)?;
            let report = evaluate_dir(&ck, &dir, &eval_config(&common)?)?;
            let json = serde_json::to_string_pretty(&report)?;
            match &common.out {
                Some(p) => write_file(p, json.as_bytes())?,
                None => println!("{json}"),
            }
            if let Some(p) = distances {
                write_file(&p, report.distance_csv().as_bytes())?;
            }
        }
        Command::Serve { ckpt, addr, report, data: dir } => {
            let checkpoint = load_checkpoint(&ckpt)?;
            checkpoint.flow()?;
            let report = match (report, dir) {
                (Some(p), _) => Some(read_json::<BiasReport>(&p)?),
                (None, Some(d)) => Some(evaluate_dir(&checkpoint, &d, &eval_config(&common)?)?),
                (None, None) => None,
            };
            let runtime = tokio::runtime::Runtime::new().context("starting the async runtime")?;
            runtime
                .block_on(service::serve(AppState { checkpoint, report }, &addr))
                .with_context(|| format!("serving on {addr}"))?;
        }
    }
    Ok(())
}

/// File name of image `index` written by `sample`.
pub fn sample_file_name(dataset: &str, index: usize) -> String {
    format!("{dataset}_{index:03}.png")
}
