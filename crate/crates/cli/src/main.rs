//! `lmim`: pretraining, evaluation, gradient checks and synthetic data.
//!
//! Exit codes are stable: 0 ok, 2 configuration, 3 non-finite training,
//! 4 checkpoint/config mismatch, 5 I/O.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use lmim::data::{generate, write_raster, Dataset, SynthSpec};
use lmim::eval::{
    encode_images, feature_bank, label_image, linear_probe, nn_accuracy, pairwise_mean_cosine, segment_images,
    Pooling, ProbeConfig,
};
use lmim::gradsuite::{run_suite_with, DEFAULT_TOLERANCE};
use lmim::io::Checkpoint;
use lmim::trainer::{checkpoint_config, load_dataset, load_model, preset, run_experiment, RunOutcome, TrainConfig};
use lmim::Error;

const EXIT_CONFIG: u8 = 2;
const EXIT_NAN: u8 = 3;
const EXIT_MISMATCH: u8 = 4;
const EXIT_IO: u8 = 5;

pub const SEED_ENV: &str = "LMIM_SEED";

#[derive(Parser)]
#[command(name = "lmim", version, about = "Latent masked image modeling laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain a model and write config, metrics and checkpoints.
    Pretrain {
        /// Named preset from the challenge ladder.
        #[arg(long)]
        preset: Option<String>,
        /// `key = value` config file, applied after the preset.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Extra `key=value` settings, applied last.
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint's frozen encoder.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum)]
        protocol: Protocol,
        /// Dataset directory; defaults to the checkpoint's data source.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Expected configuration; must match the checkpoint's shape.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = PoolArg::Topk)]
        pooling: PoolArg,
        #[arg(long, default_value_t = 2)]
        clusters: usize,
        /// Output directory for segmentation maps.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the finite-difference suite over every op and loss.
    Gradcheck {
        #[arg(long, default_value_t = DEFAULT_TOLERANCE)]
        tolerance: f64,
        /// Accepted for symmetry with the other commands; the suite is fixed.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Sign-flip the analytic gradient of one case (or `all`).
        #[arg(long, hide = true)]
        mutate: Option<String>,
    },
    /// Write a synthetic labelled corpus.
    Synth {
        #[arg(long, default_value_t = 10)]
        classes: usize,
        #[arg(long, default_value_t = 2000)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 64)]
        side: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Protocol {
    Nn,
    Probe,
    Collapse,
    Segment,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum PoolArg {
    Mean,
    Topk,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::InvalidKey { .. } => EXIT_CONFIG,
        Error::NonFinite { .. } | Error::DegenerateVector { .. } => EXIT_NAN,
        Error::DigestMismatch => EXIT_MISMATCH,
        Error::Io { .. } | Error::Image { .. } | Error::Checkpoint(_) => EXIT_IO,
        Error::Shape { .. } | Error::Contract(_) => 1,
    }
}

fn read_text(path: &Path) -> lmim::Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn resolve_config(name: Option<&str>, file: Option<&Path>, overrides: &[String]) -> lmim::Result<TrainConfig> {
    let mut cfg = match file {
        Some(path) => {
            let text = read_text(path)?;
            match name {
                Some(p) => TrainConfig::parse(&format!("preset = {p}\n{text}"))?,
                None => TrainConfig::parse(&text)?,
            }
        }
        None => match name {
            Some(p) => preset(p)?,
            None => TrainConfig::default(),
        },
    };
    if let Ok(seed) = std::env::var(SEED_ENV) {
        cfg.set("seed", seed.trim())?;
    }
    for o in overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Error::config(format!("override `{o}` is not of the form key=value")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn pretrain(name: Option<&str>, file: Option<&Path>, overrides: &[String], out: &Path) -> lmim::Result<u8> {
    let cfg = resolve_config(name, file, overrides)?;
    let report = run_experiment(&cfg, out)?;
    let last = report.metrics.iter().rev().find(|m| !m.nan_flag);
    println!("preset={}", cfg.preset);
    println!("steps={}", report.steps);
    if let Some(m) = last {
        println!("loss={}", m.loss);
        println!("pooled_pair_cos={}", m.pooled_pair_cos);
    }
    println!("checkpoint={}", report.checkpoint.display());
    match report.outcome {
        RunOutcome::Completed => {
            println!("outcome=completed");
            Ok(0)
        }
        RunOutcome::NanAbort { step, op } => {
            println!("outcome=nan");
            eprintln!("non-finite value from `{op}` at step {step}; partial logs are in {}", out.display());
            Ok(EXIT_NAN)
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn eval(
    checkpoint: &Path,
    protocol: Protocol,
    data: Option<&Path>,
    config: Option<&Path>,
    pooling: PoolArg,
    clusters: usize,
    out: Option<&Path>,
) -> lmim::Result<u8> {
    let ck = Checkpoint::load(checkpoint)?;
    let mut cfg = checkpoint_config(&ck)?;
    if let Some(path) = config {
        cfg = TrainConfig::parse(&read_text(path)?)?;
    }
    let model = load_model(&ck, &cfg)?;
    let dataset = match data {
        Some(dir) => Dataset::load(dir)?,
        None => load_dataset(&cfg)?,
    };
    let pool = match pooling {
        PoolArg::Mean => Pooling::Mean,
        PoolArg::Topk => Pooling::TopK(cfg.pool_k),
    };
    let (grid, gap) = (cfg.grid, cfg.gap);
    match protocol {
        Protocol::Nn | Protocol::Probe => {
            let (train, test) = dataset.split();
            let a = feature_bank(&encode_images(&model, &train.images, grid, gap)?, &train.labels, pool)?;
            let b = feature_bank(&encode_images(&model, &test.images, grid, gap)?, &test.labels, pool)?;
            let (name, acc) = match protocol {
                Protocol::Nn => ("nn", nn_accuracy(&a, &b)?),
                _ => (
                    "probe",
                    linear_probe(
                        &a,
                        &b,
                        &ProbeConfig {
                            seed: cfg.seed,
                            ..ProbeConfig::default()
                        },
                    )?,
                ),
            };
            println!("protocol={name}");
            println!("pooling={}", pool_name(pool));
            println!("train={}", a.len());
            println!("test={}", b.len());
            println!("accuracy={acc}");
        }
        Protocol::Collapse => {
            let (_, test) = dataset.split();
            let bank = feature_bank(&encode_images(&model, &test.images, grid, gap)?, &test.labels, Pooling::Mean)?;
            println!("protocol=collapse");
            println!("pooling=mean");
            println!("images={}", bank.len());
            println!("pooled_pair_cos={}", pairwise_mean_cosine(&bank.features)?);
        }
        Protocol::Segment => {
            let out = out.ok_or_else(|| Error::config("segment protocol needs --out"))?;
            fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
            let (maps, ari) = segment_images(&model, &dataset.images, dataset.masks.as_deref(), grid, gap, clusters)?;
            let csv_path = out.join("segments.csv");
            let mut csv = String::from("image,patch,row,col,cluster\n");
            for (i, map) in maps.iter().enumerate() {
                write_raster(&label_image(map, grid, cfg.model.patch_size)?, &out.join(format!("{i:05}.pgm")))?;
                for (p, &l) in map.labels.iter().enumerate() {
                    csv.push_str(&format!("{i},{p},{},{},{l}\n", p / grid, p % grid));
                }
            }
            fs::write(&csv_path, csv).map_err(|e| Error::io(&csv_path, e))?;
            println!("protocol=segment");
            println!("images={}", maps.len());
            println!("clusters={clusters}");
            if let Some(ari) = ari {
                println!("mean_ari={ari}");
            }
        }
    }
    Ok(0)
}

fn pool_name(p: Pooling) -> String {
    match p {
        Pooling::Mean => "mean".into(),
        Pooling::TopK(k) => format!("topk{k}"),
    }
}

fn gradcheck(tolerance: f64, mutate: Option<&str>) -> lmim::Result<u8> {
    if !(tolerance >= 0.0) {
        return Err(Error::InvalidKey {
            key: "tolerance".into(),
            reason: format!("must be non-negative, got {tolerance}"),
        });
    }
    let report = run_suite_with(tolerance, mutate)?;
    for c in &report.cases {
        println!(
            "{} {} max_rel_err={:.3e} bound={:.1e}",
            if c.passed() { "ok  " } else { "FAIL" },
            c.name,
            c.max_rel_err,
            c.bound
        );
    }
    println!("cases={}", report.cases.len());
    println!("max_rel_err={:.3e}", report.max_rel_err());
    println!("elapsed_s={:.2}", report.elapsed.as_secs_f64());
    if report.passed() {
        println!("result=pass");
        Ok(0)
    } else {
        for c in report.failures() {
            eprintln!("gradient mismatch in {}: max rel err {:.3e} > {:.1e}", c.name, c.max_rel_err, c.bound);
        }
        println!("result=fail");
        Ok(1)
    }
}

fn synth(spec: SynthSpec, out: &Path) -> lmim::Result<u8> {
    let ds = generate(&spec)?;
    ds.save(out)?;
    println!("images={}", ds.len());
    println!("classes={}", ds.num_classes());
    println!("out={}", out.display());
    Ok(0)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Pretrain {
            preset,
            config,
            overrides,
            out,
        } => pretrain(preset.as_deref(), config.as_deref(), overrides, out),
        Command::Eval {
            checkpoint,
            protocol,
            data,
            config,
            pooling,
            clusters,
            out,
        } => eval(
            checkpoint,
            *protocol,
            data.as_deref(),
            config.as_deref(),
            *pooling,
            *clusters,
            out.as_deref(),
        ),
        Command::Gradcheck { tolerance, mutate, .. } => gradcheck(*tolerance, mutate.as_deref()),
        Command::Synth {
            classes,
            count,
            seed,
            side,
            out,
        } => synth(
            SynthSpec {
                classes: *classes,
                count: *count,
                side: *side,
                seed: *seed,
            },
            out,
        ),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
