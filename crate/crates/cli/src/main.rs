//! `i2v`: train the blind-spot network and noise extractor on noisy
//! images, denoise with any inference scheme, and inspect the pieces.

mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use i2v_core::data::{add_correlated_noise, load_image, make_dataset, save_image, save_png, ImageRecord, NoiseModel};
use i2v_core::inference::{denoise, image_rng, sweep_csv, sweep_pr3, Scheme};
use i2v_core::metrics::{export_noise_maps, mean_row, metrics_csv, noise_histogram, noise_map_per_stride, MetricRow};
use i2v_core::networks::{load_checkpoint, BlindSpotNet, NoiseExtractor};
use i2v_core::pd::{pd_forward, pd_inverse, ShuffleOrder};
use i2v_core::training::{init_networks, train, TrainOutput};
use i2v_core::{seeded, Tensor};
use rayon::prelude::*;
use serde_json::json;
use sha2::{Digest, Sha256};

use config::{resolve, Preset, RunConfig};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] i2v_core::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Usage(String),
}

#[derive(Parser, Debug)]
#[command(name = "i2v", version, about = "Self-supervised blind denoising of spatially correlated noise")]
struct Cli {
    /// Flat JSON config file; keys mirror the training and inference settings.
    #[arg(long, global = true, env = "I2V_CONFIG")]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set lr0=1e-3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Default values to start from.
    #[arg(long, global = true, value_enum, default_value_t = Preset::Desk)]
    preset: Preset,
    /// Seed for every random draw (same as `--set seed=N`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train both networks on a directory of noisy images.
    Train(TrainArgs),
    /// Denoise images with a trained checkpoint.
    Denoise(DenoiseArgs),
    /// Score denoised images against clean references.
    Eval(EvalArgs),
    /// Apply pixel-shuffle downsampling or its inverse to one image.
    Pd(PdArgs),
    /// Synthesize correlated noise on clean images.
    Noisegen(NoisegenArgs),
    /// Export noise maps and magnitude histograms per PD stride.
    Hist(HistArgs),
    /// PSNR/SSIM of PR³ over a grid of replacement probabilities.
    Sweep(SweepArgs),
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Directory of noisy training images.
    #[arg(long)]
    data: PathBuf,
    /// Run directory for checkpoints, the loss log and the manifest.
    #[arg(long)]
    out: PathBuf,
    /// File-name pattern of the training images.
    #[arg(long, default_value = "*.png")]
    pattern: String,
    /// Print progress every N steps.
    #[arg(long, default_value_t = 50)]
    log_every: usize,
}

#[derive(Args, Debug)]
struct DenoiseArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// A noisy image or a directory of them; `<id>.clean.png` partners are scored.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = SchemeArg::Pr3)]
    scheme: SchemeArg,
    /// PR³ keep-probability for the BSN pass (same as `--set p1=`).
    #[arg(long)]
    p1: Option<f64>,
    /// PR³ keep-probability for the extractor pass (same as `--set p2=`).
    #[arg(long)]
    p2: Option<f64>,
    #[arg(long, default_value = "*.png")]
    pattern: String,
    /// Worker threads; output is identical for any value.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SchemeArg {
    Baseline,
    Ne,
    Blend,
    R3,
    Pr3,
}

impl From<SchemeArg> for Scheme {
    fn from(s: SchemeArg) -> Self {
        match s {
            SchemeArg::Baseline => Scheme::Baseline,
            SchemeArg::Ne => Scheme::Ne,
            SchemeArg::Blend => Scheme::Blend,
            SchemeArg::R3 => Scheme::R3,
            SchemeArg::Pr3 => Scheme::Pr3,
        }
    }
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    denoised: PathBuf,
    /// Clean references with the same file names.
    #[arg(long)]
    clean: PathBuf,
    /// CSV output; printed to stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value = "*.png")]
    pattern: String,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Direction {
    Forward,
    Inverse,
}

#[derive(Args, Debug)]
struct PdArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[arg(long, default_value_t = 2)]
    stride: usize,
    /// Draw a random sub-image order from this seed; identity order when omitted.
    #[arg(long = "order-seed")]
    order_seed: Option<u64>,
    #[arg(long, value_enum, default_value_t = Direction::Forward)]
    direction: Direction,
}

#[derive(Args, Debug)]
struct NoisegenArgs {
    /// Directory of clean images.
    #[arg(long)]
    clean: PathBuf,
    /// Receives `<id>.png` noisy images and `<id>.clean.png` copies.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0.1)]
    sigma: f32,
    /// Side of the box smoothing kernel; 1 gives white noise.
    #[arg(long, default_value_t = 3)]
    kernel: usize,
    #[arg(long, default_value_t = 0.0)]
    signal_dependence: f32,
    /// Also write unquantized `<id>.t32` noisy tensors.
    #[arg(long)]
    t32: bool,
    #[arg(long, default_value = "*.png")]
    pattern: String,
}

#[derive(Args, Debug)]
struct HistArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// PD strides for the BSN maps.
    #[arg(long, value_delimiter = ',', default_values_t = [1, 2, 5])]
    strides: Vec<usize>,
    #[arg(long, default_value_t = 50)]
    bins: usize,
    #[arg(long, default_value_t = 0.5)]
    range: f64,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Directory of noisy images with `<id>.clean.png` partners.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = [0.2, 0.4, 0.6, 0.8])]
    p1_grid: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_values_t = [0.2, 0.4, 0.6, 0.8])]
    p2_grid: Vec<f64>,
    #[arg(long, default_value = "*.png")]
    pattern: String,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut overrides = cli.overrides.clone();
    if let Some(seed) = cli.seed {
        overrides.push(format!("seed={seed}"));
    }
    if let Command::Denoise(a) = &cli.command {
        overrides.extend(a.p1.map(|p| format!("p1={p}")));
        overrides.extend(a.p2.map(|p| format!("p2={p}")));
    }
    let cfg = resolve(cli.preset, cli.config.as_deref(), &overrides)?;
    println!("resolved config: {}", cfg.to_json());
    match cli.command {
        Command::Train(a) => cmd_train(&cfg, a),
        Command::Denoise(a) => cmd_denoise(&cfg, a),
        Command::Eval(a) => cmd_eval(a),
        Command::Pd(a) => cmd_pd(a),
        Command::Noisegen(a) => cmd_noisegen(&cfg, a),
        Command::Hist(a) => cmd_hist(&cfg, a),
        Command::Sweep(a) => cmd_sweep(&cfg, a),
    }
}

/// Git-style content hash: SHA-256 over `blob <len>\0<bytes>`.
fn content_hash(path: &Path) -> Result<String, CliError> {
    let bytes = fs::read(path)?;
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(&bytes);
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

fn write_manifest(dir: &Path, command: &str, cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<(), CliError> {
    let ckpt = match checkpoint {
        Some(p) => json!({ "path": p.display().to_string(), "sha256": content_hash(p)? }),
        None => serde_json::Value::Null,
    };
    let manifest = json!({
        "command": command,
        "version": env!("CARGO_PKG_VERSION"),
        "seed": cfg.train.seed,
        "config": cfg.to_json(),
        "checkpoint": ckpt,
    });
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(dir.join("manifest.json"), text + "\n")?;
    Ok(())
}

fn networks(cfg: &RunConfig, checkpoint: &Path) -> Result<(BlindSpotNet, NoiseExtractor), CliError> {
    Ok(load_checkpoint(checkpoint, &cfg.train.bsn_config(), &cfg.train.ne_config())?)
}

fn thread_pool(jobs: usize) -> Result<rayon::ThreadPool, CliError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| CliError::Usage(format!("cannot start {jobs} workers: {e}")))
}

/// A single file or every matching file in a directory.
fn load_inputs(input: &Path, pattern: &str, with_clean: bool) -> Result<Vec<ImageRecord>, CliError> {
    if input.is_file() {
        let id = input.file_stem().and_then(|s| s.to_str()).unwrap_or("image").to_string();
        return Ok(vec![ImageRecord { id, noisy: load_image(input)?, clean: None }]);
    }
    Ok(make_dataset(input, pattern, with_clean)?)
}

fn cmd_train(cfg: &RunConfig, a: TrainArgs) -> Result<(), CliError> {
    let records = make_dataset(&a.data, &a.pattern, false)?;
    let images: Vec<Tensor> = records.into_iter().map(|r| r.noisy).collect();
    let (mut f, mut h) = init_networks(&cfg.train)?;
    let out = TrainOutput { dir: Some(a.out.clone()), log_every: a.log_every };
    let summary = train(&mut f, &mut h, &images, &cfg.train, &out)?;
    let ckpt = summary.final_checkpoint.expect("run directory given");
    write_manifest(&a.out, "train", cfg, Some(&ckpt))?;
    if let Some(last) = summary.log.last() {
        println!("trained {} steps; final total loss {:.6}", summary.steps, last.loss.total);
    }
    println!("checkpoint: {}", ckpt.display());
    Ok(())
}

fn cmd_denoise(cfg: &RunConfig, a: DenoiseArgs) -> Result<(), CliError> {
    let (f, h) = networks(cfg, &a.checkpoint)?;
    let records = load_inputs(&a.input, &a.pattern, true)?;
    let scheme = Scheme::from(a.scheme);
    fs::create_dir_all(&a.out)?;
    let icfg = &cfg.inference;
    println!("scheme {scheme}: p1={} p2={} on {} image(s)", icfg.p1, icfg.p2, records.len());
    let outputs: Vec<Result<Tensor, CliError>> = thread_pool(a.jobs)?.install(|| {
        records
            .par_iter()
            .enumerate()
            .map(|(i, r)| Ok(denoise(scheme, &f, &h, &r.noisy, icfg, &mut image_rng(icfg.seed, i))?))
            .collect()
    });
    let mut rows = Vec::new();
    for (r, y) in records.iter().zip(outputs) {
        let y = y?;
        save_png(&y, a.out.join(format!("{}.png", r.id)))?;
        if let Some(clean) = &r.clean {
            rows.push(MetricRow::compute(&r.id, &y.clamp(0.0, 1.0), clean)?);
        }
    }
    if !rows.is_empty() {
        fs::write(a.out.join("metrics.csv"), metrics_csv(&rows, true))?;
        if let Some((p, s)) = mean_row(&rows) {
            println!("mean psnr {p:.4} dB, ssim {s:.6} over {} image(s)", rows.len());
        }
    }
    write_manifest(&a.out, "denoise", cfg, Some(&a.checkpoint))
}

fn cmd_eval(a: EvalArgs) -> Result<(), CliError> {
    let records = make_dataset(&a.denoised, &a.pattern, false)?;
    let rows: Vec<Result<MetricRow, CliError>> = thread_pool(a.jobs)?.install(|| {
        records
            .par_iter()
            .map(|r| {
                let ext = if a.pattern.ends_with(".t32") { "t32" } else { "png" };
                let clean = load_image(a.clean.join(format!("{}.{ext}", r.id)))?;
                Ok(MetricRow::compute(&r.id, &r.noisy, &clean)?)
            })
            .collect()
    });
    let rows = rows.into_iter().collect::<Result<Vec<_>, _>>()?;
    let csv = metrics_csv(&rows, true);
    match &a.out {
        Some(p) => fs::write(p, &csv)?,
        None => print!("{csv}"),
    }
    if let Some((p, s)) = mean_row(&rows) {
        println!("mean psnr {p:.4} dB, ssim {s:.6} over {} image(s)", rows.len());
    }
    Ok(())
}

fn cmd_pd(a: PdArgs) -> Result<(), CliError> {
    let order = match a.order_seed {
        Some(s) => ShuffleOrder::random(a.stride, &mut seeded(s))?,
        None => ShuffleOrder::identity(a.stride)?,
    };
    let x = load_image(&a.input)?;
    let y = match a.direction {
        Direction::Forward => pd_forward(&x, &order)?,
        Direction::Inverse => pd_inverse(&x, &order.transpose())?,
    };
    save_image(&y, &a.output)?;
    println!("order {:?} ({:?}) -> {}", order.perm(), a.direction, a.output.display());
    Ok(())
}

fn cmd_noisegen(cfg: &RunConfig, a: NoisegenArgs) -> Result<(), CliError> {
    let model = NoiseModel::box_kernel(a.sigma, a.kernel, a.signal_dependence)?;
    let records = make_dataset(&a.clean, &a.pattern, false)?;
    fs::create_dir_all(&a.out)?;
    for (i, r) in records.iter().enumerate() {
        let noisy = add_correlated_noise(&r.noisy, &model, &mut image_rng(cfg.train.seed, i))?;
        save_png(&noisy, a.out.join(format!("{}.png", r.id)))?;
        save_png(&r.noisy, a.out.join(format!("{}.clean.png", r.id)))?;
        if a.t32 {
            noisy.save_t32(a.out.join(format!("{}.t32", r.id)))?;
        }
    }
    println!("wrote {} noisy image(s) to {}", records.len(), a.out.display());
    write_manifest(&a.out, "noisegen", cfg, None)
}

fn cmd_hist(cfg: &RunConfig, a: HistArgs) -> Result<(), CliError> {
    let (f, h) = networks(cfg, &a.checkpoint)?;
    let x = load_image(&a.image)?;
    let maps = noise_map_per_stride(&f, &h, &x, &a.strides)?;
    export_noise_maps(&maps, &a.out)?;
    for m in &maps {
        let hist = noise_histogram(&m.map, a.bins, a.range)?;
        fs::write(a.out.join(format!("{}_hist.csv", m.name)), hist.to_csv())?;
        let mean_abs = m.map.data().iter().map(|v| v.abs() as f64).sum::<f64>() / m.map.numel() as f64;
        println!("{}: mean |noise| {mean_abs:.5}", m.name);
    }
    write_manifest(&a.out, "hist", cfg, Some(&a.checkpoint))
}

fn cmd_sweep(cfg: &RunConfig, a: SweepArgs) -> Result<(), CliError> {
    let (f, h) = networks(cfg, &a.checkpoint)?;
    let data = make_dataset(&a.data, &a.pattern, true)?;
    let rows = sweep_pr3(&f, &h, &data, &a.p1_grid, &a.p2_grid, cfg.inference.seed)?;
    let csv = sweep_csv(&rows);
    if let Some(dir) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(&a.out, &csv)?;
    print!("{csv}");
    Ok(())
}
