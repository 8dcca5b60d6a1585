//! Desk-scale run on synthetic correlated noise: trains both networks,
//! then compares every inference scheme on held-out images.
//!
//! `cargo run --release --example desk_train -- [steps] [lr] [seed]`

use std::time::Instant;

use i2v_core::data::{synthetic_dataset, NoiseModel};
use i2v_core::inference::{denoise, image_rng, InferenceConfig, Scheme};
use i2v_core::metrics::{psnr, ssim};
use i2v_core::training::{init_networks, train, TrainConfig, TrainOutput};
use i2v_core::{seeded, Result};

fn main() -> Result<()> {
    let mut args = std::env::args().skip(1);
    let steps: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(2000);
    let mut cfg = TrainConfig { max_steps: steps, ..TrainConfig::desk() };
    if let Some(lr) = args.next().and_then(|s| s.parse().ok()) {
        cfg.lr0 = lr;
    }
    // a custom seed reseeds both the data and the training run
    let data_seed = match args.next().and_then(|s| s.parse().ok()) {
        Some(seed) => {
            cfg.seed = seed;
            seed
        }
        None => 2024,
    };
    let model = NoiseModel::box_kernel(0.1, 3, 0.0)?;
    let mut rng = seeded(data_seed);
    let train_set = synthetic_dataset(8, 128, &model, &mut rng)?;
    let test_set = synthetic_dataset(4, 128, &model, &mut rng)?;
    let noisy: Vec<_> = train_set.iter().map(|r| r.noisy.clone()).collect();

    let (mut f, mut h) = init_networks(&cfg)?;
    let start = Instant::now();
    let summary = train(&mut f, &mut h, &noisy, &cfg, &TrainOutput { dir: None, log_every: 100 })?;
    let secs = start.elapsed().as_secs_f64();
    let mean = |rows: &[i2v_core::training::LogRow]| rows.iter().map(|r| r.loss.total as f64).sum::<f64>() / rows.len() as f64;
    let n = summary.log.len();
    let early = mean(&summary.log[5.min(n - 1)..16.min(n)]);
    let late = mean(&summary.log[n.saturating_sub(10)..]);
    println!("{n} steps in {secs:.1}s ({:.3}s/step); loss {early:.5} -> {late:.5} ({:.1}%)", secs / n as f64, 100.0 * late / early);
    for (i, l) in summary.log.iter().enumerate().filter(|(i, _)| i % 200 == 0) {
        println!("  step {i}: {:?}", l.loss);
    }

    let icfg = InferenceConfig::default();
    let (mut p0, mut s0) = (0.0, 0.0);
    for r in &test_set {
        p0 += psnr(&r.noisy.clamp(0.0, 1.0), r.clean.as_ref().unwrap())?;
        s0 += ssim(&r.noisy.clamp(0.0, 1.0), r.clean.as_ref().unwrap())?;
    }
    println!("noisy     psnr {:.3} ssim {:.4}", p0 / 4.0, s0 / 4.0);
    for scheme in Scheme::ALL {
        let t = Instant::now();
        let (mut p, mut s) = (0.0, 0.0);
        for (i, r) in test_set.iter().enumerate() {
            let y = denoise(scheme, &f, &h, &r.noisy, &icfg, &mut image_rng(icfg.seed, i))?.clamp(0.0, 1.0);
            p += psnr(&y, r.clean.as_ref().unwrap())?;
            s += ssim(&y, r.clean.as_ref().unwrap())?;
        }
        println!("{scheme:<9} psnr {:.3} ssim {:.4} ({:.2}s)", p / 4.0, s / 4.0, t.elapsed().as_secs_f64());
    }
    Ok(())
}
