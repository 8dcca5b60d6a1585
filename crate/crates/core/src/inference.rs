//! Inference schemes: PD-wrapped BSN baseline, noise-extractor denoising,
//! their blend, random-replacing refinement (R³) and its progressive,
//! single-pass variant (PR³).

use std::fmt::{self, Write as _};
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::ImageRecord;
use crate::error::{invalid, shape_err, Error, Result};
use crate::metrics::{psnr, ssim};
use crate::networks::Denoiser;
use crate::pd::{wrapped_apply_tensor, ShuffleOrder};
use crate::tensor::{Shape, Tensor};
use crate::{seeded, Rng};

/// PD stride used by the baseline at inference time.
pub const INFERENCE_STRIDE: usize = 2;

/// A {0,1} gate with the same shape as the batch it applies to; every
/// entry (sample, channel, pixel) is drawn independently.
#[derive(Clone, Debug, PartialEq)]
pub struct BinaryMask {
    mask: Tensor,
}

impl BinaryMask {
    /// Bernoulli(`p`) entries.
    pub fn sample(shape: Shape, p: f64, rng: &mut Rng) -> Result<Self> {
        if !(0.0..=1.0).contains(&p) {
            return Err(invalid!("mask probability must be in [0, 1], got {p}"));
        }
        let mask = Tensor::from_fn(shape, |_, _, _, _| if rng.random_bool(p) { 1.0 } else { 0.0 });
        Ok(Self { mask })
    }

    pub fn ones(shape: Shape) -> Self {
        Self { mask: Tensor::full(shape, 1.0) }
    }

    pub fn zeros(shape: Shape) -> Self {
        Self { mask: Tensor::zeros(shape) }
    }

    pub fn from_tensor(mask: Tensor) -> Result<Self> {
        if mask.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(invalid!("mask entries must be 0 or 1"));
        }
        Ok(Self { mask })
    }

    pub fn tensor(&self) -> &Tensor {
        &self.mask
    }

    pub fn shape(&self) -> Shape {
        self.mask.shape()
    }

    /// Fraction of ones.
    pub fn density(&self) -> f64 {
        self.mask.data().iter().map(|&v| v as f64).sum::<f64>() / self.mask.numel() as f64
    }
}

/// Per-pixel selection `mask ⊙ x + (1 − mask) ⊙ y_prime`. A single-sample
/// mask is broadcast over the batch.
pub fn random_replace(mask: &BinaryMask, x: &Tensor, y_prime: &Tensor) -> Result<Tensor> {
    let (ms, xs) = (mask.shape(), x.shape());
    if xs != y_prime.shape() {
        return Err(shape_err!("random_replace inputs differ: {} vs {}", xs, y_prime.shape()));
    }
    if (ms.n != xs.n && ms.n != 1) || (ms.c, ms.h, ms.w) != (xs.c, xs.h, xs.w) {
        return Err(shape_err!("mask {} does not gate image {}", ms, xs));
    }
    let plane = xs.c * xs.h * xs.w;
    let m = mask.tensor().data();
    let data = x
        .data()
        .iter()
        .zip(y_prime.data())
        .enumerate()
        .map(|(i, (&a, &b))| if m[if ms.n == 1 { i % plane } else { i }] != 0.0 { a } else { b })
        .collect();
    Tensor::new(xs, data)
}

/// The available inference schemes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Baseline,
    Ne,
    Blend,
    R3,
    Pr3,
}

impl Scheme {
    pub const ALL: [Scheme; 5] = [Scheme::Baseline, Scheme::Ne, Scheme::Blend, Scheme::R3, Scheme::Pr3];

    pub fn name(self) -> &'static str {
        match self {
            Scheme::Baseline => "baseline",
            Scheme::Ne => "ne",
            Scheme::Blend => "blend",
            Scheme::R3 => "r3",
            Scheme::Pr3 => "pr3",
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scheme::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| invalid!("unknown scheme {s:?}; expected one of baseline, ne, blend, r3, pr3"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceConfig {
    /// Keep-probability of the noisy pixel when re-noising for f.
    pub p1: f64,
    /// Keep-probability of the noisy pixel when re-noising for h.
    pub p2: f64,
    /// R³ repetitions.
    pub r3_repetitions: usize,
    /// R³ keep-probability.
    pub r3_probability: f64,
    /// Weight of the baseline output in the blend; the extractor gets the rest.
    pub blend_weight: f32,
    pub seed: u64,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self { p1: 0.4, p2: 0.4, r3_repetitions: 8, r3_probability: 0.16, blend_weight: 0.5, seed: 0 }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("p1", self.p1), ("p2", self.p2), ("r3_probability", self.r3_probability)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(invalid!("{name} must be in [0, 1], got {p}"));
            }
        }
        if self.r3_repetitions == 0 {
            return Err(invalid!("r3_repetitions must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.blend_weight) {
            return Err(invalid!("blend_weight must be in [0, 1]"));
        }
        Ok(())
    }
}

/// The generator used for image `index` of a run, independent of the
/// order in which images are processed.
pub fn image_rng(seed: u64, index: usize) -> Rng {
    seeded(seed ^ (index as u64).wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// The BSN wrapped in stride-2 PD with the identity order.
pub fn baseline_apbsn(f: &dyn Denoiser, x: &Tensor) -> Result<Tensor> {
    let order = ShuffleOrder::identity(INFERENCE_STRIDE)?;
    wrapped_apply_tensor(|t: &Tensor| f.apply(t), x, &order)
}

/// `x − h(x)`.
pub fn ne_denoise(h: &dyn Denoiser, x: &Tensor) -> Result<Tensor> {
    x.sub(&h.apply(x)?)
}

/// `w · baseline + (1 − w) · ne`.
pub fn blend_weighted(f: &dyn Denoiser, h: &dyn Denoiser, x: &Tensor, w: f32) -> Result<Tensor> {
    let a = baseline_apbsn(f, x)?;
    let b = ne_denoise(h, x)?;
    a.zip_map(&b, |u, v| w * u + (1.0 - w) * v)
}

/// Equal-weight blend of the baseline and extractor outputs.
pub fn blend_i2vb(f: &dyn Denoiser, h: &dyn Denoiser, x: &Tensor) -> Result<Tensor> {
    blend_weighted(f, h, x, 0.5)
}

/// Average of `T` BSN passes (no PD) over random mixtures of `x` and the
/// baseline prediction.
pub fn r3(f: &dyn Denoiser, x: &Tensor, p: f64, t: usize, rng: &mut Rng) -> Result<Tensor> {
    if t == 0 {
        return Err(invalid!("r3 needs at least one repetition"));
    }
    let y0 = baseline_apbsn(f, x)?;
    let mut acc = vec![0.0f64; x.numel()];
    for _ in 0..t {
        let mask = BinaryMask::sample(x.shape(), p, rng)?;
        let y = f.apply(&random_replace(&mask, x, &y0)?)?;
        acc.iter_mut().zip(y.data()).for_each(|(a, &v)| *a += v as f64);
    }
    Tensor::new(x.shape(), acc.into_iter().map(|v| (v / t as f64) as f32).collect())
}

/// PR³ with masks drawn from `rng` (first `M₁`, then `M₂`).
pub fn pr3(f: &dyn Denoiser, h: &dyn Denoiser, x: &Tensor, cfg: &InferenceConfig, rng: &mut Rng) -> Result<Tensor> {
    let m1 = BinaryMask::sample(x.shape(), cfg.p1, rng)?;
    let m2 = BinaryMask::sample(x.shape(), cfg.p2, rng)?;
    pr3_with_masks(f, h, x, &m1, &m2)
}

/// PR³ for given mask realizations: one pass of f and two of h, no PD.
pub fn pr3_with_masks(f: &dyn Denoiser, h: &dyn Denoiser, x: &Tensor, m1: &BinaryMask, m2: &BinaryMask) -> Result<Tensor> {
    let y_hat = ne_denoise(h, x)?;
    let y_bsn = f.apply(&random_replace(m1, x, &y_hat)?)?;
    let n_ne = h.apply(&random_replace(m2, x, &y_bsn)?)?;
    let x_minus_n = x.sub(&n_ne)?;
    // mask ones take the extractor's estimate, zeros keep the BSN output
    let y_ne = random_replace(m2, &x_minus_n, &y_bsn)?;
    y_hat.zip_map(&y_ne, |a, b| 0.5 * (a + b))
}

/// Runs `scheme` on one image. Only R³ and PR³ draw from `rng`.
pub fn denoise(
    scheme: Scheme,
    f: &dyn Denoiser,
    h: &dyn Denoiser,
    x: &Tensor,
    cfg: &InferenceConfig,
    rng: &mut Rng,
) -> Result<Tensor> {
    match scheme {
        Scheme::Baseline => baseline_apbsn(f, x),
        Scheme::Ne => ne_denoise(h, x),
        Scheme::Blend => blend_weighted(f, h, x, cfg.blend_weight),
        Scheme::R3 => r3(f, x, cfg.r3_probability, cfg.r3_repetitions, rng),
        Scheme::Pr3 => pr3(f, h, x, cfg, rng),
    }
}

/// Counts calls made through it to the wrapped network.
pub struct CountingDenoiser<'a> {
    inner: &'a dyn Denoiser,
    calls: AtomicUsize,
}

impl<'a> CountingDenoiser<'a> {
    pub fn new(inner: &'a dyn Denoiser) -> Self {
        Self { inner, calls: AtomicUsize::new(0) }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }

    pub fn reset(&self) {
        self.calls.store(0, Ordering::Relaxed);
    }
}

impl Denoiser for CountingDenoiser<'_> {
    fn apply(&self, x: &Tensor) -> Result<Tensor> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        self.inner.apply(x)
    }
}

/// One cell of a PR³ probability sweep, averaged over the dataset.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub p1: f64,
    pub p2: f64,
    pub psnr: f64,
    pub ssim: f64,
}

/// Mean PSNR/SSIM of PR³ for each `(p1, p2)` pair, rows ordered by `p1`
/// then `p2`. Image `i` always uses [`image_rng`]`(seed, i)`.
pub fn sweep_pr3(
    f: &dyn Denoiser,
    h: &dyn Denoiser,
    dataset: &[ImageRecord],
    p1_grid: &[f64],
    p2_grid: &[f64],
    seed: u64,
) -> Result<Vec<SweepRow>> {
    if p1_grid.is_empty() || p2_grid.is_empty() {
        return Err(invalid!("sweep grids must not be empty"));
    }
    if dataset.is_empty() {
        return Err(invalid!("sweep needs at least one image"));
    }
    if let Some(r) = dataset.iter().find(|r| r.clean.is_none()) {
        return Err(invalid!("{}: sweep needs a clean reference", r.id));
    }
    let mut rows = Vec::with_capacity(p1_grid.len() * p2_grid.len());
    for &p1 in p1_grid {
        for &p2 in p2_grid {
            let cfg = InferenceConfig { p1, p2, seed, ..InferenceConfig::default() };
            cfg.validate()?;
            let (mut ps, mut ss) = (0.0, 0.0);
            for (i, rec) in dataset.iter().enumerate() {
                let clean = rec.clean.as_ref().expect("checked above");
                let y = pr3(f, h, &rec.noisy, &cfg, &mut image_rng(seed, i))?;
                let y = y.clamp(0.0, 1.0);
                ps += psnr(&y, clean)?;
                ss += ssim(&y, clean)?;
            }
            let n = dataset.len() as f64;
            rows.push(SweepRow { p1, p2, psnr: ps / n, ssim: ss / n });
        }
    }
    Ok(rows)
}

/// `p1,p2,psnr,ssim` CSV.
pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("p1,p2,psnr,ssim\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{:.4},{:.6}", r.p1, r.p2, r.psnr, r.ssim);
    }
    s
}
