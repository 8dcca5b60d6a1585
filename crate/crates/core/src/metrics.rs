//! PSNR, SSIM and noise-map magnitude statistics.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::data::save_png;
use crate::error::{invalid, shape_err, Result};
use crate::networks::Denoiser;
use crate::pd::{wrapped_apply_tensor, ShuffleOrder};
use crate::tensor::{Shape, Tensor};

/// PSNR reported for identical images.
pub const PSNR_CAP: f64 = 99.0;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

/// Quality of one denoised image against its reference.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricRow {
    pub id: String,
    pub psnr: f64,
    pub ssim: f64,
}

impl MetricRow {
    pub fn compute(id: impl Into<String>, estimate: &Tensor, reference: &Tensor) -> Result<Self> {
        Ok(Self { id: id.into(), psnr: psnr(estimate, reference)?, ssim: ssim(estimate, reference)? })
    }
}

fn same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err!("metric inputs differ in shape: {} vs {}", a.shape(), b.shape()));
    }
    Ok(())
}

/// Peak signal-to-noise ratio for signals on `[0, 1]`, capped at [`PSNR_CAP`].
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    same_shape(a, b)?;
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum::<f64>()
        / a.numel() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

fn gaussian_window() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - half).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Channel-mean grayscale plane of sample `n`.
fn gray_plane(t: &Tensor, n: usize) -> Vec<f64> {
    let s = t.shape();
    let mut out = vec![0.0f64; s.h * s.w];
    for c in 0..s.c {
        for y in 0..s.h {
            for x in 0..s.w {
                out[y * s.w + x] += t.at(n, c, y, x) as f64;
            }
        }
    }
    out.iter_mut().for_each(|v| *v /= s.c as f64);
    out
}

/// Separable Gaussian filter over valid positions only.
fn filter_valid(p: &[f64], h: usize, w: usize, g: &[f64]) -> (Vec<f64>, usize, usize) {
    let k = g.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..k).map(|i| g[i] * p[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..k).map(|i| g[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    (out, oh, ow)
}

/// Mean structural similarity on the channel-mean grayscale image, with
/// an 11×11 Gaussian window (σ = 1.5) over valid positions, averaged
/// across the batch.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    same_shape(a, b)?;
    let s = a.shape();
    if s.h < SSIM_WINDOW || s.w < SSIM_WINDOW {
        return Err(invalid!("SSIM needs at least {SSIM_WINDOW}×{SSIM_WINDOW} pixels, got {}×{}", s.h, s.w));
    }
    let g = gaussian_window();
    let mut total = 0.0;
    for n in 0..s.n {
        let pa = gray_plane(a, n);
        let pb = gray_plane(b, n);
        let prod = |u: &[f64], v: &[f64]| u.iter().zip(v).map(|(x, y)| x * y).collect::<Vec<_>>();
        let (mu_a, oh, ow) = filter_valid(&pa, s.h, s.w, &g);
        let (mu_b, _, _) = filter_valid(&pb, s.h, s.w, &g);
        let (e_aa, _, _) = filter_valid(&prod(&pa, &pa), s.h, s.w, &g);
        let (e_bb, _, _) = filter_valid(&prod(&pb, &pb), s.h, s.w, &g);
        let (e_ab, _, _) = filter_valid(&prod(&pa, &pb), s.h, s.w, &g);
        let mut acc = 0.0;
        for i in 0..oh * ow {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = e_aa[i] - ma * ma;
            let vb = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            acc += ((2.0 * ma * mb + C1) * (2.0 * cov + C2)) / ((ma * ma + mb * mb + C1) * (va + vb + C2));
        }
        total += acc / (oh * ow) as f64;
    }
    Ok(total / s.n as f64)
}

/// Histogram of `|noise|` over `bins` uniform bins on `[0, range_max]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Histogram {
    /// `bins + 1` bin edges.
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
}

impl Histogram {
    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// `bin_low,bin_high,count` rows with a header.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("bin_low,bin_high,count\n");
        for (i, c) in self.counts.iter().enumerate() {
            let _ = writeln!(s, "{:.6},{:.6},{}", self.edges[i], self.edges[i + 1], c);
        }
        s
    }
}

/// Values beyond `range_max` land in the last bin.
pub fn noise_histogram(noise: &Tensor, bins: usize, range_max: f64) -> Result<Histogram> {
    if bins == 0 {
        return Err(invalid!("histogram needs at least one bin"));
    }
    if !(range_max > 0.0) {
        return Err(invalid!("histogram range must be positive, got {range_max}"));
    }
    let width = range_max / bins as f64;
    let edges = (0..=bins).map(|i| i as f64 * width).collect();
    let mut counts = vec![0u64; bins];
    for &v in noise.data() {
        let m = (v as f64).abs();
        // NaN magnitudes also end up in the overflow bin
        let i = if m.is_finite() { ((m / width) as usize).min(bins - 1) } else { bins - 1 };
        counts[i] += 1;
    }
    Ok(Histogram { edges, counts })
}

/// A named noise map, e.g. `f_s5` or `h`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseMap {
    pub name: String,
    pub map: Tensor,
}

/// `x − f(x)` with PD wrapping at each stride (identity order), plus the
/// noise extractor's own prediction `h(x)` last.
pub fn noise_map_per_stride(f: &dyn Denoiser, h: &dyn Denoiser, x: &Tensor, strides: &[usize]) -> Result<Vec<NoiseMap>> {
    let mut out = Vec::with_capacity(strides.len() + 1);
    for &s in strides {
        let order = ShuffleOrder::identity(s)?;
        let y = wrapped_apply_tensor(|t: &Tensor| f.apply(t), x, &order)?;
        out.push(NoiseMap { name: format!("f_s{s}"), map: x.sub(&y)? });
    }
    out.push(NoiseMap { name: "h".into(), map: h.apply(x)? });
    Ok(out)
}

/// Writes `<name>.png` (offset by +0.5 for display) and `<name>.t32` for each map.
pub fn export_noise_maps(maps: &[NoiseMap], dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    for m in maps {
        m.map.save_t32(dir.join(format!("{}.t32", m.name)))?;
        let s = m.map.shape();
        for n in 0..s.n {
            let img = m.map.sample(n)?.add_scalar(0.5);
            let name = if s.n == 1 { format!("{}.png", m.name) } else { format!("{}_{n}.png", m.name) };
            if s.c == 3 {
                save_png(&img, dir.join(name))?;
            } else {
                // replicate the first channel for single-channel maps
                let rgb = Tensor::from_fn(Shape::new(1, 3, s.h, s.w), |_, _, y, x| img.at(0, 0, y, x));
                save_png(&rgb, dir.join(name))?;
            }
        }
    }
    Ok(())
}

/// `id,psnr,ssim` CSV, optionally with placeholder columns for learned
/// metrics that this crate does not compute.
pub fn metrics_csv(rows: &[MetricRow], learned_placeholders: bool) -> String {
    let mut s = String::from(if learned_placeholders { "id,psnr,ssim,lpips,dists\n" } else { "id,psnr,ssim\n" });
    for r in rows {
        let _ = write!(s, "{},{:.4},{:.6}", r.id, r.psnr, r.ssim);
        s.push_str(if learned_placeholders { ",n/a,n/a\n" } else { "\n" });
    }
    s
}

/// Mean PSNR and SSIM over rows.
pub fn mean_row(rows: &[MetricRow]) -> Option<(f64, f64)> {
    if rows.is_empty() {
        return None;
    }
    let n = rows.len() as f64;
    Some((rows.iter().map(|r| r.psnr).sum::<f64>() / n, rows.iter().map(|r| r.ssim).sum::<f64>() / n))
}
