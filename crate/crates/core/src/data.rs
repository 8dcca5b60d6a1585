//! Image I/O, dataset discovery and synthetic spatially correlated noise.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::conv::{conv2d_forward, ConvGeom};
use crate::error::{invalid, shape_err, Error, Result};
use crate::pd::{pd_forward, ShuffleOrder};
use crate::tensor::{Shape, Tensor};
use crate::Rng;

/// One noisy image, optionally paired with its clean reference.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageRecord {
    pub id: String,
    pub noisy: Tensor,
    pub clean: Option<Tensor>,
}

/// Gaussian noise, optionally signal dependent, smoothed by a small
/// normalized kernel to make it spatially correlated.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    /// Standard deviation of the white noise before smoothing.
    pub sigma: f32,
    /// Side of the square kernel (odd).
    pub kernel_size: usize,
    /// Row-major kernel taps, non-negative and summing to 1.
    pub kernel: Vec<f32>,
    /// Per-pixel std is `sigma · (1 + signal_dependence · clean)`.
    pub signal_dependence: f32,
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self::box_kernel(0.1, 3, 0.0).expect("valid default")
    }
}

impl NoiseModel {
    /// Uniform `k×k` box kernel; `k = 1` gives white noise.
    pub fn box_kernel(sigma: f32, k: usize, signal_dependence: f32) -> Result<Self> {
        let taps = k * k;
        Self::with_kernel(sigma, k, vec![1.0 / taps as f32; taps], signal_dependence)
    }

    pub fn with_kernel(sigma: f32, kernel_size: usize, kernel: Vec<f32>, signal_dependence: f32) -> Result<Self> {
        let m = Self { sigma, kernel_size, kernel, signal_dependence };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(invalid!("noise sigma must be non-negative, got {}", self.sigma));
        }
        if !(self.signal_dependence >= 0.0) {
            return Err(invalid!("signal dependence must be non-negative"));
        }
        if self.kernel_size % 2 == 0 || self.kernel.len() != self.kernel_size * self.kernel_size {
            return Err(invalid!("kernel must be an odd k×k array"));
        }
        if self.kernel.iter().any(|&v| v < 0.0) {
            return Err(invalid!("kernel taps must be non-negative"));
        }
        let sum: f32 = self.kernel.iter().sum();
        if (sum - 1.0).abs() > 1e-5 {
            return Err(invalid!("kernel taps sum to {sum}, expected 1"));
        }
        Ok(())
    }

    /// `‖kernel‖₂`: the factor by which smoothing scales the white-noise std.
    pub fn kernel_norm(&self) -> f32 {
        self.kernel.iter().map(|v| v * v).sum::<f32>().sqrt()
    }
}

/// Adds correlated noise to `clean`, channel by channel. The result is not clamped.
pub fn add_correlated_noise(clean: &Tensor, model: &NoiseModel, rng: &mut Rng) -> Result<Tensor> {
    model.validate()?;
    if model.sigma == 0.0 {
        return Ok(clean.clone());
    }
    let white = clean.map(|v| {
        let z: f32 = StandardNormal.sample(rng);
        z * model.sigma * (1.0 + model.signal_dependence * v)
    });
    let noise = smooth_per_channel(&white, model)?;
    clean.add(&noise)
}

fn smooth_per_channel(t: &Tensor, model: &NoiseModel) -> Result<Tensor> {
    let s = t.shape();
    let k = model.kernel_size;
    let planes = t.reshape(Shape::new(s.n * s.c, 1, s.h, s.w))?;
    let kernel = Tensor::new(Shape::new(1, 1, k, k), model.kernel.clone())?;
    conv2d_forward(&planes, &kernel, None, ConvGeom::same(k, 1))?.reshape(s)
}

/// Lag-1 autocorrelation over horizontally and vertically adjacent pixel
/// pairs inside each plane, relative to the lag-0 variance.
pub fn lag1_autocorrelation(t: &Tensor) -> f64 {
    lag1_within_blocks(t, t.shape().h, t.shape().w)
}

/// Lag-1 autocorrelation inside the stride-`s` PD sub-images of `t`.
pub fn lag1_autocorrelation_pd(t: &Tensor, stride: usize) -> Result<f64> {
    let order = ShuffleOrder::identity(stride)?;
    let mosaic = pd_forward(t, &order)?;
    let s = t.shape();
    Ok(lag1_within_blocks(&mosaic, s.h / stride, s.w / stride))
}

fn lag1_within_blocks(t: &Tensor, bh: usize, bw: usize) -> f64 {
    let s = t.shape();
    let n = t.numel() as f64;
    let mean = t.data().iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = t.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    let (mut cov, mut pairs) = (0.0f64, 0usize);
    for b in 0..s.n {
        for c in 0..s.c {
            for y in 0..s.h {
                for x in 0..s.w {
                    let v = t.at(b, c, y, x) as f64 - mean;
                    if (x + 1) < s.w && (x + 1) % bw != 0 {
                        cov += v * (t.at(b, c, y, x + 1) as f64 - mean);
                        pairs += 1;
                    }
                    if (y + 1) < s.h && (y + 1) % bh != 0 {
                        cov += v * (t.at(b, c, y + 1, x) as f64 - mean);
                        pairs += 1;
                    }
                }
            }
        }
    }
    if pairs == 0 || var == 0.0 {
        return 0.0;
    }
    (cov / pairs as f64) / var
}

/// Reads an 8-bit RGB PNG into a `(1, 3, h, w)` tensor in `[0, 1]`.
pub fn load_png(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let mut decoder = png::Decoder::new(BufReader::new(File::open(path)?));
    decoder.set_transformations(png::Transformations::IDENTITY);
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let (color, depth) = reader.output_color_type();
    if color != png::ColorType::Rgb || depth != png::BitDepth::Eight {
        return Err(Error::Format(format!(
            "{}: only 8-bit RGB PNGs are supported, found {color:?} at {depth:?}",
            path.display()
        )));
    }
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::Format(format!("{}: image too large", path.display())))?;
    let mut buf = vec![0u8; size];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let line = info.line_size;
    Ok(Tensor::from_fn(Shape::new(1, 3, h, w), |_, c, y, x| buf[y * line + 3 * x + c] as f32 / 255.0))
}

/// Quantizes a `(1, 3, h, w)` tensor to 8 bits (clamp, round to nearest)
/// and writes it as an RGB PNG.
pub fn save_png(t: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let s = t.shape();
    if s.n != 1 || s.c != 3 {
        return Err(shape_err!("save_png expects shape (1, 3, h, w), got {s}"));
    }
    let mut bytes = Vec::with_capacity(s.h * s.w * 3);
    for y in 0..s.h {
        for x in 0..s.w {
            for c in 0..3 {
                bytes.push(quantize(t.at(0, c, y, x)));
            }
        }
    }
    let file = BufWriter::new(File::create(path.as_ref())?);
    let mut enc = png::Encoder::new(file, s.w as u32, s.h as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| Error::Format(e.to_string()))?;
    writer.write_image_data(&bytes).map_err(|e| Error::Format(e.to_string()))?;
    writer.finish().map_err(|e| Error::Format(e.to_string()))?;
    Ok(())
}

fn quantize(v: f32) -> u8 {
    let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
    (v * 255.0).round() as u8
}

/// Loads a PNG or T32 file by extension.
pub fn load_image(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    match path.extension().and_then(|e| e.to_str()) {
        Some(e) if e.eq_ignore_ascii_case("png") => load_png(path),
        Some(e) if e.eq_ignore_ascii_case("t32") => Tensor::load_t32(path),
        _ => Err(invalid!("{}: unsupported image extension", path.display())),
    }
}

/// Saves a PNG or T32 file by extension.
pub fn save_image(t: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    match path.extension().and_then(|e| e.to_str()) {
        Some(e) if e.eq_ignore_ascii_case("png") => save_png(t, path),
        Some(e) if e.eq_ignore_ascii_case("t32") => t.save_t32(path),
        _ => Err(invalid!("{}: unsupported image extension", path.display())),
    }
}

/// Suffix marking the clean partner of a noisy image.
pub const CLEAN_SUFFIX: &str = ".clean";

/// Simple `*`-wildcard match of a whole file name.
fn wildcard_match(pattern: &str, name: &str) -> bool {
    let parts: Vec<&str> = pattern.split('*').collect();
    if parts.len() == 1 {
        return pattern == name;
    }
    let (first, last) = (parts[0], parts[parts.len() - 1]);
    if !name.starts_with(first) || name.len() < first.len() + last.len() || !name.ends_with(last) {
        return false;
    }
    let mut rest = &name[first.len()..name.len() - last.len()];
    for mid in &parts[1..parts.len() - 1] {
        match rest.find(mid) {
            Some(i) => rest = &rest[i + mid.len()..],
            None => return false,
        }
    }
    true
}

/// Splits `name.clean.png` style file names into the image id.
fn image_id(file_name: &str) -> Option<&str> {
    let (stem, _ext) = file_name.rsplit_once('.')?;
    Some(stem)
}

/// Noisy images in `dir` matching `pattern`, sorted by file name.
/// With `with_clean`, each `<id>.png` is paired with `<id>.clean.png`.
pub fn make_dataset(dir: impl AsRef<Path>, pattern: &str, with_clean: bool) -> Result<Vec<ImageRecord>> {
    let dir = dir.as_ref();
    if !dir.is_dir() {
        return Err(invalid!("{} is not a directory", dir.display()));
    }
    let mut files: Vec<(String, PathBuf)> = Vec::new();
    for entry in fs::read_dir(dir)? {
        let entry = entry?;
        let name = entry.file_name().to_string_lossy().into_owned();
        let Some(id) = image_id(&name) else { continue };
        if id.ends_with(CLEAN_SUFFIX) || !wildcard_match(pattern, &name) || !entry.path().is_file() {
            continue;
        }
        files.push((name, entry.path()));
    }
    if files.is_empty() {
        return Err(invalid!("no files in {} match {pattern}", dir.display()));
    }
    files.sort();
    files
        .into_iter()
        .map(|(name, path)| {
            let id = image_id(&name).unwrap_or(&name).to_string();
            let noisy = load_image(&path)?;
            let clean = if with_clean {
                let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("png");
                let partner = dir.join(format!("{id}{CLEAN_SUFFIX}.{ext}"));
                if partner.is_file() {
                    Some(load_image(&partner)?)
                } else {
                    log::warn!("{id}: no clean partner at {}", partner.display());
                    None
                }
            } else {
                None
            };
            Ok(ImageRecord { id, noisy, clean })
        })
        .collect()
}

/// Smooth, photo-like synthetic scene in `[0.05, 0.95]`: a colour gradient,
/// soft blobs, a few soft-edged discs and rectangles and one patch of
/// low-frequency stripes. Feature sizes scale with the image.
pub fn synthetic_scene(h: usize, w: usize, rng: &mut Rng) -> Tensor {
    let size = h.min(w).max(1) as f32;
    let mut img = Tensor::zeros(Shape::new(1, 3, h, w));
    let base: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.25..0.75));
    let slope: [(f32, f32); 3] = std::array::from_fn(|_| (rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3)));
    let paint = |img: &mut Tensor, f: &dyn Fn(f32, f32) -> f32, color: [f32; 3], mix: bool| {
        for y in 0..h {
            for x in 0..w {
                let a = f(y as f32, x as f32);
                for (c, &v) in color.iter().enumerate() {
                    let old = img.at(0, c, y, x);
                    img.set(0, c, y, x, if mix { old + a * (v - old) } else { old + a * v });
                }
            }
        }
    };
    for c in 0..3 {
        let (sy, sx) = slope[c];
        for y in 0..h {
            for x in 0..w {
                let (fy, fx) = (y as f32 / h as f32 - 0.5, x as f32 / w as f32 - 0.5);
                img.set(0, c, y, x, base[c] + sy * fy + sx * fx);
            }
        }
    }
    for _ in 0..rng.random_range(3..6) {
        let amp: [f32; 3] = std::array::from_fn(|_| rng.random_range(-0.2..0.2));
        let (cy, cx) = (rng.random_range(0.0..h as f32), rng.random_range(0.0..w as f32));
        let sigma = rng.random_range(0.1..0.3) * size;
        let blob = move |y: f32, x: f32| (-((y - cy).powi(2) + (x - cx).powi(2)) / (2.0 * sigma * sigma)).exp();
        paint(&mut img, &blob, amp, false);
    }
    // edges are logistic ramps a few pixels wide
    let soft = rng.random_range(1.5..3.0f32);
    for _ in 0..rng.random_range(2..5) {
        let color: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.1..0.9));
        let (cy, cx) = (rng.random_range(0.0..h as f32), rng.random_range(0.0..w as f32));
        let (ry, rx) = (rng.random_range(0.12..0.3) * size, rng.random_range(0.12..0.3) * size);
        let disc = rng.random_bool(0.5);
        let shape = move |y: f32, x: f32| {
            let (dy, dx) = ((y - cy) / ry, (x - cx) / rx);
            // approximate signed distance in pixels, negative inside
            let d = if disc {
                ((dy * dy + dx * dx).sqrt() - 1.0) * ry.min(rx)
            } else {
                ((dy.abs() - 1.0) * ry).max((dx.abs() - 1.0) * rx)
            };
            1.0 / (1.0 + (d / soft).exp())
        };
        paint(&mut img, &shape, color, true);
    }
    let period = rng.random_range(0.2..0.35) * size;
    let amp = rng.random_range(0.04..0.08f32);
    let (py, px) = (rng.random_range(0.0..h as f32 / 2.0), rng.random_range(0.0..w as f32 / 2.0));
    let (ph, pw) = (h as f32 / 2.0, w as f32 / 2.0);
    let stripes = move |y: f32, x: f32| {
        let window = |t: f32, len: f32| (std::f32::consts::PI * (t / len).clamp(0.0, 1.0)).sin();
        window(y - py, ph) * window(x - px, pw) * (2.0 * std::f32::consts::PI * (x + y) / period).sin()
    };
    paint(&mut img, &stripes, [amp; 3], false);
    img.clamp(0.05, 0.95)
}

/// `count` synthetic clean scenes of `size×size` with noisy realizations.
pub fn synthetic_dataset(count: usize, size: usize, model: &NoiseModel, rng: &mut Rng) -> Result<Vec<ImageRecord>> {
    (0..count)
        .map(|i| {
            let clean = synthetic_scene(size, size, rng);
            let noisy = add_correlated_noise(&clean, model, rng)?;
            Ok(ImageRecord { id: format!("syn{i:03}"), noisy, clean: Some(clean) })
        })
        .collect()
}
