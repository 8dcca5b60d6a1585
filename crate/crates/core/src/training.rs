//! Joint optimization of the blind-spot network and the noise extractor.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::graph::Graph;
use crate::losses::{loss_total, LossReport, LossWeights, Strides};
use crate::networks::{save_checkpoint, BlindSpotNet, BsnConfig, NeConfig, NetworkParams, NoiseExtractor};
use crate::tensor::{Shape, Tensor};
use crate::{seeded, Rng};

/// Everything that determines a training run. Serialized as a flat JSON
/// object; the loss weights appear as `lambda_*` keys.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr0: f64,
    /// Epochs at which the learning rate is multiplied by `decay`.
    pub milestones: Vec<usize>,
    pub decay: f64,
    pub batch: usize,
    /// Side of the square training patch; must be a multiple of the stride lcm.
    pub patch: usize,
    pub epochs: usize,
    /// Stop after this many steps regardless of `epochs`; 0 disables.
    pub max_steps: usize,
    /// Patches drawn from each image per epoch. An epoch is one pass over
    /// `dataset_len × patches_per_image` patches, i.e. that many divided by
    /// `batch` (rounded up) steps.
    pub patches_per_image: usize,
    #[serde(flatten)]
    pub weights: LossWeights,
    pub stride_train: usize,
    pub stride_residual: usize,
    pub seed: u64,
    pub augment_crop: bool,
    pub augment_rotate: bool,
    pub augment_mirror: bool,
    /// Write a checkpoint every this many steps; 0 writes only the final one.
    pub checkpoint_every: usize,
    pub bsn_channels: usize,
    pub bsn_depth: usize,
    pub ne_width: usize,
    pub ne_layers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 1e-4,
            milestones: vec![200, 280],
            decay: 0.1,
            batch: 2,
            patch: 500,
            epochs: 300,
            max_steps: 0,
            patches_per_image: 1,
            weights: LossWeights::default(),
            stride_train: 5,
            stride_residual: 2,
            seed: 0,
            augment_crop: true,
            augment_rotate: true,
            augment_mirror: true,
            checkpoint_every: 0,
            bsn_channels: 16,
            bsn_depth: 3,
            ne_width: 32,
            ne_layers: 6,
        }
    }
}

impl TrainConfig {
    /// Small patches and a larger batch, sized for a single CPU core. An
    /// epoch is 8 steps on an 8-image set, so 250 epochs are 2000 steps
    /// and the milestones fall late in the run as at full scale.
    pub fn desk() -> Self {
        Self { lr0: 1e-3, batch: 4, patch: 40, epochs: 250, patches_per_image: 4, ..Self::default() }
    }

    pub fn strides(&self) -> Strides {
        Strides { train: self.stride_train, residual: self.stride_residual }
    }

    pub fn bsn_config(&self) -> BsnConfig {
        BsnConfig { base_channels: self.bsn_channels, depth: self.bsn_depth, ..BsnConfig::default() }
    }

    pub fn ne_config(&self) -> NeConfig {
        NeConfig { width: self.ne_width, layers: self.ne_layers, ..NeConfig::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(invalid!("lr0 must be positive"));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(invalid!("decay must be in (0, 1]"));
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return Err(invalid!("milestones must be strictly increasing: {:?}", self.milestones));
        }
        if self.batch == 0 || self.patches_per_image == 0 {
            return Err(invalid!("batch and patches_per_image must be positive"));
        }
        let lcm = self.strides().lcm();
        if lcm == 0 || self.patch == 0 || self.patch % lcm != 0 {
            return Err(invalid!("patch {} must be a positive multiple of {lcm}", self.patch));
        }
        self.weights.validate()?;
        self.bsn_config().validate()?;
        self.ne_config().validate()
    }

    pub fn steps_per_epoch(&self, dataset_len: usize) -> usize {
        (dataset_len * self.patches_per_image).div_ceil(self.batch).max(1)
    }

    pub fn total_steps(&self, dataset_len: usize) -> usize {
        let all = self.epochs * self.steps_per_epoch(dataset_len);
        if self.max_steps > 0 {
            all.min(self.max_steps)
        } else {
            all
        }
    }
}

/// Piecewise-constant schedule: `lr0 · decay^(milestones ≤ epoch)`.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    let drops = cfg.milestones.iter().filter(|&&m| m <= epoch).count();
    cfg.lr0 * cfg.decay.powi(drops as i32)
}

/// Rectified Adam hyper-parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RAdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for RAdamHyper {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Moment buffers for one network, in parameter order.
#[derive(Clone, Debug)]
pub struct RAdamState {
    pub hyper: RAdamHyper,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl RAdamState {
    pub fn new(params: &NetworkParams) -> Self {
        Self::with_sizes(params.iter().map(|(_, t)| t.numel()), RAdamHyper::default())
    }

    pub fn with_sizes(sizes: impl IntoIterator<Item = usize>, hyper: RAdamHyper) -> Self {
        let (m, v) = sizes.into_iter().map(|n| (vec![0.0; n], vec![0.0; n])).unzip();
        Self { hyper, step: 0, m, v }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update of every parameter from its accumulated gradient. A
    /// missing gradient counts as zero.
    pub fn step(&mut self, params: &mut NetworkParams, lr: f64) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(invalid!("optimizer tracks {} tensors, network has {}", self.m.len(), params.len()));
        }
        let mut grads = Vec::with_capacity(params.len());
        for (name, t) in params.iter() {
            let g = t.grad().map(<[f32]>::to_vec).unwrap_or_else(|| vec![0.0; t.numel()]);
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of {name}")));
            }
            grads.push(g);
        }
        let mut slices: Vec<&mut [f32]> = params.tensors_mut().map(|t| t.data_mut()).collect();
        let grad_refs: Vec<&[f32]> = grads.iter().map(Vec::as_slice).collect();
        self.step_slices(&mut slices, &grad_refs, lr)
    }

    /// The update on raw slices.
    pub fn step_slices(&mut self, params: &mut [&mut [f32]], grads: &[&[f32]], lr: f64) -> Result<()> {
        if !(lr > 0.0) {
            return Err(invalid!("learning rate must be positive, got {lr}"));
        }
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(invalid!("parameter and gradient lists do not match optimizer state"));
        }
        for (i, g) in grads.iter().enumerate() {
            if g.len() != self.m[i].len() || params[i].len() != self.m[i].len() {
                return Err(invalid!("tensor {i} changed size"));
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of tensor {i}")));
            }
        }
        self.step += 1;
        let RAdamHyper { beta1, beta2, eps } = self.hyper;
        let t = self.step as f64;
        let b1t = beta1.powf(t);
        let b2t = beta2.powf(t);
        let rho_inf = 2.0 / (1.0 - beta2) - 1.0;
        let rho_t = rho_inf - 2.0 * t * b2t / (1.0 - b2t);
        let rect = if rho_t > 4.0 {
            Some(((rho_t - 4.0) * (rho_t - 2.0) * rho_inf / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t)).sqrt())
        } else {
            None
        };
        for (i, p) in params.iter_mut().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.len() {
                let g = grads[i][j] as f64;
                m[j] = beta1 * m[j] + (1.0 - beta1) * g;
                v[j] = beta2 * v[j] + (1.0 - beta2) * g * g;
                let m_hat = m[j] / (1.0 - b1t);
                let delta = match rect {
                    Some(r) => {
                        let adapt = (1.0 - b2t).sqrt() / (v[j].sqrt() + eps);
                        lr * m_hat * r * adapt
                    }
                    None => lr * m_hat,
                };
                p[j] = (p[j] as f64 - delta) as f32;
            }
        }
        Ok(())
    }
}

/// Which augmentations [`augment`] applies.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AugmentFlags {
    pub crop: bool,
    pub rotate: bool,
    pub mirror: bool,
}

impl AugmentFlags {
    pub const NONE: Self = Self { crop: false, rotate: false, mirror: false };
    pub const ALL: Self = Self { crop: true, rotate: true, mirror: true };
}

/// Counter-clockwise rotation of every plane by `k · 90°`. Square planes only.
pub fn rot90(t: &Tensor, k: usize) -> Result<Tensor> {
    let s = t.shape();
    if s.h != s.w {
        return Err(invalid!("rot90 needs square planes, got {}×{}", s.h, s.w));
    }
    let n = s.h;
    let mut out = t.clone();
    for _ in 0..k % 4 {
        let src = out.clone();
        out = Tensor::from_fn(s, |b, c, y, x| src.at(b, c, x, n - 1 - y));
    }
    Ok(out)
}

/// Mirror every plane left-right (`horizontal`) or top-bottom.
pub fn mirror(t: &Tensor, horizontal: bool) -> Tensor {
    let s = t.shape();
    Tensor::from_fn(s, |b, c, y, x| if horizontal { t.at(b, c, y, s.w - 1 - x) } else { t.at(b, c, s.h - 1 - y, x) })
}

/// A `patch × patch` view of `img` with random crop, rotation and mirroring.
/// With cropping disabled the patch is the top-left corner.
pub fn augment(img: &Tensor, patch: usize, flags: AugmentFlags, rng: &mut Rng) -> Result<Tensor> {
    let s = img.shape();
    if s.h < patch || s.w < patch || patch == 0 {
        return Err(invalid!("image {}×{} is smaller than the {patch}×{patch} patch", s.h, s.w));
    }
    let (y0, x0) = if flags.crop { (rng.random_range(0..=s.h - patch), rng.random_range(0..=s.w - patch)) } else { (0, 0) };
    let mut out = Tensor::from_fn(Shape::new(s.n, s.c, patch, patch), |b, c, y, x| img.at(b, c, y0 + y, x0 + x));
    if flags.rotate {
        out = rot90(&out, rng.random_range(0..4))?;
    }
    if flags.mirror {
        if rng.random_bool(0.5) {
            out = mirror(&out, true);
        }
        if rng.random_bool(0.5) {
            out = mirror(&out, false);
        }
    }
    Ok(out)
}

/// One line of the training log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LogRow {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: LossReport,
}

pub const LOG_HEADER: &str = "step,epoch,lr,loss_s,loss_r,loss_ov,loss_np,total";

impl LogRow {
    pub fn csv_line(&self) -> String {
        let l = &self.loss;
        format!(
            "{},{},{:e},{},{},{},{},{}",
            self.step, self.epoch, self.lr, l.loss_s, l.loss_r, l.loss_ov, l.loss_np, l.total
        )
    }
}

/// Where and how often a run writes its artifacts.
#[derive(Clone, Debug, Default)]
pub struct TrainOutput {
    /// Checkpoints and `train_log.csv` go here; `None` keeps everything in memory.
    pub dir: Option<PathBuf>,
    /// Print a progress line every this many steps; 0 disables.
    pub log_every: usize,
}

/// Final state of a run.
#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub log: Vec<LogRow>,
    pub steps: usize,
    pub final_checkpoint: Option<PathBuf>,
}

/// Name of the checkpoint written after `step` steps.
pub fn checkpoint_name(step: usize) -> String {
    format!("step_{step:07}.ckpt")
}

pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const LAST_GOOD_CHECKPOINT: &str = "last_good.ckpt";
pub const LOG_FILE: &str = "train_log.csv";

/// Trains `f` and `h` jointly on `dataset` (each `(1, c, h, w)`).
///
/// Every step samples a batch of augmented patches, evaluates the total
/// loss once, back-propagates once and applies one RAdam step per network.
/// A non-finite loss aborts the run; the networks are left at the last
/// finite state, which is also written as `last_good.ckpt`.
pub fn train(
    f: &mut BlindSpotNet,
    h: &mut NoiseExtractor,
    dataset: &[Tensor],
    cfg: &TrainConfig,
    out: &TrainOutput,
) -> Result<TrainSummary> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(invalid!("training set is empty"));
    }
    if let Some(t) = dataset.iter().find(|t| t.shape().n != 1) {
        return Err(invalid!("training images must be single samples, got {}", t.shape()));
    }
    let mut log_file = match &out.dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            let mut w = BufWriter::new(File::create(dir.join(LOG_FILE))?);
            writeln!(w, "{LOG_HEADER}")?;
            Some(w)
        }
        None => None,
    };

    let mut rng = seeded(cfg.seed);
    let flags = AugmentFlags { crop: cfg.augment_crop, rotate: cfg.augment_rotate, mirror: cfg.augment_mirror };
    let strides = cfg.strides();
    let per_epoch = cfg.steps_per_epoch(dataset.len());
    let total_steps = cfg.total_steps(dataset.len());
    let mut opt_f = RAdamState::new(f.params());
    let mut opt_h = RAdamState::new(h.params());

    let mut schedule: Vec<usize> = Vec::new();
    let mut log = Vec::with_capacity(total_steps);
    let mut final_checkpoint = None;

    for step in 0..total_steps {
        let epoch = step / per_epoch;
        let lr = lr_at(epoch, cfg);

        let mut patches = Vec::with_capacity(cfg.batch);
        for _ in 0..cfg.batch {
            if schedule.is_empty() {
                schedule = (0..dataset.len()).flat_map(|i| std::iter::repeat_n(i, cfg.patches_per_image)).collect();
                schedule.shuffle(&mut rng);
            }
            let idx = schedule.pop().expect("refilled above");
            patches.push(augment(&dataset[idx], cfg.patch, flags, &mut rng)?);
        }
        let batch = Tensor::stack(&patches)?;

        let mut g = Graph::new();
        let (fv, hv, vars) = {
            let bf = f.bind(&mut g, true);
            let bh = h.bind(&mut g, true, true);
            let x = g.constant(batch);
            let vars = loss_total(&mut g, &bf, &bh, x, cfg.weights, strides, &mut rng)?;
            (bf.vars().to_vec(), bh.vars().to_vec(), vars)
        };
        let report = vars.report(&g)?;
        if !report.total.is_finite() {
            if let Some(dir) = &out.dir {
                save_checkpoint(dir.join(LAST_GOOD_CHECKPOINT), f, h)?;
            }
            if let Some(w) = log_file.as_mut() {
                w.flush()?;
            }
            return Err(Error::NonFinite(format!("total loss at step {step} is {}", report.total)));
        }
        g.backward(vars.total)?;
        f.params_mut().zero_grad();
        h.params_mut().zero_grad();
        f.params_mut().pull_grads(&g, &fv)?;
        h.params_mut().pull_grads(&g, &hv)?;
        drop(g);
        opt_f.step(f.params_mut(), lr)?;
        opt_h.step(h.params_mut(), lr)?;
        f.params_mut().zero_grad();
        h.params_mut().zero_grad();

        let row = LogRow { step, epoch, lr, loss: report };
        if let Some(w) = log_file.as_mut() {
            writeln!(w, "{}", row.csv_line())?;
        }
        if out.log_every > 0 && (step % out.log_every == 0 || step + 1 == total_steps) {
            log::info!("step {step} epoch {epoch} lr {lr:e} total {:.5}", report.total);
        }
        log.push(row);

        let done = step + 1;
        if let Some(dir) = &out.dir {
            if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 {
                save_checkpoint(dir.join(checkpoint_name(done)), f, h)?;
            }
        }
    }
    if let Some(dir) = &out.dir {
        let path = dir.join(FINAL_CHECKPOINT);
        save_checkpoint(&path, f, h)?;
        final_checkpoint = Some(path);
    }
    if let Some(mut w) = log_file {
        w.flush()?;
    }
    Ok(TrainSummary { log, steps: total_steps, final_checkpoint })
}

/// Fresh networks for `cfg`, initialized from its seed.
pub fn init_networks(cfg: &TrainConfig) -> Result<(BlindSpotNet, NoiseExtractor)> {
    let mut rng = seeded(cfg.seed.wrapping_add(0x5eed));
    let f = BlindSpotNet::new(cfg.bsn_config(), &mut rng)?;
    let h = NoiseExtractor::new(cfg.ne_config(), &mut rng)?;
    Ok((f, h))
}

/// Parses a training log written by [`train`].
pub fn read_log(path: impl AsRef<Path>) -> Result<Vec<LogRow>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    if lines.next() != Some(LOG_HEADER) {
        return Err(Error::Format("training log header mismatch".into()));
    }
    lines
        .map(|line| {
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != 8 {
                return Err(Error::Format(format!("bad log line {line:?}")));
            }
            let num = |i: usize| cols[i].parse::<f64>().map_err(|e| Error::Format(format!("{line:?}: {e}")));
            Ok(LogRow {
                step: num(0)? as usize,
                epoch: num(1)? as usize,
                lr: num(2)?,
                loss: LossReport {
                    loss_s: num(3)? as f32,
                    loss_r: num(4)? as f32,
                    loss_ov: num(5)? as f32,
                    loss_np: num(6)? as f32,
                    total: num(7)? as f32,
                },
            })
        })
        .collect()
}
