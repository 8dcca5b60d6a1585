//! The blind-spot network `f`, the noise extractor `h`, and their
//! parameter storage and checkpoint format.

use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::conv::ConvGeom;
use crate::error::{invalid, shape_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{Shape, Tensor};
use crate::{seeded, Rng};

/// Magic bytes opening a checkpoint file.
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"I2VC";
/// Current checkpoint format version.
pub const CHECKPOINT_VERSION: u8 = 1;

/// A network as a graph-building function.
pub trait GraphModule {
    fn forward(&self, g: &mut Graph, x: Var, rng: &mut Rng) -> Result<Var>;
}

impl<F> GraphModule for F
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    fn forward(&self, g: &mut Graph, x: Var, _rng: &mut Rng) -> Result<Var> {
        self(g, x)
    }
}

/// A network evaluated on plain tensors, without gradients.
pub trait Denoiser {
    fn apply(&self, x: &Tensor) -> Result<Tensor>;
}

impl<F> Denoiser for F
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    fn apply(&self, x: &Tensor) -> Result<Tensor> {
        self(x)
    }
}

/// Ordered, uniquely named parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct NetworkParams {
    entries: Vec<(String, Tensor)>,
}

impl NetworkParams {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Result<()> {
        let name = name.into();
        if self.entries.iter().any(|(n, _)| *n == name) {
            return Err(invalid!("duplicate parameter name {name}"));
        }
        self.entries.push((name, t));
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.iter_mut().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|(n, _)| n == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Adds every parameter to `g`, trainable or frozen, in order.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<Var> {
        self.entries
            .iter()
            .map(|(_, t)| {
                let mut t = t.clone();
                t.zero_grad();
                if trainable {
                    g.param(t)
                } else {
                    g.constant(t)
                }
            })
            .collect()
    }

    /// Adds the gradients accumulated on `vars` into the parameter buffers.
    pub fn pull_grads(&mut self, g: &Graph, vars: &[Var]) -> Result<()> {
        if vars.len() != self.entries.len() {
            return Err(invalid!("{} vars bound for {} parameters", vars.len(), self.entries.len()));
        }
        for ((_, t), &v) in self.entries.iter_mut().zip(vars) {
            if let Some(gr) = g.grad(v) {
                t.accumulate_grad(gr)?;
            }
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.entries.iter_mut().for_each(|(_, t)| t.zero_grad());
    }

    /// Replaces values from `other`, requiring identical names and shapes.
    pub fn load_from(&mut self, other: &NetworkParams) -> Result<()> {
        if other.len() != self.len() {
            return Err(Error::Format(format!(
                "expected {} parameters, found {}",
                self.len(),
                other.len()
            )));
        }
        for (name, t) in self.entries.iter_mut() {
            let src = other
                .get(name)
                .ok_or_else(|| Error::Format(format!("missing parameter {name}")))?;
            if src.shape() != t.shape() {
                return Err(Error::Format(format!(
                    "parameter {name} has shape {}, expected {}",
                    src.shape(),
                    t.shape()
                )));
            }
            *t = src.clone();
        }
        Ok(())
    }
}

/// He fan-in Gaussian weight of shape `(out_c, in_c, k, k)`.
fn he_weight(shape: Shape, fan_in: usize, rng: &mut Rng) -> Tensor {
    let std = (2.0 / fan_in as f64).sqrt() as f32;
    let normal = Normal::new(0.0f32, std).expect("finite std");
    Tensor::from_fn(shape, |_, _, _, _| normal.sample(rng))
}

/// Scale applied to the He init of the noise extractor's output layer.
const OUT_INIT_SCALE: f32 = 0.05;

fn add_conv(p: &mut NetworkParams, name: &str, out_c: usize, in_c: usize, k: usize, rng: &mut Rng) -> Result<()> {
    p.insert(format!("{name}.weight"), he_weight(Shape::new(out_c, in_c, k, k), in_c * k * k, rng))?;
    p.insert(format!("{name}.bias"), Tensor::zeros(Shape::new(1, out_c, 1, 1)))
}

/// Architecture of the blind-spot network.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BsnConfig {
    /// Image channels in and out.
    pub channels: usize,
    pub base_channels: usize,
    /// Dilated 3×3 convolutions per branch.
    pub depth: usize,
    /// One parallel branch per dilation; each must be at least 2.
    pub dilations: Vec<usize>,
}

impl Default for BsnConfig {
    fn default() -> Self {
        Self { channels: 3, base_channels: 16, depth: 3, dilations: vec![2, 3] }
    }
}

impl BsnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.base_channels == 0 {
            return Err(invalid!("channel counts must be positive"));
        }
        if self.dilations.is_empty() {
            return Err(invalid!("blind-spot network needs at least one branch"));
        }
        // A 3×3 masked tap sits at offset ±1; later taps at multiples of d ≥ 2
        // can never cancel it, which keeps the centre pixel out of view.
        if let Some(d) = self.dilations.iter().find(|&&d| d < 2) {
            return Err(invalid!("branch dilation {d} would expose the blind spot; use ≥ 2"));
        }
        Ok(())
    }
}

/// `f`: 1×1 head, centre-masked 3×3 conv, parallel residual dilated branches,
/// 1×1 merge and tail. Output at a pixel never depends on the input there.
#[derive(Clone, Debug, PartialEq)]
pub struct BlindSpotNet {
    config: BsnConfig,
    params: NetworkParams,
}

impl BlindSpotNet {
    pub fn new(config: BsnConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let (c, b) = (config.channels, config.base_channels);
        let mut p = NetworkParams::new();
        add_conv(&mut p, "head", b, c, 1, rng)?;
        p.insert("masked.weight", he_weight(Shape::new(b, b, 3, 3), b * 8, rng))?;
        p.insert("masked.bias", Tensor::zeros(Shape::new(1, b, 1, 1)))?;
        for &d in &config.dilations {
            for i in 0..config.depth {
                add_conv(&mut p, &format!("branch{d}.{i}"), b, b, 3, rng)?;
            }
        }
        let merge_fan_in = b * config.dilations.len();
        for &d in &config.dilations {
            p.insert(format!("merge{d}.weight"), he_weight(Shape::new(b, b, 1, 1), merge_fan_in, rng))?;
        }
        p.insert("merge.bias", Tensor::zeros(Shape::new(1, b, 1, 1)))?;
        add_conv(&mut p, "tail1", b, b, 1, rng)?;
        add_conv(&mut p, "tail2", c, b, 1, rng)?;
        Ok(Self { config, params: p })
    }

    pub fn config(&self) -> &BsnConfig {
        &self.config
    }

    pub fn params(&self) -> &NetworkParams {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut NetworkParams {
        &mut self.params
    }

    /// Binds the parameters into `g` for one forward pass.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundBsn<'_> {
        BoundBsn { net: self, vars: self.params.bind(g, trainable) }
    }

    /// Evaluation-mode forward on a plain tensor.
    pub fn forward_tensor(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let y = bound.forward_graph(&mut g, xv)?;
        Ok(g.value(y).clone())
    }
}

impl Denoiser for BlindSpotNet {
    fn apply(&self, x: &Tensor) -> Result<Tensor> {
        self.forward_tensor(x)
    }
}

/// A [`BlindSpotNet`] whose parameters live in a particular graph.
pub struct BoundBsn<'a> {
    net: &'a BlindSpotNet,
    vars: Vec<Var>,
}

impl BoundBsn<'_> {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    fn var(&self, name: &str) -> Var {
        self.vars[self.net.params.index_of(name).expect("parameter registered at construction")]
    }

    fn conv(&self, g: &mut Graph, x: Var, name: &str, geom: ConvGeom) -> Result<Var> {
        let w = self.var(&format!("{name}.weight"));
        let b = self.var(&format!("{name}.bias"));
        g.conv2d(x, w, Some(b), geom)
    }

    pub fn forward_graph(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let cfg = &self.net.config;
        if g.shape(x).c != cfg.channels {
            return Err(shape_err!(
                "blind-spot network expects {} channels, got {}",
                cfg.channels,
                g.shape(x).c
            ));
        }
        let pointwise = ConvGeom::new(1, 1, 0);
        let t = self.conv(g, x, "head", pointwise)?;
        let t = g.relu(t);

        let b = cfg.base_channels;
        let mask = g.constant(Tensor::from_fn(Shape::new(b, b, 3, 3), |_, _, y, x| {
            if y == 1 && x == 1 {
                0.0
            } else {
                1.0
            }
        }));
        let w = g.mul(self.var("masked.weight"), mask)?;
        let t = g.conv2d(t, w, Some(self.var("masked.bias")), ConvGeom::same(3, 1))?;
        let t = g.relu(t);

        let mut merged: Option<Var> = None;
        for &d in &cfg.dilations {
            let mut branch = t;
            // residual dilated blocks; every path still skips the centre tap
            for i in 0..cfg.depth {
                let r = self.conv(g, branch, &format!("branch{d}.{i}"), ConvGeom::same(3, d))?;
                let r = g.relu(r);
                branch = g.add(branch, r)?;
            }
            let m = g.conv2d(branch, self.var(&format!("merge{d}.weight")), None, pointwise)?;
            merged = Some(match merged {
                Some(acc) => g.add(acc, m)?,
                None => m,
            });
        }
        let merged = merged.expect("at least one branch");
        let t = g.add(merged, self.var("merge.bias"))?;
        let t = g.relu(t);
        let t = self.conv(g, t, "tail1", pointwise)?;
        let t = g.relu(t);
        self.conv(g, t, "tail2", pointwise)
    }
}

impl GraphModule for BoundBsn<'_> {
    fn forward(&self, g: &mut Graph, x: Var, _rng: &mut Rng) -> Result<Var> {
        self.forward_graph(g, x)
    }
}

/// Architecture of the noise extractor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeConfig {
    pub channels: usize,
    pub width: usize,
    /// Total 3×3 convolutions, including the input and output layers.
    pub layers: usize,
    pub slope: f32,
    pub dropout: f32,
}

impl Default for NeConfig {
    fn default() -> Self {
        Self { channels: 3, width: 32, layers: 6, slope: 0.1, dropout: 0.1 }
    }
}

impl NeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.width == 0 {
            return Err(invalid!("channel counts must be positive"));
        }
        if self.layers < 2 {
            return Err(invalid!("noise extractor needs at least 2 layers"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(invalid!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        Ok(())
    }
}

/// `h`: plain residual CNN predicting the noise at full resolution, with
/// dropout before the final convolution.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseExtractor {
    config: NeConfig,
    params: NetworkParams,
}

impl NoiseExtractor {
    pub fn new(config: NeConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let (c, w) = (config.channels, config.width);
        let mut p = NetworkParams::new();
        add_conv(&mut p, "in", w, c, 3, rng)?;
        for i in 0..config.layers - 2 {
            add_conv(&mut p, &format!("res{i}"), w, w, 3, rng)?;
        }
        add_conv(&mut p, "out", c, w, 3, rng)?;
        // linear output predicting small residuals: start near zero
        if let Some(t) = p.get_mut("out.weight") {
            *t = t.scale(OUT_INIT_SCALE);
        }
        Ok(Self { config, params: p })
    }

    pub fn config(&self) -> &NeConfig {
        &self.config
    }

    pub fn params(&self) -> &NetworkParams {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut NetworkParams {
        &mut self.params
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool, training: bool) -> BoundNe<'_> {
        BoundNe { net: self, vars: self.params.bind(g, trainable), training }
    }

    /// Forward on a plain tensor; dropout is active only when `training`.
    pub fn forward_tensor(&self, x: &Tensor, training: bool, rng: &mut Rng) -> Result<Tensor> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false, training);
        let xv = g.constant(x.clone());
        let y = bound.forward(&mut g, xv, rng)?;
        Ok(g.value(y).clone())
    }
}

impl Denoiser for NoiseExtractor {
    fn apply(&self, x: &Tensor) -> Result<Tensor> {
        // evaluation mode never draws from the generator
        self.forward_tensor(x, false, &mut seeded(0))
    }
}

/// A [`NoiseExtractor`] bound into a graph, in training or evaluation mode.
pub struct BoundNe<'a> {
    net: &'a NoiseExtractor,
    vars: Vec<Var>,
    training: bool,
}

impl BoundNe<'_> {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    fn conv(&self, g: &mut Graph, x: Var, name: &str) -> Result<Var> {
        let i = self.net.params.index_of(&format!("{name}.weight")).expect("registered");
        g.conv2d(x, self.vars[i], Some(self.vars[i + 1]), ConvGeom::same(3, 1))
    }
}

impl GraphModule for BoundNe<'_> {
    fn forward(&self, g: &mut Graph, x: Var, rng: &mut Rng) -> Result<Var> {
        let cfg = &self.net.config;
        if g.shape(x).c != cfg.channels {
            return Err(shape_err!("noise extractor expects {} channels, got {}", cfg.channels, g.shape(x).c));
        }
        let t = self.conv(g, x, "in")?;
        let mut t = g.leaky_relu(t, cfg.slope);
        for i in 0..cfg.layers - 2 {
            let r = self.conv(g, t, &format!("res{i}"))?;
            let r = g.leaky_relu(r, cfg.slope);
            t = g.add(t, r)?;
        }
        let t = g.dropout(t, cfg.dropout, rng, self.training)?;
        self.conv(g, t, "out")
    }
}

/// Writes `f` then `h` as `(u32 name length, name, T32)` records after the
/// magic and version byte. Names carry an `f.` or `h.` prefix.
pub fn write_checkpoint<W: Write>(mut w: W, f: &BlindSpotNet, h: &NoiseExtractor) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&[CHECKPOINT_VERSION])?;
    let records = f
        .params
        .iter()
        .map(|(n, t)| (format!("f.{n}"), t))
        .chain(h.params.iter().map(|(n, t)| (format!("h.{n}"), t)));
    for (name, t) in records {
        let len = u32::try_from(name.len()).map_err(|_| invalid!("parameter name too long"))?;
        w.write_all(&len.to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        t.write_t32(&mut w)?;
    }
    Ok(())
}

pub fn save_checkpoint(path: impl AsRef<Path>, f: &BlindSpotNet, h: &NoiseExtractor) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(&mut w, f, h)?;
    w.flush()?;
    Ok(())
}

/// Reads the raw records of a checkpoint, split into `f` and `h` sets.
pub fn read_checkpoint_params<R: Read>(mut r: R) -> Result<(NetworkParams, NetworkParams)> {
    let mut head = [0u8; 5];
    r.read_exact(&mut head)?;
    if &head[..4] != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a checkpoint file (bad magic)".into()));
    }
    if head[4] != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "checkpoint version {} is not supported (expected {CHECKPOINT_VERSION})",
            head[4]
        )));
    }
    let (mut f, mut h) = (NetworkParams::new(), NetworkParams::new());
    loop {
        let mut len = [0u8; 4];
        match r.read_exact(&mut len) {
            Ok(()) => {}
            Err(e) if e.kind() == ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(e.into()),
        }
        let mut name = vec![0u8; u32::from_le_bytes(len) as usize];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| Error::Format("parameter name is not UTF-8".into()))?;
        let t = Tensor::read_t32(&mut r)?;
        match name.split_once('.') {
            Some(("f", rest)) => f.insert(rest, t)?,
            Some(("h", rest)) => h.insert(rest, t)?,
            _ => return Err(Error::Format(format!("unexpected record {name}"))),
        }
    }
    Ok((f, h))
}

/// Loads a checkpoint into freshly built networks of the given architectures.
pub fn load_checkpoint(
    path: impl AsRef<Path>,
    bsn: &BsnConfig,
    ne: &NeConfig,
) -> Result<(BlindSpotNet, NoiseExtractor)> {
    let (fp, hp) = read_checkpoint_params(BufReader::new(File::open(path)?))?;
    let mut rng = seeded(0);
    let mut f = BlindSpotNet::new(bsn.clone(), &mut rng)?;
    let mut h = NoiseExtractor::new(ne.clone(), &mut rng)?;
    f.params.load_from(&fp)?;
    h.params.load_from(&hp)?;
    Ok((f, h))
}

/// Draws a random image-like tensor in `[0, 1)`; used by tests and tools.
pub fn random_image(shape: Shape, rng: &mut Rng) -> Tensor {
    Tensor::from_fn(shape, |_, _, _, _| rng.random::<f32>())
}
