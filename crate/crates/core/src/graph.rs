//! Define-by-run reverse-mode differentiation.
//!
//! Every operation appends a node to a [`Graph`] and returns a [`Var`]
//! handle. Nodes are only ever appended, so the node list is already in
//! topological order and [`Graph::backward`] walks it once in reverse.
//! A graph is meant to be rebuilt for every forward pass.

use std::rc::Rc;

use rand::Rng;

use crate::conv::{self, ConvGeom};
use crate::error::{invalid, shape_err, Result};
use crate::tensor::{Shape, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d { input: Var, weight: Var, bias: Option<Var>, geom: ConvGeom },
    Add { a: Var, b: Var, bcast: bool },
    Sub { a: Var, b: Var, bcast: bool },
    Mul { a: Var, b: Var, bcast: bool },
    AddScalar { a: Var },
    Scale { a: Var, s: f32 },
    Relu { a: Var },
    LeakyRelu { a: Var, slope: f32 },
    Abs { a: Var },
    Dropout { a: Var, mask: Vec<f32> },
    MeanAll { a: Var },
    MeanAxes { a: Var },
    Gather { a: Var, index: Rc<[usize]> },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match *self {
            Op::Leaf => vec![],
            Op::Conv2d { input, weight, bias, .. } => {
                let mut v = vec![input, weight];
                v.extend(bias);
                v
            }
            Op::Add { a, b, .. } | Op::Sub { a, b, .. } | Op::Mul { a, b, .. } => vec![a, b],
            Op::AddScalar { a }
            | Op::Scale { a, .. }
            | Op::Relu { a }
            | Op::LeakyRelu { a, .. }
            | Op::Abs { a }
            | Op::Dropout { a, .. }
            | Op::MeanAll { a }
            | Op::MeanAxes { a }
            | Op::Gather { a, .. } => vec![a],
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Branch choices (`input > 0`) of the piecewise-linear ops — relu, leaky
/// relu and abs — in evaluation order.
///
/// Replaying a tape recorded on one graph while building another evaluates
/// the second on the same linear piece. Gradient checks use this so that
/// finite differences never straddle a kink.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SelectorTape {
    choices: Vec<Vec<bool>>,
    cursor: usize,
    replay: bool,
}

impl SelectorTape {
    pub fn len(&self) -> usize {
        self.choices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.choices.is_empty()
    }
}

/// Ordered record of operations; gradients land in the leaf tensors.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    selectors: Option<SelectorTape>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Inserts a leaf; it receives gradients iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let needs_grad = t.requires_grad();
        self.push(t, Op::Leaf, needs_grad)
    }

    /// Inserts a leaf that never receives gradients.
    pub fn constant(&mut self, mut t: Tensor) -> Var {
        t.set_requires_grad(false);
        self.push(t, Op::Leaf, false)
    }

    /// Inserts a leaf that accumulates gradients.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.leaf(t.with_requires_grad())
    }

    /// A constant copy of `v`, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.nodes[v.0].value.grad()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Indices of the inputs of `v`; used to check topological order.
    pub fn inputs_of(&self, v: Var) -> Vec<Var> {
        self.nodes[v.0].op.inputs()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    fn record(&mut self, value: Tensor, op: Op) -> Var {
        let needs_grad = self.any_grad(&op.inputs());
        self.push(value, op, needs_grad)
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, geom: ConvGeom) -> Result<Var> {
        let out = conv::conv2d_forward(
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b)),
            geom,
        )?;
        Ok(self.record(out, Op::Conv2d { input, weight, bias, geom }))
    }

    /// Whether `b` broadcasts against `a`: equal shapes, or `b` is `(1, c, 1, 1)`.
    fn broadcast(&self, a: Var, b: Var) -> Result<bool> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            Ok(false)
        } else if sb == Shape::new(1, sa.c, 1, 1) {
            Ok(true)
        } else {
            Err(shape_err!("cannot broadcast {sb} against {sa}"))
        }
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f32, f32) -> f32) -> Result<(Tensor, bool)> {
        let bcast = self.broadcast(a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let out = if bcast {
            let s = ta.shape();
            let plane = s.plane();
            let data = ta
                .data()
                .iter()
                .enumerate()
                .map(|(i, &x)| f(x, tb.data()[(i / plane) % s.c]))
                .collect();
            Tensor::new(s, data)?
        } else {
            ta.zip_map(tb, f)?
        };
        Ok((out, bcast))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (out, bcast) = self.binary(a, b, |x, y| x + y)?;
        Ok(self.record(out, Op::Add { a, b, bcast }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (out, bcast) = self.binary(a, b, |x, y| x - y)?;
        Ok(self.record(out, Op::Sub { a, b, bcast }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (out, bcast) = self.binary(a, b, |x, y| x * y)?;
        Ok(self.record(out, Op::Mul { a, b, bcast }))
    }

    pub fn add_scalar(&mut self, a: Var, c: f32) -> Var {
        let out = self.value(a).add_scalar(c);
        self.record(out, Op::AddScalar { a })
    }

    pub fn scalar_mul(&mut self, a: Var, s: f32) -> Var {
        let out = self.value(a).scale(s);
        self.record(out, Op::Scale { a, s })
    }

    /// Starts recording a [`SelectorTape`].
    pub fn record_selectors(&mut self) {
        self.selectors = Some(SelectorTape::default());
    }

    /// Replays `tape` for the piecewise-linear ops built from now on.
    /// Backward passes still use the signs of the actual inputs.
    pub fn replay_selectors(&mut self, mut tape: SelectorTape) {
        tape.cursor = 0;
        tape.replay = true;
        self.selectors = Some(tape);
    }

    pub fn take_selectors(&mut self) -> Option<SelectorTape> {
        self.selectors.take()
    }

    /// `(a > 0)` per element, or the replayed choices. Panics when a
    /// replayed tape does not fit the graph being built.
    fn piecewise<F: Fn(f32, bool) -> f32>(&mut self, a: Var, f: F) -> Tensor {
        let ta = &self.nodes[a.0].value;
        let Some(tape) = self.selectors.as_mut() else {
            return ta.map(|v| f(v, v > 0.0));
        };
        if tape.replay {
            let choice = tape.choices.get(tape.cursor).expect("selector tape shorter than graph");
            assert_eq!(choice.len(), ta.numel(), "selector tape does not match graph");
            tape.cursor += 1;
            let data = ta.data().iter().zip(choice).map(|(&v, &pos)| f(v, pos)).collect();
            Tensor::new(ta.shape(), data).expect("same shape")
        } else {
            tape.choices.push(ta.data().iter().map(|&v| v > 0.0).collect());
            ta.map(|v| f(v, v > 0.0))
        }
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.piecewise(a, |v, pos| if pos { v } else { 0.0 });
        self.record(out, Op::Relu { a })
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f32) -> Var {
        let out = self.piecewise(a, |v, pos| if pos { v } else { v * slope });
        self.record(out, Op::LeakyRelu { a, slope })
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let out = self.piecewise(a, |v, pos| if pos { v } else { -v });
        self.record(out, Op::Abs { a })
    }

    /// Inverted dropout: in training mode each element is zeroed with
    /// probability `p` and survivors are scaled by `1 / (1 - p)`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, p: f32, rng: &mut R, training: bool) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(invalid!("dropout probability must lie in [0, 1), got {p}"));
        }
        if !training || p == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f32> = (0..self.value(a).numel())
            .map(|_| if rng.random::<f32>() < p { 0.0 } else { keep })
            .collect();
        let ta = self.value(a);
        let data = ta.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        let out = Tensor::new(ta.shape(), data)?;
        Ok(self.record(out, Op::Dropout { a, mask }))
    }

    /// Mean over every element, as a `(1, 1, 1, 1)` tensor.
    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let m = self.value(a).mean()?;
        Ok(self.record(Tensor::scalar(m), Op::MeanAll { a }))
    }

    /// Mean over the listed axes (0 = batch … 3 = width), keeping them as size 1.
    pub fn mean_over_axes(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let mut mask = [false; 4];
        for &ax in axes {
            if ax > 3 {
                return Err(invalid!("axis {ax} out of range"));
            }
            mask[ax] = true;
        }
        let ta = self.value(a);
        if ta.numel() == 0 {
            return Err(invalid!("mean over an empty tensor"));
        }
        let dims = ta.shape().dims();
        let out_shape = Shape::from_dims(std::array::from_fn(|i| if mask[i] { 1 } else { dims[i] }));
        let count = ta.numel() / out_shape.numel();
        let mut acc = vec![0.0f64; out_shape.numel()];
        for_each_reduced(ta.shape(), out_shape, |i, o| acc[o] += ta.data()[i] as f64);
        let data = acc.into_iter().map(|s| (s / count as f64) as f32).collect();
        let out = Tensor::new(out_shape, data)?;
        Ok(self.record(out, Op::MeanAxes { a }))
    }

    /// `mean(|a - b|)` over all elements.
    pub fn l1_distance(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err!("l1_distance of {} and {}", self.shape(a), self.shape(b)));
        }
        let d = self.sub(a, b)?;
        let d = self.abs(d);
        self.mean_all(d)
    }

    /// Output element `i` is input element `index[i]`; `index` must be a
    /// permutation of the input positions.
    pub fn gather(&mut self, a: Var, index: Rc<[usize]>) -> Result<Var> {
        let ta = self.value(a);
        if index.len() != ta.numel() {
            return Err(shape_err!("gather index of length {} for {}", index.len(), ta.shape()));
        }
        let data = index.iter().map(|&i| ta.data()[i]).collect();
        let out = Tensor::new(ta.shape(), data)?;
        Ok(self.record(out, Op::Gather { a, index }))
    }

    /// Reverse-mode pass from a scalar `loss`. Gradients are added to the
    /// buffers of every reachable leaf that requires them, so repeated
    /// calls accumulate.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(invalid!("backward needs a scalar loss, got {}", self.shape(loss)));
        }
        if !self.nodes[loss.0].needs_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f32>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(i, &g, &mut grads)?;
        }
        for (i, g) in grads.into_iter().enumerate() {
            if let (Some(g), Op::Leaf) = (g, &self.nodes[i].op) {
                self.nodes[i].value.accumulate_grad(&g)?;
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f32], grads: &mut [Option<Vec<f32>>]) -> Result<()> {
        let node = &self.nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { input, weight, bias, geom } => {
                let want = (self.needs_grad(*input), self.needs_grad(*weight), bias.is_some_and(|b| self.needs_grad(b)));
                let cg = conv::conv2d_backward(self.value(*input), self.value(*weight), *geom, g, want)?;
                if let Some(gi) = cg.input {
                    self.accumulate(grads, *input, |buf| add_into(buf, &gi));
                }
                if let Some(gw) = cg.weight {
                    self.accumulate(grads, *weight, |buf| add_into(buf, &gw));
                }
                if let (Some(gb), Some(b)) = (cg.bias, bias) {
                    self.accumulate(grads, *b, |buf| add_into(buf, &gb));
                }
            }
            Op::Add { a, b, bcast } | Op::Sub { a, b, bcast } => {
                let sign = if matches!(node.op, Op::Sub { .. }) { -1.0 } else { 1.0 };
                self.accumulate(grads, *a, |buf| add_into(buf, g));
                let s = out.shape();
                self.accumulate(grads, *b, |buf| {
                    if *bcast {
                        reduce_channels(buf, g, s, |_, gv| sign * gv);
                    } else {
                        buf.iter_mut().zip(g).for_each(|(d, gv)| *d += sign * gv);
                    }
                });
            }
            Op::Mul { a, b, bcast } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let s = out.shape();
                let plane = s.plane();
                self.accumulate(grads, *a, |buf| {
                    for (j, d) in buf.iter_mut().enumerate() {
                        let bv = if *bcast { tb.data()[(j / plane) % s.c] } else { tb.data()[j] };
                        *d += g[j] * bv;
                    }
                });
                self.accumulate(grads, *b, |buf| {
                    if *bcast {
                        reduce_channels(buf, g, s, |j, gv| gv * ta.data()[j]);
                    } else {
                        for (j, d) in buf.iter_mut().enumerate() {
                            *d += g[j] * ta.data()[j];
                        }
                    }
                });
            }
            Op::AddScalar { a } => self.accumulate(grads, *a, |buf| add_into(buf, g)),
            Op::Scale { a, s } => self.accumulate(grads, *a, |buf| {
                buf.iter_mut().zip(g).for_each(|(d, gv)| *d += s * gv)
            }),
            Op::Relu { a } => {
                let ta = self.value(*a);
                self.accumulate(grads, *a, |buf| {
                    for ((d, gv), x) in buf.iter_mut().zip(g).zip(ta.data()) {
                        if *x > 0.0 {
                            *d += gv;
                        }
                    }
                });
            }
            Op::LeakyRelu { a, slope } => {
                let ta = self.value(*a);
                self.accumulate(grads, *a, |buf| {
                    for ((d, gv), x) in buf.iter_mut().zip(g).zip(ta.data()) {
                        *d += if *x > 0.0 { *gv } else { gv * slope };
                    }
                });
            }
            Op::Abs { a } => {
                let ta = self.value(*a);
                self.accumulate(grads, *a, |buf| {
                    for ((d, gv), x) in buf.iter_mut().zip(g).zip(ta.data()) {
                        if *x > 0.0 {
                            *d += gv;
                        } else if *x < 0.0 {
                            *d -= gv;
                        }
                    }
                });
            }
            Op::Dropout { a, mask } => self.accumulate(grads, *a, |buf| {
                for ((d, gv), m) in buf.iter_mut().zip(g).zip(mask) {
                    *d += gv * m;
                }
            }),
            Op::MeanAll { a } => {
                let m = self.value(*a).numel() as f32;
                let share = g[0] / m;
                self.accumulate(grads, *a, |buf| buf.iter_mut().for_each(|d| *d += share));
            }
            Op::MeanAxes { a } => {
                let in_shape = self.shape(*a);
                let count = (in_shape.numel() / out.numel()) as f32;
                self.accumulate(grads, *a, |buf| {
                    for_each_reduced(in_shape, out.shape(), |j, o| buf[j] += g[o] / count)
                });
            }
            Op::Gather { a, index } => self.accumulate(grads, *a, |buf| {
                for (gv, &src) in g.iter().zip(index.iter()) {
                    buf[src] += gv;
                }
            }),
        }
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f32>>], v: Var, f: impl FnOnce(&mut [f32])) {
        if !self.needs_grad(v) {
            return;
        }
        let buf = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.numel()]);
        f(buf);
    }
}

fn add_into(dst: &mut [f32], src: &[f32]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

/// Sums `f(j, g[j])` over batch and spatial axes into a per-channel buffer.
fn reduce_channels(buf: &mut [f32], g: &[f32], s: Shape, f: impl Fn(usize, f32) -> f32) {
    let plane = s.plane();
    let mut acc = vec![0.0f64; s.c];
    for (j, &gv) in g.iter().enumerate() {
        acc[(j / plane) % s.c] += f(j, gv) as f64;
    }
    for (d, a) in buf.iter_mut().zip(acc) {
        *d += a as f32;
    }
}

/// Calls `f(input_index, output_index)` for every input element, where the
/// output index collapses the axes that have extent 1 in `out`.
fn for_each_reduced(input: Shape, out: Shape, mut f: impl FnMut(usize, usize)) {
    let od = out.dims();
    let keep: [bool; 4] = std::array::from_fn(|i| od[i] != 1);
    let mut j = 0;
    for n in 0..input.n {
        for c in 0..input.c {
            for y in 0..input.h {
                for x in 0..input.w {
                    let pick = |on: bool, v: usize| if on { v } else { 0 };
                    let o = out.offset(pick(keep[0], n), pick(keep[1], c), pick(keep[2], y), pick(keep[3], x));
                    f(j, o);
                    j += 1;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(shape, |_, _, _, _| rng.random_range(-1.0..1.0))
    }

    fn row(values: &[f32]) -> Tensor {
        Tensor::new(Shape::new(1, 1, 1, values.len()), values.to_vec()).unwrap()
    }

    #[test]
    fn relu_values() {
        let mut g = Graph::new();
        let x = g.constant(row(&[-1.0, 0.0, 2.0]));
        let y = g.relu(x);
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn dropout_identity_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(Shape::new(1, 1, 10, 10), 1.0));
        assert_eq!(g.dropout(x, 0.0, &mut rng, true).unwrap(), x);
        assert_eq!(g.dropout(x, 0.5, &mut rng, false).unwrap(), x);
        assert!(g.dropout(x, 1.0, &mut rng, true).is_err());
    }

    #[test]
    fn dropout_survivor_fraction() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(Shape::new(1, 1, 100, 100), 1.0));
        let y = g.dropout(x, 0.5, &mut rng, true).unwrap();
        let data = g.value(y).data();
        let survivors = data.iter().filter(|&&v| v != 0.0).count();
        let frac = survivors as f64 / data.len() as f64;
        assert!((frac - 0.5).abs() < 0.05, "{frac}");
        assert!(data.iter().all(|&v| v == 0.0 || v == 2.0));
    }

    #[test]
    fn binary_ops_check_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(Shape::new(1, 2, 3, 3)));
        let b = g.constant(Tensor::zeros(Shape::new(1, 2, 3, 4)));
        assert!(g.add(a, b).is_err());
        let c = g.constant(Tensor::full(Shape::new(1, 2, 1, 1), 1.5));
        let s = g.add(a, c).unwrap();
        assert!(g.value(s).data().iter().all(|&v| v == 1.5));
    }

    #[test]
    fn replayed_selectors_keep_the_recorded_piece() {
        let build = |g: &mut Graph, x: &[f32]| {
            let a = g.constant(row(x));
            let r = g.relu(a);
            let l = g.leaky_relu(a, 0.5);
            let s = g.abs(a);
            let t = g.add(r, l).unwrap();
            let t = g.add(t, s).unwrap();
            g.value(t).data().to_vec()
        };
        let mut g = Graph::new();
        g.record_selectors();
        assert_eq!(build(&mut g, &[1.0, -1.0]), vec![3.0, 0.5]);
        let tape = g.take_selectors().unwrap();
        assert_eq!(tape.len(), 3);

        let mut g = Graph::new();
        g.replay_selectors(tape);
        // signs flipped, but evaluated on the recorded linear piece
        assert_eq!(build(&mut g, &[-1.0, 2.0]), vec![-3.0, -1.0]);
        assert_eq!(build(&mut Graph::new(), &[-1.0, 2.0]), vec![0.5, 6.0]);
    }

    #[test]
    fn l1_distance_values() {
        let mut g = Graph::new();
        let a = g.constant(row(&[0.0, 0.0]));
        let b = g.constant(row(&[1.0, 3.0]));
        let d = g.l1_distance(a, b).unwrap();
        assert_eq!(g.value(d).item().unwrap(), 2.0);
        let z = g.l1_distance(a, a).unwrap();
        assert_eq!(g.value(z).item().unwrap(), 0.0);
    }

    #[test]
    fn mean_over_batch_and_channel() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = random(Shape::new(2, 3, 4, 4), &mut rng);
        let mut g = Graph::new();
        let x = g.constant(t.clone());
        let m = g.mean_over_axes(x, &[0, 1]).unwrap();
        let out = g.value(m);
        assert_eq!(out.shape(), Shape::new(1, 1, 4, 4));
        for y in 0..4 {
            for xx in 0..4 {
                let mut s = 0.0f64;
                for n in 0..2 {
                    for c in 0..3 {
                        s += t.at(n, c, y, xx) as f64;
                    }
                }
                assert!((out.at(0, 0, y, xx) as f64 - s / 6.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn empty_reductions_rejected() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(Shape::new(0, 1, 1, 1)));
        assert!(g.mean_all(x).is_err());
        assert!(g.mean_over_axes(x, &[0]).is_err());
    }

    #[test]
    fn backward_of_mean_is_uniform() {
        let mut g = Graph::new();
        let x = g.param(Tensor::full(Shape::new(1, 2, 2, 2), 0.3));
        let m = g.mean_all(x).unwrap();
        g.backward(m).unwrap();
        assert!(g.grad(x).unwrap().iter().all(|&v| v == 1.0 / 8.0));
    }

    #[test]
    fn backward_of_l1_to_zero_on_positives() {
        let mut g = Graph::new();
        let x = g.param(Tensor::full(Shape::new(1, 1, 2, 5), 0.4));
        let z = g.constant(Tensor::zeros(Shape::new(1, 1, 2, 5)));
        let l = g.l1_distance(x, z).unwrap();
        g.backward(l).unwrap();
        assert!(g.grad(x).unwrap().iter().all(|&v| v == 0.1));
    }

    #[test]
    fn backward_accumulates_and_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.param(Tensor::full(Shape::new(1, 1, 1, 4), 1.0));
        let m = g.mean_all(x).unwrap();
        g.backward(m).unwrap();
        g.backward(m).unwrap();
        assert!(g.grad(x).unwrap().iter().all(|&v| v == 0.5));
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn kinks_have_zero_derivative() {
        let mut g = Graph::new();
        let x = g.param(row(&[0.0, 0.0]));
        let r = g.relu(x);
        let a = g.abs(x);
        let s = g.add(r, a).unwrap();
        let l = g.mean_all(s).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut g = Graph::new();
        let x = g.param(row(&[1.0, 2.0]));
        let d = g.detach(x);
        let s = g.add(x, d).unwrap();
        let l = g.mean_all(s).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0.5, 0.5]);
        assert!(g.grad(d).is_none());
    }

    #[test]
    fn nodes_are_topologically_ordered() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut g = Graph::new();
        let x = g.param(random(Shape::new(1, 1, 4, 4), &mut rng));
        let y = g.relu(x);
        let z = g.mul(x, y).unwrap();
        let _ = g.mean_all(z).unwrap();
        for i in 0..g.len() {
            for inp in g.inputs_of(Var(i)) {
                assert!(inp.index() < i);
            }
        }
    }

    /// Relative error between two gradient vectors, normed over the whole tensor.
    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        diff / na.max(nb).max(1e-12)
    }

    /// Random two-layer conv net with every elementwise op on the path.
    fn two_layer_loss(params: &[Tensor], x: &Tensor, target: &Tensor) -> (Graph, Vec<Var>, Var) {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut g = Graph::new();
        let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
        let xv = g.constant(x.clone());
        let tv = g.constant(target.clone());
        let h = g.conv2d(xv, vars[0], Some(vars[1]), ConvGeom::same(3, 2)).unwrap();
        let h = g.leaky_relu(h, 0.1);
        let h = g.dropout(h, 0.2, &mut rng, true).unwrap();
        let h2 = g.conv2d(h, vars[2], Some(vars[3]), ConvGeom::same(3, 1)).unwrap();
        let h2 = g.relu(h2);
        let gate = g.mul(h2, vars[4]).unwrap();
        let y = g.add_scalar(gate, 0.1);
        let y = g.scalar_mul(y, 1.5);
        let l1 = g.l1_distance(y, tv).unwrap();
        let m = g.mean_over_axes(y, &[0, 1]).unwrap();
        let m = g.abs(m);
        let l2 = g.mean_all(m).unwrap();
        let loss = g.add(l1, l2).unwrap();
        (g, vars, loss)
    }

    #[test]
    fn two_layer_conv_net_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random(Shape::new(2, 2, 6, 6), &mut rng);
        let target = random(Shape::new(2, 3, 6, 6), &mut rng);
        let mut params = vec![
            random(Shape::new(4, 2, 3, 3), &mut rng),
            random(Shape::new(4, 1, 1, 1), &mut rng),
            random(Shape::new(3, 4, 3, 3), &mut rng),
            random(Shape::new(3, 1, 1, 1), &mut rng),
            random(Shape::new(1, 3, 1, 1), &mut rng),
        ];
        let (mut g, vars, loss) = two_layer_loss(&params, &x, &target);
        g.backward(loss).unwrap();
        let analytic: Vec<Vec<f64>> =
            vars.iter().map(|&v| g.grad(v).unwrap().iter().map(|&x| x as f64).collect()).collect();

        let eps = 1e-3f32;
        for p in 0..params.len() {
            let mut numeric = Vec::new();
            for i in 0..params[p].numel() {
                let orig = params[p].data()[i];
                params[p].data_mut()[i] = orig + eps;
                let (g1, _, l1) = two_layer_loss(&params, &x, &target);
                params[p].data_mut()[i] = orig - eps;
                let (g2, _, l2) = two_layer_loss(&params, &x, &target);
                params[p].data_mut()[i] = orig;
                let up = g1.value(l1).item().unwrap() as f64;
                let down = g2.value(l2).item().unwrap() as f64;
                numeric.push((up - down) / (2.0 * eps as f64));
            }
            let err = rel_err(&analytic[p], &numeric);
            assert!(err < 1e-3, "param {p}: relative error {err}");
        }
    }
}
