//! The four self-supervised training losses and their weighted total.
//!
//! Every `‖·‖₁` is a mean of absolute values. The pseudo-noise label of
//! the self-residual loss is detached, so that loss only trains `h`.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Result};
use crate::graph::{Graph, Var};
use crate::networks::GraphModule;
use crate::pd::{wrapped_apply, ShuffleOrder};
use crate::Rng;

/// Weights of the four loss terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_s: f32,
    pub lambda_r: f32,
    pub lambda_ov: f32,
    pub lambda_np: f32,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_s: 10.0, lambda_r: 1.0, lambda_ov: 1.0, lambda_np: 1.0 }
    }
}

impl LossWeights {
    pub const ZERO: Self = Self { lambda_s: 0.0, lambda_r: 0.0, lambda_ov: 0.0, lambda_np: 0.0 };

    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_s, self.lambda_r, self.lambda_ov, self.lambda_np];
        if all.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return Err(invalid!("loss weights must be finite and non-negative: {all:?}"));
        }
        Ok(())
    }
}

/// PD strides used by the losses: the training stride (blind-spot and
/// order-variant terms) and the residual stride (pseudo-noise label).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Strides {
    pub train: usize,
    pub residual: usize,
}

impl Default for Strides {
    fn default() -> Self {
        Self { train: 5, residual: 2 }
    }
}

impl Strides {
    /// Spatial extents must be multiples of this.
    pub fn lcm(&self) -> usize {
        let gcd = |mut a: usize, mut b: usize| {
            while b != 0 {
                (a, b) = (b, a % b);
            }
            a
        };
        self.train / gcd(self.train, self.residual) * self.residual
    }
}

/// Scalar values of each term and the weighted total.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub loss_s: f32,
    pub loss_r: f32,
    pub loss_ov: f32,
    pub loss_np: f32,
    pub total: f32,
}

/// Graph handles of each term.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub loss_s: Var,
    pub loss_r: Var,
    pub loss_ov: Var,
    pub loss_np: Var,
    pub total: Var,
}

impl LossVars {
    pub fn report(&self, g: &Graph) -> Result<LossReport> {
        Ok(LossReport {
            loss_s: g.value(self.loss_s).item()?,
            loss_r: g.value(self.loss_r).item()?,
            loss_ov: g.value(self.loss_ov).item()?,
            loss_np: g.value(self.loss_np).item()?,
            total: g.value(self.total).item()?,
        })
    }
}

/// The random sampling orders consumed by one evaluation of the total loss.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LossOrders {
    /// Order for the blind-spot term.
    pub s: ShuffleOrder,
    /// Orders for `f` and `h` in the order-variant term.
    pub ov_f: ShuffleOrder,
    pub ov_h: ShuffleOrder,
}

impl LossOrders {
    pub fn draw(strides: Strides, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            s: ShuffleOrder::random(strides.train, rng)?,
            ov_f: ShuffleOrder::random(strides.train, rng)?,
            ov_h: ShuffleOrder::random(strides.train, rng)?,
        })
    }
}

fn expect_stride(order: &ShuffleOrder, stride: usize, term: &str) -> Result<()> {
    if order.stride() != stride {
        return Err(invalid!("{term} uses PD stride {stride}, got an order of stride {}", order.stride()));
    }
    Ok(())
}

fn expect_divisible(g: &Graph, x: Var, by: usize) -> Result<()> {
    let s = g.shape(x);
    if s.h % by != 0 || s.w % by != 0 {
        return Err(shape_err!("input {}x{} is not divisible by {by}", s.h, s.w));
    }
    Ok(())
}

fn zeros_like(g: &mut Graph, x: Var) -> Var {
    let s = g.shape(x);
    g.constant(crate::Tensor::zeros(s))
}

/// Blind-spot term: `mean |f(x; I, PD_train) − x|`.
pub fn loss_s(
    g: &mut Graph,
    f: &dyn GraphModule,
    x: Var,
    order: &ShuffleOrder,
    strides: Strides,
    rng: &mut Rng,
) -> Result<Var> {
    expect_stride(order, strides.train, "loss_s")?;
    let y = wrapped_apply(g, |g, v| f.forward(g, v, rng), x, order)?;
    g.l1_distance(y, x)
}

/// Detached pseudo-noise label `x − f(x; I₀, PD_residual)`.
pub fn pseudo_noise(g: &mut Graph, f: &dyn GraphModule, x: Var, strides: Strides, rng: &mut Rng) -> Result<Var> {
    let identity = ShuffleOrder::identity(strides.residual)?;
    let y = wrapped_apply(g, |g, v| f.forward(g, v, rng), x, &identity)?;
    let y = g.detach(y);
    g.sub(x, y)
}

/// Self-residual term: `mean |x − f(x; I₀, PD_residual) − h(x)|`, label detached.
pub fn loss_r(
    g: &mut Graph,
    f: &dyn GraphModule,
    h: &dyn GraphModule,
    x: Var,
    strides: Strides,
    rng: &mut Rng,
) -> Result<Var> {
    expect_divisible(g, x, strides.residual)?;
    let label = pseudo_noise(g, f, x, strides, rng)?;
    let noise = h.forward(g, x, rng)?;
    g.l1_distance(label, noise)
}

/// Order-variant term: `mean |x − f(x; I, PD_train) − h(x; I′, PD_train)|`.
#[allow(clippy::too_many_arguments)]
pub fn loss_ov(
    g: &mut Graph,
    f: &dyn GraphModule,
    h: &dyn GraphModule,
    x: Var,
    order_f: &ShuffleOrder,
    order_h: &ShuffleOrder,
    strides: Strides,
    rng: &mut Rng,
) -> Result<Var> {
    expect_stride(order_f, strides.train, "loss_ov")?;
    expect_stride(order_h, strides.train, "loss_ov")?;
    let fy = wrapped_apply(g, |g, v| f.forward(g, v, rng), x, order_f)?;
    let hn = wrapped_apply(g, |g, v| h.forward(g, v, rng), x, order_h)?;
    let d = g.sub(x, fy)?;
    let d = g.sub(d, hn)?;
    let z = zeros_like(g, d);
    g.l1_distance(d, z)
}

/// Noise-prior term on a precomputed `h(x)`: mean over pixels of the
/// absolute batch-and-channel mean.
pub fn noise_prior(g: &mut Graph, noise: Var) -> Result<Var> {
    let m = g.mean_over_axes(noise, &[0, 1])?;
    let m = g.abs(m);
    g.mean_all(m)
}

/// Noise-prior term: `mean_pixels |mean_{batch, channel} h(x)|`.
pub fn loss_np(g: &mut Graph, h: &dyn GraphModule, x: Var, rng: &mut Rng) -> Result<Var> {
    let noise = h.forward(g, x, rng)?;
    noise_prior(g, noise)
}

/// Weighted sum of all four terms with freshly drawn orders.
pub fn loss_total(
    g: &mut Graph,
    f: &dyn GraphModule,
    h: &dyn GraphModule,
    x: Var,
    weights: LossWeights,
    strides: Strides,
    rng: &mut Rng,
) -> Result<LossVars> {
    let orders = LossOrders::draw(strides, rng)?;
    loss_total_with_orders(g, f, h, x, weights, strides, &orders, rng)
}

/// [`loss_total`] with explicit orders. `h(x)` is evaluated once and
/// shared by the self-residual and noise-prior terms.
#[allow(clippy::too_many_arguments)]
pub fn loss_total_with_orders(
    g: &mut Graph,
    f: &dyn GraphModule,
    h: &dyn GraphModule,
    x: Var,
    weights: LossWeights,
    strides: Strides,
    orders: &LossOrders,
    rng: &mut Rng,
) -> Result<LossVars> {
    weights.validate()?;
    expect_divisible(g, x, strides.lcm())?;
    if g.shape(x).n == 0 {
        return Err(invalid!("empty batch"));
    }
    let ls = loss_s(g, f, x, &orders.s, strides, rng)?;

    let label = pseudo_noise(g, f, x, strides, rng)?;
    let noise = h.forward(g, x, rng)?;
    let lr = g.l1_distance(label, noise)?;

    let lov = loss_ov(g, f, h, x, &orders.ov_f, &orders.ov_h, strides, rng)?;
    let lnp = noise_prior(g, noise)?;

    let terms = [
        (ls, weights.lambda_s),
        (lr, weights.lambda_r),
        (lov, weights.lambda_ov),
        (lnp, weights.lambda_np),
    ];
    let mut total = g.scalar_mul(terms[0].0, terms[0].1);
    for &(v, w) in &terms[1..] {
        let wv = g.scalar_mul(v, w);
        total = g.add(total, wv)?;
    }
    Ok(LossVars { loss_s: ls, loss_r: lr, loss_ov: lov, loss_np: lnp, total })
}
