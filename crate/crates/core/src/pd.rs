//! Pixel-shuffle downsampling (PD) with a configurable sub-image order.
//!
//! `pd_forward` rearranges an `h×w` image into an `s×s` mosaic of
//! `(h/s)×(w/s)` sub-images. Sampling phase `p = a·s + b` gathers the pixels
//! at rows `a + s·u` and columns `b + s·v`. Grid block `k = r·s + c`
//! (row-major) holds phase `perm[k]`, so the identity permutation gives the
//! classic order-invariant layout and a random permutation gives the
//! order-variant one.

use std::rc::Rc;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{invalid, shape_err, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{Shape, Tensor};

/// Stride plus a permutation mapping grid block index to sampling phase.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ShuffleOrder {
    stride: usize,
    perm: Vec<usize>,
}

impl ShuffleOrder {
    /// Order from an explicit permutation of `0..stride²`.
    pub fn new(stride: usize, perm: Vec<usize>) -> Result<Self> {
        if stride == 0 {
            return Err(invalid!("PD stride must be at least 1"));
        }
        let phases = stride * stride;
        if perm.len() != phases {
            return Err(invalid!("permutation of length {} for stride {stride}", perm.len()));
        }
        let mut seen = vec![false; phases];
        for &p in &perm {
            if p >= phases || std::mem::replace(&mut seen[p], true) {
                return Err(invalid!("{perm:?} is not a permutation of 0..{phases}"));
            }
        }
        Ok(Self { stride, perm })
    }

    /// The order-invariant layout.
    pub fn identity(stride: usize) -> Result<Self> {
        Self::new(stride, (0..stride * stride).collect())
    }

    /// Uniformly random order (Fisher–Yates over `rng`).
    pub fn random<R: Rng + ?Sized>(stride: usize, rng: &mut R) -> Result<Self> {
        let mut order = Self::identity(stride)?;
        order.perm.shuffle(rng);
        Ok(order)
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn perm(&self) -> &[usize] {
        &self.perm
    }

    pub fn is_identity(&self) -> bool {
        self.perm.iter().enumerate().all(|(k, &p)| k == p)
    }

    /// The inverse permutation, mapping phase back to grid block.
    pub fn transpose(&self) -> Self {
        let mut inv = vec![0; self.perm.len()];
        for (k, &p) in self.perm.iter().enumerate() {
            inv[p] = k;
        }
        Self { stride: self.stride, perm: inv }
    }

    fn check(&self, shape: Shape) -> Result<()> {
        let s = self.stride;
        if shape.h % s != 0 || shape.w % s != 0 {
            return Err(shape_err!(
                "spatial extents {}x{} are not divisible by PD stride {s}",
                shape.h,
                shape.w
            ));
        }
        Ok(())
    }

    /// Gather index for the forward mosaic: `out[i] = in[index[i]]`.
    pub fn forward_index(&self, shape: Shape) -> Result<Rc<[usize]>> {
        self.check(shape)?;
        let s = self.stride;
        let (hs, ws) = (shape.h / s, shape.w / s);
        let plane: Vec<usize> = (0..shape.h)
            .flat_map(|y| (0..shape.w).map(move |x| (y, x)))
            .map(|(y, x)| {
                let (r, u) = (y / hs, y % hs);
                let (c, v) = (x / ws, x % ws);
                let phase = self.perm[r * s + c];
                let (a, b) = (phase / s, phase % s);
                (a + s * u) * shape.w + (b + s * v)
            })
            .collect();
        Ok(expand_planes(&plane, shape))
    }

    /// Gather index that reassembles a mosaic; `self` plays the role of the
    /// transposed order.
    pub fn inverse_index(&self, shape: Shape) -> Result<Rc<[usize]>> {
        self.check(shape)?;
        let s = self.stride;
        let (hs, ws) = (shape.h / s, shape.w / s);
        let plane: Vec<usize> = (0..shape.h)
            .flat_map(|y| (0..shape.w).map(move |x| (y, x)))
            .map(|(y, x)| {
                let (a, u) = (y % s, y / s);
                let (b, v) = (x % s, x / s);
                let block = self.perm[a * s + b];
                let (r, c) = (block / s, block % s);
                (r * hs + u) * shape.w + (c * ws + v)
            })
            .collect();
        Ok(expand_planes(&plane, shape))
    }
}

fn expand_planes(plane: &[usize], shape: Shape) -> Rc<[usize]> {
    let len = plane.len();
    (0..shape.n * shape.c)
        .flat_map(|k| plane.iter().map(move |&i| k * len + i))
        .collect()
}

fn gather(x: &Tensor, index: &[usize]) -> Result<Tensor> {
    Tensor::new(x.shape(), index.iter().map(|&i| x.data()[i]).collect())
}

/// Rearranges `x` into the PD mosaic for `order`; stride 1 is the identity.
pub fn pd_forward(x: &Tensor, order: &ShuffleOrder) -> Result<Tensor> {
    gather(x, &order.forward_index(x.shape())?)
}

/// Undoes [`pd_forward`] when `order_t` is the transpose of the forward order.
pub fn pd_inverse(y: &Tensor, order_t: &ShuffleOrder) -> Result<Tensor> {
    gather(y, &order_t.inverse_index(y.shape())?)
}

/// [`pd_forward`] recorded on a graph.
pub fn pd_forward_var(g: &mut Graph, x: Var, order: &ShuffleOrder) -> Result<Var> {
    let index = order.forward_index(g.shape(x))?;
    g.gather(x, index)
}

/// [`pd_inverse`] recorded on a graph.
pub fn pd_inverse_var(g: &mut Graph, y: Var, order_t: &ShuffleOrder) -> Result<Var> {
    let index = order_t.inverse_index(g.shape(y))?;
    g.gather(y, index)
}

/// `PD⁻¹(net(PD(x, order)), orderᵀ)` on a graph.
pub fn wrapped_apply<F>(g: &mut Graph, net: F, x: Var, order: &ShuffleOrder) -> Result<Var>
where
    F: FnOnce(&mut Graph, Var) -> Result<Var>,
{
    let down = pd_forward_var(g, x, order)?;
    let out = net(g, down)?;
    if g.shape(out) != g.shape(x) {
        return Err(shape_err!("wrapped network changed shape {} to {}", g.shape(x), g.shape(out)));
    }
    pd_inverse_var(g, out, &order.transpose())
}

/// `PD⁻¹(net(PD(x, order)), orderᵀ)` on plain tensors.
pub fn wrapped_apply_tensor<F>(net: F, x: &Tensor, order: &ShuffleOrder) -> Result<Tensor>
where
    F: FnOnce(&Tensor) -> Result<Tensor>,
{
    let down = pd_forward(x, order)?;
    let out = net(&down)?;
    if out.shape() != x.shape() {
        return Err(shape_err!("wrapped network changed shape {} to {}", x.shape(), out.shape()));
    }
    pd_inverse(&out, &order.transpose())
}
