use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use super::kernels::{self, Conv2dParams, ConvGeometry};
use super::{Real, Tensor};
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

/// Classification target for one anchor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AnchorLabel {
    Positive(usize),
    Negative,
    Ignore,
}

#[derive(Clone, Copy, Debug)]
enum BiasAxis {
    /// `x: [C, ...]`, bias indexed by the leading axis.
    Leading { inner: usize },
    /// `x: [..., C]`, bias indexed by the trailing axis.
    Trailing,
}

enum Op {
    Leaf,
    MatMul {
        a: usize,
        b: usize,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        shared_b: bool,
    },
    Conv2d {
        x: usize,
        w: usize,
        geom: ConvGeometry,
    },
    AddBias {
        x: usize,
        b: usize,
        axis: BiasAxis,
    },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, Real),
    Relu(usize),
    Elu(usize),
    EluPlusOne(usize),
    Map {
        x: usize,
        df: fn(Real) -> Real,
    },
    Softmax {
        x: usize,
        outer: usize,
        n: usize,
        inner: usize,
    },
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Vec<Real>,
        rstd: Vec<Real>,
    },
    Concat {
        inputs: Vec<usize>,
        sizes: Vec<usize>,
    },
    Reshape(usize),
    Permute {
        x: usize,
        perm: Vec<usize>,
    },
    Sum(usize),
    Mean(usize),
    RowNormalize {
        x: usize,
        sums: Vec<Real>,
    },
    SoftmaxAttention {
        q: usize,
        k: usize,
        v: usize,
        batch: usize,
        l: usize,
        s: usize,
        d: usize,
        dv: usize,
        /// Attention weights `[batch, l, s]`.
        probs: Vec<Real>,
    },
    LinearAttention {
        q: usize,
        k: usize,
        v: usize,
        batch: usize,
        l: usize,
        s: usize,
        d: usize,
        dv: usize,
    },
    FocalLoss {
        logits: usize,
        labels: Vec<AnchorLabel>,
        classes: usize,
        alpha: Real,
        gamma: Real,
        norm: Real,
    },
    SmoothL1 {
        pred: usize,
        targets: Vec<(usize, Vec<Real>)>,
        regs: usize,
        beta: Real,
        norm: Real,
    },
    DepthLoss {
        logits: usize,
        bins: Vec<Option<usize>>,
        gamma: Real,
        norm: Real,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of executed ops. Nodes are appended in execution order, so the
/// node list is always a valid topological order.
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    grads: Option<Vec<Option<Vec<Real>>>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Lower clamp applied to probabilities before taking logs in the loss ops.
pub const PROB_EPS: Real = 1e-7;

/// Weights below this total mass fall back to uniform in [`Tape::row_normalize`].
pub const EMPTY_ROW_MASS: Real = 1e-8;

fn sigmoid(z: Real) -> Real {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn elu(x: Real) -> Real {
    if x > 0.0 {
        x
    } else {
        x.exp() - 1.0
    }
}

fn elu_grad(x: Real) -> Real {
    if x > 0.0 {
        1.0
    } else {
        x.exp()
    }
}

/// `γ·x^(γ−1)`, with the `γ = 0` case pinned to zero.
fn pow_grad(x: Real, gamma: Real) -> Real {
    if gamma == 0.0 {
        0.0
    } else {
        gamma * x.powf(gamma - 1.0)
    }
}

/// Focal term for one binary target, returned with its derivative in `p`.
pub(crate) fn focal_term(p: Real, positive: bool, alpha: Real, gamma: Real) -> (Real, Real) {
    if positive {
        let q = 1.0 - p;
        let value = -alpha * q.powf(gamma) * p.ln();
        let dp = alpha * (pow_grad(q, gamma) * p.ln() - q.powf(gamma) / p);
        (value, dp)
    } else {
        let q = 1.0 - p;
        let value = -(1.0 - alpha) * p.powf(gamma) * q.ln();
        let dp = -(1.0 - alpha) * (pow_grad(p, gamma) * q.ln() - p.powf(gamma) / q);
        (value, dp)
    }
}

pub(crate) fn smooth_l1_term(x: Real, beta: Real) -> (Real, Real) {
    if x.abs() < beta {
        (0.5 * x * x / beta, x / beta)
    } else {
        (x.abs() - 0.5 * beta, x.signum())
    }
}

/// In-place `softmax(scale · row)`.
fn softmax_row(row: &mut [Real], scale: Real) {
    let max = row.iter().fold(Real::NEG_INFINITY, |m, &z| m.max(z)) * scale;
    let mut sum = 0.0;
    for z in row.iter_mut() {
        *z = (*z * scale - max).exp();
        sum += *z;
    }
    let inv = 1.0 / sum;
    row.iter_mut().for_each(|z| *z *= inv);
}

struct AttentionDims {
    batch: usize,
    l: usize,
    s: usize,
    d: usize,
    dv: usize,
    out_shape: Vec<usize>,
}

fn softmax_slice(logits: impl Iterator<Item = Real> + Clone, out: &mut [Real]) {
    let max = logits.clone().fold(Real::NEG_INFINITY, Real::max);
    let mut sum = 0.0;
    for (o, z) in out.iter_mut().zip(logits) {
        *o = (z - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            grads: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::Tape("variable does not belong to this tape".into()));
        }
        Ok(v.index)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[usize]) -> Var {
        debug_assert!(
            value.all_finite() || inputs.iter().any(|&i| !self.nodes[i].value.all_finite()),
            "non-finite output from finite inputs"
        );
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    /// Registers a constant input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, false)
    }

    /// Registers a differentiable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, true)
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[self.idx(v).expect("foreign variable")].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.index].requires_grad && v.tape == self.id
    }

    /// Gradient of the last backward pass with respect to a differentiable leaf.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let i = self.idx(v).ok()?;
        let g = self.grads.as_ref()?.get(i)?.as_ref()?;
        Some(Tensor::new(self.nodes[i].value.shape(), g.clone()).expect("grad shape"))
    }

    /// Clears gradients so [`Tape::backward`] may run again.
    pub fn reset_grads(&mut self) {
        self.grads = None;
    }

    // ---- linear algebra -------------------------------------------------

    /// `a: [.., M, K] · b: [.., K, N]`. `b` may also be a plain `[K, N]` matrix shared
    /// across the batch dims of `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        let (sa, sb) = (self.nodes[ai].value.shape(), self.nodes[bi].value.shape());
        let err = || {
            Error::Dimension(format!("matmul shapes {sa:?} and {sb:?} are incompatible"))
        };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(err());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != kb {
            return Err(err());
        }
        let batch_dims = &sa[..sa.len() - 2];
        let shared_b = sb.len() == 2;
        if !shared_b && sb[..sb.len() - 2] != *batch_dims {
            return Err(err());
        }
        let batch: usize = batch_dims.iter().product();
        let mut out_shape = batch_dims.to_vec();
        out_shape.extend([m, n]);
        let (av, bv) = (self.nodes[ai].value.data(), self.nodes[bi].value.data());
        let mut out = vec![0.0; batch * m * n];
        if shared_b {
            kernels::gemm(batch * m, k, n, av, (k, 1), bv, (n, 1), 0.0, &mut out);
        } else {
            for t in 0..batch {
                kernels::gemm(
                    m,
                    k,
                    n,
                    &av[t * m * k..],
                    (k, 1),
                    &bv[t * k * n..],
                    (n, 1),
                    0.0,
                    &mut out[t * m * n..],
                );
            }
        }
        let value = Tensor::new(&out_shape, out)?;
        Ok(self.push(
            value,
            Op::MatMul {
                a: ai,
                b: bi,
                batch,
                m,
                k,
                n,
                shared_b,
            },
            &[ai, bi],
        ))
    }

    /// 2D convolution of `x: [C_in, H, W]` with `w: [C_out, C_in/groups, k, k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, params: Conv2dParams) -> Result<Var> {
        let (xi, wi) = (self.idx(x)?, self.idx(w)?);
        let geom = ConvGeometry::new(
            self.nodes[xi].value.shape(),
            self.nodes[wi].value.shape(),
            params,
        )?;
        let out = kernels::conv2d_forward(
            &geom,
            self.nodes[xi].value.data(),
            self.nodes[wi].value.data(),
        );
        let value = Tensor::new(&[geom.c_out, geom.h_out, geom.w_out], out)?;
        Ok(self.push(value, Op::Conv2d { x: xi, w: wi, geom }, &[xi, wi]))
    }

    /// Adds `b: [C]` along the leading axis of `x: [C, ...]` (per-channel bias).
    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xi, bi) = (self.idx(x)?, self.idx(b)?);
        let sx = self.nodes[xi].value.shape();
        let sb = self.nodes[bi].value.shape();
        if sx.is_empty() || sb != [sx[0]] {
            return Err(Error::Dimension(format!(
                "channel bias {sb:?} does not match {sx:?}"
            )));
        }
        let inner = sx[1..].iter().product::<usize>();
        let bv = self.nodes[bi].value.data();
        let mut out = self.nodes[xi].value.clone();
        for (c, chunk) in out.data_mut().chunks_mut(inner).enumerate() {
            chunk.iter_mut().for_each(|v| *v += bv[c]);
        }
        let axis = BiasAxis::Leading { inner };
        Ok(self.push(out, Op::AddBias { x: xi, b: bi, axis }, &[xi, bi]))
    }

    /// Adds `b: [C]` along the trailing axis of `x: [..., C]`.
    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xi, bi) = (self.idx(x)?, self.idx(b)?);
        let sx = self.nodes[xi].value.shape();
        let sb = self.nodes[bi].value.shape();
        if sx.is_empty() || sb != [sx[sx.len() - 1]] {
            return Err(Error::Dimension(format!(
                "row bias {sb:?} does not match {sx:?}"
            )));
        }
        let c = sb[0];
        let bv = self.nodes[bi].value.data();
        let mut out = self.nodes[xi].value.clone();
        for chunk in out.data_mut().chunks_mut(c) {
            chunk.iter_mut().zip(bv).for_each(|(v, b)| *v += b);
        }
        let axis = BiasAxis::Trailing;
        Ok(self.push(out, Op::AddBias { x: xi, b: bi, axis }, &[xi, bi]))
    }

    // ---- elementwise ----------------------------------------------------

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        f: impl Fn(Real, Real) -> Real,
        op: fn(usize, usize) -> Op,
    ) -> Result<Var> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        let (va, vb) = (&self.nodes[ai].value, &self.nodes[bi].value);
        if va.shape() != vb.shape() {
            return Err(Error::Dimension(format!(
                "elementwise operands {:?} and {:?} differ",
                va.shape(),
                vb.shape()
            )));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(va.shape(), data)?;
        Ok(self.push(value, op(ai, bi), &[ai, bi]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x * y, Op::Mul)
    }

    fn unary(&mut self, x: Var, f: impl Fn(Real) -> Real, op: Op) -> Result<Var> {
        let xi = self.idx(x)?;
        let v = &self.nodes[xi].value;
        let value = Tensor::new(v.shape(), v.data().iter().map(|&t| f(t)).collect())?;
        Ok(self.push(value, op, &[xi]))
    }

    pub fn scale(&mut self, x: Var, s: Real) -> Result<Var> {
        let xi = self.idx(x)?;
        self.unary(x, |t| t * s, Op::Scale(xi, s))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        self.unary(x, |t| t.max(0.0), Op::Relu(xi))
    }

    pub fn elu(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        self.unary(x, elu, Op::Elu(xi))
    }

    /// `ELU(x) + 1`, strictly positive for every finite `x`.
    pub fn elu_plus_one(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        self.unary(x, |t| if t > 0.0 { t + 1.0 } else { t.exp() }, Op::EluPlusOne(xi))
    }

    /// Pointwise `f` with caller-supplied derivative `df`.
    pub fn map(&mut self, x: Var, f: fn(Real) -> Real, df: fn(Real) -> Real) -> Result<Var> {
        let xi = self.idx(x)?;
        self.unary(x, f, Op::Map { x: xi, df })
    }

    /// Concatenates along the leading axis (channels for `[C, H, W]` maps).
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        let idx: Vec<usize> = xs.iter().map(|&v| self.idx(v)).collect::<Result<_>>()?;
        let first = idx
            .first()
            .ok_or_else(|| Error::Dimension("concat of zero tensors".into()))?;
        let tail = self.nodes[*first].value.shape()[1..].to_vec();
        let mut data = Vec::new();
        let mut sizes = Vec::with_capacity(idx.len());
        for &i in &idx {
            let v = &self.nodes[i].value;
            if v.shape().is_empty() || v.shape()[1..] != tail[..] {
                return Err(Error::Dimension(format!(
                    "cannot concatenate {:?} with trailing extents {:?}",
                    v.shape(),
                    tail
                )));
            }
            sizes.push(v.shape()[0]);
            data.extend_from_slice(v.data());
        }
        let mut shape = vec![sizes.iter().sum()];
        shape.extend(tail);
        let value = Tensor::new(&shape, data)?;
        Ok(self.push(value, Op::Concat { inputs: idx.clone(), sizes }, &idx))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let xi = self.idx(x)?;
        let value = self.nodes[xi].value.clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape(xi), &[xi]))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let xi = self.idx(x)?;
        let shape = self.nodes[xi].value.shape().to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::Dimension(format!(
                "invalid permutation {perm:?} for shape {shape:?}"
            )));
        }
        let data = kernels::permute(self.nodes[xi].value.data(), &shape, perm);
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let value = Tensor::new(&out_shape, data)?;
        Ok(self.push(
            value,
            Op::Permute {
                x: xi,
                perm: perm.to_vec(),
            },
            &[xi],
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let rank = self.shape(x).len();
        if rank < 2 {
            return Err(Error::Dimension("transpose needs rank >= 2".into()));
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(rank - 2, rank - 1);
        self.permute(x, &perm)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let s = self.nodes[xi].value.data().iter().sum();
        Ok(self.push(Tensor::scalar(s), Op::Sum(xi), &[xi]))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let v = self.nodes[xi].value.data();
        let s = v.iter().sum::<Real>() / v.len().max(1) as Real;
        Ok(self.push(Tensor::scalar(s), Op::Mean(xi), &[xi]))
    }

    // ---- normalization --------------------------------------------------

    /// Softmax along `axis`, with max-subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xi = self.idx(x)?;
        let shape = self.nodes[xi].value.shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::Dimension(format!(
                "softmax axis {axis} out of range for {shape:?}"
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let n = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let xv = self.nodes[xi].value.data();
        let mut out = xv.to_vec();
        if n * inner > 0 {
            let mut acc = vec![0.0; inner];
            for block in out.chunks_exact_mut(n * inner) {
                if inner == 1 {
                    softmax_row(block, 1.0);
                    continue;
                }
                // Reduce along the softmax axis with whole rows of `inner` at a time.
                acc.copy_from_slice(&block[..inner]);
                for row in block.chunks_exact(inner).skip(1) {
                    acc.iter_mut().zip(row).for_each(|(m, &z)| *m = m.max(z));
                }
                for row in block.chunks_exact_mut(inner) {
                    row.iter_mut().zip(&acc).for_each(|(z, &m)| *z = (*z - m).exp());
                }
                acc.iter_mut().for_each(|a| *a = 0.0);
                for row in block.chunks_exact(inner) {
                    acc.iter_mut().zip(row).for_each(|(a, &z)| *a += z);
                }
                acc.iter_mut().for_each(|a| *a = 1.0 / *a);
                for row in block.chunks_exact_mut(inner) {
                    row.iter_mut().zip(&acc).for_each(|(z, &r)| *z *= r);
                }
            }
        }
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(value, Op::Softmax { x: xi, outer, n, inner }, &[xi]))
    }

    /// Layer norm over the trailing axis: `gain · (x − mean)/sqrt(var + eps) + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: Real) -> Result<Var> {
        let (xi, gi, bi) = (self.idx(x)?, self.idx(gain)?, self.idx(bias)?);
        if eps <= 0.0 {
            return Err(Error::Config(format!("layer norm eps must be positive, got {eps}")));
        }
        let shape = self.nodes[xi].value.shape().to_vec();
        let c = *shape
            .last()
            .ok_or_else(|| Error::Dimension("layer norm of rank-0 tensor".into()))?;
        for (name, i) in [("gain", gi), ("bias", bi)] {
            if self.nodes[i].value.shape() != [c] {
                return Err(Error::Dimension(format!(
                    "layer norm {name} {:?} does not match width {c}",
                    self.nodes[i].value.shape()
                )));
            }
        }
        let xv = self.nodes[xi].value.data();
        let (gv, bv) = (self.nodes[gi].value.data(), self.nodes[bi].value.data());
        let rows = xv.len() / c;
        let mut out = vec![0.0; xv.len()];
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = &xv[r * c..][..c];
            let mean = row.iter().sum::<Real>() / c as Real;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<Real>() / c as Real;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[r * c + j] = h;
                out[r * c + j] = gv[j] * h + bv[j];
            }
        }
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x: xi,
                gain: gi,
                bias: bi,
                xhat,
                rstd,
            },
            &[xi, gi, bi],
        ))
    }

    /// Normalizes each row of `x: [R, N]` to sum to one. Rows whose total mass is
    /// below [`EMPTY_ROW_MASS`] become uniform `1/N`.
    pub fn row_normalize(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let shape = self.nodes[xi].value.shape().to_vec();
        if shape.len() != 2 || shape[1] == 0 {
            return Err(Error::Dimension(format!(
                "row_normalize expects a non-empty [R, N] matrix, got {shape:?}"
            )));
        }
        let n = shape[1];
        let xv = self.nodes[xi].value.data();
        let mut out = vec![0.0; xv.len()];
        let mut sums = Vec::with_capacity(shape[0]);
        for (row, dst) in xv.chunks(n).zip(out.chunks_mut(n)) {
            let s: Real = row.iter().sum();
            sums.push(s);
            if s < EMPTY_ROW_MASS {
                dst.fill(1.0 / n as Real);
            } else {
                dst.iter_mut().zip(row).for_each(|(d, v)| *d = v / s);
            }
        }
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(value, Op::RowNormalize { x: xi, sums }, &[xi]))
    }

    // ---- attention ------------------------------------------------------

    /// Kernelized attention with `φ = elu_plus_one`:
    /// `out_i = φ(q_i)·Σ_j φ(k_j)ᵀ v_j / (φ(q_i)·Σ_j φ(k_j))`.
    ///
    /// Shapes: `q: [.., L, d]`, `k: [.., S, d]`, `v: [.., S, dv]` with equal batch dims.
    /// Scaled dot-product attention `softmax(q·kᵀ/√d)·v` over the two trailing
    /// axes of `q: [..., L, D]`, `k: [..., S, D]`, `v: [..., S, Dv]`.
    pub fn softmax_attention(&mut self, q: Var, k: Var, v: Var) -> Result<Var> {
        let (qi, ki, vi) = (self.idx(q)?, self.idx(k)?, self.idx(v)?);
        let AttentionDims {
            batch,
            l,
            s,
            d,
            dv,
            out_shape,
        } = self.attention_dims(qi, ki, vi)?;
        let (qv, kv, vv) = (
            self.nodes[qi].value.data(),
            self.nodes[ki].value.data(),
            self.nodes[vi].value.data(),
        );
        let scale = 1.0 / (d as Real).sqrt();
        let mut probs = vec![0.0; batch * l * s];
        let mut out = vec![0.0; batch * l * dv];
        for t in 0..batch {
            let p = &mut probs[t * l * s..][..l * s];
            let (qt, kt) = (&qv[t * l * d..][..l * d], &kv[t * s * d..][..s * d]);
            kernels::gemm(l, d, s, qt, (d, 1), kt, (1, d), 0.0, p);
            for row in p.chunks_exact_mut(s) {
                softmax_row(row, scale);
            }
            let vt = &vv[t * s * dv..][..s * dv];
            kernels::gemm(l, s, dv, p, (s, 1), vt, (dv, 1), 0.0, &mut out[t * l * dv..][..l * dv]);
        }
        let value = Tensor::new(&out_shape, out)?;
        Ok(self.push(
            value,
            Op::SoftmaxAttention {
                q: qi,
                k: ki,
                v: vi,
                batch,
                l,
                s,
                d,
                dv,
                probs,
            },
            &[qi, ki, vi],
        ))
    }

    fn attention_dims(&self, qi: usize, ki: usize, vi: usize) -> Result<AttentionDims> {
        let (sq, sk, sv) = (
            self.nodes[qi].value.shape(),
            self.nodes[ki].value.shape(),
            self.nodes[vi].value.shape(),
        );
        let r = sq.len();
        if r < 2
            || sk.len() != r
            || sv.len() != r
            || sq[..r - 2] != sk[..r - 2]
            || sq[..r - 2] != sv[..r - 2]
            || sq[r - 1] != sk[r - 1]
            || sk[r - 2] != sv[r - 2]
        {
            return Err(Error::Dimension(format!(
                "attention shapes q {sq:?}, k {sk:?}, v {sv:?} are incompatible"
            )));
        }
        let mut out_shape = sq[..r - 2].to_vec();
        out_shape.extend([sq[r - 2], sv[r - 1]]);
        Ok(AttentionDims {
            batch: sq[..r - 2].iter().product(),
            l: sq[r - 2],
            s: sk[r - 2],
            d: sq[r - 1],
            dv: sv[r - 1],
            out_shape,
        })
    }

    pub fn linear_attention(&mut self, q: Var, k: Var, v: Var) -> Result<Var> {
        let (qi, ki, vi) = (self.idx(q)?, self.idx(k)?, self.idx(v)?);
        let AttentionDims {
            batch,
            l,
            s,
            d,
            dv,
            out_shape,
        } = self.attention_dims(qi, ki, vi)?;
        let (qv, kv, vv) = (
            self.nodes[qi].value.data(),
            self.nodes[ki].value.data(),
            self.nodes[vi].value.data(),
        );
        let phi = |t: Real| if t > 0.0 { t + 1.0 } else { t.exp() };
        let mut out = vec![0.0; batch * l * dv];
        for t in 0..batch {
            let qf: Vec<Real> = qv[t * l * d..][..l * d].iter().map(|&x| phi(x)).collect();
            let kf: Vec<Real> = kv[t * s * d..][..s * d].iter().map(|&x| phi(x)).collect();
            let vt = &vv[t * s * dv..][..s * dv];
            let (kvm, ks) = linear_attention_state(&kf, vt, s, d, dv);
            let o = &mut out[t * l * dv..][..l * dv];
            kernels::gemm(l, d, dv, &qf, (d, 1), &kvm, (dv, 1), 0.0, o);
            for i in 0..l {
                let den: Real = (0..d).map(|c| qf[i * d + c] * ks[c]).sum();
                o[i * dv..][..dv].iter_mut().for_each(|x| *x /= den);
            }
        }
        let value = Tensor::new(&out_shape, out)?;
        Ok(self.push(
            value,
            Op::LinearAttention {
                q: qi,
                k: ki,
                v: vi,
                batch,
                l,
                s,
                d,
                dv,
            },
            &[qi, ki, vi],
        ))
    }

    // ---- fused losses ---------------------------------------------------

    /// α-balanced sigmoid focal loss over anchors, summed and divided by
    /// `max(N_pos, 1)`.
    ///
    /// `logits: [A·K, H, W]`, anchor `(y·W + x)·A + a` reads channel `a·K + k`.
    pub fn focal_loss(
        &mut self,
        logits: Var,
        labels: &[AnchorLabel],
        classes: usize,
        alpha: Real,
        gamma: Real,
    ) -> Result<Var> {
        let li = self.idx(logits)?;
        let shape = self.nodes[li].value.shape();
        let (hw, channels) = spatial(shape)?;
        if classes == 0 || channels % classes != 0 || labels.len() != hw * channels / classes {
            return Err(Error::Dimension(format!(
                "{} anchor labels do not fit logits {shape:?} with {classes} classes",
                labels.len()
            )));
        }
        let anchors_per_loc = channels / classes;
        let npos = labels
            .iter()
            .filter(|l| matches!(l, AnchorLabel::Positive(_)))
            .count();
        let norm = npos.max(1) as Real;
        let z = self.nodes[li].value.data();
        let mut total = 0.0;
        for (i, label) in labels.iter().enumerate() {
            let (p_loc, a) = (i / anchors_per_loc, i % anchors_per_loc);
            let class = match *label {
                AnchorLabel::Ignore => continue,
                AnchorLabel::Positive(c) if c >= classes => {
                    return Err(Error::Bounds {
                        what: "classes",
                        index: c,
                        len: classes,
                    })
                }
                AnchorLabel::Positive(c) => Some(c),
                AnchorLabel::Negative => None,
            };
            for kc in 0..classes {
                let p = sigmoid(z[(a * classes + kc) * hw + p_loc])
                    .clamp(PROB_EPS, 1.0 - PROB_EPS);
                total += focal_term(p, class == Some(kc), alpha, gamma).0;
            }
        }
        let value = Tensor::scalar(total / norm);
        Ok(self.push(
            value,
            Op::FocalLoss {
                logits: li,
                labels: labels.to_vec(),
                classes,
                alpha,
                gamma,
                norm,
            },
            &[li],
        ))
    }

    /// Smooth-L1 over the regression channels of positive anchors, summed over the
    /// `regs` dims and divided by `max(N_pos, 1)`.
    ///
    /// `pred: [A·R, H, W]`; each target is `(anchor index, R values)`.
    pub fn smooth_l1(
        &mut self,
        pred: Var,
        targets: &[(usize, Vec<Real>)],
        regs: usize,
        beta: Real,
    ) -> Result<Var> {
        let pi = self.idx(pred)?;
        let shape = self.nodes[pi].value.shape();
        let (hw, channels) = spatial(shape)?;
        if regs == 0 || channels % regs != 0 {
            return Err(Error::Dimension(format!(
                "prediction {shape:?} is not a multiple of {regs} regression dims"
            )));
        }
        if beta <= 0.0 {
            return Err(Error::Config(format!("smooth-L1 beta must be positive, got {beta}")));
        }
        let apl = channels / regs;
        let pv = self.nodes[pi].value.data();
        let mut total = 0.0;
        for (anchor, t) in targets {
            if t.len() != regs {
                return Err(Error::Dimension(format!(
                    "regression target has {} dims, expected {regs}",
                    t.len()
                )));
            }
            if *anchor >= hw * apl {
                return Err(Error::Bounds {
                    what: "anchors",
                    index: *anchor,
                    len: hw * apl,
                });
            }
            let (p_loc, a) = (anchor / apl, anchor % apl);
            for (r, tv) in t.iter().enumerate() {
                total += smooth_l1_term(pv[(a * regs + r) * hw + p_loc] - tv, beta).0;
            }
        }
        let norm = targets.len().max(1) as Real;
        let value = Tensor::scalar(total / norm);
        Ok(self.push(
            value,
            Op::SmoothL1 {
                pred: pi,
                targets: targets.to_vec(),
                regs,
                beta,
                norm,
            },
            &[pi],
        ))
    }

    /// Focal-modulated cross-entropy over depth bins: per supervised pixel with
    /// ground-truth bin `b`, `−(1 − p_b)^γ · ln p_b`, averaged over supervised pixels.
    ///
    /// `logits: [D, H, W]`; `bins[y·W + x]` is `None` for pixels without depth.
    /// Returns the loss and the number of supervised pixels.
    pub fn depth_loss(
        &mut self,
        logits: Var,
        bins: &[Option<usize>],
        gamma: Real,
    ) -> Result<(Var, usize)> {
        let li = self.idx(logits)?;
        let shape = self.nodes[li].value.shape();
        let (hw, depth_bins) = spatial(shape)?;
        if bins.len() != hw {
            return Err(Error::Dimension(format!(
                "{} depth targets for logits {shape:?}",
                bins.len()
            )));
        }
        let z = self.nodes[li].value.data();
        let mut probs = vec![0.0; depth_bins];
        let mut total = 0.0;
        let mut supervised = 0usize;
        for (i, bin) in bins.iter().enumerate() {
            let Some(b) = *bin else { continue };
            if b >= depth_bins {
                return Err(Error::Bounds {
                    what: "depth bins",
                    index: b,
                    len: depth_bins,
                });
            }
            softmax_slice((0..depth_bins).map(|d| z[d * hw + i]), &mut probs);
            let p = probs[b].max(PROB_EPS);
            total += -(1.0 - p).powf(gamma) * p.ln();
            supervised += 1;
        }
        let norm = supervised.max(1) as Real;
        let value = Tensor::scalar(total / norm);
        let var = self.push(
            value,
            Op::DepthLoss {
                logits: li,
                bins: bins.to_vec(),
                gamma,
                norm,
            },
            &[li],
        );
        Ok((var, supervised))
    }

    // ---- reverse pass ---------------------------------------------------

    /// Populates gradients of the scalar `loss` with respect to every differentiable
    /// leaf reachable from it. A second call without [`Tape::reset_grads`] fails.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let li = self.idx(loss)?;
        if self.grads.is_some() {
            return Err(Error::Tape(
                "backward already ran on this tape; reset gradients first".into(),
            ));
        }
        if self.nodes[li].value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[li].value.shape()
            )));
        }
        if !self.nodes[li].requires_grad {
            return Err(Error::Tape(
                "loss is detached: no differentiable leaf reaches it".into(),
            ));
        }
        let mut grads: Vec<Option<Vec<Real>>> = vec![None; self.nodes.len()];
        grads[li] = Some(vec![1.0]);
        for i in (0..=li).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let cs = self.node_backward(i, &g);
            for (target, contrib) in cs {
                if !self.nodes[target].requires_grad {
                    continue;
                }
                match &mut grads[target] {
                    Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, c)| *a += c),
                    slot @ None => *slot = Some(contrib),
                }
            }
        }
        self.grads = Some(grads);
        Ok(())
    }

    fn needs(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    fn data(&self, i: usize) -> &[Real] {
        self.nodes[i].value.data()
    }

    fn node_backward(&self, i: usize, g: &[Real]) -> Vec<(usize, Vec<Real>)> {
        let out = self.data(i);
        let mut res = Vec::new();
        match &self.nodes[i].op {
            Op::Leaf => {}
            &Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                shared_b,
            } => {
                let (av, bv) = (self.data(a), self.data(b));
                if self.needs(a) {
                    let mut da = vec![0.0; av.len()];
                    for t in 0..batch {
                        let bt = if shared_b { bv } else { &bv[t * k * n..] };
                        // da = g · bᵀ
                        kernels::gemm(
                            m,
                            n,
                            k,
                            &g[t * m * n..],
                            (n, 1),
                            bt,
                            (1, n),
                            0.0,
                            &mut da[t * m * k..],
                        );
                    }
                    res.push((a, da));
                }
                if self.needs(b) {
                    let mut db = vec![0.0; bv.len()];
                    if shared_b {
                        kernels::gemm(k, batch * m, n, av, (1, k), g, (n, 1), 0.0, &mut db);
                    } else {
                        for t in 0..batch {
                            kernels::gemm(
                                k,
                                m,
                                n,
                                &av[t * m * k..],
                                (1, k),
                                &g[t * m * n..],
                                (n, 1),
                                0.0,
                                &mut db[t * k * n..],
                            );
                        }
                    }
                    res.push((b, db));
                }
            }
            Op::Conv2d { x, w, geom } => {
                let (dx, dw) = kernels::conv2d_backward(
                    geom,
                    self.data(*x),
                    self.data(*w),
                    g,
                    self.needs(*x),
                    self.needs(*w),
                );
                res.extend(dx.map(|d| (*x, d)));
                res.extend(dw.map(|d| (*w, d)));
            }
            &Op::AddBias { x, b, axis } => {
                if self.needs(x) {
                    res.push((x, g.to_vec()));
                }
                if self.needs(b) {
                    let c = self.nodes[b].value.numel();
                    let mut db = vec![0.0; c];
                    match axis {
                        BiasAxis::Leading { inner } => {
                            for (ch, chunk) in g.chunks(inner).enumerate() {
                                db[ch] += chunk.iter().sum::<Real>();
                            }
                        }
                        BiasAxis::Trailing => {
                            for chunk in g.chunks(c) {
                                db.iter_mut().zip(chunk).for_each(|(d, v)| *d += v);
                            }
                        }
                    }
                    res.push((b, db));
                }
            }
            &Op::Add(a, b) => {
                res.push((a, g.to_vec()));
                res.push((b, g.to_vec()));
            }
            &Op::Sub(a, b) => {
                res.push((a, g.to_vec()));
                res.push((b, g.iter().map(|v| -v).collect()));
            }
            &Op::Mul(a, b) => {
                let (av, bv) = (self.data(a), self.data(b));
                if self.needs(a) {
                    res.push((a, g.iter().zip(bv).map(|(g, y)| g * y).collect()));
                }
                if self.needs(b) {
                    res.push((b, g.iter().zip(av).map(|(g, x)| g * x).collect()));
                }
            }
            &Op::Scale(x, s) => res.push((x, g.iter().map(|v| v * s).collect())),
            &Op::Relu(x) => res.push((
                x,
                g.iter()
                    .zip(self.data(x))
                    .map(|(g, &t)| if t > 0.0 { *g } else { 0.0 })
                    .collect(),
            )),
            &Op::Elu(x) | &Op::EluPlusOne(x) => res.push((
                x,
                g.iter()
                    .zip(self.data(x))
                    .map(|(g, &t)| g * elu_grad(t))
                    .collect(),
            )),
            &Op::Map { x, df } => res.push((
                x,
                g.iter().zip(self.data(x)).map(|(g, &t)| g * df(t)).collect(),
            )),
            &Op::Softmax { x, outer, n, inner } => {
                let mut dx = vec![0.0; g.len()];
                let mut dot = vec![0.0; inner];
                let len = n * inner;
                for o in (0..outer).filter(|_| len > 0) {
                    let (gb, ob) = (&g[o * len..][..len], &out[o * len..][..len]);
                    dot.iter_mut().for_each(|a| *a = 0.0);
                    for (gr, or) in gb.chunks_exact(inner).zip(ob.chunks_exact(inner)) {
                        for ((a, &gg), &oo) in dot.iter_mut().zip(gr).zip(or) {
                            *a += gg * oo;
                        }
                    }
                    let db = &mut dx[o * len..][..len];
                    for ((dr, gr), or) in db.chunks_exact_mut(inner).zip(gb.chunks_exact(inner)).zip(ob.chunks_exact(inner)) {
                        for (((d, &gg), &oo), &a) in dr.iter_mut().zip(gr).zip(or).zip(&dot) {
                            *d = oo * (gg - a);
                        }
                    }
                }
                res.push((x, dx));
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let gv = self.data(*gain);
                let c = gv.len();
                if self.needs(*x) {
                    let mut dx = vec![0.0; g.len()];
                    for (r, &rs) in rstd.iter().enumerate() {
                        let gr = &g[r * c..][..c];
                        let hr = &xhat[r * c..][..c];
                        let (mut s1, mut s2) = (0.0, 0.0);
                        for j in 0..c {
                            let dh = gr[j] * gv[j];
                            s1 += dh;
                            s2 += dh * hr[j];
                        }
                        let cn = c as Real;
                        for j in 0..c {
                            let dh = gr[j] * gv[j];
                            dx[r * c + j] = rs / cn * (cn * dh - s1 - hr[j] * s2);
                        }
                    }
                    res.push((*x, dx));
                }
                if self.needs(*gain) {
                    let mut dg = vec![0.0; c];
                    for (gr, hr) in g.chunks(c).zip(xhat.chunks(c)) {
                        dg.iter_mut().zip(gr.iter().zip(hr)).for_each(|(d, (g, h))| *d += g * h);
                    }
                    res.push((*gain, dg));
                }
                if self.needs(*bias) {
                    let mut db = vec![0.0; c];
                    for gr in g.chunks(c) {
                        db.iter_mut().zip(gr).for_each(|(d, g)| *d += g);
                    }
                    res.push((*bias, db));
                }
            }
            Op::Concat { inputs, sizes } => {
                let inner = g.len() / sizes.iter().sum::<usize>().max(1);
                let mut offset = 0;
                for (&inp, &sz) in inputs.iter().zip(sizes) {
                    if self.needs(inp) {
                        res.push((inp, g[offset..offset + sz * inner].to_vec()));
                    }
                    offset += sz * inner;
                }
            }
            &Op::Reshape(x) => res.push((x, g.to_vec())),
            Op::Permute { x, perm } => {
                let out_shape = self.nodes[i].value.shape();
                let inv = kernels::inverse_permutation(perm);
                res.push((*x, kernels::permute(g, out_shape, &inv)));
            }
            &Op::Sum(x) => res.push((x, vec![g[0]; self.nodes[x].value.numel()])),
            &Op::Mean(x) => {
                let n = self.nodes[x].value.numel();
                res.push((x, vec![g[0] / n.max(1) as Real; n]));
            }
            Op::RowNormalize { x, sums } => {
                let n = self.nodes[*x].value.shape()[1];
                let mut dx = vec![0.0; g.len()];
                for (r, &s) in sums.iter().enumerate() {
                    if s < EMPTY_ROW_MASS {
                        continue;
                    }
                    let gr = &g[r * n..][..n];
                    let or = &out[r * n..][..n];
                    let dot: Real = gr.iter().zip(or).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        dx[r * n + j] = (gr[j] - dot) / s;
                    }
                }
                res.push((*x, dx));
            }
            Op::SoftmaxAttention {
                q,
                k,
                v,
                batch,
                l,
                s,
                d,
                dv,
                probs,
            } => {
                let (q, k, v, batch, l, s, d, dv) = (*q, *k, *v, *batch, *l, *s, *d, *dv);
                let (qv, kv, vv) = (self.data(q), self.data(k), self.data(v));
                let scale = 1.0 / (d as Real).sqrt();
                let mut dq = vec![0.0; qv.len()];
                let mut dk = vec![0.0; kv.len()];
                let mut dvv = vec![0.0; vv.len()];
                let mut dz = vec![0.0; l * s];
                for t in 0..batch {
                    let p = &probs[t * l * s..][..l * s];
                    let gt = &g[t * l * dv..][..l * dv];
                    let (qt, kt, vt) = (&qv[t * l * d..][..l * d], &kv[t * s * d..][..s * d], &vv[t * s * dv..][..s * dv]);
                    // dP = dO·vᵀ, then the softmax Jacobian row by row.
                    kernels::gemm(l, dv, s, gt, (dv, 1), vt, (1, dv), 0.0, &mut dz);
                    for (zr, pr) in dz.chunks_exact_mut(s).zip(p.chunks_exact(s)) {
                        let dot: Real = zr.iter().zip(pr).map(|(a, b)| a * b).sum();
                        for (z, &pp) in zr.iter_mut().zip(pr) {
                            *z = pp * (*z - dot) * scale;
                        }
                    }
                    kernels::gemm(l, s, d, &dz, (s, 1), kt, (d, 1), 0.0, &mut dq[t * l * d..][..l * d]);
                    kernels::gemm(s, l, d, &dz, (1, s), qt, (d, 1), 0.0, &mut dk[t * s * d..][..s * d]);
                    kernels::gemm(s, l, dv, p, (1, s), gt, (dv, 1), 0.0, &mut dvv[t * s * dv..][..s * dv]);
                }
                if self.needs(q) {
                    res.push((q, dq));
                }
                if self.needs(k) {
                    res.push((k, dk));
                }
                if self.needs(v) {
                    res.push((v, dvv));
                }
            }
            &Op::LinearAttention {
                q,
                k,
                v,
                batch,
                l,
                s,
                d,
                dv,
            } => {
                let (qv, kv, vv) = (self.data(q), self.data(k), self.data(v));
                let mut dq = vec![0.0; qv.len()];
                let mut dk = vec![0.0; kv.len()];
                let mut dvv = vec![0.0; vv.len()];
                let phi = |t: Real| if t > 0.0 { t + 1.0 } else { t.exp() };
                for t in 0..batch {
                    let qt = &qv[t * l * d..][..l * d];
                    let kt = &kv[t * s * d..][..s * d];
                    let vt = &vv[t * s * dv..][..s * dv];
                    let ot = &out[t * l * dv..][..l * dv];
                    let gt = &g[t * l * dv..][..l * dv];
                    let qf: Vec<Real> = qt.iter().map(|&x| phi(x)).collect();
                    let kf: Vec<Real> = kt.iter().map(|&x| phi(x)).collect();
                    let (kvm, ks) = linear_attention_state(&kf, vt, s, d, dv);
                    // num_i = qf_i · KV, den_i = qf_i · ks, out_i = num_i / den_i
                    let mut dnum = vec![0.0; l * dv];
                    let mut dden = vec![0.0; l];
                    for row in 0..l {
                        let den: Real = (0..d).map(|c| qf[row * d + c] * ks[c]).sum();
                        let gr = &gt[row * dv..][..dv];
                        let or = &ot[row * dv..][..dv];
                        dden[row] = -gr.iter().zip(or).map(|(a, b)| a * b).sum::<Real>() / den;
                        for c in 0..dv {
                            dnum[row * dv + c] = gr[c] / den;
                        }
                    }
                    // dqf = dnum · KVᵀ + dden ⊗ ks
                    let mut dqf = vec![0.0; l * d];
                    kernels::gemm(l, dv, d, &dnum, (dv, 1), &kvm, (1, dv), 0.0, &mut dqf);
                    for row in 0..l {
                        for c in 0..d {
                            dqf[row * d + c] += dden[row] * ks[c];
                        }
                    }
                    // dKV = qfᵀ · dnum ; dks = Σ_i dden_i qf_i
                    let mut dkv = vec![0.0; d * dv];
                    kernels::gemm(d, l, dv, &qf, (1, d), &dnum, (dv, 1), 0.0, &mut dkv);
                    let mut dks = vec![0.0; d];
                    for row in 0..l {
                        for c in 0..d {
                            dks[c] += dden[row] * qf[row * d + c];
                        }
                    }
                    // dkf = v · dKVᵀ + 1 ⊗ dks ; dv = kf · dKV
                    let mut dkf = vec![0.0; s * d];
                    kernels::gemm(s, dv, d, vt, (dv, 1), &dkv, (1, dv), 0.0, &mut dkf);
                    for row in 0..s {
                        for c in 0..d {
                            dkf[row * d + c] += dks[c];
                        }
                    }
                    kernels::gemm(
                        s,
                        d,
                        dv,
                        &kf,
                        (d, 1),
                        &dkv,
                        (dv, 1),
                        0.0,
                        &mut dvv[t * s * dv..],
                    );
                    for (j, (&x, &gf)) in qt.iter().zip(&dqf).enumerate() {
                        dq[t * l * d + j] = gf * elu_grad(x);
                    }
                    for (j, (&x, &gf)) in kt.iter().zip(&dkf).enumerate() {
                        dk[t * s * d + j] = gf * elu_grad(x);
                    }
                }
                if self.needs(q) {
                    res.push((q, dq));
                }
                if self.needs(k) {
                    res.push((k, dk));
                }
                if self.needs(v) {
                    res.push((v, dvv));
                }
            }
            Op::FocalLoss {
                logits,
                labels,
                classes,
                alpha,
                gamma,
                norm,
            } => {
                let z = self.data(*logits);
                let hw = self.nodes[*logits].value.shape()[1..].iter().product::<usize>();
                let apl = self.nodes[*logits].value.shape()[0] / classes;
                let mut dz = vec![0.0; z.len()];
                let scale = g[0] / norm;
                for (ia, label) in labels.iter().enumerate() {
                    let (p_loc, a) = (ia / apl, ia % apl);
                    let class = match *label {
                        AnchorLabel::Ignore => continue,
                        AnchorLabel::Positive(c) => Some(c),
                        AnchorLabel::Negative => None,
                    };
                    for kc in 0..*classes {
                        let at = (a * classes + kc) * hw + p_loc;
                        let raw = sigmoid(z[at]);
                        if !(PROB_EPS..=1.0 - PROB_EPS).contains(&raw) {
                            continue;
                        }
                        let (_, dp) = focal_term(raw, class == Some(kc), *alpha, *gamma);
                        dz[at] = scale * dp * raw * (1.0 - raw);
                    }
                }
                res.push((*logits, dz));
            }
            Op::SmoothL1 {
                pred,
                targets,
                regs,
                beta,
                norm,
            } => {
                let pv = self.data(*pred);
                let hw = self.nodes[*pred].value.shape()[1..].iter().product::<usize>();
                let apl = self.nodes[*pred].value.shape()[0] / regs;
                let mut dp = vec![0.0; pv.len()];
                let scale = g[0] / norm;
                for (anchor, t) in targets {
                    let (p_loc, a) = (anchor / apl, anchor % apl);
                    for (r, tv) in t.iter().enumerate() {
                        let at = (a * regs + r) * hw + p_loc;
                        dp[at] += scale * smooth_l1_term(pv[at] - tv, *beta).1;
                    }
                }
                res.push((*pred, dp));
            }
            Op::DepthLoss {
                logits,
                bins,
                gamma,
                norm,
            } => {
                let z = self.data(*logits);
                let shape = self.nodes[*logits].value.shape();
                let (depth_bins, hw) = (shape[0], shape[1..].iter().product::<usize>());
                let mut dz = vec![0.0; z.len()];
                let mut probs = vec![0.0; depth_bins];
                let scale = g[0] / norm;
                for (i, bin) in bins.iter().enumerate() {
                    let Some(b) = *bin else { continue };
                    softmax_slice((0..depth_bins).map(|d| z[d * hw + i]), &mut probs);
                    let p = probs[b];
                    if p < PROB_EPS {
                        continue;
                    }
                    let q = 1.0 - p;
                    // d/dp of −q^γ ln p
                    let dterm = pow_grad(q, *gamma) * p.ln() - q.powf(*gamma) / p;
                    for (d, &pd) in probs.iter().enumerate() {
                        let dpdz = if d == b { p * (1.0 - p) } else { -p * pd };
                        dz[d * hw + i] = scale * dterm * dpdz;
                    }
                }
                res.push((*logits, dz));
            }
        }
        res
    }
}

/// `(Σ_j φ(k_j)ᵀ v_j, Σ_j φ(k_j))` for one batch slice.
fn linear_attention_state(
    kf: &[Real],
    v: &[Real],
    s: usize,
    d: usize,
    dv: usize,
) -> (Vec<Real>, Vec<Real>) {
    let mut kvm = vec![0.0; d * dv];
    kernels::gemm(d, s, dv, kf, (1, d), v, (dv, 1), 0.0, &mut kvm);
    let mut ks = vec![0.0; d];
    for row in kf.chunks(d) {
        ks.iter_mut().zip(row).for_each(|(a, b)| *a += b);
    }
    (kvm, ks)
}

/// `(H·W, channels)` of a `[channels, H, W]` map.
fn spatial(shape: &[usize]) -> Result<(usize, usize)> {
    if shape.len() != 3 {
        return Err(Error::Dimension(format!(
            "expected a [C, H, W] map, got {shape:?}"
        )));
    }
    Ok((shape[1] * shape[2], shape[0]))
}

/// Named parameter handles registered on one tape.
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub(crate) fn new(vars: BTreeMap<String, Var>) -> Self {
        BoundParams { vars }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}
