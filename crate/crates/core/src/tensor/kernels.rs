//! Raw numeric kernels over row-major slices. No tape bookkeeping here.
//!
//! Every kernel is single-threaded with a fixed accumulation order, so results
//! are bit-identical regardless of how callers schedule work across threads.

use super::Real;
use crate::error::{Error, Result};

/// `c = a · b + beta · c` for row-major `a: [m, k]`, `b: [k, n]`, with explicit
/// strides so transposed operands need no copy.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[Real],
    (rsa, csa): (usize, usize),
    b: &[Real],
    (rsb, csb): (usize, usize),
    beta: Real,
    c: &mut [Real],
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(a.len() >= (m - 1) * rsa + k.saturating_sub(1) * csa + usize::from(k > 0));
    debug_assert!(b.len() >= k.saturating_sub(1) * rsb + (n - 1) * csb + usize::from(k > 0));
    debug_assert!(c.len() >= m * n);
    // SAFETY: the asserts above bound every strided access inside the slices;
    // `c` is exclusively borrowed and does not alias `a` or `b`.
    unsafe {
        #[cfg(not(feature = "f32"))]
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
        #[cfg(feature = "f32")]
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dParams {
    pub stride: usize,
    pub pad: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl Default for Conv2dParams {
    fn default() -> Self {
        Conv2dParams {
            stride: 1,
            pad: 0,
            dilation: 1,
            groups: 1,
        }
    }
}

impl Conv2dParams {
    /// Stride-1 convolution that preserves spatial extent for a `k`×`k` kernel.
    pub fn same(k: usize, dilation: usize) -> Self {
        Conv2dParams {
            stride: 1,
            pad: dilation * (k - 1) / 2,
            dilation,
            groups: 1,
        }
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }
}

/// `(extent + 2·pad − dilation·(k−1) − 1) / stride + 1`, or a geometry error when
/// the window does not fit.
pub fn conv_output_extent(
    extent: usize,
    k: usize,
    stride: usize,
    pad: usize,
    dilation: usize,
) -> Result<usize> {
    let padded = (extent + 2 * pad) as isize;
    let span = (dilation * (k - 1) + 1) as isize;
    if stride == 0 || padded < span {
        return Err(Error::Geometry(format!(
            "kernel span {span} does not fit extent {extent} with pad {pad}"
        )));
    }
    Ok(((padded - span) as usize) / stride + 1)
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeometry {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub h_out: usize,
    pub w_out: usize,
    pub p: Conv2dParams,
}

impl ConvGeometry {
    pub fn new(x_shape: &[usize], w_shape: &[usize], p: Conv2dParams) -> Result<Self> {
        if x_shape.len() != 3 || w_shape.len() != 4 {
            return Err(Error::Dimension(format!(
                "conv2d expects x [C,H,W] and w [Co,Ci/g,k,k], got {x_shape:?} and {w_shape:?}"
            )));
        }
        let (c_in, h, w) = (x_shape[0], x_shape[1], x_shape[2]);
        let (c_out, cg, k, k2) = (w_shape[0], w_shape[1], w_shape[2], w_shape[3]);
        if p.groups == 0 || c_in % p.groups != 0 || c_out % p.groups != 0 {
            return Err(Error::Config(format!(
                "groups {} must divide input channels {c_in} and output channels {c_out}",
                p.groups
            )));
        }
        if k != k2 || k % 2 == 0 {
            return Err(Error::Config(format!("kernel must be square and odd, got {k}x{k2}")));
        }
        if p.dilation == 0 {
            return Err(Error::Config("dilation must be at least 1".into()));
        }
        if cg != c_in / p.groups {
            return Err(Error::Dimension(format!(
                "weight {w_shape:?} expects {} channels per group, input has {}",
                cg,
                c_in / p.groups
            )));
        }
        let h_out = conv_output_extent(h, k, p.stride, p.pad, p.dilation)?;
        let w_out = conv_output_extent(w, k, p.stride, p.pad, p.dilation)?;
        Ok(ConvGeometry {
            c_in,
            h,
            w,
            c_out,
            k,
            h_out,
            w_out,
            p,
        })
    }

    fn cg(&self) -> usize {
        self.c_in / self.p.groups
    }

    fn cog(&self) -> usize {
        self.c_out / self.p.groups
    }

    fn patch(&self) -> usize {
        self.cg() * self.k * self.k
    }

    fn n_out(&self) -> usize {
        self.h_out * self.w_out
    }

    /// Source coordinate for output position `o` and kernel tap `t`, if inside the input.
    #[inline]
    fn src(&self, o: usize, t: usize, extent: usize) -> Option<usize> {
        let s = (o * self.p.stride + t * self.p.dilation) as isize - self.p.pad as isize;
        (s >= 0 && (s as usize) < extent).then_some(s as usize)
    }

    fn im2col(&self, x: &[Real], group: usize, col: &mut [Real]) {
        let (k, n) = (self.k, self.n_out());
        let base = group * self.cg();
        for c in 0..self.cg() {
            let plane = &x[(base + c) * self.h * self.w..][..self.h * self.w];
            for ki in 0..k {
                for kj in 0..k {
                    let row = &mut col[((c * k + ki) * k + kj) * n..][..n];
                    for oy in 0..self.h_out {
                        let dst = &mut row[oy * self.w_out..][..self.w_out];
                        match self.src(oy, ki, self.h) {
                            None => dst.fill(0.0),
                            Some(iy) => {
                                let src_row = &plane[iy * self.w..][..self.w];
                                for (ox, d) in dst.iter_mut().enumerate() {
                                    *d = match self.src(ox, kj, self.w) {
                                        Some(ix) => src_row[ix],
                                        None => 0.0,
                                    };
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im_add(&self, col: &[Real], group: usize, dx: &mut [Real]) {
        let (k, n) = (self.k, self.n_out());
        let base = group * self.cg();
        for c in 0..self.cg() {
            let plane = &mut dx[(base + c) * self.h * self.w..][..self.h * self.w];
            for ki in 0..k {
                for kj in 0..k {
                    let row = &col[((c * k + ki) * k + kj) * n..][..n];
                    for oy in 0..self.h_out {
                        let Some(iy) = self.src(oy, ki, self.h) else { continue };
                        let src = &row[oy * self.w_out..][..self.w_out];
                        let dst_row = &mut plane[iy * self.w..][..self.w];
                        for (ox, &g) in src.iter().enumerate() {
                            if let Some(ix) = self.src(ox, kj, self.w) {
                                dst_row[ix] += g;
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward(g: &ConvGeometry, x: &[Real], w: &[Real]) -> Vec<Real> {
    let (n, patch, cog) = (g.n_out(), g.patch(), g.cog());
    let mut out = vec![0.0; g.c_out * n];
    let mut col = vec![0.0; patch * n];
    for group in 0..g.p.groups {
        g.im2col(x, group, &mut col);
        let wg = &w[group * cog * patch..][..cog * patch];
        gemm(
            cog,
            patch,
            n,
            wg,
            (patch, 1),
            &col,
            (n, 1),
            0.0,
            &mut out[group * cog * n..][..cog * n],
        );
    }
    out
}

/// Returns `(dx, dw)` for upstream gradient `gout: [C_out, H_out·W_out]`.
pub(crate) fn conv2d_backward(
    g: &ConvGeometry,
    x: &[Real],
    w: &[Real],
    gout: &[Real],
    need_dx: bool,
    need_dw: bool,
) -> (Option<Vec<Real>>, Option<Vec<Real>>) {
    let (n, patch, cog) = (g.n_out(), g.patch(), g.cog());
    let mut dx = need_dx.then(|| vec![0.0; g.c_in * g.h * g.w]);
    let mut dw = need_dw.then(|| vec![0.0; w.len()]);
    let mut col = vec![0.0; patch * n];
    for group in 0..g.p.groups {
        let go = &gout[group * cog * n..][..cog * n];
        if let Some(dw) = dw.as_mut() {
            g.im2col(x, group, &mut col);
            // dW_g = gout_g · colᵀ
            gemm(
                cog,
                n,
                patch,
                go,
                (n, 1),
                &col,
                (1, n),
                0.0,
                &mut dw[group * cog * patch..][..cog * patch],
            );
        }
        if let Some(dx) = dx.as_mut() {
            // dcol = W_gᵀ · gout_g
            let wg = &w[group * cog * patch..][..cog * patch];
            gemm(patch, cog, n, wg, (1, patch), go, (n, 1), 0.0, &mut col);
            g.col2im_add(&col, group, dx);
        }
    }
    (dx, dw)
}

/// Copies `x` (with `shape`) into a new buffer laid out as `shape` permuted by `perm`.
pub(crate) fn permute(x: &[Real], shape: &[usize], perm: &[usize]) -> Vec<Real> {
    let rank = shape.len();
    let in_strides = super::strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(x.len());
    if x.is_empty() {
        return out;
    }
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    loop {
        out.push(x[offset]);
        let mut axis = rank;
        loop {
            if axis == 0 {
                return out;
            }
            axis -= 1;
            idx[axis] += 1;
            offset += src_strides[axis];
            if idx[axis] < out_shape[axis] {
                break;
            }
            offset -= src_strides[axis] * idx[axis];
            idx[axis] = 0;
        }
    }
}

pub(crate) fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}
