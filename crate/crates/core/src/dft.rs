//! Depth-guided transformer fusion: multi-head attention kernels, encoder and
//! decoder layers, and depth position mapping.
//!
//! Sequences are `[B, L, C]`. Feature maps enter via [`flatten`] and leave via
//! [`unflatten`].

use std::str::FromStr;

use crate::error::{Error, Result};
use crate::nn;
use crate::tensor::{BoundParams, Conv2dParams, Initializer, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionKernel {
    /// ELU+1 feature-map attention, linear in sequence length.
    Linear,
    /// `softmax(q·kᵀ/√d)·v`.
    Softmax,
}

impl FromStr for AttentionKernel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(AttentionKernel::Linear),
            "softmax" => Ok(AttentionKernel::Softmax),
            _ => Err(Error::Config(format!(
                "attention kernel must be `linear` or `softmax`, got `{s}`"
            ))),
        }
    }
}

impl AttentionKernel {
    pub fn as_str(self) -> &'static str {
        match self {
            AttentionKernel::Linear => "linear",
            AttentionKernel::Softmax => "softmax",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DftConfig {
    pub width: usize,
    pub heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub ffn_hidden: usize,
    pub encoder_attention: AttentionKernel,
    pub decoder_attention: AttentionKernel,
}

impl Default for DftConfig {
    fn default() -> Self {
        DftConfig {
            width: 64,
            heads: 4,
            enc_layers: 2,
            dec_layers: 2,
            ffn_hidden: 128,
            encoder_attention: AttentionKernel::Linear,
            decoder_attention: AttentionKernel::Softmax,
        }
    }
}

impl DftConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.width == 0 || self.width % self.heads != 0 {
            return Err(Error::Config(format!(
                "dft.width {} must be a positive multiple of dft.heads {}",
                self.width, self.heads
            )));
        }
        if self.ffn_hidden == 0 {
            return Err(Error::Config("dft FFN hidden width must be positive".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    pub fn init_attention(&self, prefix: &str, init: &mut Initializer) {
        for proj in ["q", "k", "v", "o"] {
            init.linear(&format!("{prefix}.{proj}"), self.width, self.width);
        }
    }

    fn init_ffn(&self, prefix: &str, init: &mut Initializer) {
        init.uniform(format!("{prefix}.w1"), &[self.width, self.ffn_hidden], self.width);
        init.uniform(format!("{prefix}.w2"), &[self.ffn_hidden, self.width], self.ffn_hidden);
    }

    pub fn init_encoder_layer(&self, prefix: &str, init: &mut Initializer) {
        self.init_attention(&format!("{prefix}.attn"), init);
        init.layer_norm(&format!("{prefix}.norm1"), self.width);
        self.init_ffn(&format!("{prefix}.ffn"), init);
        init.layer_norm(&format!("{prefix}.norm2"), self.width);
    }

    pub fn init_decoder_layer(&self, prefix: &str, init: &mut Initializer) {
        self.init_attention(&format!("{prefix}.self_attn"), init);
        init.layer_norm(&format!("{prefix}.norm1"), self.width);
        self.init_attention(&format!("{prefix}.cross_attn"), init);
        init.layer_norm(&format!("{prefix}.norm2"), self.width);
        self.init_ffn(&format!("{prefix}.ffn"), init);
        init.layer_norm(&format!("{prefix}.norm3"), self.width);
    }

    /// Depth position mapping: depthwise 3×3 + pointwise 1×1 conv and the bin
    /// embedding table `[bins, width]`.
    pub fn init_dpm(&self, prefix: &str, bins: usize, init: &mut Initializer) {
        init.conv(&format!("{prefix}.dw"), self.width, 1, 3);
        init.conv(&format!("{prefix}.pw"), self.width, self.width, 1);
        init.uniform(format!("{prefix}.embed"), &[bins, self.width], self.width);
    }

    pub fn init_params(&self, prefix: &str, bins: usize, init: &mut Initializer) {
        self.init_dpm(&format!("{prefix}.dpm"), bins, init);
        for i in 0..self.enc_layers {
            self.init_encoder_layer(&format!("{prefix}.enc.{i}"), init);
        }
        for i in 0..self.dec_layers {
            self.init_decoder_layer(&format!("{prefix}.dec.{i}"), init);
        }
    }
}

fn attention_dims(tape: &Tape, q: Var, k: Var, v: Var) -> Result<()> {
    let (sq, sk, sv) = (tape.shape(q), tape.shape(k), tape.shape(v));
    let r = sq.len();
    let ok = r >= 2
        && sk.len() == r
        && sv.len() == r
        && sq[..r - 2] == sk[..r - 2]
        && sk[..r - 2] == sv[..r - 2]
        && sq[r - 1] == sk[r - 1]
        && sk[r - 2] == sv[r - 2];
    if ok {
        Ok(())
    } else {
        Err(Error::Dimension(format!(
            "attention shapes q {sq:?}, k {sk:?}, v {sv:?} are incompatible"
        )))
    }
}

/// `softmax(q·kᵀ/√d)·v` over the last two axes.
pub fn scaled_dot_attention(tape: &mut Tape, q: Var, k: Var, v: Var) -> Result<Var> {
    attention_dims(tape, q, k, v)?;
    tape.softmax_attention(q, k, v)
}

/// ELU+1 kernelized attention; each output row is a convex combination of `v` rows.
pub fn linear_attention(tape: &mut Tape, q: Var, k: Var, v: Var) -> Result<Var> {
    attention_dims(tape, q, k, v)?;
    tape.linear_attention(q, k, v)
}

fn split_heads(tape: &mut Tape, x: Var, heads: usize) -> Result<Var> {
    let &[b, l, c] = tape.shape(x) else {
        return Err(Error::Dimension(format!(
            "expected a [B, L, C] sequence, got {:?}",
            tape.shape(x)
        )));
    };
    let r = tape.reshape(x, &[b, l, heads, c / heads])?;
    tape.permute(r, &[0, 2, 1, 3])
}

fn merge_heads(tape: &mut Tape, x: Var) -> Result<Var> {
    let &[b, h, l, d] = tape.shape(x) else {
        unreachable!("split_heads produced rank 4")
    };
    let p = tape.permute(x, &[0, 2, 1, 3])?;
    tape.reshape(p, &[b, l, h * d])
}

fn check_width(tape: &Tape, x: Var, width: usize) -> Result<()> {
    match tape.shape(x) {
        [_, _, c] if *c == width => Ok(()),
        s => Err(Error::Config(format!(
            "sequence {s:?} does not match configured width {width}"
        ))),
    }
}

/// Multi-head attention with queries from `x_q: [B, L, C]` and keys/values from
/// `x_kv: [B, S, C]`, followed by the output projection.
pub fn multi_head_attention(
    tape: &mut Tape,
    p: &BoundParams,
    prefix: &str,
    cfg: &DftConfig,
    kernel: AttentionKernel,
    x_q: Var,
    x_kv: Var,
) -> Result<Var> {
    check_width(tape, x_q, cfg.width)?;
    check_width(tape, x_kv, cfg.width)?;
    let q = nn::linear(tape, p, &format!("{prefix}.q"), x_q)?;
    let k = nn::linear(tape, p, &format!("{prefix}.k"), x_kv)?;
    let v = nn::linear(tape, p, &format!("{prefix}.v"), x_kv)?;
    let (q, k, v) = (
        split_heads(tape, q, cfg.heads)?,
        split_heads(tape, k, cfg.heads)?,
        split_heads(tape, v, cfg.heads)?,
    );
    let att = match kernel {
        AttentionKernel::Linear => linear_attention(tape, q, k, v)?,
        AttentionKernel::Softmax => scaled_dot_attention(tape, q, k, v)?,
    };
    let merged = merge_heads(tape, att)?;
    nn::linear(tape, p, &format!("{prefix}.o"), merged)
}

/// `ReLU(x·W1)·W2`.
fn ffn(tape: &mut Tape, p: &BoundParams, prefix: &str, x: Var) -> Result<Var> {
    let w1 = p.get(&format!("{prefix}.w1"))?;
    let w2 = p.get(&format!("{prefix}.w2"))?;
    let h = tape.matmul(x, w1)?;
    let h = tape.relu(h)?;
    tape.matmul(h, w2)
}

fn residual_norm(tape: &mut Tape, p: &BoundParams, norm: &str, x: Var, branch: Var) -> Result<Var> {
    let s = tape.add(x, branch)?;
    nn::layer_norm(tape, p, norm, s)
}

/// `x₁ = Norm(x + Attn(x))`, `out = Norm(x₁ + FFN(x₁))`.
pub fn encoder_layer(
    tape: &mut Tape,
    p: &BoundParams,
    prefix: &str,
    cfg: &DftConfig,
    x: Var,
) -> Result<Var> {
    let z = multi_head_attention(
        tape,
        p,
        &format!("{prefix}.attn"),
        cfg,
        cfg.encoder_attention,
        x,
        x,
    )?;
    let x1 = residual_norm(tape, p, &format!("{prefix}.norm1"), x, z)?;
    let f = ffn(tape, p, &format!("{prefix}.ffn"), x1)?;
    residual_norm(tape, p, &format!("{prefix}.norm2"), x1, f)
}

/// Self-attention over queries, cross-attention into `context`, then FFN; each
/// sub-block is residual and normalized. Query shape is preserved.
pub fn decoder_layer(
    tape: &mut Tape,
    p: &BoundParams,
    prefix: &str,
    cfg: &DftConfig,
    queries: Var,
    context: Var,
) -> Result<Var> {
    let s = multi_head_attention(
        tape,
        p,
        &format!("{prefix}.self_attn"),
        cfg,
        cfg.decoder_attention,
        queries,
        queries,
    )?;
    let q1 = residual_norm(tape, p, &format!("{prefix}.norm1"), queries, s)?;
    let c = multi_head_attention(
        tape,
        p,
        &format!("{prefix}.cross_attn"),
        cfg,
        cfg.decoder_attention,
        q1,
        context,
    )?;
    let q2 = residual_norm(tape, p, &format!("{prefix}.norm2"), q1, c)?;
    let f = ffn(tape, p, &format!("{prefix}.ffn"), q2)?;
    residual_norm(tape, p, &format!("{prefix}.norm3"), q2, f)
}

pub fn encode(tape: &mut Tape, p: &BoundParams, prefix: &str, cfg: &DftConfig, x: Var) -> Result<Var> {
    (0..cfg.enc_layers).try_fold(x, |x, i| encoder_layer(tape, p, &format!("{prefix}.enc.{i}"), cfg, x))
}

pub fn decode(
    tape: &mut Tape,
    p: &BoundParams,
    prefix: &str,
    cfg: &DftConfig,
    queries: Var,
    context: Var,
) -> Result<Var> {
    (0..cfg.dec_layers).try_fold(queries, |q, i| {
        decoder_layer(tape, p, &format!("{prefix}.dec.{i}"), cfg, q, context)
    })
}

/// `[C, H, W]` → `[1, H·W, C]`.
pub fn flatten(tape: &mut Tape, f: Var) -> Result<Var> {
    let (c, h, w) = nn::chw(tape, f)?;
    let rows = nn::pixels(tape, f)?;
    tape.reshape(rows, &[1, h * w, c])
}

/// `[1, H·W, C]` → `[C, H, W]`.
pub fn unflatten(tape: &mut Tape, x: Var, h: usize, w: usize) -> Result<Var> {
    let &[1, l, c] = tape.shape(x) else {
        return Err(Error::Dimension(format!(
            "expected a single [1, L, C] sequence, got {:?}",
            tape.shape(x)
        )));
    };
    if l != h * w {
        return Err(Error::Dimension(format!("sequence length {l} is not {h}x{w}")));
    }
    let rows = tape.reshape(x, &[l, c])?;
    nn::unpixels(tape, rows, h, w)
}

/// Adds the expected bin embedding `Σ_d dist[d,i]·emb[d]` to every pixel of `f`, then
/// applies the residual depthwise-separable conv `F′ = Conv(G) + G`. Returns the
/// flattened `[1, H·W, C]` sequence.
pub fn depth_position_mapping(
    tape: &mut Tape,
    p: &BoundParams,
    prefix: &str,
    f: Var,
    dist: Var,
) -> Result<Var> {
    let (c, h, w) = nn::chw(tape, f)?;
    let (d, hd, wd) = nn::chw(tape, dist)?;
    let emb = p.get(&format!("{prefix}.embed"))?;
    if tape.shape(emb) != [d, c] {
        return Err(Error::Dimension(format!(
            "bin embeddings {:?} do not match {d} bins x {c} channels",
            tape.shape(emb)
        )));
    }
    if (h, w) != (hd, wd) {
        return Err(Error::Dimension(format!(
            "feature map {:?} and depth distribution {:?} disagree spatially",
            tape.shape(f),
            tape.shape(dist)
        )));
    }
    let pos = expected_embedding(tape, dist, emb)?;
    let pos_map = nn::unpixels(tape, pos, h, w)?;
    let g = tape.add(f, pos_map)?;
    let dw = nn::conv(
        tape,
        p,
        &format!("{prefix}.dw"),
        g,
        Conv2dParams::same(3, 1).with_groups(c),
    )?;
    let pw = nn::conv(tape, p, &format!("{prefix}.pw"), dw, Conv2dParams::default())?;
    let out = tape.add(pw, g)?;
    flatten(tape, out)
}

/// `[H·W, C]` rows of `Σ_d dist[d,i]·emb[d]`.
pub fn expected_embedding(tape: &mut Tape, dist: Var, emb: Var) -> Result<Var> {
    let (d, h, w) = nn::chw(tape, dist)?;
    let flat = tape.reshape(dist, &[d, h * w])?;
    let per_pixel = tape.transpose(flat)?;
    tape.matmul(per_pixel, emb)
}
