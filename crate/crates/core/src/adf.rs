//! Auxiliary depth features.
//!
//! The block refines backbone features with a dilated 3×3 conv (`F_init`), predicts a
//! per-pixel distribution over depth bins, pools pixel features into one prototype
//! per bin, projects the prototypes back onto the pixels (`F_enhanced`), and fuses
//! `concat(F_init, F_enhanced)` back to the input width with a 1×1 conv.
//!
//! Shapes: feature maps are `[C, H, W]`, distributions `[D, H, W]`, prototypes `[D, C]`.

use std::str::FromStr;

use crate::error::{Error, Result};
use crate::nn;
use crate::tensor::{BoundParams, Conv2dParams, Initializer, Real, Tape, Var};

pub const SUPPORTED_DILATIONS: [usize; 5] = [1, 2, 4, 8, 16];

/// How pixel/bin attention weights are formed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum AdfAttention {
    /// The predicted distribution itself: normalized over pixels for pooling and
    /// over bins (native softmax) for the projection back.
    #[default]
    Distribution,
    /// Scaled dot products between pixel features and distribution-pooled
    /// prototypes, softmaxed over pixels for pooling and over bins for projection.
    Similarity,
}

impl FromStr for AdfAttention {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "distribution" => Ok(AdfAttention::Distribution),
            "similarity" => Ok(AdfAttention::Similarity),
            _ => Err(Error::Config(format!(
                "adf.attention must be `distribution` or `similarity`, got `{s}`"
            ))),
        }
    }
}

impl AdfAttention {
    pub fn as_str(self) -> &'static str {
        match self {
            AdfAttention::Distribution => "distribution",
            AdfAttention::Similarity => "similarity",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdfConfig {
    pub channels: usize,
    pub bins: usize,
    pub dilation: usize,
    pub enable_prototype_enhancement: bool,
    pub attention: AdfAttention,
}

impl AdfConfig {
    pub fn new(channels: usize, bins: usize) -> Self {
        AdfConfig {
            channels,
            bins,
            dilation: 4,
            enable_prototype_enhancement: true,
            attention: AdfAttention::Distribution,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !SUPPORTED_DILATIONS.contains(&self.dilation) {
            return Err(Error::Config(format!(
                "adf.dilation must be one of {SUPPORTED_DILATIONS:?}, got {}",
                self.dilation
            )));
        }
        if self.channels == 0 || self.bins < 2 {
            return Err(Error::Config(format!(
                "adf needs channels > 0 and at least 2 bins, got {} and {}",
                self.channels, self.bins
            )));
        }
        Ok(())
    }

    pub fn init_params(&self, prefix: &str, init: &mut Initializer) {
        let c = self.channels;
        init.conv(&format!("{prefix}.refine"), c, c, 3);
        init.conv(&format!("{prefix}.aux1"), c, c, 3);
        init.conv(&format!("{prefix}.aux2"), self.bins, c, 3);
        init.conv(&format!("{prefix}.fuse"), c, 2 * c, 1);
    }
}

pub struct AdfOutput {
    /// Fused features `[C, H, W]`.
    pub features: Var,
    /// Raw depth-bin scores `[D, H, W]`, supervised by the depth loss.
    pub logits: Var,
    /// Softmax of `logits` over the bin axis.
    pub dist: Var,
}

/// Two 3×3 convs with a ReLU between give logits `[D, H, W]`; the distribution is
/// their softmax over the bin axis. Returns `(logits, dist)`.
pub fn predict_depth_distribution(
    tape: &mut Tape,
    p: &BoundParams,
    prefix: &str,
    cfg: &AdfConfig,
    f: Var,
) -> Result<(Var, Var)> {
    let (c, _, _) = nn::chw(tape, f)?;
    if c != cfg.channels {
        return Err(Error::Config(format!(
            "adf configured for {} channels, got {c}",
            cfg.channels
        )));
    }
    let h = nn::conv_relu(tape, p, &format!("{prefix}.aux1"), f, Conv2dParams::same(3, 1))?;
    let logits = nn::conv(tape, p, &format!("{prefix}.aux2"), h, Conv2dParams::same(3, 1))?;
    let dist = tape.softmax(logits, 0)?;
    Ok((logits, dist))
}

fn check_spatial(tape: &Tape, f: Var, dist: Var) -> Result<(usize, usize, usize, usize)> {
    let (c, h, w) = nn::chw(tape, f)?;
    let (d, hd, wd) = nn::chw(tape, dist)?;
    if (h, w) != (hd, wd) {
        return Err(Error::Dimension(format!(
            "feature map {:?} and depth distribution {:?} disagree spatially",
            tape.shape(f),
            tape.shape(dist)
        )));
    }
    Ok((c, d, h, w))
}

/// Prototype for bin `d`: `Σ_i a(i,d) · F_init[i]` with `a(·,d)` the distribution
/// column normalized over pixels (uniform when the bin has no mass). Returns `[D, C]`.
pub fn compute_prototypes(tape: &mut Tape, f_init: Var, dist: Var) -> Result<Var> {
    let (_, d, h, w) = check_spatial(tape, f_init, dist)?;
    let flat = tape.reshape(dist, &[d, h * w])?;
    let weights = tape.row_normalize(flat)?;
    let feats = nn::pixels(tape, f_init)?;
    tape.matmul(weights, feats)
}

/// `F_enhanced[i] = Σ_d dist[d, i] · P[d]`. Returns `[C, H, W]`.
pub fn enhance_features(tape: &mut Tape, prototypes: Var, dist: Var) -> Result<Var> {
    let (d, h, w) = nn::chw(tape, dist)?;
    if tape.shape(prototypes).first() != Some(&d) || tape.shape(prototypes).len() != 2 {
        return Err(Error::Dimension(format!(
            "prototypes {:?} do not match {d} depth bins",
            tape.shape(prototypes)
        )));
    }
    let flat = tape.reshape(dist, &[d, h * w])?;
    let per_pixel = tape.transpose(flat)?;
    let out = tape.matmul(per_pixel, prototypes)?;
    nn::unpixels(tape, out, h, w)
}

/// Similarity-attention variant of pooling and projection. Returns `F_enhanced`.
fn similarity_enhance(tape: &mut Tape, f_init: Var, dist: Var) -> Result<Var> {
    let (c, _, h, w) = check_spatial(tape, f_init, dist)?;
    let seed = compute_prototypes(tape, f_init, dist)?;
    let feats = nn::pixels(tape, f_init)?;
    let seed_t = tape.transpose(seed)?;
    let raw = tape.matmul(feats, seed_t)?;
    let scores = tape.scale(raw, 1.0 / (c as Real).sqrt())?;
    let pool = tape.softmax(scores, 0)?;
    let pool_t = tape.transpose(pool)?;
    let protos = tape.matmul(pool_t, feats)?;
    let project = tape.softmax(scores, 1)?;
    let out = tape.matmul(project, protos)?;
    nn::unpixels(tape, out, h, w)
}

pub fn adf_forward(
    tape: &mut Tape,
    p: &BoundParams,
    prefix: &str,
    cfg: &AdfConfig,
    f: Var,
) -> Result<AdfOutput> {
    cfg.validate()?;
    let (c, _, _) = nn::chw(tape, f)?;
    if c != cfg.channels {
        return Err(Error::Config(format!(
            "adf configured for {} channels, got {c}",
            cfg.channels
        )));
    }
    let f_init = nn::conv_relu(
        tape,
        p,
        &format!("{prefix}.refine"),
        f,
        Conv2dParams::same(3, cfg.dilation),
    )?;
    let (logits, dist) = predict_depth_distribution(tape, p, prefix, cfg, f_init)?;
    let second = if cfg.enable_prototype_enhancement {
        match cfg.attention {
            AdfAttention::Distribution => {
                let protos = compute_prototypes(tape, f_init, dist)?;
                enhance_features(tape, protos, dist)?
            }
            AdfAttention::Similarity => similarity_enhance(tape, f_init, dist)?,
        }
    } else {
        f_init
    };
    let stacked = tape.concat(&[f_init, second])?;
    let features = nn::conv(tape, p, &format!("{prefix}.fuse"), stacked, Conv2dParams::default())?;
    Ok(AdfOutput {
        features,
        logits,
        dist,
    })
}
