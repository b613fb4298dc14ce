//! Linear-increasing depth discretization.
//!
//! Bin widths grow in arithmetic progression, so near depths get finer bins:
//!
//! ```text
//! edge_i = d_min + (d_max − d_min) · i(i+1) / (D(D+1)),   i = 0..=D
//! ```
//!
//! Bins are half-open `[edge_i, edge_{i+1})`; the last bin also takes `d_max`, and
//! depths outside the range clamp to the first or last bin.

use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum LidFormula {
    /// Arithmetic-progression widths (the edge formula above).
    #[default]
    Standard,
    /// Piecewise widths `(i+1)²/D` for `i < √D`, `(i+1)/D` otherwise, rescaled so
    /// the bins span `[d_min, d_max]`. Kept for comparison experiments.
    Piecewise,
}

impl FromStr for LidFormula {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(LidFormula::Standard),
            "piecewise" => Ok(LidFormula::Piecewise),
            _ => Err(Error::Config(format!(
                "lid.formula must be `standard` or `piecewise`, got `{s}`"
            ))),
        }
    }
}

impl LidFormula {
    pub fn as_str(self) -> &'static str {
        match self {
            LidFormula::Standard => "standard",
            LidFormula::Piecewise => "piecewise",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LidConfig {
    pub d_min: f64,
    pub d_max: f64,
    pub bins: usize,
    pub formula: LidFormula,
}

impl Default for LidConfig {
    fn default() -> Self {
        LidConfig {
            d_min: 1.0,
            d_max: 65.0,
            bins: 64,
            formula: LidFormula::Standard,
        }
    }
}

impl LidConfig {
    pub fn new(d_min: f64, d_max: f64, bins: usize) -> Result<Self> {
        let cfg = LidConfig {
            d_min,
            d_max,
            bins,
            formula: LidFormula::Standard,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.d_min > 0.0 && self.d_min < self.d_max && self.d_max.is_finite()) {
            return Err(Error::Config(format!(
                "lid range needs 0 < d_min < d_max, got d_min={} d_max={}",
                self.d_min, self.d_max
            )));
        }
        if self.bins < 2 {
            return Err(Error::Config(format!(
                "lid needs at least 2 bins, got {}",
                self.bins
            )));
        }
        Ok(())
    }
}

/// The `D + 1` bin edges for `cfg`.
pub fn bin_edges(cfg: &LidConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    let (d, span) = (cfg.bins as f64, cfg.d_max - cfg.d_min);
    let mut edges: Vec<f64> = match cfg.formula {
        LidFormula::Standard => (0..=cfg.bins)
            .map(|i| {
                let i = i as f64;
                cfg.d_min + span * i * (i + 1.0) / (d * (d + 1.0))
            })
            .collect(),
        LidFormula::Piecewise => {
            let widths: Vec<f64> = (0..cfg.bins)
                .map(|i| {
                    let i = i as f64;
                    if i < d.sqrt() {
                        (i + 1.0) * (i + 1.0) / d
                    } else {
                        (i + 1.0) / d
                    }
                })
                .collect();
            let total: f64 = widths.iter().sum();
            let mut acc = 0.0;
            std::iter::once(cfg.d_min)
                .chain(widths.iter().map(|w| {
                    acc += w;
                    cfg.d_min + span * acc / total
                }))
                .collect()
        }
    };
    edges[0] = cfg.d_min;
    edges[cfg.bins] = cfg.d_max;
    Ok(edges)
}

/// Precomputed discretization for repeated depth/bin conversion.
#[derive(Clone, Debug)]
pub struct Lid {
    cfg: LidConfig,
    edges: Vec<f64>,
}

impl Lid {
    pub fn new(cfg: LidConfig) -> Result<Self> {
        Ok(Lid {
            edges: bin_edges(&cfg)?,
            cfg,
        })
    }

    pub fn config(&self) -> &LidConfig {
        &self.cfg
    }

    pub fn bins(&self) -> usize {
        self.cfg.bins
    }

    pub fn edges(&self) -> &[f64] {
        &self.edges
    }

    /// Bin index with `edge_i ≤ d < edge_{i+1}`, clamped into `[0, D−1]`.
    pub fn depth_to_bin(&self, depth: f64) -> usize {
        let last = self.cfg.bins - 1;
        if depth.is_nan() || depth < self.cfg.d_min {
            return 0;
        }
        if depth >= self.cfg.d_max {
            return last;
        }
        let guess = match self.cfg.formula {
            LidFormula::Standard => {
                let t = (depth - self.cfg.d_min) / (self.cfg.d_max - self.cfg.d_min);
                let d = self.cfg.bins as f64;
                let i = ((-1.0 + (1.0 + 4.0 * t * d * (d + 1.0)).sqrt()) / 2.0).floor();
                (i.max(0.0) as usize).min(last)
            }
            LidFormula::Piecewise => self.edges.partition_point(|&e| e <= depth).saturating_sub(1),
        };
        // The closed form can land one bin off at an exact edge; settle on the edges.
        let mut i = guess.min(last);
        while i < last && depth >= self.edges[i + 1] {
            i += 1;
        }
        while i > 0 && depth < self.edges[i] {
            i -= 1;
        }
        i
    }

    pub fn bin_center(&self, i: usize) -> Result<f64> {
        if i >= self.cfg.bins {
            return Err(Error::Bounds {
                what: "depth bins",
                index: i,
                len: self.cfg.bins,
            });
        }
        Ok(0.5 * (self.edges[i] + self.edges[i + 1]))
    }
}
