//! Training objective: focal classification, smooth-L1 regression, and the
//! focal-modulated depth-bin loss, combined with fixed weights.

use crate::error::{Error, Result};
use crate::head::REGRESSION_DIMS;
use crate::model::ModelOutputs;
use crate::tensor::{focal_term, smooth_l1_term, AnchorLabel, Real, Tape, Var, PROB_EPS};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub alpha: f64,
    pub gamma: f64,
    pub beta: f64,
    pub lambda_reg: f64,
    pub lambda_depth: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: 0.25,
            gamma: 2.0,
            beta: 1.0,
            lambda_reg: 1.0,
            lambda_depth: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = [self.alpha, self.gamma, self.lambda_reg, self.lambda_depth]
            .iter()
            .all(|v| *v >= 0.0 && v.is_finite())
            && self.beta > 0.0
            && self.alpha <= 1.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(
                "loss weights must be finite and nonnegative, with alpha ≤ 1 and beta > 0".into(),
            ))
        }
    }
}

/// Per-image supervision.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Targets {
    pub cls: Vec<AnchorLabel>,
    /// `(anchor index, regression values)` for positive anchors.
    pub reg: Vec<(usize, Vec<Real>)>,
    /// Ground-truth bin per feature cell, `None` where depth is unknown.
    pub depth_bins: Vec<Option<usize>>,
}

pub struct LossTerms {
    pub cls: Var,
    pub reg: Var,
    pub depth: Option<Var>,
    pub total: Var,
    /// Feature cells that carried depth supervision.
    pub depth_supervised: usize,
}

/// `L = L_cls + λ_reg·L_reg + λ_depth·L_depth`; the depth term is skipped when
/// absent or when no cell was supervised.
pub fn total_loss(tape: &mut Tape, cls: Var, reg: Var, depth: Option<Var>, cfg: &LossConfig) -> Result<Var> {
    let r = tape.scale(reg, cfg.lambda_reg as Real)?;
    let mut total = tape.add(cls, r)?;
    if let Some(d) = depth {
        let d = tape.scale(d, cfg.lambda_depth as Real)?;
        total = tape.add(total, d)?;
    }
    Ok(total)
}

pub fn detection_loss(
    tape: &mut Tape,
    out: &ModelOutputs,
    targets: &Targets,
    classes: usize,
    cfg: &LossConfig,
) -> Result<LossTerms> {
    let cls = tape.focal_loss(out.cls_logits, &targets.cls, classes, cfg.alpha as Real, cfg.gamma as Real)?;
    let reg = tape.smooth_l1(out.box_deltas, &targets.reg, REGRESSION_DIMS, cfg.beta as Real)?;
    let (depth, supervised) = match out.depth_logits {
        Some(logits) => {
            let (d, n) = tape.depth_loss(logits, &targets.depth_bins, cfg.gamma as Real)?;
            (Some(d), n)
        }
        None => (None, 0),
    };
    let used = depth.filter(|_| supervised > 0);
    let total = total_loss(tape, cls, reg, used, cfg)?;
    Ok(LossTerms {
        cls,
        reg,
        depth,
        total,
        depth_supervised: supervised,
    })
}

/// Focal term for one binary target at probability `p`, clamped to `[ε, 1 − ε]`.
pub fn focal_value(p: f64, positive: bool, alpha: f64, gamma: f64) -> f64 {
    let p = (p as Real).clamp(PROB_EPS, 1.0 - PROB_EPS);
    focal_term(p, positive, alpha as Real, gamma as Real).0 as f64
}

pub fn smooth_l1_value(x: f64, beta: f64) -> f64 {
    smooth_l1_term(x as Real, beta as Real).0 as f64
}

/// `−(1 − p)^γ · ln p` with `p` floored at ε.
pub fn depth_value(p: f64, gamma: f64) -> f64 {
    let p = p.max(PROB_EPS as f64);
    -(1.0 - p).powf(gamma) * p.ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn scalar_closed_forms() {
        assert!((focal_value(0.5, true, 0.25, 2.0) - 0.25 * 0.25 * 2f64.ln()).abs() < 1e-15);
        assert!((depth_value(0.5, 2.0) - 0.25 * 2f64.ln()).abs() < 1e-15);
        assert!(focal_value(1.0 - 1e-7, true, 0.25, 2.0) <= 1e-12);
        assert!(depth_value(1.0 - 1e-7, 2.0) <= 1e-12);
        assert_eq!(smooth_l1_value(1.0, 1.0), 0.5);
        assert_eq!(smooth_l1_value(2.0, 1.0), 1.5);
        assert_eq!(smooth_l1_value(0.0, 1.0), 0.0);
    }

    #[test]
    fn total_is_weighted_sum() {
        let mut tape = Tape::new();
        let [a, b, c] = [1.0, 2.0, 3.0].map(|v| tape.constant(Tensor::scalar(v)));
        let cfg = LossConfig::default();
        let t = total_loss(&mut tape, a, b, Some(c), &cfg).unwrap();
        assert_eq!(tape.value(t).item().unwrap(), 6.0);
        let zero = LossConfig {
            lambda_reg: 0.0,
            lambda_depth: 0.0,
            ..cfg
        };
        let t = total_loss(&mut tape, a, b, Some(c), &zero).unwrap();
        assert_eq!(tape.value(t).item().unwrap(), 1.0);
    }

    #[test]
    fn rejects_negative_weights() {
        let cfg = LossConfig {
            lambda_reg: -1.0,
            ..LossConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
