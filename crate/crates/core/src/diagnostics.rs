//! Finite-difference gradient checks over every differentiable building block and
//! a small end-to-end model.

use std::collections::BTreeMap;

use crate::adf::{adf_forward, AdfConfig};
use crate::dft::{self, AttentionKernel, DftConfig};
use crate::error::Result;
use crate::head::REGRESSION_DIMS;
use crate::losses::{detection_loss, LossConfig, Targets};
use crate::model::{model_forward, ModelConfig};
use crate::tensor::gradcheck::{grad_check, GradCheckReport};
use crate::tensor::{AnchorLabel, BoundParams, Conv2dParams, Initializer, ParamStore, Real, Rng, Tape, Tensor, Var};

/// Base finite-difference step for the build's float width.
#[cfg(not(feature = "f32"))]
pub const STEP: Real = 1e-6;
#[cfg(feature = "f32")]
pub const STEP: Real = 1e-2;

/// Largest accepted relative error for the build's float width.
#[cfg(not(feature = "f32"))]
pub const TOLERANCE: Real = 1e-4;
#[cfg(feature = "f32")]
pub const TOLERANCE: Real = 5e-2;

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: String,
    pub report: GradCheckReport,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.report.max_rel_error <= TOLERANCE
    }

    pub fn line(&self) -> String {
        format!(
            "{} {:<28} max rel err {:.3e} over {} coords",
            if self.passed() { "PASS" } else { "FAIL" },
            self.name,
            self.report.max_rel_error,
            self.report.coordinates
        )
    }
}

/// `Σ out ⊙ R` for a fixed random `R`, so every output coordinate matters.
fn project(tape: &mut Tape, out: Var, seed: u64) -> Result<Var> {
    let r = Rng::seed(seed).tensor_uniform(tape.shape(out), -1.0, 1.0);
    let r = tape.constant(r);
    let prod = tape.mul(out, r)?;
    tape.sum(prod)
}

fn params_with(
    tape: &mut Tape,
    store: &ParamStore,
    name: &str,
    v: Var,
) -> BoundParams {
    let vars: BTreeMap<String, Var> = store
        .iter()
        .map(|(n, t)| {
            let var = if n == name { v } else { tape.constant(t.clone()) };
            (n.to_string(), var)
        })
        .collect();
    BoundParams::new(vars)
}

fn check(
    out: &mut Vec<CheckResult>,
    name: &str,
    x: &Tensor,
    f: impl Fn(&mut Tape, Var) -> Result<Var>,
) -> Result<()> {
    let report = grad_check(f, x, STEP)?;
    out.push(CheckResult {
        name: name.to_string(),
        report,
    });
    Ok(())
}

/// Kernel-level checks: each op with a random input and a random projection.
pub fn op_checks(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = Rng::seed(seed);
    let mut out = Vec::new();
    let a = rng.tensor_uniform(&[3, 4], -1.0, 1.0);
    let b = rng.tensor_uniform(&[4, 5], -1.0, 1.0);
    check(&mut out, "matmul", &a, |t, x| {
        let bv = t.constant(b.clone());
        let y = t.matmul(x, bv)?;
        project(t, y, 1)
    })?;
    let img = rng.tensor_uniform(&[4, 7, 6], -1.0, 1.0);
    for (name, params, w_shape) in [
        ("conv2d", Conv2dParams::same(3, 1), [3, 4, 3, 3]),
        ("conv2d dilated", Conv2dParams::same(3, 2), [3, 4, 3, 3]),
        ("conv2d strided", Conv2dParams::same(3, 1).with_stride(2), [3, 4, 3, 3]),
        ("conv2d depthwise", Conv2dParams::same(3, 1).with_groups(4), [4, 1, 3, 3]),
    ] {
        let w = rng.tensor_uniform(&w_shape, -0.5, 0.5);
        check(&mut out, &format!("{name} (input)"), &img, |t, x| {
            let wv = t.constant(w.clone());
            let y = t.conv2d(x, wv, params)?;
            project(t, y, 2)
        })?;
        check(&mut out, &format!("{name} (weight)"), &w, |t, wv| {
            let x = t.constant(img.clone());
            let y = t.conv2d(x, wv, params)?;
            project(t, y, 3)
        })?;
    }
    let seq = rng.tensor_uniform(&[2, 5, 6], -1.0, 1.0);
    check(&mut out, "layer norm", &seq, |t, x| {
        let g = t.constant(Tensor::from_fn(&[6], |i| 0.5 + i as Real * 0.1));
        let b = t.constant(Tensor::from_fn(&[6], |i| i as Real * 0.05));
        let y = t.layer_norm(x, g, b, 1e-5)?;
        project(t, y, 4)
    })?;
    for axis in 0..3 {
        check(&mut out, &format!("softmax axis {axis}"), &seq, |t, x| {
            let y = t.softmax(x, axis)?;
            project(t, y, 5)
        })?;
    }
    let pos = rng.tensor_uniform(&[3, 6], 0.1, 1.0);
    check(&mut out, "row normalize", &pos, |t, x| {
        let y = t.row_normalize(x)?;
        project(t, y, 6)
    })?;
    check(&mut out, "elu", &seq, |t, x| {
        let y = t.elu(x)?;
        project(t, y, 7)
    })?;
    let q = rng.tensor_uniform(&[2, 5, 4], -1.0, 1.0);
    let k = rng.tensor_uniform(&[2, 7, 4], -1.0, 1.0);
    let v = rng.tensor_uniform(&[2, 7, 3], -1.0, 1.0);
    for (name, kernel) in [
        ("softmax attention", AttentionKernel::Softmax),
        ("linear attention", AttentionKernel::Linear),
    ] {
        let attend = move |t: &mut Tape, q: Var, k: Var, v: Var| match kernel {
            AttentionKernel::Softmax => dft::scaled_dot_attention(t, q, k, v),
            AttentionKernel::Linear => dft::linear_attention(t, q, k, v),
        };
        check(&mut out, &format!("{name} (q)"), &q, |t, x| {
            let (kv, vv) = (t.constant(k.clone()), t.constant(v.clone()));
            let y = attend(t, x, kv, vv)?;
            project(t, y, 8)
        })?;
        check(&mut out, &format!("{name} (k)"), &k, |t, x| {
            let (qv, vv) = (t.constant(q.clone()), t.constant(v.clone()));
            let y = attend(t, qv, x, vv)?;
            project(t, y, 9)
        })?;
        check(&mut out, &format!("{name} (v)"), &v, |t, x| {
            let (qv, kv) = (t.constant(q.clone()), t.constant(k.clone()));
            let y = attend(t, qv, kv, x)?;
            project(t, y, 10)
        })?;
    }
    loss_checks(&mut rng, &mut out)?;
    Ok(out)
}

fn loss_checks(rng: &mut Rng, out: &mut Vec<CheckResult>) -> Result<()> {
    // Two anchors per location, two classes, a 2×3 map.
    let (a, k, hw) = (2, 2, 6);
    let logits = rng.tensor_uniform(&[a * k, 2, 3], -2.0, 2.0);
    let labels: Vec<AnchorLabel> = (0..a * hw)
        .map(|i| match i % 4 {
            0 => AnchorLabel::Positive(i % k),
            3 => AnchorLabel::Ignore,
            _ => AnchorLabel::Negative,
        })
        .collect();
    check(out, "focal loss", &logits, |t, x| t.focal_loss(x, &labels, k, 0.25, 2.0))?;
    let deltas = rng.tensor_uniform(&[a * REGRESSION_DIMS, 2, 3], -2.0, 2.0);
    let targets: Vec<(usize, Vec<Real>)> = [1usize, 4, 9]
        .iter()
        .map(|&i| (i, (0..REGRESSION_DIMS).map(|j| (j as Real * 0.37).sin() * 1.5).collect()))
        .collect();
    check(out, "smooth l1", &deltas, |t, x| t.smooth_l1(x, &targets, REGRESSION_DIMS, 1.0))?;
    let depth = rng.tensor_uniform(&[5, 2, 3], -2.0, 2.0);
    let bins = vec![Some(0), None, Some(4), Some(2), None, Some(1)];
    check(out, "depth focal loss", &depth, |t, x| Ok(t.depth_loss(x, &bins, 2.0)?.0))?;
    Ok(())
}

/// Module-level checks of the depth branch and the transformer.
pub fn module_checks(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = Rng::seed(seed);
    let mut out = Vec::new();
    let (c, bins) = (8, 5);
    for enhance in [true, false] {
        let cfg = AdfConfig {
            dilation: 2,
            enable_prototype_enhancement: enhance,
            ..AdfConfig::new(c, bins)
        };
        let mut store = ParamStore::new();
        cfg.init_params("adf", &mut Initializer::new(seed, &mut store));
        let f = rng.tensor_uniform(&[c, 4, 5], 0.0, 1.0);
        let name = if enhance { "adf" } else { "adf without enhancement" };
        check(&mut out, name, &f, |t, x| {
            let p = store.bind(t, false);
            let o = adf_forward(t, &p, "adf", &cfg, x)?;
            let a = project(t, o.features, 11)?;
            let b = project(t, o.logits, 12)?;
            t.add(a, b)
        })?;
    }
    for kernel in [AttentionKernel::Linear, AttentionKernel::Softmax] {
        let cfg = DftConfig {
            width: 8,
            heads: 2,
            enc_layers: 1,
            dec_layers: 1,
            ffn_hidden: 12,
            encoder_attention: kernel,
            decoder_attention: kernel,
        };
        let mut store = ParamStore::new();
        cfg.init_params("dft", bins, &mut Initializer::new(seed, &mut store));
        let x = rng.tensor_uniform(&[1, 6, 8], -1.0, 1.0);
        let queries = rng.tensor_uniform(&[1, 6, 8], -1.0, 1.0);
        check(&mut out, &format!("dft {} (memory)", kernel.as_str()), &x, |t, xv| {
            let p = store.bind(t, false);
            let mem = dft::encode(t, &p, "dft", &cfg, xv)?;
            let qv = t.constant(queries.clone());
            let y = dft::decode(t, &p, "dft", &cfg, qv, mem)?;
            project(t, y, 13)
        })?;
        check(&mut out, &format!("dft {} (queries)", kernel.as_str()), &queries, |t, qv| {
            let p = store.bind(t, false);
            let xv = t.constant(x.clone());
            let mem = dft::encode(t, &p, "dft", &cfg, xv)?;
            let y = dft::decode(t, &p, "dft", &cfg, qv, mem)?;
            project(t, y, 14)
        })?;
    }
    Ok(out)
}

/// A model small enough to finite-difference: 32×32 input, width 8, a 2×2 map.
pub fn tiny_model_config() -> ModelConfig {
    let mut cfg = ModelConfig::new(32, 32, 6, 2);
    cfg.backbone_channels = vec![4, 6, 8, 8];
    cfg.dft = DftConfig {
        width: 8,
        heads: 2,
        enc_layers: 1,
        dec_layers: 1,
        ffn_hidden: 12,
        ..DftConfig::default()
    };
    cfg.adf.channels = 8;
    cfg.adf.dilation = 2;
    cfg
}

/// Gradient of the full detection loss with respect to selected parameters.
pub fn model_checks(seed: u64) -> Result<Vec<CheckResult>> {
    let cfg = tiny_model_config();
    let store = cfg.init_params(seed)?;
    let mut rng = Rng::seed(seed ^ 0x5eed);
    let image = rng.tensor_uniform(&[3, 32, 32], -1.0, 1.0);
    let (hf, wf) = cfg.feature_size();
    let anchors = hf * wf * cfg.anchors_per_location;
    let targets = Targets {
        cls: (0..anchors)
            .map(|i| if i == 1 { AnchorLabel::Positive(0) } else { AnchorLabel::Negative })
            .collect(),
        reg: vec![(1, (0..REGRESSION_DIMS).map(|j| 0.1 * j as Real - 0.4).collect())],
        depth_bins: (0..hf * wf).map(|i| Some(i % 6)).collect(),
    };
    let loss_cfg = LossConfig::default();
    let mut out = Vec::new();
    let names = [
        "head.cls.bias",
        "head.box.bias",
        "adf.aux2.bias",
        "dft.dpm.embed",
        "dft.dec.0.norm3.gain",
        "dft.enc.0.ffn.w2",
    ];
    for name in names {
        let Some(value) = store.get(name) else {
            continue;
        };
        check(&mut out, &format!("model {name}"), value, |t, v| {
            let p = params_with(t, &store, name, v);
            let x = t.constant(image.clone());
            let o = model_forward(t, &p, &cfg, x)?;
            Ok(detection_loss(t, &o, &targets, 1, &loss_cfg)?.total)
        })?;
    }
    Ok(out)
}

/// Every check, in a fixed order.
pub fn gradcheck_suite(seed: u64) -> Result<Vec<CheckResult>> {
    let mut all = op_checks(seed)?;
    all.extend(module_checks(seed)?);
    all.extend(model_checks(seed)?);
    Ok(all)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn op_checks_pass() {
        for r in op_checks(3).unwrap() {
            assert!(r.passed(), "{}", r.line());
        }
    }
}
