//! Anchors, anchor/ground-truth matching, box encoding, and post-processing.
//!
//! Anchor `(y·W_f + x)·A + a` sits at feature cell `(y, x)`; `a` enumerates scales
//! outermost and aspect ratios innermost. Each anchor regresses [`REGRESSION_DIMS`]
//! values in the order
//!
//! ```text
//! 0..4   2D center offsets (dx, dy) over anchor size, log size ratios (dw, dh)
//! 4..6   projected 3D center offsets over anchor size
//! 6      log(z / z0)
//! 7..10  log ratios of w, h, l to the prior dims
//! 10     yaw offset, wrapped
//! ```

use crate::error::{Error, Result};
use crate::geometry::{wrap_angle, Box2d, Box3d};
use crate::kitti::{Calibration, KittiLabel};
use crate::tensor::{AnchorLabel, Real, Tensor};

pub const REGRESSION_DIMS: usize = 11;
pub const POSITIVE_IOU: f64 = 0.5;
pub const NEGATIVE_IOU: f64 = 0.4;
pub const NMS_IOU: f64 = 0.4;
pub const MIN_SCORE: f64 = 0.75;
/// Mean car height, width, length in meters.
pub const CAR_PRIOR_DIMS: [f64; 3] = [1.53, 1.63, 3.88];

#[derive(Clone, Debug, PartialEq)]
pub struct AnchorConfig {
    pub stride: usize,
    pub scales: Vec<f64>,
    /// Height over width.
    pub ratios: Vec<f64>,
    /// Prior height, width, length.
    pub prior_dims: [f64; 3],
    pub d_min: f64,
    pub d_max: f64,
}

impl AnchorConfig {
    pub fn full_scale() -> Self {
        AnchorConfig {
            stride: 16,
            scales: vec![32.0, 64.0, 128.0],
            ratios: vec![0.5, 1.0, 2.0],
            prior_dims: CAR_PRIOR_DIMS,
            d_min: 1.0,
            d_max: 65.0,
        }
    }

    /// Four sizes and two wide shapes to cover cars from near to far.
    pub fn toy() -> Self {
        AnchorConfig {
            scales: vec![16.0, 32.0, 64.0, 128.0],
            ratios: vec![0.4, 0.8],
            ..AnchorConfig::full_scale()
        }
    }

    pub fn per_location(&self) -> usize {
        self.scales.len() * self.ratios.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.scales.is_empty() || self.ratios.is_empty() {
            return Err(Error::Config("anchor scales and ratios must be non-empty".into()));
        }
        if self.stride == 0
            || self.scales.iter().chain(&self.ratios).any(|v| !(*v > 0.0 && v.is_finite()))
        {
            return Err(Error::Config("anchor stride, scales, and ratios must be positive".into()));
        }
        if !(self.d_min > 0.0 && self.d_min < self.d_max) {
            return Err(Error::Config(format!(
                "anchor depth range needs 0 < d_min < d_max, got {}..{}",
                self.d_min, self.d_max
            )));
        }
        if self.prior_dims.iter().any(|d| !(*d > 0.0)) {
            return Err(Error::Config("anchor prior dims must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Anchor {
    pub bbox: Box2d,
    pub z0: f64,
    /// Height, width, length.
    pub dims: [f64; 3],
    pub ry0: f64,
}

/// Dense anchors over an `rows × cols` feature map. Prior depth falls linearly from
/// `d_max` at the top row to `d_min` at the bottom row (cell centers).
pub fn generate_anchors(cfg: &AnchorConfig, rows: usize, cols: usize) -> Result<Vec<Anchor>> {
    cfg.validate()?;
    let stride = cfg.stride as f64;
    let mut out = Vec::with_capacity(rows * cols * cfg.per_location());
    for y in 0..rows {
        let t = (y as f64 + 0.5) / rows as f64;
        let z0 = cfg.d_max - (cfg.d_max - cfg.d_min) * t;
        for x in 0..cols {
            let (cx, cy) = ((x as f64 + 0.5) * stride, (y as f64 + 0.5) * stride);
            for &s in &cfg.scales {
                for &r in &cfg.ratios {
                    let (w, h) = (s / r.sqrt(), s * r.sqrt());
                    out.push(Anchor {
                        bbox: Box2d::from_center(cx, cy, w, h),
                        z0,
                        dims: cfg.prior_dims,
                        ry0: 0.0,
                    });
                }
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Assignment {
    Positive(usize),
    Negative,
    Ignore,
}

/// Labels each anchor by its best-overlapping ground truth: IoU ≥ `pos_iou` is
/// positive, below `neg_iou` negative, otherwise ignored. Each ground truth's
/// highest-IoU anchor (first on ties) is then forced positive if the IoU is nonzero.
pub fn match_anchors(anchors: &[Anchor], gts: &[Box2d], pos_iou: f64, neg_iou: f64) -> Vec<Assignment> {
    let mut best_anchor: Vec<Option<(usize, f64)>> = vec![None; gts.len()];
    let mut out = Vec::with_capacity(anchors.len());
    for (ai, a) in anchors.iter().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        for (gi, g) in gts.iter().enumerate() {
            let iou = a.bbox.iou(g);
            if best.map_or(true, |(_, b)| iou > b) {
                best = Some((gi, iou));
            }
            if iou > 0.0 && best_anchor[gi].map_or(true, |(_, b)| iou > b) {
                best_anchor[gi] = Some((ai, iou));
            }
        }
        out.push(match best {
            Some((gi, iou)) if iou >= pos_iou => Assignment::Positive(gi),
            Some((_, iou)) if iou >= neg_iou => Assignment::Ignore,
            _ => Assignment::Negative,
        });
    }
    for (gi, best) in best_anchor.iter().enumerate() {
        let Some((ai, iou)) = *best else { continue };
        let keep_existing = match out[ai] {
            Assignment::Positive(other) if other != gi => {
                let other_iou = anchors[ai].bbox.iou(&gts[other]);
                other_iou > iou || (other_iou == iou && other < gi)
            }
            _ => false,
        };
        if !keep_existing {
            out[ai] = Assignment::Positive(gi);
        }
    }
    out
}

fn finite_or(anchor: usize, vals: &[f64]) -> Result<()> {
    match vals.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::Decode {
            anchor,
            msg: format!("regression value {i} is not finite"),
        }),
        None => Ok(()),
    }
}

/// Regression targets that [`decode`] maps back to `(bbox, b)`.
pub fn encode(anchor: &Anchor, bbox: &Box2d, b: &Box3d, calib: &Calibration) -> Result<[f64; REGRESSION_DIMS]> {
    let a = &anchor.bbox;
    let (acx, acy) = a.center();
    let (aw, ah) = (a.width(), a.height());
    let (gcx, gcy) = bbox.center();
    let (u, v) = calib
        .project(b.center())
        .ok_or_else(|| Error::Geometry("box center lies behind the camera".into()))?;
    if bbox.width() <= 0.0 || bbox.height() <= 0.0 || b.is_degenerate() || b.z <= 0.0 {
        return Err(Error::Geometry("cannot encode a degenerate box".into()));
    }
    Ok([
        (gcx - acx) / aw,
        (gcy - acy) / ah,
        (bbox.width() / aw).ln(),
        (bbox.height() / ah).ln(),
        (u - acx) / aw,
        (v - acy) / ah,
        (b.z / anchor.z0).ln(),
        (b.w / anchor.dims[1]).ln(),
        (b.h / anchor.dims[0]).ln(),
        (b.l / anchor.dims[2]).ln(),
        wrap_angle(b.ry - anchor.ry0),
    ])
}

/// Inverse of [`encode`]; `anchor_index` only labels errors.
pub fn decode(anchor_index: usize, anchor: &Anchor, d: &[f64], calib: &Calibration) -> Result<(Box2d, Box3d)> {
    if d.len() != REGRESSION_DIMS {
        return Err(Error::Decode {
            anchor: anchor_index,
            msg: format!("expected {REGRESSION_DIMS} regression values, got {}", d.len()),
        });
    }
    finite_or(anchor_index, d)?;
    let a = &anchor.bbox;
    let (acx, acy) = a.center();
    let (aw, ah) = (a.width(), a.height());
    let bbox = Box2d::from_center(acx + d[0] * aw, acy + d[1] * ah, aw * d[2].exp(), ah * d[3].exp());
    let (u, v) = (acx + d[4] * aw, acy + d[5] * ah);
    let z = anchor.z0 * d[6].exp();
    let (w, h, l) = (
        anchor.dims[1] * d[7].exp(),
        anchor.dims[0] * d[8].exp(),
        anchor.dims[2] * d[9].exp(),
    );
    let c = calib.unproject(u, v, z).map_err(|e| Error::Decode {
        anchor: anchor_index,
        msg: e.to_string(),
    })?;
    let b = Box3d {
        x: c[0],
        y: c[1] + 0.5 * h,
        z,
        h,
        w,
        l,
        ry: wrap_angle(anchor.ry0 + d[10]),
    };
    finite_or(anchor_index, &[bbox.x1, bbox.y1, bbox.x2, bbox.y2, b.x, b.y, b.z, b.h, b.w, b.l])?;
    Ok((bbox, b))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    pub class: usize,
    pub score: f64,
    pub bbox: Box2d,
    pub box3d: Box3d,
}

impl Detection {
    pub fn to_label(&self, class_names: &[String]) -> KittiLabel {
        let name = class_names.get(self.class).map_or("Car", String::as_str);
        KittiLabel::from_box3d(name, self.bbox, &self.box3d, Some(self.score))
    }
}

/// Keeps detections scoring at least `min_score`, in input order.
pub fn filter_by_score(dets: Vec<Detection>, min_score: f64) -> Vec<Detection> {
    dets.into_iter().filter(|d| d.score >= min_score).collect()
}

/// Greedy suppression in descending score order (stable on ties): a detection
/// is dropped when its 2D IoU with an already kept one exceeds `iou_thresh`.
pub fn nms(dets: &[Detection], iou_thresh: f64) -> Vec<Detection> {
    let boxes: Vec<Box2d> = dets.iter().map(|d| d.bbox).collect();
    let scores: Vec<f64> = dets.iter().map(|d| d.score).collect();
    nms_indices(&boxes, &scores, iou_thresh)
        .into_iter()
        .map(|i| dets[i].clone())
        .collect()
}

/// Indices kept by [`nms`], highest score first.
pub fn nms_indices(boxes: &[Box2d], scores: &[f64], iou_thresh: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..boxes.len().min(scores.len())).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        if kept.iter().all(|&k| boxes[k].iou(&boxes[i]) <= iou_thresh) {
            kept.push(i);
        }
    }
    kept
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadConfig {
    pub anchors: AnchorConfig,
    pub pos_iou: f64,
    pub neg_iou: f64,
    pub nms_iou: f64,
    pub min_score: f64,
}

impl HeadConfig {
    pub fn new(anchors: AnchorConfig) -> Self {
        HeadConfig {
            anchors,
            pos_iou: POSITIVE_IOU,
            neg_iou: NEGATIVE_IOU,
            nms_iou: NMS_IOU,
            min_score: MIN_SCORE,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.anchors.validate()?;
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !(unit(self.pos_iou) && unit(self.neg_iou) && unit(self.nms_iou) && unit(self.min_score))
            || self.neg_iou > self.pos_iou
        {
            return Err(Error::Config(
                "head IoU thresholds and score floor must lie in [0, 1] with neg ≤ pos".into(),
            ));
        }
        Ok(())
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Scores every anchor and class, keeps those at or above the score floor, decodes
/// them, and runs NMS.
pub fn postprocess(
    cls_logits: &Tensor,
    box_deltas: &Tensor,
    anchors: &[Anchor],
    classes: usize,
    calib: &Calibration,
    cfg: &HeadConfig,
) -> Result<Vec<Detection>> {
    let (hw, per_loc) = anchor_layout(cls_logits, classes, anchors.len())?;
    if box_deltas.numel() != anchors.len() * REGRESSION_DIMS {
        return Err(Error::Dimension(format!(
            "box deltas {:?} do not hold {REGRESSION_DIMS} values for each of {} anchors",
            box_deltas.shape(),
            anchors.len()
        )));
    }
    let (z, r) = (cls_logits.data(), box_deltas.data());
    let mut dets = Vec::new();
    for (i, anchor) in anchors.iter().enumerate() {
        let (loc, a) = (i / per_loc, i % per_loc);
        for k in 0..classes {
            let score = sigmoid(z[(a * classes + k) * hw + loc] as f64);
            if score < cfg.min_score {
                continue;
            }
            let deltas: Vec<f64> = (0..REGRESSION_DIMS)
                .map(|j| r[(a * REGRESSION_DIMS + j) * hw + loc] as f64)
                .collect();
            let (bbox, box3d) = decode(i, anchor, &deltas, calib)?;
            dets.push(Detection {
                class: k,
                score,
                bbox,
                box3d,
            });
        }
    }
    Ok(nms(&filter_by_score(dets, cfg.min_score), cfg.nms_iou))
}

fn anchor_layout(cls_logits: &Tensor, classes: usize, anchors: usize) -> Result<(usize, usize)> {
    let s = cls_logits.shape();
    if s.len() != 3 || classes == 0 || s[0] % classes != 0 {
        return Err(Error::Dimension(format!(
            "class logits {s:?} do not fit {classes} classes"
        )));
    }
    let (hw, per_loc) = (s[1] * s[2], s[0] / classes);
    if hw * per_loc != anchors {
        return Err(Error::Dimension(format!(
            "class logits {s:?} cover {} anchors, expected {anchors}",
            hw * per_loc
        )));
    }
    Ok((hw, per_loc))
}

/// Per-anchor classification labels and positive-anchor regression targets for one
/// image. Ground truths whose type is not in `class_names` are left out.
pub fn build_targets(
    anchors: &[Anchor],
    labels: &[KittiLabel],
    class_names: &[String],
    calib: &Calibration,
    cfg: &HeadConfig,
) -> Result<(Vec<AnchorLabel>, Vec<(usize, Vec<Real>)>)> {
    let gts: Vec<(usize, &KittiLabel)> = labels
        .iter()
        .filter_map(|l| class_names.iter().position(|c| *c == l.kind).map(|k| (k, l)))
        .collect();
    let boxes: Vec<Box2d> = gts.iter().map(|(_, l)| l.bbox).collect();
    let assignment = match_anchors(anchors, &boxes, cfg.pos_iou, cfg.neg_iou);
    let mut cls = Vec::with_capacity(anchors.len());
    let mut reg = Vec::new();
    for (i, a) in assignment.iter().enumerate() {
        cls.push(match *a {
            Assignment::Positive(g) => {
                let (k, l) = gts[g];
                let t = encode(&anchors[i], &l.bbox, &l.box3d(), calib)?;
                reg.push((i, t.iter().map(|v| *v as Real).collect()));
                AnchorLabel::Positive(k)
            }
            Assignment::Negative => AnchorLabel::Negative,
            Assignment::Ignore => AnchorLabel::Ignore,
        });
    }
    Ok((cls, reg))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn calib() -> Calibration {
        Calibration::new([
            [371.0, 0.0, 320.0, 22.0],
            [0.0, 371.0, 40.0, 0.1],
            [0.0, 0.0, 1.0, 0.002],
        ])
        .unwrap()
    }

    fn two_square() -> AnchorConfig {
        AnchorConfig {
            scales: vec![16.0, 32.0],
            ratios: vec![1.0],
            ..AnchorConfig::toy()
        }
    }

    #[test]
    fn anchor_grid() {
        let cfg = two_square();
        let a = generate_anchors(&cfg, 4, 4).unwrap();
        assert_eq!(a.len(), 32);
        assert_eq!(a[0].bbox.center(), (8.0, 8.0));
        assert_eq!(a[2 + 1].bbox.center(), (24.0, 8.0));
        assert!(a.last().unwrap().z0 < a[0].z0);
        let empty = AnchorConfig {
            scales: vec![],
            ..cfg
        };
        assert!(matches!(generate_anchors(&empty, 2, 2), Err(Error::Config(_))));
    }

    #[test]
    fn zero_deltas_reproduce_priors() {
        let a = generate_anchors(&two_square(), 3, 5).unwrap()[7];
        let (bbox, b) = decode(7, &a, &[0.0; REGRESSION_DIMS], &calib()).unwrap();
        assert_eq!(bbox, a.bbox);
        assert_eq!((b.z, b.h, b.w, b.l, b.ry), (a.z0, a.dims[0], a.dims[1], a.dims[2], 0.0));
        let (u, v) = calib().project(b.center()).unwrap();
        let (cx, cy) = a.bbox.center();
        assert!((u - cx).abs() < 1e-9 && (v - cy).abs() < 1e-9);
    }

    #[test]
    fn yaw_wraps_on_decode() {
        let mut a = generate_anchors(&two_square(), 1, 1).unwrap()[0];
        a.ry0 = 3.0;
        let mut d = [0.0; REGRESSION_DIMS];
        d[10] = 0.5;
        let (_, b) = decode(0, &a, &d, &calib()).unwrap();
        assert!((b.ry - (-2.783_185_307_179_586)).abs() < 1e-12);
    }

    #[test]
    fn non_finite_delta_names_anchor() {
        let a = generate_anchors(&two_square(), 1, 1).unwrap()[1];
        let mut d = [0.0; REGRESSION_DIMS];
        d[6] = f64::NAN;
        match decode(1, &a, &d, &calib()) {
            Err(Error::Decode { anchor: 1, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn score_filter_boundary() {
        let det = |score| Detection {
            class: 0,
            score,
            bbox: Box2d::new(0.0, 0.0, 1.0, 1.0),
            box3d: Box3d {
                x: 0.0,
                y: 0.0,
                z: 1.0,
                h: 1.0,
                w: 1.0,
                l: 1.0,
                ry: 0.0,
            },
        };
        let kept = filter_by_score(vec![det(0.74), det(0.75), det(0.9)], MIN_SCORE);
        assert_eq!(kept.iter().map(|d| d.score).collect::<Vec<_>>(), vec![0.75, 0.9]);
        let both = nms(&[det(0.8), det(0.9)], NMS_IOU);
        assert_eq!(both.len(), 1);
        assert_eq!(both[0].score, 0.9);
    }

    #[test]
    fn match_identity_and_disjoint() {
        let a = generate_anchors(&two_square(), 1, 2).unwrap();
        let labels = match_anchors(&a, &[a[1].bbox, Box2d::new(500.0, 500.0, 510.0, 510.0)], 0.5, 0.4);
        assert_eq!(labels[1], Assignment::Positive(0));
        assert_eq!(labels[2], Assignment::Negative);
    }
}
