//! Brute-force references shared by the integration tests. Everything here works on
//! plain `f64` slices and loops, independent of the crate's kernels.
#![allow(dead_code)]

use auxdepth::geometry::{Box2d, Box3d};
use auxdepth::head::{Anchor, Assignment};
use auxdepth::tensor::{Rng, Tensor};

pub fn as_f64(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}

/// `softmax(q kᵀ / √d) v` per batch, one row at a time.
pub fn softmax_attention(q: &[f64], k: &[f64], v: &[f64], dims: [usize; 5]) -> Vec<f64> {
    let [b, l, s, d, dv] = dims;
    let mut out = vec![0.0; b * l * dv];
    for t in 0..b {
        for i in 0..l {
            let scores: Vec<f64> = (0..s)
                .map(|j| {
                    (0..d).map(|c| q[(t * l + i) * d + c] * k[(t * s + j) * d + c]).sum::<f64>()
                        / (d as f64).sqrt()
                })
                .collect();
            let m = scores.iter().cloned().fold(f64::MIN, f64::max);
            let den: f64 = scores.iter().map(|z| (z - m).exp()).sum();
            for j in 0..s {
                let p = (scores[j] - m).exp() / den;
                for e in 0..dv {
                    out[(t * l + i) * dv + e] += p * v[(t * s + j) * dv + e];
                }
            }
        }
    }
    out
}

/// Kernel attention with `φ(x) = elu(x) + 1`, built from the full L×S similarity matrix.
pub fn linear_attention(q: &[f64], k: &[f64], v: &[f64], dims: [usize; 5]) -> Vec<f64> {
    let [b, l, s, d, dv] = dims;
    let phi = |x: f64| if x > 0.0 { x + 1.0 } else { x.exp() };
    let mut out = vec![0.0; b * l * dv];
    for t in 0..b {
        for i in 0..l {
            let sims: Vec<f64> = (0..s)
                .map(|j| (0..d).map(|c| phi(q[(t * l + i) * d + c]) * phi(k[(t * s + j) * d + c])).sum())
                .collect();
            let den: f64 = sims.iter().sum();
            for j in 0..s {
                for e in 0..dv {
                    out[(t * l + i) * dv + e] += sims[j] * v[(t * s + j) * dv + e] / den;
                }
            }
        }
    }
    out
}

/// Per-bin weighted mean of pixel features; `f` is `[c, hw]`, `p` is `[d, hw]`.
/// A bin without mass takes the plain mean.
pub fn prototypes(f: &[f64], p: &[f64], c: usize, d: usize, hw: usize) -> Vec<f64> {
    let mut out = vec![0.0; d * c];
    for bin in 0..d {
        let mass: f64 = (0..hw).map(|i| p[bin * hw + i]).sum();
        for ch in 0..c {
            for i in 0..hw {
                let w = if mass < 1e-8 { 1.0 / hw as f64 } else { p[bin * hw + i] / mass };
                out[bin * c + ch] += w * f[ch * hw + i];
            }
        }
    }
    out
}

/// Per-pixel mixture of prototype rows; returns `[c, hw]`.
pub fn enhance(p: &[f64], protos: &[f64], c: usize, d: usize, hw: usize) -> Vec<f64> {
    let mut out = vec![0.0; c * hw];
    for ch in 0..c {
        for i in 0..hw {
            for bin in 0..d {
                out[ch * hw + i] += p[bin * hw + i] * protos[bin * c + ch];
            }
        }
    }
    out
}

/// Greedy suppression with explicit flags: walk by rank (index breaks ties) and
/// suppress every later box overlapping the current survivor.
pub fn reference_nms(boxes: &[Box2d], scores: &[f64], thr: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    let mut suppressed = vec![false; boxes.len()];
    let mut kept = Vec::new();
    for (rank, &i) in order.iter().enumerate() {
        if suppressed[i] {
            continue;
        }
        kept.push(i);
        for &j in &order[rank + 1..] {
            if box_iou(&boxes[i], &boxes[j]) > thr {
                suppressed[j] = true;
            }
        }
    }
    kept
}

pub fn box_iou(a: &Box2d, b: &Box2d) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let union = (a.x2 - a.x1) * (a.y2 - a.y1) + (b.x2 - b.x1) * (b.y2 - b.y1) - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

/// Interpolated AP over 40 recall positions from every score cut: at each
/// position, the best precision among cuts whose recall reaches it.
pub fn reference_ap(outcomes: &[(f64, bool)], valid_gts: usize) -> f64 {
    const POSITIONS: usize = 40;
    if valid_gts == 0 {
        return 0.0;
    }
    let mut cuts: Vec<f64> = outcomes.iter().map(|o| o.0).collect();
    cuts.sort_by(|a, b| b.partial_cmp(a).unwrap());
    cuts.dedup();
    let pr: Vec<(f64, f64)> = cuts
        .iter()
        .map(|&t| {
            let kept: Vec<bool> = outcomes.iter().filter(|o| o.0 >= t).map(|o| o.1).collect();
            let tp = kept.iter().filter(|&&b| b).count() as f64;
            (tp / valid_gts as f64, tp / kept.len() as f64)
        })
        .collect();
    let mut sum = 0.0;
    for i in 1..=POSITIONS {
        let r = i as f64 / POSITIONS as f64;
        sum += pr
            .iter()
            .filter(|(rec, _)| *rec >= r - 1e-12)
            .map(|p| p.1)
            .fold(0.0, f64::max);
    }
    100.0 * sum / POSITIONS as f64
}

/// Bin index by scanning the edges; depths below the first edge land in bin 0.
pub fn scan_bin(edges: &[f64], d: f64) -> usize {
    let bins = edges.len() - 1;
    let mut found = 0;
    for i in 0..bins {
        if d >= edges[i] {
            found = i;
        }
    }
    found
}

/// Anchor labels from the full IoU matrix. Each anchor takes its best ground
/// truth (lowest index on ties) and is positive, ignored or negative by
/// threshold. An anchor that is some ground truth's best nonzero match is then
/// owned by the highest-IoU claimant among those ground truths and its own
/// positive owner, lowest index on ties.
pub fn reference_match(anchors: &[Anchor], gts: &[Box2d], pos: f64, neg: f64) -> Vec<Assignment> {
    let iou: Vec<Vec<f64>> = anchors.iter().map(|a| gts.iter().map(|g| box_iou(&a.bbox, g)).collect()).collect();
    let argmax = |vals: &mut dyn Iterator<Item = (usize, f64)>| {
        vals.fold(None, |best: Option<(usize, f64)>, (i, v)| match best {
            Some((_, b)) if v <= b => best,
            _ => Some((i, v)),
        })
    };
    let mut out: Vec<Assignment> = iou
        .iter()
        .map(|row| match argmax(&mut row.iter().copied().enumerate()) {
            Some((g, v)) if v >= pos => Assignment::Positive(g),
            Some((_, v)) if v >= neg => Assignment::Ignore,
            _ => Assignment::Negative,
        })
        .collect();
    let best_anchor: Vec<Option<usize>> = (0..gts.len())
        .map(|g| {
            argmax(&mut iou.iter().map(|row| row[g]).enumerate())
                .filter(|&(_, v)| v > 0.0)
                .map(|(a, _)| a)
        })
        .collect();
    for a in 0..anchors.len() {
        let mut claimants: Vec<usize> = (0..gts.len()).filter(|&g| best_anchor[g] == Some(a)).collect();
        if claimants.is_empty() {
            continue;
        }
        if let Assignment::Positive(owner) = out[a] {
            claimants.push(owner);
        }
        claimants.sort_unstable();
        let winner = argmax(&mut claimants.iter().map(|&g| (g, iou[a][g]))).unwrap().0;
        out[a] = Assignment::Positive(winner);
    }
    out
}

/// Two overlapping-prone car-sized boxes around 20 m ahead with random yaw.
pub fn random_box_pair(rng: &mut Rng) -> (Box3d, Box3d) {
    let mut one = || Box3d {
        x: rng.range(-1.5, 1.5),
        y: 1.6 + rng.range(-0.6, 0.6),
        z: 20.0 + rng.range(-1.5, 1.5),
        h: rng.range(0.8, 2.5),
        w: rng.range(0.8, 2.5),
        l: rng.range(1.0, 5.0),
        ry: rng.range(-std::f64::consts::PI, std::f64::consts::PI),
    };
    (one(), one())
}

/// Monte-Carlo `(BEV IoU, 3D IoU)` from `samples` uniform points in the joint
/// bounding box. The BEV estimate tests each footprint at its own mid-height.
pub fn monte_carlo_iou(a: &Box3d, b: &Box3d, samples: usize, seed: u64) -> (f64, f64) {
    let pts: Vec<(f64, f64)> = a.bev_corners().into_iter().chain(b.bev_corners()).collect();
    let (x0, x1) = pts.iter().fold((f64::MAX, f64::MIN), |(lo, hi), p| (lo.min(p.0), hi.max(p.0)));
    let (z0, z1) = pts.iter().fold((f64::MAX, f64::MIN), |(lo, hi), p| (lo.min(p.1), hi.max(p.1)));
    let (y0, y1) = ((a.y - a.h).min(b.y - b.h), a.y.max(b.y));
    let mut rng = Rng::seed(seed);
    let (mut bev_i, mut bev_u, mut vol_i, mut vol_u) = (0usize, 0usize, 0usize, 0usize);
    for _ in 0..samples {
        let (x, y, z) = (rng.range(x0, x1), rng.range(y0, y1), rng.range(z0, z1));
        let (fa, fb) = (a.contains([x, a.y - 0.5 * a.h, z]), b.contains([x, b.y - 0.5 * b.h, z]));
        bev_i += (fa && fb) as usize;
        bev_u += (fa || fb) as usize;
        let (ia, ib) = (a.contains([x, y, z]), b.contains([x, y, z]));
        vol_i += (ia && ib) as usize;
        vol_u += (ia || ib) as usize;
    }
    let ratio = |i: usize, u: usize| if u == 0 { 0.0 } else { i as f64 / u as f64 };
    (ratio(bev_i, bev_u), ratio(vol_i, vol_u))
}
