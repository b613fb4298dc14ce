//! KITTI-protocol evaluation: AP over 40 recall positions for 3D and bird's-eye
//! boxes, per difficulty level.
//!
//! Detections are matched greedily in descending score order across all frames.
//! A detection takes the highest-IoU unmatched valid ground truth at or above the
//! threshold (true positive). Failing that it is ignored if it overlaps an ignored
//! ground truth, a DontCare region, or is shorter than the level's minimum height;
//! otherwise it is a false positive.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::geometry::{iou_3d, iou_bev};
use crate::kitti::{self, classify_difficulty, Difficulty, KittiLabel};

pub const RECALL_POSITIONS: usize = 40;
pub const CAR_IOU: f64 = 0.7;
/// Fraction of a detection's 2D box inside a DontCare region that makes it ignored.
pub const DONT_CARE_COVER: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Metric {
    Ap3d,
    ApBev,
}

impl Metric {
    pub const ALL: [Metric; 2] = [Metric::Ap3d, Metric::ApBev];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Ap3d => "AP3D",
            Metric::ApBev => "APBEV",
        }
    }

    pub fn iou(self, a: &KittiLabel, b: &KittiLabel) -> f64 {
        match self {
            Metric::Ap3d => iou_3d(&a.box3d(), &b.box3d()),
            Metric::ApBev => iou_bev(&a.box3d(), &b.box3d()),
        }
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ap3d" => Ok(Metric::Ap3d),
            "apbev" => Ok(Metric::ApBev),
            _ => Err(Error::Config(format!("metric must be `ap3d` or `apbev`, got `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub class: String,
    pub iou_threshold: f64,
    pub metrics: Vec<Metric>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            class: "Car".into(),
            iou_threshold: CAR_IOU,
            metrics: Metric::ALL.to_vec(),
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.iou_threshold > 0.0 && self.iou_threshold <= 1.0) {
            return Err(Error::Config(format!(
                "IoU threshold must lie in (0, 1], got {}",
                self.iou_threshold
            )));
        }
        Ok(())
    }
}

/// Ground truth and detections of one frame.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FrameData {
    pub gts: Vec<KittiLabel>,
    pub dets: Vec<KittiLabel>,
}

/// Class whose ground truths are neither required nor penalized.
fn neighbor_class(class: &str) -> Option<&'static str> {
    match class {
        "Car" => Some("Van"),
        "Pedestrian" => Some("Person_sitting"),
        _ => None,
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScoredOutcome {
    pub score: f64,
    pub true_positive: bool,
}

/// Matching result for one (metric, level): non-ignored detections in descending
/// score order and the number of valid ground truths.
#[derive(Clone, Debug, PartialEq)]
pub struct Matching {
    pub outcomes: Vec<ScoredOutcome>,
    pub valid_gts: usize,
}

fn dont_care_cover(det: &KittiLabel, region: &KittiLabel) -> f64 {
    let area = det.bbox.area();
    if area <= 0.0 {
        0.0
    } else {
        det.bbox.intersection(&region.bbox) / area
    }
}

pub fn match_detections(frames: &[FrameData], cfg: &EvalConfig, metric: Metric, level: Difficulty) -> Matching {
    let neighbor = neighbor_class(&cfg.class);
    let mut valid: Vec<Vec<(usize, bool)>> = Vec::with_capacity(frames.len());
    let mut valid_gts = 0;
    for f in frames {
        let mut row = Vec::new();
        for (i, g) in f.gts.iter().enumerate() {
            if g.kind == cfg.class {
                let ok = classify_difficulty(g) <= level;
                valid_gts += ok as usize;
                row.push((i, ok));
            } else if Some(g.kind.as_str()) == neighbor {
                row.push((i, false));
            }
        }
        valid.push(row);
    }
    let mut order: Vec<(usize, usize)> = frames
        .iter()
        .enumerate()
        .flat_map(|(fi, f)| {
            f.dets
                .iter()
                .enumerate()
                .filter(|(_, d)| d.kind == cfg.class)
                .map(move |(di, _)| (fi, di))
        })
        .collect();
    let score = |&(fi, di): &(usize, usize)| frames[fi].dets[di].score.unwrap_or(0.0);
    order.sort_by(|a, b| score(b).total_cmp(&score(a)).then(a.cmp(b)));

    let mut taken: Vec<Vec<bool>> = frames.iter().map(|f| vec![false; f.gts.len()]).collect();
    let mut outcomes = Vec::new();
    for (fi, di) in order {
        let f = &frames[fi];
        let det = &f.dets[di];
        let mut best: Option<(usize, f64)> = None;
        let mut hits_ignored = false;
        for &(gi, ok) in &valid[fi] {
            let iou = metric.iou(det, &f.gts[gi]);
            if iou < cfg.iou_threshold {
                continue;
            }
            if !ok {
                hits_ignored = true;
            } else if !taken[fi][gi] && best.map_or(true, |(_, b)| iou > b) {
                best = Some((gi, iou));
            }
        }
        if let Some((gi, _)) = best {
            taken[fi][gi] = true;
            outcomes.push(ScoredOutcome {
                score: score(&(fi, di)),
                true_positive: true,
            });
            continue;
        }
        let ignored = hits_ignored
            || det.bbox.height() < level.min_height()
            || f.gts
                .iter()
                .any(|g| g.is_dont_care() && dont_care_cover(det, g) > DONT_CARE_COVER);
        if !ignored {
            outcomes.push(ScoredOutcome {
                score: score(&(fi, di)),
                true_positive: false,
            });
        }
    }
    Matching { outcomes, valid_gts }
}

/// AP over recall positions `1/40 … 40/40` in percent, from outcomes sorted by
/// descending score. Precision-recall points are taken only at score boundaries,
/// so tied detections enter together.
pub fn ap40(m: &Matching) -> f64 {
    if m.valid_gts == 0 {
        return 0.0;
    }
    let mut points: Vec<(usize, usize)> = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    for (i, o) in m.outcomes.iter().enumerate() {
        if o.true_positive {
            tp += 1;
        } else {
            fp += 1;
        }
        let boundary = m.outcomes.get(i + 1).map_or(true, |n| n.score != o.score);
        if boundary {
            points.push((tp, fp));
        }
    }
    let n = m.valid_gts;
    let mut best_from = vec![0.0f64; points.len() + 1];
    for (k, &(tp, fp)) in points.iter().enumerate().rev() {
        best_from[k] = best_from[k + 1].max(tp as f64 / (tp + fp) as f64);
    }
    let mut sum = 0.0;
    let mut k = 0;
    for i in 1..=RECALL_POSITIONS {
        while k < points.len() && RECALL_POSITIONS * points[k].0 < i * n {
            k += 1;
        }
        sum += best_from[k];
    }
    100.0 * sum / RECALL_POSITIONS as f64
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub class: String,
    pub iou_threshold: f64,
    /// `(metric, [easy, moderate, hard])` in percent.
    pub rows: Vec<(Metric, [f64; 3])>,
}

impl EvalReport {
    pub fn value(&self, metric: Metric, level: Difficulty) -> Option<f64> {
        let i = Difficulty::LEVELS.iter().position(|l| *l == level)?;
        self.rows.iter().find(|(m, _)| *m == metric).map(|(_, v)| v[i])
    }

    /// Fixed-width table, one metric group per column block.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "{} AP40 @ IoU={:.2}", self.class, self.iou_threshold).expect("write");
        let mut head1 = format!("{:<8}", "");
        let mut head2 = format!("{:<8}", "");
        let mut vals = format!("{:<8}", "ours");
        for (m, v) in &self.rows {
            write!(head1, "| {:^22} ", format!("{}@IoU={:.1}", m.name(), self.iou_threshold)).expect("write");
            write!(head2, "| {:>6} {:>6} {:>6}   ", "Easy", "Mod.", "Hard").expect("write");
            write!(vals, "| {:>6.2} {:>6.2} {:>6.2}   ", v[0], v[1], v[2]).expect("write");
        }
        for line in [head1, head2, vals] {
            s.push_str(line.trim_end());
            s.push('\n');
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,easy,moderate,hard\n");
        for (m, v) in &self.rows {
            writeln!(s, "{},{:.4},{:.4},{:.4}", m.name(), v[0], v[1], v[2]).expect("write");
        }
        s
    }
}

pub fn evaluate_frames(frames: &[FrameData], cfg: &EvalConfig) -> Result<EvalReport> {
    cfg.validate()?;
    let rows = cfg
        .metrics
        .iter()
        .map(|&m| (m, Difficulty::LEVELS.map(|level| ap40(&match_detections(frames, cfg, m, level)))))
        .collect();
    Ok(EvalReport {
        class: cfg.class.clone(),
        iou_threshold: cfg.iou_threshold,
        rows,
    })
}

/// Loads every ground-truth frame and its prediction file. A prediction directory
/// with no label files at all stands for a detector that found nothing; otherwise
/// every ground-truth frame needs a prediction file.
pub fn load_frames(pred_dir: &Path, gt_dir: &Path) -> Result<Vec<FrameData>> {
    let ids = kitti::frame_ids(gt_dir)?;
    let pred_ids = kitti::frame_ids(pred_dir)?;
    if !pred_ids.is_empty() {
        let missing: Vec<&str> = ids
            .iter()
            .filter(|id| pred_ids.binary_search(id).is_err())
            .map(String::as_str)
            .collect();
        if !missing.is_empty() {
            return Err(Error::Eval(format!(
                "no prediction file for frame(s) {}",
                missing.join(", ")
            )));
        }
    }
    ids.iter()
        .map(|id| {
            let gts = kitti::read_labels(&gt_dir.join(format!("{id}.txt")))?;
            let dets = if pred_ids.is_empty() {
                Vec::new()
            } else {
                kitti::read_labels(&pred_dir.join(format!("{id}.txt")))?
            };
            Ok(FrameData { gts, dets })
        })
        .collect()
}

pub fn evaluate_dataset(pred_dir: &Path, gt_dir: &Path, cfg: &EvalConfig) -> Result<EvalReport> {
    evaluate_frames(&load_frames(pred_dir, gt_dir)?, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Box2d;

    fn car(x: f64, score: Option<f64>) -> KittiLabel {
        KittiLabel {
            kind: "Car".into(),
            truncated: 0.0,
            occluded: 0,
            alpha: 0.0,
            bbox: Box2d::new(100.0, 100.0, 200.0, 160.0),
            dims: [1.5, 1.6, 3.9],
            location: [x, 1.6, 20.0],
            rotation_y: 0.0,
            score,
        }
    }

    #[test]
    fn perfect_and_empty() {
        let gts = vec![car(0.0, None), car(5.0, None)];
        let dets = vec![car(0.0, Some(0.9)), car(5.0, Some(0.8))];
        let frames = vec![FrameData { gts: gts.clone(), dets }];
        let r = evaluate_frames(&frames, &EvalConfig::default()).unwrap();
        for (_, v) in &r.rows {
            assert_eq!(v, &[100.0; 3]);
        }
        let none = vec![FrameData { gts, dets: vec![] }];
        let r = evaluate_frames(&none, &EvalConfig::default()).unwrap();
        assert!(r.rows.iter().all(|(_, v)| v == &[0.0; 3]));
    }

    #[test]
    fn half_recall() {
        let m = Matching {
            outcomes: vec![ScoredOutcome {
                score: 0.9,
                true_positive: true,
            }],
            valid_gts: 2,
        };
        assert_eq!(ap40(&m), 50.0);
    }

    #[test]
    fn ignored_gt_absorbs_detection() {
        let mut van = car(0.0, None);
        van.kind = "Van".into();
        let frames = vec![FrameData {
            gts: vec![van, car(8.0, None)],
            dets: vec![car(0.0, Some(0.95)), car(8.0, Some(0.9))],
        }];
        let m = match_detections(&frames, &EvalConfig::default(), Metric::Ap3d, Difficulty::Easy);
        assert_eq!(m.outcomes.len(), 1);
        assert_eq!(m.valid_gts, 1);
    }

    #[test]
    fn report_layout() {
        let r = EvalReport {
            class: "Car".into(),
            iou_threshold: 0.7,
            rows: vec![(Metric::Ap3d, [100.0, 50.0, 25.0])],
        };
        let t = r.to_text();
        assert!(t.contains("AP3D@IoU=0.7"));
        assert!(t.contains("100.00  50.00  25.00"));
        assert!(r.to_csv().ends_with("AP3D,100.0000,50.0000,25.0000\n"));
    }
}
