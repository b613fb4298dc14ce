//! Prediction plumbing: ideal head outputs built from the training targets must
//! decode back to the ground truth in source-image coordinates.

use auxdepth::config::RunConfig;
use auxdepth::eval::{evaluate_frames, FrameData, Metric};
use auxdepth::head::{postprocess, REGRESSION_DIMS};
use auxdepth::kitti::{Difficulty, KittiLabel, Mode};
use auxdepth::synth::{write_dataset, SynthConfig};
use auxdepth::tensor::{AnchorLabel, Real, Rng, Tensor};
use auxdepth::train::{load_split, Pipeline};

#[test]
fn ideal_head_outputs_reproduce_ground_truth() {
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), 8, 2, 5, 17, &SynthConfig::default()).unwrap();
    let cfg = RunConfig::resolve(None, &[]).unwrap();
    let pipeline = Pipeline::new(cfg.clone()).unwrap();
    let (rows, cols) = cfg.model.feature_size();
    let hw = rows * cols;
    let per_loc = cfg.head.anchors.per_location();
    let mut frames = Vec::new();
    for f in load_split(dir.path()).unwrap() {
        let prep = pipeline.prepare(&f, Mode::Test, &mut Rng::seed(0)).unwrap();
        let mut logits = Tensor::full(&[per_loc, rows, cols], -10.0);
        let mut deltas = Tensor::zeros(&[per_loc * REGRESSION_DIMS, rows, cols]);
        for (i, l) in prep.targets.cls.iter().enumerate() {
            if matches!(l, AnchorLabel::Positive(_)) {
                logits.data_mut()[(i % per_loc) * hw + i / per_loc] = 10.0;
            }
        }
        for (i, t) in &prep.targets.reg {
            for (j, v) in t.iter().enumerate() {
                deltas.data_mut()[((i % per_loc) * REGRESSION_DIMS + j) * hw + i / per_loc] = *v as Real;
            }
        }
        let dets = postprocess(&logits, &deltas, &pipeline.anchors, 1, &prep.calib, &cfg.head).unwrap();
        let labels = dets
            .iter()
            .map(|d| {
                KittiLabel::from_box3d(
                    "Car",
                    prep.transforms.restore_box(&d.bbox),
                    &d.box3d,
                    Some(d.score),
                )
            })
            .collect();
        frames.push(FrameData {
            gts: f.labels.clone(),
            dets: labels,
        });
    }
    let report = evaluate_frames(&frames, &cfg.eval).unwrap();
    for m in Metric::ALL {
        for level in Difficulty::LEVELS {
            let ap = report.value(m, level).unwrap();
            assert!(ap > 99.0, "{m:?} {level:?}: {ap}\n{}", report.to_text());
        }
    }
}
