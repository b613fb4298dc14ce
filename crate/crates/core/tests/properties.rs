//! Invariants over randomly generated inputs.

use auxdepth::config::RunConfig;
use auxdepth::geometry::{iou_3d, iou_bev, wrap_angle, Box2d, Box3d};
use auxdepth::head::{decode, encode, nms_indices, Anchor, CAR_PRIOR_DIMS};
use auxdepth::kitti::{flip_label, parse_label_line, AppliedTransforms, Calibration, KittiLabel};
use auxdepth::lid::{Lid, LidConfig};
use auxdepth::tensor::{checkpoint, ParamStore, Real, Rng, Tape, Tensor};
use proptest::prelude::*;

fn box3d() -> impl Strategy<Value = Box3d> {
    (
        -10.0..10.0f64,
        0.5..2.5f64,
        5.0..60.0f64,
        0.5..3.0f64,
        0.5..3.0f64,
        0.5..6.0f64,
        -3.2..3.2f64,
    )
        .prop_map(|(x, y, z, h, w, l, ry)| Box3d { x, y, z, h, w, l, ry })
}

fn box2d() -> impl Strategy<Value = Box2d> {
    (0.0..600.0f64, 0.0..300.0f64, 1.0..200.0f64, 1.0..150.0f64)
        .prop_map(|(x, y, w, h)| Box2d::new(x, y, x + w, y + h))
}

fn kitti_calib() -> Calibration {
    Calibration::new([
        [721.5377, 0.0, 609.5593, 44.85728],
        [0.0, 721.5377, 172.854, 0.2163791],
        [0.0, 0.0, 1.0, 0.002745884],
    ])
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn iou_is_symmetric_and_bounded(a in box3d(), b in box3d()) {
        for f in [iou_bev, iou_3d] {
            let (ab, ba) = (f(&a, &b), f(&b, &a));
            prop_assert!((ab - ba).abs() < 1e-9);
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert!((f(&a, &a) - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn iou_is_invariant_to_shared_translation(a in box3d(), b in box3d(), dx in -5.0..5.0f64, dz in -5.0..5.0f64) {
        let shift = |t: &Box3d| Box3d { x: t.x + dx, z: t.z + dz, ..*t };
        prop_assert!((iou_bev(&a, &b) - iou_bev(&shift(&a), &shift(&b))).abs() < 1e-9);
    }

    #[test]
    fn box2d_iou_is_bounded(a in box2d(), b in box2d()) {
        let v = a.iou(&b);
        prop_assert!((0.0..=1.0).contains(&v));
        prop_assert!((a.iou(&a) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn nms_survivors_do_not_overlap(
        boxes in prop::collection::vec(box2d(), 0..40),
        thr in 0.05..0.95f64,
        seed in any::<u64>(),
    ) {
        let mut rng = Rng::seed(seed);
        let scores: Vec<f64> = boxes.iter().map(|_| rng.uniform()).collect();
        let kept = nms_indices(&boxes, &scores, thr);
        for (i, &a) in kept.iter().enumerate() {
            for &b in &kept[i + 1..] {
                prop_assert!(boxes[a].iou(&boxes[b]) <= thr);
                prop_assert!(scores[a] >= scores[b]);
            }
        }
        for d in (0..boxes.len()).filter(|i| !kept.contains(i)) {
            prop_assert!(kept.iter().any(|&k| scores[k] >= scores[d] && boxes[k].iou(&boxes[d]) > thr));
        }
    }

    #[test]
    fn lid_bins_are_monotone(d_min in 0.1..5.0f64, span in 1.0..100.0f64, bins in 2usize..96, a in 0.0..1.0f64, b in 0.0..1.0f64) {
        let lid = Lid::new(LidConfig::new(d_min, d_min + span, bins).unwrap()).unwrap();
        let (lo, hi) = (a.min(b), a.max(b));
        let (dl, dh) = (d_min + lo * span, d_min + hi * span);
        prop_assert!(lid.depth_to_bin(dl) <= lid.depth_to_bin(dh));
        let i = lid.depth_to_bin(dl);
        prop_assert!(i < bins);
        prop_assert!(lid.edges()[i] <= dl && (dl < lid.edges()[i + 1] || i == bins - 1));
    }

    #[test]
    fn regression_encoding_round_trips(b in box3d(), bbox in box2d(), acx in 50.0..1200.0f64, acy in 20.0..300.0f64, s in 16.0..128.0f64, z0 in 5.0..60.0f64) {
        let calib = kitti_calib();
        prop_assume!(calib.project(b.center()).is_some());
        let anchor = Anchor { bbox: Box2d::from_center(acx, acy, s, s), z0, dims: CAR_PRIOR_DIMS, ry0: 0.0 };
        let t = encode(&anchor, &bbox, &b, &calib).unwrap();
        let (bb, b3) = decode(0, &anchor, &t, &calib).unwrap();
        for (g, w) in [(bb.x1, bbox.x1), (bb.y1, bbox.y1), (bb.x2, bbox.x2), (bb.y2, bbox.y2)] {
            prop_assert!((g - w).abs() < 1e-6);
        }
        for (g, w) in [(b3.x, b.x), (b3.y, b.y), (b3.z, b.z), (b3.h, b.h), (b3.w, b.w), (b3.l, b.l)] {
            prop_assert!((g - w).abs() < 1e-6, "{g} vs {w}");
        }
        prop_assert!(wrap_angle(b3.ry - b.ry).abs() < 1e-9);
    }

    #[test]
    fn label_lines_round_trip(b in box3d(), bbox in box2d(), score in prop::option::of(0.0..1.0f64)) {
        let l = KittiLabel::from_box3d("Car", bbox, &b, score);
        let parsed = parse_label_line(&l.to_line(), 1).unwrap();
        prop_assert_eq!(&parsed.kind, "Car");
        prop_assert!((parsed.location[2] - b.z).abs() <= 0.005 + 1e-9);
        prop_assert!((parsed.rotation_y - b.ry).abs() <= 0.005 + 1e-9);
        prop_assert_eq!(parsed.score.is_some(), score.is_some());
        prop_assert_eq!(parse_label_line(&parsed.to_line(), 1).unwrap(), parsed);
    }

    #[test]
    fn flipping_a_label_twice_is_identity(b in box3d(), bbox in box2d()) {
        let l = KittiLabel::from_box3d("Car", bbox, &b, None);
        let back = flip_label(&flip_label(&l, 1242.0), 1242.0);
        prop_assert!((back.bbox.x1 - l.bbox.x1).abs() < 1e-9 && (back.bbox.x2 - l.bbox.x2).abs() < 1e-9);
        prop_assert!((back.location[0] - l.location[0]).abs() < 1e-12);
        prop_assert!(wrap_angle(back.rotation_y - l.rotation_y).abs() < 1e-9);
    }

    #[test]
    fn transformed_calibration_projects_like_transformed_pixels(b in box3d(), flipped in any::<bool>(), ow in 64usize..1280, oh in 32usize..288) {
        let calib = kitti_calib();
        let t = AppliedTransforms { crop_top: 100, cropped_width: 1242, cropped_height: 275, flipped, out_width: ow, out_height: oh };
        let adjusted = t.adjust_calibration(&calib);
        let p = b.center();
        let mirrored = if flipped { [-p[0], p[1], p[2]] } else { p };
        let Some((u, v)) = adjusted.project(mirrored) else { return Ok(()) };
        let Some((su, sv)) = calib.project(p) else { return Ok(()) };
        let (bu, bv) = t.source_point(u, v);
        prop_assert!((bu - su).abs() < 1e-6 && (bv - sv).abs() < 1e-6, "{bu},{bv} vs {su},{sv}");
    }

    #[test]
    fn softmax_rows_are_distributions(vals in prop::collection::vec(-30.0..30.0f64, 1..40), axis in 0usize..2) {
        let n = vals.len();
        let x = Tensor::new(&[1, n], vals.iter().map(|&v| v as Real).collect()).unwrap();
        let x = if axis == 0 { x.reshape(&[n, 1]).unwrap() } else { x };
        let mut tape = Tape::new();
        let v = tape.constant(x);
        let s = tape.softmax(v, axis).unwrap();
        let total: f64 = tape.value(s).data().iter().map(|&p| p as f64).sum();
        prop_assert!((total - 1.0).abs() < 1e-5);
        prop_assert!(tape.value(s).data().iter().all(|&p| p >= 0.0));
    }

    #[test]
    fn checkpoints_round_trip(shapes in prop::collection::vec(prop::collection::vec(1usize..5, 1..4), 1..5), seed in any::<u64>()) {
        let mut rng = Rng::seed(seed);
        let mut store = ParamStore::new();
        for (i, s) in shapes.iter().enumerate() {
            store.insert(format!("p{i}.w"), rng.tensor_uniform(s, -2.0, 2.0));
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        checkpoint::save(&path, &store).unwrap();
        let back = checkpoint::load(&path).unwrap();
        prop_assert_eq!(back.len(), store.len());
        for (name, t) in store.iter() {
            prop_assert_eq!(back.get(name).unwrap(), t);
        }
    }

    #[test]
    fn rng_streams_are_reproducible(seed in any::<u64>(), stream in any::<u64>()) {
        let draw = |s: u64| { let mut r = Rng::stream(seed, s); (0..4).map(|_| r.uniform()).collect::<Vec<_>>() };
        prop_assert_eq!(draw(stream), draw(stream));
        prop_assert_ne!(draw(stream), draw(stream.wrapping_add(1)));
    }

    #[test]
    fn printed_config_resolves_to_itself(seed in any::<u64>(), lr in 1e-5..1e-2f64, bins in 4usize..80, dil_i in 0usize..5) {
        let dil = [1, 2, 4, 8, 16][dil_i];
        let overrides: Vec<(String, String)> = vec![
            ("seed".into(), seed.to_string()),
            ("train.lr".into(), lr.to_string()),
            ("lid.bins".into(), bins.to_string()),
            ("adf.dilation".into(), dil.to_string()),
        ];
        let cfg = RunConfig::resolve(None, &overrides).unwrap();
        let again = RunConfig::resolve(Some(&cfg.to_text()), &[]).unwrap();
        prop_assert_eq!(cfg.to_text(), again.to_text());
    }
}
