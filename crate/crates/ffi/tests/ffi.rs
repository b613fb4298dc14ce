use std::ffi::{CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use auxdepth::kitti::{write_labels, KittiLabel};
use auxdepth::synth::{generate_scene, render, SynthConfig};
use auxdepth_ffi::*;

fn last_error() -> String {
    let p = ad_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn lid_handle_round_trip() {
    let mut lid = ptr::null_mut();
    assert_eq!(unsafe { ad_lid_new(1.0, 65.0, 4, &mut lid) }, AdStatus::Ok);
    let mut edges = [0.0; 5];
    assert_eq!(unsafe { ad_lid_edges(lid, edges.as_mut_ptr(), 5) }, AdStatus::Ok);
    // Arithmetic-progression widths: 1, 2, 3, 4 units of 64/10.
    let unit = 64.0 / 10.0;
    let expect = [1.0, 1.0 + unit, 1.0 + 3.0 * unit, 1.0 + 6.0 * unit, 65.0];
    for (a, e) in edges.iter().zip(expect) {
        assert!((a - e).abs() < 1e-9, "{edges:?}");
    }
    let mut bin = 99;
    assert_eq!(unsafe { ad_lid_depth_to_bin(lid, 10.0, &mut bin) }, AdStatus::Ok);
    assert_eq!(bin, 1);
    let mut center = 0.0;
    assert_eq!(unsafe { ad_lid_bin_center(lid, 0, &mut center) }, AdStatus::Ok);
    assert!((center - (1.0 + unit / 2.0)).abs() < 1e-9);
    assert_eq!(
        unsafe { ad_lid_edges(lid, edges.as_mut_ptr(), 3) },
        AdStatus::BufferTooSmall
    );
    assert_eq!(unsafe { ad_lid_bin_center(lid, 4, &mut center) }, AdStatus::Dimension);
    unsafe { ad_lid_free(lid) };
}

#[test]
fn invalid_arguments_report_status_and_message() {
    let mut lid = ptr::null_mut();
    assert_eq!(unsafe { ad_lid_new(5.0, 1.0, 4, &mut lid) }, AdStatus::Config);
    assert!(lid.is_null());
    assert!(!last_error().is_empty());
    assert_eq!(unsafe { ad_lid_new(1.0, 5.0, 4, ptr::null_mut()) }, AdStatus::NullPointer);
    assert!(last_error().contains("out"));
    let mut iou = 0.0;
    assert_eq!(unsafe { ad_iou_bev(ptr::null(), ptr::null(), &mut iou) }, AdStatus::NullPointer);
    unsafe { ad_lid_free(ptr::null_mut()) };
    unsafe { ad_model_free(ptr::null_mut()) };
}

#[test]
fn iou_of_identical_and_shifted_boxes() {
    let a = AdBox3d {
        x: 0.0,
        y: 1.5,
        z: 10.0,
        h: 1.5,
        w: 2.0,
        l: 4.0,
        ry: 0.0,
    };
    let mut b = a;
    let mut iou = 0.0;
    assert_eq!(unsafe { ad_iou_3d(&a, &b, &mut iou) }, AdStatus::Ok);
    assert!((iou - 1.0).abs() < 1e-12);
    // Half a length along x at ry = 0 leaves half the footprint overlapping.
    b.x = 2.0;
    assert_eq!(unsafe { ad_iou_bev(&a, &b, &mut iou) }, AdStatus::Ok);
    assert!((iou - 1.0 / 3.0).abs() < 1e-9, "{iou}");
    b.y = 0.75;
    assert_eq!(unsafe { ad_iou_3d(&a, &b, &mut iou) }, AdStatus::Ok);
    // Overlap volume 2·2·0.75 = 3 of union 24 − 3 = 21.
    assert!((iou - 3.0 / 21.0).abs() < 1e-9, "{iou}");
}

#[test]
fn nms_keeps_best_of_overlapping() {
    let boxes = [
        AdBox2d { x1: 0.0, y1: 0.0, x2: 10.0, y2: 10.0 },
        AdBox2d { x1: 1.0, y1: 1.0, x2: 11.0, y2: 11.0 },
        AdBox2d { x1: 50.0, y1: 50.0, x2: 60.0, y2: 60.0 },
    ];
    let scores = [0.8, 0.9, 0.7];
    let mut keep = [usize::MAX; 3];
    let mut kept = 0;
    let st = unsafe { ad_nms(boxes.as_ptr(), scores.as_ptr(), 3, 0.4, keep.as_mut_ptr(), &mut kept) };
    assert_eq!(st, AdStatus::Ok);
    assert_eq!(&keep[..kept], &[1, 2]);
    let st = unsafe { ad_nms(boxes.as_ptr(), scores.as_ptr(), 3, 1.5, keep.as_mut_ptr(), &mut kept) };
    assert_eq!(st, AdStatus::InvalidArgument);
}

#[test]
fn parses_label_lines() {
    let line = CString::new(
        "Car 0.00 0 -1.58 587.02 173.33 614.12 200.12 1.65 1.67 3.64 -0.65 1.71 46.70 -1.59 0.93",
    )
    .unwrap();
    let mut l = std::mem::MaybeUninit::<AdLabel>::uninit();
    assert_eq!(unsafe { ad_parse_label_line(line.as_ptr(), l.as_mut_ptr()) }, AdStatus::Ok);
    let l = unsafe { l.assume_init() };
    assert_eq!(unsafe { CStr::from_ptr(l.kind.as_ptr()) }.to_str().unwrap(), "Car");
    assert_eq!(l.has_score, 1);
    assert!((l.score - 0.93).abs() < 1e-12);
    assert!((l.box3d.z - 46.70).abs() < 1e-12);
    let bad = CString::new("Car 0.00 0").unwrap();
    let mut l = std::mem::MaybeUninit::<AdLabel>::uninit();
    assert_eq!(unsafe { ad_parse_label_line(bad.as_ptr(), l.as_mut_ptr()) }, AdStatus::Parse);
    assert!(last_error().contains("15 or 16"));
}

fn write_split(root: &Path, frames: &[Vec<KittiLabel>]) {
    std::fs::create_dir_all(root).unwrap();
    for (i, labels) in frames.iter().enumerate() {
        write_labels(&root.join(format!("{i:06}.txt")), labels).unwrap();
    }
}

#[test]
fn evaluates_perfect_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SynthConfig::default();
    let frames: Vec<Vec<KittiLabel>> = (0..3)
        .map(|i| render(&generate_scene(i, 3, &cfg).unwrap()).unwrap().labels)
        .collect();
    let preds: Vec<Vec<KittiLabel>> = frames
        .iter()
        .map(|ls| {
            ls.iter()
                .map(|l| KittiLabel {
                    score: Some(0.9),
                    ..l.clone()
                })
                .collect()
        })
        .collect();
    write_split(&dir.path().join("gt"), &frames);
    write_split(&dir.path().join("pred"), &preds);
    let (p, g) = (
        CString::new(dir.path().join("pred").to_str().unwrap()).unwrap(),
        CString::new(dir.path().join("gt").to_str().unwrap()).unwrap(),
    );
    let class = CString::new("Car").unwrap();
    let mut out = AdEvalResult::default();
    let st = unsafe { ad_evaluate_dirs(p.as_ptr(), g.as_ptr(), class.as_ptr(), 0.7, &mut out) };
    assert_eq!(st, AdStatus::Ok, "{}", last_error());
    let has_easy = frames.iter().flatten().any(|l| {
        auxdepth::kitti::classify_difficulty(l) == auxdepth::kitti::Difficulty::Easy
    });
    if has_easy {
        assert!((out.ap_3d[0] - 100.0).abs() < 1e-9, "{out:?}");
    }
    assert!((out.ap_bev[2] - 100.0).abs() < 1e-9, "{out:?}");
    let missing = CString::new("/nonexistent/auxdepth").unwrap();
    let st = unsafe { ad_evaluate_dirs(missing.as_ptr(), g.as_ptr(), class.as_ptr(), 0.7, &mut out) };
    assert_eq!(st, AdStatus::Io);
}

#[test]
fn model_detects_on_raw_pixels() {
    let mut model = ptr::null_mut();
    let st = unsafe { ad_model_load(ptr::null(), ptr::null(), &mut model) };
    assert_eq!(st, AdStatus::Ok, "{}", last_error());
    let cfg = SynthConfig::default();
    let scene = generate_scene(3, 2, &cfg).unwrap();
    let r = render(&scene).unwrap();
    let (h, w) = (cfg.height, cfg.width);
    let plane = h * w;
    let rgb: Vec<u8> = (0..3 * plane)
        .map(|i| {
            let (p, c) = (i / 3, i % 3);
            (r.image.data()[c * plane + p] as f64 * 255.0).round() as u8
        })
        .collect();
    let p2: Vec<f64> = scene.calib.p2.iter().flatten().copied().collect();
    let mut dets = vec![AdDetection::default(); 512];
    let mut count = 0;
    let st = unsafe {
        ad_model_detect(model, rgb.as_ptr(), w, h, p2.as_ptr(), dets.as_mut_ptr(), dets.len(), &mut count)
    };
    assert_eq!(st, AdStatus::Ok, "{}", last_error());
    assert!(dets[..count].iter().all(|d| d.score >= 0.75 && d.score <= 1.0));
    // Wrong size: the input does not survive the crop.
    let st = unsafe { ad_model_detect(model, rgb.as_ptr(), 8, 8, p2.as_ptr(), dets.as_mut_ptr(), 0, &mut count) };
    assert_ne!(st, AdStatus::Ok);
    unsafe { ad_model_free(model) };
}

#[test]
fn header_compiles_as_c() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/auxdepth.h");
    assert!(header.exists());
    let Ok(status) = Command::new("cc")
        .args(["-fsyntax-only", "-Wall", "-Werror", "-x", "c"])
        .arg(&header)
        .status()
    else {
        eprintln!("no C compiler available; skipping");
        return;
    };
    assert!(status.success());
}
