//! KITTI-format labels, calibration, difficulty levels, dataset layout, and the
//! image preprocessing pipeline.
//!
//! Pixel coordinates treat pixel `i` as covering `[i, i + 1)`, so a horizontal flip
//! maps `u` to `W − u` and a resize scales coordinates by the size ratio.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::geometry::{wrap_angle, Box2d, Box3d};
use crate::tensor::{Real, Rng, Tensor};

pub const NORMALIZE_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const NORMALIZE_STD: [f64; 3] = [0.229, 0.224, 0.225];
pub const CROP_TOP: usize = 100;
pub const RESIZE_WIDTH: usize = 1280;
pub const RESIZE_HEIGHT: usize = 288;
pub const FLIP_PROBABILITY: f64 = 0.5;

#[derive(Clone, Debug, PartialEq)]
pub struct KittiLabel {
    pub kind: String,
    pub truncated: f64,
    pub occluded: i32,
    pub alpha: f64,
    pub bbox: Box2d,
    /// Height, width, length in meters.
    pub dims: [f64; 3],
    /// Bottom-face center in camera coordinates.
    pub location: [f64; 3],
    pub rotation_y: f64,
    pub score: Option<f64>,
}

impl KittiLabel {
    pub fn is_dont_care(&self) -> bool {
        self.kind == "DontCare"
    }

    pub fn box3d(&self) -> Box3d {
        Box3d {
            x: self.location[0],
            y: self.location[1],
            z: self.location[2],
            h: self.dims[0],
            w: self.dims[1],
            l: self.dims[2],
            ry: self.rotation_y,
        }
    }

    pub fn from_box3d(kind: &str, bbox: Box2d, b: &Box3d, score: Option<f64>) -> Self {
        KittiLabel {
            kind: kind.to_string(),
            truncated: 0.0,
            occluded: 0,
            alpha: observation_angle(b),
            bbox,
            dims: [b.h, b.w, b.l],
            location: [b.x, b.y, b.z],
            rotation_y: b.ry,
            score,
        }
    }

    /// One line in KITTI column order, floats written with two decimals.
    pub fn to_line(&self) -> String {
        let mut s = format!(
            "{} {:.2} {} {:.2} {:.2} {:.2} {:.2} {:.2} {:.2} {:.2} {:.2} {:.2} {:.2} {:.2} {:.2}",
            self.kind,
            self.truncated,
            self.occluded,
            self.alpha,
            self.bbox.x1,
            self.bbox.y1,
            self.bbox.x2,
            self.bbox.y2,
            self.dims[0],
            self.dims[1],
            self.dims[2],
            self.location[0],
            self.location[1],
            self.location[2],
            self.rotation_y
        );
        if let Some(score) = self.score {
            write!(s, " {score:.2}").expect("write to string");
        }
        s
    }
}

/// Viewing angle `alpha = ry − atan2(x, z)`, wrapped.
pub fn observation_angle(b: &Box3d) -> f64 {
    wrap_angle(b.ry - b.x.atan2(b.z))
}

const COLUMNS: [&str; 16] = [
    "type",
    "truncated",
    "occluded",
    "alpha",
    "bbox_left",
    "bbox_top",
    "bbox_right",
    "bbox_bottom",
    "height",
    "width",
    "length",
    "x",
    "y",
    "z",
    "rotation_y",
    "score",
];

/// Parses one label line; `line_no` is only used in error messages.
pub fn parse_label_line(line: &str, line_no: usize) -> Result<KittiLabel> {
    let f: Vec<&str> = line.split_whitespace().collect();
    if f.len() != 15 && f.len() != 16 {
        return Err(Error::Parse {
            line: line_no,
            msg: format!("expected 15 or 16 fields, found {}", f.len()),
        });
    }
    let num = |i: usize| -> Result<f64> {
        f[i].parse::<f64>().map_err(|_| Error::Parse {
            line: line_no,
            msg: format!("column `{}` is not numeric: `{}`", COLUMNS[i], f[i]),
        })
    };
    let occluded = f[2].parse::<i32>().or_else(|_| num(2).map(|v| v as i32))?;
    Ok(KittiLabel {
        kind: f[0].to_string(),
        truncated: num(1)?,
        occluded,
        alpha: num(3)?,
        bbox: Box2d::new(num(4)?, num(5)?, num(6)?, num(7)?),
        dims: [num(8)?, num(9)?, num(10)?],
        location: [num(11)?, num(12)?, num(13)?],
        rotation_y: num(14)?,
        score: if f.len() == 16 { Some(num(15)?) } else { None },
    })
}

/// Parses a whole label file; blank lines are skipped, line numbers are 1-based.
pub fn parse_labels(text: &str) -> Result<Vec<KittiLabel>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| parse_label_line(l, i + 1))
        .collect()
}

pub fn read_labels(path: &Path) -> Result<Vec<KittiLabel>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_labels(&text).map_err(|e| e.context(path.display().to_string()))
}

pub fn write_labels(path: &Path, labels: &[KittiLabel]) -> Result<()> {
    let mut text = String::new();
    for l in labels {
        text.push_str(&l.to_line());
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Difficulty {
    Easy,
    Moderate,
    Hard,
    Ignored,
}

impl Difficulty {
    pub const LEVELS: [Difficulty; 3] = [Difficulty::Easy, Difficulty::Moderate, Difficulty::Hard];

    pub fn name(self) -> &'static str {
        match self {
            Difficulty::Easy => "Easy",
            Difficulty::Moderate => "Moderate",
            Difficulty::Hard => "Hard",
            Difficulty::Ignored => "Ignored",
        }
    }

    /// Minimum 2D box height in pixels.
    pub fn min_height(self) -> f64 {
        match self {
            Difficulty::Easy => 40.0,
            Difficulty::Moderate | Difficulty::Hard => 25.0,
            Difficulty::Ignored => f64::INFINITY,
        }
    }

    pub fn max_occlusion(self) -> i32 {
        match self {
            Difficulty::Easy => 0,
            Difficulty::Moderate => 1,
            Difficulty::Hard => 2,
            Difficulty::Ignored => -1,
        }
    }

    pub fn max_truncation(self) -> f64 {
        match self {
            Difficulty::Easy => 0.15,
            Difficulty::Moderate => 0.30,
            Difficulty::Hard => 0.50,
            Difficulty::Ignored => -1.0,
        }
    }
}

/// The easiest level whose height, occlusion, and truncation limits the label meets.
pub fn classify_difficulty(label: &KittiLabel) -> Difficulty {
    let h = label.bbox.height();
    Difficulty::LEVELS
        .into_iter()
        .find(|d| {
            h >= d.min_height()
                && label.occluded <= d.max_occlusion()
                && label.truncated <= d.max_truncation()
        })
        .unwrap_or(Difficulty::Ignored)
}

/// The left color camera's 3×4 projection matrix.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Calibration {
    pub p2: [[f64; 4]; 3],
}

impl Calibration {
    pub fn new(p2: [[f64; 4]; 3]) -> Result<Self> {
        if !(p2[0][0] > 0.0) || p2.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Geometry(format!(
                "P2 must be finite with a positive focal length, got {p2:?}"
            )));
        }
        Ok(Calibration { p2 })
    }

    /// Projects a camera-frame point; `None` at or behind the image plane.
    pub fn project(&self, p: [f64; 3]) -> Option<(f64, f64)> {
        let row = |r: usize| self.p2[r][0] * p[0] + self.p2[r][1] * p[1] + self.p2[r][2] * p[2] + self.p2[r][3];
        let s = row(2);
        (s > 1e-9).then(|| (row(0) / s, row(1) / s))
    }

    /// Camera-frame point at depth `z` that projects to `(u, v)`.
    pub fn unproject(&self, u: f64, v: f64, z: f64) -> Result<[f64; 3]> {
        let p = &self.p2;
        let a = [
            [p[0][0] - u * p[2][0], p[0][1] - u * p[2][1]],
            [p[1][0] - v * p[2][0], p[1][1] - v * p[2][1]],
        ];
        let b = [
            u * (p[2][2] * z + p[2][3]) - p[0][2] * z - p[0][3],
            v * (p[2][2] * z + p[2][3]) - p[1][2] * z - p[1][3],
        ];
        let det = a[0][0] * a[1][1] - a[0][1] * a[1][0];
        if det.abs() < 1e-12 {
            return Err(Error::Geometry("projection is singular at this pixel".into()));
        }
        Ok([
            (b[0] * a[1][1] - a[0][1] * b[1]) / det,
            (a[0][0] * b[1] - b[0] * a[1][0]) / det,
            z,
        ])
    }

    /// Tight image box around the projected corners, clipped to the image, or `None`
    /// when a corner lies behind the camera.
    pub fn project_box(&self, b: &Box3d, width: f64, height: f64) -> Option<Box2d> {
        let mut out = Box2d::new(f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
        for c in b.corners() {
            let (u, v) = self.project(c)?;
            out.x1 = out.x1.min(u);
            out.y1 = out.y1.min(v);
            out.x2 = out.x2.max(u);
            out.y2 = out.y2.max(v);
        }
        Some(out.clip(width, height))
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for name in ["P0", "P1", "P2", "P3"] {
            let vals: Vec<String> = self.p2.iter().flatten().map(|v| format!("{v:.12e}")).collect();
            writeln!(s, "{name}: {}", vals.join(" ")).expect("write to string");
        }
        s
    }
}

pub fn parse_calibration(text: &str) -> Result<Calibration> {
    for (i, line) in text.lines().enumerate() {
        let Some(rest) = line.trim().strip_prefix("P2:") else {
            continue;
        };
        let vals: Vec<f64> = rest
            .split_whitespace()
            .map(|t| {
                t.parse().map_err(|_| Error::Parse {
                    line: i + 1,
                    msg: format!("P2 entry `{t}` is not numeric"),
                })
            })
            .collect::<Result<_>>()?;
        if vals.len() != 12 {
            return Err(Error::Parse {
                line: i + 1,
                msg: format!("P2 needs 12 values, found {}", vals.len()),
            });
        }
        let mut p2 = [[0.0; 4]; 3];
        for (k, v) in vals.into_iter().enumerate() {
            p2[k / 4][k % 4] = v;
        }
        return Calibration::new(p2);
    }
    Err(Error::Parse {
        line: 0,
        msg: "no `P2:` line".into(),
    })
}

pub fn read_calibration(path: &Path) -> Result<Calibration> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_calibration(&text).map_err(|e| e.context(path.display().to_string()))
}

/// Loads an 8-bit RGB image as `[3, H, W]` with values in `[0, 1]`.
pub fn load_image(path: &Path) -> Result<Tensor> {
    let img = image::open(path)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    Ok(Tensor::from_fn(&[3, h, w], |i| {
        let (c, p) = (i / (h * w), i % (h * w));
        raw[p * 3 + c] as Real / 255.0
    }))
}

/// Writes a `[3, H, W]` image in `[0, 1]` as an 8-bit PNG.
pub fn save_image(path: &Path, img: &Tensor) -> Result<()> {
    let &[3, h, w] = img.shape() else {
        return Err(Error::Dimension(format!("expected a [3, H, W] image, got {:?}", img.shape())));
    };
    let d = img.data();
    let mut buf = vec![0u8; h * w * 3];
    for p in 0..h * w {
        for c in 0..3 {
            buf[p * 3 + c] = (d[c * h * w + p].clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    image::save_buffer(path, &buf, w as u32, h as u32, image::ColorType::Rgb8).map_err(|e| {
        Error::Image {
            path: path.to_path_buf(),
            msg: e.to_string(),
        }
    })
}

/// Depth map file: `height`, `width`, `channels` as little-endian u32, then
/// row-major little-endian f32 values.
pub fn write_depth(path: &Path, depth: &Tensor) -> Result<()> {
    let &[h, w] = depth.shape() else {
        return Err(Error::Dimension(format!("expected an [H, W] depth map, got {:?}", depth.shape())));
    };
    let mut buf = Vec::with_capacity(12 + 4 * h * w);
    for v in [h as u32, w as u32, 1] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for v in depth.data() {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_depth(path: &Path) -> Result<Tensor> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    let word = |i: usize| -> Option<u32> {
        buf.get(4 * i..4 * i + 4).map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
    };
    let bad = |msg: &str| Error::Image {
        path: path.to_path_buf(),
        msg: msg.to_string(),
    };
    let (h, w, c) = match (word(0), word(1), word(2)) {
        (Some(h), Some(w), Some(c)) => (h as usize, w as usize, c as usize),
        _ => return Err(bad("depth header truncated")),
    };
    if c != 1 || buf.len() != 12 + 4 * h * w {
        return Err(bad("depth payload does not match its header"));
    }
    let data = buf[12..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as Real)
        .collect();
    Tensor::new(&[h, w], data)
}

/// Paths of one frame in a KITTI-style directory tree.
#[derive(Clone, Debug)]
pub struct Frame {
    pub id: String,
    pub image: PathBuf,
    pub label: PathBuf,
    pub calib: PathBuf,
    pub depth: PathBuf,
}

impl Frame {
    pub fn new(root: &Path, id: &str) -> Self {
        Frame {
            id: id.to_string(),
            image: root.join("image_2").join(format!("{id}.png")),
            label: root.join("label_2").join(format!("{id}.txt")),
            calib: root.join("calib").join(format!("{id}.txt")),
            depth: root.join("depth").join(format!("{id}.bin")),
        }
    }
}

/// Sorted frame ids of the `.txt` files in `dir`.
pub fn frame_ids(dir: &Path) -> Result<Vec<String>> {
    let mut ids = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e == "txt") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                ids.push(stem.to_string());
            }
        }
    }
    ids.sort();
    Ok(ids)
}

pub fn dataset_frames(root: &Path) -> Result<Vec<Frame>> {
    Ok(frame_ids(&root.join("label_2"))?
        .iter()
        .map(|id| Frame::new(root, id))
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PreprocessConfig {
    pub crop_top: usize,
    pub out_width: usize,
    pub out_height: usize,
    pub mean: [f64; 3],
    pub std: [f64; 3],
    pub flip_probability: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            crop_top: CROP_TOP,
            out_width: RESIZE_WIDTH,
            out_height: RESIZE_HEIGHT,
            mean: NORMALIZE_MEAN,
            std: NORMALIZE_STD,
            flip_probability: FLIP_PROBABILITY,
            brightness: 0.2,
            contrast: 0.2,
            saturation: 0.2,
            hue: 0.05,
        }
    }
}

/// What [`preprocess`] did, for adjusting labels and calibration to match.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AppliedTransforms {
    pub crop_top: usize,
    /// Size after cropping, before resizing.
    pub cropped_width: usize,
    pub cropped_height: usize,
    pub flipped: bool,
    pub out_width: usize,
    pub out_height: usize,
}

impl AppliedTransforms {
    pub fn scale_x(&self) -> f64 {
        self.out_width as f64 / self.cropped_width as f64
    }

    pub fn scale_y(&self) -> f64 {
        self.out_height as f64 / self.cropped_height as f64
    }

    /// Crop shifts the principal point, the flip mirrors both the image and the
    /// camera x axis, and the resize scales the first two rows.
    pub fn adjust_calibration(&self, calib: &Calibration) -> Calibration {
        let mut p = calib.p2;
        for c in 0..4 {
            p[1][c] -= self.crop_top as f64 * p[2][c];
        }
        if self.flipped {
            let w = self.cropped_width as f64;
            for c in 0..4 {
                p[0][c] = w * p[2][c] - p[0][c];
            }
            for row in &mut p {
                row[0] = -row[0];
            }
        }
        let (sx, sy) = (self.scale_x(), self.scale_y());
        for c in 0..4 {
            p[0][c] *= sx;
            p[1][c] *= sy;
        }
        Calibration { p2: p }
    }

    /// Maps a point in output pixel coordinates back to the source image.
    pub fn source_point(&self, u: f64, v: f64) -> (f64, f64) {
        let mut u = u / self.scale_x();
        if self.flipped {
            u = self.cropped_width as f64 - u;
        }
        (u, v / self.scale_y() + self.crop_top as f64)
    }

    /// Maps a box in output pixel coordinates back to the source image.
    pub fn restore_box(&self, b: &Box2d) -> Box2d {
        let (u1, v1) = self.source_point(b.x1, b.y1);
        let (u2, v2) = self.source_point(b.x2, b.y2);
        Box2d::new(u1.min(u2), v1, u1.max(u2), v2)
    }

    pub fn adjust_labels(&self, labels: &[KittiLabel]) -> Vec<KittiLabel> {
        let (sx, sy) = (self.scale_x(), self.scale_y());
        let top = self.crop_top as f64;
        labels
            .iter()
            .map(|l| {
                let mut l = l.clone();
                l.bbox = Box2d::new(l.bbox.x1, l.bbox.y1 - top, l.bbox.x2, l.bbox.y2 - top);
                if self.flipped {
                    l = flip_label(&l, self.cropped_width as f64);
                }
                l.bbox = Box2d::new(l.bbox.x1 * sx, l.bbox.y1 * sy, l.bbox.x2 * sx, l.bbox.y2 * sy);
                l
            })
            .collect()
    }
}

/// Mirrors a label about the vertical image axis of an image `width` pixels wide.
pub fn flip_label(l: &KittiLabel, width: f64) -> KittiLabel {
    let mut out = l.clone();
    out.bbox = Box2d::new(width - l.bbox.x2, l.bbox.y1, width - l.bbox.x1, l.bbox.y2);
    out.location[0] = -l.location[0];
    out.rotation_y = wrap_angle(PI - l.rotation_y);
    out.alpha = wrap_angle(PI - l.alpha);
    out
}

pub fn flip_labels(labels: &[KittiLabel], width: f64) -> Vec<KittiLabel> {
    labels.iter().map(|l| flip_label(l, width)).collect()
}

fn chw(img: &Tensor) -> Result<(usize, usize)> {
    match *img.shape() {
        [3, h, w] => Ok((h, w)),
        ref s => Err(Error::Dimension(format!("expected a [3, H, W] image, got {s:?}"))),
    }
}

pub fn crop_top(img: &Tensor, rows: usize) -> Result<Tensor> {
    let (h, w) = chw(img)?;
    if h <= rows {
        return Err(Error::Geometry(format!(
            "image of height {h} is too short to crop {rows} rows"
        )));
    }
    let nh = h - rows;
    let d = img.data();
    Ok(Tensor::from_fn(&[3, nh, w], |i| {
        let (c, r) = (i / (nh * w), i % (nh * w));
        d[c * h * w + rows * w + r]
    }))
}

pub fn flip_horizontal(img: &Tensor) -> Result<Tensor> {
    let (h, w) = chw(img)?;
    let d = img.data();
    Ok(Tensor::from_fn(&[3, h, w], |i| {
        let x = i % w;
        d[i - x + (w - 1 - x)]
    }))
}

/// Bilinear resize with half-pixel centers and edge clamping.
pub fn resize_bilinear(img: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (h, w) = chw(img)?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::Geometry("resize target must be non-empty".into()));
    }
    let taps = |out: usize, inp: usize| -> Vec<(usize, usize, Real)> {
        let scale = inp as f64 / out as f64;
        (0..out)
            .map(|o| {
                let s = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (inp - 1) as f64);
                let i0 = s.floor() as usize;
                let i1 = (i0 + 1).min(inp - 1);
                (i0, i1, (s - i0 as f64) as Real)
            })
            .collect()
    };
    let (ty, tx) = (taps(out_h, h), taps(out_w, w));
    let d = img.data();
    Ok(Tensor::from_fn(&[3, out_h, out_w], |i| {
        let (c, y, x) = (i / (out_h * out_w), (i / out_w) % out_h, i % out_w);
        let (y0, y1, fy) = ty[y];
        let (x0, x1, fx) = tx[x];
        let at = |yy: usize, xx: usize| d[c * h * w + yy * w + xx];
        let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
        let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
        top * (1.0 - fy) + bottom * fy
    }))
}

pub fn normalize(img: &Tensor, mean: [f64; 3], std: [f64; 3]) -> Result<Tensor> {
    let (h, w) = chw(img)?;
    let d = img.data();
    Ok(Tensor::from_fn(&[3, h, w], |i| {
        let c = i / (h * w);
        (d[i] - mean[c] as Real) / std[c] as Real
    }))
}

/// Brightness, contrast, saturation, and hue distortions on an image in `[0, 1]`.
pub fn photometric_jitter(img: &Tensor, cfg: &PreprocessConfig, rng: &mut Rng) -> Result<Tensor> {
    let (h, w) = chw(img)?;
    let n = h * w;
    let brightness = rng.range(1.0 - cfg.brightness, 1.0 + cfg.brightness) as Real;
    let contrast = rng.range(1.0 - cfg.contrast, 1.0 + cfg.contrast) as Real;
    let saturation = rng.range(1.0 - cfg.saturation, 1.0 + cfg.saturation) as Real;
    let hue = (rng.range(-cfg.hue, cfg.hue) * 2.0 * PI) as Real;
    let mut d: Vec<Real> = img.data().iter().map(|v| v * brightness).collect();
    let gray = |d: &[Real], p: usize| 0.299 * d[p] + 0.587 * d[n + p] + 0.114 * d[2 * n + p];
    let mean_gray = (0..n).map(|p| gray(&d, p)).sum::<Real>() / n as Real;
    for v in &mut d {
        *v = mean_gray + contrast * (*v - mean_gray);
    }
    let (s, c) = hue.sin_cos();
    for p in 0..n {
        let (r, g, b) = (d[p], d[n + p], d[2 * n + p]);
        let y = 0.299 * r + 0.587 * g + 0.114 * b;
        let i0 = 0.596 * r - 0.274 * g - 0.322 * b;
        let q0 = 0.211 * r - 0.523 * g + 0.312 * b;
        let (i, q) = (saturation * (c * i0 - s * q0), saturation * (s * i0 + c * q0));
        d[p] = y + 0.956 * i + 0.621 * q;
        d[n + p] = y - 0.272 * i - 0.647 * q;
        d[2 * n + p] = y - 1.106 * i + 1.703 * q;
    }
    for v in &mut d {
        *v = v.clamp(0.0, 1.0);
    }
    Tensor::new(&[3, h, w], d)
}

/// Train mode: jitter, crop, random flip, resize, normalize. Test mode: crop,
/// resize, normalize.
pub fn preprocess(
    img: &Tensor,
    mode: Mode,
    cfg: &PreprocessConfig,
    rng: &mut Rng,
) -> Result<(Tensor, AppliedTransforms)> {
    let (h, w) = chw(img)?;
    let jittered;
    let src = if mode == Mode::Train {
        jittered = photometric_jitter(img, cfg, rng)?;
        &jittered
    } else {
        img
    };
    let mut cropped = crop_top(src, cfg.crop_top)?;
    let flipped = mode == Mode::Train && rng.bernoulli(cfg.flip_probability);
    if flipped {
        cropped = flip_horizontal(&cropped)?;
    }
    let resized = resize_bilinear(&cropped, cfg.out_height, cfg.out_width)?;
    let out = normalize(&resized, cfg.mean, cfg.std)?;
    Ok((
        out,
        AppliedTransforms {
            crop_top: cfg.crop_top,
            cropped_width: w,
            cropped_height: h - cfg.crop_top,
            flipped,
            out_width: cfg.out_width,
            out_height: cfg.out_height,
        },
    ))
}
