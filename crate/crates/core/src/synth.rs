//! Deterministic synthetic street scenes: car-sized boxes on a flat ground plane,
//! rendered by casting one ray per pixel, with dense depth and KITTI labels.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::{iou_bev, Box2d, Box3d};
use crate::kitti::{self, Calibration, Frame, KittiLabel};
use crate::tensor::{Real, Rng, Tensor};

pub const MAX_REJECTIONS: usize = 1000;
pub const MAX_BEV_IOU: f64 = 0.1;
/// Camera height above the ground plane.
pub const CAMERA_HEIGHT: f64 = 1.65;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub width: usize,
    pub height: usize,
    pub calib: Calibration,
    pub z_min: f64,
    pub z_max: f64,
    /// Nominal height, width, length; each is scaled by a factor in `1 ± dim_jitter`.
    pub dims: [f64; 3],
    pub dim_jitter: f64,
    pub noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            width: 640,
            height: 292,
            calib: Calibration {
                p2: [
                    [371.0, 0.0, 320.0, 23.1],
                    [0.0, 371.0, 140.0, 0.11],
                    [0.0, 0.0, 1.0, 0.0027],
                ],
            },
            z_min: 5.0,
            z_max: 50.0,
            dims: [1.6, 1.6, 3.9],
            dim_jitter: 0.2,
            noise: 0.02,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub seed: u64,
    pub boxes: Vec<Box3d>,
    pub calib: Calibration,
    pub width: usize,
    pub height: usize,
    /// Amplitude of the uniform per-channel pixel noise.
    pub noise: f64,
}

/// Places `n_objects` cars whose footprints overlap pairwise below [`MAX_BEV_IOU`]
/// and whose centers project inside the image.
pub fn generate_scene(seed: u64, n_objects: usize, cfg: &SynthConfig) -> Result<Scene> {
    let mut rng = Rng::stream(seed, 0);
    let p = &cfg.calib.p2;
    let mut boxes: Vec<Box3d> = Vec::with_capacity(n_objects);
    let mut rejections = 0;
    while boxes.len() < n_objects {
        let z = rng.range(cfg.z_min, cfg.z_max);
        let u = rng.range(0.05, 0.95) * cfg.width as f64;
        let x = (u - p[0][2]) * z / p[0][0];
        let [h, w, l] = cfg.dims.map(|d| d * rng.range(1.0 - cfg.dim_jitter, 1.0 + cfg.dim_jitter));
        let ry = PI - rng.range(0.0, 2.0 * PI);
        let b = Box3d {
            x,
            y: CAMERA_HEIGHT,
            z,
            h,
            w,
            l,
            ry,
        };
        let clear = b.corners().iter().all(|c| c[2] > 0.5)
            && boxes.iter().all(|o| iou_bev(o, &b) < MAX_BEV_IOU);
        if clear {
            boxes.push(b);
            continue;
        }
        rejections += 1;
        if rejections >= MAX_REJECTIONS {
            return Err(Error::Generation(format!(
                "placed {} of {n_objects} objects before {MAX_REJECTIONS} rejections (seed {seed})",
                boxes.len()
            )));
        }
    }
    Ok(Scene {
        seed,
        boxes,
        calib: cfg.calib,
        width: cfg.width,
        height: cfg.height,
        noise: cfg.noise,
    })
}

pub struct Rendered {
    /// `[3, H, W]` in `[0, 1]`.
    pub image: Tensor,
    /// `[H, W]` camera-frame depth of the nearest surface, `+inf` on background.
    pub depth: Tensor,
    pub labels: Vec<KittiLabel>,
}

fn invert3(m: [[f64; 3]; 3]) -> Result<[[f64; 3]; 3]> {
    let c = |r: usize, k: usize| m[(r + 1) % 3][(k + 1) % 3] * m[(r + 2) % 3][(k + 2) % 3]
        - m[(r + 1) % 3][(k + 2) % 3] * m[(r + 2) % 3][(k + 1) % 3];
    let det = m[0][0] * c(0, 0) + m[0][1] * c(0, 1) + m[0][2] * c(0, 2);
    if det.abs() < 1e-12 {
        return Err(Error::Geometry("camera matrix is singular".into()));
    }
    let mut out = [[0.0; 3]; 3];
    for r in 0..3 {
        for k in 0..3 {
            out[k][r] = c(r, k) / det;
        }
    }
    Ok(out)
}

fn mul3(m: &[[f64; 3]; 3], v: [f64; 3]) -> [f64; 3] {
    [0, 1, 2].map(|r| m[r][0] * v[0] + m[r][1] * v[1] + m[r][2] * v[2])
}

/// Entry distance along the ray and the entered face's local axis and side.
fn ray_box(origin: [f64; 3], dir: [f64; 3], b: &Box3d) -> Option<(f64, usize, bool)> {
    let c = b.center();
    let (s, co) = b.ry.sin_cos();
    let local = |v: [f64; 3]| [co * v[0] - s * v[2], v[1], s * v[0] + co * v[2]];
    let o = local([origin[0] - c[0], origin[1] - c[1], origin[2] - c[2]]);
    let d = local(dir);
    let half = [0.5 * b.l, 0.5 * b.h, 0.5 * b.w];
    let (mut t_in, mut t_out, mut axis, mut positive) = (f64::NEG_INFINITY, f64::INFINITY, 0, false);
    for k in 0..3 {
        if d[k].abs() < 1e-15 {
            if o[k].abs() > half[k] {
                return None;
            }
            continue;
        }
        let (t1, t2) = ((-half[k] - o[k]) / d[k], (half[k] - o[k]) / d[k]);
        let (near, far) = if t1 < t2 { (t1, t2) } else { (t2, t1) };
        if near > t_in {
            t_in = near;
            axis = k;
            positive = t2 < t1;
        }
        t_out = t_out.min(far);
    }
    (t_in <= t_out && t_in > 0.0).then_some((t_in, axis, positive))
}

fn object_color(index: usize) -> [f64; 3] {
    let hue = (index as f64 * 0.618_033_988_75 + 0.1).fract() * 6.0;
    let (s, v) = (0.7, 0.9);
    let f = hue.fract();
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match hue as usize {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Brightness of each face: `[−x, +x, top, bottom, −z, +z]` in box-local axes.
const FACE_SHADE: [f64; 6] = [0.55, 0.75, 1.0, 0.35, 0.65, 0.85];

pub fn render(scene: &Scene) -> Result<Rendered> {
    let (w, h) = (scene.width, scene.height);
    let p = &scene.calib.p2;
    let m = [
        [p[0][0], p[0][1], p[0][2]],
        [p[1][0], p[1][1], p[1][2]],
        [p[2][0], p[2][1], p[2][2]],
    ];
    let minv = invert3(m)?;
    let t = mul3(&minv, [p[0][3], p[1][3], p[2][3]]);
    let origin = [-t[0], -t[1], -t[2]];
    let horizon = scene.calib.project([0.0, 0.0, 1e6]).map_or(0.0, |(_, v)| v);

    let mut rng = Rng::stream(scene.seed, 1);
    let mut image = vec![0.0 as Real; 3 * h * w];
    let mut depth = vec![Real::INFINITY; h * w];
    let mut silhouette = vec![0usize; scene.boxes.len()];
    let mut visible = vec![0usize; scene.boxes.len()];
    for y in 0..h {
        for x in 0..w {
            let dir = mul3(&minv, [x as f64 + 0.5, y as f64 + 0.5, 1.0]);
            let mut nearest: Option<(f64, usize, usize, bool)> = None;
            for (i, b) in scene.boxes.iter().enumerate() {
                if let Some((t, axis, pos)) = ray_box(origin, dir, b) {
                    silhouette[i] += 1;
                    let z = origin[2] + t * dir[2];
                    if nearest.map_or(true, |(nz, ..)| z < nz) {
                        nearest = Some((z, i, axis, pos));
                    }
                }
            }
            let pix = y * w + x;
            let color = match nearest {
                Some((z, i, axis, pos)) => {
                    visible[i] += 1;
                    depth[pix] = z as Real;
                    // Local y points down, so its positive face is the bottom.
                    let face = match (axis, pos) {
                        (0, false) => 0,
                        (0, true) => 1,
                        (1, false) => 2,
                        (1, true) => 3,
                        (_, false) => 4,
                        (_, true) => 5,
                    };
                    object_color(i).map(|c| c * FACE_SHADE[face])
                }
                None if (y as f64 + 0.5) < horizon => {
                    let k = (y as f64 / horizon.max(1.0)).clamp(0.0, 1.0);
                    [0.55 + 0.2 * k, 0.7 + 0.15 * k, 0.9]
                }
                None => [0.35, 0.35, 0.33],
            };
            for c in 0..3 {
                let n = scene.noise * (2.0 * rng.uniform() - 1.0);
                image[c * h * w + pix] = (color[c] + n).clamp(0.0, 1.0) as Real;
            }
        }
    }

    let mut labels = Vec::with_capacity(scene.boxes.len());
    for (i, b) in scene.boxes.iter().enumerate() {
        let full = corners_extent(&scene.calib, b)
            .ok_or_else(|| Error::Geometry(format!("object {i} crosses behind the camera")))?;
        let clipped = full.clip(w as f64, h as f64);
        let truncated = if full.area() > 0.0 {
            (1.0 - clipped.area() / full.area()).clamp(0.0, 1.0)
        } else {
            1.0
        };
        let vis = if silhouette[i] == 0 {
            0.0
        } else {
            visible[i] as f64 / silhouette[i] as f64
        };
        let occluded = if vis >= 0.9 {
            0
        } else if vis >= 0.5 {
            1
        } else {
            2
        };
        let mut label = KittiLabel::from_box3d("Car", clipped, b, None);
        label.truncated = truncated;
        label.occluded = occluded;
        labels.push(label);
    }
    Ok(Rendered {
        image: Tensor::new(&[3, h, w], image)?,
        depth: Tensor::new(&[h, w], depth)?,
        labels,
    })
}

/// Unclipped extent of the eight projected corners.
fn corners_extent(calib: &Calibration, b: &Box3d) -> Option<Box2d> {
    let mut out = Box2d::new(f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for c in b.corners() {
        let (u, v) = calib.project(c)?;
        out.x1 = out.x1.min(u);
        out.y1 = out.y1.min(v);
        out.x2 = out.x2.max(u);
        out.y2 = out.y2.max(v);
    }
    Some(out)
}

/// Writes `count` scenes under `root` in the KITTI layout plus `depth/`. Scene `i`
/// uses seed stream `(seed, i)` and holds between `min_objects` and `max_objects` cars.
pub fn write_dataset(
    root: &Path,
    count: usize,
    min_objects: usize,
    max_objects: usize,
    seed: u64,
    cfg: &SynthConfig,
) -> Result<Vec<Frame>> {
    if min_objects > max_objects {
        return Err(Error::Config(format!(
            "synth object range {min_objects}..={max_objects} is empty"
        )));
    }
    for sub in ["image_2", "label_2", "calib", "depth"] {
        let d = root.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let mut frames = Vec::with_capacity(count);
    for i in 0..count {
        let mut pick = Rng::stream(seed, i as u64 + 1);
        let n = min_objects + pick.below(max_objects - min_objects + 1);
        let scene_seed = pick.below(usize::MAX) as u64;
        let scene = generate_scene(scene_seed, n, cfg)?;
        let r = render(&scene)?;
        let frame = Frame::new(root, &format!("{i:06}"));
        kitti::save_image(&frame.image, &r.image)?;
        kitti::write_labels(&frame.label, &r.labels)?;
        fs::write(&frame.calib, scene.calib.to_text()).map_err(|e| Error::io(&frame.calib, e))?;
        kitti::write_depth(&frame.depth, &r.depth)?;
        frames.push(frame);
    }
    Ok(frames)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_per_seed() {
        let cfg = SynthConfig::default();
        assert_eq!(generate_scene(7, 4, &cfg).unwrap(), generate_scene(7, 4, &cfg).unwrap());
        assert_ne!(generate_scene(7, 4, &cfg).unwrap(), generate_scene(8, 4, &cfg).unwrap());
    }

    #[test]
    fn empty_scene_has_no_depth() {
        let cfg = SynthConfig::default();
        let r = render(&generate_scene(1, 0, &cfg).unwrap()).unwrap();
        assert!(r.labels.is_empty());
        assert!(r.depth.data().iter().all(|d| d.is_infinite()));
        assert!(r.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn impossible_density_fails() {
        let cfg = SynthConfig {
            z_min: 5.0,
            z_max: 5.5,
            ..SynthConfig::default()
        };
        assert!(matches!(generate_scene(3, 60, &cfg), Err(Error::Generation(_))));
    }

    #[test]
    fn single_object_depth_bounds() {
        let cfg = SynthConfig::default();
        let scene = generate_scene(11, 1, &cfg).unwrap();
        let b = scene.boxes[0];
        let r = render(&scene).unwrap();
        let reach = 0.5 * (b.l * b.l + b.w * b.w).sqrt();
        let hits: Vec<Real> = r.depth.data().iter().copied().filter(|d| d.is_finite()).collect();
        assert!(!hits.is_empty());
        assert!(hits
            .iter()
            .all(|&d| (d as f64) >= b.z - reach - 1e-9 && (d as f64) <= b.z + reach + 1e-9));
    }
}
