//! Boxes in the image plane and in the KITTI camera frame, and their overlaps.
//!
//! Camera frame: x right, y down, z forward. A [`Box3d`] location is the center of
//! the bottom face, so the box occupies heights `[y − h, y]`. Yaw rotates about the
//! y axis, with `ry = 0` pointing the length along +x.

use std::f64::consts::PI;

/// Wraps an angle into `(−π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    let mut r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r -= 2.0 * PI;
    }
    r
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Box2d {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl Box2d {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Box2d { x1, y1, x2, y2 }
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Box2d::new(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn intersection(&self, o: &Box2d) -> f64 {
        let w = self.x2.min(o.x2) - self.x1.max(o.x1);
        let h = self.y2.min(o.y2) - self.y1.max(o.y1);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    /// Intersection over union; 0 when either box is degenerate.
    pub fn iou(&self, o: &Box2d) -> f64 {
        let inter = self.intersection(o);
        let union = self.area() + o.area() - inter;
        if inter <= 0.0 || union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    pub fn clip(&self, width: f64, height: f64) -> Box2d {
        Box2d::new(
            self.x1.clamp(0.0, width),
            self.y1.clamp(0.0, height),
            self.x2.clamp(0.0, width),
            self.y2.clamp(0.0, height),
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Box3d {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub h: f64,
    pub w: f64,
    pub l: f64,
    pub ry: f64,
}

impl Box3d {
    pub fn volume(&self) -> f64 {
        self.h * self.w * self.l
    }

    pub fn is_degenerate(&self) -> bool {
        !(self.h > 0.0 && self.w > 0.0 && self.l > 0.0)
    }

    /// Ground-plane footprint corners `(x, z)`, counter-clockwise in the x–z plane.
    pub fn bev_corners(&self) -> [(f64, f64); 4] {
        let (s, c) = self.ry.sin_cos();
        let (hl, hw) = (0.5 * self.l, 0.5 * self.w);
        [(hl, hw), (-hl, hw), (-hl, -hw), (hl, -hw)].map(|(ox, oz)| {
            (self.x + c * ox + s * oz, self.z - s * ox + c * oz)
        })
    }

    /// The eight corners in camera coordinates: bottom face first, then top.
    pub fn corners(&self) -> [[f64; 3]; 8] {
        let f = self.bev_corners();
        let mut out = [[0.0; 3]; 8];
        for (i, (x, z)) in f.iter().enumerate() {
            out[i] = [*x, self.y, *z];
            out[i + 4] = [*x, self.y - self.h, *z];
        }
        out
    }

    /// Geometric center, halfway up the box.
    pub fn center(&self) -> [f64; 3] {
        [self.x, self.y - 0.5 * self.h, self.z]
    }

    /// Whether a camera-frame point lies inside the box.
    pub fn contains(&self, p: [f64; 3]) -> bool {
        if p[1] > self.y || p[1] < self.y - self.h {
            return false;
        }
        let (s, c) = self.ry.sin_cos();
        let (dx, dz) = (p[0] - self.x, p[2] - self.z);
        let ox = c * dx - s * dz;
        let oz = s * dx + c * dz;
        ox.abs() <= 0.5 * self.l && oz.abs() <= 0.5 * self.w
    }
}

/// Signed shoelace area; positive for counter-clockwise vertex order.
pub fn signed_area(poly: &[(f64, f64)]) -> f64 {
    let n = poly.len();
    (0..n)
        .map(|i| {
            let (a, b) = (poly[i], poly[(i + 1) % n]);
            a.0 * b.1 - b.0 * a.1
        })
        .sum::<f64>()
        * 0.5
}

pub fn polygon_area(poly: &[(f64, f64)]) -> f64 {
    signed_area(poly).abs()
}

fn ccw(mut poly: Vec<(f64, f64)>) -> Vec<(f64, f64)> {
    if signed_area(&poly) < 0.0 {
        poly.reverse();
    }
    poly
}

/// Sutherland–Hodgman clipping of `subject` against the convex polygon `clip`.
pub fn clip_convex(subject: &[(f64, f64)], clip: &[(f64, f64)]) -> Vec<(f64, f64)> {
    let clip = ccw(clip.to_vec());
    let mut out = ccw(subject.to_vec());
    let n = clip.len();
    for i in 0..n {
        if out.is_empty() {
            break;
        }
        let (a, b) = (clip[i], clip[(i + 1) % n]);
        let side = |p: (f64, f64)| (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0);
        let input = std::mem::take(&mut out);
        let m = input.len();
        for j in 0..m {
            let (cur, prev) = (input[j], input[(j + m - 1) % m]);
            let (sc, sp) = (side(cur), side(prev));
            if sc >= 0.0 {
                if sp < 0.0 {
                    out.push(crossing(prev, cur, sp, sc));
                }
                out.push(cur);
            } else if sp >= 0.0 {
                out.push(crossing(prev, cur, sp, sc));
            }
        }
    }
    out
}

fn crossing(p: (f64, f64), q: (f64, f64), sp: f64, sq: f64) -> (f64, f64) {
    let t = sp / (sp - sq);
    (p.0 + t * (q.0 - p.0), p.1 + t * (q.1 - p.1))
}

/// Area of the overlap of two ground-plane footprints.
pub fn bev_intersection(a: &Box3d, b: &Box3d) -> f64 {
    polygon_area(&clip_convex(&a.bev_corners(), &b.bev_corners()))
}

/// Rotated bird's-eye-view IoU; 0 if either box has a non-positive dimension.
pub fn iou_bev(a: &Box3d, b: &Box3d) -> f64 {
    if a.is_degenerate() || b.is_degenerate() {
        return 0.0;
    }
    let inter = bev_intersection(a, b);
    let union = a.w * a.l + b.w * b.l - inter;
    if inter <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// 3D IoU from the footprint overlap times the vertical overlap.
pub fn iou_3d(a: &Box3d, b: &Box3d) -> f64 {
    if a.is_degenerate() || b.is_degenerate() {
        return 0.0;
    }
    let vertical = a.y.min(b.y) - (a.y - a.h).max(b.y - b.h);
    if vertical <= 0.0 {
        return 0.0;
    }
    let inter = bev_intersection(a, b) * vertical;
    if inter <= 0.0 {
        return 0.0;
    }
    (inter / (a.volume() + b.volume() - inter)).clamp(0.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(x: f64, ry: f64) -> Box3d {
        Box3d {
            x,
            y: 0.0,
            z: 0.0,
            h: 1.0,
            w: 1.0,
            l: 1.0,
            ry,
        }
    }

    #[test]
    fn wrap_range() {
        assert!((wrap_angle(3.5) - (3.5 - 2.0 * PI)).abs() < 1e-15);
        assert_eq!(wrap_angle(PI), PI);
        assert_eq!(wrap_angle(-PI), PI);
        assert_eq!(wrap_angle(0.0), 0.0);
    }

    #[test]
    fn closed_form_overlaps() {
        assert!((iou_bev(&unit(0.0, 0.0), &unit(0.0, 0.0)) - 1.0).abs() < 1e-12);
        assert!((iou_bev(&unit(0.0, 0.0), &unit(0.5, 0.0)) - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(iou_bev(&unit(0.0, 0.0), &unit(5.0, 0.3)), 0.0);
        let mut tall = unit(0.0, 0.0);
        tall.h = 2.0;
        tall.y = 2.0;
        let mut shifted = tall;
        shifted.y = 3.0;
        assert!((iou_3d(&tall, &shifted) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn box_2d_iou() {
        let a = Box2d::new(0.0, 0.0, 2.0, 2.0);
        assert_eq!(a.iou(&a), 1.0);
        assert_eq!(a.iou(&Box2d::new(3.0, 3.0, 4.0, 4.0)), 0.0);
        assert!((a.iou(&Box2d::new(1.0, 0.0, 3.0, 2.0)) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn contains_center() {
        let b = Box3d {
            x: 1.0,
            y: 1.6,
            z: 10.0,
            h: 1.5,
            w: 1.6,
            l: 3.9,
            ry: 0.7,
        };
        assert!(b.contains(b.center()));
        assert!(!b.contains([1.0, 1.7, 10.0]));
        for c in b.corners() {
            let nudged = [
                c[0] + 0.999 * (b.center()[0] - c[0]),
                c[1] + 0.999 * (b.center()[1] - c[1]),
                c[2] + 0.999 * (b.center()[2] - c[2]),
            ];
            assert!(b.contains(nudged));
        }
    }
}
