//! Seven-DoF box arithmetic: residual encoding, adaptive normalization,
//! corner extraction and rotated 3D IoU.
//!
//! Axis convention: `(w, h)` span the base plane (x/y before yaw), `l` is the
//! vertical extent along z. Yaw rotates about the vertical axis through the
//! box center.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const CLIP_EPS: f64 = 1e-12;

/// Wraps an angle into `[-π, π)`.
pub fn wrap_angle(theta: f64) -> f64 {
    let two_pi = 2.0 * PI;
    let mut a = (theta + PI).rem_euclid(two_pi) - PI;
    // rem_euclid can round up to exactly 2π for tiny negative inputs
    if a >= PI {
        a -= two_pi;
    }
    a
}

/// Oriented 3D box: center, extents and yaw.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Box3D {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub w: f64,
    pub h: f64,
    pub l: f64,
    pub theta: f64,
}

impl Box3D {
    /// Builds a validated box with yaw wrapped to `[-π, π)`.
    pub fn new(x: f64, y: f64, z: f64, w: f64, h: f64, l: f64, theta: f64) -> Result<Self> {
        let b = Box3D {
            x,
            y,
            z,
            w,
            h,
            l,
            theta: wrap_angle(theta),
        };
        b.validate()?;
        Ok(b)
    }

    pub fn from_array(v: [f64; 7]) -> Result<Self> {
        Self::new(v[0], v[1], v[2], v[3], v[4], v[5], v[6])
    }

    pub fn to_array(&self) -> [f64; 7] {
        [self.x, self.y, self.z, self.w, self.h, self.l, self.theta]
    }

    pub fn validate(&self) -> Result<()> {
        let arr = self.to_array();
        if arr.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidBox(format!("non-finite component in {arr:?}")));
        }
        if self.w <= 0.0 || self.h <= 0.0 || self.l <= 0.0 {
            return Err(Error::InvalidBox(format!(
                "extents must be positive, got w={} h={} l={}",
                self.w, self.h, self.l
            )));
        }
        Ok(())
    }

    /// Diagonal of the base rectangle.
    pub fn base_diagonal(&self) -> f64 {
        self.w.hypot(self.h)
    }

    /// Base aspect ratio, always ≥ 1.
    pub fn aspect_ratio(&self) -> f64 {
        (self.w / self.h).max(self.h / self.w)
    }

    pub fn volume(&self) -> f64 {
        self.w * self.h * self.l
    }

    pub fn center(&self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    /// Expresses a world point in the box frame (origin at the center, axes
    /// aligned with `w`, `h`, `l`).
    pub fn to_local(&self, p: [f64; 3]) -> [f64; 3] {
        let (s, c) = self.theta.sin_cos();
        let dx = p[0] - self.x;
        let dy = p[1] - self.y;
        [c * dx + s * dy, -s * dx + c * dy, p[2] - self.z]
    }

    /// Inverse of [`Box3D::to_local`].
    pub fn to_world(&self, q: [f64; 3]) -> [f64; 3] {
        let (s, c) = self.theta.sin_cos();
        [
            self.x + c * q[0] - s * q[1],
            self.y + s * q[0] + c * q[1],
            self.z + q[2],
        ]
    }

    pub fn contains(&self, p: [f64; 3]) -> bool {
        let q = self.to_local(p);
        q[0].abs() <= 0.5 * self.w && q[1].abs() <= 0.5 * self.h && q[2].abs() <= 0.5 * self.l
    }
}

macro_rules! seven_vector {
    ($name:ident) => {
        impl $name {
            pub const ZERO: $name = $name([0.0; 7]);

            pub fn as_array(&self) -> &[f64; 7] {
                &self.0
            }

            pub fn is_finite(&self) -> bool {
                self.0.iter().all(|v| v.is_finite())
            }
        }

        impl std::ops::Index<usize> for $name {
            type Output = f64;
            fn index(&self, i: usize) -> &f64 {
                &self.0[i]
            }
        }

        impl std::ops::IndexMut<usize> for $name {
            fn index_mut(&mut self, i: usize) -> &mut f64 {
                &mut self.0[i]
            }
        }

        impl From<[f64; 7]> for $name {
            fn from(v: [f64; 7]) -> Self {
                $name(v)
            }
        }
    };
}

/// Encoded offset `(dx, dy, dz, dw, dh, dl, dtheta)` of a target box relative
/// to a proposal. Extents are log ratios.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Residual7(pub [f64; 7]);

/// A [`Residual7`] divided by the proposal shape factors. This is the state
/// the diffusion process runs on.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizedResidual7(pub [f64; 7]);

seven_vector!(Residual7);
seven_vector!(NormalizedResidual7);

impl NormalizedResidual7 {
    pub fn clamp(&self, bound: f64) -> Self {
        NormalizedResidual7(self.0.map(|v| v.clamp(-bound, bound)))
    }
}

/// Residual of `target` with respect to `proposal`.
pub fn encode(proposal: &Box3D, target: &Box3D) -> Result<Residual7> {
    proposal.validate()?;
    target.validate()?;
    let d = proposal.base_diagonal();
    Ok(Residual7([
        (target.x - proposal.x) / d,
        (target.y - proposal.y) / d,
        (target.z - proposal.z) / proposal.h,
        (target.w / proposal.w).ln(),
        (target.h / proposal.h).ln(),
        (target.l / proposal.l).ln(),
        wrap_angle(target.theta - proposal.theta),
    ]))
}

/// Applies a residual to a proposal; inverse of [`encode`].
pub fn decode(proposal: &Box3D, residual: &Residual7) -> Result<Box3D> {
    proposal.validate()?;
    if !residual.is_finite() {
        return Err(Error::InvalidBox(format!(
            "non-finite residual {:?}",
            residual.0
        )));
    }
    let d = proposal.base_diagonal();
    let r = &residual.0;
    Box3D::new(
        proposal.x + r[0] * d,
        proposal.y + r[1] * d,
        proposal.z + r[2] * proposal.h,
        proposal.w * r[3].exp(),
        proposal.h * r[4].exp(),
        proposal.l * r[5].exp(),
        proposal.theta + r[6],
    )
}

/// Per-component divisors `(d, d, l, d, d, l, r)` of a proposal.
pub fn normalization_scales(proposal: &Box3D) -> [f64; 7] {
    let d = proposal.base_diagonal();
    let l = proposal.l;
    let r = proposal.aspect_ratio();
    [d, d, l, d, d, l, r]
}

pub fn normalize(residual: &Residual7, proposal: &Box3D) -> NormalizedResidual7 {
    let s = normalization_scales(proposal);
    NormalizedResidual7(std::array::from_fn(|i| residual.0[i] / s[i]))
}

pub fn denormalize(nr: &NormalizedResidual7, proposal: &Box3D) -> Residual7 {
    let s = normalization_scales(proposal);
    Residual7(std::array::from_fn(|i| nr.0[i] * s[i]))
}

/// Eight box corners in canonical order.
pub type Corners8 = [[f64; 3]; 8];

/// Sign patterns of `(w/2, h/2, l/2)` in canonical corner order.
pub const CORNER_SIGNS: [[f64; 3]; 8] = [
    [-1.0, -1.0, -1.0],
    [1.0, -1.0, -1.0],
    [1.0, 1.0, -1.0],
    [-1.0, 1.0, -1.0],
    [-1.0, -1.0, 1.0],
    [1.0, -1.0, 1.0],
    [1.0, 1.0, 1.0],
    [-1.0, 1.0, 1.0],
];

pub fn corners(b: &Box3D) -> Corners8 {
    CORNER_SIGNS.map(|s| b.to_world([0.5 * s[0] * b.w, 0.5 * s[1] * b.h, 0.5 * s[2] * b.l]))
}

/// Jacobian of every corner coordinate with respect to the box parameters
/// `(x, y, z, w, h, l, theta)`, indexed `[corner][coord][param]`.
pub fn corners_jacobian(b: &Box3D) -> [[[f64; 7]; 3]; 8] {
    let (s, c) = b.theta.sin_cos();
    CORNER_SIGNS.map(|sg| {
        let u = 0.5 * sg[0] * b.w;
        let v = 0.5 * sg[1] * b.h;
        // world x = x + c u - s v ; world y = y + s u + c v ; world z = z + 0.5 sz l
        let mut jx = [0.0; 7];
        let mut jy = [0.0; 7];
        let mut jz = [0.0; 7];
        jx[0] = 1.0;
        jx[3] = c * 0.5 * sg[0];
        jx[4] = -s * 0.5 * sg[1];
        jx[6] = -s * u - c * v;
        jy[1] = 1.0;
        jy[3] = s * 0.5 * sg[0];
        jy[4] = c * 0.5 * sg[1];
        jy[6] = c * u - s * v;
        jz[2] = 1.0;
        jz[5] = 0.5 * sg[2];
        [jx, jy, jz]
    })
}

/// Base-plane footprint, counter-clockwise.
fn footprint(b: &Box3D) -> [[f64; 2]; 4] {
    let c = corners(b);
    [
        [c[0][0], c[0][1]],
        [c[1][0], c[1][1]],
        [c[2][0], c[2][1]],
        [c[3][0], c[3][1]],
    ]
}

fn cross(o: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

/// Sutherland–Hodgman clip of a polygon against a convex counter-clockwise
/// clip polygon.
pub fn clip_convex(subject: &[[f64; 2]], clip: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut output: Vec<[f64; 2]> = subject.to_vec();
    for i in 0..clip.len() {
        if output.is_empty() {
            break;
        }
        let a = clip[i];
        let b = clip[(i + 1) % clip.len()];
        let input = std::mem::take(&mut output);
        for j in 0..input.len() {
            let cur = input[j];
            let prev = input[(j + input.len() - 1) % input.len()];
            let cur_in = cross(a, b, cur) >= -CLIP_EPS;
            let prev_in = cross(a, b, prev) >= -CLIP_EPS;
            if cur_in {
                if !prev_in {
                    output.push(segment_intersection(prev, cur, a, b));
                }
                output.push(cur);
            } else if prev_in {
                output.push(segment_intersection(prev, cur, a, b));
            }
        }
    }
    output
}

fn segment_intersection(p: [f64; 2], q: [f64; 2], a: [f64; 2], b: [f64; 2]) -> [f64; 2] {
    let cp = cross(a, b, p);
    let cq = cross(a, b, q);
    let denom = cp - cq;
    if denom.abs() < CLIP_EPS {
        return q;
    }
    let t = cp / denom;
    [p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]
}

pub fn polygon_area(poly: &[[f64; 2]]) -> f64 {
    if poly.len() < 3 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..poly.len() {
        let a = poly[i];
        let b = poly[(i + 1) % poly.len()];
        acc += a[0] * b[1] - a[1] * b[0];
    }
    0.5 * acc.abs()
}

/// Intersection volume of two oriented boxes.
pub fn intersection_volume(a: &Box3D, b: &Box3D) -> f64 {
    let z_lo = (a.z - 0.5 * a.l).max(b.z - 0.5 * b.l);
    let z_hi = (a.z + 0.5 * a.l).min(b.z + 0.5 * b.l);
    let dz = z_hi - z_lo;
    if dz <= 0.0 {
        return 0.0;
    }
    // bounding-circle early out
    let reach = 0.5 * (a.base_diagonal() + b.base_diagonal());
    if (a.x - b.x).hypot(a.y - b.y) > reach {
        return 0.0;
    }
    let area = polygon_area(&clip_convex(&footprint(a), &footprint(b)));
    area * dz
}

/// Rotated 3D IoU in `[0, 1]`. Degenerate overlaps yield 0.
pub fn iou_3d(a: &Box3D, b: &Box3D) -> f64 {
    let inter = intersection_volume(a, b);
    if !(inter > 0.0) {
        return 0.0;
    }
    let union = a.volume() + b.volume() - inter;
    if !(union > 0.0) {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// IoU-ramped soft classification target.
pub fn classification_target(iou: f64, theta_l: f64, theta_h: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&theta_l) || !(0.0..=1.0).contains(&theta_h) || theta_l >= theta_h {
        return Err(Error::Config(format!(
            "classification thresholds must satisfy 0 <= theta_L < theta_H <= 1, got {theta_l}, {theta_h}"
        )));
    }
    Ok(if iou >= theta_h {
        1.0
    } else if iou < theta_l {
        0.0
    } else {
        (iou - theta_l) / (theta_h - theta_l)
    })
}
