//! Procedural point-cloud scenes, jittered proposals and the RoI grid
//! featurizer.

use std::f64::consts::PI;
use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::boxes::{self, iou_3d, Box3D, Residual7};
use crate::error::{Error, Result};
use crate::network::{RefineNet, RAW_FEATURES};

const MAX_PLACEMENT_TRIES: usize = 100;

/// Mixes a master seed with a stream index (splitmix64 finalizer).
pub fn derive_seed(master: u64, stream: u64) -> u64 {
    let mut z = master
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn rng_for(master: u64, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, stream))
}

pub fn standard_normal(rng: &mut impl Rng) -> f64 {
    StandardNormal.sample(rng)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    pub min_objects: usize,
    pub max_objects: usize,
    /// Base-plane extent along the heading.
    pub w_range: (f64, f64),
    /// Base-plane extent across the heading.
    pub h_range: (f64, f64),
    /// Vertical extent.
    pub l_range: (f64, f64),
    /// Half side of the square scene footprint.
    pub half_extent: f64,
    /// Surface samples per square meter of box face.
    pub point_density: f64,
    pub min_points_per_object: usize,
    /// Standard deviation of surface noise, meters (truncated at 3σ).
    pub sigma_pts: f64,
    pub clutter_points: usize,
    pub clutter_height: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            min_objects: 1,
            max_objects: 5,
            w_range: (1.5, 4.5),
            h_range: (0.5, 2.0),
            l_range: (0.8, 2.0),
            half_extent: 20.0,
            point_density: 8.0,
            min_points_per_object: 20,
            sigma_pts: 0.02,
            clutter_points: 200,
            clutter_height: 3.0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let ordered = |r: (f64, f64), name: &str| -> Result<()> {
            if !(r.0 > 0.0 && r.0 <= r.1) {
                return Err(Error::Config(format!("scene.{name} must satisfy 0 < lo <= hi")));
            }
            Ok(())
        };
        ordered(self.w_range, "w_range")?;
        ordered(self.h_range, "h_range")?;
        ordered(self.l_range, "l_range")?;
        if self.min_objects > self.max_objects {
            return Err(Error::Config("scene.min_objects exceeds max_objects".into()));
        }
        if !(self.half_extent > 0.0) {
            return Err(Error::Config("scene.half_extent must be > 0".into()));
        }
        for (key, v) in [
            ("point_density", self.point_density),
            ("sigma_pts", self.sigma_pts),
            ("clutter_height", self.clutter_height),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("scene.{key} must be non-negative")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub scene_id: u64,
    pub points: Vec<[f64; 3]>,
    pub gt_boxes: Vec<Box3D>,
    /// Set when placement ran out of retries and fewer objects were emitted.
    pub underfilled: bool,
}

fn sample_face_point(b: &Box3D, rng: &mut ChaCha8Rng) -> [f64; 3] {
    let (w, h, l) = (b.w, b.h, b.l);
    let areas = [h * l, h * l, w * l, w * l, w * h, w * h];
    let total: f64 = areas.iter().sum();
    let mut pick = rng.gen_range(0.0..total);
    let mut face = 5;
    for (i, a) in areas.iter().enumerate() {
        if pick < *a {
            face = i;
            break;
        }
        pick -= a;
    }
    let u: f64 = rng.gen_range(-0.5..0.5);
    let v: f64 = rng.gen_range(-0.5..0.5);
    let local = match face {
        0 => [-0.5 * w, u * h, v * l],
        1 => [0.5 * w, u * h, v * l],
        2 => [u * w, -0.5 * h, v * l],
        3 => [u * w, 0.5 * h, v * l],
        4 => [u * w, v * h, -0.5 * l],
        _ => [u * w, v * h, 0.5 * l],
    };
    b.to_world(local)
}

/// Generates one scene. Pure function of `(seed, spec)`.
pub fn generate_scene(scene_id: u64, seed: u64, spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let mut rng = rng_for(seed, scene_id);
    let count = rng.gen_range(spec.min_objects..=spec.max_objects);
    let mut gt_boxes: Vec<Box3D> = Vec::with_capacity(count);
    let mut underfilled = false;
    let range = |rng: &mut ChaCha8Rng, r: (f64, f64)| {
        if r.0 == r.1 {
            r.0
        } else {
            rng.gen_range(r.0..r.1)
        }
    };
    for _ in 0..count {
        let mut placed = false;
        for _ in 0..MAX_PLACEMENT_TRIES {
            let w = range(&mut rng, spec.w_range);
            let h = range(&mut rng, spec.h_range);
            let l = range(&mut rng, spec.l_range);
            let margin = 0.5 * w.hypot(h);
            let lim = (spec.half_extent - margin).max(0.0);
            let x = if lim > 0.0 { rng.gen_range(-lim..lim) } else { 0.0 };
            let y = if lim > 0.0 { rng.gen_range(-lim..lim) } else { 0.0 };
            let theta = rng.gen_range(-PI..PI);
            let cand = Box3D::new(x, y, 0.5 * l, w, h, l, theta)?;
            // bounding circles apart, plus a small gap
            let clear = gt_boxes.iter().all(|g| {
                (g.x - cand.x).hypot(g.y - cand.y)
                    > 0.5 * (g.base_diagonal() + cand.base_diagonal()) + 0.3
            });
            if clear {
                gt_boxes.push(cand);
                placed = true;
                break;
            }
        }
        if !placed {
            underfilled = true;
        }
    }
    let mut points = Vec::new();
    for b in &gt_boxes {
        let area = 2.0 * (b.w * b.h + b.w * b.l + b.h * b.l);
        let n = ((area * spec.point_density).round() as usize).max(spec.min_points_per_object);
        for _ in 0..n {
            let p = sample_face_point(b, &mut rng);
            // truncated at 3σ so every sample stays within a 3σ shell of the box
            let noise: [f64; 3] = std::array::from_fn(|_| {
                spec.sigma_pts * standard_normal(&mut rng).clamp(-3.0, 3.0)
            });
            points.push([p[0] + noise[0], p[1] + noise[1], p[2] + noise[2]]);
        }
    }
    for _ in 0..spec.clutter_points {
        points.push([
            rng.gen_range(-spec.half_extent..spec.half_extent),
            rng.gen_range(-spec.half_extent..spec.half_extent),
            rng.gen_range(0.0..spec.clutter_height),
        ]);
    }
    Ok(Scene {
        scene_id,
        points,
        gt_boxes,
        underfilled,
    })
}

pub fn generate_corpus(seed: u64, ids: std::ops::Range<u64>, spec: &SceneSpec) -> Result<Vec<Scene>> {
    ids.map(|id| generate_scene(id, seed, spec)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProposalSpec {
    /// Jittered copies per ground-truth box.
    pub per_gt: usize,
    /// Per-component standard deviation, applied as a residual
    /// `(dx, dy, dz, dlog w, dlog h, dlog l, dyaw)` to the ground truth.
    pub jitter: [f64; 7],
    pub negatives_per_scene: usize,
}

impl Default for ProposalSpec {
    fn default() -> Self {
        ProposalSpec {
            per_gt: 3,
            jitter: [0.07, 0.07, 0.1, 0.1, 0.1, 0.1, 0.08],
            negatives_per_scene: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProposalBatch {
    pub proposals: Vec<Box3D>,
    pub matched_gt_index: Vec<Option<usize>>,
    pub ious: Vec<f64>,
}

impl ProposalBatch {
    pub fn len(&self) -> usize {
        self.proposals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.proposals.is_empty()
    }
}

/// Highest-IoU ground truth for a box, `None` when nothing overlaps.
pub fn assign(b: &Box3D, gt: &[Box3D]) -> (Option<usize>, f64) {
    let mut best = (None, 0.0);
    for (i, g) in gt.iter().enumerate() {
        let iou = iou_3d(b, g);
        if iou > best.1 {
            best = (Some(i), iou);
        }
    }
    best
}

/// Jittered copies of every ground truth plus random negatives.
pub fn generate_proposals(
    scene: &Scene,
    seed: u64,
    spec: &ProposalSpec,
    scene_spec: &SceneSpec,
) -> Result<ProposalBatch> {
    let mut rng = rng_for(seed ^ 0x5052_4f50, scene.scene_id);
    let mut proposals = Vec::new();
    for g in &scene.gt_boxes {
        for _ in 0..spec.per_gt {
            let r = Residual7(std::array::from_fn(|i| spec.jitter[i] * standard_normal(&mut rng)));
            proposals.push(boxes::decode(g, &r)?);
        }
    }
    let lim = scene_spec.half_extent;
    for _ in 0..spec.negatives_per_scene {
        for _ in 0..MAX_PLACEMENT_TRIES {
            let w = rng.gen_range(scene_spec.w_range.0..=scene_spec.w_range.1);
            let h = rng.gen_range(scene_spec.h_range.0..=scene_spec.h_range.1);
            let l = rng.gen_range(scene_spec.l_range.0..=scene_spec.l_range.1);
            let cand = Box3D::new(
                rng.gen_range(-lim..lim),
                rng.gen_range(-lim..lim),
                0.5 * l,
                w,
                h,
                l,
                rng.gen_range(-PI..PI),
            )?;
            let far = scene.gt_boxes.iter().all(|g| {
                (g.x - cand.x).hypot(g.y - cand.y)
                    > 0.5 * (g.base_diagonal() + cand.base_diagonal()) + 1.0
            });
            if far {
                proposals.push(cand);
                break;
            }
        }
    }
    let (matched_gt_index, ious) = proposals
        .iter()
        .map(|p| assign(p, &scene.gt_boxes))
        .unzip();
    Ok(ProposalBatch {
        proposals,
        matched_gt_index,
        ious,
    })
}

/// Cells per axis of the RoI grid for a token count (must be a cube).
pub fn grid_side(tokens: usize) -> Result<usize> {
    let side = (tokens as f64).cbrt().round() as usize;
    if side * side * side != tokens || side == 0 {
        return Err(Error::Config(format!(
            "RoI token count {tokens} is not a perfect cube"
        )));
    }
    Ok(side)
}

/// Raw per-cell features of a box: `ln(1 + count)` and the mean point offset
/// from the cell center in the box frame (meters). Cells are ordered
/// `ix·side² + iy·side + iz` along `(w, h, l)`.
pub fn roi_raw_features(points: &[[f64; 3]], b: &Box3D, side: usize) -> Vec<f64> {
    let cells = side * side * side;
    let mut count = vec![0usize; cells];
    let mut sum = vec![[0.0f64; 3]; cells];
    let half = [0.5 * b.w, 0.5 * b.h, 0.5 * b.l];
    let reach = 0.5 * b.base_diagonal();
    let ext = [b.w, b.h, b.l];
    for p in points {
        if (p[2] - b.z).abs() > half[2]
            || (p[0] - b.x).abs() > reach
            || (p[1] - b.y).abs() > reach
        {
            continue;
        }
        let q = b.to_local(*p);
        if (0..3).any(|k| q[k].abs() > half[k]) {
            continue;
        }
        let idx: [usize; 3] = std::array::from_fn(|k| {
            (((q[k] / ext[k] + 0.5) * side as f64).floor() as usize).min(side - 1)
        });
        let cell = idx[0] * side * side + idx[1] * side + idx[2];
        count[cell] += 1;
        for k in 0..3 {
            let center = ((idx[k] as f64 + 0.5) / side as f64 - 0.5) * ext[k];
            sum[cell][k] += q[k] - center;
        }
    }
    let mut out = vec![0.0; cells * RAW_FEATURES];
    for c in 0..cells {
        if count[c] == 0 {
            continue;
        }
        let n = count[c] as f64;
        out[c * RAW_FEATURES] = n.ln_1p();
        for k in 0..3 {
            out[c * RAW_FEATURES + 1 + k] = sum[c][k] / n;
        }
    }
    out
}

/// Pooled RoI tokens, `tokens × d`.
#[derive(Debug, Clone, PartialEq)]
pub struct RoiFeature {
    pub tokens: usize,
    pub d: usize,
    pub data: Vec<f64>,
}

pub fn roi_pool(scene: &Scene, b: &Box3D, net: &RefineNet) -> Result<RoiFeature> {
    let side = grid_side(net.tokens())?;
    let raw = roi_raw_features(&scene.points, b, side);
    Ok(RoiFeature {
        tokens: net.tokens(),
        d: net.d(),
        data: net.embed_tokens(&raw)?,
    })
}

#[derive(Serialize, Deserialize)]
struct SceneRecord {
    scene_id: u64,
    points: Vec<[f64; 3]>,
    boxes: Vec<[f64; 7]>,
}

fn push_float(out: &mut String, v: f64) {
    use std::fmt::Write as _;
    // 17 significant digits round-trip every finite f64
    write!(out, "{v:.16e}").expect("writing to a String");
}

fn push_array(out: &mut String, vals: &[f64]) {
    out.push('[');
    for (i, v) in vals.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        push_float(out, *v);
    }
    out.push(']');
}

/// One JSON line: `{"scene_id", "points", "boxes"}`.
pub fn scene_to_json_line(scene: &Scene) -> String {
    let mut s = String::with_capacity(64 + scene.points.len() * 72);
    s.push_str(&format!("{{\"scene_id\":{},\"points\":[", scene.scene_id));
    for (i, p) in scene.points.iter().enumerate() {
        if i > 0 {
            s.push(',');
        }
        push_array(&mut s, p);
    }
    s.push_str("],\"boxes\":[");
    for (i, b) in scene.gt_boxes.iter().enumerate() {
        if i > 0 {
            s.push(',');
        }
        push_array(&mut s, &b.to_array());
    }
    s.push_str("]}");
    s
}

pub fn scene_from_json_line(line: &str) -> Result<Scene> {
    let rec: SceneRecord = serde_json::from_str(line)?;
    let gt_boxes = rec
        .boxes
        .iter()
        .map(|b| Box3D::from_array(*b))
        .collect::<Result<Vec<_>>>()?;
    Ok(Scene {
        scene_id: rec.scene_id,
        points: rec.points,
        gt_boxes,
        underfilled: false,
    })
}

pub fn write_corpus(mut w: impl Write, scenes: &[Scene]) -> Result<()> {
    for s in scenes {
        writeln!(w, "{}", scene_to_json_line(s))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_corpus(r: impl BufRead) -> Result<Vec<Scene>> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(scene_from_json_line(&line)?);
    }
    Ok(out)
}
