//! Analytic depth-based grasp scorer.
//!
//! A planar parallel-jaw grasp at pixel `(x, y)` with closing axis θ and
//! height `z` scores `σ(α·(z − h_under))·σ(α·(h_between − z))`, where
//! `h_under` is the tallest depth-recovered height under either finger and
//! `h_between` the tallest strictly between them.

use serde::{Deserialize, Serialize};

use graspxfer_tensor::Tensor;

use crate::error::TeacherError;
use crate::render::{depth_to_height, DEFAULT_CAMERA_HEIGHT};
use crate::scene::MAX_OBJECT_HEIGHT;
use crate::volume::{theta_of_bin, GraspCandidate, ScoreVolume4D, THETA_BINS};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GripperModel {
    /// Maximum jaw opening between finger centers, meters.
    pub stroke_width: f64,
    /// Finger extent along the closing axis.
    pub finger_thickness: f64,
    /// Finger extent across the closing axis.
    pub finger_width: f64,
    /// Width of the strip between the fingers that must hold material.
    pub contact_band: f64,
    /// Fingertips stop this far above the first contact.
    pub contact_margin: f64,
}

impl Default for GripperModel {
    fn default() -> Self {
        GripperModel {
            stroke_width: 0.05,
            finger_thickness: 0.004,
            finger_width: 0.02,
            contact_band: 0.02,
            contact_margin: 0.005,
        }
    }
}

impl GripperModel {
    pub fn validate(&self) -> Result<(), TeacherError> {
        let positive = [self.stroke_width, self.finger_thickness, self.finger_width];
        if positive.iter().any(|v| !(*v > 0.0)) || self.contact_band < 0.0 || self.contact_margin < 0.0 {
            return Err(TeacherError::Contract(format!("invalid gripper {self:?}")));
        }
        if self.finger_thickness >= self.stroke_width {
            return Err(TeacherError::Contract("fingers thicker than the stroke leave no gap".into()));
        }
        Ok(())
    }

    /// Half-width of the open gap between the fingers' inner faces.
    pub fn inner_half_gap(&self) -> f64 {
        0.5 * (self.stroke_width - self.finger_thickness)
    }

    /// A conservative planning model: fingers grown and the contact strip
    /// shrunk by `tol` on every side, so a grasp judged feasible stays
    /// feasible when executed up to `tol` away.
    pub fn inflated(&self, tol: f64) -> Self {
        GripperModel {
            finger_thickness: self.finger_thickness + 2.0 * tol,
            finger_width: self.finger_width + 2.0 * tol,
            contact_band: (self.contact_band - 2.0 * tol).max(0.0),
            ..*self
        }
    }

    /// Sample points `(a, b)` in gripper coordinates (a along the closing
    /// axis) covering both fingers and, separately, the contact strip.
    pub fn sample_points(&self, spacing: f64) -> (Vec<(f64, f64)>, Vec<(f64, f64)>) {
        let steps = |lo: f64, hi: f64| -> Vec<f64> {
            let n = ((hi - lo) / spacing).ceil().max(1.0) as usize;
            (0..=n).map(|i| lo + (hi - lo) * i as f64 / n as f64).collect()
        };
        let half_t = self.finger_thickness / 2.0;
        let centre = self.stroke_width / 2.0;
        let across = steps(-self.finger_width / 2.0, self.finger_width / 2.0);
        let mut fingers = Vec::new();
        for a in steps(centre - half_t, centre + half_t) {
            for &b in &across {
                fingers.push((a, b));
                fingers.push((-a, b));
            }
        }
        // Shrink the open interval slightly so the inner finger faces are
        // not sampled as "between".
        let gap = self.inner_half_gap() * (1.0 - 1e-9);
        let band = steps(-self.contact_band / 2.0, self.contact_band / 2.0);
        let mut between = Vec::new();
        for a in steps(-gap, gap) {
            for &b in &band {
                between.push((a, b));
            }
        }
        (fingers, between)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TeacherConfig {
    pub gripper: GripperModel,
    /// Margin sharpness, 1/m.
    pub alpha: f64,
    pub z_bins: usize,
    pub max_height: f64,
    pub camera_height: f64,
    /// Meters per depth pixel.
    pub resolution: f64,
    /// Grey opening with a 2×2 element before scoring; removes isolated
    /// sensor returns.
    pub despeckle: bool,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        TeacherConfig {
            gripper: GripperModel::default(),
            alpha: 200.0,
            z_bins: 8,
            max_height: MAX_OBJECT_HEIGHT,
            camera_height: DEFAULT_CAMERA_HEIGHT,
            resolution: 0.005,
            despeckle: true,
        }
    }
}

impl TeacherConfig {
    /// Teacher used for picking grasps that will be executed at the center
    /// of a `stride`-pixel cell: the gripper is inflated by the largest
    /// offset between any pixel in the cell and its center.
    pub fn planning(stride: usize) -> Self {
        let base = TeacherConfig::default();
        let tol = stride.saturating_sub(1) as f64 / 2.0 * base.resolution * std::f64::consts::SQRT_2;
        TeacherConfig {
            gripper: base.gripper.inflated(tol),
            ..base
        }
    }
}

/// Integer pixel offsets `(dy, dx)` for one θ bin.
#[derive(Clone, Debug, PartialEq)]
struct Stencil {
    fingers: Vec<(isize, isize)>,
    between: Vec<(isize, isize)>,
}

fn dedup(mut v: Vec<(isize, isize)>) -> Vec<(isize, isize)> {
    v.sort_unstable();
    v.dedup();
    v
}

fn rotate90(v: &[(isize, isize)]) -> Vec<(isize, isize)> {
    // (dx, dy) -> (-dy, dx) in image coordinates.
    dedup(v.iter().map(|&(dy, dx)| (dx, -dy)).collect())
}

fn build_stencils(gripper: &GripperModel, resolution: f64) -> Vec<Stencil> {
    let (finger_pts, between_pts) = gripper.sample_points(resolution / 2.0);
    let half = THETA_BINS / 2;
    let mut out: Vec<Stencil> = (0..half)
        .map(|bin| {
            let (s, c) = theta_of_bin(bin).sin_cos();
            let to_px = |pts: &[(f64, f64)]| -> Vec<(isize, isize)> {
                dedup(
                    pts.iter()
                        .map(|&(a, b)| {
                            let dx = (a * c - b * s) / resolution;
                            let dy = (a * s + b * c) / resolution;
                            ((0.5 + dy).floor() as isize, (0.5 + dx).floor() as isize)
                        })
                        .collect(),
                )
            };
            Stencil {
                fingers: to_px(&finger_pts),
                between: to_px(&between_pts),
            }
        })
        .collect();
    // The upper half of the bins is the lower half turned by 90°, exactly,
    // so 90° image rotations permute bins without rounding drift.
    for bin in 0..half {
        let s = Stencil {
            fingers: rotate90(&out[bin].fingers),
            between: rotate90(&out[bin].between),
        };
        out.push(s);
    }
    out
}

fn sigmoid(x: f64) -> f64 {
    graspxfer_tensor::graph::sigmoid(x)
}

/// Grey opening of an `[H, W]` map with a 2×2 flat element: each pixel
/// becomes the largest minimum over the in-image 2×2 windows containing it.
pub fn open2x2(heights: &[f64], h: usize, w: usize) -> Vec<f64> {
    if h < 2 || w < 2 {
        return heights.to_vec();
    }
    let (eh, ew) = (h - 1, w - 1);
    let mut eroded = vec![0.0; eh * ew];
    for r in 0..eh {
        for c in 0..ew {
            let i = r * w + c;
            eroded[r * ew + c] = heights[i].min(heights[i + 1]).min(heights[i + w]).min(heights[i + w + 1]);
        }
    }
    let mut out = vec![f64::NEG_INFINITY; h * w];
    for r in 0..eh {
        for c in 0..ew {
            let e = eroded[r * ew + c];
            for i in [r * w + c, r * w + c + 1, (r + 1) * w + c, (r + 1) * w + c + 1] {
                if e > out[i] {
                    out[i] = e;
                }
            }
        }
    }
    out
}

#[derive(Clone, Debug)]
pub struct Teacher {
    config: TeacherConfig,
    z_heights: Vec<f64>,
    stencils: Vec<Stencil>,
    reach: usize,
}

impl Teacher {
    pub fn new(config: TeacherConfig) -> Result<Self, TeacherError> {
        config.gripper.validate()?;
        if config.z_bins == 0 {
            return Err(TeacherError::Contract("at least one z bin is required".into()));
        }
        if !(config.resolution > 0.0 && config.alpha > 0.0 && config.max_height > 0.0) {
            return Err(TeacherError::Contract("resolution, alpha and max height must be positive".into()));
        }
        let z = config.z_bins;
        let top = 0.9 * config.max_height;
        let z_heights = (1..=z).map(|k| top * k as f64 / z as f64).collect();
        let stencils = build_stencils(&config.gripper, config.resolution);
        let reach = stencils
            .iter()
            .flat_map(|s| s.fingers.iter().chain(&s.between))
            .map(|&(dy, dx)| dy.unsigned_abs().max(dx.unsigned_abs()))
            .max()
            .unwrap_or(0);
        Ok(Teacher {
            config,
            z_heights,
            stencils,
            reach,
        })
    }

    pub fn config(&self) -> &TeacherConfig {
        &self.config
    }

    pub fn z_heights(&self) -> &[f64] {
        &self.z_heights
    }

    /// Heights the teacher believes in: depth-recovered, sentinel as table,
    /// optionally despeckled. Returns `[H, W]`.
    pub fn heights(&self, depth: &Tensor) -> Result<Tensor, TeacherError> {
        if depth.rank() != 3 || depth.shape()[0] != 1 {
            return Err(TeacherError::Contract(format!("depth must be [1, H, W], got {:?}", depth.shape())));
        }
        let (h, w) = (depth.shape()[1], depth.shape()[2]);
        let raw = depth_to_height(depth, self.config.camera_height).into_data();
        let data = if self.config.despeckle { open2x2(&raw, h, w) } else { raw };
        Ok(Tensor::new(vec![h, w], data)?)
    }

    fn margins(&self, heights: &[f64], h: usize, w: usize, x: usize, y: usize, bin: usize) -> (f64, f64) {
        let read = |&(dy, dx): &(isize, isize)| -> f64 {
            let (r, c) = (y as isize + dy, x as isize + dx);
            if r < 0 || c < 0 || r >= h as isize || c >= w as isize {
                0.0
            } else {
                heights[r as usize * w + c as usize]
            }
        };
        let st = &self.stencils[bin];
        let under = st.fingers.iter().map(read).fold(0.0, f64::max);
        let between = st.between.iter().map(read).fold(0.0, f64::max);
        (under, between)
    }

    fn combine(&self, z: f64, under: f64, between: f64) -> f64 {
        let a = self.config.alpha;
        sigmoid(a * (z - under)) * sigmoid(a * (between - z))
    }

    /// Score of one grasp with a z bin. Finger samples falling outside the
    /// image read as table.
    pub fn score_grasp(&self, depth: &Tensor, q: &GraspCandidate) -> Result<f64, TeacherError> {
        let heights = self.heights(depth)?;
        let (h, w) = (heights.shape()[0], heights.shape()[1]);
        let z_bin = q
            .z_bin
            .ok_or_else(|| TeacherError::Contract("depth grasps need a z bin".into()))?;
        if q.x >= w || q.y >= h || q.theta_bin >= THETA_BINS || z_bin >= self.z_heights.len() {
            return Err(TeacherError::Contract(format!("grasp {q:?} out of bounds for {h}x{w}")));
        }
        let (under, between) = self.margins(heights.data(), h, w, q.x, q.y, q.theta_bin);
        Ok(self.combine(self.z_heights[z_bin], under, between))
    }

    /// Scores every `(z, θ, y, x)`.
    pub fn score_dense(&self, depth: &Tensor) -> Result<ScoreVolume4D, TeacherError> {
        let heights = self.heights(depth)?;
        let (h, w) = (heights.shape()[0], heights.shape()[1]);
        // Pad with table so the inner loops need no bounds checks.
        let p = self.reach;
        let (ph, pw) = (h + 2 * p, w + 2 * p);
        let mut padded = vec![0.0; ph * pw];
        for r in 0..h {
            padded[(r + p) * pw + p..(r + p) * pw + p + w].copy_from_slice(&heights.data()[r * w..(r + 1) * w]);
        }
        let z = self.z_heights.len();
        let plane = h * w;
        let mut out = vec![0.0; z * THETA_BINS * plane];
        let mut under = vec![0.0; plane];
        let mut between = vec![0.0; plane];
        for (bin, st) in self.stencils.iter().enumerate() {
            let offs = |v: &[(isize, isize)]| -> Vec<usize> {
                v.iter()
                    .map(|&(dy, dx)| ((p as isize + dy) * pw as isize + p as isize + dx) as usize)
                    .collect()
            };
            let (fo, bo) = (offs(&st.fingers), offs(&st.between));
            for y in 0..h {
                for x in 0..w {
                    let base = y * pw + x;
                    let mut u = 0.0f64;
                    for &o in &fo {
                        u = u.max(padded[base + o]);
                    }
                    let mut b = 0.0f64;
                    for &o in &bo {
                        b = b.max(padded[base + o]);
                    }
                    under[y * w + x] = u;
                    between[y * w + x] = b;
                }
            }
            for (k, &zh) in self.z_heights.iter().enumerate() {
                let dst = &mut out[(k * THETA_BINS + bin) * plane..(k * THETA_BINS + bin + 1) * plane];
                for i in 0..plane {
                    dst[i] = self.combine(zh, under[i], between[i]);
                }
            }
        }
        let t = Tensor::new(vec![z, THETA_BINS, h, w], out)?;
        Ok(ScoreVolume4D::new(t, self.z_heights.clone())?)
    }
}

/// One-off grasp score with default teacher settings.
pub fn score_grasp(
    depth: &Tensor,
    q: &GraspCandidate,
    gripper: &GripperModel,
    camera_height: f64,
) -> Result<f64, TeacherError> {
    Teacher::new(TeacherConfig {
        gripper: *gripper,
        camera_height,
        ..TeacherConfig::default()
    })?
    .score_grasp(depth, q)
}

pub fn score_dense(
    depth: &Tensor,
    gripper: &GripperModel,
    camera_height: f64,
    z_bins: usize,
) -> Result<ScoreVolume4D, TeacherError> {
    Teacher::new(TeacherConfig {
        gripper: *gripper,
        camera_height,
        z_bins,
        ..TeacherConfig::default()
    })?
    .score_dense(depth)
}
