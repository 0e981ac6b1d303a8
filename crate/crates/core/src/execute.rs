//! Ground-truth grasp execution against the true heightmap.

use std::cell::Cell;

use serde::{Deserialize, Serialize};

use crate::scene::Scene;
use crate::teacher::GripperModel;
use crate::volume::{theta_of_bin, GraspCandidate};

thread_local! {
    static ORACLE_CALLS: Cell<u64> = const { Cell::new(0) };
}

/// Number of ground-truth executions on this thread so far.
pub fn oracle_calls() -> u64 {
    ORACLE_CALLS.with(Cell::get)
}

/// A grasp in workspace coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraspPose {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

impl GraspPose {
    /// Pose of a grid candidate whose cells are `stride` pixels wide; the
    /// grasp sits at the cell center.
    pub fn from_candidate(q: &GraspCandidate, stride: usize, resolution: f64) -> Self {
        let cell = stride as f64 * resolution;
        GraspPose {
            x: (q.x as f64 + 0.5) * cell,
            y: (q.y as f64 + 0.5) * cell,
            theta: theta_of_bin(q.theta_bin),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Execution {
    pub success: bool,
    pub object: Option<usize>,
}

impl Execution {
    const FAILED: Execution = Execution {
        success: false,
        object: None,
    };
}

/// Descends until the fingertips are `contact_margin` above the tallest
/// point under them, then closes. Succeeds iff material between the
/// fingers stands above that height, the contacted object fits the stroke
/// along the closing axis, and the fingers are clear. The grasped object
/// is removed from the scene.
pub fn execute_grasp(scene: &mut Scene, pose: &GraspPose, gripper: &GripperModel) -> Execution {
    ORACLE_CALLS.with(|c| c.set(c.get() + 1));
    let res = scene.resolution();
    let (h, w) = scene.dims();
    let (s, c) = pose.theta.sin_cos();
    let lookup = |a: f64, b: f64| -> (f64, Option<usize>) {
        let px = pose.x + a * c - b * s;
        let py = pose.y + a * s + b * c;
        let (col, row) = ((px / res).floor(), (py / res).floor());
        if col < 0.0 || row < 0.0 || col >= w as f64 || row >= h as f64 {
            (0.0, None)
        } else {
            let (r, cc) = (row as usize, col as usize);
            (scene.height_px(r, cc), scene.object_px(r, cc))
        }
    };
    let (fingers, between) = gripper.sample_points(res / 4.0);
    let under = fingers.iter().map(|&(a, b)| lookup(a, b).0).fold(0.0, f64::max);
    let z_star = under + gripper.contact_margin;

    let mut top: Option<(f64, usize)> = None;
    for &(a, b) in &between {
        if let (z, Some(id)) = lookup(a, b) {
            if z > z_star && top.map_or(true, |(tz, _)| z > tz) {
                top = Some((z, id));
            }
        }
    }
    let Some((_, object)) = top else { return Execution::FAILED };
    if fingers.iter().any(|&(a, b)| lookup(a, b).0 >= z_star) {
        return Execution::FAILED;
    }

    // Extent of the contacted object along the closing axis, within the
    // strip the fingers sweep.
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for r in 0..h {
        for col in 0..w {
            if scene.object_px(r, col) != Some(object) {
                continue;
            }
            let (dx, dy) = ((col as f64 + 0.5) * res - pose.x, (r as f64 + 0.5) * res - pose.y);
            let along = dx * c + dy * s;
            let across = -dx * s + dy * c;
            if across.abs() <= gripper.finger_width / 2.0 {
                lo = lo.min(along);
                hi = hi.max(along);
            }
        }
    }
    if hi - lo + res > gripper.stroke_width {
        return Execution::FAILED;
    }
    scene.remove_object(object);
    Execution {
        success: true,
        object: Some(object),
    }
}
