//! Grasp parameterization and dense score volumes.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use graspxfer_tensor::{Container, Tensor, TensorError};

/// Number of rotation bins; bins partition [0, π) uniformly.
pub const THETA_BINS: usize = 16;

/// Closing-axis angle of a θ bin, radians in image coordinates (x right,
/// y down).
pub fn theta_of_bin(bin: usize) -> f64 {
    bin as f64 * PI / THETA_BINS as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GraspCandidate {
    pub x: usize,
    pub y: usize,
    pub theta_bin: usize,
    pub z_bin: Option<usize>,
}

impl GraspCandidate {
    pub fn planar(x: usize, y: usize, theta_bin: usize) -> Self {
        GraspCandidate {
            x,
            y,
            theta_bin,
            z_bin: None,
        }
    }

    pub fn with_z(x: usize, y: usize, theta_bin: usize, z_bin: usize) -> Self {
        GraspCandidate {
            x,
            y,
            theta_bin,
            z_bin: Some(z_bin),
        }
    }
}

/// Which scorer produced a volume.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScoreSource {
    Depth,
    Rgb,
    Rgbd,
    Fused,
}

/// Scores over `[θ, y, x]`. Cell `(y, x)` covers input pixels
/// `[stride·y, stride·(y+1)) × [stride·x, stride·(x+1))` and its grasp sits
/// at the cell center.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreVolume {
    scores: Tensor,
    stride: usize,
    source: ScoreSource,
}

fn check_unit(t: &Tensor) -> Result<(), TensorError> {
    match t.data().iter().position(|v| !(0.0..=1.0).contains(v)) {
        Some(index) => Err(TensorError::Contract(format!(
            "score {} at {index} outside [0,1]",
            t.data()[index]
        ))),
        None => Ok(()),
    }
}

impl ScoreVolume {
    pub fn new(scores: Tensor, stride: usize, source: ScoreSource) -> Result<Self, TensorError> {
        if scores.rank() != 3 || scores.shape()[0] != THETA_BINS {
            return Err(TensorError::Dimension(format!(
                "score volume must be [{THETA_BINS}, H, W], got {:?}",
                scores.shape()
            )));
        }
        if stride == 0 {
            return Err(TensorError::Contract("stride must be ≥ 1".into()));
        }
        check_unit(&scores)?;
        Ok(ScoreVolume { scores, stride, source })
    }

    pub fn scores(&self) -> &Tensor {
        &self.scores
    }

    pub fn into_scores(self) -> Tensor {
        self.scores
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn source(&self) -> ScoreSource {
        self.source
    }

    /// `(H, W)` of the cell grid.
    pub fn grid(&self) -> (usize, usize) {
        (self.scores.shape()[1], self.scores.shape()[2])
    }

    pub fn at(&self, theta: usize, y: usize, x: usize) -> f64 {
        let (h, w) = self.grid();
        self.scores.data()[(theta * h + y) * w + x]
    }

    pub fn score_of(&self, q: &GraspCandidate) -> f64 {
        self.at(q.theta_bin, q.y, q.x)
    }

    /// Grasp center of a cell, in input-pixel units.
    pub fn cell_center_px(&self, x: usize, y: usize) -> (f64, f64) {
        let s = self.stride as f64;
        ((x as f64 + 0.5) * s, (y as f64 + 0.5) * s)
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new(serde_json::json!({
            "kind": "score_volume",
            "stride": self.stride,
            "source": self.source,
        }));
        c.push("scores", self.scores.clone());
        c
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreVolume4D {
    scores: Tensor,
    z_heights: Vec<f64>,
}

impl ScoreVolume4D {
    pub fn new(scores: Tensor, z_heights: Vec<f64>) -> Result<Self, TensorError> {
        if scores.rank() != 4 || scores.shape()[1] != THETA_BINS || scores.shape()[0] != z_heights.len() {
            return Err(TensorError::Dimension(format!(
                "4-D volume must be [Z={}, {THETA_BINS}, H, W], got {:?}",
                z_heights.len(),
                scores.shape()
            )));
        }
        let increasing = z_heights.windows(2).all(|p| p[0] < p[1]);
        if z_heights.is_empty() || !increasing || z_heights[0] <= 0.0 {
            return Err(TensorError::Contract("z heights must be positive and strictly increasing".into()));
        }
        check_unit(&scores)?;
        Ok(ScoreVolume4D { scores, z_heights })
    }

    pub fn scores(&self) -> &Tensor {
        &self.scores
    }

    pub fn z_heights(&self) -> &[f64] {
        &self.z_heights
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.scores.shape()[2], self.scores.shape()[3])
    }

    pub fn at(&self, z: usize, theta: usize, y: usize, x: usize) -> f64 {
        let (h, w) = self.grid();
        self.scores.data()[((z * THETA_BINS + theta) * h + y) * w + x]
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new(serde_json::json!({
            "kind": "score_volume_4d",
            "z_heights": self.z_heights,
        }));
        c.push("scores", self.scores.clone());
        c
    }
}

/// Best score over grasp heights, on the full-resolution pixel grid.
pub fn max_over_z(vol: &ScoreVolume4D) -> ScoreVolume {
    let z = vol.z_heights.len();
    let slice = vol.scores.len() / z;
    let d = vol.scores.data();
    let mut out = d[..slice].to_vec();
    for k in 1..z {
        for (o, &v) in out.iter_mut().zip(&d[k * slice..(k + 1) * slice]) {
            if v > *o {
                *o = v;
            }
        }
    }
    let (h, w) = vol.grid();
    let t = Tensor::new(vec![THETA_BINS, h, w], out).expect("finite");
    ScoreVolume::new(t, 1, ScoreSource::Depth).expect("scores stay in [0,1]")
}
