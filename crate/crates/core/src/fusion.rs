//! The four grasping policies and grasp selection.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use graspxfer_tensor::{maxpool2d, TensorError};

use crate::error::PolicyError;
use crate::net::{forward_dense, prepare_input, Modality, NetworkParams, OUTPUT_STRIDE};
use crate::render::PairedSample;
use crate::teacher::Teacher;
use crate::volume::{max_over_z, GraspCandidate, ScoreSource, ScoreVolume};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PolicyKind {
    #[serde(rename = "depth")]
    DepthOnly,
    #[serde(rename = "rgb-st")]
    RgbStudent,
    #[serde(rename = "rgbd-st")]
    RgbdStudent,
    #[serde(rename = "rgbd-m")]
    LateFusion,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 4] = [
        PolicyKind::DepthOnly,
        PolicyKind::RgbStudent,
        PolicyKind::RgbdStudent,
        PolicyKind::LateFusion,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PolicyKind::DepthOnly => "depth",
            PolicyKind::RgbStudent => "rgb-st",
            PolicyKind::RgbdStudent => "rgbd-st",
            PolicyKind::LateFusion => "rgbd-m",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        PolicyKind::ALL.into_iter().find(|k| k.name() == name)
    }
}

/// A grasp scorer over rendered images. Policies never see the scene.
#[derive(Clone, Debug)]
pub enum Policy {
    DepthOnly { teacher: Teacher },
    RgbStudent { net: NetworkParams },
    RgbdStudent { net: NetworkParams },
    LateFusion { teacher: Teacher, net: NetworkParams },
}

fn check_channels(net: &NetworkParams, modality: Modality) -> Result<(), PolicyError> {
    if net.input_channels() != modality.channels() {
        return Err(PolicyError::Contract(format!(
            "network takes {} channels, {:?} input has {}",
            net.input_channels(),
            modality,
            modality.channels()
        )));
    }
    Ok(())
}

impl Policy {
    pub fn depth_only(teacher: Teacher) -> Self {
        Policy::DepthOnly { teacher }
    }

    pub fn rgb_student(net: NetworkParams) -> Result<Self, PolicyError> {
        check_channels(&net, Modality::Rgb)?;
        Ok(Policy::RgbStudent { net })
    }

    pub fn rgbd_student(net: NetworkParams) -> Result<Self, PolicyError> {
        check_channels(&net, Modality::Rgbd)?;
        Ok(Policy::RgbdStudent { net })
    }

    pub fn late_fusion(teacher: Teacher, net: NetworkParams) -> Result<Self, PolicyError> {
        check_channels(&net, Modality::Rgb)?;
        Ok(Policy::LateFusion { teacher, net })
    }

    pub fn kind(&self) -> PolicyKind {
        match self {
            Policy::DepthOnly { .. } => PolicyKind::DepthOnly,
            Policy::RgbStudent { .. } => PolicyKind::RgbStudent,
            Policy::RgbdStudent { .. } => PolicyKind::RgbdStudent,
            Policy::LateFusion { .. } => PolicyKind::LateFusion,
        }
    }
}

fn depth_volume(teacher: &Teacher, sample: &PairedSample) -> Result<ScoreVolume, PolicyError> {
    let full = max_over_z(&teacher.score_dense(&sample.depth)?);
    let pooled = maxpool2d(full.scores(), OUTPUT_STRIDE)?;
    Ok(ScoreVolume::new(pooled, OUTPUT_STRIDE, ScoreSource::Depth)?)
}

fn student_volume(net: &NetworkParams, sample: &PairedSample, modality: Modality, cam: f64) -> Result<ScoreVolume, PolicyError> {
    check_channels(net, modality)?;
    Ok(forward_dense(net, &prepare_input(sample, modality, cam))?)
}

/// Scores a rendered sample on the stride-4 student grid.
pub fn score_scene(policy: &Policy, sample: &PairedSample, camera_height: f64) -> Result<ScoreVolume, PolicyError> {
    let (h, w) = sample.dims();
    if h % OUTPUT_STRIDE != 0 || w % OUTPUT_STRIDE != 0 {
        return Err(PolicyError::Contract(format!(
            "image {h}x{w} is not a multiple of {OUTPUT_STRIDE}"
        )));
    }
    match policy {
        Policy::DepthOnly { teacher } => depth_volume(teacher, sample),
        Policy::RgbStudent { net } => student_volume(net, sample, Modality::Rgb, camera_height),
        Policy::RgbdStudent { net } => student_volume(net, sample, Modality::Rgbd, camera_height),
        Policy::LateFusion { teacher, net } => {
            let d = depth_volume(teacher, sample)?;
            let r = student_volume(net, sample, Modality::Rgb, camera_height)?;
            Ok(fuse_late(&d, &r)?)
        }
    }
}

/// A grasp scorer that sees only rendered images.
pub trait GraspPolicy {
    fn score(&self, sample: &PairedSample, camera_height: f64) -> Result<ScoreVolume, PolicyError>;
}

impl GraspPolicy for Policy {
    fn score(&self, sample: &PairedSample, camera_height: f64) -> Result<ScoreVolume, PolicyError> {
        score_scene(self, sample, camera_height)
    }
}

/// Elementwise mean of the depth and RGB volumes.
pub fn fuse_late(depth: &ScoreVolume, rgb: &ScoreVolume) -> Result<ScoreVolume, TensorError> {
    if depth.stride() != rgb.stride() {
        return Err(TensorError::Dimension(format!(
            "strides differ: {} vs {}",
            depth.stride(),
            rgb.stride()
        )));
    }
    let mean = depth.scores().zip_map(rgb.scores(), |a, b| 0.5 * (a + b))?;
    ScoreVolume::new(mean, depth.stride(), ScoreSource::Fused)
}

/// Maximum over `(θ, y, x)` restricted to the window `rows × cols`; the
/// first maximum in `(θ, y, x)` order wins.
fn window_argmax(vol: &ScoreVolume, rows: std::ops::Range<usize>, cols: std::ops::Range<usize>) -> (GraspCandidate, f64) {
    let (h, w) = vol.grid();
    let d = vol.scores().data();
    let mut best = (GraspCandidate::planar(cols.start, rows.start, 0), f64::NEG_INFINITY);
    for t in 0..vol.scores().shape()[0] {
        for y in rows.clone() {
            let row = &d[(t * h + y) * w..][..w];
            for x in cols.clone() {
                if row[x] > best.1 {
                    best = (GraspCandidate::planar(x, y, t), row[x]);
                }
            }
        }
    }
    best
}

/// Highest-scoring candidate; ties go to the smallest `(θ, y, x)`.
pub fn select_argmax(vol: &ScoreVolume) -> GraspCandidate {
    let (h, w) = vol.grid();
    window_argmax(vol, 0..h, 0..w).0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CropSamplerConfig {
    /// Side of the square crop, meters.
    pub crop_size: f64,
    pub score_threshold: f64,
    pub max_resamples: usize,
}

impl Default for CropSamplerConfig {
    fn default() -> Self {
        CropSamplerConfig {
            crop_size: 0.2,
            score_threshold: 0.4,
            max_resamples: 20,
        }
    }
}

impl CropSamplerConfig {
    pub fn validate(&self) -> Result<(), PolicyError> {
        if !(self.crop_size > 0.0) || !(0.0..=1.0).contains(&self.score_threshold) || self.max_resamples == 0 {
            return Err(PolicyError::Contract(format!("invalid crop sampler config {self:?}")));
        }
        Ok(())
    }

    /// Crop side in grid cells for a volume with the given pixel size and
    /// stride.
    pub fn cells(&self, resolution: f64, stride: usize) -> usize {
        (self.crop_size / (resolution * stride as f64)).round().max(1.0) as usize
    }
}

/// A square window of grid cells.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropWindow {
    pub y: usize,
    pub x: usize,
    pub size: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum CropOutcome {
    Grasp {
        candidate: GraspCandidate,
        crop: CropWindow,
        attempts: usize,
    },
    NoValidCrop { attempts: usize },
}

/// Samples crop origins uniformly among crops lying fully inside the
/// volume and returns the argmax of the first crop whose best score clears
/// the threshold. `resolution` is meters per input pixel.
pub fn select_cropped(
    vol: &ScoreVolume,
    cfg: &CropSamplerConfig,
    resolution: f64,
    seed: u64,
) -> Result<CropOutcome, PolicyError> {
    cfg.validate()?;
    let (h, w) = vol.grid();
    let c = cfg.cells(resolution, vol.stride());
    if c > h || c > w {
        return Err(PolicyError::Contract(format!(
            "crop of {c} cells does not fit a {h}x{w} grid"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for attempt in 1..=cfg.max_resamples {
        let y0 = rng.gen_range(0..=h - c);
        let x0 = rng.gen_range(0..=w - c);
        let (q, score) = window_argmax(vol, y0..y0 + c, x0..x0 + c);
        if score >= cfg.score_threshold {
            return Ok(CropOutcome::Grasp {
                candidate: q,
                crop: CropWindow { y: y0, x: x0, size: c },
                attempts: attempt,
            });
        }
    }
    Ok(CropOutcome::NoValidCrop {
        attempts: cfg.max_resamples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use graspxfer_tensor::Tensor;

    fn vol(f: impl FnMut(usize) -> f64) -> ScoreVolume {
        ScoreVolume::new(Tensor::from_fn(&[16, 8, 8], f).unwrap(), 4, ScoreSource::Rgb).unwrap()
    }

    #[test]
    fn single_peak_and_ties() {
        let v = vol(|i| if i == (5 * 8 + 3) * 8 + 4 { 0.9 } else { 0.1 });
        assert_eq!(select_argmax(&v), GraspCandidate::planar(4, 3, 5));
        assert_eq!(select_argmax(&vol(|_| 0.3)), GraspCandidate::planar(0, 0, 0));
    }

    #[test]
    fn fusion_closed_forms() {
        let z = vol(|_| 0.0);
        let o = vol(|_| 1.0);
        assert!(fuse_late(&z, &o).unwrap().scores().data().iter().all(|&v| v == 0.5));
        let a = vol(|i| (i % 7) as f64 / 7.0);
        assert_eq!(fuse_late(&a, &a).unwrap().scores(), a.scores());
    }

    #[test]
    fn crop_all_below_threshold() {
        let v = vol(|_| 0.39);
        let cfg = CropSamplerConfig {
            crop_size: 0.08,
            ..Default::default()
        };
        let out = select_cropped(&v, &cfg, 0.005, 3).unwrap();
        assert_eq!(out, CropOutcome::NoValidCrop { attempts: 20 });
    }

    #[test]
    fn crop_all_above_threshold_accepts_first() {
        let v = vol(|i| 0.4 + (i % 11) as f64 / 100.0);
        let cfg = CropSamplerConfig {
            crop_size: 0.08,
            ..Default::default()
        };
        match select_cropped(&v, &cfg, 0.005, 9).unwrap() {
            CropOutcome::Grasp { attempts, .. } => assert_eq!(attempts, 1),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn oversized_crop_is_rejected() {
        let v = vol(|_| 0.5);
        let cfg = CropSamplerConfig {
            crop_size: 1.0,
            ..Default::default()
        };
        assert!(select_cropped(&v, &cfg, 0.005, 0).is_err());
    }

    #[test]
    fn policy_names_round_trip() {
        for k in PolicyKind::ALL {
            assert_eq!(PolicyKind::parse(k.name()), Some(k));
        }
    }
}
