//! Paired spatial augmentation and RGB-only color jitter.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use graspxfer_tensor::Tensor;

use crate::render::{PairedSample, DEFAULT_CAMERA_HEIGHT};
use crate::scene::TABLE_COLOR;
use crate::volume::THETA_BINS;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub variants: usize,
    pub flips: bool,
    pub jitter: bool,
    /// Multiplicative brightness range is `1 ± brightness`.
    pub brightness: f64,
    pub contrast: f64,
    /// Maximum hue rotation about the gray axis, radians.
    pub hue: f64,
    /// Fill for depth pixels rotated in from outside the image.
    pub depth_fill: f64,
    pub rgb_fill: [f64; 3],
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            variants: 32,
            flips: true,
            jitter: true,
            brightness: 0.25,
            contrast: 0.2,
            hue: 0.1,
            depth_fill: DEFAULT_CAMERA_HEIGHT,
            rgb_fill: TABLE_COLOR,
        }
    }
}

impl AugmentConfig {
    pub fn geometric_only(mut self) -> Self {
        self.flips = false;
        self.jitter = false;
        self
    }
}

/// A rigid image transform: optional horizontal flip, then rotation by
/// `steps` θ-bin widths about the image center.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SpatialTransform {
    pub steps: usize,
    pub flip: bool,
}

impl SpatialTransform {
    pub fn angle(&self) -> f64 {
        self.steps as f64 * PI / THETA_BINS as f64
    }

    /// Source pixel `(row, col)` that lands on output pixel `(row, col)`,
    /// or `None` when it falls outside the image.
    pub fn preimage(&self, h: usize, w: usize, row: usize, col: usize) -> Option<(usize, usize)> {
        let (s, c) = self.angle().sin_cos();
        let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
        let (dx, dy) = (col as f64 + 0.5 - cx, row as f64 + 0.5 - cy);
        let mut sx = c * dx + s * dy;
        let sy = -s * dx + c * dy;
        if self.flip {
            sx = -sx;
        }
        let (fc, fr) = ((sx + cx).floor(), (sy + cy).floor());
        (fc >= 0.0 && fr >= 0.0 && fc < w as f64 && fr < h as f64).then_some((fr as usize, fc as usize))
    }

    /// Resamples every channel of a `[C, H, W]` tensor.
    pub fn apply(&self, image: &Tensor, fill: &[f64]) -> Tensor {
        let (ch, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
        let src = image.data();
        let mut out = vec![0.0; ch * h * w];
        for r in 0..h {
            for col in 0..w {
                let pre = self.preimage(h, w, r, col);
                for k in 0..ch {
                    out[k * h * w + r * w + col] = match pre {
                        Some((sr, sc)) => src[k * h * w + sr * w + sc],
                        None => fill[k.min(fill.len() - 1)],
                    };
                }
            }
        }
        Tensor::new(vec![ch, h, w], out).expect("resampled values are finite")
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ColorJitter {
    pub brightness: f64,
    pub contrast: f64,
    pub hue: f64,
}

impl ColorJitter {
    pub const IDENTITY: ColorJitter = ColorJitter {
        brightness: 1.0,
        contrast: 1.0,
        hue: 0.0,
    };

    pub fn apply(&self, rgb: &Tensor) -> Tensor {
        let plane = rgb.shape()[1] * rgb.shape()[2];
        let d = rgb.data();
        // Rodrigues rotation about the gray axis.
        let (s, c) = self.hue.sin_cos();
        let k = 1.0 / 3.0;
        let a = c + (1.0 - c) * k;
        let b = (1.0 - c) * k - s * k.sqrt();
        let e = (1.0 - c) * k + s * k.sqrt();
        let m = [[a, b, e], [e, a, b], [b, e, a]];
        let mut out = vec![0.0; 3 * plane];
        for i in 0..plane {
            let px = [d[i], d[plane + i], d[2 * plane + i]];
            for ch in 0..3 {
                let v = m[ch][0] * px[0] + m[ch][1] * px[1] + m[ch][2] * px[2];
                out[ch * plane + i] = v * self.brightness;
            }
        }
        let mean = out.iter().sum::<f64>() / out.len().max(1) as f64;
        for v in &mut out {
            *v = ((*v - mean) * self.contrast + mean).clamp(0.0, 1.0);
        }
        Tensor::new(rgb.shape().to_vec(), out).expect("finite")
    }
}

/// Parameters of variant `index` for a given seed.
pub fn variant_params(cfg: &AugmentConfig, seed: u64, index: usize) -> (SpatialTransform, ColorJitter) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x2545_f491_4f6c_dd1d) ^ index as u64);
    let flip = cfg.flips && rng.gen_bool(0.5);
    let jitter = if cfg.jitter {
        ColorJitter {
            brightness: 1.0 + rng.gen_range(-cfg.brightness..=cfg.brightness),
            contrast: 1.0 + rng.gen_range(-cfg.contrast..=cfg.contrast),
            hue: rng.gen_range(-cfg.hue..=cfg.hue),
        }
    } else {
        ColorJitter::IDENTITY
    };
    (
        SpatialTransform {
            steps: index % (2 * THETA_BINS),
            flip,
        },
        jitter,
    )
}

pub fn augment_variant(sample: &PairedSample, cfg: &AugmentConfig, seed: u64, index: usize) -> PairedSample {
    let (t, jitter) = variant_params(cfg, seed, index);
    let depth = t.apply(&sample.depth, &[cfg.depth_fill]);
    let rgb = t.apply(&sample.rgb, &cfg.rgb_fill);
    let rgb = if jitter == ColorJitter::IDENTITY { rgb } else { jitter.apply(&rgb) };
    PairedSample {
        depth,
        rgb,
        opaque_only: sample.opaque_only,
        scene_id: sample.scene_id.clone(),
    }
}

/// All `cfg.variants` augmentations of a sample; variant `j` is rotated by
/// `j` θ-bin widths.
pub fn augment_pair(sample: &PairedSample, cfg: &AugmentConfig, seed: u64) -> Vec<PairedSample> {
    (0..cfg.variants).map(|j| augment_variant(sample, cfg, seed, j)).collect()
}
