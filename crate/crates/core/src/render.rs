//! Depth and RGB rendering with material-dependent sensor failures.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use graspxfer_tensor::Tensor;

use crate::error::SceneError;
use crate::scene::{MaterialClass, Scene, MAX_OBJECT_HEIGHT, TABLE_COLOR};

/// Depth value reported for pixels with no sensor return.
pub const DEPTH_SENTINEL: f64 = 0.0;
pub const DEFAULT_CAMERA_HEIGHT: f64 = 0.7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderConfig {
    pub camera_height: f64,
    /// Gaussian depth noise, meters.
    pub depth_noise: f64,
    /// Fraction of transparent pixels that read the table behind them.
    pub pass_through: f64,
    /// Fraction of specular pixels with no return.
    pub dropout: f64,
    /// Specular returns are scattered uniformly over this band above the table.
    pub scatter_range: f64,
    pub rgb_noise: f64,
    /// Ambient share of the Lambertian term.
    pub ambient: f64,
    pub light_elevation: f64,
    pub rim_value: f64,
    pub highlight_value: f64,
    pub transparent_tint: f64,
    pub highlights_per_object: usize,
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig {
            camera_height: DEFAULT_CAMERA_HEIGHT,
            depth_noise: 0.001,
            pass_through: 0.9,
            dropout: 0.7,
            scatter_range: 0.1,
            rgb_noise: 0.01,
            ambient: 0.5,
            light_elevation: 60f64.to_radians(),
            rim_value: 0.95,
            highlight_value: 1.0,
            transparent_tint: 0.35,
            highlights_per_object: 2,
        }
    }
}

impl RenderConfig {
    pub fn noise_free(mut self) -> Self {
        self.depth_noise = 0.0;
        self.rgb_noise = 0.0;
        self
    }
}

/// Co-registered depth and RGB views of one scene.
#[derive(Clone, Debug, PartialEq)]
pub struct PairedSample {
    /// `[1, H, W]` distance from the camera, meters; 0.0 marks no return.
    pub depth: Tensor,
    /// `[3, H, W]` in [0, 1].
    pub rgb: Tensor,
    pub opaque_only: bool,
    pub scene_id: String,
}

impl PairedSample {
    pub fn dims(&self) -> (usize, usize) {
        (self.depth.shape()[1], self.depth.shape()[2])
    }
}

const DEPTH_STREAM: u64 = 0x6465_7074_6800_0001;
const RGB_STREAM: u64 = 0x7267_6200_0000_0002;

pub fn render_depth(scene: &Scene, camera_height: f64, seed: u64) -> Result<Tensor, SceneError> {
    let cfg = RenderConfig {
        camera_height,
        ..RenderConfig::default()
    };
    render_depth_with(scene, &cfg, seed)
}

pub fn render_depth_with(scene: &Scene, cfg: &RenderConfig, seed: u64) -> Result<Tensor, SceneError> {
    let cam = cfg.camera_height;
    if !(cam > MAX_OBJECT_HEIGHT) {
        return Err(SceneError::Invalid(format!(
            "camera height {cam} must exceed the maximum object height {MAX_OBJECT_HEIGHT}"
        )));
    }
    let (h, w) = scene.dims();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ DEPTH_STREAM);
    let noise = Normal::new(0.0, cfg.depth_noise.max(0.0)).expect("valid sigma");
    let heights = scene.heightmap().data();
    let mut out = Vec::with_capacity(h * w);
    for (i, &z) in heights.iter().enumerate() {
        // Every pixel consumes the same draws so one pixel's material does
        // not shift the noise of the others.
        let n = noise.sample(&mut rng);
        let u: f64 = rng.gen();
        let v: f64 = rng.gen();
        let d = match scene.materials()[i] {
            MaterialClass::Opaque => cam - z + n,
            MaterialClass::Transparent if u < cfg.pass_through => cam + n,
            MaterialClass::Transparent => cam - z + n,
            MaterialClass::Specular if u < cfg.dropout => DEPTH_SENTINEL,
            MaterialClass::Specular => cam - cfg.scatter_range * v,
        };
        out.push(d);
    }
    Ok(Tensor::new(vec![1, h, w], out).expect("finite depth"))
}

pub fn render_rgb(scene: &Scene, illum: f64, seed: u64) -> Result<Tensor, SceneError> {
    render_rgb_with(scene, &RenderConfig::default(), illum, seed)
}

/// Image before illumination scaling, clamping and noise.
pub fn render_rgb_linear(scene: &Scene, cfg: &RenderConfig, seed: u64) -> Tensor {
    let (h, w) = scene.dims();
    let plane = h * w;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ RGB_STREAM);
    let azimuth = rng.gen_range(0.0..std::f64::consts::TAU);
    let (se, ce) = cfg.light_elevation.sin_cos();
    let light = [ce * azimuth.cos(), ce * azimuth.sin(), se];
    let flat = cfg.ambient + (1.0 - cfg.ambient) * light[2];

    let heights = scene.heightmap().data();
    let ids = scene.object_ids();
    let albedo = scene.albedo().data();
    let res = scene.resolution();
    let same = |a: usize, b: usize| ids[a].is_some() && ids[a] == ids[b];
    // Slope from neighbors on the same surface only, so silhouettes do not
    // read as cliffs.
    let slope = |i: usize, prev: Option<usize>, next: Option<usize>| -> f64 {
        let p = prev.filter(|&j| same(i, j));
        let n = next.filter(|&j| same(i, j));
        match (p, n) {
            (Some(p), Some(n)) => (heights[n] - heights[p]) / (2.0 * res),
            (Some(p), None) => (heights[i] - heights[p]) / res,
            (None, Some(n)) => (heights[n] - heights[i]) / res,
            (None, None) => 0.0,
        }
    };
    let is_edge = |r: usize, c: usize| -> bool {
        let i = r * w + c;
        let nbrs = [
            (r > 0).then(|| i - w),
            (r + 1 < h).then(|| i + w),
            (c > 0).then(|| i - 1),
            (c + 1 < w).then(|| i + 1),
        ];
        nbrs.iter().any(|n| match n {
            Some(j) => ids[*j] != ids[i],
            None => true,
        })
    };

    let mut out = vec![0.0; 3 * plane];
    for r in 0..h {
        for c in 0..w {
            let i = r * w + c;
            let alb = [albedo[i], albedo[plane + i], albedo[2 * plane + i]];
            let rgb = match scene.materials()[i] {
                MaterialClass::Opaque => {
                    let gx = slope(i, (c > 0).then(|| i - 1), (c + 1 < w).then(|| i + 1));
                    let gy = slope(i, (r > 0).then(|| i - w), (r + 1 < h).then(|| i + w));
                    let norm = (gx * gx + gy * gy + 1.0).sqrt();
                    let ndotl = (-gx * light[0] - gy * light[1] + light[2]) / norm;
                    let shade = (cfg.ambient + (1.0 - cfg.ambient) * ndotl.max(0.0)) / flat;
                    alb.map(|a| a * shade)
                }
                MaterialClass::Transparent => {
                    if is_edge(r, c) {
                        [cfg.rim_value; 3]
                    } else {
                        let t = cfg.transparent_tint;
                        [0, 1, 2].map(|k| t * alb[k] + (1.0 - t) * TABLE_COLOR[k])
                    }
                }
                MaterialClass::Specular => alb,
            };
            for k in 0..3 {
                out[k * plane + i] = rgb[k];
            }
        }
    }

    for obj in scene.remaining_objects() {
        if scene.spec().objects[obj].material != MaterialClass::Specular {
            continue;
        }
        let pixels: Vec<usize> = (0..plane).filter(|&i| ids[i] == Some(obj)).collect();
        for _ in 0..cfg.highlights_per_object {
            let pick = rng.gen_range(0..pixels.len().max(1));
            let Some(&center) = pixels.get(pick) else { continue };
            let (r, c) = ((center / w) as isize, (center % w) as isize);
            for (dr, dc) in [(0, 0), (-1, 0), (1, 0), (0, -1), (0, 1)] {
                let (rr, cc) = (r + dr, c + dc);
                if rr < 0 || cc < 0 || rr >= h as isize || cc >= w as isize {
                    continue;
                }
                let j = rr as usize * w + cc as usize;
                if ids[j] == Some(obj) {
                    for k in 0..3 {
                        out[k * plane + j] = cfg.highlight_value;
                    }
                }
            }
        }
    }
    Tensor::new(vec![3, h, w], out).expect("finite rgb")
}

pub fn render_rgb_with(scene: &Scene, cfg: &RenderConfig, illum: f64, seed: u64) -> Result<Tensor, SceneError> {
    if !(0.25..=2.0).contains(&illum) {
        return Err(SceneError::Invalid(format!("illumination {illum} outside [0.25, 2.0]")));
    }
    let linear = render_rgb_linear(scene, cfg, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ RGB_STREAM ^ 0xff);
    let noise = Normal::new(0.0, cfg.rgb_noise.max(0.0)).expect("valid sigma");
    let data = linear
        .data()
        .iter()
        .map(|&v| (v * illum + noise.sample(&mut rng)).clamp(0.0, 1.0))
        .collect();
    Ok(Tensor::new(linear.shape().to_vec(), data).expect("clamped values are finite"))
}

/// Renders both modalities from one scene.
pub fn render_pair(
    scene: &Scene,
    cfg: &RenderConfig,
    illum: f64,
    seed: u64,
    scene_id: impl Into<String>,
) -> Result<PairedSample, SceneError> {
    Ok(PairedSample {
        depth: render_depth_with(scene, cfg, seed)?,
        rgb: render_rgb_with(scene, cfg, illum, seed)?,
        opaque_only: scene.is_opaque_only(),
        scene_id: scene_id.into(),
    })
}

/// Height above the table recovered from a depth image; missing returns
/// read as table.
pub fn depth_to_height(depth: &Tensor, camera_height: f64) -> Tensor {
    depth
        .map(|d| if d == DEPTH_SENTINEL { 0.0 } else { (camera_height - d).max(0.0) })
        .expect("finite heights")
}

/// Maps a scene-relative light level in lux onto the brightness scalar.
pub fn illum_from_lux(lux: f64) -> f64 {
    (lux / 500.0).clamp(0.25, 2.0)
}
