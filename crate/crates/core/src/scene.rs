//! Synthetic tabletop scenes: object primitives rasterized into a ground
//! truth heightmap with per-pixel material, albedo and object identity.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use graspxfer_tensor::Tensor;

use crate::error::SceneError;

/// Largest admissible object height in meters.
pub const MAX_OBJECT_HEIGHT: f64 = 0.15;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MaterialClass {
    Opaque,
    Transparent,
    Specular,
}

impl MaterialClass {
    pub const ALL: [MaterialClass; 3] = [MaterialClass::Opaque, MaterialClass::Transparent, MaterialClass::Specular];

    pub fn name(self) -> &'static str {
        match self {
            MaterialClass::Opaque => "opaque",
            MaterialClass::Transparent => "transparent",
            MaterialClass::Specular => "specular",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ShapeKind {
    /// Flat-topped rectangular block.
    Box,
    /// Elliptic cylinder standing upright; footprint gives the two axes.
    Cylinder,
    /// Roof-shaped prism: full height along the local x axis, falling to
    /// 80% of it at the long edges.
    Ridge,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    /// Center in workspace meters, x to the right and y down the image.
    pub x: f64,
    pub y: f64,
    /// Rotation of the local x axis, radians.
    pub rotation: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub shape: ShapeKind,
    pub pose: Pose,
    /// Extent along the local x and y axes, meters.
    pub footprint: [f64; 2],
    pub height: f64,
    pub material: MaterialClass,
    pub albedo: [f64; 3],
}

impl ObjectSpec {
    /// Height of the primitive at a workspace point, or `None` outside it.
    pub fn height_at(&self, px: f64, py: f64) -> Option<f64> {
        let (s, c) = self.pose.rotation.sin_cos();
        let (dx, dy) = (px - self.pose.x, py - self.pose.y);
        let lx = c * dx + s * dy;
        let ly = -s * dx + c * dy;
        let (hx, hy) = (self.footprint[0] / 2.0, self.footprint[1] / 2.0);
        match self.shape {
            ShapeKind::Box => (lx.abs() <= hx && ly.abs() <= hy).then_some(self.height),
            ShapeKind::Cylinder => ((lx / hx).powi(2) + (ly / hy).powi(2) <= 1.0).then_some(self.height),
            ShapeKind::Ridge => {
                (lx.abs() <= hx && ly.abs() <= hy).then(|| self.height * (1.0 - 0.2 * ly.abs() / hy))
            }
        }
    }

    /// Corners of the footprint's bounding rectangle in workspace coordinates.
    fn corners(&self) -> [(f64, f64); 4] {
        let (s, c) = self.pose.rotation.sin_cos();
        let (hx, hy) = (self.footprint[0] / 2.0, self.footprint[1] / 2.0);
        [(-hx, -hy), (hx, -hy), (hx, hy), (-hx, hy)]
            .map(|(lx, ly)| (self.pose.x + c * lx - s * ly, self.pose.y + s * lx + c * ly))
    }

    /// Radius of the smallest pose-centered circle containing the footprint.
    pub fn bounding_radius(&self) -> f64 {
        0.5 * self.footprint[0].hypot(self.footprint[1])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    /// Workspace width (x) and depth (y), meters.
    pub workspace: [f64; 2],
    /// Meters per pixel.
    pub resolution: f64,
    pub objects: Vec<ObjectSpec>,
}

impl SceneSpec {
    pub fn empty(workspace: [f64; 2], resolution: f64) -> Self {
        SceneSpec {
            workspace,
            resolution,
            objects: Vec::new(),
        }
    }

    /// Image size as (height, width) in pixels.
    pub fn image_dims(&self) -> Result<(usize, usize), SceneError> {
        if !(self.resolution > 0.0) {
            return Err(SceneError::Invalid(format!("resolution must be positive, got {}", self.resolution)));
        }
        let dim = |extent: f64| -> Result<usize, SceneError> {
            let n = extent / self.resolution;
            let r = n.round();
            if r < 1.0 || (n - r).abs() > 1e-6 {
                return Err(SceneError::Invalid(format!(
                    "workspace extent {extent} is not a whole number of {} m pixels",
                    self.resolution
                )));
            }
            Ok(r as usize)
        };
        Ok((dim(self.workspace[1])?, dim(self.workspace[0])?))
    }

    pub fn validate(&self) -> Result<(usize, usize), SceneError> {
        let dims = self.image_dims()?;
        for (i, o) in self.objects.iter().enumerate() {
            if !(o.height > 0.0 && o.height <= MAX_OBJECT_HEIGHT) {
                return Err(SceneError::Invalid(format!("object {i}: height {} outside (0, {MAX_OBJECT_HEIGHT}]", o.height)));
            }
            if !(o.footprint[0] > 0.0 && o.footprint[1] > 0.0) {
                return Err(SceneError::Invalid(format!("object {i}: footprint must be positive")));
            }
            if o.albedo.iter().any(|a| !(0.0..=1.0).contains(a)) {
                return Err(SceneError::Invalid(format!("object {i}: albedo outside [0,1]")));
            }
            let eps = 1e-9;
            for (cx, cy) in o.corners() {
                if cx < -eps || cy < -eps || cx > self.workspace[0] + eps || cy > self.workspace[1] + eps {
                    return Err(SceneError::OutOfWorkspace { object: i });
                }
            }
        }
        Ok(dims)
    }

    pub fn is_opaque_only(&self) -> bool {
        self.objects.iter().all(|o| o.material == MaterialClass::Opaque)
    }
}

/// Ground-truth state of a scene. Only grasp execution reads this; the
/// grasping policies see rendered images.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    spec: SceneSpec,
    seed: u64,
    present: Vec<bool>,
    height: usize,
    width: usize,
    heightmap: Tensor,
    material: Vec<MaterialClass>,
    albedo: Tensor,
    object_id: Vec<Option<usize>>,
}

impl Scene {
    pub fn spec(&self) -> &SceneSpec {
        &self.spec
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn resolution(&self) -> f64 {
        self.spec.resolution
    }

    /// `[H, W]` height above the table in meters.
    pub fn heightmap(&self) -> &Tensor {
        &self.heightmap
    }

    pub fn height_px(&self, row: usize, col: usize) -> f64 {
        self.heightmap.data()[row * self.width + col]
    }

    pub fn material_px(&self, row: usize, col: usize) -> MaterialClass {
        self.material[row * self.width + col]
    }

    pub fn object_px(&self, row: usize, col: usize) -> Option<usize> {
        self.object_id[row * self.width + col]
    }

    /// `[3, H, W]` surface albedo (table color on table pixels).
    pub fn albedo(&self) -> &Tensor {
        &self.albedo
    }

    pub fn materials(&self) -> &[MaterialClass] {
        &self.material
    }

    pub fn object_ids(&self) -> &[Option<usize>] {
        &self.object_id
    }

    pub fn is_present(&self, object: usize) -> bool {
        self.present.get(object).copied().unwrap_or(false)
    }

    pub fn remaining_objects(&self) -> impl Iterator<Item = usize> + '_ {
        self.present.iter().enumerate().filter(|(_, &p)| p).map(|(i, _)| i)
    }

    pub fn remaining_count(&self) -> usize {
        self.present.iter().filter(|&&p| p).count()
    }

    /// True when every remaining object is opaque.
    pub fn is_opaque_only(&self) -> bool {
        self.remaining_objects()
            .all(|i| self.spec.objects[i].material == MaterialClass::Opaque)
    }

    /// Material volume above the table, m^3.
    pub fn material_volume(&self) -> f64 {
        self.heightmap.sum() * self.spec.resolution * self.spec.resolution
    }

    /// Removes an object and re-rasterizes what is left.
    pub fn remove_object(&mut self, object: usize) {
        if self.is_present(object) {
            self.present[object] = false;
            self.rasterize();
        }
    }

    fn rasterize(&mut self) {
        let (h, w) = (self.height, self.width);
        let res = self.spec.resolution;
        let mut heights = vec![0.0; h * w];
        let mut material = vec![MaterialClass::Opaque; h * w];
        let mut object_id = vec![None; h * w];
        let mut albedo = vec![0.0; 3 * h * w];
        let table = TABLE_COLOR;
        for (c, &t) in table.iter().enumerate() {
            albedo[c * h * w..(c + 1) * h * w].fill(t);
        }
        for (idx, obj) in self.spec.objects.iter().enumerate() {
            if !self.present[idx] {
                continue;
            }
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ (0x9e37_79b9_7f4a_7c15u64.wrapping_mul(idx as u64 + 1)));
            for r in 0..h {
                for col in 0..w {
                    let (px, py) = ((col as f64 + 0.5) * res, (r as f64 + 0.5) * res);
                    // Texture draws happen for every pixel so removing other
                    // objects leaves this object's appearance unchanged.
                    let texture = 1.0 + TEXTURE_AMPLITUDE * (rng.gen::<f64>() * 2.0 - 1.0);
                    let Some(z) = obj.height_at(px, py) else { continue };
                    let i = r * w + col;
                    if z > heights[i] {
                        heights[i] = z;
                        material[i] = obj.material;
                        object_id[i] = Some(idx);
                        for c in 0..3 {
                            albedo[c * h * w + i] = (obj.albedo[c] * texture).clamp(0.0, 1.0);
                        }
                    }
                }
            }
        }
        self.heightmap = Tensor::new(vec![h, w], heights).expect("finite heights");
        self.albedo = Tensor::new(vec![3, h, w], albedo).expect("finite albedo");
        self.material = material;
        self.object_id = object_id;
    }
}

/// Table surface color.
pub const TABLE_COLOR: [f64; 3] = [0.50, 0.47, 0.44];
const TEXTURE_AMPLITUDE: f64 = 0.04;

/// Rasterizes a scene. The seed only drives the fine albedo texture on
/// objects; geometry comes entirely from the spec.
pub fn generate_scene(spec: &SceneSpec, seed: u64) -> Result<Scene, SceneError> {
    let (h, w) = spec.validate()?;
    let mut scene = Scene {
        spec: spec.clone(),
        seed,
        present: vec![true; spec.objects.len()],
        height: h,
        width: w,
        heightmap: Tensor::zeros(&[h, w]),
        material: Vec::new(),
        albedo: Tensor::zeros(&[3, h, w]),
        object_id: Vec::new(),
    };
    scene.rasterize();
    Ok(scene)
}

/// Size ranges for randomly drawn objects.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ObjectSampler {
    /// (min, max) of the narrow footprint side, meters.
    pub narrow: (f64, f64),
    /// (min, max) of the long footprint side, meters.
    pub long: (f64, f64),
    pub height: (f64, f64),
    /// Keep-out band along the workspace border for object centers, meters.
    pub border: f64,
    /// Minimum gap between footprints of different objects, meters.
    pub spacing: f64,
}

impl Default for ObjectSampler {
    fn default() -> Self {
        ObjectSampler {
            narrow: (0.012, 0.018),
            long: (0.015, 0.035),
            height: (0.03, 0.08),
            border: 0.04,
            spacing: 0.02,
        }
    }
}

impl ObjectSampler {
    /// Draws a shape, size and albedo; the pose is left at the origin.
    pub fn sample_object(&self, material: MaterialClass, rng: &mut impl Rng) -> ObjectSpec {
        let shape = match rng.gen_range(0..3) {
            0 => ShapeKind::Box,
            1 => ShapeKind::Cylinder,
            _ => ShapeKind::Ridge,
        };
        let narrow = rng.gen_range(self.narrow.0..=self.narrow.1);
        let footprint = match shape {
            ShapeKind::Cylinder => {
                let d = rng.gen_range(self.narrow.0.max(0.014)..=self.narrow.1);
                [d, d]
            }
            _ => [rng.gen_range(self.long.0.max(narrow)..=self.long.1.max(narrow)), narrow],
        };
        ObjectSpec {
            shape,
            pose: Pose {
                x: 0.0,
                y: 0.0,
                rotation: 0.0,
            },
            footprint,
            height: rng.gen_range(self.height.0..=self.height.1),
            material,
            albedo: sample_albedo(rng),
        }
    }

    /// Places `objects` at random non-overlapping poses; returns `None` if
    /// rejection sampling gives up.
    pub fn place(
        &self,
        workspace: [f64; 2],
        resolution: f64,
        mut objects: Vec<ObjectSpec>,
        rng: &mut impl Rng,
    ) -> Option<SceneSpec> {
        let mut placed: Vec<ObjectSpec> = Vec::with_capacity(objects.len());
        for mut obj in objects.drain(..) {
            let mut ok = false;
            for _ in 0..500 {
                obj.pose = Pose {
                    x: rng.gen_range(self.border..=workspace[0] - self.border),
                    y: rng.gen_range(self.border..=workspace[1] - self.border),
                    rotation: rng.gen_range(0.0..std::f64::consts::PI),
                };
                let clear = placed.iter().all(|p| {
                    let d = (p.pose.x - obj.pose.x).hypot(p.pose.y - obj.pose.y);
                    d >= p.bounding_radius() + obj.bounding_radius() + self.spacing
                });
                if clear {
                    ok = true;
                    break;
                }
            }
            if !ok {
                return None;
            }
            placed.push(obj);
        }
        Some(SceneSpec {
            workspace,
            resolution,
            objects: placed,
        })
    }

    /// A scene with one object per entry of `materials`.
    pub fn random_scene(
        &self,
        workspace: [f64; 2],
        resolution: f64,
        materials: &[MaterialClass],
        rng: &mut impl Rng,
    ) -> SceneSpec {
        loop {
            let objects = materials.iter().map(|&m| self.sample_object(m, rng)).collect();
            if let Some(spec) = self.place(workspace, resolution, objects, rng) {
                return spec;
            }
        }
    }
}

/// Rejection-samples colors that keep at least 0.35 of contrast against the
/// table in some channel under any shading factor the renderer can apply.
fn sample_albedo(rng: &mut impl Rng) -> [f64; 3] {
    loop {
        let a = [rng.gen_range(0.05..0.95), rng.gen_range(0.05..0.95), rng.gen_range(0.05..0.95)];
        let visible = [0.5, 1.0, 1.2].iter().all(|&shade| {
            [1.0 - TEXTURE_AMPLITUDE, 1.0 + TEXTURE_AMPLITUDE].iter().all(|&tex| {
                a.iter()
                    .zip(TABLE_COLOR)
                    .map(|(x, t)| ((x * shade * tex).min(1.0) - t).abs())
                    .fold(0.0, f64::max)
                    >= 0.35
            })
        });
        if visible {
            return a;
        }
    }
}
