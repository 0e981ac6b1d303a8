//! Isolated and clutter grasping protocols, result tables and heatmaps.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use graspxfer_tensor::Tensor;

use crate::error::EvalError;
use crate::execute::{execute_grasp, GraspPose};
use crate::fusion::{select_argmax, select_cropped, CropOutcome, CropSamplerConfig, GraspPolicy, PolicyKind};
use crate::netpbm::write_pgm8;
use crate::render::{render_pair, RenderConfig};
use crate::scene::{generate_scene, MaterialClass, ObjectSampler, ObjectSpec, Scene, SceneSpec};
use crate::teacher::GripperModel;
use crate::volume::{GraspCandidate, ScoreVolume, THETA_BINS};

/// Mixes indices into a base seed (splitmix64 finalizer per part).
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    parts.iter().fold(base, |acc, &p| {
        let mut z = acc ^ p.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub render: RenderConfig,
    /// Range the illumination factor is drawn from per rendered view.
    pub illum: (f64, f64),
    /// The real gripper executing grasps.
    pub gripper: GripperModel,
    pub sampler: ObjectSampler,
    /// Isolated protocol workspace, meters.
    pub isolated_workspace: [f64; 2],
    pub clutter_workspace: [f64; 2],
    pub resolution: f64,
    /// Objects with no pixel at least this far inside the image border are
    /// out of the gripper's reach.
    pub reach_margin: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        let gripper = GripperModel::default();
        EvalConfig {
            render: RenderConfig::default(),
            illum: (0.8, 1.2),
            gripper,
            sampler: ObjectSampler::default(),
            isolated_workspace: [0.16, 0.16],
            clutter_workspace: [0.32, 0.32],
            resolution: 0.005,
            reach_margin: 0.5 * (gripper.stroke_width + gripper.finger_thickness),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaterialStats {
    pub material: MaterialClass,
    /// Success rate of each trial.
    pub rates: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation over trials (0 for a single trial).
    pub std: f64,
}

impl MaterialStats {
    pub fn from_rates(material: MaterialClass, rates: Vec<f64>) -> Self {
        let n = rates.len() as f64;
        let mean = if rates.is_empty() { 0.0 } else { rates.iter().sum::<f64>() / n };
        let std = if rates.len() < 2 {
            0.0
        } else {
            (rates.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        MaterialStats { material, rates, mean, std }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuccessStats {
    pub trials: usize,
    /// Only materials present in the object set appear.
    pub per_material: Vec<MaterialStats>,
}

impl SuccessStats {
    pub fn get(&self, material: MaterialClass) -> Option<&MaterialStats> {
        self.per_material.iter().find(|m| m.material == material)
    }

    /// Mean over materials of the per-material means.
    pub fn material_average(&self) -> f64 {
        if self.per_material.is_empty() {
            return 0.0;
        }
        self.per_material.iter().map(|m| m.mean).sum::<f64>() / self.per_material.len() as f64
    }
}

fn draw_illum(cfg: &EvalConfig, rng: &mut ChaCha8Rng) -> f64 {
    if cfg.illum.0 >= cfg.illum.1 {
        cfg.illum.0
    } else {
        rng.gen_range(cfg.illum.0..cfg.illum.1)
    }
}

/// Each object in turn is dropped alone at a random pose, viewed, and
/// grasped once with the argmax of the policy.
pub fn run_isolated(
    policy: &dyn GraspPolicy,
    objects: &[ObjectSpec],
    trials: usize,
    seed: u64,
    cfg: &EvalConfig,
) -> Result<SuccessStats, EvalError> {
    if trials == 0 {
        return Err(EvalError::Invalid("at least one trial is required".into()));
    }
    let mut per_material = Vec::new();
    let mut outcomes: Vec<Vec<(MaterialClass, bool)>> = Vec::with_capacity(trials);
    for t in 0..trials {
        let mut trial = Vec::with_capacity(objects.len());
        for (i, obj) in objects.iter().enumerate() {
            let s = derive_seed(seed, &[t as u64, i as u64]);
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let spec = cfg
                .sampler
                .place(cfg.isolated_workspace, cfg.resolution, vec![obj.clone()], &mut rng)
                .ok_or_else(|| EvalError::Invalid(format!("object {i} does not fit the isolated workspace")))?;
            let mut scene = generate_scene(&spec, s)?;
            let illum = draw_illum(cfg, &mut rng);
            let sample = render_pair(&scene, &cfg.render, illum, s, format!("isolated-{t}-{i}"))?;
            let vol = policy.score(&sample, cfg.render.camera_height)?;
            let q = select_argmax(&vol);
            let pose = GraspPose::from_candidate(&q, vol.stride(), cfg.resolution);
            trial.push((obj.material, execute_grasp(&mut scene, &pose, &cfg.gripper).success));
        }
        outcomes.push(trial);
    }
    for m in MaterialClass::ALL {
        if !objects.iter().any(|o| o.material == m) {
            continue;
        }
        let rates = outcomes
            .iter()
            .map(|trial| {
                let of: Vec<bool> = trial.iter().filter(|(mm, _)| *mm == m).map(|&(_, ok)| ok).collect();
                of.iter().filter(|&&ok| ok).count() as f64 / of.len() as f64
            })
            .collect();
        per_material.push(MaterialStats::from_rates(m, rates));
    }
    Ok(SuccessStats { trials, per_material })
}

/// `per_material` objects of each material, drawn from the sampler.
pub fn isolated_object_set(sampler: &ObjectSampler, per_material: usize, seed: u64) -> Vec<ObjectSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    MaterialClass::ALL
        .iter()
        .flat_map(|&m| (0..per_material).map(move |_| m))
        .map(|m| sampler.sample_object(m, &mut rng))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TerminationReason {
    AllGrasped,
    ThreeConsecutiveFailures,
    ObjectsOutOfWorkspace,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Attempt {
    /// `None` when crop sampling found no crop above threshold.
    pub candidate: Option<GraspCandidate>,
    pub success: bool,
    pub score: Option<f64>,
    pub object: Option<usize>,
}

impl Attempt {
    pub fn is_no_valid_crop(&self) -> bool {
        self.candidate.is_none()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub object_count: usize,
    pub attempts: Vec<Attempt>,
    pub termination: TerminationReason,
}

impl TrialResult {
    pub fn successes(&self) -> usize {
        self.attempts.iter().filter(|a| a.success).count()
    }

    pub fn grasp_success_rate(&self) -> f64 {
        if self.attempts.is_empty() {
            0.0
        } else {
            self.successes() as f64 / self.attempts.len() as f64
        }
    }

    pub fn cleared_fraction(&self) -> f64 {
        self.successes() as f64 / self.object_count.max(1) as f64
    }
}

fn reachable(scene: &Scene, object: usize, margin: f64) -> bool {
    let (h, w) = scene.dims();
    let res = scene.resolution();
    let ids = scene.object_ids();
    (0..h).any(|r| {
        (0..w).any(|c| {
            ids[r * w + c] == Some(object) && {
                let (x, y) = ((c as f64 + 0.5) * res, (r as f64 + 0.5) * res);
                x >= margin && y >= margin && x <= w as f64 * res - margin && y <= h as f64 * res - margin
            }
        })
    })
}

/// Grasps repeatedly until every object is removed, three attempts in a row
/// fail, or no remaining object is reachable. A declined crop counts as a
/// failed attempt.
pub fn run_clutter(
    policy: &dyn GraspPolicy,
    spec: &SceneSpec,
    crop: Option<&CropSamplerConfig>,
    seed: u64,
    cfg: &EvalConfig,
) -> Result<TrialResult, EvalError> {
    if spec.objects.len() < 2 {
        return Err(EvalError::Invalid("a clutter scene needs at least two objects".into()));
    }
    let mut scene = generate_scene(spec, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0xc1u64]));
    let mut attempts = Vec::new();
    let mut consecutive = 0;
    let termination = loop {
        if scene.remaining_count() == 0 {
            break TerminationReason::AllGrasped;
        }
        if !scene.remaining_objects().any(|o| reachable(&scene, o, cfg.reach_margin)) {
            break TerminationReason::ObjectsOutOfWorkspace;
        }
        if consecutive == 3 {
            break TerminationReason::ThreeConsecutiveFailures;
        }
        let k = attempts.len() as u64;
        let view_seed = derive_seed(seed, &[1, k]);
        let illum = draw_illum(cfg, &mut rng);
        let sample = render_pair(&scene, &cfg.render, illum, view_seed, format!("clutter-{seed}-{k}"))?;
        let vol = policy.score(&sample, cfg.render.camera_height)?;
        let q = match crop {
            None => Some(select_argmax(&vol)),
            Some(c) => match select_cropped(&vol, c, cfg.resolution, derive_seed(seed, &[2, k]))? {
                CropOutcome::Grasp { candidate, .. } => Some(candidate),
                CropOutcome::NoValidCrop { .. } => None,
            },
        };
        let attempt = match q {
            None => Attempt {
                candidate: None,
                success: false,
                score: None,
                object: None,
            },
            Some(q) => {
                let pose = GraspPose::from_candidate(&q, vol.stride(), cfg.resolution);
                let out = execute_grasp(&mut scene, &pose, &cfg.gripper);
                Attempt {
                    candidate: Some(q),
                    success: out.success,
                    score: Some(vol.score_of(&q)),
                    object: out.object.filter(|_| out.success),
                }
            }
        };
        consecutive = if attempt.success { 0 } else { consecutive + 1 };
        attempts.push(attempt);
    };
    Ok(TrialResult {
        object_count: spec.objects.len(),
        attempts,
        termination,
    })
}

/// A random clutter scene with objects of mixed materials.
pub fn clutter_scene(cfg: &EvalConfig, objects: usize, seed: u64) -> SceneSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let materials: Vec<MaterialClass> = (0..objects).map(|i| MaterialClass::ALL[i % 3]).collect();
    cfg.sampler
        .random_scene(cfg.clutter_workspace, cfg.resolution, &materials, &mut rng)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ThetaSelect {
    Bin(usize),
    Max,
}

/// Grayscale heatmap of one θ slice (or the max over θ), upsampled by
/// pixel replication to input resolution.
pub fn heatmap_image(vol: &ScoreVolume, theta: ThetaSelect) -> Result<Tensor, EvalError> {
    let (h, w) = vol.grid();
    let plane: Vec<f64> = match theta {
        ThetaSelect::Bin(t) if t >= THETA_BINS => {
            return Err(EvalError::Invalid(format!("theta bin {t} out of range")));
        }
        ThetaSelect::Bin(t) => (0..h * w).map(|i| vol.at(t, i / w, i % w)).collect(),
        ThetaSelect::Max => (0..h * w)
            .map(|i| (0..THETA_BINS).map(|t| vol.at(t, i / w, i % w)).fold(0.0, f64::max))
            .collect(),
    };
    let s = vol.stride();
    Tensor::from_fn(&[h * s, w * s], |i| {
        let (r, c) = (i / (w * s), i % (w * s));
        plane[(r / s) * w + c / s]
    })
    .map_err(|e| EvalError::Invalid(e.to_string()))
}

pub fn export_heatmap(vol: &ScoreVolume, theta: ThetaSelect, path: &Path) -> Result<(), EvalError> {
    Ok(write_pgm8(path, &heatmap_image(vol, theta)?)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClutterReport {
    pub policy: PolicyKind,
    pub crop: bool,
    pub trials: Vec<TrialResult>,
}

impl ClutterReport {
    pub fn rate_stats(&self, f: impl Fn(&TrialResult) -> f64) -> (f64, f64) {
        let s = MaterialStats::from_rates(MaterialClass::Opaque, self.trials.iter().map(f).collect());
        (s.mean, s.std)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub isolated: Vec<(PolicyKind, SuccessStats)>,
    pub clutter: Vec<ClutterReport>,
}

fn pm(mean: f64, std: f64) -> String {
    format!("{mean:.3}±{std:.3}")
}

impl EvalReport {
    /// Rows are policies; columns per-material success mean±std.
    pub fn isolated_csv(&self) -> String {
        let mut out = String::from("policy,opaque,transparent,specular\n");
        for (kind, stats) in &self.isolated {
            let cells: Vec<String> = MaterialClass::ALL
                .iter()
                .map(|&m| stats.get(m).map(|s| pm(s.mean, s.std)).unwrap_or_default())
                .collect();
            let _ = writeln!(out, "{},{}", kind.name(), cells.join(","));
        }
        out
    }

    /// Rows are (policy, crop setting); grasp success rate and fraction of
    /// objects cleared as mean±std over trials.
    pub fn clutter_csv(&self) -> String {
        let mut out = String::from(
            "policy,crop,trials,grasp_success,cleared,all_grasped,three_failures,out_of_workspace\n",
        );
        for r in &self.clutter {
            let (gm, gs) = r.rate_stats(TrialResult::grasp_success_rate);
            let (cm, cs) = r.rate_stats(TrialResult::cleared_fraction);
            let count = |t: TerminationReason| r.trials.iter().filter(|x| x.termination == t).count();
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                r.policy.name(),
                if r.crop { "on" } else { "off" },
                r.trials.len(),
                pm(gm, gs),
                pm(cm, cs),
                count(TerminationReason::AllGrasped),
                count(TerminationReason::ThreeConsecutiveFailures),
                count(TerminationReason::ObjectsOutOfWorkspace),
            );
        }
        out
    }

    /// True when clutter trials ran and every attempt was a declined crop.
    pub fn only_no_valid_crop(&self) -> bool {
        let mut attempts = self.clutter.iter().flat_map(|r| &r.trials).flat_map(|t| &t.attempts).peekable();
        attempts.peek().is_some() && attempts.all(Attempt::is_no_valid_crop)
    }
}
