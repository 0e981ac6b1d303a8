//! Dataset generation and the end-to-end run: data, training, evaluation,
//! tables and heatmaps.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{write_manifest, write_sample_dir, DiskDataset, Manifest, ManifestEntry, PairedDataset, SceneRecord, Split};
use crate::error::{DatasetError, EvalError, IoError, NetError, PolicyError, TeacherError, TrainError};
use crate::eval::{
    clutter_scene, derive_seed, export_heatmap, isolated_object_set, run_clutter, run_isolated, ClutterReport, EvalConfig,
    EvalReport, ThetaSelect,
};
use crate::fusion::{score_scene, CropSamplerConfig, Policy, PolicyKind};
use crate::net::{CheckpointInfo, Modality, NetworkParams, OUTPUT_STRIDE};
use crate::render::{render_pair, RenderConfig};
use crate::scene::{generate_scene, MaterialClass, ObjectSampler};
use crate::teacher::{Teacher, TeacherConfig};
use crate::train::{train_with_observer, TrainConfig, TrainReport};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenDataConfig {
    pub train_opaque: usize,
    pub train_transparent: usize,
    pub train_specular: usize,
    pub val_opaque: usize,
    pub workspace: [f64; 2],
    pub resolution: f64,
    /// Inclusive range of objects per scene.
    pub objects: (usize, usize),
    pub illum: (f64, f64),
    pub render: RenderConfig,
    pub sampler: ObjectSampler,
}

impl Default for GenDataConfig {
    fn default() -> Self {
        GenDataConfig {
            train_opaque: 200,
            train_transparent: 25,
            train_specular: 25,
            val_opaque: 50,
            workspace: [0.16, 0.16],
            resolution: 0.005,
            objects: (1, 2),
            illum: (0.6, 1.4),
            render: RenderConfig::default(),
            sampler: ObjectSampler::default(),
        }
    }
}

fn is_generated_entry(name: &str) -> bool {
    name == crate::dataset::MANIFEST_FILE
        || name.strip_prefix("scene").is_some_and(|rest| !rest.is_empty() && rest.bytes().all(|b| b.is_ascii_digit()))
}

fn prepare_out_dir(out: &Path, force: bool) -> Result<(), DatasetError> {
    if out.exists() {
        let entries: Vec<_> = fs::read_dir(out)
            .map_err(|e| IoError::io(out, e))?
            .collect::<Result<_, _>>()
            .map_err(|e| IoError::io(out, e))?;
        if !entries.is_empty() {
            if !force {
                return Err(DatasetError::NotEmpty(out.to_path_buf()));
            }
            for e in entries {
                let name = e.file_name();
                if is_generated_entry(&name.to_string_lossy()) {
                    let p = e.path();
                    let r = if p.is_dir() { fs::remove_dir_all(&p) } else { fs::remove_file(&p) };
                    r.map_err(|err| IoError::io(&p, err))?;
                }
            }
        }
    }
    fs::create_dir_all(out).map_err(|e| IoError::io(out, e))?;
    Ok(())
}

/// Writes a paired dataset: training scenes of each material class (a
/// non-opaque scene holds at least one object of its class) and opaque
/// validation scenes. Output depends only on `(cfg, seed)`.
pub fn gen_data(cfg: &GenDataConfig, out: &Path, seed: u64, force: bool) -> Result<Manifest, DatasetError> {
    if cfg.objects.0 == 0 || cfg.objects.0 > cfg.objects.1 {
        return Err(DatasetError::Scene(crate::error::SceneError::Invalid(format!(
            "object count range {:?} is empty",
            cfg.objects
        ))));
    }
    prepare_out_dir(out, force)?;
    let plan: Vec<(MaterialClass, Split)> = [
        (MaterialClass::Opaque, Split::Train, cfg.train_opaque),
        (MaterialClass::Transparent, Split::Train, cfg.train_transparent),
        (MaterialClass::Specular, Split::Train, cfg.train_specular),
        (MaterialClass::Opaque, Split::Validation, cfg.val_opaque),
    ]
    .iter()
    .flat_map(|&(m, s, n)| std::iter::repeat((m, s)).take(n))
    .collect();

    let mut manifest = Manifest {
        seed,
        camera_height: cfg.render.camera_height,
        scenes: Vec::with_capacity(plan.len()),
    };
    for (i, &(material, split)) in plan.iter().enumerate() {
        let scene_seed = derive_seed(seed, &[i as u64]);
        let mut rng = ChaCha8Rng::seed_from_u64(scene_seed);
        let n = rng.gen_range(cfg.objects.0..=cfg.objects.1);
        let mut materials = vec![MaterialClass::Opaque; n];
        materials[0] = material;
        let spec = cfg.sampler.random_scene(cfg.workspace, cfg.resolution, &materials, &mut rng);
        let illum = rng.gen_range(cfg.illum.0..=cfg.illum.1);
        let scene = generate_scene(&spec, scene_seed)?;
        let id = format!("scene{i:04}");
        let sample = render_pair(&scene, &cfg.render, illum, scene_seed, id.clone())?;
        let record = SceneRecord {
            spec,
            seed: scene_seed,
            illum,
        };
        write_sample_dir(&out.join(&id), &record, &sample)?;
        manifest.scenes.push(ManifestEntry {
            id,
            split,
            opaque_only: sample.opaque_only,
        });
    }
    write_manifest(out, &manifest)?;
    Ok(manifest)
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("data: {0}")]
    Data(#[from] DatasetError),
    #[error("training: {0}")]
    Train(#[from] TrainError),
    #[error("evaluation: {0}")]
    Eval(#[from] EvalError),
    #[error("{0}")]
    Io(#[from] IoError),
    #[error("network: {0}")]
    Net(#[from] NetError),
    #[error("policy: {0}")]
    Policy(#[from] PolicyError),
    #[error("teacher: {0}")]
    Teacher(#[from] TeacherError),
    #[error("invalid configuration: {0}")]
    Config(String),
}

/// Writes a checkpoint after every validation and the final network to
/// `model_path`; the loss log goes next to it as CSV.
pub fn train_to_disk(
    data: &dyn PairedDataset,
    modality: Modality,
    cfg: &TrainConfig,
    teacher: &Teacher,
    model_path: &Path,
) -> Result<(NetworkParams, TrainReport), PipelineError> {
    let stem = model_path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "model".into());
    let dir = model_path.parent().map(Path::to_path_buf).unwrap_or_default();
    let ckpt_dir = dir.join(format!("{stem}_checkpoints"));
    fs::create_dir_all(&ckpt_dir).map_err(|e| IoError::io(&ckpt_dir, e))?;
    let mut last_step = 0;
    let (params, mut report) = train_with_observer(cfg, data, modality, teacher, &mut |ev| {
        last_step = ev.optimizer_step;
        let p = ckpt_dir.join(format!("step{:06}.ckpt", ev.step));
        ev.params
            .save(
                &p,
                &CheckpointInfo {
                    optimizer_step: ev.optimizer_step,
                    modality: Some(modality),
                },
            )
            .map_err(TrainError::from)
    })?;
    params.save(
        model_path,
        &CheckpointInfo {
            optimizer_step: last_step,
            modality: Some(modality),
        },
    )?;
    report.final_checkpoint = Some(model_path.to_path_buf());
    let csv = dir.join(format!("{stem}_loss.csv"));
    fs::write(&csv, report.to_csv()).map_err(|e| IoError::io(&csv, e))?;
    Ok((params, report))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub data: GenDataConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub isolated_trials: usize,
    pub objects_per_material: usize,
    pub clutter_trials: usize,
    pub clutter_objects: usize,
    pub crop: CropSamplerConfig,
    /// Which clutter variants to run: `[false, true]` is crop off then on.
    pub crop_modes: Vec<bool>,
    /// Views for which per-policy heatmaps are exported.
    pub heatmap_views: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 7,
            data: GenDataConfig::default(),
            train: TrainConfig::desk(),
            eval: EvalConfig::default(),
            isolated_trials: 5,
            objects_per_material: 15,
            clutter_trials: 20,
            clutter_objects: 5,
            crop: CropSamplerConfig::default(),
            crop_modes: vec![false, true],
            heatmap_views: 3,
        }
    }
}

impl PipelineConfig {
    /// Workspaces with the 0.65 m × 0.38 m aspect of a physical robot cell,
    /// at the same resolution and pixel counts divisible by the output stride.
    pub fn robot_cell_aspect(mut self) -> Self {
        self.data.workspace = [0.28, 0.16];
        self.eval.isolated_workspace = [0.28, 0.16];
        self.eval.clutter_workspace = [0.56, 0.32];
        self
    }
}

/// The teacher behind both the distillation targets and the depth-only
/// policy.
pub fn policy_teacher() -> Result<Teacher, TeacherError> {
    Teacher::new(TeacherConfig::planning(OUTPUT_STRIDE))
}

pub fn build_policy(kind: PolicyKind, teacher: &Teacher, rgb: Option<&NetworkParams>, rgbd: Option<&NetworkParams>) -> Result<Policy, PipelineError> {
    let need = |net: Option<&NetworkParams>, what: &str| {
        net.cloned().ok_or_else(|| PipelineError::Config(format!("policy {} needs the {what} student", kind.name())))
    };
    Ok(match kind {
        PolicyKind::DepthOnly => Policy::depth_only(teacher.clone()),
        PolicyKind::RgbStudent => Policy::rgb_student(need(rgb, "RGB")?)?,
        PolicyKind::RgbdStudent => Policy::rgbd_student(need(rgbd, "RGB-D")?)?,
        PolicyKind::LateFusion => Policy::late_fusion(teacher.clone(), need(rgb, "RGB")?)?,
    })
}

/// Runs the isolated protocol and the clutter protocol in each crop mode for
/// every policy.
pub fn evaluate(policies: &[Policy], cfg: &PipelineConfig) -> Result<EvalReport, PipelineError> {
    let objects = isolated_object_set(&cfg.eval.sampler, cfg.objects_per_material, derive_seed(cfg.seed, &[0x150]));
    let mut report = EvalReport::default();
    for policy in policies {
        let stats = run_isolated(policy, &objects, cfg.isolated_trials, derive_seed(cfg.seed, &[0x151]), &cfg.eval)?;
        report.isolated.push((policy.kind(), stats));
    }
    for policy in policies {
        for &crop in &cfg.crop_modes {
            let mut trials = Vec::with_capacity(cfg.clutter_trials);
            for t in 0..cfg.clutter_trials {
                let s = derive_seed(cfg.seed, &[0xc1, t as u64]);
                let spec = clutter_scene(&cfg.eval, cfg.clutter_objects, s);
                let crop_cfg = crop.then_some(&cfg.crop);
                trials.push(run_clutter(policy, &spec, crop_cfg, s, &cfg.eval)?);
            }
            report.clutter.push(ClutterReport {
                policy: policy.kind(),
                crop,
                trials,
            });
        }
    }
    Ok(report)
}

pub fn write_eval_outputs(report: &EvalReport, out: &Path) -> Result<(), PipelineError> {
    fs::create_dir_all(out).map_err(|e| IoError::io(out, e))?;
    let json = serde_json::to_string_pretty(report).map_err(|e| IoError::format(out, e.to_string()))?;
    let write = |name: &str, text: String| -> Result<(), PipelineError> {
        let p = out.join(name);
        fs::write(&p, text).map_err(|e| IoError::io(&p, e).into())
    };
    write("results.json", json + "\n")?;
    write("summary_isolated.csv", report.isolated_csv())?;
    write("summary_clutter.csv", report.clutter_csv())?;
    Ok(())
}

/// Heatmaps of the horizontal-fingertip slice and the max over θ for each
/// policy on fixed mixed-material views.
pub fn export_heatmaps(policies: &[Policy], cfg: &PipelineConfig, out: &Path) -> Result<Vec<PathBuf>, PipelineError> {
    fs::create_dir_all(out).map_err(|e| IoError::io(out, e))?;
    let mut written = Vec::new();
    for v in 0..cfg.heatmap_views {
        let s = derive_seed(cfg.seed, &[0x4ea7, v as u64]);
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let spec = cfg
            .eval
            .sampler
            .random_scene(cfg.eval.isolated_workspace, cfg.eval.resolution, &MaterialClass::ALL, &mut rng);
        let scene = generate_scene(&spec, s).map_err(EvalError::from)?;
        let sample = render_pair(&scene, &cfg.eval.render, 1.0, s, format!("view{v}")).map_err(EvalError::from)?;
        let rgb = out.join(format!("view{v}_rgb.ppm"));
        crate::netpbm::write_ppm(&rgb, &sample.rgb)?;
        written.push(rgb);
        for policy in policies {
            let vol = score_scene(policy, &sample, cfg.eval.render.camera_height)?;
            for (tag, sel) in [("theta0", ThetaSelect::Bin(0)), ("max", ThetaSelect::Max)] {
                let p = out.join(format!("view{v}_{}_{tag}.pgm", policy.kind().name()));
                export_heatmap(&vol, sel, &p)?;
                written.push(p);
            }
        }
    }
    Ok(written)
}

#[derive(Clone, Debug)]
pub struct PipelineOutcome {
    pub report: EvalReport,
    pub rgb_training: TrainReport,
    pub rgbd_training: TrainReport,
}

/// gen-data, train RGB-ST and RGBD-ST, evaluate all four policies, write
/// tables and heatmaps under `out`.
pub fn run_pipeline(cfg: &PipelineConfig, out: &Path, force: bool) -> Result<PipelineOutcome, PipelineError> {
    let data_dir = out.join("data");
    gen_data(&cfg.data, &data_dir, cfg.seed, force)?;
    let data = DiskDataset::open(&data_dir)?;
    let teacher = policy_teacher()?;
    let models = out.join("models");
    let train_cfg = TrainConfig {
        seed: derive_seed(cfg.seed, &[0x7a]),
        ..cfg.train.clone()
    };
    let (rgb, rgb_training) = train_to_disk(&data, Modality::Rgb, &train_cfg, &teacher, &models.join("rgb.ckpt"))?;
    let (rgbd, rgbd_training) = train_to_disk(&data, Modality::Rgbd, &train_cfg, &teacher, &models.join("rgbd.ckpt"))?;
    let policies = PolicyKind::ALL
        .iter()
        .map(|&k| build_policy(k, &teacher, Some(&rgb), Some(&rgbd)))
        .collect::<Result<Vec<_>, _>>()?;
    let report = evaluate(&policies, cfg)?;
    write_eval_outputs(&report, &out.join("eval"))?;
    export_heatmaps(&policies, cfg, &out.join("heatmaps"))?;
    Ok(PipelineOutcome {
        report,
        rgb_training,
        rgbd_training,
    })
}
