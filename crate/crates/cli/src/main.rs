use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use graspxfer::dataset::{read_sample_dir, DiskDataset};
use graspxfer::error::{NetError, PolicyError, TrainError};
use graspxfer::eval::{export_heatmap, ThetaSelect};
use graspxfer::execute::GraspPose;
use graspxfer::fusion::{score_scene, select_argmax, select_cropped, CropOutcome, PolicyKind};
use graspxfer::net::{Modality, NetworkParams};
use graspxfer::pipeline::{
    build_policy, evaluate, gen_data, policy_teacher, run_pipeline, train_to_disk, write_eval_outputs,
    PipelineConfig, PipelineError,
};

#[derive(Parser, Debug)]
#[command(name = "graspxfer", version, about = "Cross-modal supervision transfer for tabletop grasping")]
struct Cli {
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads. Results do not depend on this value.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Workspace preset applied before flag overrides.
    #[arg(long, global = true, value_enum)]
    preset: Option<Preset>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Preset {
    /// Square workspaces (the default).
    Desk,
    /// Workspaces with the aspect of the physical robot cell.
    Cell,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a paired RGB-D dataset.
    GenData(GenDataArgs),
    /// Distill the depth teacher into an RGB or RGB-D student.
    Train(TrainArgs),
    /// Run the isolated and clutter protocols and write result tables.
    Eval(EvalArgs),
    /// Pick a grasp for one captured view.
    Plan(PlanArgs),
    /// Export a score heatmap for one captured view.
    Heatmap(HeatmapArgs),
    /// gen-data, train both students, eval all policies, tables and heatmaps.
    Pipeline(PipelineArgs),
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    train_opaque: Option<usize>,
    #[arg(long)]
    train_transparent: Option<usize>,
    #[arg(long)]
    train_specular: Option<usize>,
    #[arg(long)]
    val_opaque: Option<usize>,
    /// Overwrite a non-empty output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Args, Debug, Default)]
struct TrainOverrides {
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModalityArg {
    Rgb,
    Rgbd,
}

impl From<ModalityArg> for Modality {
    fn from(m: ModalityArg) -> Self {
        match m {
            ModalityArg::Rgb => Modality::Rgb,
            ModalityArg::Rgbd => Modality::Rgbd,
        }
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Dataset directory written by gen-data.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "rgb")]
    modality: ModalityArg,
    /// Output checkpoint path.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    overrides: TrainOverrides,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum PolicyArg {
    Depth,
    RgbSt,
    RgbdSt,
    RgbdM,
    All,
}

impl PolicyArg {
    fn kinds(self) -> Vec<PolicyKind> {
        match self {
            PolicyArg::Depth => vec![PolicyKind::DepthOnly],
            PolicyArg::RgbSt => vec![PolicyKind::RgbStudent],
            PolicyArg::RgbdSt => vec![PolicyKind::RgbdStudent],
            PolicyArg::RgbdM => vec![PolicyKind::LateFusion],
            PolicyArg::All => PolicyKind::ALL.to_vec(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum CropArg {
    On,
    Off,
    Both,
}

#[derive(Args, Debug, Default)]
struct CropOverrides {
    #[arg(long)]
    crop_threshold: Option<f64>,
    /// Crop side, meters.
    #[arg(long)]
    crop_size: Option<f64>,
}

#[derive(Args, Debug)]
struct Models {
    #[arg(long)]
    rgb_model: Option<PathBuf>,
    #[arg(long)]
    rgbd_model: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long, value_enum, default_value = "all")]
    policy: PolicyArg,
    #[command(flatten)]
    models: Models,
    /// Clutter trials with crop sampling on, off, or both variants.
    #[arg(long, value_enum, default_value = "both")]
    crop_sampling: CropArg,
    #[command(flatten)]
    crop: CropOverrides,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    objects_per_material: Option<usize>,
    #[arg(long)]
    clutter_trials: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct PlanArgs {
    #[arg(long, value_enum)]
    policy: PolicyArg,
    #[command(flatten)]
    models: Models,
    /// Directory holding depth.pgm and rgb.ppm.
    #[arg(long)]
    sample: PathBuf,
    #[arg(long, value_enum, default_value = "off")]
    crop_sampling: CropArg,
    #[command(flatten)]
    crop: CropOverrides,
}

#[derive(Args, Debug)]
struct HeatmapArgs {
    #[arg(long, value_enum)]
    policy: PolicyArg,
    #[command(flatten)]
    models: Models,
    #[arg(long)]
    sample: PathBuf,
    /// θ bin in 0..16, or "max".
    #[arg(long, default_value = "0")]
    theta: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct PipelineArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
    #[command(flatten)]
    overrides: TrainOverrides,
    #[arg(long, value_enum, default_value = "both")]
    crop_sampling: CropArg,
    #[command(flatten)]
    crop: CropOverrides,
}

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn input(message: impl Into<String>) -> Self {
        Failure {
            code: 2,
            message: message.into(),
        }
    }
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        let code = match &e {
            PipelineError::Train(TrainError::Diverged { .. }) => 3,
            PipelineError::Train(TrainError::Config(_)) => 2,
            PipelineError::Train(TrainError::Dataset(_)) | PipelineError::Data(_) => 2,
            PipelineError::Io(_) | PipelineError::Config(_) => 2,
            PipelineError::Net(NetError::Checkpoint(_) | NetError::Invalid(_)) => 2,
            PipelineError::Policy(PolicyError::Contract(_)) => 2,
            _ => 1,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

type Outcome = Result<(), Failure>;

fn load_config(cli: &Cli) -> Result<PipelineConfig, Failure> {
    let mut cfg = match &cli.config {
        None => PipelineConfig::default(),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Failure::input(format!("{}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| Failure::input(format!("{}: {e}", p.display())))?
        }
    };
    if let Some(Preset::Cell) = cli.preset {
        cfg = cfg.robot_cell_aspect();
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if cli.threads == Some(0) {
        return Err(Failure::input("--threads must be at least 1"));
    }
    Ok(cfg)
}

fn apply_train(cfg: &mut PipelineConfig, o: &TrainOverrides) {
    if let Some(v) = o.steps {
        cfg.train.max_steps = v;
    }
    if let Some(v) = o.lr {
        cfg.train.learning_rate = v;
    }
    if let Some(v) = o.batch_size {
        cfg.train.batch_size = v;
    }
}

fn apply_crop(cfg: &mut PipelineConfig, mode: Option<CropArg>, o: &CropOverrides) {
    if let Some(v) = o.crop_threshold {
        cfg.crop.score_threshold = v;
    }
    if let Some(v) = o.crop_size {
        cfg.crop.crop_size = v;
    }
    if let Some(m) = mode {
        cfg.crop_modes = match m {
            CropArg::On => vec![true],
            CropArg::Off => vec![false],
            CropArg::Both => vec![false, true],
        };
    }
}

fn load_model(path: &Option<PathBuf>, expect: Modality) -> Result<Option<NetworkParams>, Failure> {
    let Some(p) = path else { return Ok(None) };
    if !p.exists() {
        return Err(Failure::input(format!("model not found: {}", p.display())));
    }
    let (net, _) = NetworkParams::load(p).map_err(|e| Failure::input(format!("{}: {e}", p.display())))?;
    if net.input_channels() != expect.channels() {
        return Err(Failure::input(format!(
            "{}: expected a {}-channel model, found {}",
            p.display(),
            expect.channels(),
            net.input_channels()
        )));
    }
    Ok(Some(net))
}

fn policies(kind: PolicyArg, models: &Models) -> Result<Vec<graspxfer::fusion::Policy>, Failure> {
    let teacher = policy_teacher().map_err(|e| Failure {
        code: 1,
        message: e.to_string(),
    })?;
    let rgb = load_model(&models.rgb_model, Modality::Rgb)?;
    let rgbd = load_model(&models.rgbd_model, Modality::Rgbd)?;
    kind.kinds()
        .into_iter()
        .map(|k| build_policy(k, &teacher, rgb.as_ref(), rgbd.as_ref()).map_err(Failure::from))
        .collect()
}

fn require_dir(p: &Path, what: &str) -> Outcome {
    if !p.is_dir() {
        return Err(Failure::input(format!("{what} not found: {}", p.display())));
    }
    Ok(())
}

fn single_policy(kind: PolicyArg, models: &Models) -> Result<graspxfer::fusion::Policy, Failure> {
    if kind == PolicyArg::All {
        return Err(Failure::input("choose one policy"));
    }
    Ok(policies(kind, models)?.remove(0))
}

fn run(cli: Cli) -> Outcome {
    let mut cfg = load_config(&cli)?;
    match cli.command {
        Command::GenData(a) => {
            let d = &mut cfg.data;
            d.train_opaque = a.train_opaque.unwrap_or(d.train_opaque);
            d.train_transparent = a.train_transparent.unwrap_or(d.train_transparent);
            d.train_specular = a.train_specular.unwrap_or(d.train_specular);
            d.val_opaque = a.val_opaque.unwrap_or(d.val_opaque);
            let m = gen_data(&cfg.data, &a.out, cfg.seed, a.force).map_err(PipelineError::from)?;
            println!("wrote {} scenes to {}", m.scenes.len(), a.out.display());
        }
        Command::Train(a) => {
            require_dir(&a.data, "dataset directory")?;
            apply_train(&mut cfg, &a.overrides);
            let data = DiskDataset::open(&a.data).map_err(PipelineError::from)?;
            let teacher = policy_teacher().map_err(PipelineError::from)?;
            if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir).map_err(|e| Failure::input(format!("{}: {e}", dir.display())))?;
            }
            let train_cfg = graspxfer::train::TrainConfig {
                seed: cfg.seed,
                ..cfg.train.clone()
            };
            let (_, report) = train_to_disk(&data, a.modality.into(), &train_cfg, &teacher, &a.out)?;
            let last = report.val_loss.last().map(|v| v.1).unwrap_or(f64::NAN);
            println!(
                "trained {} steps, final validation loss {last:.4}, wrote {}",
                report.train_loss.len(),
                a.out.display()
            );
        }
        Command::Eval(a) => {
            if let Some(v) = a.trials {
                cfg.isolated_trials = v;
            }
            if let Some(v) = a.objects_per_material {
                cfg.objects_per_material = v;
            }
            if let Some(v) = a.clutter_trials {
                cfg.clutter_trials = v;
            }
            apply_crop(&mut cfg, Some(a.crop_sampling), &a.crop);
            let ps = policies(a.policy, &a.models)?;
            let report = evaluate(&ps, &cfg)?;
            write_eval_outputs(&report, &a.out)?;
            print!("{}", report.isolated_csv());
            print!("{}", report.clutter_csv());
            if report.only_no_valid_crop() {
                return Err(Failure {
                    code: 4,
                    message: "every clutter attempt found no crop above threshold".into(),
                });
            }
        }
        Command::Plan(a) => {
            require_dir(&a.sample, "sample directory")?;
            apply_crop(&mut cfg, None, &a.crop);
            let policy = single_policy(a.policy, &a.models)?;
            let sample = read_sample_dir(&a.sample).map_err(PipelineError::from)?;
            let vol = score_scene(&policy, &sample, cfg.eval.render.camera_height).map_err(PipelineError::from)?;
            let res = cfg.eval.resolution;
            let q = if a.crop_sampling == CropArg::On {
                match select_cropped(&vol, &cfg.crop, res, cfg.seed).map_err(PipelineError::from)? {
                    CropOutcome::Grasp { candidate, .. } => Some(candidate),
                    CropOutcome::NoValidCrop { .. } => None,
                }
            } else {
                Some(select_argmax(&vol))
            };
            let json = match q {
                Some(q) => serde_json::json!({
                    "candidate": q,
                    "pose": GraspPose::from_candidate(&q, vol.stride(), res),
                    "score": vol.score_of(&q),
                }),
                None => serde_json::json!({ "no_valid_crop": true }),
            };
            println!("{json}");
            if q.is_none() {
                return Err(Failure {
                    code: 4,
                    message: "no crop above threshold".into(),
                });
            }
        }
        Command::Heatmap(a) => {
            require_dir(&a.sample, "sample directory")?;
            let theta = match a.theta.as_str() {
                "max" => ThetaSelect::Max,
                t => ThetaSelect::Bin(
                    t.parse()
                        .map_err(|_| Failure::input(format!("--theta must be a bin index or \"max\", got {t}")))?,
                ),
            };
            let policy = single_policy(a.policy, &a.models)?;
            let sample = read_sample_dir(&a.sample).map_err(PipelineError::from)?;
            let vol = score_scene(&policy, &sample, cfg.eval.render.camera_height).map_err(PipelineError::from)?;
            export_heatmap(&vol, theta, &a.out).map_err(|e| Failure::input(e.to_string()))?;
            println!("wrote {}", a.out.display());
        }
        Command::Pipeline(a) => {
            apply_train(&mut cfg, &a.overrides);
            apply_crop(&mut cfg, Some(a.crop_sampling), &a.crop);
            let outcome = run_pipeline(&cfg, &a.out, a.force)?;
            print!("{}", outcome.report.isolated_csv());
            print!("{}", outcome.report.clutter_csv());
            if outcome.report.only_no_valid_crop() {
                return Err(Failure {
                    code: 4,
                    message: "every clutter attempt found no crop above threshold".into(),
                });
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("graspxfer: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
