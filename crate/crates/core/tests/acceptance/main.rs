//! Acceptance run: one PASS/FAIL line per criterion. Exits nonzero if any
//! criterion fails.

mod fd;
mod oracles;

use std::cell::Cell;
use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use graspxfer::dataset::{DiskDataset, PairedDataset, Split};
use graspxfer::error::DatasetError;
use graspxfer::error::PolicyError;
use graspxfer::eval::{clutter_scene, isolated_object_set, run_clutter, run_isolated, EvalConfig, SuccessStats, TerminationReason};
use graspxfer::execute::oracle_calls;
use graspxfer::fusion::{GraspPolicy, Policy, PolicyKind};
use graspxfer::net::{Modality, NetworkParams, OUTPUT_STRIDE};
use graspxfer::pipeline::{evaluate, gen_data, policy_teacher, run_pipeline, GenDataConfig, PipelineConfig};
use graspxfer::render::PairedSample;
use graspxfer::scene::MaterialClass;
use graspxfer::train::{compute_targets, train, TrainConfig, TrainReport};
use graspxfer::volume::{ScoreSource, ScoreVolume};
use graspxfer_tensor::Tensor;

const SEED: u64 = 7;
const TRIALS: usize = 5;
const OBJECTS_PER_MATERIAL: usize = 15;

const FD_SEEDS: u64 = 10;
const FD_REL: f64 = 1e-5;
const FD_BUDGET: Duration = Duration::from_secs(60);
const TEACHER_BUDGET: Duration = Duration::from_secs(5 * 60);
const TRANSFER_BUDGET: Duration = Duration::from_secs(30 * 60);

const DEPTH_OPAQUE_MIN: f64 = 0.90;
const DEPTH_TRANSPARENT_MAX: f64 = 0.40;
const DEPTH_SPECULAR_MAX: f64 = 0.55;
const TRANSFER_GAIN: f64 = 0.25;
const OPAQUE_DRIFT: f64 = 0.15;
const FUSION_SLACK: f64 = 0.05;
const CROP_THRESHOLD: f64 = 0.4;

const DESK_BCE_MAX: f64 = 0.15;
const DESK_BCE_FRACTION: f64 = 0.25;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

fn rate(s: &SuccessStats, m: MaterialClass) -> f64 {
    s.get(m).map_or(0.0, |x| x.mean)
}

fn rates(s: &SuccessStats) -> String {
    MaterialClass::ALL.iter().map(|&m| format!("{:.3}", rate(s, m))).collect::<Vec<_>>().join("/")
}

fn criterion_1() -> Verdict {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut gap: f64 = 0.0;
    let mut params = 0;
    for seed in 0..FD_SEEDS {
        let r = fd::check_seed(seed);
        worst = worst.max(r.worst_rel);
        gap = gap.max(r.forward_gap);
        params += r.parameters;
    }
    let t = start.elapsed();
    verdict(
        worst <= FD_REL && gap <= 1e-12 && t < FD_BUDGET,
        format!(
            "{params} parameter checks over {FD_SEEDS} seeds, worst rel {worst:.2e} (tol {FD_REL:e}), reference forward gap {gap:.1e}, {:.1}s",
            t.as_secs_f64()
        ),
    )
}

fn criterion_2() -> Verdict {
    let checks = oracles::all(0xacc);
    let pass = checks.iter().all(|&(_, n, d)| n >= 100 && d <= oracles::TOL);
    let detail = checks.iter().map(|(name, n, d)| format!("{name} {n}x {d:.0e}")).collect::<Vec<_>>().join(", ");
    verdict(pass, detail)
}

fn isolated(policy: &dyn GraspPolicy, cfg: &EvalConfig) -> SuccessStats {
    let objects = isolated_object_set(&cfg.sampler, OBJECTS_PER_MATERIAL, SEED);
    run_isolated(policy, &objects, TRIALS, SEED + 1, cfg).unwrap()
}

fn criterion_3(depth: &SuccessStats, t: Duration) -> Verdict {
    let pass = rate(depth, MaterialClass::Opaque) >= DEPTH_OPAQUE_MIN
        && rate(depth, MaterialClass::Transparent) <= DEPTH_TRANSPARENT_MAX
        && rate(depth, MaterialClass::Specular) <= DEPTH_SPECULAR_MAX
        && t < TEACHER_BUDGET;
    verdict(
        pass,
        format!("DepthOnly opaque/transparent/specular {} over {TRIALS} runs, {:.1}s", rates(depth), t.as_secs_f64()),
    )
}

/// Wraps the on-disk dataset and records what training reads.
struct Instrumented<'a> {
    inner: &'a DiskDataset,
    loads: Cell<usize>,
    non_opaque_loads: Cell<usize>,
}

impl PairedDataset for Instrumented<'_> {
    fn len(&self) -> usize {
        self.inner.len()
    }

    fn is_opaque_only(&self, index: usize) -> bool {
        self.inner.is_opaque_only(index)
    }

    fn split(&self, index: usize) -> Split {
        self.inner.split(index)
    }

    fn load(&self, index: usize) -> Result<PairedSample, DatasetError> {
        let s = self.inner.load(index)?;
        self.loads.set(self.loads.get() + 1);
        if !s.opaque_only {
            self.non_opaque_loads.set(self.non_opaque_loads.get() + 1);
        }
        Ok(s)
    }
}

struct Transfer {
    net: NetworkParams,
    report: TrainReport,
    loads: usize,
    non_opaque_loads: usize,
    oracle_delta: u64,
    non_opaque_in_data: usize,
    /// Mean binary entropy of the validation targets: the lowest BCE any
    /// predictor can reach on them.
    val_floor: f64,
    train_time: Duration,
}

fn train_transfer(dir: &Path) -> Transfer {
    let start = Instant::now();
    gen_data(&GenDataConfig::default(), dir, SEED, false).unwrap();
    let data = DiskDataset::open(dir).unwrap();
    let inst = Instrumented {
        inner: &data,
        loads: Cell::new(0),
        non_opaque_loads: Cell::new(0),
    };
    let teacher = policy_teacher().unwrap();
    let before = oracle_calls();
    let cfg = TrainConfig { seed: SEED, ..TrainConfig::desk() };
    let (net, report) = train(&cfg, &inst, Modality::Rgb, &teacher).unwrap();
    let oracle_delta = oracle_calls() - before;
    let train_time = start.elapsed();

    let mut entropy = 0.0;
    let mut cells = 0usize;
    for i in (0..data.len()).filter(|&i| data.split(i) == Split::Validation && data.is_opaque_only(i)) {
        let s = data.load(i).unwrap();
        let t = compute_targets(&teacher.score_dense(&s.depth).unwrap(), OUTPUT_STRIDE).unwrap();
        for &p in t.scores().data() {
            if p > 0.0 && p < 1.0 {
                entropy -= p * p.ln() + (1.0 - p) * (1.0 - p).ln();
            }
            cells += 1;
        }
    }
    Transfer {
        net,
        report,
        loads: inst.loads.get(),
        non_opaque_loads: inst.non_opaque_loads.get(),
        oracle_delta,
        non_opaque_in_data: (0..data.len()).filter(|&i| !data.is_opaque_only(i)).count(),
        val_floor: entropy / cells.max(1) as f64,
        train_time,
    }
}

fn criterion_4(tr: &Transfer, depth: &SuccessStats, rgb: &SuccessStats, t: Duration) -> Verdict {
    let gain_t = rate(rgb, MaterialClass::Transparent) - rate(depth, MaterialClass::Transparent);
    let gain_s = rate(rgb, MaterialClass::Specular) - rate(depth, MaterialClass::Specular);
    let drift = (rate(rgb, MaterialClass::Opaque) - rate(depth, MaterialClass::Opaque)).abs();
    let clean = tr.non_opaque_loads == 0 && tr.oracle_delta == 0 && tr.loads > 0 && tr.non_opaque_in_data > 0;
    let pass = clean && gain_t >= TRANSFER_GAIN && gain_s >= TRANSFER_GAIN && drift <= OPAQUE_DRIFT && t < TRANSFER_BUDGET;
    verdict(
        pass,
        format!(
            "RGB-ST {} vs DepthOnly {}; gains {gain_t:+.3}/{gain_s:+.3}, opaque drift {drift:.3}; {} loads, {} non-opaque of {} in data, {} oracle calls; {:.0}s",
            rates(rgb),
            rates(depth),
            tr.loads,
            tr.non_opaque_loads,
            tr.non_opaque_in_data,
            tr.oracle_delta,
            t.as_secs_f64()
        ),
    )
}

fn criterion_5(depth: &SuccessStats, rgb: &SuccessStats, fused: &SuccessStats) -> Verdict {
    let (d, r, f) = (depth.material_average(), rgb.material_average(), fused.material_average());
    verdict(
        f >= d.max(r) - FUSION_SLACK && f > d,
        format!("material means RGBD-M {f:.3}, DepthOnly {d:.3}, RGB-ST {r:.3}"),
    )
}

/// Always the same grasp, at the grid corner.
struct Broken;

impl GraspPolicy for Broken {
    fn score(&self, sample: &PairedSample, _: f64) -> Result<ScoreVolume, PolicyError> {
        let (h, w) = sample.dims();
        let t = Tensor::from_fn(&[16, h / 4, w / 4], |i| if i == 0 { 0.9 } else { 0.1 })?;
        Ok(ScoreVolume::new(t, 4, ScoreSource::Rgb)?)
    }
}

fn criterion_6(rgb: &NetworkParams) -> Verdict {
    let cfg = PipelineConfig {
        seed: SEED,
        isolated_trials: 1,
        objects_per_material: 1,
        crop_modes: vec![false, true],
        ..PipelineConfig::default()
    };
    let mut broken_ok = 0;
    for s in 0..10 {
        let spec = clutter_scene(&cfg.eval, cfg.clutter_objects, 300 + s);
        let r = run_clutter(&Broken, &spec, None, 300 + s, &cfg.eval).unwrap();
        if r.termination == TerminationReason::ThreeConsecutiveFailures && r.attempts.len() == 3 {
            broken_ok += 1;
        }
    }
    let policy = Policy::rgb_student(rgb.clone()).unwrap();
    let report = evaluate(&[policy], &cfg).unwrap();
    let variants: Vec<bool> = report.clutter.iter().map(|r| r.crop).collect();
    let trials: Vec<_> = report.clutter.iter().flat_map(|r| &r.trials).collect();
    let consistent = trials.iter().all(|t| match t.termination {
        TerminationReason::AllGrasped => t.successes() == t.object_count,
        TerminationReason::ThreeConsecutiveFailures => t.attempts.len() >= 3 && t.attempts.iter().rev().take(3).all(|a| !a.success),
        TerminationReason::ObjectsOutOfWorkspace => t.successes() < t.object_count,
    });
    let csv = report.clutter_csv();
    let rows = csv.lines().filter(|l| l.starts_with("rgb-st,")).count();
    let counts: Vec<String> = report
        .clutter
        .iter()
        .map(|r| {
            let c = |k| r.trials.iter().filter(|t| t.termination == k).count();
            format!(
                "crop {}: {}/{}/{}",
                if r.crop { "on" } else { "off" },
                c(TerminationReason::AllGrasped),
                c(TerminationReason::ThreeConsecutiveFailures),
                c(TerminationReason::ObjectsOutOfWorkspace)
            )
        })
        .collect();
    let pass = broken_ok == 10
        && variants == [false, true]
        && rows == 2
        && report.clutter.iter().all(|r| r.trials.len() == cfg.clutter_trials)
        && consistent;
    verdict(
        pass,
        format!(
            "broken policy 3-failure stops {broken_ok}/10; {} trials consistent={consistent}; terminations all/three/out {}",
            trials.len(),
            counts.join(", ")
        ),
    )
}

fn criterion_7() -> Verdict {
    let c = oracles::crop_contract();
    verdict(
        c.below_threshold == 0 && c.subthreshold_wrong == 0 && c.grasps > 0 && c.declined > 0,
        format!(
            "1000 mixed volumes: {} grasps, {} declined, {} below {CROP_THRESHOLD}; subthreshold volumes not declined after 20: {}",
            c.grasps, c.declined, c.below_threshold, c.subthreshold_wrong
        ),
    )
}

fn outputs(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    for sub in ["eval", "heatmaps"] {
        for e in fs::read_dir(root.join(sub)).unwrap() {
            let p = e.unwrap().path();
            let ext = p.extension().and_then(|s| s.to_str()).unwrap_or("");
            if ext == "csv" || ext == "pgm" {
                out.insert(format!("{sub}/{}", p.file_name().unwrap().to_string_lossy()), fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn criterion_8(dir: &Path) -> Verdict {
    let mut cfg = PipelineConfig {
        seed: 21,
        data: GenDataConfig {
            train_opaque: 6,
            train_transparent: 2,
            train_specular: 2,
            val_opaque: 2,
            ..GenDataConfig::default()
        },
        isolated_trials: 2,
        objects_per_material: 2,
        clutter_trials: 2,
        heatmap_views: 2,
        ..PipelineConfig::default()
    };
    cfg.train.max_steps = 6;
    cfg.train.batch_size = 2;
    cfg.train.validation_every = 3;
    let (a, b) = (dir.join("a"), dir.join("b"));
    run_pipeline(&cfg, &a, false).unwrap();
    run_pipeline(&cfg, &b, false).unwrap();
    let (oa, ob) = (outputs(&a), outputs(&b));
    let csv = oa.keys().filter(|k| k.ends_with(".csv")).count();
    let pgm = oa.keys().filter(|k| k.ends_with(".pgm")).count();
    let differing: Vec<&String> = oa.keys().filter(|k| oa.get(*k) != ob.get(*k)).collect();
    verdict(
        oa.keys().eq(ob.keys()) && differing.is_empty() && csv >= 2 && pgm > 0,
        format!("{csv} CSV and {pgm} PGM files compared, {} differ", differing.len()),
    )
}

fn desk_bce(tr: &Transfer) -> Verdict {
    let first = tr.report.val_loss.first().map_or(f64::NAN, |v| v.1);
    let last = tr.report.val_loss.last().map_or(f64::NAN, |v| v.1);
    verdict(
        last < DESK_BCE_MAX && last < DESK_BCE_FRACTION * first,
        format!(
            "final validation BCE {last:.4} (step 0: {first:.4}, need < {DESK_BCE_MAX} and < {:.4}); entropy floor of the targets {:.4}; {} steps in {:.0}s",
            DESK_BCE_FRACTION * first,
            tr.val_floor,
            tr.report.train_loss.len(),
            tr.train_time.as_secs_f64()
        ),
    )
}

fn main() {
    let tmp = tempfile::tempdir().unwrap();
    let mut all = true;
    let mut line = |name: &str, v: Verdict, gating: bool| {
        let tag = if v.pass { "PASS" } else { "FAIL" };
        let note = if gating { "" } else { " (informational)" };
        println!("{name}: {tag}{note} {}", v.detail);
        if gating {
            all &= v.pass;
        }
    };

    line("criterion 1 gradient check", criterion_1(), true);
    line("criterion 2 oracle equivalence", criterion_2(), true);

    let cfg = EvalConfig::default();
    let teacher = policy_teacher().unwrap();
    let start = Instant::now();
    let depth = isolated(&Policy::depth_only(teacher.clone()), &cfg);
    let depth_time = start.elapsed();
    line("criterion 3 teacher failure split", criterion_3(&depth, depth_time), true);

    let start = Instant::now();
    let tr = train_transfer(&tmp.path().join("data"));
    let rgb = isolated(&Policy::rgb_student(tr.net.clone()).unwrap(), &cfg);
    let transfer_time = start.elapsed();
    line("criterion 4 supervision transfer", criterion_4(&tr, &depth, &rgb, transfer_time), true);

    let fused = isolated(&Policy::late_fusion(teacher, tr.net.clone()).unwrap(), &cfg);
    line("criterion 5 late fusion", criterion_5(&depth, &rgb, &fused), true);
    assert_eq!(Policy::late_fusion(policy_teacher().unwrap(), tr.net.clone()).unwrap().kind(), PolicyKind::LateFusion);

    line("criterion 6 clutter protocol", criterion_6(&tr.net), true);
    line("criterion 7 crop sampler", criterion_7(), true);
    line("criterion 8 determinism", criterion_8(&tmp.path().join("runs")), true);
    line("desk-bce regression example", desk_bce(&tr), false);

    if !all {
        std::process::exit(1);
    }
}
