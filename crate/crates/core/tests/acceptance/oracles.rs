//! Brute-force loop oracles for the numeric kernels and selection rules.

use graspxfer::fusion::{fuse_late, select_argmax, select_cropped, CropOutcome, CropSamplerConfig};
use graspxfer::train::{compute_targets, distill_loss, LossKind};
use graspxfer::volume::{max_over_z, GraspCandidate, ScoreSource, ScoreVolume, ScoreVolume4D, THETA_BINS};
use graspxfer_tensor::kernels::conv2d_forward;
use graspxfer_tensor::{maxpool2d, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const INSTANCES: usize = 120;
pub const TOL: f64 = 1e-12;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], levels: Option<u32>) -> Tensor {
    Tensor::from_fn(shape, |_| match levels {
        // Coarse values produce ties.
        Some(n) => rng.gen_range(0..n) as f64 / n as f64,
        None => rng.gen_range(-1.0..1.0),
    })
    .unwrap()
}

fn unit_volume(rng: &mut ChaCha8Rng, h: usize, w: usize, stride: usize, levels: Option<u32>) -> ScoreVolume {
    let t = Tensor::from_fn(&[THETA_BINS, h, w], |_| match levels {
        Some(n) => rng.gen_range(0..=n) as f64 / n as f64,
        None => rng.gen::<f64>(),
    })
    .unwrap();
    ScoreVolume::new(t, stride, ScoreSource::Rgb).unwrap()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Result per primitive: instances checked and worst absolute deviation.
pub type Check = (&'static str, usize, f64);

pub fn conv2d(seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..INSTANCES {
        let (ci, co) = (rng.gen_range(1..=4), rng.gen_range(1..=4));
        let k: usize = [1, 3, 5][rng.gen_range(0..3)];
        let pad = rng.gen_range(0..=k / 2);
        let stride = rng.gen_range(1..=3);
        let h = rng.gen_range(k.saturating_sub(2 * pad).max(1)..=9);
        let w = rng.gen_range(k.saturating_sub(2 * pad).max(1)..=9);
        let x = rand_tensor(&mut rng, &[ci, h, w], None);
        let kern = rand_tensor(&mut rng, &[co, ci, k, k], None);
        let bias = rng.gen_bool(0.5).then(|| rand_tensor(&mut rng, &[co], None));
        let got = conv2d_forward(&x, &kern, bias.as_ref(), stride, pad).unwrap();
        let (oh, ow) = ((h + 2 * pad - k) / stride + 1, (w + 2 * pad - k) / stride + 1);
        assert_eq!(got.shape(), &[co, oh, ow]);
        let mut want = vec![0.0; co * oh * ow];
        for o in 0..co {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut s = bias.as_ref().map_or(0.0, |b| b.data()[o]);
                    for c in 0..ci {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                    s += kern.get(&[o, c, ky, kx]) * x.get(&[c, iy as usize, ix as usize]);
                                }
                            }
                        }
                    }
                    want[(o * oh + oy) * ow + ox] = s;
                }
            }
        }
        worst = worst.max(max_abs_diff(got.data(), &want));
    }
    ("conv2d", INSTANCES, worst)
}

pub fn maxpool(seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for i in 0..INSTANCES {
        let win = rng.gen_range(1..=3);
        let (c, h, w) = (rng.gen_range(1..=3), win * rng.gen_range(1..=4), win * rng.gen_range(1..=4));
        let x = rand_tensor(&mut rng, &[c, h, w], (i % 2 == 0).then_some(4));
        let got = maxpool2d(&x, win).unwrap();
        let mut want = Vec::new();
        for ch in 0..c {
            for y in 0..h / win {
                for xx in 0..w / win {
                    let mut m = f64::NEG_INFINITY;
                    for dy in 0..win {
                        for dx in 0..win {
                            m = m.max(x.get(&[ch, y * win + dy, xx * win + dx]));
                        }
                    }
                    want.push(m);
                }
            }
        }
        worst = worst.max(max_abs_diff(got.data(), &want));
    }
    ("maxpool2d", INSTANCES, worst)
}

fn random_4d(rng: &mut ChaCha8Rng, h: usize, w: usize) -> ScoreVolume4D {
    let z = rng.gen_range(1..=5);
    let t = Tensor::from_fn(&[z, THETA_BINS, h, w], |_| rng.gen::<f64>()).unwrap();
    ScoreVolume4D::new(t, (0..z).map(|k| 0.01 * (k + 1) as f64).collect()).unwrap()
}

fn zmax(v: &ScoreVolume4D, t: usize, y: usize, x: usize) -> f64 {
    (0..v.z_heights().len()).map(|z| v.at(z, t, y, x)).fold(f64::NEG_INFINITY, f64::max)
}

pub fn max_over_z_check(seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..INSTANCES {
        let (h, w) = (rng.gen_range(1..=6), rng.gen_range(1..=6));
        let v = random_4d(&mut rng, h, w);
        let got = max_over_z(&v);
        let mut want = Vec::new();
        for t in 0..THETA_BINS {
            for y in 0..h {
                for x in 0..w {
                    want.push(zmax(&v, t, y, x));
                }
            }
        }
        worst = worst.max(max_abs_diff(got.scores().data(), &want));
    }
    ("max_over_z", INSTANCES, worst)
}

pub fn compute_targets_check(seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..INSTANCES {
        let s = [1, 2, 4][rng.gen_range(0..3)];
        let (gh, gw) = (rng.gen_range(1..=3), rng.gen_range(1..=3));
        let v = random_4d(&mut rng, gh * s, gw * s);
        let got = compute_targets(&v, s).unwrap();
        assert_eq!(got.stride(), s);
        let mut want = Vec::new();
        for t in 0..THETA_BINS {
            for y in 0..gh {
                for x in 0..gw {
                    let mut m = f64::NEG_INFINITY;
                    for dy in 0..s {
                        for dx in 0..s {
                            m = m.max(zmax(&v, t, y * s + dy, x * s + dx));
                        }
                    }
                    want.push(m);
                }
            }
        }
        worst = worst.max(max_abs_diff(got.scores().data(), &want));
    }
    ("compute_targets", INSTANCES, worst)
}

pub fn distill_loss_check(seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for i in 0..INSTANCES {
        let (h, w) = (rng.gen_range(1..=4), rng.gen_range(1..=4));
        let p = unit_volume(&mut rng, h, w, 4, (i % 3 == 0).then_some(8));
        let t = unit_volume(&mut rng, h, w, 4, None);
        let n = (THETA_BINS * h * w) as f64;
        let mut bce = 0.0;
        let mut mse = 0.0;
        for (&a, &b) in p.scores().data().iter().zip(t.scores().data()) {
            let c = a.max(1e-12).min(1.0 - 1e-12);
            bce -= b * c.ln() + (1.0 - b) * (1.0 - c).ln();
            mse += (a - b).powi(2);
        }
        worst = worst.max((distill_loss(&p, &t, LossKind::Bce).unwrap() - bce / n).abs());
        worst = worst.max((distill_loss(&p, &t, LossKind::Mse).unwrap() - mse / n).abs());
    }
    ("distill_loss", INSTANCES, worst)
}

pub fn fuse_late_check(seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..INSTANCES {
        let (h, w) = (rng.gen_range(1..=5), rng.gen_range(1..=5));
        let a = unit_volume(&mut rng, h, w, 4, None);
        let b = unit_volume(&mut rng, h, w, 4, None);
        let got = fuse_late(&a, &b).unwrap();
        assert_eq!(got.source(), ScoreSource::Fused);
        let want: Vec<f64> = a.scores().data().iter().zip(b.scores().data()).map(|(x, y)| (x + y) / 2.0).collect();
        worst = worst.max(max_abs_diff(got.scores().data(), &want));
    }
    ("fuse_late", INSTANCES, worst)
}

/// First strict maximum scanning θ, then y, then x inside the window.
fn brute_argmax(v: &ScoreVolume, ys: std::ops::Range<usize>, xs: std::ops::Range<usize>) -> (GraspCandidate, f64) {
    let mut best = None;
    for t in 0..THETA_BINS {
        for y in ys.clone() {
            for x in xs.clone() {
                let s = v.at(t, y, x);
                if best.map_or(true, |(_, b)| s > b) {
                    best = Some((GraspCandidate::planar(x, y, t), s));
                }
            }
        }
    }
    best.unwrap()
}

/// Counts mismatches, reported as deviation 1 each.
pub fn select_argmax_check(seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bad = 0;
    for i in 0..INSTANCES {
        let (h, w) = (rng.gen_range(1..=6), rng.gen_range(1..=6));
        let v = unit_volume(&mut rng, h, w, 4, (i % 2 == 0).then_some(3));
        if select_argmax(&v) != brute_argmax(&v, 0..h, 0..w).0 {
            bad += 1;
        }
    }
    ("select_argmax", INSTANCES, bad as f64)
}

/// Replays the sampler's documented draw order: per attempt a row origin,
/// then a column origin, uniform over crops inside the grid.
fn brute_cropped(v: &ScoreVolume, cfg: &CropSamplerConfig, cells: usize, seed: u64) -> CropOutcome {
    let (h, w) = v.grid();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for attempt in 1..=cfg.max_resamples {
        let y0 = rng.gen_range(0..=h - cells);
        let x0 = rng.gen_range(0..=w - cells);
        let (q, s) = brute_argmax(v, y0..y0 + cells, x0..x0 + cells);
        if s >= cfg.score_threshold {
            return CropOutcome::Grasp {
                candidate: q,
                crop: graspxfer::fusion::CropWindow { y: y0, x: x0, size: cells },
                attempts: attempt,
            };
        }
    }
    CropOutcome::NoValidCrop {
        attempts: cfg.max_resamples,
    }
}

pub fn select_cropped_check(seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bad = 0;
    for _ in 0..INSTANCES {
        let (h, w) = (rng.gen_range(2..=8), rng.gen_range(2..=8));
        let cells = rng.gen_range(1..=h.min(w));
        let cfg = CropSamplerConfig {
            crop_size: cells as f64 * 0.02,
            score_threshold: rng.gen_range(0.5..1.0),
            max_resamples: rng.gen_range(1..=20),
        };
        let v = unit_volume(&mut rng, h, w, 4, Some(10));
        assert_eq!(cfg.cells(0.005, 4), cells);
        let s = rng.gen();
        if select_cropped(&v, &cfg, 0.005, s).unwrap() != brute_cropped(&v, &cfg, cells, s) {
            bad += 1;
        }
    }
    ("select_cropped", INSTANCES, bad as f64)
}

pub fn all(seed: u64) -> Vec<Check> {
    vec![
        conv2d(seed),
        maxpool(seed + 1),
        max_over_z_check(seed + 2),
        compute_targets_check(seed + 3),
        distill_loss_check(seed + 4),
        fuse_late_check(seed + 5),
        select_argmax_check(seed + 6),
        select_cropped_check(seed + 7),
    ]
}

pub struct CropContract {
    pub grasps: usize,
    pub declined: usize,
    pub below_threshold: usize,
    pub subthreshold_wrong: usize,
}

/// 1000 mixed volumes at the default sampler settings, then all-subthreshold
/// volumes.
pub fn crop_contract() -> CropContract {
    let cfg = CropSamplerConfig::default();
    let mut out = CropContract {
        grasps: 0,
        declined: 0,
        below_threshold: 0,
        subthreshold_wrong: 0,
    };
    for seed in 0..1000u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Sparse peaks over a low background; density varies by seed.
        let density = rng.gen_range(0.0..0.02);
        let t = Tensor::from_fn(&[THETA_BINS, 16, 16], |_| {
            if rng.gen_bool(density) {
                rng.gen_range(0.4..1.0)
            } else {
                rng.gen_range(0.0..0.4)
            }
        })
        .unwrap();
        let v = ScoreVolume::new(t, 4, ScoreSource::Rgb).unwrap();
        match select_cropped(&v, &cfg, 0.005, seed).unwrap() {
            CropOutcome::Grasp { candidate, .. } => {
                out.grasps += 1;
                if v.score_of(&candidate) < cfg.score_threshold {
                    out.below_threshold += 1;
                }
            }
            CropOutcome::NoValidCrop { .. } => out.declined += 1,
        }
        let low = Tensor::from_fn(&[THETA_BINS, 16, 16], |_| rng.gen_range(0.0..0.4)).unwrap();
        let low = ScoreVolume::new(low, 4, ScoreSource::Rgb).unwrap();
        if select_cropped(&low, &cfg, 0.005, seed).unwrap() != (CropOutcome::NoValidCrop { attempts: cfg.max_resamples }) {
            out.subthreshold_wrong += 1;
        }
    }
    out
}
