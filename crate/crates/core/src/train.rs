//! Supervision transfer: distilling the depth teacher into an image student
//! on opaque-only data.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use graspxfer_tensor::kernels::maxpool2d;
use graspxfer_tensor::{AdamConfig, AdamState, Graph, Tensor, TensorError};

use crate::augment::{augment_variant, AugmentConfig};
use crate::dataset::{PairedDataset, Split};
use crate::error::TrainError;
use crate::net::{build_network, forward_graph, prepare_input, Modality, NetworkParams, OUTPUT_STRIDE};
use crate::render::PairedSample;
use crate::teacher::Teacher;
use crate::volume::{max_over_z, ScoreSource, ScoreVolume, ScoreVolume4D};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Bce,
    Mse,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EarlyStopping {
    pub min_delta: f64,
    pub patience: usize,
}

impl Default for EarlyStopping {
    fn default() -> Self {
        EarlyStopping {
            min_delta: 1e-4,
            patience: 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub augmentations_per_image: usize,
    pub loss: LossKind,
    pub max_steps: usize,
    pub validation_every: usize,
    pub seed: u64,
    pub early_stopping: Option<EarlyStopping>,
    /// Upper bound on validation samples scored per validation.
    pub validation_samples: usize,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-5,
            batch_size: 64,
            augmentations_per_image: 32,
            loss: LossKind::Bce,
            max_steps: 2000,
            validation_every: 100,
            seed: 0,
            early_stopping: Some(EarlyStopping::default()),
            validation_samples: 32,
            augment: AugmentConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Settings that converge in minutes on one CPU core at 32×32.
    pub fn desk() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            batch_size: 16,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.learning_rate > 0.0) {
            return Err(TrainError::Config("learning rate must be positive".into()));
        }
        if self.batch_size == 0 || self.augmentations_per_image == 0 {
            return Err(TrainError::Config("batch size and augmentations must be at least 1".into()));
        }
        if self.validation_every == 0 {
            return Err(TrainError::Config("validation interval must be at least 1".into()));
        }
        Ok(())
    }
}

/// Max over z, then a spatial max over `stride × stride` blocks: each
/// student cell's target is the best grasp it covers.
pub fn compute_targets(teacher: &ScoreVolume4D, stride: usize) -> Result<ScoreVolume, TensorError> {
    let full = max_over_z(teacher);
    let (h, w) = full.grid();
    if stride == 0 || h % stride != 0 || w % stride != 0 {
        return Err(TensorError::Dimension(format!(
            "teacher grid {h}x{w} is not a multiple of student stride {stride}"
        )));
    }
    let pooled = if stride == 1 { full.into_scores() } else { maxpool2d(full.scores(), stride)? };
    ScoreVolume::new(pooled, stride, ScoreSource::Depth)
}

pub fn distill_loss(predicted: &ScoreVolume, target: &ScoreVolume, kind: LossKind) -> Result<f64, TensorError> {
    let (p, t) = (predicted.scores(), target.scores());
    p.same_shape(t)?;
    let n = p.len() as f64;
    let total: f64 = match kind {
        LossKind::Mse => p.data().iter().zip(t.data()).map(|(a, b)| (a - b) * (a - b)).sum(),
        LossKind::Bce => p
            .data()
            .iter()
            .zip(t.data())
            .map(|(&p, &t)| {
                let p = p.clamp(1e-12, 1.0 - 1e-12);
                -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
            })
            .sum(),
    };
    Ok(total / n)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// `(step, mean batch loss)` for every optimizer step.
    pub train_loss: Vec<(usize, f64)>,
    /// `(step, validation loss)`; step 0 is the untrained network.
    pub val_loss: Vec<(usize, f64)>,
    pub stopped_early: bool,
    pub final_checkpoint: Option<PathBuf>,
}

impl TrainReport {
    pub fn to_csv(&self) -> String {
        let mut val: HashMap<usize, f64> = self.val_loss.iter().copied().collect();
        let mut out = String::from("step,train_loss,val_loss\n");
        if let Some(v) = val.remove(&0) {
            let _ = writeln!(out, "0,,{v}");
        }
        for &(step, loss) in &self.train_loss {
            match val.get(&step) {
                Some(v) => {
                    let _ = writeln!(out, "{step},{loss},{v}");
                }
                None => {
                    let _ = writeln!(out, "{step},{loss},");
                }
            }
        }
        out
    }
}

/// Passed to the observer after each validation.
pub struct ValidationEvent<'a> {
    pub step: usize,
    pub val_loss: f64,
    pub params: &'a NetworkParams,
    pub optimizer_step: u64,
}

struct Example {
    input: Tensor,
    target: Tensor,
}

/// Loads samples and caches teacher targets per (sample, augmentation).
struct Feeder<'a> {
    data: &'a dyn PairedDataset,
    teacher: &'a Teacher,
    modality: Modality,
    augment: AugmentConfig,
    seed: u64,
    samples: HashMap<usize, PairedSample>,
    targets: HashMap<(usize, Option<usize>), Tensor>,
}

impl Feeder<'_> {
    fn sample(&mut self, index: usize) -> Result<&PairedSample, TrainError> {
        if !self.samples.contains_key(&index) {
            let s = self.data.load(index)?;
            self.samples.insert(index, s);
        }
        Ok(&self.samples[&index])
    }

    /// `variant` None is the sample as captured.
    fn example(&mut self, index: usize, variant: Option<usize>) -> Result<Example, TrainError> {
        let (augment, seed, cam) = (self.augment.clone(), self.seed ^ (index as u64).wrapping_mul(0x9e37_79b9), self.teacher.config().camera_height);
        let base = self.sample(index)?;
        let sample = match variant {
            Some(j) => augment_variant(base, &augment, seed, j),
            None => base.clone(),
        };
        let input = prepare_input(&sample, self.modality, cam);
        let key = (index, variant);
        let target = match self.targets.get(&key) {
            Some(t) => t.clone(),
            None => {
                let vol = self.teacher.score_dense(&sample.depth)?;
                let t = compute_targets(&vol, OUTPUT_STRIDE)?.into_scores();
                self.targets.insert(key, t.clone());
                t
            }
        };
        Ok(Example { input, target })
    }
}

fn example_loss(
    params: &NetworkParams,
    ex: &Example,
    kind: LossKind,
    with_grads: bool,
) -> Result<(f64, Option<Vec<Tensor>>), TrainError> {
    let mut g = Graph::new();
    let (out, pnodes) = forward_graph(params, &mut g, &ex.input)?;
    let t = g.constant(ex.target.clone());
    let loss = match kind {
        LossKind::Bce => g.bce(out, t)?,
        LossKind::Mse => g.mse(out, t)?,
    };
    let value = g.value(loss).item();
    if !with_grads {
        return Ok((value, None));
    }
    let grads = g.backward(loss)?;
    let per_param = pnodes
        .iter()
        .map(|&n| grads.get(n).cloned().unwrap_or_else(|| Tensor::zeros(g.value(n).shape())))
        .collect();
    Ok((value, Some(per_param)))
}

pub fn train(
    config: &TrainConfig,
    data: &dyn PairedDataset,
    modality: Modality,
    teacher: &Teacher,
) -> Result<(NetworkParams, TrainReport), TrainError> {
    train_with_observer(config, data, modality, teacher, &mut |_| Ok(()))
}

/// Trains on the opaque-only training split; validates on the opaque-only
/// validation split, or on unaugmented training samples if there is none.
/// Non-opaque samples are never loaded.
pub fn train_with_observer(
    config: &TrainConfig,
    data: &dyn PairedDataset,
    modality: Modality,
    teacher: &Teacher,
    observer: &mut dyn FnMut(&ValidationEvent) -> Result<(), TrainError>,
) -> Result<(NetworkParams, TrainReport), TrainError> {
    config.validate()?;
    let pick = |split: Split| -> Vec<usize> {
        (0..data.len())
            .filter(|&i| data.split(i) == split && data.is_opaque_only(i))
            .collect()
    };
    let train_idx = pick(Split::Train);
    if train_idx.is_empty() {
        return Err(TrainError::Config("no opaque training data".into()));
    }
    let mut val_idx = pick(Split::Validation);
    if val_idx.is_empty() {
        val_idx = train_idx.clone();
    }
    val_idx.truncate(config.validation_samples.max(1));

    let mut params = build_network(modality.channels(), config.seed)?;
    let mut report = TrainReport::default();
    if config.max_steps == 0 {
        return Ok((params, report));
    }
    let mut adam = AdamState::new(
        AdamConfig::with_learning_rate(config.learning_rate),
        params.weights().iter().map(Tensor::shape),
    );
    let mut feeder = Feeder {
        data,
        teacher,
        modality,
        augment: AugmentConfig {
            variants: config.augmentations_per_image,
            ..config.augment.clone()
        },
        seed: config.seed,
        samples: HashMap::new(),
        targets: HashMap::new(),
    };
    let validate = |params: &NetworkParams, feeder: &mut Feeder| -> Result<f64, TrainError> {
        let mut total = 0.0;
        for &i in &val_idx {
            let ex = feeder.example(i, None)?;
            total += example_loss(params, &ex, config.loss, false)?.0;
        }
        Ok(total / val_idx.len() as f64)
    };

    let v0 = validate(&params, &mut feeder)?;
    report.val_loss.push((0, v0));
    let mut best = v0;
    let mut stale = 0;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x7472_6169_6e00);
    let n_aug = config.augmentations_per_image;

    for step in 1..=config.max_steps {
        let batch: Vec<(usize, usize)> = (0..config.batch_size)
            .map(|_| (train_idx[rng.gen_range(0..train_idx.len())], rng.gen_range(0..n_aug)))
            .collect();
        let mut sum: Option<Vec<Tensor>> = None;
        let mut loss_sum = 0.0;
        for &(i, j) in &batch {
            let ex = feeder.example(i, Some(j))?;
            let (loss, grads) = example_loss(&params, &ex, config.loss, true)?;
            let grads = grads.expect("requested");
            loss_sum += loss;
            match &mut sum {
                None => sum = Some(grads),
                Some(acc) => {
                    for (a, g) in acc.iter_mut().zip(&grads) {
                        for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                            *x += y;
                        }
                    }
                }
            }
        }
        let loss = loss_sum / batch.len() as f64;
        if !loss.is_finite() {
            return Err(TrainError::Diverged { step });
        }
        let scale = 1.0 / batch.len() as f64;
        let mut grads = sum.expect("non-empty batch");
        for g in &mut grads {
            for v in g.data_mut() {
                *v *= scale;
            }
        }
        adam.update(params.weights_mut(), &grads).map_err(|e| match e {
            TensorError::NonFinite { .. } => TrainError::Diverged { step },
            other => other.into(),
        })?;
        if params.weights().iter().any(|w| w.validate().is_err()) {
            return Err(TrainError::Diverged { step });
        }
        report.train_loss.push((step, loss));

        if step % config.validation_every == 0 || step == config.max_steps {
            let v = validate(&params, &mut feeder)?;
            if !v.is_finite() {
                return Err(TrainError::Diverged { step });
            }
            report.val_loss.push((step, v));
            observer(&ValidationEvent {
                step,
                val_loss: v,
                params: &params,
                optimizer_step: adam.step_count(),
            })?;
            if let Some(es) = &config.early_stopping {
                if v < best - es.min_delta {
                    best = v;
                    stale = 0;
                } else {
                    stale += 1;
                    if stale >= es.patience {
                        report.stopped_early = true;
                        break;
                    }
                }
            }
        }
    }
    Ok((params, report))
}
