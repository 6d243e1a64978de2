use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{adam_step, AdamState, Tape, Tensor};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelWeights};
use crate::rng::Rng;
use crate::train::dataset::augment_subsample;
use crate::train::loss::sample_loss_on_tape;
use crate::types::Sample;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    Pretrain,
    Finetune,
    FromScratch,
}

/// Learning rate over epochs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// Half-cosine from `lr` down to `lr / 100` over the run.
    Cosine,
}

impl LrSchedule {
    /// Rate for 1-based `epoch` of `epochs`.
    pub fn rate(self, lr: f64, epoch: usize, epochs: usize) -> f64 {
        match self {
            LrSchedule::Constant => lr,
            LrSchedule::Cosine => {
                let floor = lr / 100.0;
                let progress = (epoch - 1) as f64 / epochs.saturating_sub(1).max(1) as f64;
                floor + 0.5 * (lr - floor) * (1.0 + (std::f64::consts::PI * progress).cos())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Samples per optimizer step.
    pub batch_size: usize,
    /// Initial learning rate.
    pub lr: f64,
    pub lr_schedule: LrSchedule,
    /// Weight of the distance loss (mm) against the force MSE (N²).
    pub alpha: f64,
    /// Fraction of points kept per sample and epoch; 0 disables subsampling.
    pub augment_fraction: f64,
    pub seed: u64,
    pub mode: TrainMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 250,
            batch_size: 32,
            lr: 1e-4,
            lr_schedule: LrSchedule::Constant,
            alpha: 88.0,
            augment_fraction: 0.0,
            seed: 0,
            mode: TrainMode::Pretrain,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config("train.lr must be positive".into()));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config("train.alpha must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.augment_fraction) {
            return Err(Error::Config("train.augment_fraction must lie in [0, 1] (0 disables it)".into()));
        }
        Ok(())
    }
}

/// One line of training history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_mean_ld: f64,
    pub train_force_abs: f64,
    pub val_loss: f64,
    pub val_mean_ld: f64,
    pub val_force_abs: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Weights with the lowest validation loss seen (the initial weights
    /// count as epoch 0).
    pub best: ModelWeights<f32>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub history: Vec<EpochRecord>,
}

#[derive(Debug, Clone, Copy, Default)]
struct LossParts {
    total: f64,
    distance: f64,
    force_abs: f64,
}

fn forward_backward(
    weights: &ModelWeights<f32>,
    sample: &Sample,
    model: &ModelConfig,
    alpha: f64,
    with_grad: bool,
) -> Result<(LossParts, Vec<Tensor<f32>>)> {
    let mut tape = Tape::<f32>::new();
    let params = weights.bind(&mut tape, with_grad);
    let l = sample_loss_on_tape(&mut tape, &params, sample, model, alpha)?;
    let parts = LossParts {
        total: tape.value(l.total).item() as f64,
        distance: tape.value(l.distance).item() as f64,
        force_abs: (tape.value(l.force_pred).item() as f64 - sample.target_force_change).abs(),
    };
    if !with_grad {
        return Ok((parts, Vec::new()));
    }
    tape.backward(l.total)?;
    let grads = params
        .iter()
        .zip(weights.tensors())
        .map(|(&p, t)| tape.take_grad(p).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    Ok((parts, grads))
}

fn mean_parts(parts: &[LossParts]) -> LossParts {
    let n = parts.len().max(1) as f64;
    LossParts {
        total: parts.iter().map(|p| p.total).sum::<f64>() / n,
        distance: parts.iter().map(|p| p.distance).sum::<f64>() / n,
        force_abs: parts.iter().map(|p| p.force_abs).sum::<f64>() / n,
    }
}

fn validation(weights: &ModelWeights<f32>, val: &[Sample], model: &ModelConfig, alpha: f64) -> Result<LossParts> {
    let parts = val
        .par_iter()
        .map(|s| forward_backward(weights, s, model, alpha, false).map(|(p, _)| p))
        .collect::<Result<Vec<_>>>()?;
    Ok(mean_parts(&parts))
}

/// Minibatch Adam over `train_set`, keeping the weights with the best
/// validation loss.
///
/// Samples may differ in size, so a batch is processed sample by sample and
/// the mean gradient drives a single optimizer step. Per-sample gradients
/// are summed in batch order, making results independent of thread count.
pub fn train(
    train_set: &[Sample],
    val_set: &[Sample],
    config: &TrainConfig,
    model: &ModelConfig,
    init: ModelWeights<f32>,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    config.validate()?;
    model.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::InvalidArgument("training and validation sets must be non-empty".into()));
    }
    let mut weights = init;
    let mut adam = AdamState::new(config.lr, weights.tensors().iter().map(|t| t.shape()));
    let rng = Rng::new(config.seed);

    let initial = validation(&weights, val_set, model, config.alpha)?;
    let mut best = weights.clone();
    let mut best_val = initial.total;
    let mut best_epoch = 0;
    let mut history = Vec::with_capacity(config.epochs);

    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 1..=config.epochs {
        let start = Instant::now();
        adam.lr = config.lr_schedule.rate(config.lr, epoch, config.epochs) as f32;
        let mut epoch_rng = rng.child(epoch as u64);
        epoch_rng.shuffle(&mut order);
        let mut seen = Vec::with_capacity(train_set.len());
        for (b, batch) in order.chunks(config.batch_size).enumerate() {
            let results = batch
                .par_iter()
                .enumerate()
                .map(|(pos, &i)| {
                    let sample = &train_set[i];
                    if config.augment_fraction > 0.0 {
                        let mut aug_rng = epoch_rng.child((b * config.batch_size + pos) as u64);
                        let sub = augment_subsample(sample, config.augment_fraction, model.k + 1, &mut aug_rng)?;
                        forward_backward(&weights, &sub, model, config.alpha, true)
                    } else {
                        forward_backward(&weights, sample, model, config.alpha, true)
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            let mut grads: Option<Vec<Tensor<f32>>> = None;
            for (parts, g) in results {
                if !parts.total.is_finite() {
                    return Err(Error::Diverged { epoch, batch: b });
                }
                seen.push(parts);
                match &mut grads {
                    None => grads = Some(g),
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, x)| a.add_assign(x)),
                }
            }
            let mut grads = grads.expect("non-empty batch");
            let inv = 1.0 / batch.len() as f32;
            for g in &mut grads {
                g.data_mut().iter_mut().for_each(|v| *v *= inv);
            }
            adam_step(weights.tensors_mut(), &grads, &mut adam)?;
        }
        if !weights.is_finite() {
            return Err(Error::Diverged { epoch, batch: order.len().div_ceil(config.batch_size) });
        }
        let tr = mean_parts(&seen);
        let va = validation(&weights, val_set, model, config.alpha)?;
        if !va.total.is_finite() {
            return Err(Error::Diverged { epoch, batch: 0 });
        }
        if va.total < best_val {
            best_val = va.total;
            best = weights.clone();
            best_epoch = epoch;
        }
        let record = EpochRecord {
            epoch,
            train_loss: tr.total,
            train_mean_ld: tr.distance,
            train_force_abs: tr.force_abs,
            val_loss: va.total,
            val_mean_ld: va.distance,
            val_force_abs: va.force_abs,
            seconds: start.elapsed().as_secs_f64(),
        };
        on_epoch(&record);
        history.push(record);
    }
    Ok(TrainOutcome { best, best_epoch, best_val_loss: best_val, history })
}

/// Continues training every weight of a checkpoint on new data. The
/// checkpoint must match `model`.
pub fn finetune(
    checkpoint: &ModelWeights<f32>,
    train_set: &[Sample],
    val_set: &[Sample],
    config: &TrainConfig,
    model: &ModelConfig,
    on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    let weights = ModelWeights::from_named(model, checkpoint.to_named())?;
    train(train_set, val_set, config, model, weights, on_epoch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{Condition, DisplacementField, PointCloud, SampleMeta};

    fn samples(rng: &mut Rng, count: usize, n: usize) -> Vec<Sample> {
        (0..count)
            .map(|s| {
                let pts: Vec<_> = (0..n).map(|_| [rng.uniform_range(0.0, 20.0), rng.uniform_range(0.0, 20.0), 0.0]).collect();
                let c = pts[0];
                let depth = rng.uniform_range(0.5, 2.0);
                let deltas = pts
                    .iter()
                    .map(|p| {
                        let r2 = (p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2);
                        [0.0, 0.0, -depth * (-r2 / 40.0).exp()]
                    })
                    .collect();
                let cond = Condition::new(c, [c[0], c[1], -depth]).unwrap();
                let meta = SampleMeta { location: s, direction: 0, t_in: 0, t_out: 1, contact_row: 0 };
                Sample::new(PointCloud::new(pts).unwrap(), cond, DisplacementField::new(deltas).unwrap(), depth, meta).unwrap()
            })
            .collect()
    }

    fn model() -> ModelConfig {
        ModelConfig {
            k: 3,
            edge_widths: vec![8, 8, 8],
            displacement_widths: vec![16],
            force_widths: vec![8, 4, 1],
            input_scale: 0.1,
            ..ModelConfig::default()
        }
    }

    fn config(seed: u64) -> TrainConfig {
        TrainConfig { epochs: 10, batch_size: 4, lr: 1e-3, seed, ..TrainConfig::default() }
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(LrSchedule::Constant.rate(0.1, 7, 10), 0.1);
        assert!((LrSchedule::Cosine.rate(1.0, 1, 11) - 1.0).abs() < 1e-12);
        assert!((LrSchedule::Cosine.rate(1.0, 6, 11) - 0.505).abs() < 1e-12);
        assert!((LrSchedule::Cosine.rate(1.0, 11, 11) - 0.01).abs() < 1e-12);
        assert_eq!(LrSchedule::Cosine.rate(1.0, 1, 1), 1.0);
    }

    #[test]
    fn loss_decreases_over_ten_epochs() {
        for seed in 0..3 {
            let mut rng = Rng::new(seed);
            let data = samples(&mut rng, 16, 12);
            let init = ModelWeights::init(&model(), &mut rng).unwrap();
            let out = train(&data[..12], &data[12..], &config(seed), &model(), init, |_| {}).unwrap();
            let (first, last) = (&out.history[0], &out.history[9]);
            assert!(last.train_loss < first.train_loss, "seed {seed}: {} -> {}", first.train_loss, last.train_loss);
            assert!(out.best_val_loss <= out.history.iter().map(|r| r.val_loss).fold(f64::INFINITY, f64::min));
        }
    }

    #[test]
    fn augmentation_is_seeded_and_changes_training() {
        let mut rng = Rng::new(4);
        let data = samples(&mut rng, 10, 20);
        let init = ModelWeights::init(&model(), &mut rng).unwrap();
        let aug = TrainConfig { epochs: 2, augment_fraction: 0.5, ..config(1) };
        let a = train(&data[..8], &data[8..], &aug, &model(), init.clone(), |_| {}).unwrap();
        let b = train(&data[..8], &data[8..], &aug, &model(), init.clone(), |_| {}).unwrap();
        let plain = train(&data[..8], &data[8..], &TrainConfig { augment_fraction: 0.0, ..aug.clone() }, &model(), init, |_| {}).unwrap();
        assert_eq!(a.history[1].train_loss, b.history[1].train_loss);
        assert_ne!(a.history[1].train_loss, plain.history[1].train_loss);
    }

    #[test]
    fn huge_learning_rate_diverges() {
        let mut rng = Rng::new(2);
        let data = samples(&mut rng, 8, 10);
        let init = ModelWeights::init(&model(), &mut rng).unwrap();
        let cfg = TrainConfig { lr: 1e12, ..config(0) };
        assert!(matches!(train(&data[..6], &data[6..], &cfg, &model(), init, |_| {}), Err(Error::Diverged { .. })));
    }

    #[test]
    fn rejects_empty_sets_and_bad_config() {
        let mut rng = Rng::new(0);
        let data = samples(&mut rng, 3, 8);
        let init = ModelWeights::init(&model(), &mut rng).unwrap();
        assert!(train(&data, &[], &config(0), &model(), init.clone(), |_| {}).is_err());
        let bad = TrainConfig { batch_size: 0, ..config(0) };
        assert!(matches!(train(&data, &data, &bad, &model(), init, |_| {}), Err(Error::Config(_))));
    }
}
