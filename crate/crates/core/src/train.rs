//! Mini-batch training with Adam, a step learning-rate schedule and per-epoch
//! noise resampling.

use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::eval::psnr;
use crate::models::{self, Denoiser, Mode, Variant};
use crate::optim::{adam_step, AdamConfig};
use crate::params::ParameterSet;
use crate::rng::{tag, Rng};
use crate::synth::Dataset;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub lr_decay_every_epochs: usize,
    pub lr_decay_factor: f64,
    /// Seeds shuffling and parameter initialization.
    pub seed: u64,
    pub checkpoint_every: usize,
    /// Share of patches held out for best-checkpoint selection; 0 disables it.
    pub validation_fraction: f64,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 128,
            lr0: 0.001,
            lr_decay_every_epochs: 30,
            lr_decay_factor: 10.0,
            seed: 0,
            checkpoint_every: 1,
            validation_fraction: 0.05,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be at least 1".into());
        }
        if !(self.lr0 > 0.0) || !(self.lr_decay_factor > 0.0) || self.lr_decay_every_epochs == 0 {
            return bad("lr0, lr_decay_factor and lr_decay_every_epochs must be positive".into());
        }
        if self.checkpoint_every == 0 {
            return bad("checkpoint_every must be at least 1".into());
        }
        if !(0.0..0.5).contains(&self.validation_fraction) {
            return bad(format!("validation_fraction {} outside [0, 0.5)", self.validation_fraction));
        }
        Ok(())
    }
}

/// `lr0 / factor^⌊epoch / every⌋`.
pub fn lr_at(epoch: usize, config: &TrainConfig) -> f64 {
    let steps = (epoch / config.lr_decay_every_epochs) as i32;
    config.lr0 / config.lr_decay_factor.powi(steps)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub lr: f64,
    pub reconstruction: f64,
    /// f(S) or noise-level loss; 0 for the residual baseline.
    pub auxiliary: f64,
    pub total: f64,
    pub val_psnr: Option<f64>,
    pub wall_seconds: f64,
}

impl EpochRow {
    pub const CSV_HEADER: &'static str = "epoch,lr,reconstruction,auxiliary,total,val_psnr,wall_seconds";

    pub fn csv_line(&self) -> String {
        let val = self.val_psnr.map(|v| format!("{v:.6}")).unwrap_or_default();
        format!(
            "{},{:e},{:.9e},{:.9e},{:.9e},{},{:.3}",
            self.epoch, self.lr, self.reconstruction, self.auxiliary, self.total, val, self.wall_seconds
        )
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub rows: Vec<EpochRow>,
}

impl TrainLog {
    pub fn write_csv(&self, mut out: impl Write) -> Result<()> {
        writeln!(out, "{}", EpochRow::CSV_HEADER)?;
        for r in &self.rows {
            writeln!(out, "{}", r.csv_line())?;
        }
        Ok(())
    }

    pub fn totals(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.total).collect()
    }
}

/// Parameters of the epoch with the highest validation PSNR.
#[derive(Debug, Clone)]
pub struct BestSnapshot {
    pub epoch: usize,
    pub val_psnr: f64,
    pub params: ParameterSet<f32>,
}

/// Passed to the epoch callback after each epoch's optimization.
pub struct EpochEvent<'a> {
    pub row: &'a EpochRow,
    pub model: &'a Denoiser,
    /// Set when this epoch produced a new best validation PSNR.
    pub new_best: bool,
    /// Set on epochs that fall on the checkpoint cadence (and the last epoch).
    pub checkpoint_due: bool,
}

pub struct TrainOutcome {
    pub log: TrainLog,
    pub best: Option<BestSnapshot>,
}

/// Ground-truth quantities the auxiliary losses need beyond the dataset itself.
#[derive(Debug, Clone, Copy)]
pub struct Supervision {
    /// Prior standard deviation (0–255) of the clean patches; needed for the
    /// fusion variant's `f(S)` target.
    pub prior_std: Option<f64>,
}

/// Splits `n` patches into `(train, validation)` index lists.
pub fn split_validation(n: usize, fraction: f64) -> (Vec<usize>, Vec<usize>) {
    let held = if fraction > 0.0 { ((n as f64 * fraction).ceil() as usize).min(n.saturating_sub(2)) } else { 0 };
    ((0..n - held).collect(), (n - held..n).collect())
}

/// Chunks a shuffled index list, folding a trailing singleton into the batch before it.
pub fn make_batches(order: &[usize], batch_size: usize) -> Vec<Vec<usize>> {
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() == 1) {
        let tail = batches.pop().unwrap();
        batches.last_mut().unwrap().extend(tail);
    }
    batches
}

struct Validation {
    noisy: Vec<Tensor<f32>>,
    clean: Vec<Tensor<f32>>,
}

impl Validation {
    fn freeze(data: &Dataset, indices: &[usize]) -> Result<Self> {
        let mut noisy = Vec::with_capacity(indices.len());
        let mut clean = Vec::with_capacity(indices.len());
        for &i in indices {
            let (n, c) = data.batch(&[i])?;
            noisy.push(n);
            clean.push(c);
        }
        Ok(Self { noisy, clean })
    }

    fn mean_psnr(&self, model: &Denoiser) -> Result<f64> {
        let mut total = 0.0;
        for (n, c) in self.noisy.iter().zip(&self.clean) {
            let out = model.predict(n)?.denoised.clamp(0.0, 1.0);
            total += psnr(&out, c, 1.0)?;
        }
        Ok(total / self.noisy.len() as f64)
    }
}

/// Trains `model` on `data`, advancing the dataset's noise once per epoch.
///
/// `on_epoch` runs after every epoch; checkpoint writers hook in there.
pub fn train(
    model: &mut Denoiser,
    data: &mut Dataset,
    config: &TrainConfig,
    supervision: Supervision,
    mut on_epoch: impl FnMut(&EpochEvent<'_>) -> Result<()>,
) -> Result<TrainOutcome> {
    config.validate()?;
    let mcfg = model.config().clone();
    if data.item_dims()[0] != mcfg.channels {
        return Err(Error::Shape(format!(
            "dataset has {} channels, model expects {}",
            data.item_dims()[0],
            mcfg.channels
        )));
    }
    if mcfg.variant == Variant::Fusion && supervision.prior_std.is_none() {
        return Err(Error::Config("fusion training needs the prior standard deviation for its f(S) target".into()));
    }
    if mcfg.variant == Variant::Buifd && data.noise_range()[1] > mcfg.sigma_max_train {
        return Err(Error::Config(format!(
            "training noise reaches {} but sigma_max_train is {}",
            data.noise_range()[1],
            mcfg.sigma_max_train
        )));
    }
    let (train_idx, val_idx) = split_validation(data.len(), config.validation_fraction);
    if train_idx.len() < 2 {
        return Err(Error::invalid("training needs at least 2 patches for batch norm"));
    }
    let validation = if val_idx.is_empty() { None } else { Some(Validation::freeze(data, &val_idx)?) };

    let dims = data.item_dims();
    let mut log = TrainLog::default();
    let mut best: Option<BestSnapshot> = None;
    let mut order = train_idx.clone();
    for epoch in 0..config.epochs {
        let start = Instant::now();
        if epoch > 0 {
            data.resample_epoch()?;
        }
        let lr = lr_at(epoch, config);
        order.copy_from_slice(&train_idx);
        order.shuffle(&mut Rng::stream(config.seed, &[tag::SHUFFLE, epoch as u64]));

        let (mut rec_sum, mut aux_sum, mut tot_sum) = (0.0, 0.0, 0.0);
        for (b, batch) in make_batches(&order, config.batch_size).iter().enumerate() {
            let (noisy, clean) = data.batch(batch)?;
            let mut tape = Tape::new();
            let bound = model.params().bind(&mut tape);
            let y = tape.constant(noisy);
            let x = tape.constant(clean);
            let fwd = model.forward(&mut tape, &bound, y, Mode::Train)?;
            let sigmas: Vec<f64> = batch.iter().map(|&i| data.sigma(i)).collect();
            let target = match models::auxiliary_targets(&mcfg, supervision.prior_std.unwrap_or(0.0), &sigmas) {
                Some(t) => Some(tape.constant(models::broadcast_items(&t, dims)?)),
                None => None,
            };
            let loss = models::loss_for(&mcfg, &mut tape, &fwd.outputs, x, target)?;
            let rec = tape.value(loss.reconstruction).item()?.into();
            let aux = match loss.auxiliary {
                Some(a) => tape.value(a).item()?.into(),
                None => 0.0,
            };
            let total: f64 = tape.value(loss.total).item()?.into();
            if !(total.is_finite() && f64::is_finite(rec) && f64::is_finite(aux)) {
                return Err(Error::NonFiniteLoss { epoch, batch: b, reconstruction: rec, auxiliary: aux, total });
            }
            let grads = tape.backward(loss.total)?;
            let g = bound.gradients(&tape, &grads);
            adam_step(model.params_mut(), &g, lr, &config.adam)?;
            model.apply_bn_updates(&fwd.bn_updates);

            let w = batch.len() as f64;
            rec_sum += rec * w;
            aux_sum += aux * w;
            tot_sum += total * w;
        }
        let n = train_idx.len() as f64;
        let val_psnr = validation.as_ref().map(|v| v.mean_psnr(model)).transpose()?;
        let new_best = match (val_psnr, &best) {
            (Some(p), Some(b)) => p > b.val_psnr,
            (Some(_), None) => true,
            (None, _) => false,
        };
        if new_best {
            best = Some(BestSnapshot { epoch, val_psnr: val_psnr.unwrap(), params: model.params().clone() });
        }
        let row = EpochRow {
            epoch,
            lr,
            reconstruction: rec_sum / n,
            auxiliary: aux_sum / n,
            total: tot_sum / n,
            val_psnr,
            wall_seconds: start.elapsed().as_secs_f64(),
        };
        let checkpoint_due = (epoch + 1) % config.checkpoint_every == 0 || epoch + 1 == config.epochs;
        on_epoch(&EpochEvent { row: &row, model, new_best, checkpoint_due })?;
        log.rows.push(row);
    }
    Ok(TrainOutcome { log, best })
}
