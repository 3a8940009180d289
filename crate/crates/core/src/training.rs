//! Minibatch training of an [`NvaeModel`] with Adam.
//!
//! Every source of randomness is a stream keyed by `(seed, label, epoch,
//! batch)`, so an interrupted run resumed from its checkpoint replays the
//! remaining epochs exactly.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::checkpoint::{Checkpoint, TrainState};
use crate::data::{Batches, Dataset};
use crate::error::{Error, Result};
use crate::model::{NvaeModel, Objective};
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub objective: Objective,
    pub beta_c: f64,
    pub beta_s: f64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub bias_enabled: bool,
    /// Reconstruction samples per example and step.
    pub samples: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            objective: Objective::Beta,
            beta_c: 2.0,
            beta_s: 1.0,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            batch_size: 128,
            epochs: 30,
            seed: 0,
            bias_enabled: true,
            samples: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if !(self.beta_c >= 0.0 && self.beta_s >= 0.0) {
            return bad("beta_c and beta_s must be non-negative");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return bad("moment decays must lie in [0, 1)");
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.samples == 0 {
            return bad("samples must be at least 1");
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            ..AdamConfig::default()
        }
    }
}

/// Epoch means over the training set. KL values are per example, summed
/// over the dimensions of the block.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub objective: f64,
    pub recon: f64,
    pub kl_shared: f64,
    pub kl_class: f64,
    /// Absent for the baseline objective.
    pub class_nll: Option<f64>,
    pub train_acc: Option<f64>,
    pub test_acc: Option<f64>,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
}

pub const REPORT_HEADER: &str = "epoch,objective,recon,kl_s,kl_c,class_nll,train_acc,test_acc,wall_time_s";

impl TrainReport {
    /// One row per epoch under [`REPORT_HEADER`]; absent values are empty.
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        let mut out = format!("{REPORT_HEADER}\n");
        for r in &self.epochs {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{:.3}",
                r.epoch,
                r.objective,
                r.recon,
                r.kl_shared,
                r.kl_class,
                opt(r.class_nll),
                opt(r.train_acc),
                opt(r.test_acc),
                r.wall_time_s
            )
            .expect("writing to a String");
        }
        out
    }

    /// Same records with wall time zeroed, for reproducibility comparisons.
    pub fn without_timing(&self) -> TrainReport {
        TrainReport {
            epochs: self
                .epochs
                .iter()
                .map(|r| EpochRecord {
                    wall_time_s: 0.0,
                    ..r.clone()
                })
                .collect(),
        }
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.epochs.last()
    }
}

/// Fraction of examples whose inferred label matches.
pub fn accuracy(model: &NvaeModel, data: &Dataset) -> Result<f64> {
    const CHUNK: usize = 500;
    let mut correct = 0usize;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(CHUNK) {
        let (x, y) = data.batch(chunk)?;
        let pred = model.infer_labels(&x)?;
        correct += pred.iter().zip(&y).filter(|(a, b)| a == b).count();
    }
    Ok(correct as f64 / data.len().max(1) as f64)
}

pub struct Trainer {
    model: NvaeModel,
    config: TrainConfig,
    adam_enc: AdamState,
    adam_dec: AdamState,
    epoch: usize,
    report: TrainReport,
}

impl Trainer {
    pub fn new(mut model: NvaeModel, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if model.config().bias_enabled != config.bias_enabled {
            return Err(Error::InvalidArgument(format!(
                "model was built with bias_enabled={} but the training config says {}",
                model.config().bias_enabled,
                config.bias_enabled
            )));
        }
        model.set_betas(config.beta_c, config.beta_s);
        Ok(Self {
            adam_enc: AdamState::new(&model.encoder),
            adam_dec: AdamState::new(&model.decoder),
            model,
            config,
            epoch: 0,
            report: TrainReport::default(),
        })
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        let state = ckpt.train.ok_or_else(|| {
            Error::InvalidArgument("checkpoint has no optimizer state to resume from".into())
        })?;
        let mut t = Trainer::new(ckpt.model, state.config)?;
        t.adam_enc = state.adam_enc;
        t.adam_dec = state.adam_dec;
        t.epoch = state.epoch;
        Ok(t)
    }

    pub fn model(&self) -> &NvaeModel {
        &self.model
    }

    pub fn into_model(self) -> NvaeModel {
        self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    /// Completed epochs.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn report(&self) -> &TrainReport {
        &self.report
    }

    pub fn is_done(&self) -> bool {
        self.epoch >= self.config.epochs
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            seed: self.config.seed,
            train: Some(TrainState {
                config: self.config.clone(),
                epoch: self.epoch,
                adam_enc: self.adam_enc.clone(),
                adam_dec: self.adam_dec.clone(),
            }),
        }
    }

    /// One pass over `train`. Any non-finite objective or gradient aborts
    /// with [`Error::Diverged`] before the parameters are touched.
    pub fn run_epoch(&mut self, train: &Dataset, test: Option<&Dataset>) -> Result<EpochRecord> {
        if train.dim() != self.model.input_dim() {
            return Err(Error::shape("train", &[self.model.input_dim()], &[train.dim()]));
        }
        let started = Instant::now();
        let e = self.epoch;
        let seed = self.config.seed;
        let z_dim = self.model.layout().z_dim();
        let adam = self.config.adam();
        let batches = Batches::new(train.len(), self.config.batch_size, seed)?;

        let mut sums = [0.0; 5];
        for (b, idx) in batches.epoch(e).iter().enumerate() {
            let (x, y) = train.batch(idx)?;
            let mut noise_rng = rng::stream(seed, &[rng::label::NOISE, e as u64, b as u64]);
            let noise: Vec<Tensor> = (0..self.config.samples)
                .map(|_| rng::normal_tensor(&mut noise_rng, &[idx.len(), z_dim]))
                .collect();
            let diverged = Error::Diverged { epoch: e + 1, batch: b };
            let (terms, g_enc, g_dec) = match self.model.loss_and_grads(&x, &y, &noise, self.config.objective) {
                Err(Error::NonFinite { .. }) => return Err(diverged),
                other => other?,
            };
            let finite = terms.objective.iter().all(|v| v.is_finite())
                && g_enc.iter().chain(&g_dec).all(Tensor::is_finite);
            if !finite {
                return Err(diverged);
            }
            for i in 0..terms.len() {
                sums[0] += terms.objective[i];
                sums[1] += terms.recon_ll[i];
                sums[2] += terms.kl_shared[i];
                sums[3] += terms.kl_class[i];
                sums[4] -= terms.log_q_y[i];
            }
            adam_step(&mut self.model.encoder, &g_enc, &mut self.adam_enc, &adam)?;
            adam_step(&mut self.model.decoder, &g_dec, &mut self.adam_dec, &adam)?;
        }

        let n = train.len() as f64;
        let classifies = self.config.objective != Objective::Baseline;
        let (train_acc, test_acc) = if classifies {
            (
                Some(accuracy(&self.model, train)?),
                test.map(|t| accuracy(&self.model, t)).transpose()?,
            )
        } else {
            (None, None)
        };
        self.epoch += 1;
        let record = EpochRecord {
            epoch: self.epoch,
            objective: sums[0] / n,
            recon: sums[1] / n,
            kl_shared: sums[2] / n,
            kl_class: sums[3] / n,
            class_nll: classifies.then_some(sums[4] / n),
            train_acc,
            test_acc,
            wall_time_s: started.elapsed().as_secs_f64(),
        };
        self.report.epochs.push(record.clone());
        Ok(record)
    }
}

/// Where and how often [`train`] writes checkpoints.
#[derive(Debug, Clone, Default)]
pub struct CheckpointPolicy {
    /// `last.ckpt` in this directory is overwritten after every epoch.
    pub dir: Option<PathBuf>,
}

impl CheckpointPolicy {
    pub fn in_dir(dir: impl AsRef<Path>) -> Self {
        Self {
            dir: Some(dir.as_ref().to_path_buf()),
        }
    }

    pub fn last_path(&self) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join("last.ckpt"))
    }
}

/// Trains for the configured number of epochs, calling `on_epoch` after
/// each one. On divergence the error is returned and the checkpoint from
/// the last completed epoch is left in place.
pub fn train(
    model: NvaeModel,
    train_set: &Dataset,
    test_set: Option<&Dataset>,
    config: &TrainConfig,
    policy: &CheckpointPolicy,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<(NvaeModel, TrainReport)> {
    let mut trainer = Trainer::new(model, config.clone())?;
    resume(&mut trainer, train_set, test_set, policy, &mut on_epoch)?;
    let report = trainer.report().clone();
    Ok((trainer.into_model(), report))
}

/// Runs the remaining epochs of an existing trainer.
pub fn resume(
    trainer: &mut Trainer,
    train_set: &Dataset,
    test_set: Option<&Dataset>,
    policy: &CheckpointPolicy,
    on_epoch: &mut impl FnMut(&EpochRecord),
) -> Result<()> {
    while !trainer.is_done() {
        let record = trainer.run_epoch(train_set, test_set)?;
        if let Some(path) = policy.last_path() {
            trainer.checkpoint().save(&path)?;
        }
        on_epoch(&record);
    }
    Ok(())
}
