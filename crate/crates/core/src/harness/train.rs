//! Mini-batch SGD training with best-on-validation model selection.

use std::time::Instant;

use rand::seq::SliceRandom;

use crate::data::TrainingView;
use crate::error::{Error, Result};
use crate::metrics;
use crate::model::{ConceptModel, Mode, ModelConfig};
use crate::nn::{Sgd, Tape};
use crate::reliability::{objective, BetaSchedule, LossBreakdown, StepBetas};
use crate::rng;
use crate::tensor::TensorError;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Rescales the full gradient to at most this L2 norm before each step.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.05,
            momentum: 0.9,
            epochs: 100,
            batch_size: 128,
            grad_clip: Some(5.0),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("lr must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum must lie in [0, 1)"));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::config("grad_clip must be positive"));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    /// Batch-size-weighted means of the loss terms over the epoch.
    pub losses: LossBreakdown,
    pub val_task_accuracy: f64,
    pub val_concept_accuracy: f64,
    pub beta_hsic: f64,
    pub beta_mixup: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunLog {
    pub epochs: Vec<EpochLog>,
    pub best_epoch: Option<usize>,
    pub wall_seconds: f64,
}

pub struct TrainOutcome {
    /// Parameters from the epoch with the best validation task accuracy.
    pub model: ConceptModel,
    pub log: RunLog,
}

/// The coefficient schedules for the HSIC weight and the mixup blend.
pub fn schedules(cfg: &ModelConfig, epochs: usize) -> Result<(BetaSchedule, BetaSchedule)> {
    let hsic = BetaSchedule::for_run(cfg.hsic_beta_max.unwrap_or(cfg.beta_max), cfg.beta_warmup_epochs, epochs)?;
    let mixup = BetaSchedule::for_run(cfg.mixup_beta_max.unwrap_or(cfg.beta_max), cfg.beta_warmup_epochs, epochs)?;
    Ok((hsic, mixup))
}

fn add_scaled(acc: &mut LossBreakdown, b: &LossBreakdown, w: f64) {
    acc.task += w * b.task;
    acc.concept += w * b.concept;
    acc.mixup += w * b.mixup;
    acc.cvd += w * b.cvd;
    acc.rec += w * b.rec;
    acc.total += w * b.total;
}

/// Scales all gradients down so their joint L2 norm is at most `max`.
pub fn clip_grad_norm(store: &mut crate::nn::ParamStore, max: f64) -> f64 {
    let norm = store
        .iter()
        .flat_map(|p| p.grad.iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt();
    if norm > max {
        let s = max / norm;
        for p in store.iter_mut() {
            p.grad.iter_mut().for_each(|g| *g *= s);
        }
    }
    norm
}

/// Trains a fresh model from `seed`. With zero epochs the initialized model
/// is returned with an empty log.
pub fn train(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    train: TrainingView<'_>,
    val: TrainingView<'_>,
    seed: u64,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let ds = train.dataset();
    if ds.features.shape()[1] != model_cfg.input_dim || ds.num_concepts() != model_cfg.num_concepts {
        return Err(Error::config(format!(
            "model expects {} features and {} concepts; dataset has {} and {}",
            model_cfg.input_dim,
            model_cfg.num_concepts,
            ds.features.shape()[1],
            ds.num_concepts()
        )));
    }
    let start = Instant::now();
    let mut model = ConceptModel::new(model_cfg.clone(), seed)?;
    let mut log = RunLog::default();
    if cfg.epochs == 0 {
        return Ok(TrainOutcome { model, log });
    }
    let (hsic_sched, mixup_sched) = schedules(model_cfg, cfg.epochs)?;
    let mut opt = Sgd::new(&model.store, cfg.lr, cfg.momentum)?;
    let mut shuffle = rng::stream(seed, "shuffle");
    let mut randint = rng::stream(seed, "randint");
    let mut bank = None;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best: Option<(f64, crate::nn::ParamStore)> = None;
    let labels = train.labels();

    for epoch in 0..cfg.epochs {
        let betas = StepBetas {
            hsic: hsic_sched.at(epoch),
            mixup: mixup_sched.at(epoch),
        };
        order.shuffle(&mut shuffle);
        let mut sums = LossBreakdown::default();
        for idx in order.chunks(cfg.batch_size) {
            let concepts = ds.select_concepts(idx);
            let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let step = (|| {
                let mut tape = Tape::training(&model.store);
                let x = tape.graph.constant(ds.features.select_rows(idx));
                let out = model.forward(
                    &mut tape,
                    x,
                    Mode::Train {
                        concepts: &concepts,
                        rng: &mut randint,
                    },
                )?;
                let (total, parts) = objective(&model, &mut tape, &out, &y, &concepts, betas, &mut bank)?;
                if !parts.total.is_finite() {
                    return Err(Error::Divergence {
                        epoch,
                        detail: format!("non-finite loss {parts:?}"),
                    });
                }
                let grads = tape.graph.backward(total)?;
                Ok((tape, grads, parts))
            })();
            let (tape, grads, parts) = step.map_err(|e| match e {
                Error::Tensor(TensorError::NonFinite { .. } | TensorError::NonFiniteResult { .. }) => Error::Divergence {
                    epoch,
                    detail: e.to_string(),
                },
                other => other,
            })?;
            model.store.accumulate(&tape, &grads);
            if let Some(max) = cfg.grad_clip {
                clip_grad_norm(&mut model.store, max);
            }
            opt.step(&mut model.store)?;
            if let Some(p) = model.store.iter().find(|p| p.value.data().iter().any(|v| !v.is_finite())) {
                return Err(Error::Divergence {
                    epoch,
                    detail: format!("non-finite values in {} after update", p.name),
                });
            }
            add_scaled(&mut sums, &parts, idx.len() as f64 / train.len() as f64);
        }
        let vds = val.dataset();
        let snap = model.snapshot(&vds.features)?;
        let val_task = metrics::task_accuracy(&snap.logits, val.labels())?;
        let val_concept = metrics::concept_accuracy(&snap.p_hat, &vds.concepts)?;
        if best.as_ref().is_none_or(|(b, _)| val_task > *b) {
            best = Some((val_task, model.store.clone()));
            log.best_epoch = Some(epoch);
        }
        log::debug!(
            "{} epoch {epoch}: loss {:.4} val task {val_task:.2}",
            model_cfg.label(),
            sums.total
        );
        log.epochs.push(EpochLog {
            epoch,
            losses: sums,
            val_task_accuracy: val_task,
            val_concept_accuracy: val_concept,
            beta_hsic: betas.hsic,
            beta_mixup: betas.mixup,
        });
    }
    if let Some((_, store)) = best {
        model.store = store;
    }
    log.wall_seconds = start.elapsed().as_secs_f64();
    Ok(TrainOutcome { model, log })
}
