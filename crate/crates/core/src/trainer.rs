//! Mini-batch training over all diffusion steps, with early stopping on
//! validation MRR.

use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::config::{NegativeScope, TrainConfig};
use crate::corpus::{InteractionSequence, PaddedBatch, PAD};
use crate::error::{Error, Result};
use crate::eval;
use crate::model::{diffuse, sample_prediction, Ctx, Dropout, Model, ModelConfig, ParamStore, ITEM_EMB};
use crate::objective::{cross_divergence, info_nce, squared_error, step_weight, total_loss, LossBreakdown, StepLoss};
use crate::optim::{clip_global_norm, Adam};
use crate::rng::{stream_rng, Stream};
use crate::schedule::{DiffusionSchedule, ScheduleShape};
use crate::tensor::Tensor;

/// The schedule described by a training configuration.
pub fn schedule_for(cfg: &TrainConfig) -> Result<DiffusionSchedule> {
    DiffusionSchedule::with_options(
        cfg.steps,
        cfg.beta_max,
        ScheduleShape::Linear,
        cfg.posterior_variance_mode,
        cfg.variance_floor,
    )
}

/// Random streams for one batch.
pub struct StepRngs {
    pub augment: ChaCha8Rng,
    pub dropout: ChaCha8Rng,
    pub diffusion: ChaCha8Rng,
    pub prediction: ChaCha8Rng,
    pub negatives: ChaCha8Rng,
}

impl StepRngs {
    pub fn new(seed: u64, epoch: u64, batch: u64) -> Self {
        let s = |stream| stream_rng(seed, epoch, batch, stream);
        Self {
            augment: s(Stream::Augment),
            dropout: s(Stream::Dropout),
            diffusion: s(Stream::DiffusionNoise),
            prediction: s(Stream::PredictionNoise),
            negatives: s(Stream::Negatives),
        }
    }
}

/// Uniform draw from `1..=item_count` outside the sorted `history`. When the
/// history covers the whole catalog any item is returned.
pub fn sample_negative<R: Rng + ?Sized>(rng: &mut R, item_count: usize, history: &[usize]) -> usize {
    if history.len() >= item_count {
        return rng.gen_range(1..=item_count);
    }
    loop {
        let c = rng.gen_range(1..=item_count);
        if history.binary_search(&c).is_err() {
            return c;
        }
    }
}

/// Steps evaluated for one batch and the factor that keeps the subsampled
/// sum an unbiased estimate of the full one.
fn steps_for_batch(cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> (Vec<usize>, f64) {
    let all = cfg.steps + 1;
    if cfg.step_subsample == 0 || cfg.step_subsample >= all {
        return ((0..all).collect(), 1.0);
    }
    let mut picked = rand::seq::index::sample(rng, all, cfg.step_subsample).into_vec();
    picked.sort_unstable();
    (picked, all as f64 / cfg.step_subsample as f64)
}

/// Builds the batch objective on `cx` and returns its root together with
/// the per-step breakdown. `train` enables dropout.
pub fn batch_loss(
    model: &Model,
    cx: &mut Ctx,
    batch: &PaddedBatch,
    schedule: &DiffusionSchedule,
    cfg: &TrainConfig,
    rngs: &mut StepRngs,
    train: bool,
) -> Result<(Var, LossBreakdown)> {
    let terms = cfg.variant.terms();
    let (b, l) = (batch.batch_size, batch.max_len);
    let positions = batch.target_positions();
    if positions.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let targets: Vec<usize> = positions.iter().map(|&p| batch.target_ids[p]).collect();
    let groups: Vec<usize> = positions.iter().map(|&p| p / l).collect();
    let groups = (cfg.negative_scope == NegativeScope::Sequence).then_some(groups.as_slice());

    let mut dropout = (train && cfg.dropout > 0.0).then(|| Dropout::new(cfg.dropout, rngs.dropout.clone()));
    let e_s = model.encode_sequence(cx, &batch.input_ids, b, dropout.as_mut())?;
    let dn = model.denoiser(cx, e_s, &batch.input_ids, b);

    // Positions whose augmented view still has a visible item at or before them.
    let mut cross = None;
    if terms.cross_view {
        let aug = &batch.augmented_input_ids;
        let (mut idx, mut flat) = (Vec::new(), Vec::new());
        for (i, &p) in positions.iter().enumerate() {
            let row = p - p % l;
            if aug[row..=p].iter().any(|&x| x != PAD) {
                idx.push(i);
                flat.push(p);
            }
        }
        if idx.len() >= 2 {
            let e_aug = model.encode_sequence(cx, aug, b, dropout.as_mut())?;
            let dn_aug = model.denoiser(cx, e_aug, aug, b);
            let cross_groups: Vec<usize> = flat.iter().map(|&p| p / l).collect();
            cross = Some((dn_aug, idx, flat, cross_groups));
        }
    }

    let table = cx.p(ITEM_EMB);
    let x0 = cx.g.gather(table, &targets);
    let (steps, factor) = steps_for_batch(cfg, &mut rngs.diffusion);
    let deterministic = !cfg.denoising;
    let mut per_step = Vec::with_capacity(steps.len());
    let mut root: Option<Var> = None;
    for &t in &steps {
        let mu = dn.mean(&mut cx.g, t)?;
        let mu = cx.g.gather(mu, &positions);
        let x_hat =
            sample_prediction(&mut cx.g, mu, t, schedule, &mut rngs.prediction, deterministic, cfg.noise_scale_mode)?;
        let x_t = diffuse(&mut cx.g, x0, t, schedule, &mut rngs.diffusion, !cfg.diffusion)?;

        let mut parts: Vec<(Var, f64)> = Vec::new();
        let mut loss = StepLoss { t, ..Default::default() };
        if terms.cross_divergence {
            let negs: Vec<usize> = positions
                .iter()
                .map(|&p| sample_negative(&mut rngs.negatives, model.config().item_count, &batch.histories[p / l]))
                .collect();
            let n0 = cx.g.gather(table, &negs);
            let n_t = diffuse(&mut cx.g, n0, t, schedule, &mut rngs.diffusion, !cfg.diffusion)?;
            let v = cross_divergence(&mut cx.g, x_hat, x_t, n_t)?;
            loss.cd = cx.g.value(v).item();
            parts.push((v, 1.0));
        } else if terms.mse {
            let v = squared_error(&mut cx.g, x_hat, x_t)?;
            loss.cd = cx.g.value(v).item();
            parts.push((v, 1.0));
        }
        if terms.in_view && positions.len() >= 2 {
            let v = info_nce(&mut cx.g, x_hat, x_t, cfg.tau, groups)?;
            loss.in_view = cx.g.value(v).item();
            parts.push((v, cfg.lambda));
        }
        if let Some((dn_aug, idx, flat, cross_groups)) = &cross {
            let mu_aug = dn_aug.mean(&mut cx.g, t)?;
            let mu_aug = cx.g.gather(mu_aug, flat);
            let x_aug = sample_prediction(
                &mut cx.g,
                mu_aug,
                t,
                schedule,
                &mut rngs.prediction,
                deterministic,
                cfg.noise_scale_mode,
            )?;
            let anchors = cx.g.gather(x_hat, idx);
            let g = (cfg.negative_scope == NegativeScope::Sequence).then_some(cross_groups.as_slice());
            let v = info_nce(&mut cx.g, anchors, x_aug, cfg.tau, g)?;
            loss.cross_view = cx.g.value(v).item();
            parts.push((v, cfg.lambda));
        }

        let w = step_weight(t, cfg.steps, terms.rescale) * factor;
        for (v, c) in parts {
            let scaled = cx.g.scale(v, w * c);
            root = Some(match root {
                Some(r) => cx.g.add(r, scaled),
                None => scaled,
            });
        }
        per_step.push(loss);
    }

    let mut breakdown = total_loss(&per_step, cfg.steps, cfg.lambda, cfg.tau, terms)?;
    if factor != 1.0 {
        breakdown.weights.iter_mut().for_each(|w| *w *= factor);
        breakdown.total = (0..breakdown.per_step.len()).map(|i| breakdown.step_total(i)).sum();
    }
    let root = match root {
        Some(r) => r,
        None => {
            // Every term switched off: a zero objective that still touches the tape.
            let z = cx.g.scale(x0, 0.0);
            cx.g.sum(z)
        }
    };
    Ok((root, breakdown))
}

/// Loss and parameter gradients (aligned with the store's slots) for one
/// batch, without updating anything.
pub fn loss_and_gradients(
    model: &Model,
    batch: &PaddedBatch,
    schedule: &DiffusionSchedule,
    cfg: &TrainConfig,
    rngs: &mut StepRngs,
) -> Result<(LossBreakdown, Vec<Tensor>)> {
    let mut cx = Ctx::new(model.params(), true);
    let (root, breakdown) = batch_loss(model, &mut cx, batch, schedule, cfg, rngs, true)?;
    let mut grads = cx.g.backward(root);
    let out = cx
        .bound()
        .iter()
        .zip(model.params().tensors())
        .map(|(v, p)| v.and_then(|v| grads.take(v)).unwrap_or_else(|| Tensor::zeros(p.shape().to_vec())))
        .collect();
    Ok((breakdown, out))
}

fn zero_pad_row(t: &mut Tensor) {
    t.row_mut(PAD).iter_mut().for_each(|v| *v = 0.0);
}

/// One optimizer step: clipped gradients, Adam update, pad row kept at zero.
pub fn train_step(
    model: &mut Model,
    adam: &mut Adam,
    batch: &PaddedBatch,
    schedule: &DiffusionSchedule,
    cfg: &TrainConfig,
    rngs: &mut StepRngs,
) -> Result<LossBreakdown> {
    let (breakdown, mut grads) = loss_and_gradients(model, batch, schedule, cfg, rngs)?;
    let slot = model.params().slot(ITEM_EMB).expect("item table");
    zero_pad_row(&mut grads[slot]);
    clip_global_norm(&mut grads, cfg.grad_clip);
    adam.update(model.params_mut(), &grads);
    zero_pad_row(&mut model.params_mut().tensors_mut()[slot]);
    Ok(breakdown)
}

/// Stops once the metric has failed to improve for more than `patience`
/// consecutive epochs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: Option<f64>,
    pub best_epoch: usize,
    pub since_improvement: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self { patience, best: None, best_epoch: 0, since_improvement: 0 }
    }

    /// Records `metric` for `epoch`; returns whether it is a new best.
    pub fn observe(&mut self, epoch: usize, metric: f64) -> bool {
        if self.best.is_none_or(|b| metric > b) {
            self.best = Some(metric);
            self.best_epoch = epoch;
            self.since_improvement = 0;
            true
        } else {
            self.since_improvement += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.since_improvement > self.patience
    }
}

/// Mean losses over one epoch's batches.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub batches: usize,
    pub mean_total: f64,
    /// Per-step components averaged over batches (steps never drawn are absent).
    pub per_step: Vec<StepLoss>,
    pub valid_mrr: f64,
    pub improved: bool,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_valid_metric: f64,
    pub loss_history: Vec<EpochLog>,
    pub wall_time: Duration,
}

/// Everything needed to continue training exactly where it stopped.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub config: TrainConfig,
    pub model_config: ModelConfig,
    pub params: ParamStore,
    pub adam: Adam,
    /// Completed epochs.
    pub epoch: usize,
    pub stopping: EarlyStopping,
    pub best_params: Option<ParamStore>,
}

pub struct Trainer<'a> {
    sequences: &'a [InteractionSequence],
    trainable: Vec<usize>,
    schedule: DiffusionSchedule,
    model: Model,
    state: TrainState,
}

impl<'a> Trainer<'a> {
    /// Fresh model and optimizer seeded from `cfg.seed`.
    pub fn new(cfg: TrainConfig, sequences: &'a [InteractionSequence], item_count: usize) -> Result<Self> {
        cfg.validate()?;
        let model_config = ModelConfig::from_train(&cfg, item_count);
        let model = Model::new(model_config, &mut stream_rng(cfg.seed, 0, 0, Stream::Init))?;
        let state = TrainState {
            adam: Adam::new(cfg.learning_rate, model.params()),
            params: model.params().clone(),
            model_config,
            stopping: EarlyStopping::new(cfg.patience),
            config: cfg,
            epoch: 0,
            best_params: None,
        };
        Self::from_state(state, sequences)
    }

    /// Resumes from a saved state.
    pub fn from_state(state: TrainState, sequences: &'a [InteractionSequence]) -> Result<Self> {
        state.config.validate()?;
        if let Some(bad) = sequences.iter().flat_map(|s| &s.items).find(|&&i| i == PAD || i > state.model_config.item_count) {
            return Err(Error::IndexOutOfRange { index: *bad, limit: state.model_config.item_count });
        }
        let trainable: Vec<usize> = (0..sequences.len()).filter(|&i| sequences[i].is_trainable()).collect();
        if trainable.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let model = Model::from_params(state.model_config, state.params.clone())?;
        Ok(Self { sequences, trainable, schedule: schedule_for(&state.config)?, model, state })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn schedule(&self) -> &DiffusionSchedule {
        &self.schedule
    }

    /// Snapshot of the current state (parameters synced from the model).
    pub fn state(&self) -> TrainState {
        let mut s = self.state.clone();
        s.params = self.model.params().clone();
        s
    }

    pub fn is_finished(&self) -> bool {
        self.state.stopping.should_stop() || self.state.epoch >= self.state.config.max_epochs
    }

    /// Batch `index` of epoch `epoch` (1-based), augmented when the variant
    /// needs a second view.
    pub fn batch(&self, epoch: usize, index: usize) -> Result<PaddedBatch> {
        let cfg = &self.state.config;
        let mut order = self.trainable.clone();
        order.shuffle(&mut stream_rng(cfg.seed, epoch as u64, 0, Stream::Shuffle));
        let chunk = order.chunks(cfg.batch_size).nth(index).ok_or(Error::EmptyBatch)?;
        let seqs: Vec<&InteractionSequence> = chunk.iter().map(|&i| &self.sequences[i]).collect();
        let mut rng = StepRngs::new(cfg.seed, epoch as u64, index as u64).augment;
        let aug = cfg.variant.terms().cross_view.then_some((&cfg.augment, &mut rng));
        PaddedBatch::build(&seqs, cfg.max_len, aug)
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.trainable.len().div_ceil(self.state.config.batch_size)
    }

    /// One optimizer step on batch `index` of `epoch`.
    pub fn step(&mut self, epoch: usize, index: usize) -> Result<LossBreakdown> {
        let batch = self.batch(epoch, index)?;
        let cfg = &self.state.config;
        let mut rngs = StepRngs::new(cfg.seed, epoch as u64, index as u64);
        train_step(&mut self.model, &mut self.state.adam, &batch, &self.schedule, cfg, &mut rngs)
    }

    /// Trains one epoch, then validates and updates early stopping.
    pub fn run_epoch(&mut self) -> Result<EpochLog> {
        let epoch = self.state.epoch + 1;
        let batches = self.batches_per_epoch();
        let mut total = 0.0;
        let mut sums: Vec<(StepLoss, usize)> = vec![(StepLoss::default(), 0); self.state.config.steps + 1];
        for i in 0..batches {
            let b = self.step(epoch, i)?;
            total += b.total;
            for s in &b.per_step {
                let (acc, n) = &mut sums[s.t];
                acc.cd += s.cd;
                acc.in_view += s.in_view;
                acc.cross_view += s.cross_view;
                *n += 1;
            }
        }
        let per_step = sums
            .into_iter()
            .enumerate()
            .filter(|(_, (_, n))| *n > 0)
            .map(|(t, (s, n))| {
                let n = n as f64;
                StepLoss { t, cd: s.cd / n, in_view: s.in_view / n, cross_view: s.cross_view / n }
            })
            .collect();
        let valid_mrr = eval::validation_mrr(&self.model, self.sequences, self.state.config.t_infer)?;
        let improved = self.state.stopping.observe(epoch, valid_mrr);
        if improved {
            self.state.best_params = Some(self.model.params().clone());
        }
        self.state.epoch = epoch;
        Ok(EpochLog { epoch, batches, mean_total: total / batches as f64, per_step, valid_mrr, improved })
    }

    /// Trains until early stopping or `max_epochs`, calling `on_epoch` after
    /// each epoch, and returns the best model seen.
    pub fn fit(mut self, mut on_epoch: impl FnMut(&EpochLog, &Trainer) -> Result<()>) -> Result<(Model, TrainReport)> {
        let start = Instant::now();
        let mut history = Vec::new();
        while !self.is_finished() {
            let log = self.run_epoch()?;
            log::info!(
                "epoch {} loss {:.5} valid_mrr {:.5}{}",
                log.epoch,
                log.mean_total,
                log.valid_mrr,
                if log.improved { " *" } else { "" }
            );
            on_epoch(&log, &self)?;
            history.push(log);
        }
        let stopping = &self.state.stopping;
        let report = TrainReport {
            epochs_run: self.state.epoch,
            best_epoch: stopping.best_epoch,
            best_valid_metric: stopping.best.unwrap_or(0.0),
            loss_history: history,
            wall_time: start.elapsed(),
        };
        let model = match self.state.best_params.take() {
            Some(p) => Model::from_params(self.state.model_config, p)?,
            None => self.model,
        };
        Ok((model, report))
    }
}

/// Trains a fresh model on `sequences` with no per-epoch hook.
pub fn fit(cfg: TrainConfig, sequences: &[InteractionSequence], item_count: usize) -> Result<(Model, TrainReport)> {
    Trainer::new(cfg, sequences, item_count)?.fit(|_, _| Ok(()))
}
