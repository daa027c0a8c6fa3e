//! SGD training of the projectors on the combined recognition and
//! disentanglement objective.

mod checkpoint;
mod log;

use serde::{Deserialize, Serialize};

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use log::{EpochRecord, LogRecord, StepRecord, TrainLog};

use crate::aggregation::{probabilities_on_tape, DEFAULT_LOGIT_SCALE};
use crate::diffmath::{BatchNormState, ColumnStats, DenseArray, NormMode, Scalar, Tape, Var};
use crate::error::{Error, Result};
use crate::evaluation::mfi_statistic;
use crate::losses::{
    asl_on_tape, combined_loss, combined_on_tape, mfi_on_tape, similarity_on_tape, LossConfig,
};
use crate::projectors::{
    image_forward, init_projectors, project_text_rows, text_forward, FeatureGrid, ParamVars,
    PoolingOrder, ProjectorParams, TextBank, DEFAULT_HIDDEN_DIM, DEFAULT_PROJECTED_DIM,
};
use crate::rng::XorShift64Star;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr0: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub loss: LossConfig,
    pub logit_scale: f64,
    pub shuffle: bool,
    pub pooling_order: PoolingOrder,
    /// Heavy-ball momentum; 0 is plain SGD.
    pub momentum: f64,
    pub hidden: usize,
    pub d_prime: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 0.002,
            epochs: 50,
            batch_size: 32,
            seed: 0,
            loss: LossConfig::default(),
            logit_scale: DEFAULT_LOGIT_SCALE,
            shuffle: true,
            pooling_order: PoolingOrder::ProjectThenPool,
            momentum: 0.0,
            hidden: DEFAULT_HIDDEN_DIM,
            d_prime: DEFAULT_PROJECTED_DIM,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        // A zero rate is allowed: it yields a frozen run, useful as a baseline.
        if !(self.lr0 >= 0.0 && self.lr0.is_finite()) {
            return bad(format!("lr0 must be finite and ≥ 0, got {}", self.lr0));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be ≥ 1".into());
        }
        if !(self.logit_scale > 0.0 && self.logit_scale.is_finite()) {
            return bad(format!("logit_scale must be > 0, got {}", self.logit_scale));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            ));
        }
        if self.hidden == 0 || self.d_prime == 0 {
            return bad("projector dimensions must be ≥ 1".into());
        }
        self.loss.validate()
    }

    pub fn steps_per_epoch(&self, samples: usize) -> usize {
        samples.div_ceil(self.batch_size)
    }
}

/// Single-cycle cosine annealing from `lr0` at step 0 to 0 at `total_steps`.
pub fn cosine_lr(step: usize, total_steps: usize, lr0: f64) -> Result<f64> {
    if total_steps == 0 || step > total_steps {
        return Err(Error::OutOfRange(format!(
            "step {step} outside schedule of {total_steps} steps"
        )));
    }
    let t = step as f64 / total_steps as f64;
    Ok(lr0 * 0.5 * (1.0 + (std::f64::consts::PI * t).cos()))
}

/// Sample order of an epoch, a pure function of `(seed, epoch)`.
pub fn epoch_order(samples: usize, seed: u64, epoch: usize, shuffle: bool) -> Vec<usize> {
    let mut order: Vec<usize> = (0..samples).collect();
    if shuffle {
        XorShift64Star::derive(seed, epoch as u64).shuffle(&mut order);
    }
    order
}

/// Handles into a batch objective built on a tape.
pub struct BatchGraph {
    pub total: Var,
    pub asl: Var,
    pub mfi: Var,
    /// Hidden-layer statistics of the text batch.
    pub text_stats: Option<ColumnStats>,
}

/// Loss values of one batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatchLoss {
    pub asl: f64,
    pub mfi: f64,
    pub total: f64,
}

/// Builds the batch objective: text projection in train mode, MFI over its
/// similarity matrix, image projection, pooled class probabilities, ASL, and
/// `asl + alpha · mfi`.
pub fn batch_objective<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &ParamVars,
    bn: &BatchNormState<T>,
    text_rows: Var,
    grids: &[&FeatureGrid],
    config: &TrainConfig,
) -> Result<BatchGraph> {
    let (text, text_stats) = text_forward(tape, vars, bn, text_rows, NormMode::Train)?;
    let s = similarity_on_tape(
        tape,
        text,
        config.loss.gram_axis,
        config.loss.bn_before_gram,
    )?;
    let mfi = mfi_on_tape(tape, s, config.loss.lambda)?;

    let d = tape.value(text_rows).shape()[1];
    let mut rows: Vec<T> = Vec::new();
    let mut segments = Vec::with_capacity(grids.len());
    let mut labels = Vec::new();
    for g in grids {
        if g.channels != d {
            return Err(Error::dim(format!(
                "grid {} has {} channels, text bank has {d}",
                g.image_id, g.channels
            )));
        }
        match config.pooling_order {
            PoolingOrder::ProjectThenPool => {
                rows.extend(g.values.iter().map(|&v| T::cast(v as f64)));
                segments.push(g.locations());
            }
            PoolingOrder::PoolThenProject => {
                rows.extend(g.mean_pooled().values.iter().map(|&v| T::cast(v as f64)));
                segments.push(1);
            }
        }
        labels.extend_from_slice(&g.labels);
    }
    let total_rows = segments.iter().sum();
    let x = tape.constant(DenseArray::new(vec![total_rows, d], rows)?);
    let z = image_forward(tape, vars, x)?;
    let probs = probabilities_on_tape(tape, z, text, &segments, config.logit_scale)?;
    let asl = asl_on_tape(tape, probs, &labels, &config.loss.asl())?;
    let total = combined_on_tape(tape, asl, mfi, config.loss.alpha)?;
    Ok(BatchGraph {
        total,
        asl,
        mfi,
        text_stats,
    })
}

fn loss_values<T: Scalar>(tape: &Tape<T>, g: &BatchGraph, alpha: f64) -> Result<BatchLoss> {
    let asl = tape.scalar(g.asl).widen();
    let mfi = tape.scalar(g.mfi).widen();
    let total = combined_loss(asl, mfi, alpha);
    if !total.is_finite() {
        return Err(Error::Degenerate(format!(
            "non-finite loss (asl {asl}, mfi {mfi})"
        )));
    }
    Ok(BatchLoss { asl, mfi, total })
}

/// Loss of `params` on one batch, exactly as the trainer computes it.
pub fn evaluate_batch_loss(
    params: &ProjectorParams,
    bank: &TextBank,
    grids: &[&FeatureGrid],
    config: &TrainConfig,
) -> Result<BatchLoss> {
    let mut tape = Tape::new();
    let vars = params.register_frozen(&mut tape);
    let text = tape.constant(bank.stacked());
    let g = batch_objective(&mut tape, &vars, &params.text_bn, text, grids, config)?;
    loss_values(&tape, &g, config.loss.alpha)
}

/// Step-by-step training driver.
pub struct Trainer<'a> {
    data: &'a [FeatureGrid],
    text_rows: DenseArray,
    n_classes: usize,
    config: TrainConfig,
    params: ProjectorParams,
    velocity: Vec<Vec<f64>>,
    total_steps: usize,
    step: usize,
    epoch: usize,
    cursor: usize,
    order: Vec<usize>,
    log: TrainLog,
}

impl<'a> Trainer<'a> {
    pub fn new(
        data: &'a [FeatureGrid],
        bank: &TextBank,
        config: &TrainConfig,
        init: ProjectorParams,
    ) -> Result<Self> {
        config.validate()?;
        if data.is_empty() {
            return Err(Error::Degenerate("training set is empty".into()));
        }
        if (init.d(), init.hidden(), init.d_prime()) != (bank.dim(), config.hidden, config.d_prime)
        {
            return Err(Error::dim(format!(
                "projector {}→{}→{} does not match bank width {} and config {}→{}",
                init.d(),
                init.hidden(),
                init.d_prime(),
                bank.dim(),
                config.hidden,
                config.d_prime
            )));
        }
        for g in data {
            if g.channels != bank.dim() || g.labels.len() != bank.n_classes() {
                return Err(Error::dim(format!(
                    "record {} has d={} N={}, text bank has d={} N={}",
                    g.image_id,
                    g.channels,
                    g.labels.len(),
                    bank.dim(),
                    bank.n_classes()
                )));
            }
        }
        let velocity = init
            .trainable()
            .iter()
            .map(|t| vec![0.0; t.len()])
            .collect();
        let mut trainer = Self {
            data,
            text_rows: bank.stacked(),
            n_classes: bank.n_classes(),
            config: config.clone(),
            params: init,
            velocity,
            total_steps: config.epochs * config.steps_per_epoch(data.len()),
            step: 0,
            epoch: 1,
            cursor: 0,
            order: epoch_order(data.len(), config.seed, 1, config.shuffle),
            log: TrainLog::default(),
        };
        trainer.record_epoch(0)?;
        Ok(trainer)
    }

    pub fn params(&self) -> &ProjectorParams {
        &self.params
    }

    pub fn log(&self) -> &TrainLog {
        &self.log
    }

    pub fn total_steps(&self) -> usize {
        self.total_steps
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    pub fn is_done(&self) -> bool {
        self.step == self.total_steps
    }

    /// Sample indices of the next batch.
    pub fn next_batch(&self) -> Option<&[usize]> {
        if self.is_done() {
            return None;
        }
        let end = (self.cursor + self.config.batch_size).min(self.data.len());
        Some(&self.order[self.cursor..end])
    }

    /// MFI statistic of the projected positive prompts, text BatchNorm in
    /// train mode.
    pub fn text_mfi_statistic(&self) -> Result<f64> {
        let rows = project_text_rows(&self.text_rows, &self.params, NormMode::Train)?;
        let n = self.n_classes;
        let d = rows.shape()[1];
        let pos = DenseArray::new(vec![n, d], rows.values()[..n * d].to_vec())?;
        mfi_statistic(&pos)
    }

    fn record_epoch(&mut self, epoch: usize) -> Result<()> {
        let mfi_statistic = self.text_mfi_statistic()?;
        self.log.records.push(LogRecord::Epoch(EpochRecord {
            epoch,
            mfi_statistic,
        }));
        Ok(())
    }

    /// Runs one SGD step; `None` once the schedule is exhausted.
    pub fn step(&mut self) -> Result<Option<StepRecord>> {
        let Some(batch) = self.next_batch() else {
            return Ok(None);
        };
        let grids: Vec<&FeatureGrid> = batch.iter().map(|&i| &self.data[i]).collect();
        let batch_len = grids.len();
        let lr = cosine_lr(self.step, self.total_steps, self.config.lr0)?;

        let mut tape = Tape::new();
        let vars = self.params.register(&mut tape);
        let text = tape.constant(self.text_rows.clone());
        let graph = batch_objective(
            &mut tape,
            &vars,
            &self.params.text_bn,
            text,
            &grids,
            &self.config,
        )?;
        let loss = loss_values(&tape, &graph, self.config.loss.alpha)?;
        tape.backward(graph.total)?;

        let momentum = self.config.momentum;
        for ((dst, var), vel) in self
            .params
            .trainable_mut()
            .into_iter()
            .zip(vars.vars)
            .zip(&mut self.velocity)
        {
            let Some(grad) = tape.grad(var) else { continue };
            for ((p, &g), v) in dst.iter_mut().zip(grad).zip(vel.iter_mut()) {
                let dir = if momentum == 0.0 {
                    g as f64
                } else {
                    *v = momentum * *v + g as f64;
                    *v
                };
                *p = (*p as f64 - lr * dir) as f32;
            }
        }
        if let Some(stats) = &graph.text_stats {
            self.params
                .text_bn
                .update_running(&stats.mean, &stats.unbiased_var);
        }
        if !self.params.is_finite() {
            return Err(Error::Degenerate(format!(
                "parameters diverged at step {}",
                self.step
            )));
        }

        let record = StepRecord {
            step: self.step,
            epoch: self.epoch,
            lr,
            asl: loss.asl,
            mfi: loss.mfi,
            total: loss.total,
        };
        self.log.records.push(LogRecord::Step(record));
        self.step += 1;
        self.cursor += batch_len;
        if self.cursor == self.data.len() {
            self.record_epoch(self.epoch)?;
            self.epoch += 1;
            self.cursor = 0;
            self.order = epoch_order(
                self.data.len(),
                self.config.seed,
                self.epoch,
                self.config.shuffle,
            );
        }
        Ok(Some(record))
    }

    pub fn run(mut self) -> Result<(ProjectorParams, TrainLog)> {
        while self.step()?.is_some() {}
        Ok((self.params, self.log))
    }
}

/// Trains from `init_projectors(bank width, hidden, d′, seed)`.
pub fn train(
    data: &[FeatureGrid],
    bank: &TextBank,
    config: &TrainConfig,
) -> Result<(ProjectorParams, TrainLog)> {
    let init = init_projectors(bank.dim(), config.hidden, config.d_prime, config.seed)?;
    train_with_init(data, bank, config, init)
}

pub fn train_with_init(
    data: &[FeatureGrid],
    bank: &TextBank,
    config: &TrainConfig,
    init: ProjectorParams,
) -> Result<(ProjectorParams, TrainLog)> {
    Trainer::new(data, bank, config, init)?.run()
}
