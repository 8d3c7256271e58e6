//! Training loop.
//!
//! One optimizer step consumes one batch. Everything random is derived from
//! the master seed and the step index (see [`crate::rng`]), and the batcher
//! is positioned by step, so a run restored from a checkpoint continues
//! exactly as the uninterrupted run would have.

use crate::batch::{batch_gradients, Boundaries};
use crate::checkpoint::Checkpoint;
use crate::config::{BoundaryKind, RunConfig};
use crate::data::Batcher;
use crate::error::Result;
use crate::model::Model;
use crate::objective::StepMetrics;
use crate::optim::{clip_global_norm, global_norm, AdamState};
use crate::policy::uniform_baseline_mask;
use crate::rng::{stream, Purpose};

/// Why a run ended.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopReason {
    /// `training_bytes` reached.
    Budget,
    /// The single pass over the data ended first.
    DataExhausted,
}

#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: RunConfig,
    pub model: Model,
    pub adam: AdamState,
    pub step: u64,
    pub bytes_seen: u64,
    baseline_mask: Vec<bool>,
}

impl Trainer {
    /// Fresh run; parameters are drawn from the master seed.
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let init_seed = rand::Rng::gen(&mut stream(config.train.seed, Purpose::Init, 0, 0));
        let model = Model::new(config.model.clone(), init_seed)?;
        Ok(Self::assemble(config, model, None, 0, 0))
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        let model = ckpt.model()?;
        Ok(Self::assemble(ckpt.config, model, Some(ckpt.adam), ckpt.step, ckpt.bytes_seen))
    }

    fn assemble(config: RunConfig, model: Model, adam: Option<AdamState>, step: u64, bytes_seen: u64) -> Self {
        let adam = adam.unwrap_or_else(|| AdamState::new(model.params()));
        let baseline_mask = uniform_baseline_mask(config.model.seq_len, config.model.target_rate);
        Self {
            config,
            model,
            adam,
            step,
            bytes_seen,
            baseline_mask,
        }
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            step: self.step,
            bytes_seen: self.bytes_seen,
            params: self.model.params().clone(),
            adam: self.adam.clone(),
        }
    }

    /// Batcher over `seqs` positioned at this trainer's step.
    pub fn batcher(&self, seqs: Vec<Vec<u8>>) -> Result<Batcher> {
        let t = &self.config.train;
        let mut b = Batcher::new(seqs, t.batch_size, self.config.model.seq_len, t.seed)?;
        b.seek(self.step as usize);
        Ok(b)
    }

    /// Gradient and update for one batch. A non-finite gradient aborts the
    /// step and leaves the parameters untouched.
    pub fn train_step(&mut self, batch: &crate::data::ByteBatch) -> Result<StepMetrics> {
        let t = &self.config.train;
        let boundaries = match t.boundaries {
            BoundaryKind::Learned => Boundaries::Learned,
            BoundaryKind::Uniform => Boundaries::Fixed(&self.baseline_mask),
        };
        let mut out = batch_gradients(&self.model, batch, boundaries, t.seed, self.step, t.micro_batch_rows())?;
        let grad_norm = if t.grad_clip > 0.0 {
            clip_global_norm(&mut out.grads, t.grad_clip)
        } else {
            global_norm(&out.grads)
        };
        let consumed = (batch.batch_size() * batch.seq_len()) as u64;
        let lr = t.schedule().lr_at(self.bytes_seen + consumed);
        self.adam.update(self.model.params_mut(), &out.grads, lr, &t.adam())?;
        self.step += 1;
        self.bytes_seen += consumed;
        Ok(StepMetrics {
            step: self.step,
            loss: out.report,
            mean_prob: out.mean_prob,
            rate: out.rate,
            grad_norm,
            lr,
        })
    }

    /// Steps until the byte budget is spent or the data runs out. `on_step`
    /// sees each step's metrics and the trainer after the update.
    pub fn run<F>(&mut self, batcher: &mut Batcher, mut on_step: F) -> Result<StopReason>
    where
        F: FnMut(&StepMetrics, &Trainer) -> Result<()>,
    {
        batcher.seek(self.step as usize);
        while self.bytes_seen < self.config.train.training_bytes {
            let Some(batch) = batcher.next() else {
                return Ok(StopReason::DataExhausted);
            };
            let metrics = self.train_step(&batch)?;
            on_step(&metrics, self)?;
        }
        Ok(StopReason::Budget)
    }
}
