//! Training loop: shuffled mini-batches, Adam with the warmup schedule, a
//! checkpoint per epoch, and bit-exact resume from any epoch boundary.

use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{adam_step, AdamState, LrSchedule};
use crate::preprocess::SbrExample;

use super::{Forward, MercatranModel, ModelError, TrainState};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Total epochs; a resumed trainer runs only the remainder.
    pub epochs: u32,
    pub batch_size: usize,
    pub seed: u64,
    pub dropout: f64,
    pub schedule: LrSchedule,
    /// Directory for per-epoch checkpoints; `None` trains in memory only.
    pub checkpoint_dir: Option<PathBuf>,
}

impl TrainConfig {
    pub fn new(model_dim: usize) -> TrainConfig {
        TrainConfig {
            epochs: 10,
            batch_size: 256,
            seed: 42,
            dropout: 0.1,
            schedule: LrSchedule::new(1.0, model_dim),
            checkpoint_dir: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: u32,
    pub steps: u64,
    pub mean_loss: f64,
}

fn mix(seed: u64, salt: u64) -> u64 {
    let mut x = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x ^ (x >> 31)
}

pub struct Trainer {
    pub model: MercatranModel<f32>,
    pub opt: AdamState<f32>,
    pub next_epoch: u32,
    pub global_step: u64,
    /// Vocab echoed into checkpoints so serving stays self-contained.
    pub vocab: Option<crate::preprocess::Vocab>,
}

impl Trainer {
    pub fn new(model: MercatranModel<f32>) -> Trainer {
        let opt = AdamState::new(model.params.tensors());
        Trainer {
            model,
            opt,
            next_epoch: 0,
            global_step: 0,
            vocab: None,
        }
    }

    pub fn with_vocab(mut self, vocab: crate::preprocess::Vocab) -> Trainer {
        self.vocab = Some(vocab);
        self
    }

    /// Restores model weights, optimizer moments, and progress counters from
    /// a checkpoint that was saved with train state.
    pub fn resume(path: &std::path::Path) -> Result<Trainer, ModelError> {
        let (model, vocab, state) = MercatranModel::<f32>::load(path)?;
        let state = state.ok_or_else(|| {
            ModelError::ConfigMismatch("checkpoint has no train state to resume from".into())
        })?;
        Ok(Trainer {
            model,
            opt: state.opt,
            next_epoch: state.next_epoch,
            global_step: state.global_step,
            vocab,
        })
    }

    /// Runs epochs `next_epoch..cfg.epochs`. Batch order reshuffles from a
    /// per-epoch stream and dropout masks key on the global step, so an
    /// interrupted run resumed from its checkpoint reproduces an
    /// uninterrupted run exactly.
    pub fn train(
        &mut self,
        examples: &[SbrExample],
        cfg: &TrainConfig,
    ) -> Result<Vec<EpochLog>, ModelError> {
        if examples.is_empty() {
            return Err(ModelError::BatchTooSmall(0));
        }
        if let Some(dir) = &cfg.checkpoint_dir {
            std::fs::create_dir_all(dir).map_err(crate::nn::CheckpointError::Io)?;
        }
        let mut log = Vec::new();
        while self.next_epoch < cfg.epochs {
            let epoch = self.next_epoch;
            let mut order: Vec<usize> = (0..examples.len()).collect();
            let mut shuffle_rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, 0x5E5E ^ epoch as u64));
            order.shuffle(&mut shuffle_rng);

            let mut loss_sum = 0.0f64;
            let mut steps_this_epoch = 0u64;
            for chunk in order.chunks(cfg.batch_size.max(1)) {
                if chunk.len() < 2 && examples.len() > 1 {
                    continue; // a 1-example remainder has no in-batch negatives
                }
                let batch: Vec<SbrExample> =
                    chunk.iter().map(|&i| examples[i].clone()).collect();
                self.global_step += 1;
                let mask_seed = mix(cfg.seed, 0xD20 ^ self.global_step);
                let mut tape = crate::nn::Tape::new();
                let mut fwd = Forward::training(&mut tape, &self.model, cfg.dropout, mask_seed);
                let loss = fwd.training_loss(&batch)?;
                loss_sum += f64::from(fwd.tape.value(loss).scalar());
                steps_this_epoch += 1;
                let grads = fwd.grads(loss);
                let lr = cfg.schedule.lr(self.global_step, epoch) as f32;
                adam_step(self.model.params.tensors_mut(), &grads, &mut self.opt, lr)?;
            }

            self.next_epoch = epoch + 1;
            log.push(EpochLog {
                epoch,
                steps: steps_this_epoch,
                mean_loss: loss_sum / steps_this_epoch.max(1) as f64,
            });

            if let Some(dir) = &cfg.checkpoint_dir {
                self.checkpoint(&dir.join(format!("epoch_{:05}.mtrn", epoch + 1)))?;
                self.checkpoint(&dir.join("best.mtrn"))?;
            }
        }
        Ok(log)
    }

    pub fn checkpoint(&self, path: &std::path::Path) -> Result<(), ModelError> {
        let state = TrainState {
            opt: self.opt.clone(),
            next_epoch: self.next_epoch,
            global_step: self.global_step,
        };
        self.model.save(path, self.vocab.as_ref(), Some(&state))
    }
}

/// One-call training from a fresh model, per the pipeline CLI.
pub fn train(
    model: MercatranModel<f32>,
    examples: &[SbrExample],
    cfg: &TrainConfig,
) -> Result<(Trainer, Vec<EpochLog>), ModelError> {
    let mut trainer = Trainer::new(model);
    let log = trainer.train(examples, cfg)?;
    Ok((trainer, log))
}
