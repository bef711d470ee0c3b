use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::matching::LossWeights;
use crate::prompts::Augment;
use crate::synthworld::ProposalMode;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    /// Heavy-ball SGD with `momentum`.
    Sgd,
    /// Adam with decoupled `weight_decay`; `momentum` is unused.
    AdamW,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub optimizer: Optimizer,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub grad_clip: f64,
    pub epochs: usize,
    pub episodes_per_epoch: usize,
    /// First epoch trained at `lr × 0.1`.
    pub lr_decay_epoch: usize,
    pub batch_size: usize,
    /// Label-free optimizer steps before supervised training.
    pub pretrain_steps: usize,
    /// A pre-training step follows every `n`-th supervised step; 0 disables.
    pub pretrain_interleave: usize,
    pub pretrain_proposals: usize,
    pub proposal_mode: ProposalMode,
    pub max_classes: usize,
    pub max_shots: usize,
    pub include_absent: bool,
    pub jitter: bool,
    pub augment: Augment,
    pub loss: LossWeights,
    /// Also supervise every intermediate decoder layer through the shared heads.
    pub aux_loss: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            optimizer: Optimizer::AdamW,
            lr: 3e-4,
            momentum: 0.9,
            weight_decay: 1e-4,
            grad_clip: 1.0,
            epochs: 20,
            episodes_per_epoch: 500,
            lr_decay_epoch: 14,
            batch_size: 4,
            pretrain_steps: 2000,
            pretrain_interleave: 8,
            pretrain_proposals: 3,
            proposal_mode: ProposalMode::Random,
            max_classes: 3,
            max_shots: 2,
            include_absent: true,
            jitter: false,
            augment: Augment::default(),
            loss: LossWeights::default(),
            aux_loss: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let err = |m: String| Err(TrainError::Config(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return err(format!("lr must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return err(format!("momentum {} outside [0, 1)", self.momentum));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return err(format!("weight_decay {} must be non-negative", self.weight_decay));
        }
        if self.grad_clip.is_nan() || self.grad_clip < 0.0 {
            return err(format!("grad_clip {} must be non-negative", self.grad_clip));
        }
        if self.epochs > 0 && self.lr_decay_epoch >= self.epochs {
            return err(format!(
                "lr_decay_epoch {} must come before epochs {}",
                self.lr_decay_epoch, self.epochs
            ));
        }
        if self.batch_size == 0 {
            return err("batch_size must be positive".into());
        }
        if self.episodes_per_epoch < self.batch_size && self.epochs > 0 {
            return err("episodes_per_epoch must hold at least one batch".into());
        }
        if self.pretrain_proposals == 0 || self.max_classes == 0 || self.max_shots == 0 {
            return err("pretrain_proposals, max_classes and max_shots must be positive".into());
        }
        for (name, p) in [
            ("augment.p_color", self.augment.p_color),
            ("augment.p_gray", self.augment.p_gray),
            ("augment.p_blur", self.augment.p_blur),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return err(format!("{name} = {p} is not a probability"));
            }
        }
        let w = &self.loss;
        if [w.class, w.l1, w.giou, w.noobj].iter().any(|v| v.is_nan() || *v < 0.0) {
            return err("loss weights must be non-negative".into());
        }
        Ok(())
    }

    /// Supervised optimizer steps per epoch.
    pub fn steps_per_epoch(&self) -> usize {
        self.episodes_per_epoch / self.batch_size
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch >= self.lr_decay_epoch {
            self.lr * 0.1
        } else {
            self.lr
        }
    }
}
