//! Label-free pre-training on self-cropped proposals, then supervised
//! episodic training with the pre-training loss interleaved.

mod checkpoint;
mod config;

pub use checkpoint::{Checkpoint, RngState, MAGIC, VERSION};
pub use config::{Optimizer, TrainConfig};

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::Image;
use crate::matching::{match_predictions, set_loss, MatchError, Target};
use crate::model::{FsDetr, ModelConfig, ModelError};
use crate::ndgrad::{adamw_step, sgd_momentum_step, NdError, Tensor};
use crate::params::{ParamStore, Session};
use crate::prompts::{assign_pseudo_classes, crop_template, PromptError, TemplateImage};
use crate::rng::{component_rng, stream_rng, DetRng};
use crate::synthworld::{propose_patches, ClassSplit, Dataset, Episode, EpisodeSampler, SynthError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("config error: {0}")]
    Config(String),
    #[error("contamination: {0}")]
    Contamination(String),
    #[error("non-finite {what} at {phase} step {step}")]
    NonFinite { phase: &'static str, step: u64, what: &'static str },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("io error: {0}")]
    Io(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Match(#[from] MatchError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Nd(#[from] NdError),
}

/// Batch-averaged loss terms of one optimizer step.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub loss: f64,
    pub ce: f64,
    pub l1: f64,
    pub giou: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
}

impl StepStats {
    fn add(&mut self, o: &StepStats, w: f64) {
        self.loss += w * o.loss;
        self.ce += w * o.ce;
        self.l1 += w * o.l1;
        self.giou += w * o.giou;
    }
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub phase: String,
    pub epoch: usize,
    pub step: u64,
    pub steps: usize,
    pub loss: f64,
    pub ce: f64,
    pub l1: f64,
    pub giou: f64,
    pub lr: f64,
    pub wall_s: f64,
}

/// Model, parameters, optimizer state and stream counters.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: FsDetr,
    pub store: ParamStore<f32>,
    /// SGD momentum or Adam first moment.
    velocity: Vec<Vec<f32>>,
    /// Adam second moment; stays zero under SGD.
    second: Vec<Vec<f32>>,
    pub cfg: TrainConfig,
    pub classes: ClassSplit,
    pub rng: RngState,
}

/// Per-parameter gradients; `None` for parameters the graph never touched.
type Grads = Vec<Option<Vec<f32>>>;

struct EpisodeInput<'a> {
    image: &'a Image,
    templates: Vec<TemplateImage>,
    class_of_row: Vec<usize>,
    m: usize,
    targets: Vec<Target>,
}

impl Trainer {
    pub fn new(model_cfg: &ModelConfig, cfg: &TrainConfig, classes: &ClassSplit) -> Result<Self, TrainError> {
        cfg.validate()?;
        classes.validate().map_err(TrainError::Config)?;
        if cfg.max_classes > model_cfg.bank_size || cfg.pretrain_proposals > model_cfg.bank_size {
            return Err(TrainError::Config(format!(
                "max_classes {} and pretrain_proposals {} must not exceed bank_size {}",
                cfg.max_classes, cfg.pretrain_proposals, model_cfg.bank_size
            )));
        }
        let mut store = ParamStore::new();
        let model = FsDetr::new(&mut store, model_cfg, &mut component_rng(cfg.seed, "model.init"))?;
        let velocity: Vec<Vec<f32>> = store.iter().map(|p| vec![0.0; p.value.len()]).collect();
        Ok(Self {
            model,
            store,
            second: velocity.clone(),
            velocity,
            cfg: cfg.clone(),
            classes: classes.clone(),
            rng: RngState {
                seed: cfg.seed,
                ..RngState::default()
            },
        })
    }

    /// Rebuild the exact training state stored in `ck`.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, TrainError> {
        let mut t = Self::new(&ck.model, &ck.train, &ck.classes)?;
        t.load_params(ck)?;
        for (bufs, saved) in [(&mut t.velocity, &ck.velocity), (&mut t.second, &ck.second_moment)] {
            for (v, saved) in bufs.iter_mut().zip(saved) {
                if v.len() != saved.len() {
                    return Err(TrainError::Checkpoint("optimizer state size mismatch".into()));
                }
                v.copy_from_slice(saved.data());
            }
        }
        t.rng = ck.rng;
        Ok(t)
    }

    /// Copy parameter values by name; every model parameter must be present.
    pub fn load_params(&mut self, ck: &Checkpoint) -> Result<(), TrainError> {
        if ck.params.len() != self.store.len() {
            return Err(TrainError::Checkpoint(format!(
                "checkpoint holds {} tensors, model expects {}",
                ck.params.len(),
                self.store.len()
            )));
        }
        for (name, t) in &ck.params {
            let id = self
                .store
                .find(name)
                .ok_or_else(|| TrainError::Checkpoint(format!("unknown tensor {name}")))?;
            let dst = self.store.get_mut(id);
            if dst.shape() != t.shape() {
                return Err(TrainError::Checkpoint(format!(
                    "{name}: shape {:?} vs model {:?}",
                    t.shape(),
                    dst.shape()
                )));
            }
            dst.data_mut().copy_from_slice(t.data());
        }
        Ok(())
    }

    pub fn epoch(&self) -> usize {
        let spe = self.cfg.steps_per_epoch().max(1) as u64;
        (self.rng.step / spe) as usize
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.cfg.clone(),
            train: self.cfg.clone(),
            classes: self.classes.clone(),
            epoch: self.epoch(),
            rng: self.rng,
            params: self.store.iter().map(|p| (p.name.clone(), p.value.clone())).collect(),
            velocity: self
                .store
                .iter()
                .zip(&self.velocity)
                .map(|(p, v)| Tensor::new(p.value.shape(), v.clone()).expect("velocity matches parameter"))
                .collect(),
            second_moment: self
                .store
                .iter()
                .zip(&self.second)
                .map(|(p, v)| Tensor::new(p.value.shape(), v.clone()).expect("moment matches parameter"))
                .collect(),
        }
    }

    fn augment(&self, t: TemplateImage, rng: &mut DetRng) -> TemplateImage {
        self.cfg.augment.apply(&t, rng)
    }

    /// Forward, match, loss and backward for one episode; returns per-parameter gradients.
    fn episode_grads(&self, ep: &EpisodeInput, rng: DetRng) -> Result<(StepStats, Grads), TrainError> {
        let mut s = Session::new(&self.store, true, rng);
        let assignment = assign_pseudo_classes(ep.m, self.model.cfg.bank_size, &mut s.rng)?;
        let prompts = self.model.prompt(&mut s, &ep.templates, &ep.class_of_row, &assignment)?;
        let out = self.model.forward_with(&mut s, ep.image, &prompts, self.cfg.aux_loss)?;
        let mut objective = None;
        let mut last = None;
        // Each layer's predictions are matched on their own; the final layer comes last.
        for (logits, boxes) in out.aux.iter().copied().chain([(out.logits, out.boxes)]) {
            let probs = s.g.softmax(logits, 1)?;
            let assign = match_predictions(s.g.value(probs), s.g.value(boxes), &ep.targets, &self.cfg.loss)?;
            let loss = set_loss(&mut s.g, logits, boxes, &ep.targets, &assign, &self.cfg.loss)?;
            objective = Some(match objective {
                Some(acc) => s.g.add(acc, loss.total)?,
                None => loss.total,
            });
            last = Some(loss);
        }
        let (objective, loss) = (objective.expect("at least one layer"), last.expect("at least one layer"));
        // Logged terms describe the final layer, the one inference reads.
        let total = s.g.value(loss.total).data()[0] as f64;
        s.g.backward(objective)?;
        Ok((
            StepStats {
                loss: total,
                ce: loss.ce,
                l1: loss.l1,
                giou: loss.giou,
                grad_norm: 0.0,
            },
            s.grads(),
        ))
    }

    fn run_batch(&mut self, batch: &[(EpisodeInput, DetRng)], lr: f64, phase: &'static str, step: u64) -> Result<StepStats, TrainError> {
        let mut sum: Vec<Vec<f32>> = self.velocity.iter().map(|v| vec![0.0; v.len()]).collect();
        let mut stats = StepStats::default();
        let w = 1.0 / batch.len() as f64;
        for (ep, rng) in batch {
            let (st, grads) = self.episode_grads(ep, rng.clone())?;
            if !st.loss.is_finite() {
                return Err(TrainError::NonFinite { phase, step, what: "loss" });
            }
            stats.add(&st, w);
            for (acc, g) in sum.iter_mut().zip(grads) {
                if let Some(g) = g {
                    acc.iter_mut().zip(g).for_each(|(a, b)| *a += b);
                }
            }
        }
        let scale = w as f32;
        let mut norm2 = 0.0f64;
        for g in &mut sum {
            for v in g.iter_mut() {
                *v *= scale;
                norm2 += (*v as f64) * (*v as f64);
            }
        }
        let norm = norm2.sqrt();
        if !norm.is_finite() {
            return Err(TrainError::NonFinite { phase, step, what: "gradient" });
        }
        stats.grad_norm = norm;
        if self.cfg.grad_clip > 0.0 && norm > self.cfg.grad_clip {
            let c = (self.cfg.grad_clip / norm) as f32;
            sum.iter_mut().flatten().for_each(|v| *v *= c);
        }
        // Every optimizer step, either phase, advances Adam's clock.
        let t = self.rng.step + self.rng.pretrain_step + 1;
        let params = self.store.iter_mut().zip(&sum).zip(self.velocity.iter_mut().zip(&mut self.second));
        for ((p, g), (m, v)) in params {
            match self.cfg.optimizer {
                Optimizer::Sgd => sgd_momentum_step(p.value.data_mut(), g, m, lr, self.cfg.momentum),
                Optimizer::AdamW => adamw_step(p.value.data_mut(), g, m, v, t, lr, self.cfg.weight_decay),
            }
        }
        Ok(stats)
    }

    /// One label-free step: each scene in the batch is its own episode whose
    /// classes are random proposals cropped from that very scene.
    pub fn pretrain_step(&mut self, data: &Dataset) -> Result<StepStats, TrainError> {
        if data.is_empty() {
            return Err(TrainError::Config("pre-training needs at least one scene".into()));
        }
        let step = self.rng.pretrain_step;
        let mut rng = stream_rng(self.rng.seed, "pretrain.step", step);
        let size = self.model.cfg.template_size;
        let mut batch = Vec::with_capacity(self.cfg.batch_size);
        for _ in 0..self.cfg.batch_size {
            let scene = &data.scenes[rng.random_range(0..data.len())];
            let p = rng.random_range(1..=self.cfg.pretrain_proposals);
            let boxes = propose_patches(p, &mut rng, self.cfg.proposal_mode);
            let mut templates = Vec::with_capacity(p);
            for b in &boxes {
                let t = crop_template(&scene.image, b.to_xyxy(), size, &mut rng, false)?;
                templates.push(self.augment(t, &mut rng));
            }
            let targets = boxes.iter().enumerate().map(|(class, &bbox)| Target { class, bbox }).collect();
            let ep_rng = DetRng::from_rng(&mut rng);
            batch.push((
                EpisodeInput {
                    image: &scene.image,
                    templates,
                    class_of_row: (0..p).collect(),
                    m: p,
                    targets,
                },
                ep_rng,
            ));
        }
        let lr = self.cfg.lr_at(self.epoch());
        let stats = self.run_batch(&batch, lr, "pretrain", step)?;
        self.rng.pretrain_step += 1;
        Ok(stats)
    }

    /// Refuse any episode that touches a novel class.
    pub fn check_episode(&self, ep: &Episode) -> Result<(), TrainError> {
        let novel = &self.classes.novel;
        if let Some(c) = ep.classes.iter().find(|c| novel.contains(c)) {
            return Err(TrainError::Contamination(format!("novel class {c} in a supervised episode")));
        }
        if let Some(c) = ep.target.annotations.iter().map(|a| a.class).find(|c| novel.contains(c)) {
            return Err(TrainError::Contamination(format!("novel class {c} in a supervised target scene")));
        }
        Ok(())
    }

    /// One supervised step over `batch_size` base-class episodes.
    pub fn train_step(&mut self, sampler: &EpisodeSampler) -> Result<StepStats, TrainError> {
        let step = self.rng.step;
        let mut rng = stream_rng(self.rng.seed, "train.step", step);
        let bank = self.model.cfg.bank_size;
        let mut episodes = Vec::with_capacity(self.cfg.batch_size);
        for _ in 0..self.cfg.batch_size {
            let m = rng.random_range(1..=self.cfg.max_classes.min(bank));
            let k = rng.random_range(1..=self.cfg.max_shots);
            let ep = sampler.sample(m, k, self.cfg.include_absent, &mut rng)?;
            self.check_episode(&ep)?;
            episodes.push(ep);
        }
        let mut batch = Vec::with_capacity(episodes.len());
        for ep in &episodes {
            let (flat, class_of_row) = ep.flat_templates();
            let templates = flat.into_iter().map(|t| self.augment(t, &mut rng)).collect();
            let ep_rng = DetRng::from_rng(&mut rng);
            batch.push((
                EpisodeInput {
                    image: &ep.target.image,
                    templates,
                    class_of_row,
                    m: ep.m(),
                    targets: ep.targets.clone(),
                },
                ep_rng,
            ));
        }
        let lr = self.cfg.lr_at(self.epoch());
        let stats = self.run_batch(&batch, lr, "train", step)?;
        self.rng.step += 1;
        Ok(stats)
    }
}

/// Where `fit` writes its artefacts.
#[derive(Debug, Clone, Default)]
pub struct FitOutput {
    /// Receives `metrics.jsonl`, `epoch_NNN.fsdt` and `last.fsdt`.
    pub dir: Option<PathBuf>,
    /// Pre-training metrics are aggregated over this many steps.
    pub pretrain_log_every: usize,
    /// Halt once this many supervised steps have been taken.
    pub stop_at_step: Option<u64>,
}

impl FitOutput {
    pub fn in_dir(dir: impl Into<PathBuf>) -> Self {
        Self {
            dir: Some(dir.into()),
            pretrain_log_every: 100,
            stop_at_step: None,
        }
    }
}

fn append_metrics(dir: &Path, r: &MetricsRecord) -> Result<(), TrainError> {
    let path = dir.join("metrics.jsonl");
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&path)
        .map_err(|e| TrainError::Io(format!("{}: {e}", path.display())))?;
    let line = serde_json::to_string(r).map_err(|e| TrainError::Io(e.to_string()))?;
    writeln!(f, "{line}").map_err(|e| TrainError::Io(format!("{}: {e}", path.display())))
}

#[derive(Default)]
struct Running {
    sum: StepStats,
    n: usize,
}

impl Running {
    fn push(&mut self, s: &StepStats) {
        self.sum.add(s, 1.0);
        self.n += 1;
    }

    fn record(&mut self, phase: &str, t: &Trainer, wall: f64) -> MetricsRecord {
        let n = self.n.max(1) as f64;
        let r = MetricsRecord {
            phase: phase.into(),
            epoch: t.epoch(),
            step: if phase == "pretrain" { t.rng.pretrain_step } else { t.rng.step },
            steps: self.n,
            loss: self.sum.loss / n,
            ce: self.sum.ce / n,
            l1: self.sum.l1 / n,
            giou: self.sum.giou / n,
            lr: t.cfg.lr_at(t.epoch()),
            wall_s: wall,
        };
        *self = Running::default();
        r
    }
}

/// Run the remaining pre-training steps, then the remaining supervised epochs.
///
/// Supervised episodes come from `train` restricted to the base classes.
/// Every `pretrain_interleave`-th supervised step is followed by one
/// pre-training step. State is checkpointed at each epoch boundary; an error
/// leaves the last written checkpoint untouched.
pub fn fit(
    trainer: &mut Trainer,
    train: &Dataset,
    out: &FitOutput,
    mut on_record: impl FnMut(&MetricsRecord),
) -> Result<Checkpoint, TrainError> {
    if let Some(dir) = &out.dir {
        fs::create_dir_all(dir).map_err(|e| TrainError::Io(format!("{}: {e}", dir.display())))?;
    }
    let start = Instant::now();
    let emit = |r: MetricsRecord, on_record: &mut dyn FnMut(&MetricsRecord)| -> Result<(), TrainError> {
        if let Some(dir) = &out.dir {
            append_metrics(dir, &r)?;
        }
        on_record(&r);
        Ok(())
    };
    let cfg = trainer.cfg.clone();

    let mut run = Running::default();
    let every = out.pretrain_log_every.max(1);
    while trainer.rng.step == 0 && (trainer.rng.pretrain_step as usize) < cfg.pretrain_steps {
        let st = trainer.pretrain_step(train)?;
        run.push(&st);
        if run.n == every || trainer.rng.pretrain_step as usize == cfg.pretrain_steps {
            emit(run.record("pretrain", trainer, start.elapsed().as_secs_f64()), &mut on_record)?;
        }
    }
    if cfg.pretrain_steps > 0 && trainer.rng.step == 0 {
        if let Some(dir) = &out.dir {
            trainer.checkpoint().save(&dir.join("pretrained.fsdt"))?;
        }
    }

    let spe = cfg.steps_per_epoch() as u64;
    let total = (spe * cfg.epochs as u64).min(out.stop_at_step.unwrap_or(u64::MAX));
    if total > 0 {
        let sampler = EpisodeSampler::new(train, &trainer.classes.base)?.forbid(&trainer.classes.novel)?;
        let mut run = Running::default();
        let mut pre = Running::default();
        while trainer.rng.step < total {
            let st = trainer.train_step(&sampler)?;
            run.push(&st);
            if cfg.pretrain_interleave > 0 && trainer.rng.step.is_multiple_of(cfg.pretrain_interleave as u64) {
                let st = trainer.pretrain_step(train)?;
                pre.push(&st);
            }
            if trainer.rng.step.is_multiple_of(spe) {
                let wall = start.elapsed().as_secs_f64();
                // Records carry the epoch that just finished.
                let mut r = run.record("train", trainer, wall);
                r.epoch -= 1;
                r.lr = cfg.lr_at(r.epoch);
                emit(r, &mut on_record)?;
                if pre.n > 0 {
                    let mut r = pre.record("pretrain_interleaved", trainer, wall);
                    r.epoch -= 1;
                    r.lr = cfg.lr_at(r.epoch);
                    emit(r, &mut on_record)?;
                }
                if let Some(dir) = &out.dir {
                    let ck = trainer.checkpoint();
                    ck.save(&dir.join(format!("epoch_{:03}.fsdt", trainer.epoch())))?;
                    ck.save(&dir.join("last.fsdt"))?;
                }
            }
        }
    }
    let ck = trainer.checkpoint();
    if let Some(dir) = &out.dir {
        ck.save(&dir.join("last.fsdt"))?;
    }
    Ok(ck)
}
