//! k-shot episodic evaluation with all-point AP over base and novel classes.

mod ap;

pub use ap::{ap_from_matches, average_precision, match_image, rank_detections, score_detections, Scored};

use std::collections::BTreeMap;

use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::matching::Box;
use crate::model::{FsDetr, ModelConfig, ModelError};
use crate::params::{ParamStore, Session};
use crate::prompts::{assign_pseudo_classes, Pooling, PromptError};
use crate::rng::{stream_rng, DetRng};
use crate::synthworld::{ClassSplit, Dataset, EpisodeSampler, SynthError};

pub const PROTOCOL: &str = "all-point";

/// 0.50, 0.55, …, 0.95.
pub fn iou_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("config error: {0}")]
    Config(String),
    #[error("contamination: {0}")]
    Contamination(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Synth(#[from] SynthError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub k: usize,
    pub m: usize,
    /// Episodes per class pool.
    pub episodes: usize,
    pub seed: u64,
    /// Let some episode classes be absent from the target.
    pub include_absent: bool,
    /// Also evaluate base-class episodes (generalised setting).
    pub base: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            k: 1,
            m: 2,
            episodes: 200,
            seed: 0,
            include_absent: true,
            base: true,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ApSummary {
    pub ap50: f64,
    pub ap75: f64,
    /// Mean over IoU 0.50:0.95.
    pub ap: f64,
}

impl ApSummary {
    fn mean<'a>(items: impl Iterator<Item = &'a ApSummary>) -> Self {
        let mut s = Self::default();
        let mut n = 0usize;
        for a in items {
            s.ap50 += a.ap50;
            s.ap75 += a.ap75;
            s.ap += a.ap;
            n += 1;
        }
        if n > 0 {
            let n = n as f64;
            s.ap50 /= n;
            s.ap75 /= n;
            s.ap /= n;
        }
        s
    }
}

/// Architecture switches the checkpoint was built with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub use_encoder_mhca: bool,
    pub use_ts_mlp: bool,
    pub pooling: Pooling,
    pub template_size: usize,
}

impl From<&ModelConfig> for Variant {
    fn from(c: &ModelConfig) -> Self {
        Self {
            use_encoder_mhca: c.use_encoder_mhca,
            use_ts_mlp: c.use_ts_mlp,
            pooling: c.pooling,
            template_size: c.template_size,
        }
    }
}

/// How often absent episode classes stay silent.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AbsentStats {
    /// Episodes with at least one absent class.
    pub episodes: usize,
    /// Of those, episodes with no detection for any absent class.
    pub silent: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub protocol: String,
    pub iou_thresholds: Vec<f64>,
    pub k: usize,
    pub m: usize,
    /// Keyed by dataset class id; only classes with ground truth appear.
    pub per_class: BTreeMap<usize, ApSummary>,
    pub novel: ApSummary,
    pub base: ApSummary,
    pub all: ApSummary,
    /// Episodes per evaluated pool.
    pub episodes: usize,
    pub variant: Variant,
    pub absent: AbsentStats,
}

#[derive(Default)]
struct ClassPool {
    n_gt: usize,
    // One match list per IoU threshold.
    matches: Vec<Vec<(f64, bool)>>,
}

/// Run `cfg.episodes` novel episodes (and as many base ones when `cfg.base`)
/// on `data`. `trained` is the split recorded with the weights; it must equal
/// the split that produced `data`.
pub fn evaluate(
    model: &FsDetr,
    store: &ParamStore<f32>,
    trained: &ClassSplit,
    data: &Dataset,
    data_split: &ClassSplit,
    cfg: &EvalConfig,
) -> Result<EvalReport, EvalError> {
    if trained != data_split {
        return Err(EvalError::Contamination(format!(
            "checkpoint was trained with novel classes {:?} but the dataset holds out {:?}",
            trained.novel, data_split.novel
        )));
    }
    if cfg.k == 0 || cfg.m == 0 || cfg.episodes == 0 {
        return Err(EvalError::Config("k, m and episodes must be positive".into()));
    }
    let thresholds = iou_thresholds();
    let mut pools: BTreeMap<usize, ClassPool> = BTreeMap::new();
    let mut absent = AbsentStats::default();
    let mut runs = vec![("eval.novel", &trained.novel)];
    if cfg.base {
        runs.push(("eval.base", &trained.base));
    }
    for (stream, pool) in runs {
        let mut sampler = EpisodeSampler::new(data, pool)?;
        sampler.template_size = model.cfg.template_size;
        for i in 0..cfg.episodes {
            let mut rng = stream_rng(cfg.seed, stream, i as u64);
            let ep = sampler.sample(cfg.m, cfg.k, cfg.include_absent, &mut rng)?;
            let assignment = assign_pseudo_classes(ep.m(), model.cfg.bank_size, &mut rng)?;
            let (templates, rows) = ep.flat_templates();
            let mut s = Session::new(store, false, DetRng::from_rng(&mut rng));
            let dets = model.detect(&mut s, &ep.target.image, &templates, &rows, &assignment)?;
            let scored = rank_detections(&dets);
            let mut any_absent = false;
            let mut leak = false;
            for (c, &class) in ep.classes.iter().enumerate() {
                let gts: Vec<Box> = ep.targets.iter().filter(|t| t.class == c).map(|t| t.bbox).collect();
                let mine: Vec<(f64, Box)> = scored.iter().filter(|d| d.class == c).map(|d| (d.score, d.bbox)).collect();
                if gts.is_empty() {
                    any_absent = true;
                    leak |= !mine.is_empty();
                }
                let entry = pools.entry(class).or_insert_with(|| ClassPool {
                    n_gt: 0,
                    matches: vec![Vec::new(); thresholds.len()],
                });
                entry.n_gt += gts.len();
                for (t, &thr) in thresholds.iter().enumerate() {
                    entry.matches[t].extend(match_image(&mine, &gts, thr));
                }
            }
            if any_absent {
                absent.episodes += 1;
                absent.silent += usize::from(!leak);
            }
        }
    }
    let per_class: BTreeMap<usize, ApSummary> = pools
        .into_iter()
        .filter(|(_, p)| p.n_gt > 0)
        .map(|(class, p)| {
            let aps: Vec<f64> = p.matches.iter().map(|m| ap_from_matches(m, p.n_gt)).collect();
            let summary = ApSummary {
                ap50: aps[0],
                ap75: aps[5],
                ap: aps.iter().sum::<f64>() / aps.len() as f64,
            };
            (class, summary)
        })
        .collect();
    let novel = ApSummary::mean(per_class.iter().filter(|(c, _)| trained.is_novel(**c)).map(|(_, a)| a));
    let base = ApSummary::mean(per_class.iter().filter(|(c, _)| !trained.is_novel(**c)).map(|(_, a)| a));
    let all = ApSummary::mean(per_class.values());
    Ok(EvalReport {
        protocol: PROTOCOL.into(),
        iou_thresholds: thresholds,
        k: cfg.k,
        m: cfg.m,
        per_class,
        novel,
        base,
        all,
        episodes: cfg.episodes,
        variant: Variant::from(&model.cfg),
        absent,
    })
}
