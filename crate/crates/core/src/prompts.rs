//! Template crops, their augmentation and pooled encoding, and pseudo-class stamping.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backbone::Backbone;
use crate::image::Image;
use crate::matching::CornerBox;
use crate::ndgrad::{NdError, Real, Var};
use crate::params::{Init, Linear, ParamId, ParamStore, Session};
use crate::rng::DetRng;

pub const DEFAULT_TEMPLATE_SIZE: usize = 32;
pub const DEFAULT_BANK_SIZE: usize = 16;
const JITTER_FRACTION: f64 = 0.1;

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("invalid box: {0}")]
    InvalidBox(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Nd(#[from] NdError),
}

/// A `P×P` crop of one object instance. `source_class` is bookkeeping only.
#[derive(Debug, Clone, PartialEq)]
pub struct TemplateImage {
    pub pixels: Image,
    pub source_class: Option<usize>,
}

/// Crop the normalised corner box out of `image` and resample it to `size×size`.
///
/// With `jitter`, each corner moves by up to 10% of the box extent first.
pub fn crop_template(
    image: &Image,
    bbox: CornerBox,
    size: usize,
    rng: &mut DetRng,
    jitter: bool,
) -> Result<TemplateImage, PromptError> {
    const TOL: f64 = 1e-9;
    let CornerBox { x1, y1, x2, y2 } = bbox;
    if ![x1, y1, x2, y2].iter().all(|v| v.is_finite()) || x2 - x1 <= 0.0 || y2 - y1 <= 0.0 {
        return Err(PromptError::InvalidBox(format!("{bbox:?} has no area")));
    }
    if x1 < -TOL || y1 < -TOL || x2 > 1.0 + TOL || y2 > 1.0 + TOL {
        return Err(PromptError::InvalidBox(format!("{bbox:?} leaves the image")));
    }
    if size == 0 {
        return Err(PromptError::Config("template size must be positive".into()));
    }
    let (mut a, mut b, mut c, mut d) = (x1, y1, x2, y2);
    if jitter {
        let (jw, jh) = (JITTER_FRACTION * (x2 - x1), JITTER_FRACTION * (y2 - y1));
        a += rng.random_range(-jw..=jw);
        c += rng.random_range(-jw..=jw);
        b += rng.random_range(-jh..=jh);
        d += rng.random_range(-jh..=jh);
        (a, c) = (a.clamp(0.0, 1.0), c.clamp(0.0, 1.0));
        (b, d) = (b.clamp(0.0, 1.0), d.clamp(0.0, 1.0));
        if c - a <= 0.0 || d - b <= 0.0 {
            (a, b, c, d) = (x1, y1, x2, y2);
        }
    }
    let (w, h) = (image.width as f64, image.height as f64);
    Ok(TemplateImage {
        pixels: image.crop_resize(a * w, b * h, c * w, d * h, size),
        source_class: None,
    })
}

/// Photometric augmentation probabilities and strength.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Augment {
    pub p_color: f64,
    pub strength: f64,
    pub p_gray: f64,
    pub p_blur: f64,
}

impl Default for Augment {
    fn default() -> Self {
        Self {
            p_color: 0.8,
            strength: 0.4,
            p_gray: 0.2,
            p_blur: 0.5,
        }
    }
}

impl Augment {
    /// The three branch coins are drawn first, then the jitter factors if needed.
    pub fn apply(&self, t: &TemplateImage, rng: &mut DetRng) -> TemplateImage {
        let coins: [f64; 3] = [rng.random(), rng.random(), rng.random()];
        let mut px = t.pixels.clone();
        if coins[0] < self.p_color {
            let s = self.strength;
            let brightness = rng.random_range(1.0 - s..=1.0 + s) as f32;
            let contrast = rng.random_range(1.0 - s..=1.0 + s) as f32;
            let mean = px.data.iter().sum::<f32>() / px.data.len() as f32;
            for v in &mut px.data {
                *v = ((*v - mean) * contrast + mean) * brightness;
            }
        }
        if coins[1] < self.p_gray && px.channels == 3 {
            let plane = px.height * px.width;
            for i in 0..plane {
                let y = 0.299 * px.data[i] + 0.587 * px.data[plane + i] + 0.114 * px.data[2 * plane + i];
                for c in 0..3 {
                    px.data[c * plane + i] = y;
                }
            }
        }
        if coins[2] < self.p_blur {
            px = box_blur3(&px);
        }
        px.clamp01();
        TemplateImage {
            pixels: px,
            source_class: t.source_class,
        }
    }
}

/// Default-strength augmentation.
pub fn augment_template(t: &TemplateImage, rng: &mut DetRng) -> TemplateImage {
    Augment::default().apply(t, rng)
}

fn box_blur3(img: &Image) -> Image {
    let mut out = img.clone();
    let (h, w) = (img.height as isize, img.width as isize);
    for c in 0..img.channels {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for dy in -1..=1 {
                    for dx in -1..=1 {
                        let yy = (y + dy).clamp(0, h - 1) as usize;
                        let xx = (x + dx).clamp(0, w - 1) as usize;
                        acc += img.get(c, yy, xx);
                    }
                }
                out.set(c, y as usize, x as usize, acc / 9.0);
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    GlobalAvg,
    Attention,
}

/// Pools backbone tokens of each template to one `d`-vector.
#[derive(Debug, Clone)]
pub struct TemplateEncoder {
    pub pooling: Pooling,
    query: Option<ParamId>,
    key: Option<Linear>,
}

impl TemplateEncoder {
    pub fn new<T: Real>(store: &mut ParamStore<T>, d: usize, pooling: Pooling, rng: &mut DetRng) -> Self {
        let (query, key) = match pooling {
            Pooling::GlobalAvg => (None, None),
            Pooling::Attention => (
                Some(store.add("prompts.pool.query", &[1, d], Init::Normal(0.02), rng)),
                Some(Linear::new(store, "prompts.pool.key", d, d, rng)),
            ),
        };
        Self { pooling, query, key }
    }

    /// `mk×d` pooled template features, one row per template in input order.
    pub fn encode<T: Real>(
        &self,
        s: &mut Session<T>,
        backbone: &Backbone,
        templates: &[TemplateImage],
    ) -> Result<Var, PromptError> {
        if templates.is_empty() {
            return Err(PromptError::Contract("no templates to encode".into()));
        }
        let mut rows = Vec::with_capacity(templates.len());
        for t in templates {
            let tokens = backbone.encode_patch(s, &t.pixels)?;
            rows.push(self.pool(s, tokens)?);
        }
        Ok(s.g.concat(&rows, 0)?)
    }

    /// Pool `s×d` tokens to `1×d`. Attention weights come from a learned query
    /// against projected keys and average the raw tokens.
    pub fn pool<T: Real>(&self, s: &mut Session<T>, tokens: Var) -> Result<Var, PromptError> {
        match (self.query, self.key) {
            (Some(q), Some(key)) => {
                let d = s.g.shape(tokens)[1];
                let q = s.p(q);
                let k = key.forward(s, tokens)?;
                let logits = s.g.matmul_t(q, false, k, true)?;
                let logits = s.g.scale(logits, 1.0 / (d as f64).sqrt())?;
                let w = s.g.softmax(logits, 1)?;
                Ok(s.g.matmul(w, tokens)?)
            }
            _ => Ok(s.g.mean_rows(tokens)?),
        }
    }
}

/// Learned `B×d` pseudo-class embeddings.
#[derive(Debug, Clone, Copy)]
pub struct PseudoClassBank {
    pub embeddings: ParamId,
    pub size: usize,
}

impl PseudoClassBank {
    pub fn new<T: Real>(store: &mut ParamStore<T>, size: usize, d: usize, rng: &mut DetRng) -> Self {
        Self {
            embeddings: store.add("prompts.bank", &[size, d], Init::Normal(1.0), rng),
            size,
        }
    }
}

/// `m` distinct bank slots drawn uniformly without replacement.
pub fn assign_pseudo_classes(m: usize, bank_size: usize, rng: &mut DetRng) -> Result<Vec<usize>, PromptError> {
    if m > bank_size {
        return Err(PromptError::Config(format!(
            "{m} episode classes exceed the pseudo-class bank size {bank_size}"
        )));
    }
    Ok(sample(rng, bank_size, m).into_vec())
}

/// Stamped visual prompts for one episode.
#[derive(Debug, Clone)]
pub struct PromptSet {
    /// `mk×d`.
    pub stamped: Var,
    pub pseudo_ids: Vec<usize>,
    pub class_of_row: Vec<usize>,
    /// Bank slot per episode class.
    pub assignment: Vec<usize>,
    pub m: usize,
    pub k: usize,
}

/// Add each row's pseudo-class embedding: row `j` gets `bank[assignment[class_of_row[j]]]`.
pub fn stamp<T: Real>(
    s: &mut Session<T>,
    x: Var,
    class_of_row: &[usize],
    assignment: &[usize],
    bank: &PseudoClassBank,
) -> Result<PromptSet, PromptError> {
    let rows = s.g.shape(x)[0];
    if class_of_row.len() != rows {
        return Err(PromptError::Contract(format!(
            "{rows} template rows but {} class labels",
            class_of_row.len()
        )));
    }
    let m = assignment.len();
    if let Some(&c) = class_of_row.iter().find(|&&c| c >= m) {
        return Err(PromptError::Contract(format!("row labelled with class {c} but only {m} classes")));
    }
    if let Some(&p) = assignment.iter().find(|&&p| p >= bank.size) {
        return Err(PromptError::Contract(format!("pseudo-class {p} outside bank of {}", bank.size)));
    }
    let pseudo_ids: Vec<usize> = class_of_row.iter().map(|&c| assignment[c]).collect();
    let e = s.p(bank.embeddings);
    let c = s.g.gather_rows(e, &pseudo_ids)?;
    let stamped = s.g.add(x, c)?;
    Ok(PromptSet {
        stamped,
        pseudo_ids,
        class_of_row: class_of_row.to_vec(),
        assignment: assignment.to_vec(),
        m,
        k: rows.checked_div(m).unwrap_or(0),
    })
}
