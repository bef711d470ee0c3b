//! Template-conditioned DETR: backbone tokens, an encoder that cross-attends
//! to stamped templates, a decoder over `[templates; object queries]`, and
//! class/box heads on the query rows.

mod layers;

pub use layers::{point_positions, sinusoidal_positions, DecoderLayer, EncoderLayer, LayerOpts};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backbone::{Backbone, TOTAL_STRIDE};
use crate::image::Image;
use crate::matching::Box;
use crate::ndgrad::{NdError, Real, Tensor, Var};
use crate::params::{Init, Linear, Mlp, Norm, ParamId, ParamStore, Session};
use crate::prompts::{
    stamp, PromptError, PromptSet, Pooling, PseudoClassBank, TemplateEncoder, TemplateImage, DEFAULT_BANK_SIZE,
    DEFAULT_TEMPLATE_SIZE,
};
use crate::rng::DetRng;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Nd(#[from] NdError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d: usize,
    pub n_heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub n_queries: usize,
    pub ffn_hidden: usize,
    pub use_encoder_mhca: bool,
    pub use_ts_mlp: bool,
    pub dropout: f64,
    pub bank_size: usize,
    pub template_size: usize,
    pub pooling: Pooling,
    pub in_channels: usize,
    /// Learned per-query reference points: box centres are offsets from
    /// them and their encoding steers decoder cross-attention.
    pub reference_points: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 64,
            n_heads: 4,
            enc_layers: 3,
            dec_layers: 3,
            n_queries: 25,
            ffn_hidden: 128,
            use_encoder_mhca: true,
            use_ts_mlp: true,
            dropout: 0.1,
            bank_size: DEFAULT_BANK_SIZE,
            template_size: DEFAULT_TEMPLATE_SIZE,
            pooling: Pooling::Attention,
            in_channels: 3,
            reference_points: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let err = |m: String| Err(ModelError::Config(m));
        if self.n_heads == 0 || !self.d.is_multiple_of(self.n_heads) {
            return err(format!("d = {} is not divisible by n_heads = {}", self.d, self.n_heads));
        }
        if !self.d.is_multiple_of(4) || self.d == 0 {
            return err(format!("d = {} must be a positive multiple of 4", self.d));
        }
        if self.n_queries == 0 {
            return err("n_queries must be at least 1".into());
        }
        if self.bank_size == 0 {
            return err("bank_size must be at least 1".into());
        }
        if self.template_size == 0 || !self.template_size.is_multiple_of(TOTAL_STRIDE) {
            return err(format!("template_size {} must be a multiple of {TOTAL_STRIDE}", self.template_size));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return err(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.ffn_hidden == 0 || self.in_channels == 0 {
            return err("ffn_hidden and in_channels must be positive".into());
        }
        Ok(())
    }
}

/// Encoder-side graph values.
#[derive(Debug, Clone)]
pub struct Encoded<T> {
    /// Normalized encoder output, `hw×d`.
    pub memory: Var,
    /// `memory` plus positions, used as decoder cross-attention keys.
    pub keys: Var,
    /// Last encoder layer's prompt attention, `heads×hw×mk`.
    pub attn: Option<Tensor<T>>,
    pub grid: (usize, usize),
}

/// Graph outputs of one forward pass.
#[derive(Debug, Clone)]
pub struct ModelOutput<T> {
    /// `N×(m+1)` logits; the last column is ∅.
    pub logits: Var,
    /// `N×4` sigmoid-bounded `(cx, cy, w, h)`.
    pub boxes: Var,
    /// Last encoder layer's template cross-attention, `heads×S×mk`.
    pub attn: Option<Tensor<T>>,
    pub grid: (usize, usize),
    /// `(logits, boxes)` read from each earlier decoder layer through the
    /// shared heads; empty unless requested.
    pub aux: Vec<(Var, Var)>,
}

/// Plain-value predictions for one episode.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionSet {
    /// `N` rows of `m+1` probabilities, ∅ last.
    pub probs: Vec<Vec<f64>>,
    pub boxes: Vec<Box>,
    /// Per template row, head-averaged attention over the `h×w` token grid.
    pub attn_maps: Option<Vec<Tensor<f64>>>,
}

#[derive(Debug, Clone)]
pub struct FsDetr {
    pub cfg: ModelConfig,
    pub backbone: Backbone,
    pub templates: TemplateEncoder,
    pub bank: PseudoClassBank,
    queries: ParamId,
    encoder: Vec<EncoderLayer>,
    decoder: Vec<DecoderLayer>,
    enc_norm: Norm,
    dec_norm: Norm,
    class_head: Mlp,
    box_head: Mlp,
    reference: Option<Linear>,
}

impl FsDetr {
    /// Registers every parameter in `store` in a fixed order.
    pub fn new<T: Real>(store: &mut ParamStore<T>, cfg: &ModelConfig, rng: &mut DetRng) -> Result<Self, ModelError> {
        cfg.validate()?;
        let d = cfg.d;
        let backbone = Backbone::new(store, cfg.in_channels, d, rng);
        let templates = TemplateEncoder::new(store, d, cfg.pooling, rng);
        let bank = PseudoClassBank::new(store, cfg.bank_size, d, rng);
        let queries = store.add("queries", &[cfg.n_queries, d], Init::Normal(1.0), rng);
        let encoder = (0..cfg.enc_layers)
            .map(|i| EncoderLayer::new(store, &format!("encoder.{i}"), d, cfg.ffn_hidden, cfg.use_encoder_mhca, rng))
            .collect();
        let decoder = (0..cfg.dec_layers)
            .map(|i| DecoderLayer::new(store, &format!("decoder.{i}"), d, cfg.ffn_hidden, cfg.use_ts_mlp, rng))
            .collect();
        Ok(Self {
            cfg: cfg.clone(),
            backbone,
            templates,
            bank,
            queries,
            encoder,
            decoder,
            enc_norm: Norm::new(store, "encoder.norm", d, rng),
            dec_norm: Norm::new(store, "decoder.norm", d, rng),
            class_head: Mlp::new(store, "head.class", &[d, d, d, cfg.bank_size + 1], rng),
            box_head: Mlp::new(store, "head.box", &[d, d, d, 4], rng),
            reference: cfg.reference_points.then(|| Linear::new(store, "reference", d, 2, rng)),
        })
    }

    fn opts(&self) -> LayerOpts {
        LayerOpts {
            n_heads: self.cfg.n_heads,
            dropout: self.cfg.dropout,
        }
    }

    /// Encode templates (row `j` labelled with episode class `class_of_row[j]`)
    /// and stamp them with the bank slots in `assignment`.
    pub fn prompt<T: Real>(
        &self,
        s: &mut Session<T>,
        templates: &[TemplateImage],
        class_of_row: &[usize],
        assignment: &[usize],
    ) -> Result<PromptSet, ModelError> {
        if assignment.len() > self.cfg.bank_size {
            return Err(ModelError::Config(format!(
                "{} episode classes exceed bank size {}",
                assignment.len(),
                self.cfg.bank_size
            )));
        }
        let x = self.templates.encode(s, &self.backbone, templates)?;
        Ok(stamp(s, x, class_of_row, assignment, &self.bank)?)
    }

    /// Backbone, positions and encoder: the memory the decoder attends to.
    pub fn encode<T: Real>(&self, s: &mut Session<T>, image: &Image, prompts: &PromptSet) -> Result<Encoded<T>, ModelError> {
        let m = prompts.assignment.len();
        if m == 0 {
            return Err(ModelError::Config("an episode needs at least one class".into()));
        }
        if m > self.cfg.bank_size {
            return Err(ModelError::Config(format!("{m} episode classes exceed bank size {}", self.cfg.bank_size)));
        }
        let o = self.opts();
        let fm = self.backbone.encode_image(s, image)?;
        let pos = s.g.constant(sinusoidal_positions(fm.height, fm.width, self.cfg.d)?);
        let mut z = s.g.add(fm.tokens, pos)?;
        let mut attn = None;
        for layer in &self.encoder {
            let (nz, a) = layer.forward(s, z, prompts.stamped, o)?;
            z = nz;
            attn = a.or(attn);
        }
        let memory = self.enc_norm.forward(s, z)?;
        let keys = s.g.add(memory, pos)?;
        Ok(Encoded {
            memory,
            keys,
            attn,
            grid: (fm.height, fm.width),
        })
    }

    pub fn forward<T: Real>(&self, s: &mut Session<T>, image: &Image, prompts: &PromptSet) -> Result<ModelOutput<T>, ModelError> {
        self.forward_with(s, image, prompts, false)
    }

    /// [`forward`](Self::forward), optionally also reading predictions out
    /// of every decoder layer but the last.
    pub fn forward_with<T: Real>(
        &self,
        s: &mut Session<T>,
        image: &Image,
        prompts: &PromptSet,
        aux: bool,
    ) -> Result<ModelOutput<T>, ModelError> {
        let Encoded { memory: z, keys: z_keys, attn, grid } = self.encode(s, image, prompts)?;
        let o = self.opts();
        let xs = prompts.stamped;
        let mk = s.g.shape(xs)[0];
        let n = self.cfg.n_queries;
        let queries = s.p(self.queries);
        let o_prime = s.g.concat(&[xs, queries], 0)?;
        let zeros = s.g.constant(Tensor::zeros(&[n, self.cfg.d]));
        let mut v = s.g.concat(&[xs, zeros], 0)?;
        // Reference points as `(x, y)` logits; their encoding enters as a constant.
        let (ref_logits, spatial) = match &self.reference {
            Some(lin) => {
                let r = lin.forward(s, queries)?;
                let points: Vec<[f64; 2]> = s
                    .g
                    .value(r)
                    .data()
                    .chunks_exact(2)
                    .map(|c| [sigmoid(c[0].f64()), sigmoid(c[1].f64())])
                    .collect();
                let pe = point_positions(&points, grid, self.cfg.d)?;
                let pe = s.g.constant(pe);
                let pad = s.g.constant(Tensor::zeros(&[mk, self.cfg.d]));
                (Some(r), Some(s.g.concat(&[pad, pe], 0)?))
            }
            None => (None, None),
        };
        let mut cols = prompts.assignment.clone();
        cols.push(self.cfg.bank_size);
        let mut aux_out = Vec::new();
        for (i, layer) in self.decoder.iter().enumerate() {
            v = layer.forward(s, v, o_prime, z, z_keys, spatial, mk, o)?;
            if aux && i + 1 < self.decoder.len() {
                aux_out.push(self.heads(s, v, mk, &cols, ref_logits)?);
            }
        }
        let (logits, boxes) = self.heads(s, v, mk, &cols, ref_logits)?;
        Ok(ModelOutput {
            logits,
            boxes,
            attn,
            grid,
            aux: aux_out,
        })
    }

    /// Final norm, then class logits gathered to `cols` and sigmoid boxes for the query rows.
    fn heads<T: Real>(
        &self,
        s: &mut Session<T>,
        v: Var,
        mk: usize,
        cols: &[usize],
        ref_logits: Option<Var>,
    ) -> Result<(Var, Var), ModelError> {
        let n = self.cfg.n_queries;
        let v = self.dec_norm.forward(s, v)?;
        let vq = s.g.slice_rows(v, mk, n)?;
        let all_logits = self.class_head.forward(s, vq)?;
        let logits = s.g.gather_cols(all_logits, cols)?;
        let mut raw = self.box_head.forward(s, vq)?;
        if let Some(r) = ref_logits {
            let keep_size = s.g.constant(Tensor::zeros(&[n, 2]));
            let offset = s.g.concat(&[r, keep_size], 1)?;
            raw = s.g.add(raw, offset)?;
        }
        Ok((logits, s.g.sigmoid(raw)?))
    }

    /// Prompt and forward in one call, then read out plain values.
    pub fn detect<T: Real>(
        &self,
        s: &mut Session<T>,
        image: &Image,
        templates: &[TemplateImage],
        class_of_row: &[usize],
        assignment: &[usize],
    ) -> Result<DetectionSet, ModelError> {
        let p = self.prompt(s, templates, class_of_row, assignment)?;
        let out = self.forward(s, image, &p)?;
        Ok(readout(s, &out)?)
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Softmax probabilities, boxes and head-averaged attention maps of a forward pass.
pub fn readout<T: Real>(s: &mut Session<T>, out: &ModelOutput<T>) -> Result<DetectionSet, NdError> {
    let probs_v = s.g.softmax(out.logits, 1)?;
    let probs_t = s.g.value(probs_v).cast::<f64>();
    let (n, c) = probs_t.dims2()?;
    let probs = (0..n).map(|i| probs_t.data()[i * c..(i + 1) * c].to_vec()).collect();
    let bt = s.g.value(out.boxes).cast::<f64>();
    let boxes = (0..n)
        .map(|i| Box::from_array([bt.data()[4 * i], bt.data()[4 * i + 1], bt.data()[4 * i + 2], bt.data()[4 * i + 3]]))
        .collect();
    let attn_maps = out.attn.as_ref().map(|a| head_averaged_maps(&a.cast::<f64>(), out.grid));
    Ok(DetectionSet { probs, boxes, attn_maps })
}

fn head_averaged_maps(a: &Tensor<f64>, (h, w): (usize, usize)) -> Vec<Tensor<f64>> {
    let sh = a.shape();
    let (heads, sq, mk) = (sh[0], sh[1], sh[2]);
    (0..mk)
        .map(|j| {
            let data = (0..sq)
                .map(|q| (0..heads).map(|hd| a.data()[(hd * sq + q) * mk + j]).sum::<f64>() / heads as f64)
                .collect();
            Tensor::new(&[h, w], data).expect("grid matches token count")
        })
        .collect()
}
