use std::f64::consts::TAU;

use crate::ndgrad::{multi_head_attention, NdError, Real, Tensor, Var};
use crate::params::{Attention, Mlp, Norm, ParamStore, Session};
use crate::rng::DetRng;

const TEMPERATURE: f64 = 10_000.0;

fn check_width(d: usize) -> Result<(), NdError> {
    if !d.is_multiple_of(4) || d == 0 {
        return Err(NdError::Config(format!("positional width {d} must be a positive multiple of 4")));
    }
    Ok(())
}

/// Row then column encodings of fractional grid coordinates.
fn encode_at<T: Real>(out: &mut Vec<T>, y: f64, h: usize, x: f64, w: usize, d: usize) {
    let half = d / 2;
    for (idx, extent) in [(y, h), (x, w)] {
        let pos = idx / extent as f64 * TAU;
        for i in 0..half / 2 {
            let a = pos / TEMPERATURE.powf(2.0 * i as f64 / half as f64);
            out.push(T::c(a.sin()));
            out.push(T::c(a.cos()));
        }
    }
}

/// Fixed 2-D sine/cosine encoding, `S×d` with `S = h·w` in row-major order.
///
/// The first `d/2` channels encode the row and the rest the column, each as
/// interleaved `(sin, cos)` pairs of `2π·idx/extent` at geometric frequencies.
pub fn sinusoidal_positions<T: Real>(h: usize, w: usize, d: usize) -> Result<Tensor<T>, NdError> {
    check_width(d)?;
    let mut data = Vec::with_capacity(h * w * d);
    for y in 0..h {
        for x in 0..w {
            encode_at(&mut data, y as f64, h, x as f64, w, d);
        }
    }
    Tensor::new(&[h * w, d], data)
}

/// The same encoding at normalized `(x, y)` points, `n×d`. A point at the
/// centre of a grid cell gets exactly that cell's row of
/// [`sinusoidal_positions`].
pub fn point_positions<T: Real>(points: &[[f64; 2]], (h, w): (usize, usize), d: usize) -> Result<Tensor<T>, NdError> {
    check_width(d)?;
    let mut data = Vec::with_capacity(points.len() * d);
    for &[x, y] in points {
        encode_at(&mut data, y * h as f64 - 0.5, h, x * w as f64 - 0.5, w, d);
    }
    Tensor::new(&[points.len(), d], data)
}

/// Options shared by every transformer layer.
#[derive(Debug, Clone, Copy)]
pub struct LayerOpts {
    pub n_heads: usize,
    pub dropout: f64,
}

fn drop<T: Real>(s: &mut Session<T>, x: Var, p: f64) -> Result<Var, NdError> {
    let training = s.training;
    s.g.dropout(x, p, training, &mut s.rng)
}

/// Pre-norm encoder block: self-attention over image tokens, optional
/// cross-attention from image tokens to stamped templates, then an MLP.
#[derive(Debug, Clone)]
pub struct EncoderLayer {
    ln_sa: Norm,
    sa: Attention,
    ca: Option<(Norm, Attention)>,
    ln_mlp: Norm,
    mlp: Mlp,
}

impl EncoderLayer {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        d: usize,
        hidden: usize,
        with_mhca: bool,
        rng: &mut DetRng,
    ) -> Self {
        let ca = with_mhca.then(|| {
            (
                Norm::new(store, &format!("{name}.ln_ca"), d, rng),
                Attention::new(store, &format!("{name}.ca"), d, rng),
            )
        });
        Self {
            ln_sa: Norm::new(store, &format!("{name}.ln_sa"), d, rng),
            sa: Attention::new(store, &format!("{name}.sa"), d, rng),
            ca,
            ln_mlp: Norm::new(store, &format!("{name}.ln_mlp"), d, rng),
            mlp: Mlp::new(store, &format!("{name}.mlp"), &[d, hidden, d], rng),
        }
    }

    /// Returns the new tokens and, when cross-attention is enabled, its weights (`heads×S×mk`).
    pub fn forward<T: Real>(
        &self,
        s: &mut Session<T>,
        z: Var,
        prompts: Var,
        o: LayerOpts,
    ) -> Result<(Var, Option<Tensor<T>>), NdError> {
        let h = self.ln_sa.forward(s, z)?;
        let w = self.sa.bind(s);
        let a = multi_head_attention(&mut s.g, h, h, h, &w, o.n_heads)?;
        let a = drop(s, a.out, o.dropout)?;
        let mut z = s.g.add(z, a)?;
        let mut attn = None;
        if let Some((ln, ca)) = &self.ca {
            let h = ln.forward(s, z)?;
            let w = ca.bind(s);
            let a = multi_head_attention(&mut s.g, h, prompts, prompts, &w, o.n_heads)?;
            attn = Some(a.attn);
            let out = drop(s, a.out, o.dropout)?;
            z = s.g.add(z, out)?;
        }
        let h = self.ln_mlp.forward(s, z)?;
        let m = self.mlp.forward(s, h)?;
        let m = drop(s, m, o.dropout)?;
        Ok((s.g.add(z, m)?, attn))
    }
}

/// Pre-norm decoder block over the `[templates; queries]` sequence.
#[derive(Debug, Clone)]
pub struct DecoderLayer {
    ln_sa: Norm,
    sa: Attention,
    ln_ca: Norm,
    ca: Attention,
    ln_mlp: Norm,
    query_mlp: Mlp,
    template_mlp: Option<Mlp>,
}

impl DecoderLayer {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        d: usize,
        hidden: usize,
        type_specific: bool,
        rng: &mut DetRng,
    ) -> Self {
        Self {
            ln_sa: Norm::new(store, &format!("{name}.ln_sa"), d, rng),
            sa: Attention::new(store, &format!("{name}.sa"), d, rng),
            ln_ca: Norm::new(store, &format!("{name}.ln_ca"), d, rng),
            ca: Attention::new(store, &format!("{name}.ca"), d, rng),
            ln_mlp: Norm::new(store, &format!("{name}.ln_mlp"), d, rng),
            query_mlp: Mlp::new(store, &format!("{name}.mlp_query"), &[d, hidden, d], rng),
            template_mlp: type_specific.then(|| Mlp::new(store, &format!("{name}.mlp_template"), &[d, hidden, d], rng)),
        }
    }

    /// `v` and `o_prime` are `(mk+N)×d` with the `mk` template rows first.
    /// `memory_keys` is the encoder output with positions added, `memory` without.
    /// `spatial`, when given, is added to the cross-attention queries.
    #[allow(clippy::too_many_arguments)]
    pub fn forward<T: Real>(
        &self,
        s: &mut Session<T>,
        v: Var,
        o_prime: Var,
        memory: Var,
        memory_keys: Var,
        spatial: Option<Var>,
        mk: usize,
        o: LayerOpts,
    ) -> Result<Var, NdError> {
        let h = self.ln_sa.forward(s, v)?;
        let qk = s.g.add(h, o_prime)?;
        let w = self.sa.bind(s);
        let a = multi_head_attention(&mut s.g, qk, qk, h, &w, o.n_heads)?;
        let a = drop(s, a.out, o.dropout)?;
        let v = s.g.add(v, a)?;

        let h = self.ln_ca.forward(s, v)?;
        let mut q = s.g.add(h, o_prime)?;
        if let Some(sp) = spatial {
            q = s.g.add(q, sp)?;
        }
        let w = self.ca.bind(s);
        let a = multi_head_attention(&mut s.g, q, memory_keys, memory, &w, o.n_heads)?;
        let a = drop(s, a.out, o.dropout)?;
        let v = s.g.add(v, a)?;

        let h = self.ln_mlp.forward(s, v)?;
        let m = match &self.template_mlp {
            Some(tm) => {
                let rows = s.g.shape(h)[0];
                let ht = s.g.slice_rows(h, 0, mk)?;
                let hq = s.g.slice_rows(h, mk, rows - mk)?;
                let mt = tm.forward(s, ht)?;
                let mq = self.query_mlp.forward(s, hq)?;
                s.g.concat(&[mt, mq], 0)?
            }
            None => self.query_mlp.forward(s, h)?,
        };
        let m = drop(s, m, o.dropout)?;
        s.g.add(v, m)
    }
}
