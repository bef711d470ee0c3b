use super::{Graph, NdError, Real, Tensor, Var};

/// Projection weights of one multi-head attention block, already bound to a graph.
///
/// All projections are `d×d` matrices applied on the right (`x · W + b`).
#[derive(Debug, Clone, Copy)]
pub struct AttentionWeights {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
}

/// Output of [`multi_head_attention`].
#[derive(Debug, Clone)]
pub struct AttentionOutput<T> {
    pub out: Var,
    /// Attention weights, `n_heads × Lq × Lk`; every row sums to one.
    pub attn: Tensor<T>,
}

/// Scaled dot-product attention over `n_heads` heads, concatenated and projected.
pub fn multi_head_attention<T: Real>(
    g: &mut Graph<T>,
    q: Var,
    k: Var,
    v: Var,
    w: &AttentionWeights,
    n_heads: usize,
) -> Result<AttentionOutput<T>, NdError> {
    let (lq, d) = g.value(q).dims2()?;
    let (lk, dk) = g.value(k).dims2()?;
    let (lv, dv) = g.value(v).dims2()?;
    if n_heads == 0 || d % n_heads != 0 {
        return Err(NdError::Config(format!(
            "model width {d} is not divisible by {n_heads} heads"
        )));
    }
    if dk != d || dv != d || lv != lk {
        return Err(NdError::Shape(format!(
            "attention q {lq}×{d}, k {lk}×{dk}, v {lv}×{dv}"
        )));
    }
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();

    let qp = g.matmul(q, w.wq)?;
    let qp = g.add_row(qp, w.bq)?;
    let kp = g.matmul(k, w.wk)?;
    let kp = g.add_row(kp, w.bk)?;
    let vp = g.matmul(v, w.wv)?;
    let vp = g.add_row(vp, w.bv)?;

    let mut heads = Vec::with_capacity(n_heads);
    let mut attn = Vec::with_capacity(n_heads * lq * lk);
    for h in 0..n_heads {
        let (qh, kh, vh) = if n_heads == 1 {
            (qp, kp, vp)
        } else {
            (
                g.slice_cols(qp, h * dh, dh)?,
                g.slice_cols(kp, h * dh, dh)?,
                g.slice_cols(vp, h * dh, dh)?,
            )
        };
        let scores = g.matmul_t(qh, false, kh, true)?;
        let scores = g.scale(scores, scale)?;
        let a = g.softmax(scores, 1)?;
        attn.extend_from_slice(g.value(a).data());
        heads.push(g.matmul(a, vh)?);
    }
    let cat = if n_heads == 1 {
        heads[0]
    } else {
        g.concat(&heads, 1)?
    };
    let out = g.matmul(cat, w.wo)?;
    let out = g.add_row(out, w.bo)?;
    Ok(AttentionOutput {
        out,
        attn: Tensor::new(&[n_heads, lq, lk], attn)?,
    })
}
