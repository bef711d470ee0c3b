use rand::Rng;

use super::real::gemm;
use super::{NdError, Real, Tensor};

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct ConvGeom {
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Min(Var, Var),
    Max(Var, Var),
    AddRow { x: Var, bias: Var },
    Affine { x: Var, scale: T },
    Mask { x: Var, mask: Vec<T> },
    Relu(Var),
    Sigmoid(Var),
    Abs(Var),
    Softmax { x: Var, outer: usize, n: usize, inner: usize },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<T>, rstd: Vec<T> },
    Concat { parts: Vec<Var>, outer: usize, chunks: Vec<usize> },
    Slice { x: Var, outer: usize, full: usize, start: usize, len: usize },
    GatherRows { x: Var, idx: Vec<usize> },
    GatherCols { x: Var, idx: Vec<usize> },
    Transpose(Var),
    Reshape(Var),
    Conv2d { x: Var, kernel: Var, bias: Option<Var>, geom: ConvGeom, cols: Vec<T> },
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    CrossEntropy { logits: Var, targets: Vec<usize>, weights: Vec<T>, probs: Vec<T>, wsum: T },
}

struct Node<T> {
    value: Tensor<T>,
    grad: Option<Vec<T>>,
    requires_grad: bool,
    op: Op<T>,
}

/// Reverse-mode differentiation tape.
///
/// Nodes are appended in evaluation order, so the node list is already a
/// topological order; [`Graph::backward`] walks it once in reverse.
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(msg: impl Into<String>) -> NdError {
    NdError::Shape(msg.into())
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        debug_assert!(value.all_finite(), "non-finite value produced by {:?}", op_name(&op));
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    fn dims2(&self, v: Var) -> Result<(usize, usize), NdError> {
        self.value(v).dims2()
    }

    // ---------------------------------------------------------------- forward

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NdError> {
        self.matmul_t(a, false, b, false)
    }

    /// `op(a) · op(b)` where `op` optionally transposes a 2-D operand.
    pub fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Result<Var, NdError> {
        let (ar, ac) = self.dims2(a)?;
        let (br, bc) = self.dims2(b)?;
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(shape_err(format!(
                "matmul inner dims {k} vs {k2} ({:?} x {:?})",
                self.shape(a),
                self.shape(b)
            )));
        }
        let mut out = vec![T::zero(); m * n];
        gemm(
            m,
            k,
            n,
            T::one(),
            self.value(a).data(),
            ta,
            self.value(b).data(),
            tb,
            T::zero(),
            &mut out,
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul { a, b, ta, tb }, rg))
    }

    fn zip_same(
        &mut self,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var, NdError> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err(format!(
                "elementwise shapes {:?} vs {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(va.shape(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NdError> {
        self.zip_same(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NdError> {
        self.zip_same(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NdError> {
        self.zip_same(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, NdError> {
        self.zip_same(a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var, NdError> {
        self.zip_same(a, b, |x, y| if x <= y { x } else { y }, Op::Min(a, b))
    }

    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var, NdError> {
        self.zip_same(a, b, |x, y| if x >= y { x } else { y }, Op::Max(a, b))
    }

    /// Adds a row vector `bias` (shape `[d]` or `[1, d]`) to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var, NdError> {
        let d = *self.shape(x).last().unwrap();
        if self.value(bias).len() != d {
            return Err(shape_err(format!(
                "bias of {} elements for rows of {d}",
                self.value(bias).len()
            )));
        }
        let b = self.value(bias).data();
        let data = self
            .value(x)
            .data()
            .chunks(d)
            .flat_map(|row| row.iter().zip(b).map(|(&u, &v)| u + v))
            .collect();
        let t = Tensor::new(self.shape(x), data)?;
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(t, Op::AddRow { x, bias }, rg))
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var, NdError> {
        let (s, c) = (T::c(scale), T::c(shift));
        let v = self.value(x);
        let t = Tensor::new(v.shape(), v.data().iter().map(|&u| s * u + c).collect())?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Affine { x, scale: s }, rg))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var, NdError> {
        self.affine(x, s, 0.0)
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Result<Var, NdError> {
        let v = self.value(x);
        let t = Tensor::new(v.shape(), v.data().iter().map(|&u| f(u)).collect())?;
        let rg = self.rg(x);
        Ok(self.push(t, op, rg))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, NdError> {
        self.unary(x, |u| u.max(T::zero()), Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var, NdError> {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn abs(&mut self, x: Var) -> Result<Var, NdError> {
        self.unary(x, |u| u.abs(), Op::Abs(x))
    }

    /// Element dropout: survivors scaled by `1/(1-p)` in training, identity otherwise.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        x: Var,
        p: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<Var, NdError> {
        if !training || p <= 0.0 {
            return Ok(x);
        }
        if p >= 1.0 {
            return Err(NdError::Config(format!("dropout probability {p} must be < 1")));
        }
        let keep = T::c(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..self.value(x).len())
            .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
            .collect();
        let v = self.value(x);
        let data = v.data().iter().zip(&mask).map(|(&u, &m)| u * m).collect();
        let t = Tensor::new(v.shape(), data)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Mask { x, mask }, rg))
    }

    fn axis_split(&self, x: Var, axis: usize) -> Result<(usize, usize, usize), NdError> {
        let s = self.shape(x);
        if axis >= s.len() {
            return Err(shape_err(format!("axis {axis} out of range for {s:?}")));
        }
        let outer = s[..axis].iter().product();
        let inner = s[axis + 1..].iter().product();
        Ok((outer, s[axis], inner))
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var, NdError> {
        let (outer, n, inner) = self.axis_split(x, axis)?;
        let v = self.value(x);
        let src = v.data();
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * n * inner + i;
                let mut mx = T::neg_infinity();
                for j in 0..n {
                    mx = mx.max(src[base + j * inner]);
                }
                let mut s = T::zero();
                for j in 0..n {
                    let e = (src[base + j * inner] - mx).exp();
                    out[base + j * inner] = e;
                    s += e;
                }
                for j in 0..n {
                    out[base + j * inner] /= s;
                }
            }
        }
        let t = Tensor::new(v.shape(), out)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Softmax { x, outer, n, inner }, rg))
    }

    /// Per-row normalisation over the last axis followed by an affine gain/bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var, NdError> {
        let d = *self.shape(x).last().unwrap();
        if self.value(gain).len() != d || self.value(bias).len() != d {
            return Err(shape_err("layer_norm gain/bias width mismatch"));
        }
        let eps = T::c(eps);
        let v = self.value(x);
        let rows = v.len() / d;
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = vec![T::zero(); v.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); v.len()];
        let dn = T::c(d as f64);
        for r in 0..rows {
            let row = &v.data()[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&u| (u - mean) * (u - mean)).sum::<T>() / dn;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let t = Tensor::new(v.shape(), out)?;
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, NdError> {
        let first = parts
            .first()
            .ok_or_else(|| shape_err("concat of zero tensors"))?;
        let s0 = self.shape(*first).to_vec();
        if axis >= s0.len() {
            return Err(shape_err(format!("concat axis {axis} for {s0:?}")));
        }
        let outer: usize = s0[..axis].iter().product();
        let inner: usize = s0[axis + 1..].iter().product();
        let mut total = 0;
        let mut chunks = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != s0.len()
                || s[..axis] != s0[..axis]
                || s[axis + 1..] != s0[axis + 1..]
            {
                return Err(shape_err(format!("concat {s0:?} with {s:?} on axis {axis}")));
            }
            total += s[axis];
            chunks.push(s[axis] * inner);
        }
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&p, &c) in parts.iter().zip(&chunks) {
                out.extend_from_slice(&self.value(p).data()[o * c..(o + 1) * c]);
            }
        }
        let mut shape = s0;
        shape[axis] = total;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::Concat {
                parts: parts.to_vec(),
                outer,
                chunks,
            },
            rg,
        ))
    }

    /// Contiguous range `start..start+len` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var, NdError> {
        let (outer, n, inner) = self.axis_split(x, axis)?;
        if len == 0 || start + len > n {
            return Err(shape_err(format!(
                "slice {start}..{} of axis with {n} entries",
                start + len
            )));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * n * inner;
            out.extend_from_slice(&src[base + start * inner..base + (start + len) * inner]);
        }
        let mut shape = self.shape(x).to_vec();
        shape[axis] = len;
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::Slice {
                x,
                outer,
                full: n * inner,
                start: start * inner,
                len: len * inner,
            },
            rg,
        ))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var, NdError> {
        self.slice(x, 0, start, len)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var, NdError> {
        self.slice(x, 1, start, len)
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var, NdError> {
        let (r, c) = self.dims2(x)?;
        if idx.is_empty() || idx.iter().any(|&i| i >= r) {
            return Err(NdError::Index(format!("row gather {idx:?} from {r} rows")));
        }
        let src = self.value(x).data();
        let out = idx
            .iter()
            .flat_map(|&i| src[i * c..(i + 1) * c].iter().copied())
            .collect();
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(&[idx.len(), c], out)?,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    pub fn gather_cols(&mut self, x: Var, idx: &[usize]) -> Result<Var, NdError> {
        let (r, c) = self.dims2(x)?;
        if idx.is_empty() || idx.iter().any(|&i| i >= c) {
            return Err(NdError::Index(format!("column gather {idx:?} from {c} columns")));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(r * idx.len());
        for i in 0..r {
            out.extend(idx.iter().map(|&j| src[i * c + j]));
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(&[r, idx.len()], out)?,
            Op::GatherCols {
                x,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var, NdError> {
        let (r, c) = self.dims2(x)?;
        let src = self.value(x).data();
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&[c, r], out)?, Op::Transpose(x), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, NdError> {
        let t = self.value(x).clone().reshaped(shape)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    /// 2-D cross-correlation of a `C_in×H×W` image with a `C_out×C_in×k×k` kernel.
    pub fn conv2d(
        &mut self,
        x: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var, NdError> {
        let (cin, h, w) = match self.shape(x) {
            &[c, h, w] => (c, h, w),
            s => return Err(shape_err(format!("conv2d input must be C×H×W, got {s:?}"))),
        };
        let (cout, kc, k) = match self.shape(kernel) {
            &[o, i, k1, k2] if k1 == k2 => (o, i, k1),
            s => return Err(shape_err(format!("conv2d kernel must be O×I×k×k, got {s:?}"))),
        };
        if kc != cin {
            return Err(shape_err(format!("conv2d kernel expects {kc} channels, input has {cin}")));
        }
        if k % 2 == 0 || h < k || w < k || stride == 0 {
            return Err(shape_err(format!(
                "conv2d needs odd k <= H,W and stride >= 1 (k={k}, H={h}, W={w})"
            )));
        }
        if let Some(b) = bias {
            if self.value(b).len() != cout {
                return Err(shape_err("conv2d bias length"));
            }
        }
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        let geom = ConvGeom {
            cin,
            h,
            w,
            cout,
            k,
            stride,
            pad,
            ho,
            wo,
        };
        let cols = im2col(self.value(x).data(), &geom);
        let ckk = cin * k * k;
        let hw = ho * wo;
        let mut out = vec![T::zero(); cout * hw];
        if let Some(b) = bias {
            let bd = self.value(b).data();
            for (o, chunk) in out.chunks_mut(hw).enumerate() {
                chunk.fill(bd[o]);
            }
        }
        gemm(
            cout,
            ckk,
            hw,
            T::one(),
            self.value(kernel).data(),
            false,
            &cols,
            false,
            T::one(),
            &mut out,
        );
        let rg = self.rg(x) || self.rg(kernel) || bias.is_some_and(|b| self.rg(b));
        Ok(self.push(
            Tensor::new(&[cout, ho, wo], out)?,
            Op::Conv2d {
                x,
                kernel,
                bias,
                geom,
                cols,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, NdError> {
        let s = self.value(x).data().iter().copied().sum();
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(s), Op::Sum(x), rg))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var, NdError> {
        let v = self.value(x);
        let s = v.data().iter().copied().sum::<T>() / T::c(v.len() as f64);
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(s), Op::Mean(x), rg))
    }

    /// Column means of a 2-D tensor, as a `1×d` row.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var, NdError> {
        let (r, c) = self.dims2(x)?;
        let src = self.value(x).data();
        let mut out = vec![T::zero(); c];
        for row in src.chunks(c) {
            for (o, &u) in out.iter_mut().zip(row) {
                *o += u;
            }
        }
        let rn = T::c(r as f64);
        out.iter_mut().for_each(|o| *o /= rn);
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&[1, c], out)?, Op::MeanRows(x), rg))
    }

    /// Weighted mean negative log-likelihood of `targets` under `softmax(logits)`.
    ///
    /// The mean is normalised by the summed weights of the targets.
    pub fn cross_entropy_logits(
        &mut self,
        logits: Var,
        targets: &[usize],
        class_weights: &[f64],
    ) -> Result<Var, NdError> {
        let (n, c) = self.dims2(logits)?;
        if targets.len() != n {
            return Err(shape_err(format!("{} targets for {n} rows", targets.len())));
        }
        if class_weights.len() != c {
            return Err(shape_err(format!(
                "{} class weights for {c} classes",
                class_weights.len()
            )));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= c) {
            return Err(NdError::Index(format!("target class {t} outside 0..{c}")));
        }
        let src = self.value(logits).data();
        let mut probs = vec![T::zero(); n * c];
        let mut total = T::zero();
        let mut wsum = T::zero();
        for i in 0..n {
            let row = &src[i * c..(i + 1) * c];
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for j in 0..c {
                let e = (row[j] - mx).exp();
                probs[i * c + j] = e;
                s += e;
            }
            for j in 0..c {
                probs[i * c + j] /= s;
            }
            let lse = mx + s.ln();
            let w = T::c(class_weights[targets[i]]);
            total += w * (lse - row[targets[i]]);
            wsum += w;
        }
        if wsum <= T::zero() {
            return Err(NdError::Config("cross entropy weights sum to zero".into()));
        }
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(total / wsum),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: class_weights.iter().map(|&w| T::c(w)).collect(),
                probs,
                wsum,
            },
            rg,
        ))
    }

    // --------------------------------------------------------------- backward

    fn grad_buf(&mut self, v: Var) -> Option<Vec<T>> {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        Some(
            node.grad
                .take()
                .unwrap_or_else(|| vec![T::zero(); node.value.len()]),
        )
    }

    fn put_grad(&mut self, v: Var, g: Vec<T>) {
        self.nodes[v.0].grad = Some(g);
    }

    fn acc(&mut self, v: Var, f: impl FnOnce(&mut [T], &Self)) {
        if let Some(mut g) = self.grad_buf(v) {
            f(&mut g, self);
            self.put_grad(v, g);
        }
    }

    fn acc_each(&mut self, v: Var, gout: &[T], f: impl Fn(usize, T) -> T) {
        if let Some(mut g) = self.grad_buf(v) {
            for (i, (gi, &go)) in g.iter_mut().zip(gout).enumerate() {
                *gi += f(i, go);
            }
            self.put_grad(v, g);
        }
    }

    /// Populates gradients of every node that depends on a `param` leaf.
    pub fn backward(&mut self, loss: Var) -> Result<(), NdError> {
        if self.value(loss).len() != 1 {
            return Err(NdError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        for n in &mut self.nodes {
            n.grad = None;
        }
        if !self.rg(loss) {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(gout) = self.nodes[i].grad.take() else {
                continue;
            };
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
            self.backprop(i, &op, &gout);
            self.nodes[i].op = op;
            self.nodes[i].grad = Some(gout);
        }
        Ok(())
    }

    fn backprop(&mut self, node: usize, op: &Op<T>, gout: &[T]) {
        match *op {
            Op::Leaf => {}
            Op::MatMul { a, b, ta, tb } => {
                let (m, n) = self.value(Var(node)).dims2().unwrap();
                let (ar, ac) = self.dims2(a).unwrap();
                let k = if ta { ar } else { ac };
                self.acc(a, |ga, g| {
                    let bv = g.value(b).data();
                    if ta {
                        // stored k×m: op(B) · dCᵀ
                        gemm(k, n, m, T::one(), bv, tb, gout, true, T::one(), ga);
                    } else {
                        gemm(m, n, k, T::one(), gout, false, bv, !tb, T::one(), ga);
                    }
                });
                self.acc(b, |gb, g| {
                    let av = g.value(a).data();
                    if tb {
                        // stored n×k: dCᵀ · op(A)
                        gemm(n, m, k, T::one(), gout, true, av, ta, T::one(), gb);
                    } else {
                        gemm(k, m, n, T::one(), av, !ta, gout, false, T::one(), gb);
                    }
                });
            }
            Op::Add(a, b) => {
                self.acc_each(a, gout, |_, g| g);
                self.acc_each(b, gout, |_, g| g);
            }
            Op::Sub(a, b) => {
                self.acc_each(a, gout, |_, g| g);
                self.acc_each(b, gout, |_, g| -g);
            }
            Op::Mul(a, b) => {
                let bv = self.value(b).data().to_vec();
                let av = self.value(a).data().to_vec();
                self.acc_each(a, gout, |i, g| g * bv[i]);
                self.acc_each(b, gout, |i, g| g * av[i]);
            }
            Op::Div(a, b) => {
                let bv = self.value(b).data().to_vec();
                let av = self.value(a).data().to_vec();
                self.acc_each(a, gout, |i, g| g / bv[i]);
                self.acc_each(b, gout, |i, g| -g * av[i] / (bv[i] * bv[i]));
            }
            Op::Min(a, b) | Op::Max(a, b) => {
                let is_min = matches!(op, Op::Min(..));
                let take_a: Vec<bool> = self
                    .value(a)
                    .data()
                    .iter()
                    .zip(self.value(b).data())
                    .map(|(&x, &y)| if is_min { x <= y } else { x >= y })
                    .collect();
                self.acc_each(a, gout, |i, g| if take_a[i] { g } else { T::zero() });
                self.acc_each(b, gout, |i, g| if take_a[i] { T::zero() } else { g });
            }
            Op::AddRow { x, bias } => {
                self.acc_each(x, gout, |_, g| g);
                self.acc(bias, |gb, _| {
                    let d = gb.len();
                    for row in gout.chunks(d) {
                        for (o, &u) in gb.iter_mut().zip(row) {
                            *o += u;
                        }
                    }
                });
            }
            Op::Affine { x, scale } => self.acc_each(x, gout, |_, g| g * scale),
            Op::Mask { x, ref mask } => self.acc_each(x, gout, |i, g| g * mask[i]),
            Op::Relu(x) => {
                let xv = self.value(x).data().to_vec();
                self.acc_each(x, gout, |i, g| if xv[i] > T::zero() { g } else { T::zero() });
            }
            Op::Sigmoid(x) => {
                let y = self.nodes[node].value.data().to_vec();
                self.acc_each(x, gout, |i, g| g * y[i] * (T::one() - y[i]));
            }
            Op::Abs(x) => {
                let xv = self.value(x).data().to_vec();
                self.acc_each(x, gout, |i, g| {
                    if xv[i] > T::zero() {
                        g
                    } else if xv[i] < T::zero() {
                        -g
                    } else {
                        T::zero()
                    }
                });
            }
            Op::Softmax { x, outer, n, inner } => {
                let y = self.nodes[node].value.data().to_vec();
                self.acc(x, |gx, _| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * n * inner + i;
                            let mut dot = T::zero();
                            for j in 0..n {
                                let p = base + j * inner;
                                dot += gout[p] * y[p];
                            }
                            for j in 0..n {
                                let p = base + j * inner;
                                gx[p] += y[p] * (gout[p] - dot);
                            }
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                ref xhat,
                ref rstd,
            } => {
                let d = self.value(gain).len();
                let gv = self.value(gain).data().to_vec();
                self.acc(x, |gx, _| {
                    let dn = T::c(d as f64);
                    for (r, &rs) in rstd.iter().enumerate() {
                        let off = r * d;
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for j in 0..d {
                            let dh = gout[off + j] * gv[j];
                            m1 += dh;
                            m2 += dh * xhat[off + j];
                        }
                        m1 /= dn;
                        m2 /= dn;
                        for j in 0..d {
                            let dh = gout[off + j] * gv[j];
                            gx[off + j] += rs * (dh - m1 - xhat[off + j] * m2);
                        }
                    }
                });
                self.acc(gain, |gg, _| {
                    for (row, hrow) in gout.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            gg[j] += row[j] * hrow[j];
                        }
                    }
                });
                self.acc(bias, |gb, _| {
                    for row in gout.chunks(d) {
                        for (o, &u) in gb.iter_mut().zip(row) {
                            *o += u;
                        }
                    }
                });
            }
            Op::Concat {
                ref parts,
                outer,
                ref chunks,
            } => {
                let total: usize = chunks.iter().sum();
                let mut off = 0;
                for (&p, &c) in parts.iter().zip(chunks) {
                    self.acc(p, |gp, _| {
                        for o in 0..outer {
                            let src = &gout[o * total + off..o * total + off + c];
                            for (d, &s) in gp[o * c..(o + 1) * c].iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    });
                    off += c;
                }
            }
            Op::Slice {
                x,
                outer,
                full,
                start,
                len,
            } => {
                self.acc(x, |gx, _| {
                    for o in 0..outer {
                        let dst = &mut gx[o * full + start..o * full + start + len];
                        for (d, &s) in dst.iter_mut().zip(&gout[o * len..(o + 1) * len]) {
                            *d += s;
                        }
                    }
                });
            }
            Op::GatherRows { x, ref idx } => {
                let c = self.shape(x)[1];
                self.acc(x, |gx, _| {
                    for (r, &i) in idx.iter().enumerate() {
                        for j in 0..c {
                            gx[i * c + j] += gout[r * c + j];
                        }
                    }
                });
            }
            Op::GatherCols { x, ref idx } => {
                let (rows, c) = self.dims2(x).unwrap();
                let n = idx.len();
                self.acc(x, |gx, _| {
                    for r in 0..rows {
                        for (k, &j) in idx.iter().enumerate() {
                            gx[r * c + j] += gout[r * n + k];
                        }
                    }
                });
            }
            Op::Transpose(x) => {
                let (r, c) = self.dims2(x).unwrap();
                self.acc(x, |gx, _| {
                    for i in 0..r {
                        for j in 0..c {
                            gx[i * c + j] += gout[j * r + i];
                        }
                    }
                });
            }
            Op::Reshape(x) => self.acc_each(x, gout, |_, g| g),
            Op::Conv2d {
                x,
                kernel,
                bias,
                geom,
                ref cols,
            } => {
                let ckk = geom.cin * geom.k * geom.k;
                let hw = geom.ho * geom.wo;
                self.acc(kernel, |gk, _| {
                    gemm(geom.cout, hw, ckk, T::one(), gout, false, cols, true, T::one(), gk);
                });
                if let Some(b) = bias {
                    self.acc(b, |gb, _| {
                        for (o, chunk) in gout.chunks(hw).enumerate() {
                            gb[o] += chunk.iter().copied().sum::<T>();
                        }
                    });
                }
                if self.rg(x) {
                    let mut dcols = vec![T::zero(); ckk * hw];
                    gemm(
                        ckk,
                        geom.cout,
                        hw,
                        T::one(),
                        self.value(kernel).data(),
                        true,
                        gout,
                        false,
                        T::zero(),
                        &mut dcols,
                    );
                    self.acc(x, |gx, _| col2im_add(&dcols, &geom, gx));
                }
            }
            Op::Sum(x) => {
                let g = gout[0];
                self.acc(x, |gx, _| gx.iter_mut().for_each(|v| *v += g));
            }
            Op::Mean(x) => {
                let n = self.value(x).len();
                let g = gout[0] / T::c(n as f64);
                self.acc(x, |gx, _| gx.iter_mut().for_each(|v| *v += g));
            }
            Op::MeanRows(x) => {
                let (r, c) = self.dims2(x).unwrap();
                let rn = T::c(r as f64);
                self.acc(x, |gx, _| {
                    for row in gx.chunks_mut(c) {
                        for (d, &s) in row.iter_mut().zip(gout) {
                            *d += s / rn;
                        }
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                ref targets,
                ref weights,
                ref probs,
                wsum,
            } => {
                let c = weights.len();
                let scale = gout[0] / wsum;
                self.acc(logits, |gl, _| {
                    for (i, &t) in targets.iter().enumerate() {
                        let w = weights[t] * scale;
                        for j in 0..c {
                            let onehot = if j == t { T::one() } else { T::zero() };
                            gl[i * c + j] += w * (probs[i * c + j] - onehot);
                        }
                    }
                });
            }
        }
    }
}

#[inline]
fn sigmoid<T: Real>(u: T) -> T {
    if u >= T::zero() {
        T::one() / (T::one() + (-u).exp())
    } else {
        let e = u.exp();
        e / (T::one() + e)
    }
}

fn im2col<T: Real>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let hw = g.ho * g.wo;
    let mut cols = vec![T::zero(); g.cin * g.k * g.k * hw];
    for c in 0..g.cin {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &x[(c * g.h + iy as usize) * g.w..(c * g.h + iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[oy * g.wo + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im_add<T: Real>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let hw = g.ho * g.wo;
    for c in 0..g.cin {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let src = &cols[row * hw..(row + 1) * hw];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let base = (c * g.h + iy as usize) * g.w;
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dx[base + ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

fn op_name<T>(op: &Op<T>) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::MatMul { .. } => "matmul",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Div(..) => "div",
        Op::Min(..) => "minimum",
        Op::Max(..) => "maximum",
        Op::AddRow { .. } => "add_row",
        Op::Affine { .. } => "affine",
        Op::Mask { .. } => "dropout",
        Op::Relu(_) => "relu",
        Op::Sigmoid(_) => "sigmoid",
        Op::Abs(_) => "abs",
        Op::Softmax { .. } => "softmax",
        Op::LayerNorm { .. } => "layer_norm",
        Op::Concat { .. } => "concat",
        Op::Slice { .. } => "slice",
        Op::GatherRows { .. } => "gather_rows",
        Op::GatherCols { .. } => "gather_cols",
        Op::Transpose(_) => "transpose",
        Op::Reshape(_) => "reshape",
        Op::Conv2d { .. } => "conv2d",
        Op::Sum(_) => "sum",
        Op::Mean(_) => "mean",
        Op::MeanRows(_) => "mean_rows",
        Op::CrossEntropy { .. } => "cross_entropy",
    }
}
