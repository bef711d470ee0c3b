//! Named parameter storage and the layer building blocks shared by the
//! backbone, prompt encoder and transformer.

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::ndgrad::{AttentionWeights, Graph, NdError, Real, Tensor, Var};
use crate::rng::DetRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Debug, Clone)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
}

/// Ordered collection of named trainable tensors.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
}

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    Normal(f64),
    /// Glorot uniform over a `fan_in × fan_out` matrix.
    Xavier,
    /// He normal for ReLU convolutions, fan-in = `C_in·k·k`.
    Kaiming,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], init: Init, rng: &mut DetRng) -> ParamId {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Normal(std) => {
                let d = Normal::new(0.0, std).unwrap();
                (0..n).map(|_| d.sample(rng)).collect()
            }
            Init::Xavier => {
                let (fi, fo) = (shape[0], shape[1..].iter().product::<usize>());
                let a = (6.0 / (fi + fo) as f64).sqrt();
                let d = Uniform::new_inclusive(-a, a).unwrap();
                (0..n).map(|_| d.sample(rng)).collect()
            }
            Init::Kaiming => {
                let fan_in: usize = shape[1..].iter().product();
                let d = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).unwrap();
                (0..n).map(|_| d.sample(rng)).collect()
            }
        };
        let value = Tensor::from_f64(shape, &data).expect("parameter shape");
        self.push(name.into(), value)
    }

    fn push(&mut self, name: String, value: Tensor<T>) -> ParamId {
        assert!(
            self.params.iter().all(|p| p.name != name),
            "duplicate parameter {name}"
        );
        self.params.push(Param { name, value });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                })
                .collect(),
        }
    }
}

/// One forward (and optionally backward) pass: a fresh tape plus lazily bound parameters.
pub struct Session<'a, T: Real> {
    pub g: Graph<T>,
    store: &'a ParamStore<T>,
    bound: Vec<Option<Var>>,
    pub training: bool,
    pub rng: DetRng,
}

impl<'a, T: Real> Session<'a, T> {
    pub fn new(store: &'a ParamStore<T>, training: bool, rng: DetRng) -> Self {
        Self {
            g: Graph::new(),
            store,
            bound: vec![None; store.len()],
            training,
            rng,
        }
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    /// Graph handle of a parameter; the tensor is copied onto the tape on first use.
    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.g.param(self.store.get(id).clone());
        self.bound[id.0] = Some(v);
        v
    }

    pub fn bound(&self, id: ParamId) -> Option<Var> {
        self.bound[id.0]
    }

    /// Gradients per parameter after `backward`; `None` for parameters the pass never touched.
    pub fn grads(&self) -> Vec<Option<Vec<T>>> {
        self.bound
            .iter()
            .map(|b| b.and_then(|v| self.g.grad(v).map(<[T]>::to_vec)))
            .collect()
    }

    /// Residual-branch dropout: the whole branch is zeroed with probability `p`,
    /// otherwise rescaled by `1/(1-p)`. Identity outside training.
    pub fn path_dropout(&mut self, branch: Var, p: f64) -> Result<Var, NdError> {
        if !self.training || p <= 0.0 {
            return Ok(branch);
        }
        if self.rng.random::<f64>() < p {
            self.g.scale(branch, 0.0)
        } else {
            self.g.scale(branch, 1.0 / (1.0 - p))
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, fan_in: usize, fan_out: usize, rng: &mut DetRng) -> Self {
        Self {
            w: store.add(format!("{name}.w"), &[fan_in, fan_out], Init::Xavier, rng),
            b: store.add(format!("{name}.b"), &[fan_out], Init::Zeros, rng),
        }
    }

    pub fn forward<T: Real>(&self, s: &mut Session<T>, x: Var) -> Result<Var, NdError> {
        let (w, b) = (s.p(self.w), s.p(self.b));
        let y = s.g.matmul(x, w)?;
        s.g.add_row(y, b)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Norm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl Norm {
    pub const EPS: f64 = 1e-5;

    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, d: usize, rng: &mut DetRng) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), &[d], Init::Ones, rng),
            bias: store.add(format!("{name}.bias"), &[d], Init::Zeros, rng),
        }
    }

    pub fn forward<T: Real>(&self, s: &mut Session<T>, x: Var) -> Result<Var, NdError> {
        let (g, b) = (s.p(self.gain), s.p(self.bias));
        s.g.layer_norm(x, g, b, Self::EPS)
    }
}

/// Stack of linear layers with ReLU between them (none after the last).
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, dims: &[usize], rng: &mut DetRng) -> Self {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1], rng))
            .collect();
        Self { layers }
    }

    pub fn forward<T: Real>(&self, s: &mut Session<T>, mut x: Var) -> Result<Var, NdError> {
        for (i, l) in self.layers.iter().enumerate() {
            x = l.forward(s, x)?;
            if i + 1 < self.layers.len() {
                x = s.g.relu(x)?;
            }
        }
        Ok(x)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}

impl Attention {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, d: usize, rng: &mut DetRng) -> Self {
        Self {
            q: Linear::new(store, &format!("{name}.q"), d, d, rng),
            k: Linear::new(store, &format!("{name}.k"), d, d, rng),
            v: Linear::new(store, &format!("{name}.v"), d, d, rng),
            o: Linear::new(store, &format!("{name}.o"), d, d, rng),
        }
    }

    pub fn bind<T: Real>(&self, s: &mut Session<T>) -> AttentionWeights {
        AttentionWeights {
            wq: s.p(self.q.w),
            bq: s.p(self.q.b),
            wk: s.p(self.k.w),
            bk: s.p(self.k.b),
            wv: s.p(self.v.w),
            bv: s.p(self.v.b),
            wo: s.p(self.o.w),
            bo: s.p(self.o.b),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::component_rng;

    #[test]
    fn session_binds_each_param_once_and_collects_grads() {
        let mut rng = component_rng(1, "t");
        let mut store = ParamStore::<f64>::new();
        let lin = Linear::new(&mut store, "lin", 3, 2, &mut rng);
        let mut s = Session::new(&store, true, component_rng(1, "s"));
        let x = s.g.constant(Tensor::full(&[4, 3], 1.0));
        let y = lin.forward(&mut s, x).unwrap();
        let y2 = lin.forward(&mut s, x).unwrap();
        assert_eq!(s.p(lin.w), s.p(lin.w));
        let z = s.g.add(y, y2).unwrap();
        let l = s.g.sum(z).unwrap();
        s.g.backward(l).unwrap();
        let grads = s.grads();
        assert_eq!(grads[1].as_ref().unwrap(), &vec![8.0, 8.0]);
        assert!(grads[0].as_ref().unwrap().iter().all(|&g| g == 8.0));
    }

    #[test]
    #[should_panic(expected = "duplicate parameter")]
    fn duplicate_names_rejected() {
        let mut rng = component_rng(1, "t");
        let mut store = ParamStore::<f32>::new();
        store.add("a", &[1], Init::Zeros, &mut rng);
        store.add("a", &[1], Init::Zeros, &mut rng);
    }
}
