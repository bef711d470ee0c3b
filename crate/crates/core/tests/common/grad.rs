//! Central-difference gradient checks for every differentiable graph op.

use fsdetr_core::matching::{set_loss, Assignment, Box as MBox, LossWeights, Target};
use fsdetr_core::ndgrad::{multi_head_attention, AttentionWeights, Graph, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const H: f64 = 1e-5;
pub const TOL: f64 = 1e-4;

type Build = dyn Fn(&mut Graph<f64>, &[Var]) -> Var;

/// Worst relative error seen for one op.
#[derive(Debug, Clone)]
pub struct OpReport {
    pub op: &'static str,
    pub instances: usize,
    pub worst: f64,
}

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    // Keep clear of the kinks of relu/abs/min/max.
    let data = (0..n)
        .map(|_| {
            let v: f64 = rng.random_range(0.05..1.5);
            if rng.random::<bool>() { v } else { -v }
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

/// Reduce any output to a scalar through fixed random weights so every
/// output element carries a distinct gradient.
fn weighted_sum(g: &mut Graph<f64>, out: Var, seed: u64) -> Var {
    let shape = g.shape(out).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = g.constant(rand_t(&mut rng, &shape));
    let p = g.mul(out, w).unwrap();
    g.sum(p).unwrap()
}

fn eval(inputs: &[Tensor<f64>], f: &Build) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|x| g.param(x.clone())).collect();
    let out = f(&mut g, &vars);
    g.value(out).data()[0]
}

/// Relative error `‖a − n‖ / max(‖a‖, ‖n‖)` over all inputs, with a floor
/// so exactly-zero gradients compare absolutely.
pub fn check(inputs: &[Tensor<f64>], f: &Build) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|x| g.param(x.clone())).collect();
    let out = f(&mut g, &vars);
    g.backward(out).unwrap();
    let mut diff2 = 0.0;
    let mut a2 = 0.0f64;
    let mut n2 = 0.0f64;
    for (w, &v) in vars.iter().enumerate() {
        let analytic = g.grad(v).map(<[f64]>::to_vec).unwrap_or(vec![0.0; inputs[w].len()]);
        for (i, a) in analytic.iter().enumerate() {
            let mut plus = inputs.to_vec();
            plus[w].data_mut()[i] += H;
            let mut minus = inputs.to_vec();
            minus[w].data_mut()[i] -= H;
            let n = (eval(&plus, f) - eval(&minus, f)) / (2.0 * H);
            diff2 += (a - n).powi(2);
            a2 += a * a;
            n2 += n * n;
        }
    }
    diff2.sqrt() / a2.sqrt().max(n2.sqrt()).max(1e-6)
}

type Instance = (Vec<Tensor<f64>>, Box<Build>);

struct Case {
    op: &'static str,
    make: fn(&mut ChaCha8Rng) -> Instance,
}

fn dims(rng: &mut ChaCha8Rng) -> (usize, usize) {
    (rng.random_range(1..5), rng.random_range(1..6))
}

macro_rules! unary {
    ($op:expr, $f:expr) => {
        Case {
            op: $op,
            make: |r| {
                let (m, n) = dims(r);
                let s = r.random();
                (vec![rand_t(r, &[m, n])], Box::new(move |g, v| {
                    let y = ($f)(g, v[0]);
                    weighted_sum(g, y, s)
                }))
            },
        }
    };
}

macro_rules! binary {
    ($op:expr, $f:expr) => {
        Case {
            op: $op,
            make: |r| {
                let (m, n) = dims(r);
                let s = r.random();
                let a = rand_t(r, &[m, n]);
                let mut b = rand_t(r, &[m, n]);
                // Separate min/max operands by more than the step.
                for (x, y) in a.data().iter().zip(b.data_mut()) {
                    if (x - *y).abs() < 0.05 {
                        *y += 0.1;
                    }
                }
                (vec![a, b], Box::new(move |g, v| {
                    let y = ($f)(g, v[0], v[1]);
                    weighted_sum(g, y, s)
                }))
            },
        }
    };
}

fn cases() -> Vec<Case> {
    vec![
        Case {
            op: "matmul",
            make: |r| {
                let (m, k) = dims(r);
                let n = r.random_range(1..5);
                let s = r.random();
                (vec![rand_t(r, &[m, k]), rand_t(r, &[k, n])], Box::new(move |g, v| {
                    let y = g.matmul(v[0], v[1]).unwrap();
                    weighted_sum(g, y, s)
                }))
            },
        },
        Case {
            op: "matmul_t",
            make: |r| {
                let (m, k) = dims(r);
                let n = r.random_range(1..5);
                let (ta, tb) = (r.random::<bool>(), r.random::<bool>());
                let a = if ta { [k, m] } else { [m, k] };
                let b = if tb { [n, k] } else { [k, n] };
                let s = r.random();
                (vec![rand_t(r, &a), rand_t(r, &b)], Box::new(move |g, v| {
                    let y = g.matmul_t(v[0], ta, v[1], tb).unwrap();
                    weighted_sum(g, y, s)
                }))
            },
        },
        binary!("add", |g: &mut Graph<f64>, a, b| g.add(a, b).unwrap()),
        binary!("sub", |g: &mut Graph<f64>, a, b| g.sub(a, b).unwrap()),
        binary!("mul", |g: &mut Graph<f64>, a, b| g.mul(a, b).unwrap()),
        binary!("div", |g: &mut Graph<f64>, a, b| g.div(a, b).unwrap()),
        binary!("minimum", |g: &mut Graph<f64>, a, b| g.minimum(a, b).unwrap()),
        binary!("maximum", |g: &mut Graph<f64>, a, b| g.maximum(a, b).unwrap()),
        Case {
            op: "add_row",
            make: |r| {
                let (m, n) = dims(r);
                let s = r.random();
                (vec![rand_t(r, &[m, n]), rand_t(r, &[n])], Box::new(move |g, v| {
                    let y = g.add_row(v[0], v[1]).unwrap();
                    weighted_sum(g, y, s)
                }))
            },
        },
        Case {
            op: "affine",
            make: |r| {
                let (m, n) = dims(r);
                let (a, b, s) = (r.random_range(-2.0..2.0), r.random_range(-1.0..1.0), r.random());
                (vec![rand_t(r, &[m, n])], Box::new(move |g, v| {
                    let y = g.affine(v[0], a, b).unwrap();
                    weighted_sum(g, y, s)
                }))
            },
        },
        unary!("relu", |g: &mut Graph<f64>, x| g.relu(x).unwrap()),
        unary!("sigmoid", |g: &mut Graph<f64>, x| g.sigmoid(x).unwrap()),
        unary!("abs", |g: &mut Graph<f64>, x| g.abs(x).unwrap()),
        unary!("transpose", |g: &mut Graph<f64>, x| g.transpose(x).unwrap()),
        unary!("sum", |g: &mut Graph<f64>, x| g.sum(x).unwrap()),
        unary!("mean", |g: &mut Graph<f64>, x| g.mean(x).unwrap()),
        unary!("mean_rows", |g: &mut Graph<f64>, x| g.mean_rows(x).unwrap()),
        unary!("softmax_rows", |g: &mut Graph<f64>, x| g.softmax(x, 1).unwrap()),
        unary!("softmax_cols", |g: &mut Graph<f64>, x| g.softmax(x, 0).unwrap()),
        Case {
            op: "dropout",
            make: |r| {
                let (m, n) = dims(r);
                let (s, mask_seed) = (r.random(), r.random::<u64>());
                (vec![rand_t(r, &[m, n])], Box::new(move |g, v| {
                    let mut mr = ChaCha8Rng::seed_from_u64(mask_seed);
                    let y = g.dropout(v[0], 0.3, true, &mut mr).unwrap();
                    weighted_sum(g, y, s)
                }))
            },
        },
        Case {
            op: "layer_norm",
            make: |r| {
                let m = r.random_range(1..5);
                let n = r.random_range(2..7);
                let s = r.random();
                (vec![rand_t(r, &[m, n]), rand_t(r, &[n]), rand_t(r, &[n])], Box::new(move |g, v| {
                    let y = g.layer_norm(v[0], v[1], v[2], 1e-5).unwrap();
                    weighted_sum(g, y, s)
                }))
            },
        },
        Case {
            op: "concat",
            make: |r| {
                let (m, n) = dims(r);
                let axis = r.random_range(0..2);
                let other = if axis == 0 { [r.random_range(1..4), n] } else { [m, r.random_range(1..4)] };
                let s = r.random();
                (vec![rand_t(r, &[m, n]), rand_t(r, &other)], Box::new(move |g, v| {
                    let y = g.concat(&[v[0], v[1]], axis).unwrap();
                    weighted_sum(g, y, s)
                }))
            },
        },
        Case {
            op: "slice",
            make: |r| {
                let m = r.random_range(2..6);
                let n = r.random_range(2..6);
                let axis = r.random_range(0..2);
                let ext = if axis == 0 { m } else { n };
                let start = r.random_range(0..ext);
                let len = r.random_range(1..=ext - start);
                let s = r.random();
                (vec![rand_t(r, &[m, n])], Box::new(move |g, v| {
                    let y = g.slice(v[0], axis, start, len).unwrap();
                    weighted_sum(g, y, s)
                }))
            },
        },
        Case {
            op: "gather_rows",
            make: |r| {
                let (m, n) = dims(r);
                let idx: Vec<usize> = (0..r.random_range(1..6)).map(|_| r.random_range(0..m)).collect();
                let s = r.random();
                (vec![rand_t(r, &[m, n])], Box::new(move |g, v| {
                    let y = g.gather_rows(v[0], &idx).unwrap();
                    weighted_sum(g, y, s)
                }))
            },
        },
        Case {
            op: "gather_cols",
            make: |r| {
                let (m, n) = dims(r);
                let idx: Vec<usize> = (0..r.random_range(1..6)).map(|_| r.random_range(0..n)).collect();
                let s = r.random();
                (vec![rand_t(r, &[m, n])], Box::new(move |g, v| {
                    let y = g.gather_cols(v[0], &idx).unwrap();
                    weighted_sum(g, y, s)
                }))
            },
        },
        Case {
            op: "reshape",
            make: |r| {
                let (m, n) = dims(r);
                let s = r.random();
                (vec![rand_t(r, &[m, n])], Box::new(move |g, v| {
                    let y = g.reshape(v[0], &[n, m]).unwrap();
                    weighted_sum(g, y, s)
                }))
            },
        },
        Case {
            op: "conv2d",
            make: |r| {
                let cin = r.random_range(1..3);
                let cout = r.random_range(1..3);
                let k = [1, 3][r.random_range(0..2)];
                let hw = r.random_range(k..k + 3);
                let stride = r.random_range(1..3);
                let pad = r.random_range(0..2);
                let s = r.random();
                (
                    vec![rand_t(r, &[cin, hw, hw]), rand_t(r, &[cout, cin, k, k]), rand_t(r, &[cout])],
                    Box::new(move |g, v| {
                        let y = g.conv2d(v[0], v[1], Some(v[2]), stride, pad).unwrap();
                        weighted_sum(g, y, s)
                    }),
                )
            },
        },
        Case {
            op: "cross_entropy_logits",
            make: |r| {
                let m = r.random_range(1..5);
                let n = r.random_range(2..6);
                let targets: Vec<usize> = (0..m).map(|_| r.random_range(0..n)).collect();
                let weights: Vec<f64> = (0..n).map(|_| r.random_range(0.1..1.0)).collect();
                (vec![rand_t(r, &[m, n])], Box::new(move |g, v| {
                    g.cross_entropy_logits(v[0], &targets, &weights).unwrap()
                }))
            },
        },
        Case {
            op: "set_loss",
            make: |r| {
                let n = r.random_range(2..5);
                let nt = r.random_range(1..=n.min(2));
                let logits = rand_t(r, &[n, 3]);
                let boxes: Vec<f64> = (0..n)
                    .flat_map(|_| [r.random_range(0.3..0.7), r.random_range(0.3..0.7), r.random_range(0.1..0.4), r.random_range(0.1..0.4)])
                    .collect();
                let targets: Vec<Target> = (0..nt)
                    .map(|_| Target {
                        class: r.random_range(0..2),
                        bbox: MBox::new(r.random_range(0.3..0.7), r.random_range(0.3..0.7), r.random_range(0.1..0.4), r.random_range(0.1..0.4)),
                    })
                    .collect();
                // Matching is piecewise constant; hold it fixed.
                let mut perm: Vec<usize> = (0..n).collect();
                perm.shuffle(r);
                let pairs: Vec<(usize, usize)> = (0..nt).map(|j| (perm[j], j)).collect();
                let unmatched = perm[nt..].to_vec();
                let assignment = Assignment { pairs, unmatched };
                (vec![logits, Tensor::new(&[n, 4], boxes).unwrap()], Box::new(move |g, v| {
                    set_loss(g, v[0], v[1], &targets, &assignment, &LossWeights::default()).unwrap().total
                }))
            },
        },
        Case {
            op: "multi_head_attention",
            make: |r| {
                let heads = r.random_range(1..3);
                let d = 2 * heads;
                let (lq, lk) = (r.random_range(1..4), r.random_range(1..4));
                let s = r.random();
                let mut ins = vec![rand_t(r, &[lq, d]), rand_t(r, &[lk, d]), rand_t(r, &[lk, d])];
                for _ in 0..4 {
                    ins.push(rand_t(r, &[d, d]));
                    ins.push(rand_t(r, &[d]));
                }
                (ins, Box::new(move |g, v| {
                    let w = AttentionWeights {
                        wq: v[3],
                        bq: v[4],
                        wk: v[5],
                        bk: v[6],
                        wv: v[7],
                        bv: v[8],
                        wo: v[9],
                        bo: v[10],
                    };
                    let o = multi_head_attention(g, v[0], v[1], v[2], &w, heads).unwrap();
                    weighted_sum(g, o.out, s)
                }))
            },
        },
    ]
}

/// Run `instances` random checks of every op.
pub fn run(instances: usize, seed: u64) -> Vec<OpReport> {
    cases()
        .into_iter()
        .map(|c| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fxhash(c.op));
            let worst = (0..instances)
                .map(|_| {
                    let (inputs, f) = (c.make)(&mut rng);
                    check(&inputs, f.as_ref())
                })
                .fold(0.0, f64::max);
            OpReport {
                op: c.op,
                instances,
                worst,
            }
        })
        .collect()
}

fn fxhash(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3))
}
