use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;

fn t(rows: &[Vec<f64>]) -> Tensor<f64> {
    Tensor::from_rows(rows).unwrap()
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

/// Central differences of `f` w.r.t. every entry of the `which`-th input.
fn numeric_grad(
    inputs: &[Tensor<f64>],
    which: usize,
    f: &dyn Fn(&mut Graph<f64>, &[Var]) -> Var,
) -> Vec<f64> {
    let h = 1e-5;
    let eval = |ins: &[Tensor<f64>]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = ins.iter().map(|x| g.param(x.clone())).collect();
        let out = f(&mut g, &vars);
        g.value(out).data()[0]
    };
    (0..inputs[which].len())
        .map(|i| {
            let mut plus = inputs.to_vec();
            plus[which].data_mut()[i] += h;
            let mut minus = inputs.to_vec();
            minus[which].data_mut()[i] -= h;
            (eval(&plus) - eval(&minus)) / (2.0 * h)
        })
        .collect()
}

fn check_grads(inputs: &[Tensor<f64>], f: &dyn Fn(&mut Graph<f64>, &[Var]) -> Var) {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|x| g.param(x.clone())).collect();
    let out = f(&mut g, &vars);
    g.backward(out).unwrap();
    for (w, &v) in vars.iter().enumerate() {
        let analytic = g.grad(v).map(<[f64]>::to_vec).unwrap_or(vec![0.0; inputs[w].len()]);
        let numeric = numeric_grad(inputs, w, f);
        for (a, n) in analytic.iter().zip(&numeric) {
            let rel = (a - n).abs() / (a.abs() + n.abs()).max(1e-3);
            assert!(rel < 1e-4, "input {w}: analytic {a} vs numeric {n}");
        }
    }
}

#[test]
fn matmul_identity_and_hand_values() {
    let mut g = Graph::new();
    let i2 = g.constant(t(&[vec![1.0, 0.0], vec![0.0, 1.0]]));
    let a = g.constant(t(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
    let c = g.matmul(i2, a).unwrap();
    assert_eq!(g.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);

    let b = g.constant(t(&[vec![5.0], vec![6.0]]));
    let c = g.matmul(a, b).unwrap();
    assert_eq!(g.value(c).shape(), &[2, 1]);
    assert_eq!(g.value(c).data(), &[17.0, 39.0]);
}

#[test]
fn matmul_zero_annihilates() {
    let mut g = Graph::<f64>::new();
    let z = g.constant(Tensor::zeros(&[2, 3]));
    let r = g.constant(Tensor::from_f64(&[3, 4], &[0.3, -1.2, 2.0, 0.7, 1.1, 0.0, -0.4, 5.0, 2.2, 0.1, 0.9, -3.0]).unwrap());
    let c = g.matmul(z, r).unwrap();
    assert_eq!(g.value(c).shape(), &[2, 4]);
    assert!(g.value(c).data().iter().all(|&x| x == 0.0));
}

#[test]
fn matmul_shape_mismatch_is_dimension_error() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 3]));
    assert!(matches!(g.matmul(a, b), Err(NdError::Shape(_))));
}

#[test]
fn softmax_examples() {
    let mut g = Graph::new();
    let x = g.constant(t(&[vec![0.0, 0.0, 0.0]]));
    let y = g.softmax(x, 1).unwrap();
    assert!(close(g.value(y).data(), &[1.0 / 3.0; 3], 1e-15));

    let x = g.constant(t(&[vec![1000.0, 1000.0]]));
    let y = g.softmax(x, 1).unwrap();
    assert_eq!(g.value(y).data(), &[0.5, 0.5]);

    let x = g.constant(t(&[vec![0.0, 3f64.ln()]]));
    let y = g.softmax(x, 1).unwrap();
    assert!(close(g.value(y).data(), &[0.25, 0.75], 1e-15));
}

#[test]
fn softmax_along_first_axis() {
    let mut g = Graph::new();
    let x = g.constant(t(&[vec![0.0, 1.0], vec![0.0, 1.0]]));
    let y = g.softmax(x, 0).unwrap();
    assert!(close(g.value(y).data(), &[0.5; 4], 1e-15));
}

#[test]
fn layer_norm_examples() {
    let mut g = Graph::new();
    let ones = g.constant(Tensor::full(&[2], 1.0));
    let zeros = g.constant(Tensor::zeros(&[2]));
    let x = g.constant(t(&[vec![4.0, 4.0]]));
    let y = g.layer_norm(x, ones, zeros, 1e-5).unwrap();
    assert_eq!(g.value(y).data(), &[0.0, 0.0]);

    let x = g.constant(t(&[vec![1.0, 3.0]]));
    let y = g.layer_norm(x, ones, zeros, 1e-12).unwrap();
    assert!(close(g.value(y).data(), &[-1.0, 1.0], 1e-9));

    let gain0 = g.constant(Tensor::zeros(&[2]));
    let bias = g.constant(Tensor::from_f64(&[2], &[0.5, -2.0]).unwrap());
    let x = g.constant(t(&[vec![7.0, -1.0], vec![0.3, 0.2]]));
    let y = g.layer_norm(x, gain0, bias, 1e-5).unwrap();
    assert_eq!(g.value(y).data(), &[0.5, -2.0, 0.5, -2.0]);
}

#[test]
fn elementwise_examples() {
    let mut g = Graph::new();
    let x = g.constant(t(&[vec![-1.0, 0.0, 2.0]]));
    let r = g.relu(x).unwrap();
    assert_eq!(g.value(r).data(), &[0.0, 0.0, 2.0]);
    let z = g.constant(Tensor::scalar(0.0));
    let s = g.sigmoid(z).unwrap();
    assert_eq!(g.value(s).data(), &[0.5]);

    let a = g.constant(t(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
    let b = g.constant(t(&[vec![5.0, 6.0]]));
    let c = g.concat(&[a, b], 0).unwrap();
    let back_a = g.slice_rows(c, 0, 2).unwrap();
    let back_b = g.slice_rows(c, 2, 1).unwrap();
    assert_eq!(g.value(back_a), g.value(a));
    assert_eq!(g.value(back_b), g.value(b));

    let bad = g.constant(Tensor::zeros(&[1, 3]));
    assert!(matches!(g.concat(&[a, bad], 0), Err(NdError::Shape(_))));
    assert!(matches!(g.add(a, b), Err(NdError::Shape(_))));
}

#[test]
fn dropout_identity_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut g = Graph::new();
    let x = g.param(t(&[vec![1.0, 2.0, 3.0, 4.0]]));
    assert_eq!(g.dropout(x, 0.0, true, &mut rng).unwrap(), x);
    assert_eq!(g.dropout(x, 0.7, false, &mut rng).unwrap(), x);
    let y = g.dropout(x, 0.5, true, &mut rng).unwrap();
    for (&o, &i) in g.value(y).data().iter().zip(g.value(x).data()) {
        assert!(o == 0.0 || o == 2.0 * i);
    }
}

#[test]
fn conv2d_examples() {
    let mut g = Graph::new();
    let img = Tensor::from_f64(&[1, 3, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0]).unwrap();
    let x = g.constant(img.clone());
    let k1 = g.constant(Tensor::full(&[1, 1, 1, 1], 1.0));
    let y = g.conv2d(x, k1, None, 1, 0).unwrap();
    assert_eq!(g.value(y), &img);

    let c = 0.7f64;
    let x = g.constant(Tensor::full(&[1, 5, 5], c));
    let k3 = g.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
    let y = g.conv2d(x, k3, None, 1, 1).unwrap();
    let v = g.value(y);
    assert!((v.data()[2 * 5 + 2] - 9.0 * c).abs() < 1e-12);
    assert!((v.data()[0] - 4.0 * c).abs() < 1e-12);

    let x = g.constant(Tensor::zeros(&[2, 8, 6]));
    let k = g.constant(Tensor::zeros(&[3, 2, 3, 3]));
    let y = g.conv2d(x, k, None, 2, 1).unwrap();
    assert_eq!(g.value(y).shape(), &[3, 4, 3]);

    let k_wrong = g.constant(Tensor::zeros(&[3, 1, 3, 3]));
    assert!(matches!(g.conv2d(x, k_wrong, None, 1, 1), Err(NdError::Shape(_))));
}

#[test]
fn cross_entropy_examples() {
    let mut g = Graph::new();
    let logits = g.constant(t(&[vec![0.0, 0.0, 0.0], vec![2.0, 2.0, 2.0]]));
    let l = g.cross_entropy_logits(logits, &[0, 2], &[1.0; 3]).unwrap();
    assert!((g.value(l).data()[0] - 3f64.ln()).abs() < 1e-12);

    let logits = g.constant(t(&[vec![200.0, 0.0, 0.0]]));
    let l = g.cross_entropy_logits(logits, &[0], &[1.0; 3]).unwrap();
    assert!(g.value(l).data()[0] < 1e-12);

    // Row 0 targets class 1 (weight 1), row 1 targets the no-object class 2 (weight 0.1).
    let rows = [vec![1.0, 2.0, 0.5], vec![0.0, -1.0, 3.0]];
    let logits = g.constant(t(&rows));
    let l = g.cross_entropy_logits(logits, &[1, 2], &[1.0, 1.0, 0.1]).unwrap();
    let nll = |r: &[f64], c: usize| {
        let z: f64 = r.iter().map(|x| x.exp()).sum();
        -(r[c].exp() / z).ln()
    };
    let expected = (1.0 * nll(&rows[0], 1) + 0.1 * nll(&rows[1], 2)) / 1.1;
    assert!((g.value(l).data()[0] - expected).abs() < 1e-12);

    assert!(matches!(
        g.cross_entropy_logits(logits, &[1, 3], &[1.0; 3]),
        Err(NdError::Index(_))
    ));
}

#[test]
fn backward_simple_analytic() {
    let mut g = Graph::new();
    let x = g.param(t(&[vec![1.0, -2.0, 3.5]]));
    let s = g.sum(x).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0, 1.0]);

    let mut g = Graph::new();
    let x = g.param(t(&[vec![1.0, -2.0, 3.5]]));
    let sq = g.mul(x, x).unwrap();
    let s = g.sum(sq).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[2.0, -4.0, 7.0]);
}

#[test]
fn backward_rejects_non_scalar() {
    let mut g = Graph::new();
    let x = g.param(t(&[vec![1.0, 2.0]]));
    assert!(matches!(g.backward(x), Err(NdError::Contract(_))));
}

#[test]
fn constants_receive_no_gradient() {
    let mut g = Graph::new();
    let x = g.param(t(&[vec![1.0, 2.0]]));
    let c = g.constant(t(&[vec![3.0, 4.0]]));
    let y = g.mul(x, c).unwrap();
    let s = g.sum(y).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[3.0, 4.0]);
    assert!(g.grad(c).is_none());
}

#[test]
fn attention_singleton_key_and_uniform() {
    let mut g = Graph::new();
    let eye = |g: &mut Graph<f64>| {
        let mut d = vec![0.0; 4];
        d[0] = 1.0;
        d[3] = 1.0;
        g.constant(Tensor::new(&[2, 2], d).unwrap())
    };
    let zb = |g: &mut Graph<f64>| g.constant(Tensor::zeros(&[2]));
    let w = AttentionWeights {
        wq: eye(&mut g),
        bq: zb(&mut g),
        wk: eye(&mut g),
        bk: zb(&mut g),
        wv: eye(&mut g),
        bv: zb(&mut g),
        wo: eye(&mut g),
        bo: zb(&mut g),
    };
    let q = g.constant(t(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![3.0, -1.0]]));
    let kv = g.constant(t(&[vec![0.4, -0.6]]));
    let o = multi_head_attention(&mut g, q, kv, kv, &w, 1).unwrap();
    assert_eq!(o.attn.data(), &[1.0, 1.0, 1.0]);
    for r in 0..3 {
        assert_eq!(g.value(o.out).row(r), &[0.4, -0.6]);
    }

    let same = g.constant(t(&[vec![0.2, 0.1], vec![0.2, 0.1], vec![0.2, 0.1], vec![0.2, 0.1]]));
    let o = multi_head_attention(&mut g, q, same, same, &w, 2).unwrap();
    assert_eq!(o.attn.shape(), &[2, 3, 4]);
    assert!(o.attn.data().iter().all(|&a| (a - 0.25).abs() < 1e-15));

    // Hand-checked 2×2 single head: scores = q kᵀ / √2.
    let q = g.constant(t(&[vec![1.0, 0.0], vec![0.0, 2.0]]));
    let k = g.constant(t(&[vec![1.0, 1.0], vec![0.0, 1.0]]));
    let v = g.constant(t(&[vec![10.0, 0.0], vec![0.0, 10.0]]));
    let o = multi_head_attention(&mut g, q, k, v, &w, 1).unwrap();
    let s2 = 2f64.sqrt();
    let row = |s0: f64, s1: f64| {
        let (e0, e1) = (s0.exp(), s1.exp());
        [e0 / (e0 + e1), e1 / (e0 + e1)]
    };
    let r0 = row(1.0 / s2, 0.0);
    let r1 = row(2.0 / s2, 2.0 / s2);
    assert!(close(o.attn.data(), &[r0[0], r0[1], r1[0], r1[1]], 1e-15));
    assert!(close(
        g.value(o.out).data(),
        &[10.0 * r0[0], 10.0 * r0[1], 10.0 * r1[0], 10.0 * r1[1]],
        1e-12
    ));

    assert!(matches!(
        multi_head_attention(&mut g, q, k, v, &w, 3),
        Err(NdError::Config(_))
    ));
}

#[test]
fn gradients_match_finite_differences() {
    let a = t(&[vec![0.3, -1.2, 0.8], vec![1.5, 0.1, -0.4]]);
    let b = t(&[vec![0.7, 0.2], vec![-0.3, 1.1], vec![0.5, -0.9]]);
    check_grads(&[a.clone(), b.clone()], &|g, v| {
        let c = g.matmul(v[0], v[1]).unwrap();
        let c2 = g.mul(c, c).unwrap();
        g.sum(c2).unwrap()
    });
    check_grads(&[a.clone(), a.clone()], &|g, v| {
        let c = g.matmul_t(v[0], true, v[1], false).unwrap();
        let s = g.sigmoid(c).unwrap();
        g.sum(s).unwrap()
    });
    check_grads(std::slice::from_ref(&a), &|g, v| {
        let s = g.softmax(v[0], 1).unwrap();
        let w = g.constant(t(&[vec![1.0, -2.0, 0.5], vec![0.3, 0.9, -1.0]]));
        let p = g.mul(s, w).unwrap();
        g.sum(p).unwrap()
    });
    let gain = Tensor::from_f64(&[3], &[1.1, 0.7, -0.4]).unwrap();
    let bias = Tensor::from_f64(&[3], &[0.2, 0.0, -0.1]).unwrap();
    check_grads(&[a, gain, bias], &|g, v| {
        let y = g.layer_norm(v[0], v[1], v[2], 1e-5).unwrap();
        let w = g.constant(t(&[vec![1.0, -2.0, 0.5], vec![0.3, 0.9, -1.0]]));
        let p = g.mul(y, w).unwrap();
        g.sum(p).unwrap()
    });
}
