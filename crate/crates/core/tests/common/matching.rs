//! Brute-force and hand-derived references for the matching module.

use fsdetr_core::matching::{assignment_cost, giou, hungarian, iou, match_predictions, set_loss, Box, CornerBox, LossWeights, Target};
use fsdetr_core::ndgrad::{Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Minimum total cost over all injective row→column (or column→row) maps.
pub fn brute_force_min(cost: &[Vec<f64>]) -> f64 {
    let rows = cost.len();
    let cols = cost[0].len();
    fn go(cost: &[Vec<f64>], r: usize, used: &mut Vec<bool>, transpose: bool, acc: f64, best: &mut f64) {
        let (outer, inner) = if transpose { (cost[0].len(), cost.len()) } else { (cost.len(), cost[0].len()) };
        if r == outer {
            *best = best.min(acc);
            return;
        }
        for c in 0..inner {
            if !used[c] {
                used[c] = true;
                let v = if transpose { cost[c][r] } else { cost[r][c] };
                go(cost, r + 1, used, transpose, acc + v, best);
                used[c] = false;
            }
        }
    }
    let transpose = rows > cols;
    let mut used = vec![false; if transpose { rows } else { cols }];
    let mut best = f64::INFINITY;
    go(cost, 0, &mut used, transpose, 0.0, &mut best);
    best
}

/// Random integer-valued matrices (so sums are exact), up to `max`×`max`.
/// Returns the number of mismatches against brute force.
pub fn hungarian_mismatches(n: usize, max: usize, seed: u64) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .filter(|_| {
            let r = rng.random_range(1..=max);
            let c = rng.random_range(1..=max);
            let cost: Vec<Vec<f64>> = (0..r)
                .map(|_| (0..c).map(|_| rng.random_range(-50..100) as f64).collect())
                .collect();
            let pairs = hungarian(&cost).unwrap();
            pairs.len() != r.min(c) || assignment_cost(&cost, &pairs) != brute_force_min(&cost)
        })
        .count()
}

pub fn random_corner(rng: &mut ChaCha8Rng) -> CornerBox {
    let x1 = rng.random_range(0.0..0.9);
    let y1 = rng.random_range(0.0..0.9);
    CornerBox::new(x1, y1, x1 + rng.random_range(0.01..0.5), y1 + rng.random_range(0.01..0.5))
}

#[derive(Debug)]
pub struct GiouSuite {
    pub self_max_err: f64,
    pub nested_max_err: f64,
    pub disjoint_err: f64,
    pub giou_above_iou: usize,
    pub pairs: usize,
}

pub fn giou_suite(pairs: usize, seed: u64) -> GiouSuite {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut self_max_err = 0.0f64;
    let mut nested_max_err = 0.0f64;
    let mut giou_above_iou = 0;
    for _ in 0..pairs {
        let a = random_corner(&mut rng);
        let b = random_corner(&mut rng);
        self_max_err = self_max_err.max((giou(a, a) - 1.0).abs());
        if giou(a, b) > iou(a, b) {
            giou_above_iou += 1;
        }
        // A box shrunk inside `a` has `a` as its enclosing box.
        let (fx, fy) = (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0));
        let (sx, sy) = (rng.random_range(0.1..1.0), rng.random_range(0.1..1.0));
        let (w, h) = (a.x2 - a.x1, a.y2 - a.y1);
        let ix1 = a.x1 + fx * (1.0 - sx) * w;
        let iy1 = a.y1 + fy * (1.0 - sy) * h;
        let inner = CornerBox::new(ix1, iy1, ix1 + sx * w, iy1 + sy * h);
        nested_max_err = nested_max_err.max((giou(a, inner) - iou(a, inner)).abs());
    }
    let disjoint_err = (giou(CornerBox::new(0.0, 0.0, 1.0, 1.0), CornerBox::new(2.0, 0.0, 3.0, 1.0)) + 1.0 / 3.0).abs();
    GiouSuite {
        self_max_err,
        nested_max_err,
        disjoint_err,
        giou_above_iou,
        pairs,
    }
}

/// Two queries, one target. Reference value from a separate scalar
/// implementation (softmax, matching cost, weighted CE, L1 and GIoU written
/// out longhand); query 0 wins the match.
pub const FIXTURE_EXPECTED: f64 = 1.8147799287321882;
pub const FIXTURE_CE: f64 = 0.20922437317663223;
pub const FIXTURE_L1: f64 = 0.15000000000000008;
pub const FIXTURE_GIOU: f64 = 0.4277777777777778;

pub struct FixtureValue {
    pub total: f64,
    pub ce: f64,
    pub l1: f64,
    pub giou: f64,
    pub pairs: Vec<(usize, usize)>,
}

pub fn set_loss_fixture() -> FixtureValue {
    let logits = Tensor::from_rows(&[vec![2.0, 0.5], vec![0.1, 1.2]]).unwrap();
    let boxes = Tensor::from_rows(&[vec![0.5, 0.5, 0.4, 0.4], vec![0.3, 0.3, 0.2, 0.2]]).unwrap();
    let targets = [Target {
        class: 0,
        bbox: Box::new(0.55, 0.5, 0.4, 0.3),
    }];
    loss_of(&logits, &boxes, &targets)
}

pub fn loss_of(logits: &Tensor<f64>, boxes: &Tensor<f64>, targets: &[Target]) -> FixtureValue {
    let w = LossWeights::default();
    let mut g = Graph::new();
    let l = g.param(logits.clone());
    let b = g.param(boxes.clone());
    let p = g.softmax(l, 1).unwrap();
    let a = match_predictions(g.value(p), g.value(b), targets, &w).unwrap();
    let s = set_loss(&mut g, l, b, targets, &a, &w).unwrap();
    FixtureValue {
        total: g.value(s.total).data()[0],
        ce: s.ce,
        l1: s.l1,
        giou: s.giou,
        pairs: a.pairs,
    }
}

/// Loss with exact boxes and `p̂ = 1 − 1e-6` on every correct class (∅ for
/// unmatched queries).
pub fn perfect_prediction_loss() -> f64 {
    let p: f64 = 1.0 - 1e-6;
    // Two classes plus ∅: logits giving probability p to one entry.
    let hi = (p / ((1.0 - p) / 2.0)).ln();
    let row = |c: usize| {
        let mut r = vec![0.0; 3];
        r[c] = hi;
        r
    };
    let targets = [
        Target {
            class: 0,
            bbox: Box::new(0.3, 0.3, 0.2, 0.2),
        },
        Target {
            class: 1,
            bbox: Box::new(0.7, 0.6, 0.3, 0.2),
        },
    ];
    let logits = Tensor::from_rows(&[row(1), row(2), row(0), row(2)]).unwrap();
    let boxes = Tensor::from_rows(&[
        targets[1].bbox.to_array().to_vec(),
        vec![0.5, 0.5, 0.1, 0.1],
        targets[0].bbox.to_array().to_vec(),
        vec![0.2, 0.8, 0.1, 0.1],
    ])
    .unwrap();
    loss_of(&logits, &boxes, &targets).total
}
