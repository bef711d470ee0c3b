use serde::{Deserialize, Serialize};

use super::boxes::{giou, Box};
use super::hungarian::hungarian;
use super::MatchError;
use crate::ndgrad::{Graph, Real, Tensor, Var};

/// Loss and matching weights: class (λ₁), L1 box (λ₂), GIoU (λ₃), and the
/// down-weighting of no-object rows in the classification term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub class: f64,
    pub l1: f64,
    pub giou: f64,
    pub noobj: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            class: 1.0,
            l1: 5.0,
            giou: 2.0,
            noobj: 0.1,
        }
    }
}

/// Ground-truth object in episode-class space.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Target {
    pub class: usize,
    pub bbox: Box,
}

/// Optimal one-to-one pairing of predictions with targets.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Assignment {
    /// `(prediction, target)` pairs; every target appears exactly once.
    pub pairs: Vec<(usize, usize)>,
    /// Predictions assigned to the no-object class.
    pub unmatched: Vec<usize>,
}

fn box_row<T: Real>(boxes: &Tensor<T>, i: usize) -> Box {
    let r = boxes.row(i);
    Box::new(r[0].f64(), r[1].f64(), r[2].f64(), r[3].f64())
}

/// `C[i][j] = −λ₁·p̂ᵢ(cⱼ) + λ₂·‖b̂ᵢ − bⱼ‖₁ + λ₃·(1 − GIoU(b̂ᵢ, bⱼ))`.
///
/// `probs` is `N×(m+1)` and `boxes` `N×4` in centre-size form.
pub fn match_cost<T: Real>(
    probs: &Tensor<T>,
    boxes: &Tensor<T>,
    targets: &[Target],
    w: &LossWeights,
) -> Result<Vec<Vec<f64>>, MatchError> {
    let (n, c) = probs.dims2()?;
    if boxes.shape() != [n, 4] {
        return Err(MatchError::Input(format!(
            "boxes {:?} for {n} predictions",
            boxes.shape()
        )));
    }
    if targets.len() > n {
        return Err(MatchError::Capacity {
            targets: targets.len(),
            predictions: n,
        });
    }
    if let Some(t) = targets.iter().find(|t| t.class + 1 >= c) {
        return Err(MatchError::Input(format!(
            "target class {} outside the {} episode classes",
            t.class,
            c - 1
        )));
    }
    Ok((0..n)
        .map(|i| {
            let pb = box_row(boxes, i);
            let pa = pb.to_array();
            targets
                .iter()
                .map(|t| {
                    let l1: f64 = pa.iter().zip(t.bbox.to_array()).map(|(a, b)| (a - b).abs()).sum();
                    -w.class * probs.at2(i, t.class).f64()
                        + w.l1 * l1
                        + w.giou * (1.0 - giou(pb.to_xyxy(), t.bbox.to_xyxy()))
                })
                .collect()
        })
        .collect())
}

/// Hungarian matching of predictions to targets under [`match_cost`].
pub fn match_predictions<T: Real>(
    probs: &Tensor<T>,
    boxes: &Tensor<T>,
    targets: &[Target],
    w: &LossWeights,
) -> Result<Assignment, MatchError> {
    let n = probs.dims2()?.0;
    let cost = match_cost(probs, boxes, targets, w)?;
    let pairs = if targets.is_empty() { Vec::new() } else { hungarian(&cost)? };
    let mut matched = vec![false; n];
    for &(i, _) in &pairs {
        matched[i] = true;
    }
    Ok(Assignment {
        pairs,
        unmatched: (0..n).filter(|&i| !matched[i]).collect(),
    })
}

/// Scalar loss variable plus its detached components.
#[derive(Debug, Clone, Copy)]
pub struct SetLoss {
    pub total: Var,
    pub ce: f64,
    pub l1: f64,
    pub giou: f64,
}

/// Set prediction loss over a fixed assignment.
///
/// Cross-entropy runs over all `N` rows (matched rows toward their target
/// class, the rest toward ∅ with weight `noobj`); L1 and `1 − GIoU` are summed
/// over matched pairs and divided by the number of targets.
pub fn set_loss<T: Real>(
    g: &mut Graph<T>,
    logits: Var,
    boxes: Var,
    targets: &[Target],
    assignment: &Assignment,
    w: &LossWeights,
) -> Result<SetLoss, MatchError> {
    let (n, c) = g.value(logits).dims2()?;
    let m = c - 1;
    let mut classes = vec![m; n];
    for &(i, j) in &assignment.pairs {
        let t = targets
            .get(j)
            .ok_or_else(|| MatchError::Input(format!("assignment references target {j}")))?;
        classes[i] = t.class;
    }
    let mut cw = vec![1.0; c];
    cw[m] = w.noobj;
    let ce = g.cross_entropy_logits(logits, &classes, &cw)?;
    let ce_val = g.value(ce).data()[0].f64();
    let mut total = g.scale(ce, w.class)?;
    if assignment.pairs.is_empty() {
        return Ok(SetLoss {
            total,
            ce: ce_val,
            l1: 0.0,
            giou: 0.0,
        });
    }

    let nt = targets.len().max(1) as f64;
    let pred_idx: Vec<usize> = assignment.pairs.iter().map(|p| p.0).collect();
    let tgt: Vec<Box> = assignment.pairs.iter().map(|p| targets[p.1].bbox).collect();
    let k = tgt.len();
    let pred = g.gather_rows(boxes, &pred_idx)?;
    let tgt_flat: Vec<f64> = tgt.iter().flat_map(|b| b.to_array()).collect();
    let tgt_var = g.constant(Tensor::from_f64(&[k, 4], &tgt_flat)?);

    let diff = g.sub(pred, tgt_var)?;
    let adiff = g.abs(diff)?;
    let l1 = g.sum(adiff)?;
    let l1 = g.scale(l1, 1.0 / nt)?;
    let l1_val = g.value(l1).data()[0].f64();

    let giou_terms = giou_graph(g, pred, &tgt)?;
    let one_minus = g.affine(giou_terms, -1.0, 1.0)?;
    let gl = g.sum(one_minus)?;
    let gl = g.scale(gl, 1.0 / nt)?;
    let giou_val = g.value(gl).data()[0].f64();

    let l1w = g.scale(l1, w.l1)?;
    let glw = g.scale(gl, w.giou)?;
    total = g.add(total, l1w)?;
    total = g.add(total, glw)?;
    Ok(SetLoss {
        total,
        ce: ce_val,
        l1: l1_val,
        giou: giou_val,
    })
}

/// Differentiable GIoU between `k` predicted centre-size rows and constant targets; `k×1`.
fn giou_graph<T: Real>(g: &mut Graph<T>, pred: Var, tgt: &[Box]) -> Result<Var, MatchError> {
    let k = tgt.len();
    let col = |g: &mut Graph<T>, f: &dyn Fn(&Box) -> f64| {
        let v: Vec<f64> = tgt.iter().map(f).collect();
        g.constant(Tensor::from_f64(&[k, 1], &v).unwrap())
    };
    let tx1 = col(g, &|b| b.to_xyxy().x1);
    let ty1 = col(g, &|b| b.to_xyxy().y1);
    let tx2 = col(g, &|b| b.to_xyxy().x2);
    let ty2 = col(g, &|b| b.to_xyxy().y2);
    let tarea = col(g, &|b| b.area());

    let cx = g.slice_cols(pred, 0, 1)?;
    let cy = g.slice_cols(pred, 1, 1)?;
    let pw = g.slice_cols(pred, 2, 1)?;
    let ph = g.slice_cols(pred, 3, 1)?;
    let hw = g.scale(pw, 0.5)?;
    let hh = g.scale(ph, 0.5)?;
    let px1 = g.sub(cx, hw)?;
    let px2 = g.add(cx, hw)?;
    let py1 = g.sub(cy, hh)?;
    let py2 = g.add(cy, hh)?;

    let ix1 = g.maximum(px1, tx1)?;
    let ix2 = g.minimum(px2, tx2)?;
    let iy1 = g.maximum(py1, ty1)?;
    let iy2 = g.minimum(py2, ty2)?;
    let iw = g.sub(ix2, ix1)?;
    let iw = g.relu(iw)?;
    let ih = g.sub(iy2, iy1)?;
    let ih = g.relu(ih)?;
    let inter = g.mul(iw, ih)?;

    let parea = g.mul(pw, ph)?;
    let sum_area = g.add(parea, tarea)?;
    let union = g.sub(sum_area, inter)?;
    let iou = g.div(inter, union)?;

    let ex1 = g.minimum(px1, tx1)?;
    let ex2 = g.maximum(px2, tx2)?;
    let ey1 = g.minimum(py1, ty1)?;
    let ey2 = g.maximum(py2, ty2)?;
    let ew = g.sub(ex2, ex1)?;
    let eh = g.sub(ey2, ey1)?;
    let earea = g.mul(ew, eh)?;
    let gap = g.sub(earea, union)?;
    let frac = g.div(gap, earea)?;
    Ok(g.sub(iou, frac)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn probs(rows: &[Vec<f64>]) -> Tensor<f64> {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn exact_prediction_costs_minus_lambda1() {
        let b = Box::new(0.4, 0.5, 0.2, 0.3);
        let p = probs(&[vec![1.0, 0.0]]);
        let bx = Tensor::from_f64(&[1, 4], &b.to_array()).unwrap();
        let w = LossWeights::default();
        let c = match_cost(&p, &bx, &[Target { class: 0, bbox: b }], &w).unwrap();
        assert!((c[0][0] + w.class).abs() < 1e-12);
    }

    #[test]
    fn class_only_matching() {
        let w = LossWeights {
            l1: 0.0,
            giou: 0.0,
            ..LossWeights::default()
        };
        let p = probs(&[vec![0.1, 0.8, 0.1], vec![0.7, 0.2, 0.1]]);
        let bx = Tensor::from_f64(&[2, 4], &[0.5; 8]).unwrap();
        let t = [
            Target { class: 0, bbox: Box::new(0.1, 0.1, 0.1, 0.1) },
            Target { class: 1, bbox: Box::new(0.9, 0.9, 0.1, 0.1) },
        ];
        let a = match_predictions(&p, &bx, &t, &w).unwrap();
        assert_eq!(a.pairs, vec![(0, 1), (1, 0)]);
        assert!(a.unmatched.is_empty());
    }

    #[test]
    fn two_by_two_cost_by_hand() {
        let w = LossWeights::default();
        let p = probs(&[vec![0.6, 0.3, 0.1], vec![0.2, 0.5, 0.3]]);
        let bx = Tensor::from_f64(&[2, 4], &[0.5, 0.5, 0.2, 0.2, 0.3, 0.3, 0.2, 0.4]).unwrap();
        let t = [
            Target { class: 0, bbox: Box::new(0.5, 0.5, 0.2, 0.2) },
            Target { class: 1, bbox: Box::new(0.5, 0.6, 0.2, 0.2) },
        ];
        let c = match_cost(&p, &bx, &t, &w).unwrap();
        // [0][0]: identical box -> -1*0.6
        assert!((c[0][0] - (-0.6)).abs() < 1e-12);
        // [0][1]: L1 = 0.1; boxes [0.4,0.4,0.6,0.6] vs [0.4,0.5,0.6,0.7]:
        // inter 0.2*0.1 = 0.02, union 0.06, enclosing 0.2*0.3 = 0.06 -> giou 1/3
        assert!((c[0][1] - (-0.3 + 5.0 * 0.1 + 2.0 * (1.0 - 1.0 / 3.0))).abs() < 1e-12);
        // [1][0]: L1 = 0.2 + 0.2 + 0 + 0.2 = 0.6; [0.2,0.1,0.4,0.5] vs [0.4,0.4,0.6,0.6]:
        // touching edge -> inter 0, union 0.08 + 0.04, enclosing 0.4*0.5 = 0.2
        let g10 = 0.0 - (0.2 - 0.12) / 0.2;
        assert!((c[1][0] - (-0.2 + 5.0 * 0.6 + 2.0 * (1.0 - g10))).abs() < 1e-12);
    }

    #[test]
    fn capacity_error() {
        let p = probs(&[vec![0.5, 0.5]]);
        let bx = Tensor::from_f64(&[1, 4], &[0.5; 4]).unwrap();
        let t = Target { class: 0, bbox: Box::new(0.5, 0.5, 0.1, 0.1) };
        assert!(matches!(
            match_cost(&p, &bx, &[t, t], &LossWeights::default()),
            Err(MatchError::Capacity { .. })
        ));
    }

    #[test]
    fn zero_targets_is_weighted_ce_toward_noobj() {
        let mut g = Graph::<f64>::new();
        let rows = [vec![0.2, -0.1, 0.4], vec![1.0, 0.0, -1.0]];
        let logits = g.param(Tensor::from_rows(&rows).unwrap());
        let boxes = g.param(Tensor::from_f64(&[2, 4], &[0.5; 8]).unwrap());
        let a = Assignment {
            pairs: vec![],
            unmatched: vec![0, 1],
        };
        let l = set_loss(&mut g, logits, boxes, &[], &a, &LossWeights::default()).unwrap();
        let nll = |r: &[f64]| {
            let z: f64 = r.iter().map(|x| x.exp()).sum();
            -(r[2].exp() / z).ln()
        };
        let expected = (nll(&rows[0]) + nll(&rows[1])) / 2.0;
        assert!((g.value(l.total).data()[0] - expected).abs() < 1e-12);
    }
}
