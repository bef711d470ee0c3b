use serde::{Deserialize, Serialize};

/// Normalised centre-size box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Box {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

/// Corner-form box, `x1 <= x2`, `y1 <= y2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CornerBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl Box {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self { cx, cy, w, h }
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    pub fn to_xyxy(self) -> CornerBox {
        cxcywh_to_xyxy(self)
    }

    pub fn area(self) -> f64 {
        self.w * self.h
    }
}

impl CornerBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn area(self) -> f64 {
        (self.x2 - self.x1).max(0.0) * (self.y2 - self.y1).max(0.0)
    }

    pub fn to_cxcywh(self) -> Box {
        Box::new(
            (self.x1 + self.x2) / 2.0,
            (self.y1 + self.y2) / 2.0,
            self.x2 - self.x1,
            self.y2 - self.y1,
        )
    }
}

pub fn cxcywh_to_xyxy(b: Box) -> CornerBox {
    CornerBox::new(b.cx - b.w / 2.0, b.cy - b.h / 2.0, b.cx + b.w / 2.0, b.cy + b.h / 2.0)
}

fn inter_union(a: CornerBox, b: CornerBox) -> (f64, f64) {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    (inter, a.area() + b.area() - inter)
}

pub fn iou(a: CornerBox, b: CornerBox) -> f64 {
    let (inter, union) = inter_union(a, b);
    if union <= 0.0 {
        return if a == b { 1.0 } else { 0.0 };
    }
    inter / union
}

/// Generalised IoU: IoU minus the empty fraction of the smallest enclosing box.
///
/// A zero-area enclosing box yields 0, except for identical degenerate boxes (1).
pub fn giou(a: CornerBox, b: CornerBox) -> f64 {
    if a == b {
        return 1.0;
    }
    let (inter, union) = inter_union(a, b);
    let enclose = (a.x2.max(b.x2) - a.x1.min(b.x1)) * (a.y2.max(b.y2) - a.y1.min(b.y1));
    if enclose <= 0.0 {
        return 0.0;
    }
    let iou = if union > 0.0 { inter / union } else { 0.0 };
    // The enclosing box never has less area than the union; rounding can say otherwise.
    iou - (enclose - union).max(0.0) / enclose
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conversion_examples() {
        assert_eq!(cxcywh_to_xyxy(Box::new(0.5, 0.5, 1.0, 1.0)), CornerBox::new(0.0, 0.0, 1.0, 1.0));
        assert_eq!(cxcywh_to_xyxy(Box::new(0.3, 0.7, 0.0, 0.0)), CornerBox::new(0.3, 0.7, 0.3, 0.7));
        let c = cxcywh_to_xyxy(Box::new(0.25, 0.5, 0.5, 0.2));
        assert!((c.x1 - 0.0).abs() < 1e-15 && (c.y1 - 0.4).abs() < 1e-15);
        assert!((c.x2 - 0.5).abs() < 1e-15 && (c.y2 - 0.6).abs() < 1e-15);
    }

    #[test]
    fn giou_examples() {
        let a = CornerBox::new(0.0, 0.0, 1.0, 1.0);
        assert_eq!(giou(a, a), 1.0);
        let inner = CornerBox::new(0.25, 0.25, 0.75, 0.5);
        assert!((giou(a, inner) - iou(a, inner)).abs() < 1e-12);
        assert!((iou(a, inner) - inner.area() / a.area()).abs() < 1e-12);
        let far = CornerBox::new(2.0, 0.0, 3.0, 1.0);
        assert!((giou(a, far) + 1.0 / 3.0).abs() < 1e-12);
        let p = CornerBox::new(0.5, 0.5, 0.5, 0.5);
        assert_eq!(giou(p, p), 1.0);
        let q = CornerBox::new(0.5, 0.2, 0.5, 0.9);
        assert_eq!(giou(p, q), 0.0);
    }
}
