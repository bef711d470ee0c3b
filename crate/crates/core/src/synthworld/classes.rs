use serde::{Deserialize, Serialize};

pub const NUM_KINDS: usize = 6;
pub const NUM_COLORS: usize = 6;
pub const NUM_CLASSES: usize = NUM_KINDS * NUM_COLORS;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
    Cross,
    Ring,
    Diamond,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; NUM_KINDS] = [
        ShapeKind::Circle,
        ShapeKind::Square,
        ShapeKind::Triangle,
        ShapeKind::Cross,
        ShapeKind::Ring,
        ShapeKind::Diamond,
    ];

    /// Whether the point `(u, v)` in box-normalised coordinates `[-1, 1]²` is inside.
    pub fn contains(self, u: f64, v: f64) -> bool {
        match self {
            ShapeKind::Circle => u * u + v * v <= 1.0,
            ShapeKind::Square => u.abs() <= 1.0 && v.abs() <= 1.0,
            ShapeKind::Triangle => v <= 1.0 && u.abs() <= (v + 1.0) / 2.0,
            ShapeKind::Cross => {
                (u.abs() <= 0.34 && v.abs() <= 1.0) || (v.abs() <= 0.34 && u.abs() <= 1.0)
            }
            ShapeKind::Ring => {
                let r2 = u * u + v * v;
                (0.55 * 0.55..=1.0).contains(&r2)
            }
            ShapeKind::Diamond => u.abs() + v.abs() <= 1.0,
        }
    }
}

pub const PALETTE: [[f32; 3]; NUM_COLORS] = [
    [0.90, 0.15, 0.15],
    [0.15, 0.80, 0.20],
    [0.20, 0.30, 0.95],
    [0.95, 0.90, 0.15],
    [0.90, 0.20, 0.85],
    [0.15, 0.85, 0.90],
];

pub const COLOR_NAMES: [&str; NUM_COLORS] = ["red", "green", "blue", "yellow", "magenta", "cyan"];

/// Class identity: `kind × 6 + color`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ShapeClass {
    pub kind: ShapeKind,
    pub color: usize,
}

impl ShapeClass {
    pub fn from_id(id: usize) -> Option<Self> {
        (id < NUM_CLASSES).then(|| Self {
            kind: ShapeKind::ALL[id / NUM_COLORS],
            color: id % NUM_COLORS,
        })
    }

    pub fn id(self) -> usize {
        self.kind as usize * NUM_COLORS + self.color
    }

    pub fn rgb(self) -> [f32; 3] {
        PALETTE[self.color]
    }

    pub fn name(self) -> String {
        format!("{}-{:?}", COLOR_NAMES[self.color], self.kind).to_lowercase()
    }
}

/// Disjoint base/novel partition of the class ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassSplit {
    pub base: Vec<usize>,
    pub novel: Vec<usize>,
}

impl Default for ClassSplit {
    /// 28 base / 8 novel. Rings are mostly held out (four of six colours) and
    /// four further kind/colour combinations are novel, so every shape kind
    /// and every colour still occurs among the base classes.
    fn default() -> Self {
        let novel = vec![5, 10, 17, 24, 25, 26, 27, 34];
        let base = (0..NUM_CLASSES).filter(|c| !novel.contains(c)).collect();
        Self { base, novel }
    }
}

impl ClassSplit {
    pub fn validate(&self) -> Result<(), String> {
        if self.base.is_empty() || self.novel.is_empty() {
            return Err("base and novel class sets must be non-empty".into());
        }
        if let Some(c) = self.base.iter().chain(&self.novel).find(|&&c| c >= NUM_CLASSES) {
            return Err(format!("class id {c} outside 0..{NUM_CLASSES}"));
        }
        if let Some(c) = self.base.iter().find(|c| self.novel.contains(c)) {
            return Err(format!("class {c} is both base and novel"));
        }
        Ok(())
    }

    pub fn is_novel(&self, class: usize) -> bool {
        self.novel.contains(&class)
    }

    pub fn all(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.base.iter().chain(&self.novel).copied().collect();
        v.sort_unstable();
        v
    }
}
