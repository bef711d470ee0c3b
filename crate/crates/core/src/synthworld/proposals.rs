use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::matching::{Box, CornerBox};
use crate::rng::DetRng;

pub const MIN_AREA: f64 = 0.01;
pub const MAX_AREA: f64 = 0.40;
const GRID_SIDES: [f64; 3] = [0.6, 0.3, 0.15];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProposalMode {
    Random,
    Grid,
}

/// `n` normalised boxes inside the unit square with area in `[1%, 40%]`.
///
/// Random mode draws area uniformly, aspect ratio log-uniformly in
/// `[1/2, 2]` and a uniform position. Grid mode ignores `rng` and cycles
/// through square tiles at three scales, coarse first.
pub fn propose_patches(n: usize, rng: &mut DetRng, mode: ProposalMode) -> Vec<Box> {
    match mode {
        ProposalMode::Random => (0..n).map(|_| random_box(rng)).collect(),
        ProposalMode::Grid => {
            let tiles = grid_tiles();
            (0..n).map(|i| tiles[i % tiles.len()]).collect()
        }
    }
}

fn random_box(rng: &mut DetRng) -> Box {
    loop {
        let area = rng.random_range(MIN_AREA..=MAX_AREA);
        let aspect = rng.random_range(0.5f64.ln()..=2.0f64.ln()).exp();
        let (w, h) = ((area * aspect).sqrt(), (area / aspect).sqrt());
        if w > 1.0 || h > 1.0 {
            continue;
        }
        let x = rng.random_range(0.0..=1.0 - w);
        let y = rng.random_range(0.0..=1.0 - h);
        return CornerBox::new(x, y, x + w, y + h).to_cxcywh();
    }
}

fn grid_tiles() -> Vec<Box> {
    let mut out = Vec::new();
    for side in GRID_SIDES {
        let steps = (1.0 / side).ceil() as usize;
        let pos = |i: usize| (1.0 - side) * i as f64 / (steps - 1) as f64;
        for r in 0..steps {
            for c in 0..steps {
                let (x, y) = (pos(c), pos(r));
                out.push(CornerBox::new(x, y, x + side, y + side).to_cxcywh());
            }
        }
    }
    out
}
