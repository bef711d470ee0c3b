use rand::{Rng, SeedableRng};

use super::classes::ShapeClass;
use super::SynthError;
use crate::image::Image;
use crate::matching::{iou, Box};
use crate::rng::DetRng;

pub const SCENE_SIZE: usize = 96;
pub const MIN_OBJECTS: usize = 1;
pub const MAX_OBJECTS: usize = 5;
pub const MIN_SIDE: f64 = 12.0;
pub const MAX_SIDE: f64 = 40.0;
pub const MAX_PAIR_IOU: f64 = 0.3;
const PLACEMENT_ATTEMPTS: usize = 100;
const SUPERSAMPLE: usize = 4;
const NOISE_AMPLITUDE: f32 = 0.06;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Annotation {
    pub class: usize,
    pub bbox: Box,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub image: Image,
    pub annotations: Vec<Annotation>,
    pub noise_seed: u64,
}

impl Scene {
    pub fn classes(&self) -> Vec<usize> {
        let mut c: Vec<usize> = self.annotations.iter().map(|a| a.class).collect();
        c.sort_unstable();
        c.dedup();
        c
    }
}

/// Object classes and boxes for one scene, without pixels.
///
/// Each of the 1–5 objects draws its class uniformly from `pool`, a side
/// length in `[12, 40]` px and a position keeping it inside the image; a
/// placement overlapping an earlier box with IoU ≥ 0.3 is redrawn, and an
/// object that fails 100 times is dropped.
pub fn sample_layout(rng: &mut DetRng, pool: &[usize]) -> Result<Vec<Annotation>, SynthError> {
    if pool.is_empty() {
        return Err(SynthError::Input("empty class pool".into()));
    }
    let n = rng.random_range(MIN_OBJECTS..=MAX_OBJECTS);
    let size = SCENE_SIZE as f64;
    let mut out: Vec<Annotation> = Vec::with_capacity(n);
    for _ in 0..n {
        let class = pool[rng.random_range(0..pool.len())];
        for _ in 0..PLACEMENT_ATTEMPTS {
            let side = rng.random_range(MIN_SIDE..=MAX_SIDE);
            let x = rng.random_range(0.0..=size - side);
            let y = rng.random_range(0.0..=size - side);
            let bbox = Box::new((x + side / 2.0) / size, (y + side / 2.0) / size, side / size, side / size);
            if out.iter().all(|a| iou(a.bbox.to_xyxy(), bbox.to_xyxy()) < MAX_PAIR_IOU) {
                out.push(Annotation { class, bbox });
                break;
            }
        }
    }
    Ok(out)
}

/// Render a random scene over `pool`. The same rng state gives a bit-identical scene.
pub fn generate_scene(rng: &mut DetRng, pool: &[usize]) -> Result<Scene, SynthError> {
    let annotations = sample_layout(rng, pool)?;
    let noise_seed: u64 = rng.random();
    let image = render(&annotations, noise_seed)?;
    Ok(Scene {
        image,
        annotations,
        noise_seed,
    })
}

/// Noisy grey background, then each object painted in order with
/// 4×4-supersampled coverage. Fully covered pixels take the exact class colour.
pub fn render(annotations: &[Annotation], noise_seed: u64) -> Result<Image, SynthError> {
    let n = SCENE_SIZE;
    let mut img = Image::new(3, n, n);
    let mut noise = DetRng::seed_from_u64(noise_seed);
    let base: f32 = noise.random_range(0.3..0.6);
    for v in &mut img.data {
        *v = base + noise.random_range(-NOISE_AMPLITUDE..=NOISE_AMPLITUDE);
    }
    for a in annotations {
        let class = ShapeClass::from_id(a.class)
            .ok_or_else(|| SynthError::Input(format!("class id {} out of range", a.class)))?;
        paint(&mut img, class, a.bbox);
    }
    Ok(img)
}

fn paint(img: &mut Image, class: ShapeClass, bbox: Box) {
    let n = SCENE_SIZE as f64;
    let b = bbox.to_xyxy();
    let (x1, y1, x2, y2) = (b.x1 * n, b.y1 * n, b.x2 * n, b.y2 * n);
    let (cx, cy) = ((x1 + x2) / 2.0, (y1 + y2) / 2.0);
    let (rx, ry) = ((x2 - x1) / 2.0, (y2 - y1) / 2.0);
    let rgb = class.rgb();
    let total = (SUPERSAMPLE * SUPERSAMPLE) as f32;
    let last = SCENE_SIZE - 1;
    for py in (y1.floor() as usize)..=(y2.ceil() as usize).min(last) {
        for px in (x1.floor() as usize)..=(x2.ceil() as usize).min(last) {
            let mut hits = 0usize;
            for sy in 0..SUPERSAMPLE {
                let y = py as f64 + (sy as f64 + 0.5) / SUPERSAMPLE as f64;
                for sx in 0..SUPERSAMPLE {
                    let x = px as f64 + (sx as f64 + 0.5) / SUPERSAMPLE as f64;
                    if class.kind.contains((x - cx) / rx, (y - cy) / ry) {
                        hits += 1;
                    }
                }
            }
            if hits == 0 {
                continue;
            }
            let cov = hits as f32 / total;
            for (c, &col) in rgb.iter().enumerate() {
                let v = if hits == SUPERSAMPLE * SUPERSAMPLE {
                    col
                } else {
                    img.get(c, py, px) * (1.0 - cov) + col * cov
                };
                img.set(c, py, px, v);
            }
        }
    }
}
