use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const BACKGROUND: u32 = 0;
pub const DISK: u32 = 1;
pub const RECTANGLE: u32 = 2;
pub const SCENE_CLASSES: usize = 3;
pub const MIN_SCENE_SIZE: usize = 32;

/// Supersampling factor per axis for anti-aliased coverage.
const SUBSAMPLES: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Shape {
    Disk {
        cx: f64,
        cy: f64,
        r: f64,
    },
    /// Half-open box `[x0, x1) × [y0, y1)` in pixel units.
    Rect {
        x0: f64,
        y0: f64,
        x1: f64,
        y1: f64,
    },
}

impl Shape {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Shape::Disk { cx, cy, r } => (x - cx) * (x - cx) + (y - cy) * (y - cy) <= r * r,
            Shape::Rect { x0, y0, x1, y1 } => x >= x0 && x < x1 && y >= y0 && y < y1,
        }
    }

    pub fn class(&self) -> u32 {
        match self {
            Shape::Disk { .. } => DISK,
            Shape::Rect { .. } => RECTANGLE,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    /// `3×H×W`, values in `[0, 1]`.
    pub image: Tensor,
    /// Row-major `H×W` class ids.
    pub labels: Vec<u32>,
    /// Painted in order; later shapes occlude earlier ones.
    pub shapes: Vec<Shape>,
    pub size: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SceneOptions {
    /// Fixed `(disks, rectangles)`; random 1–3 of each when `None`.
    pub shape_counts: Option<(usize, usize)>,
}

pub fn generate_scene(seed: u64, size: usize) -> Result<SyntheticScene> {
    generate_scene_with(seed, size, SceneOptions::default())
}

pub fn generate_scene_with(seed: u64, size: usize, opts: SceneOptions) -> Result<SyntheticScene> {
    if size < MIN_SCENE_SIZE {
        return Err(Error::invalid(format!(
            "scene size {size} is below {MIN_SCENE_SIZE}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (disks, rects) = opts
        .shape_counts
        .unwrap_or_else(|| (rng.gen_range(1..=3), rng.gen_range(1..=3)));
    let n = size as f64;

    let mut shapes = Vec::with_capacity(disks + rects);
    for _ in 0..disks {
        let r = rng.gen_range(0.08 * n..0.18 * n);
        shapes.push(Shape::Disk {
            cx: rng.gen_range(r..n - r),
            cy: rng.gen_range(r..n - r),
            r,
        });
    }
    for _ in 0..rects {
        let w = rng.gen_range(0.15 * n..0.4 * n);
        let h = rng.gen_range(0.15 * n..0.4 * n);
        let x0 = rng.gen_range(0.0..n - w);
        let y0 = rng.gen_range(0.0..n - h);
        shapes.push(Shape::Rect {
            x0,
            y0,
            x1: x0 + w,
            y1: y0 + h,
        });
    }
    // interleave disks and rectangles in a random painting order
    for i in (1..shapes.len()).rev() {
        shapes.swap(i, rng.gen_range(0..=i));
    }

    let bg: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.2..0.6));
    let freq = rng.gen_range(0.15..0.45);
    let phase = rng.gen_range(0.0..std::f64::consts::TAU);
    let colors: Vec<[f64; 3]> = shapes
        .iter()
        .map(|_| std::array::from_fn(|_| rng.gen_range(0.0..1.0)))
        .collect();

    let plane = size * size;
    let mut data = vec![0.0; 3 * plane];
    let mut labels = vec![BACKGROUND; plane];
    let sub = 1.0 / SUBSAMPLES as f64;
    for y in 0..size {
        for x in 0..size {
            let p = y * size + x;
            let texture = 0.08 * ((x as f64 * freq + phase).sin() * (y as f64 * freq * 0.7).cos());
            let mut px: [f64; 3] = std::array::from_fn(|c| (bg[c] + texture).clamp(0.0, 1.0));
            let (fx, fy) = (x as f64, y as f64);
            for (shape, color) in shapes.iter().zip(&colors) {
                let mut hits = 0;
                for sy in 0..SUBSAMPLES {
                    for sx in 0..SUBSAMPLES {
                        let u = fx + (sx as f64 + 0.5) * sub;
                        let v = fy + (sy as f64 + 0.5) * sub;
                        hits += shape.contains(u, v) as usize;
                    }
                }
                let a = hits as f64 / (SUBSAMPLES * SUBSAMPLES) as f64;
                for c in 0..3 {
                    px[c] = (1.0 - a) * px[c] + a * color[c];
                }
                if shape.contains(fx + 0.5, fy + 0.5) {
                    labels[p] = shape.class();
                }
            }
            for c in 0..3 {
                data[c * plane + p] = px[c];
            }
        }
    }
    Ok(SyntheticScene {
        image: Tensor::from_vec(&[3, size, size], data)?,
        labels,
        shapes,
        size,
        seed,
    })
}

/// Seed of scene `index` in the dataset rooted at `seed`.
pub fn scene_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(index as u64)
}

/// `count` scenes generated in parallel, in index order.
pub fn synthetic_dataset(seed: u64, count: usize, size: usize) -> Result<Vec<SyntheticScene>> {
    (0..count)
        .into_par_iter()
        .map(|i| generate_scene(scene_seed(seed, i), size))
        .collect()
}
