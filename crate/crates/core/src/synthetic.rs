//! Small generated datasets for tests, demos and benchmarks.

use std::f64::consts::TAU;

use rand::Rng;

use crate::image::{Grid, ImageTensor, IndexGrid};
use crate::palette::Palette;
use crate::rng;

/// Colors and side of the stripe dataset.
pub const STRIPE_K: usize = 8;
pub const STRIPE_SIDE: usize = 8;

/// 16 token grids: horizontal and vertical stripes at each of 8 phase
/// offsets. Cell `(r, c)` holds `(offset + r) mod 8` (horizontal) or
/// `(offset + c) mod 8` (vertical).
pub fn stripe_grids() -> Vec<IndexGrid> {
    let mut out = Vec::with_capacity(2 * STRIPE_K);
    for vertical in [false, true] {
        for offset in 0..STRIPE_K {
            out.push(Grid::from_fn(STRIPE_SIDE, STRIPE_SIDE, |r, c| {
                (offset + if vertical { c } else { r }) % STRIPE_K
            }));
        }
    }
    out
}

/// Eight well-separated colors for rendering stripe grids.
pub fn stripe_palette() -> Palette {
    let colors = (0..STRIPE_K)
        .map(|i| [(i & 1) as f64, ((i >> 1) & 1) as f64 * 0.75, ((i >> 2) & 1) as f64 * 0.5 + 0.25])
        .collect();
    Palette::new(colors).expect("distinct colors")
}

/// Stripe grids rendered at `scale` pixels per cell.
pub fn stripe_images(scale: usize) -> Vec<ImageTensor> {
    let pal = stripe_palette();
    stripe_grids()
        .iter()
        .map(|g| {
            let n = STRIPE_SIDE * scale;
            ImageTensor::from_fn(n, n, 3, |r, c, ch| pal.centroids()[*g.get(r / scale, c / scale)][ch])
        })
        .collect()
}

/// Smooth random RGB images: a few low-frequency sinusoids per channel.
pub fn smooth_images(count: usize, height: usize, width: usize, seed: u64) -> Vec<ImageTensor> {
    (0..count as u64)
        .map(|i| {
            let mut r = rng::indexed(seed, "synthetic", i);
            let waves: Vec<[f64; 5]> = (0..9)
                .map(|_| {
                    [
                        r.random_range(0.0..2.0),
                        r.random_range(0.0..2.0),
                        r.random_range(0.0..TAU),
                        r.random_range(0.05..0.2),
                        r.random_range(0.3..0.7),
                    ]
                })
                .collect();
            ImageTensor::from_fn(height, width, 3, |y, x, ch| {
                let (u, v) = (y as f64 / height as f64, x as f64 / width as f64);
                let mut acc = 0.0;
                for w in &waves[ch * 3..ch * 3 + 3] {
                    acc += w[3] * (TAU * (w[0] * u + w[1] * v) + w[2]).sin();
                }
                waves[ch * 3][4] + acc
            })
        })
        .collect()
}
