//! Seeded synthetic grayscale images: a smooth gradient background with a
//! few rectangles and discs on top.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::codec::Image;
use crate::error::{invalid, Result};

pub fn synthetic_image(height: usize, width: usize, seed: u64) -> Result<Image> {
    if height == 0 || width == 0 {
        return invalid("synthetic image dims must be positive");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (base, gy, gx) = (rng.random_range(0.2..0.8), rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3));
    let mut pixels: Vec<f64> = (0..height * width)
        .map(|p| {
            let (y, x) = ((p / width) as f64 / height as f64, (p % width) as f64 / width as f64);
            base + gy * (y - 0.5) + gx * (x - 0.5)
        })
        .collect();
    let (hf, wf) = (height as f64, width as f64);
    for _ in 0..rng.random_range(2..=4) {
        let value = rng.random_range(0.0..1.0);
        let (cy, cx) = (rng.random_range(0.0..hf), rng.random_range(0.0..wf));
        let (ry, rx) = (rng.random_range(0.1..0.35) * hf, rng.random_range(0.1..0.35) * wf);
        let disc = rng.random_bool(0.5);
        for (p, px) in pixels.iter_mut().enumerate() {
            let (dy, dx) = (((p / width) as f64 + 0.5 - cy) / ry, ((p % width) as f64 + 0.5 - cx) / rx);
            let inside = if disc { dy * dy + dx * dx <= 1.0 } else { dy.abs() <= 1.0 && dx.abs() <= 1.0 };
            if inside {
                *px = value;
            }
        }
    }
    Image::new(height, width, pixels.into_iter().map(|v| v.clamp(0.0, 1.0)).collect())
}

/// `count` images with seeds `seed, seed + 1, …`.
pub fn synthetic_corpus(count: usize, height: usize, width: usize, seed: u64) -> Result<Vec<Image>> {
    (0..count as u64).map(|i| synthetic_image(height, width, seed.wrapping_add(i))).collect()
}
