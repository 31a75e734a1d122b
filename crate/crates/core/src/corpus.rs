//! Structured synthetic images (gradients, textures, shapes) for training and
//! evaluation without an external dataset.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::image::Image;

fn color(rng: &mut ChaCha8Rng) -> [f32; 3] {
    [rng.random(), rng.random(), rng.random()]
}

/// One size x size image, fully determined by `seed`.
pub fn synthetic_image(size: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = size as f32;
    let (c0, c1) = (color(&mut rng), color(&mut rng));
    let angle: f32 = rng.random_range(0.0..std::f32::consts::TAU);
    let (dx, dy) = (angle.cos(), angle.sin());
    let mut img = Image::filled(size, size, 0.0);
    for y in 0..size {
        for x in 0..size {
            let t = ((x as f32 / s - 0.5) * dx + (y as f32 / s - 0.5) * dy + 0.5).clamp(0.0, 1.0);
            for c in 0..3 {
                *img.at_mut(c, y, x) = c0[c] * (1.0 - t) + c1[c] * t;
            }
        }
    }

    // Periodic texture over part of the frame.
    if rng.random_bool(0.7) {
        let period = rng.random_range(3.0..(s / 4.0).max(4.0));
        let theta: f32 = rng.random_range(0.0..std::f32::consts::PI);
        let amp = rng.random_range(0.05..0.25);
        let checker = rng.random_bool(0.3);
        let tint = color(&mut rng);
        for y in 0..size {
            for x in 0..size {
                let u = x as f32 * theta.cos() + y as f32 * theta.sin();
                let v = if checker {
                    let a = ((x as f32 / period) as i64 + (y as f32 / period) as i64) % 2;
                    a as f32 - 0.5
                } else {
                    (u / period * std::f32::consts::TAU).sin() * 0.5
                };
                for (c, t) in tint.iter().enumerate() {
                    let p = img.at_mut(c, y, x);
                    *p = (*p + amp * v * (0.5 + t)).clamp(0.0, 1.0);
                }
            }
        }
    }

    // A few flat shapes on top.
    for _ in 0..rng.random_range(1..=4) {
        let col = color(&mut rng);
        let (cx, cy) = (rng.random_range(0.0..s), rng.random_range(0.0..s));
        let r = rng.random_range(s / 10.0..s / 3.0);
        let kind = rng.random_range(0..3);
        for y in 0..size {
            for x in 0..size {
                let (px, py) = (x as f32 + 0.5 - cx, y as f32 + 0.5 - cy);
                let inside = match kind {
                    0 => px * px + py * py <= r * r,
                    1 => px.abs() <= r && py.abs() <= r * 0.6,
                    _ => py >= -r && py <= r && px.abs() <= (r - py) * 0.5,
                };
                if inside {
                    for (c, &v) in col.iter().enumerate() {
                        *img.at_mut(c, y, x) = v;
                    }
                }
            }
        }
    }
    img
}

/// `count` images with seeds derived from `seed`.
pub fn synthetic_corpus(count: usize, size: usize, seed: u64) -> Vec<Image> {
    (0..count)
        .map(|i| synthetic_image(size, seed.wrapping_mul(1_000_003).wrapping_add(i as u64)))
        .collect()
}

/// Writes `count` PNGs named `synth_NNNN.png`; returns their paths.
pub fn write_corpus(dir: impl AsRef<Path>, count: usize, size: usize, seed: u64) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    synthetic_corpus(count, size, seed)
        .iter()
        .enumerate()
        .map(|(i, img)| {
            let p = dir.join(format!("synth_{i:04}.png"));
            img.save(&p)?;
            Ok(p)
        })
        .collect()
}

/// Endless stream of training batches; batch `k` is fixed by (seed, k).
pub struct BatchSampler {
    size: usize,
    batch: usize,
    seed: u64,
    next: u64,
}

impl BatchSampler {
    pub fn new(size: usize, batch: usize, seed: u64) -> Self {
        Self {
            size,
            batch,
            seed,
            next: 0,
        }
    }

    pub fn next_batch(&mut self) -> Vec<Image> {
        let base = self.seed.wrapping_mul(0x2545_F491_4F6C_DD1D) ^ (self.next << 20);
        self.next += 1;
        (0..self.batch)
            .map(|i| synthetic_image(self.size, base.wrapping_add(i as u64)))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_in_range() {
        let a = synthetic_image(32, 5);
        assert_eq!(a, synthetic_image(32, 5));
        assert_ne!(a, synthetic_image(32, 6));
        assert!(a.data.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn images_are_not_flat() {
        for img in synthetic_corpus(8, 32, 1) {
            let mean = img.data.iter().sum::<f32>() / img.data.len() as f32;
            let var = img.data.iter().map(|v| (v - mean).powi(2)).sum::<f32>() / img.data.len() as f32;
            assert!(var > 1e-4);
        }
    }

    #[test]
    fn written_files_load_back() {
        let dir = tempfile::tempdir().unwrap();
        let paths = write_corpus(dir.path(), 2, 16, 3).unwrap();
        let img = Image::load(&paths[0]).unwrap();
        assert_eq!(img.dims(), (16, 16));
    }

    #[test]
    fn sampler_batches_differ() {
        let mut s = BatchSampler::new(16, 2, 0);
        let (a, b) = (s.next_batch(), s.next_batch());
        assert_eq!(a.len(), 2);
        assert_ne!(a[0], b[0]);
    }
}
