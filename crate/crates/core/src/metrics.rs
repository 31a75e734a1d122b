//! Distortion and perceptual metrics.

use candle_core::{DType, Device, Tensor, D};

use crate::backbone::center;
use crate::error::{shape_err, Result};
use crate::image::Image;
use crate::nn::{scalar, Conv2d, ParamStore};

/// PSNR reported for identical images.
pub const PSNR_CAP_DB: f64 = 99.0;

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(shape_err(format!("{:?} vs {:?}", a.dims(), b.dims())));
    }
    let sum: f64 = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum();
    Ok(sum / a.data.len() as f64)
}

/// 10 log10(1 / MSE) for [0,1] images, capped at [`PSNR_CAP_DB`].
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / m).log10()).min(PSNR_CAP_DB))
}

/// Differentiable feature-space distance between image batches.
pub trait PerceptualMetric: Send + Sync {
    /// Mean distance over the batch; a, b are (B, 3, H, W) in [0, 1].
    fn distance_tensor(&self, a: &Tensor, b: &Tensor) -> Result<Tensor>;

    fn name(&self) -> &str;

    fn distance(&self, a: &Image, b: &Image) -> Result<f64> {
        if a.dims() != b.dims() {
            return Err(shape_err(format!("{:?} vs {:?}", a.dims(), b.dims())));
        }
        let ta = a.to_tensor(DType::F32, &Device::Cpu)?;
        let tb = b.to_tensor(DType::F32, &Device::Cpu)?;
        scalar(&self.distance_tensor(&ta, &tb)?)
    }
}

/// LPIPS-style distance over a frozen, seeded stack of random conv layers:
/// per layer, channel-normalized features are compared by squared L2,
/// averaged over positions, then summed over layers.
pub struct RandomFeatureMetric {
    layers: Vec<Conv2d>,
    _store: ParamStore,
}

impl RandomFeatureMetric {
    pub fn new(channels: &[usize], seed: u64) -> Result<Self> {
        let mut store = ParamStore::new(seed, DType::F32, &Device::Cpu);
        let mut layers = Vec::with_capacity(channels.len());
        let mut prev = 3;
        for (i, &ch) in channels.iter().enumerate() {
            layers.push(Conv2d::new(
                &mut store.root().pp(format!("layer{i}")),
                prev,
                ch,
                3,
                2,
                std::f64::consts::SQRT_2,
            )?);
            prev = ch;
        }
        Ok(Self {
            layers,
            _store: store,
        })
    }

    fn features(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut h = center(x)?;
        let mut out = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (_, _, hh, ww) = h.dims4()?;
            if hh < 2 || ww < 2 {
                break;
            }
            h = layer.forward(&h)?.relu()?;
            let norm = (h.sqr()?.sum_keepdim(1)? + 1e-10)?.sqrt()?;
            out.push(h.broadcast_div(&norm)?);
        }
        Ok(out)
    }
}

impl PerceptualMetric for RandomFeatureMetric {
    fn distance_tensor(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.dims() != b.dims() {
            return Err(shape_err(format!("{:?} vs {:?}", a.dims(), b.dims())));
        }
        let fa = self.features(&a.to_dtype(DType::F32)?)?;
        let fb = self.features(&b.to_dtype(DType::F32)?)?;
        let mut total: Option<Tensor> = None;
        for (x, y) in fa.iter().zip(&fb) {
            let d = (x - y)?.sqr()?.sum(1)?.mean(D::Minus1)?.mean(D::Minus1)?.mean_all()?;
            total = Some(match total {
                Some(t) => (t + d)?,
                None => d,
            });
        }
        let out = total.ok_or_else(|| shape_err("image too small for the perceptual metric"))?;
        Ok(out.to_dtype(a.dtype())?)
    }

    fn name(&self) -> &str {
        "random-feature"
    }
}

pub fn perceptual_distance(a: &Image, b: &Image, backend: &dyn PerceptualMetric) -> Result<f64> {
    backend.distance(a, b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(seed: u64, h: usize, w: usize) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::new(h, w, (0..3 * h * w).map(|_| rng.random::<f32>()).collect()).unwrap()
    }

    fn structured_image(h: usize, w: usize) -> Image {
        let mut img = Image::filled(h, w, 0.0);
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    let stripe = ((x / 2 + y / 3 + c) % 2) as f32;
                    *img.at_mut(c, y, x) = 0.2 + 0.6 * stripe;
                }
            }
        }
        img
    }

    #[test]
    fn psnr_reference_values() {
        let a = random_image(1, 8, 8);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP_DB);
        let zeros = Image::filled(4, 4, 0.0);
        let ones = Image::filled(4, 4, 1.0);
        assert_eq!(psnr(&zeros, &ones).unwrap(), 0.0);
        assert!(psnr(&zeros, &Image::filled(4, 5, 0.0)).is_err());
    }

    #[test]
    fn psnr_matches_scalar_loop() {
        let a = random_image(2, 9, 7);
        let b = random_image(3, 9, 7);
        let mut acc = 0.0f64;
        for i in 0..a.data.len() {
            let d = a.data[i] as f64 - b.data[i] as f64;
            acc += d * d;
        }
        let expected = 10.0 * (1.0 / (acc / a.data.len() as f64)).log10();
        assert!((psnr(&a, &b).unwrap() - expected).abs() < 1e-9);
    }

    #[test]
    fn perceptual_identity_symmetry_and_blur() {
        let m = RandomFeatureMetric::new(&[8, 16, 16, 32, 32], 9).unwrap();
        let a = random_image(4, 32, 32);
        let b = random_image(5, 32, 32);
        assert_eq!(m.distance(&a, &a).unwrap(), 0.0);
        let ab = m.distance(&a, &b).unwrap();
        let ba = m.distance(&b, &a).unwrap();
        assert!(ab > 0.0);
        assert!((ab - ba).abs() <= 1e-6 * ab);
        let gt = structured_image(32, 32);
        let blurred = gt.box_blur(2);
        let near = {
            let mut n = gt.clone();
            n.data.iter_mut().for_each(|v| *v = (*v + 0.02).min(1.0));
            n
        };
        assert!(m.distance(&blurred, &gt).unwrap() > m.distance(&near, &gt).unwrap());
    }
}
