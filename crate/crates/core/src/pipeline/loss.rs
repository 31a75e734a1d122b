//! Composite image loss: w1 * L1 + w2 * perceptual + w3 * adversarial.

use candle_core::{Tensor, Var};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};

use crate::backbone::center;
use crate::config::LossConfig;
use crate::error::{shape_err, Error, Result};
use crate::image::Image;
use crate::metrics::PerceptualMetric;
use crate::nn::{l1_loss, scalar, Conv2d, Scope};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub w1: f64,
    pub w2: f64,
    pub w3: f64,
}

impl From<&LossConfig> for LossWeights {
    fn from(c: &LossConfig) -> Self {
        Self {
            w1: c.w1,
            w2: c.w2,
            w3: c.w3,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossReport {
    pub step: usize,
    pub l1: f64,
    pub perceptual: f64,
    pub adversarial: f64,
    pub total: f64,
}

/// Graph-attached loss components.
pub struct LossTerms {
    pub l1: Tensor,
    pub perceptual: Tensor,
    pub adversarial: Tensor,
    pub total: Tensor,
}

impl LossTerms {
    pub fn report(&self, step: usize) -> Result<LossReport> {
        Ok(LossReport {
            step,
            l1: scalar(&self.l1)?,
            perceptual: scalar(&self.perceptual)?,
            adversarial: scalar(&self.adversarial)?,
            total: scalar(&self.total)?,
        })
    }
}

fn softplus(x: &Tensor) -> Result<Tensor> {
    // relu(x) + log(1 + exp(-|x|))
    let tail = ((x.abs()?.neg()?.exp()? + 1.0)?).log()?;
    Ok((x.relu()? + tail)?)
}

/// Four-layer fully convolutional discriminator emitting a logit per pixel.
#[derive(Debug, Clone)]
pub struct Discriminator {
    layers: Vec<Conv2d>,
}

impl Discriminator {
    pub fn new(s: &mut Scope, width: usize) -> Result<Self> {
        let dims = [(3, width), (width, width), (width, width), (width, 1)];
        let layers = dims
            .iter()
            .enumerate()
            .map(|(i, &(a, b))| {
                let k = if i == 3 { 1 } else { 3 };
                Conv2d::new(&mut s.pp(format!("layer{i}")), a, b, k, 1, 1.0)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { layers })
    }

    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = center(x)?;
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward(&h)?;
            if i + 1 < self.layers.len() {
                h = (h.relu()? - (h.neg()?.relu()? * 0.2)?)?;
            }
        }
        Ok(h)
    }

    /// Non-saturating generator loss: mean softplus(-D(fake)).
    pub fn generator_loss(&self, fake: &Tensor) -> Result<Tensor> {
        Ok(softplus(&self.logits(fake)?.neg()?)?.mean_all()?)
    }

    pub fn discriminator_loss(&self, real: &Tensor, fake: &Tensor) -> Result<Tensor> {
        let r = softplus(&self.logits(real)?.neg()?)?.mean_all()?;
        let f = softplus(&self.logits(&fake.detach())?)?.mean_all()?;
        Ok((r + f)?)
    }
}

/// Updates the discriminator between generator steps.
pub struct AdversarialTrainer {
    opt: AdamW,
}

impl AdversarialTrainer {
    pub fn new(vars: Vec<Var>, lr: f64) -> Result<Self> {
        Ok(Self {
            opt: AdamW::new(
                vars,
                ParamsAdamW {
                    lr,
                    weight_decay: 0.0,
                    ..Default::default()
                },
            )?,
        })
    }

    pub fn step(&mut self, disc: &Discriminator, real: &Tensor, fake: &Tensor) -> Result<f64> {
        let loss = disc.discriminator_loss(real, fake)?;
        let v = scalar(&loss)?;
        if !v.is_finite() {
            return Err(Error::Diverged {
                step: 0,
                detail: format!("discriminator loss {v}"),
            });
        }
        self.opt.backward_step(&loss)?;
        Ok(v)
    }
}

pub struct ImageLoss<'a> {
    pub weights: LossWeights,
    pub perceptual: &'a dyn PerceptualMetric,
    /// Adversarial term is zero when absent or when w3 == 0.
    pub discriminator: Option<&'a Discriminator>,
}

impl ImageLoss<'_> {
    pub fn terms(&self, x_hat: &Tensor, x: &Tensor) -> Result<LossTerms> {
        if x_hat.dims() != x.dims() {
            return Err(shape_err(format!("{:?} vs {:?}", x_hat.dims(), x.dims())));
        }
        let l1 = l1_loss(x_hat, x)?;
        let perceptual = self.perceptual.distance_tensor(x_hat, x)?;
        let adversarial = match self.discriminator {
            Some(d) if self.weights.w3 != 0.0 => d.generator_loss(x_hat)?,
            _ => l1.zeros_like()?,
        };
        let w = self.weights;
        let total = (((&l1 * w.w1)? + (&perceptual * w.w2)?)? + (&adversarial * w.w3)?)?;
        Ok(LossTerms {
            l1,
            perceptual,
            adversarial,
            total,
        })
    }
}

/// Single-image evaluation of the composite loss.
pub fn image_loss(
    x_hat: &Image,
    x: &Image,
    weights: LossWeights,
    perceptual: &dyn PerceptualMetric,
    discriminator: Option<&Discriminator>,
) -> Result<LossReport> {
    let dev = candle_core::Device::Cpu;
    let a = x_hat.to_tensor(candle_core::DType::F32, &dev)?;
    let b = x.to_tensor(candle_core::DType::F32, &dev)?;
    ImageLoss {
        weights,
        perceptual,
        discriminator,
    }
    .terms(&a, &b)?
    .report(0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::CodecConfig;
    use crate::metrics::RandomFeatureMetric;
    use crate::nn::ParamStore;
    use candle_core::{DType, Device};

    fn metric() -> RandomFeatureMetric {
        RandomFeatureMetric::new(&[8, 8, 16], 1).unwrap()
    }

    #[test]
    fn identical_images_have_zero_loss() {
        let x = Image::filled(16, 16, 0.4);
        let w = LossWeights::from(&CodecConfig::default().loss);
        let r = image_loss(&x, &x, w, &metric(), None).unwrap();
        assert_eq!((r.l1, r.perceptual, r.adversarial, r.total), (0.0, 0.0, 0.0, 0.0));
    }

    #[test]
    fn l1_matches_scalar_loop_and_total_composes() {
        let x = Image::new(2, 2, (0..12).map(|v| v as f32 / 12.0).collect()).unwrap();
        let y = Image::new(2, 2, (0..12).map(|v| ((v * 7) % 12) as f32 / 11.0).collect()).unwrap();
        let mut acc = 0.0f64;
        for i in 0..12 {
            acc += (x.data[i] as f64 - y.data[i] as f64).abs();
        }
        let w = LossWeights { w1: 1.2, w2: 0.8, w3: 0.12 };
        let r = image_loss(&x, &y, w, &metric(), None).unwrap();
        assert!((r.l1 - acc / 12.0).abs() < 1e-7, "{} vs {}", r.l1, acc / 12.0);
        let composed = w.w1 * r.l1 + w.w2 * r.perceptual + w.w3 * r.adversarial;
        assert!((r.total - composed).abs() < 1e-6);
    }

    #[test]
    fn discriminator_learns_to_separate_a_fixed_pair() {
        let dev = Device::Cpu;
        let mut ps = ParamStore::new(3, DType::F32, &dev);
        let disc = Discriminator::new(&mut ps.root(), 8).unwrap();
        let real = Image::filled(8, 8, 0.9).to_tensor(DType::F32, &dev).unwrap();
        let fake = Image::filled(8, 8, 0.1).to_tensor(DType::F32, &dev).unwrap();
        let mut tr = AdversarialTrainer::new(ps.vars(), 1e-2).unwrap();
        let first = tr.step(&disc, &real, &fake).unwrap();
        let mut last = first;
        for _ in 0..30 {
            last = tr.step(&disc, &real, &fake).unwrap();
        }
        assert!(last < first, "{first} -> {last}");
        let w = LossWeights { w1: 0.0, w2: 0.0, w3: 1.0 };
        let loss = ImageLoss { weights: w, perceptual: &metric(), discriminator: Some(&disc) };
        let terms = loss.terms(&fake, &real).unwrap();
        assert!(scalar(&terms.adversarial).unwrap() > 0.0);
    }
}
