//! Pixel-decoding fusion: S-channel VQ correction weighted by maps extracted
//! from x̂_lic, and the assistive decoder feeding the VQ decoder.

use candle_core::{DType, Device, Tensor};

use crate::backbone::{center, ConvDecoder};
use crate::config::{FusionConfig, VqConfig};
use crate::error::{shape_err, Result};
use crate::image::Image;
use crate::nn::{conv2d, Conv2d, Init, Scope, TransformerBlock};

/// Largest window not exceeding `window` that tiles both grid sides.
fn fit_window(window: usize, gh: usize, gw: usize) -> usize {
    (1..=window.min(gh).min(gw))
        .rev()
        .find(|ws| gh.is_multiple_of(*ws) && gw.is_multiple_of(*ws))
        .unwrap_or(1)
}

/// Applies `layer` to every ws x ws window of x (B, C, H, W), after a cyclic
/// shift by `shift` cells (undone afterwards). Shifted windows are not masked.
fn windowed(x: &Tensor, ws: usize, shift: usize, layer: &TransformerBlock) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let (nh, nw) = (h / ws, w / ws);
    let mut t = x.clone();
    if shift > 0 {
        t = t.roll(-(shift as i32), 2)?.roll(-(shift as i32), 3)?;
    }
    let win = t
        .permute((0, 2, 3, 1))?
        .reshape((b, nh, ws, nw, ws * c))?
        .transpose(2, 3)?
        .contiguous()?
        .reshape((b * nh * nw, ws * ws, c))?;
    let out = layer.forward(&win)?;
    let mut t = out
        .reshape((b, nh, nw, ws, ws * c))?
        .transpose(2, 3)?
        .contiguous()?
        .reshape((b, h, w, c))?
        .permute((0, 3, 1, 2))?
        .contiguous()?;
    if shift > 0 {
        t = t.roll(shift as i32, 2)?.roll(shift as i32, 3)?;
    }
    Ok(t)
}

/// Residual group of (shifted-)window transformer layers closed by a 3x3 conv.
#[derive(Debug, Clone)]
struct Rstb {
    layers: Vec<TransformerBlock>,
    conv: Conv2d,
}

/// Maps x̂_lic to S unnormalized combining weights per grid cell.
#[derive(Debug, Clone)]
pub struct WeightExtractor {
    embed: Conv2d,
    blocks: Vec<Rstb>,
    head: Conv2d,
    window: usize,
    patch: usize,
}

impl WeightExtractor {
    pub fn new(s: &mut Scope, cfg: &FusionConfig, patch: usize) -> Result<Self> {
        let e = cfg.embed_dim;
        let blocks = (0..cfg.rstb_blocks)
            .map(|i| {
                let mut b = s.pp(format!("rstb{i}"));
                let layers = (0..cfg.rstb_depth)
                    .map(|j| TransformerBlock::new(&mut b.pp(format!("layer{j}")), e, cfg.heads, 2, 1.0))
                    .collect::<Result<Vec<_>>>()?;
                Ok(Rstb {
                    layers,
                    conv: Conv2d::new(&mut b.pp("conv"), e, e, 3, 1, 0.5)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let sc = cfg.channels;
        let mut h = s.pp("head");
        let head = Conv2d::from_tensors(
            h.get("weight", &[sc, e, 3, 3], Init::Fan { fan_in: 9 * e, gain: 0.1 })?,
            h.get("bias", &[sc], Init::Const(1.0 / sc as f64))?,
            1,
            1,
        );
        Ok(Self {
            embed: Conv2d::patchify(&mut s.pp("embed"), 3, e, patch)?,
            blocks,
            head,
            window: cfg.window,
            patch,
        })
    }

    /// x_lic: (B, 3, H, W) -> w: (B, S, H/n, W/n).
    pub fn forward(&self, x_lic: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = x_lic.dims4()?;
        if h % self.patch != 0 || w % self.patch != 0 {
            return Err(shape_err(format!("{h}x{w} input not divisible by n={}", self.patch)));
        }
        let mut x = self.embed.forward(&center(x_lic)?)?;
        let (_, _, gh, gw) = x.dims4()?;
        let ws = fit_window(self.window, gh, gw);
        for blk in &self.blocks {
            let mut t = x.clone();
            for (j, layer) in blk.layers.iter().enumerate() {
                let shift = if j % 2 == 1 { ws / 2 } else { 0 };
                t = windowed(&t, ws, shift, layer)?;
            }
            x = (&x + blk.conv.forward(&t)?)?;
        }
        self.head.forward(&x)
    }
}

pub fn extract_weights(x_lic: &Image, extractor: &WeightExtractor) -> Result<Tensor> {
    extractor.forward(&x_lic.to_tensor(DType::F32, &Device::Cpu)?)
}

/// S parallel bias-free (3x3 then 1x1) convolutions over the VQ latent.
#[derive(Debug, Clone)]
pub struct CorrectionChannels {
    kernels: Vec<(Tensor, Tensor)>,
}

impl CorrectionChannels {
    /// Starts every channel near the identity map.
    pub fn new(s: &mut Scope, channels: usize, dim: usize) -> Result<Self> {
        let kernels = (0..channels)
            .map(|i| {
                let mut c = s.pp(format!("channel{i}"));
                Ok((
                    c.get("conv3", &[dim, dim, 3, 3], Init::ConvIdentity { noise: 0.02 })?,
                    c.get("conv1", &[dim, dim, 1, 1], Init::ConvIdentity { noise: 0.02 })?,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { kernels })
    }

    /// Explicit (3x3, 1x1) weight pairs, shapes (C, C, 3, 3) and (C, C, 1, 1).
    pub fn from_kernels(kernels: Vec<(Tensor, Tensor)>) -> Result<Self> {
        for (k3, k1) in &kernels {
            let (o3, i3, h3, w3) = k3.dims4()?;
            let (o1, i1, h1, w1) = k1.dims4()?;
            if (h3, w3, h1, w1) != (3, 3, 1, 1) || o3 != i3 || (o1, i1) != (o3, i3) {
                return Err(shape_err(format!("bad correction kernels {:?} {:?}", k3.dims(), k1.dims())));
            }
        }
        Ok(Self { kernels })
    }

    pub fn len(&self) -> usize {
        self.kernels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kernels.is_empty()
    }

    /// ys_i for every channel i.
    pub fn variants(&self, y: &Tensor) -> Result<Vec<Tensor>> {
        self.kernels
            .iter()
            .map(|(k3, k1)| conv2d(&conv2d(y, k3, 1, 1)?, k1, 1, 0))
            .collect()
    }
}

/// y_correct = sum_i ys_i * w_i, each w_i broadcast over latent channels.
/// y: (B, C, gh, gw), w: (B, S, gh, gw).
pub fn vq_correct(y: &Tensor, w: &Tensor, channels: &CorrectionChannels) -> Result<Tensor> {
    let (b, _, gh, gw) = y.dims4()?;
    let (wb, ws, wh, ww) = w.dims4()?;
    if (wb, ws, wh, ww) != (b, channels.len(), gh, gw) {
        return Err(shape_err(format!(
            "weights {:?} do not match latent {:?} with S={}",
            w.dims(),
            y.dims(),
            channels.len()
        )));
    }
    let mut acc: Option<Tensor> = None;
    for (i, ys) in channels.variants(y)?.iter().enumerate() {
        let term = ys.broadcast_mul(&w.narrow(1, i, 1)?)?;
        acc = Some(match acc {
            Some(a) => (a + term)?,
            None => term,
        });
    }
    acc.ok_or_else(|| shape_err("no correction channels"))
}

/// D_a: a decoder with D_vq's layout whose stage outputs feed D_vq through
/// scalar connection gates (all zero at init).
#[derive(Debug, Clone)]
pub struct AssistiveDecoder {
    decoder: ConvDecoder,
    gates: Tensor,
}

impl AssistiveDecoder {
    pub fn new(s: &mut Scope, vq: &VqConfig) -> Result<Self> {
        let decoder = ConvDecoder::new(&mut s.pp("decoder"), vq.latent_dim, &vq.channels, vq.res_blocks)?;
        let n = decoder.stage_channels().len();
        Ok(Self {
            decoder,
            gates: s.get("gates", &[n], Init::Zeros)?,
        })
    }

    pub fn gates(&self) -> &Tensor {
        &self.gates
    }

    pub fn decoder(&self) -> &ConvDecoder {
        &self.decoder
    }
}

/// x̂_final: D_vq decodes y_correct with gated D_a stage features added after
/// each upsampling stage. Output is unclamped; clamp when converting to an image.
pub fn decode_fused(y_correct: &Tensor, da: &AssistiveDecoder, dvq: &ConvDecoder) -> Result<Tensor> {
    if da.decoder.stage_channels() != dvq.stage_channels() {
        return Err(shape_err("assistive and VQ decoders differ in layout"));
    }
    let feats = da.decoder.stage_features(y_correct)?;
    dvq.forward_hooked(y_correct, &mut |j, h| {
        let g = da.gates.narrow(0, j, 1)?;
        Ok((h + feats[j].broadcast_mul(&g)?)?)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{randn, ParamStore};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn vals(t: &Tensor) -> Vec<f64> {
        t.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap()
    }

    fn identity_kernels(c: usize) -> (Tensor, Tensor) {
        let dev = Device::Cpu;
        let mut k3 = vec![0f64; c * c * 9];
        let mut k1 = vec![0f64; c * c];
        for i in 0..c {
            k3[(i * c + i) * 9 + 4] = 1.0;
            k1[i * c + i] = 1.0;
        }
        (
            Tensor::from_vec(k3, (c, c, 3, 3), &dev).unwrap(),
            Tensor::from_vec(k1, (c, c, 1, 1), &dev).unwrap(),
        )
    }

    #[test]
    fn identity_and_zero_cases() {
        let dev = Device::Cpu;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let y = randn(&mut rng, &[1, 4, 3, 5], DType::F64, &dev).unwrap();
        let ch = CorrectionChannels::from_kernels(vec![identity_kernels(4)]).unwrap();
        let ones = Tensor::ones((1, 1, 3, 5), DType::F64, &dev).unwrap();
        assert_eq!(vals(&vq_correct(&y, &ones, &ch).unwrap()), vals(&y));
        assert!(vals(&vq_correct(&y, &ones.zeros_like().unwrap(), &ch).unwrap()).iter().all(|&v| v == 0.0));
        let two = Tensor::ones((1, 2, 3, 5), DType::F64, &dev).unwrap();
        assert!(vq_correct(&y, &two, &ch).is_err());
    }

    #[test]
    fn matches_scalar_loop() {
        let dev = Device::Cpu;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (c, gh, gw, s) = (3, 3, 4, 2);
        let y = randn(&mut rng, &[1, c, gh, gw], DType::F64, &dev).unwrap();
        let w = randn(&mut rng, &[1, s, gh, gw], DType::F64, &dev).unwrap();
        let kernels: Vec<(Tensor, Tensor)> = (0..s)
            .map(|_| {
                (
                    randn(&mut rng, &[c, c, 3, 3], DType::F64, &dev).unwrap(),
                    randn(&mut rng, &[c, c, 1, 1], DType::F64, &dev).unwrap(),
                )
            })
            .collect();
        let got = vals(&vq_correct(&y, &w, &CorrectionChannels::from_kernels(kernels.clone()).unwrap()).unwrap());
        let (yv, wv) = (vals(&y), vals(&w));
        let at = |ci: usize, r: isize, q: isize| -> f64 {
            if r < 0 || q < 0 || r >= gh as isize || q >= gw as isize {
                0.0
            } else {
                yv[(ci * gh + r as usize) * gw + q as usize]
            }
        };
        for o in 0..c {
            for r in 0..gh {
                for q in 0..gw {
                    let mut total = 0.0;
                    for (si, (k3, k1)) in kernels.iter().enumerate() {
                        let (k3, k1) = (vals(k3), vals(k1));
                        let mut ys = 0.0;
                        for m in 0..c {
                            let mut mid = 0.0;
                            for i in 0..c {
                                for dy in 0..3 {
                                    for dx in 0..3 {
                                        let k = k3[((m * c + i) * 3 + dy) * 3 + dx];
                                        mid += k * at(i, r as isize + dy as isize - 1, q as isize + dx as isize - 1);
                                    }
                                }
                            }
                            ys += k1[o * c + m] * mid;
                        }
                        total += ys * wv[(si * gh + r) * gw + q];
                    }
                    let g = got[(o * gh + r) * gw + q];
                    assert!((g - total).abs() < 1e-9, "({o},{r},{q}): {g} vs {total}");
                }
            }
        }
    }

    #[test]
    fn superposition() {
        let dev = Device::Cpu;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut ps = ParamStore::new(4, DType::F64, &dev);
        let ch = CorrectionChannels::new(&mut ps.root(), 2, 3).unwrap();
        let a = randn(&mut rng, &[1, 3, 2, 2], DType::F64, &dev).unwrap();
        let b = randn(&mut rng, &[1, 3, 2, 2], DType::F64, &dev).unwrap();
        let w = randn(&mut rng, &[1, 2, 2, 2], DType::F64, &dev).unwrap();
        let v = randn(&mut rng, &[1, 2, 2, 2], DType::F64, &dev).unwrap();
        let lhs = vals(&vq_correct(&(&a + &b).unwrap(), &w, &ch).unwrap());
        let rhs: Vec<f64> = vals(&vq_correct(&a, &w, &ch).unwrap())
            .iter()
            .zip(vals(&vq_correct(&b, &w, &ch).unwrap()))
            .map(|(x, y)| x + y)
            .collect();
        assert!(lhs.iter().zip(&rhs).all(|(x, y)| (x - y).abs() < 1e-9));
        let lhs = vals(&vq_correct(&a, &(&w + &v).unwrap(), &ch).unwrap());
        let rhs: Vec<f64> = vals(&vq_correct(&a, &w, &ch).unwrap())
            .iter()
            .zip(vals(&vq_correct(&a, &v, &ch).unwrap()))
            .map(|(x, y)| x + y)
            .collect();
        assert!(lhs.iter().zip(&rhs).all(|(x, y)| (x - y).abs() < 1e-9));
    }

    #[test]
    fn weight_extractor_shapes_and_init() {
        let dev = Device::Cpu;
        let cfg = FusionConfig { embed_dim: 8, heads: 2, window: 4, ..FusionConfig::default() };
        let mut ps = ParamStore::new(5, DType::F32, &dev);
        let we = WeightExtractor::new(&mut ps.root(), &cfg, 16).unwrap();
        let a = Image::new(64, 32, (0..3 * 64 * 32).map(|i| (i % 17) as f32 / 17.0).collect()).unwrap();
        let w = extract_weights(&a, &we).unwrap();
        assert_eq!(w.dims(), &[1, 4, 4, 2]);
        assert_eq!(vals(&w), vals(&extract_weights(&a, &we).unwrap()));
        assert_ne!(vals(&w), vals(&extract_weights(&Image::filled(64, 32, 0.5), &we).unwrap()));
        assert!(extract_weights(&Image::filled(40, 32, 0.5), &we).is_err());
        assert_eq!(fit_window(4, 4, 6), 2);
        assert_eq!(fit_window(4, 8, 8), 4);
    }

    #[test]
    fn shifted_windows_round_trip_with_identity_layer() {
        let dev = Device::Cpu;
        let mut ps = ParamStore::new(6, DType::F64, &dev);
        let layer = TransformerBlock::new(&mut ps.root(), 4, 2, 2, 0.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = randn(&mut rng, &[2, 4, 4, 6], DType::F64, &dev).unwrap();
        assert_eq!(vals(&windowed(&x, 2, 1, &layer).unwrap()), vals(&x));
    }

    #[test]
    fn zero_gates_reduce_to_plain_decoding() {
        let dev = Device::Cpu;
        let vq = VqConfig { latent_dim: 4, channels: vec![4, 4, 8, 8], res_blocks: 0, ..VqConfig::default() };
        let mut ps = ParamStore::new(8, DType::F32, &dev);
        let da = AssistiveDecoder::new(&mut ps.root().pp("da"), &vq).unwrap();
        let dvq = ConvDecoder::new(&mut ps.root().pp("dvq"), 4, &vq.channels, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let y = randn(&mut rng, &[1, 4, 1, 2], DType::F32, &dev).unwrap();
        let fused = decode_fused(&y, &da, &dvq).unwrap();
        assert_eq!(fused.dims(), &[1, 3, 16, 32]);
        assert_eq!(vals(&fused), vals(&dvq.forward(&y).unwrap()));
        ps.var("da.gates").unwrap().set(&Tensor::ones(4, DType::F32, &dev).unwrap()).unwrap();
        assert_ne!(vals(&decode_fused(&y, &da, &dvq).unwrap()), vals(&fused));
    }
}
