//! Conventional LIC stream: a rounding-quantized autoencoder working on a
//! bilinearly downsized copy of the input, the joint and condition DRV
//! extractors, and the DRV-conditioned enhancer that yields x̂_lic.

use candle_core::{DType, Device, Tensor};

use crate::backbone::{center, ConvDecoder, ConvEncoder, DrvExtractor};
use crate::bitstream::{BitReader, BitWriter};
use crate::config::LicConfig;
use crate::error::{shape_err, Error, Result};
use crate::image::{resize_bilinear, Image};
use crate::nn::{from_tokens, to_tokens, Attention, LayerNorm, Linear, Mlp, ParamStore, Scope};

/// Bytes before the integer plane: u8 bit width, u16 rows, u16 cols, u16 channels.
pub const LIC_SUBHEADER_BYTES: usize = 7;

/// Rounded latent, channel-major (c, h, w).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LicLatent {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub values: Vec<i32>,
}

impl LicLatent {
    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        let v: Vec<f32> = self.values.iter().map(|&q| q as f32).collect();
        Ok(Tensor::from_vec(v, (1, self.channels, self.height, self.width), device)?.to_dtype(dtype)?)
    }

    /// Reads an already-rounded (1, c, h, w) tensor.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (b, channels, height, width) = t.dims4()?;
        if b != 1 {
            return Err(shape_err(format!("expected a single latent, got batch {b}")));
        }
        let values = t
            .to_dtype(DType::F32)?
            .flatten_all()?
            .to_vec1::<f32>()?
            .iter()
            .map(|&v| v.round() as i32)
            .collect();
        Ok(Self {
            channels,
            height,
            width,
            values,
        })
    }

    pub fn to_payload(&self, bit_width: u8) -> Result<Vec<u8>> {
        let (lo, hi) = int_range(bit_width);
        let dims = [self.height, self.width, self.channels];
        if dims.iter().any(|&d| d > u16::MAX as usize) {
            return Err(Error::Payload(format!("latent dims {dims:?} exceed u16")));
        }
        let mut out = vec![bit_width];
        for d in dims {
            out.extend_from_slice(&(d as u16).to_le_bytes());
        }
        let mut w = BitWriter::new();
        let mask = (1u64 << bit_width) - 1;
        for &v in &self.values {
            if v < lo || v > hi {
                return Err(Error::Payload(format!("value {v} outside {bit_width}-bit range")));
            }
            w.write(v as i64 as u64 & mask, bit_width as u32);
        }
        out.extend(w.finish());
        Ok(out)
    }

    pub fn from_payload(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < LIC_SUBHEADER_BYTES {
            return Err(Error::Payload(format!("{} bytes is shorter than the sub-header", bytes.len())));
        }
        let bit_width = bytes[0];
        if !(1..=16).contains(&bit_width) {
            return Err(Error::Payload(format!("bit width {bit_width}")));
        }
        let u16_at = |i: usize| u16::from_le_bytes([bytes[i], bytes[i + 1]]) as usize;
        let (height, width, channels) = (u16_at(1), u16_at(3), u16_at(5));
        let n = height * width * channels;
        let plane = &bytes[LIC_SUBHEADER_BYTES..];
        if plane.len() != (n * bit_width as usize).div_ceil(8) {
            return Err(Error::Payload(format!(
                "{} plane bytes for {n} values of {bit_width} bits",
                plane.len()
            )));
        }
        let mut r = BitReader::new(plane);
        let sign = 1u64 << (bit_width - 1);
        let values = (0..n)
            .map(|_| {
                let raw = r.read(bit_width as u32).expect("length checked above");
                // Sign-extend from bit_width bits.
                (raw as i64 - (((raw & sign) << 1) as i64)) as i32
            })
            .collect();
        let pad = (plane.len() * 8 - r.bits_consumed()) as u32;
        if pad > 0 && r.read(pad) != Some(0) {
            return Err(Error::Payload("non-zero padding bits".into()));
        }
        Ok(Self {
            channels,
            height,
            width,
            values,
        })
    }
}

/// Payload length in bytes for a given config; constant per config.
pub fn payload_len(cfg: &LicConfig) -> usize {
    let g = cfg.input_size / cfg.downsample;
    LIC_SUBHEADER_BYTES + (g * g * cfg.latent_channels * cfg.bit_width as usize).div_ceil(8)
}

/// Inclusive signed range of a `bits`-wide two's-complement integer.
pub fn int_range(bits: u8) -> (i32, i32) {
    let half = 1i32 << (bits - 1);
    (-half, half - 1)
}

/// Base LIC autoencoder (stand-in for a pre-trained codec).
#[derive(Debug, Clone)]
pub struct LicCodec {
    encoder: ConvEncoder,
    decoder: ConvDecoder,
    input_size: usize,
    bit_width: u8,
}

impl LicCodec {
    pub fn new(store: &mut ParamStore, cfg: &LicConfig) -> Result<Self> {
        let mut s = store.root();
        Ok(Self {
            encoder: ConvEncoder::new(&mut s.pp("encoder"), 3, &cfg.channels, 1, cfg.latent_channels)?,
            decoder: ConvDecoder::new(&mut s.pp("decoder"), cfg.latent_channels, &cfg.channels, 1)?,
            input_size: cfg.input_size,
            bit_width: cfg.bit_width,
        })
    }

    pub fn bit_width(&self) -> u8 {
        self.bit_width
    }

    /// Channel width of the features the enhancer operates on.
    pub fn enhancer_channels(&self) -> usize {
        self.decoder.stage_channels()[0]
    }

    /// (B,3,H,W) -> continuous latent of the downsized input.
    pub fn analysis(&self, x: &Tensor) -> Result<Tensor> {
        let small = resize_bilinear(x, self.input_size, self.input_size)?;
        self.encoder.forward(&center(&small)?)
    }

    /// Rounds and clamps to the payload range; the gradient passes straight through.
    pub fn quantize(&self, y: &Tensor) -> Result<Tensor> {
        let (lo, hi) = int_range(self.bit_width);
        let q = y.round()?.clamp(lo as f64, hi as f64)?;
        Ok((y + (q - y)?.detach())?)
    }

    /// Decoded image resized back to (height, width).
    pub fn synthesis(&self, yq: &Tensor, height: usize, width: usize) -> Result<Tensor> {
        resize_bilinear(&self.decoder.forward(yq)?, height, width)
    }

    /// As [`Self::synthesis`], with the enhancer applied after the first
    /// upsampling stage of the decoder.
    pub fn synthesis_enhanced(
        &self,
        yq: &Tensor,
        drv: &Tensor,
        enhancer: &Enhancer,
        height: usize,
        width: usize,
    ) -> Result<Tensor> {
        let out = self.decoder.forward_hooked(yq, &mut |j, h| {
            if j == 0 {
                enhancer.forward(&h, drv)
            } else {
                Ok(h)
            }
        })?;
        resize_bilinear(&out, height, width)
    }
}

pub fn lic_encode(image: &Image, codec: &LicCodec) -> Result<(LicLatent, Vec<u8>)> {
    if image.height < 16 || image.width < 16 {
        return Err(shape_err(format!("{}x{} image below 16x16", image.height, image.width)));
    }
    let x = image.to_tensor(DType::F32, &Device::Cpu)?;
    let yq = codec.quantize(&codec.analysis(&x)?)?;
    let latent = LicLatent::from_tensor(&yq)?;
    let payload = latent.to_payload(codec.bit_width)?;
    Ok((latent, payload))
}

/// Reconstructs x̂ at the original resolution.
pub fn lic_decode(payload: &[u8], codec: &LicCodec, height: usize, width: usize) -> Result<Image> {
    let latent = LicLatent::from_payload(payload)?;
    let yq = latent.to_tensor(DType::F32, &Device::Cpu)?;
    Image::from_tensor(&codec.synthesis(&yq, height, width)?)
}

/// x̂_lic for a transmitted payload: the decoder re-run with DRV-conditioned
/// enhancement of its intermediate features.
pub fn enhance(
    payload: &[u8],
    drv: &[f32],
    codec: &LicCodec,
    enhancer: &Enhancer,
    height: usize,
    width: usize,
) -> Result<Image> {
    let latent = LicLatent::from_payload(payload)?;
    let dev = Device::Cpu;
    let yq = latent.to_tensor(DType::F32, &dev)?;
    let v = Tensor::from_slice(drv, (1, drv.len()), &dev)?;
    Image::from_tensor(&codec.synthesis_enhanced(&yq, &v, enhancer, height, width)?)
}

/// E_L(x, x̂) on a channel-concatenated pair.
pub fn joint_drv_batch(x: &Tensor, x_hat: &Tensor, extractor: &DrvExtractor) -> Result<Tensor> {
    if x.dims() != x_hat.dims() {
        return Err(shape_err(format!("{:?} vs {:?}", x.dims(), x_hat.dims())));
    }
    extractor.forward(&Tensor::cat(&[&center(x)?, &center(x_hat)?], 1)?)
}

pub fn condition_batch(x_hat: &Tensor, extractor: &DrvExtractor) -> Result<Tensor> {
    extractor.forward(&center(x_hat)?)
}

pub fn extract_joint_drv(x: &Image, x_hat: &Image, extractor: &DrvExtractor) -> Result<Vec<f32>> {
    if x.dims() != x_hat.dims() {
        return Err(shape_err(format!("{:?} vs {:?}", x.dims(), x_hat.dims())));
    }
    let dev = Device::Cpu;
    let v = joint_drv_batch(&x.to_tensor(DType::F32, &dev)?, &x_hat.to_tensor(DType::F32, &dev)?, extractor)?;
    Ok(v.flatten_all()?.to_vec1::<f32>()?)
}

pub fn extract_condition(x_hat: &Image, extractor: &DrvExtractor) -> Result<Vec<f32>> {
    let v = condition_batch(&x_hat.to_tensor(DType::F32, &Device::Cpu)?, extractor)?;
    Ok(v.flatten_all()?.to_vec1::<f32>()?)
}

#[derive(Debug, Clone)]
struct EnhancerBlock {
    norm1: LayerNorm,
    self_attn: Attention,
    norm2: LayerNorm,
    cross_attn: Attention,
    norm3: LayerNorm,
    mlp: Mlp,
}

/// Transformer blocks over decoder features; the DRV is projected into a few
/// key/value tokens for cross-attention. Every residual branch ends in a
/// zero-initialized projection, so a fresh enhancer is the identity.
#[derive(Debug, Clone)]
pub struct Enhancer {
    drv_proj: Linear,
    blocks: Vec<EnhancerBlock>,
    drv_dim: usize,
    drv_tokens: usize,
}

impl Enhancer {
    pub fn new(s: &mut Scope, channels: usize, drv_dim: usize, cfg: &LicConfig) -> Result<Self> {
        let heads = cfg.enhancer_heads;
        let blocks = (0..cfg.enhancer_blocks)
            .map(|i| {
                let mut b = s.pp(format!("block{i}"));
                Ok(EnhancerBlock {
                    norm1: LayerNorm::new(&mut b.pp("norm1"), channels)?,
                    self_attn: Attention::new(&mut b.pp("self_attn"), channels, channels, heads, 0.0)?,
                    norm2: LayerNorm::new(&mut b.pp("norm2"), channels)?,
                    cross_attn: Attention::new(&mut b.pp("cross_attn"), channels, drv_dim, heads, 0.0)?,
                    norm3: LayerNorm::new(&mut b.pp("norm3"), channels)?,
                    mlp: Mlp::new(&mut b.pp("mlp"), channels, 2 * channels, 0.0)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            drv_proj: Linear::new(&mut s.pp("drv_proj"), drv_dim, cfg.drv_tokens * drv_dim)?,
            blocks,
            drv_dim,
            drv_tokens: cfg.drv_tokens,
        })
    }

    /// h: (B, C, H, W) decoder features; drv: (B, D).
    pub fn forward(&self, h: &Tensor, drv: &Tensor) -> Result<Tensor> {
        let (b, _, hh, ww) = h.dims4()?;
        let (db, d) = drv.dims2()?;
        if d != self.drv_dim || db != b {
            return Err(shape_err(format!(
                "enhancer expects ({b}, {}) DRV, got {:?}",
                self.drv_dim,
                drv.dims()
            )));
        }
        let ctx = self.drv_proj.forward(drv)?.reshape((b, self.drv_tokens, d))?;
        let mut t = to_tokens(h)?;
        for blk in &self.blocks {
            let n = blk.norm1.forward(&t)?;
            t = (&t + blk.self_attn.forward(&n, &n)?)?;
            t = (&t + blk.cross_attn.forward(&blk.norm2.forward(&t)?, &ctx)?)?;
            t = (&t + blk.mlp.forward(&blk.norm3.forward(&t)?)?)?;
        }
        from_tokens(&t, hh, ww)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::CodecConfig;
    use crate::nn::scalar;
    use proptest::prelude::*;

    fn toy() -> LicConfig {
        CodecConfig::toy().lic
    }

    fn pattern(h: usize, w: usize, phase: f32) -> Image {
        let data = (0..3 * h * w)
            .map(|i| 0.5 + 0.4 * ((i as f32) * 0.37 + phase).sin())
            .collect();
        Image::new(h, w, data).unwrap()
    }

    #[test]
    fn payload_is_constant_size_and_round_trips() {
        let cfg = toy();
        let mut ps = ParamStore::new(1, DType::F32, &Device::Cpu);
        let codec = LicCodec::new(&mut ps, &cfg).unwrap();
        let img = pattern(64, 48, 0.0);
        let (lat, payload) = lic_encode(&img, &codec).unwrap();
        assert_eq!((lat.channels, lat.height, lat.width), (5, 2, 2));
        assert_eq!(payload.len(), payload_len(&cfg));
        assert_eq!(LicLatent::from_payload(&payload).unwrap(), lat);
        let out = lic_decode(&payload, &codec, 64, 48).unwrap();
        assert_eq!(out.dims(), (64, 48));
        assert_eq!(out, lic_decode(&payload, &codec, 64, 48).unwrap());
        assert!(lic_encode(&Image::filled(8, 32, 0.0), &codec).is_err());
    }

    #[test]
    fn default_payload_is_1656_bits() {
        assert_eq!(payload_len(&LicConfig::default()) * 8, 1656);
    }

    #[test]
    fn zero_network_rounds_to_zero() {
        let cfg = toy();
        let mut ps = ParamStore::new(1, DType::F32, &Device::Cpu);
        let codec = LicCodec::new(&mut ps, &cfg).unwrap();
        ps.randomize(0, 0.0).unwrap();
        let (lat, _) = lic_encode(&Image::filled(32, 32, 0.0), &codec).unwrap();
        assert!(lat.values.iter().all(|&v| v == 0));
    }

    #[test]
    fn malformed_payloads_are_rejected() {
        assert!(LicLatent::from_payload(&[5, 1, 0]).is_err());
        let lat = LicLatent { channels: 1, height: 1, width: 3, values: vec![-16, 15, 0] };
        let mut p = lat.to_payload(5).unwrap();
        p.push(0);
        assert!(LicLatent::from_payload(&p).is_err());
        assert!(lat.to_payload(4).is_err());
    }

    proptest! {
        #[test]
        fn payload_round_trip(bits in 1u8..=12, vals in proptest::collection::vec(any::<i32>(), 1..40)) {
            let (lo, hi) = int_range(bits);
            let values: Vec<i32> = vals.iter().map(|v| v.rem_euclid(hi - lo + 1) + lo).collect();
            let lat = LicLatent { channels: 1, height: 1, width: values.len(), values };
            let p = lat.to_payload(bits).unwrap();
            prop_assert_eq!(LicLatent::from_payload(&p).unwrap(), lat);
        }
    }

    #[test]
    fn requantizing_decoded_latent_is_idempotent() {
        let cfg = toy();
        let mut ps = ParamStore::new(2, DType::F32, &Device::Cpu);
        let codec = LicCodec::new(&mut ps, &cfg).unwrap();
        ps.randomize(3, 0.3).unwrap();
        let (lat, _) = lic_encode(&pattern(32, 32, 1.0), &codec).unwrap();
        let yq = lat.to_tensor(DType::F32, &Device::Cpu).unwrap();
        let again = LicLatent::from_tensor(&codec.quantize(&yq).unwrap()).unwrap();
        assert_eq!(again, lat);
    }

    #[test]
    fn fresh_enhancer_is_identity_and_drvs_behave() {
        let cfg = CodecConfig::toy();
        let dev = Device::Cpu;
        let mut lic = ParamStore::new(1, DType::F32, &dev);
        let mut enh = ParamStore::new(2, DType::F32, &dev);
        let mut ext = ParamStore::new(3, DType::F32, &dev);
        let codec = LicCodec::new(&mut lic, &cfg.lic).unwrap();
        let enhancer = Enhancer::new(&mut enh.root(), codec.enhancer_channels(), cfg.drv.dim, &cfg.lic).unwrap();
        let e_l = DrvExtractor::new(&mut ext.root().pp("joint"), 6, &cfg.drv.extractor_channels, cfg.drv.dim).unwrap();
        let e_c = DrvExtractor::new(&mut ext.root().pp("cond"), 3, &cfg.drv.extractor_channels, cfg.drv.dim).unwrap();
        let x = pattern(64, 64, 0.0);
        let (_, payload) = lic_encode(&x, &codec).unwrap();
        let x_hat = lic_decode(&payload, &codec, 64, 64).unwrap();
        let v = extract_joint_drv(&x, &x_hat, &e_l).unwrap();
        assert_eq!(v.len(), cfg.drv.dim);
        assert!(v.iter().all(|a| a.is_finite()));
        assert!(extract_joint_drv(&x, &x, &e_l).unwrap().iter().all(|a| a.is_finite()));
        let noisy = pattern(64, 64, 0.3);
        let v2 = extract_joint_drv(&noisy, &x_hat, &e_l).unwrap();
        assert!(v.iter().zip(&v2).map(|(a, b)| (a - b).powi(2)).sum::<f32>() > 0.0);
        let c = extract_condition(&x_hat, &e_c).unwrap();
        assert_eq!(c.len(), v.len());
        assert_eq!(c, extract_condition(&x_hat, &e_c).unwrap());
        assert_ne!(c, extract_condition(&noisy, &e_c).unwrap());
        assert_eq!(enhance(&payload, &v, &codec, &enhancer, 64, 64).unwrap(), x_hat);
        assert!(enhance(&payload, &v[..8], &codec, &enhancer, 64, 64).is_err());
    }

    #[test]
    fn enhancer_gradient_wrt_drv_matches_finite_differences() {
        let dev = Device::Cpu;
        let cfg = LicConfig { enhancer_blocks: 1, enhancer_heads: 2, drv_tokens: 2, ..toy() };
        let mut ps = ParamStore::new(4, DType::F64, &dev);
        let enh = Enhancer::new(&mut ps.root(), 4, 6, &cfg).unwrap();
        ps.randomize(5, 0.4).unwrap();
        let h = crate::nn::randn(&mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(6), &[1, 4, 2, 2], DType::F64, &dev).unwrap();
        let d0: Vec<f64> = (0..6).map(|i| 0.3 * i as f64 - 0.7).collect();
        let f = |d: &[f64]| -> f64 {
            let v = Tensor::from_slice(d, (1, 6), &dev).unwrap();
            scalar(&enh.forward(&h, &v).unwrap().sqr().unwrap().sum_all().unwrap()).unwrap()
        };
        let var = candle_core::Var::from_tensor(&Tensor::from_slice(&d0, (1, 6), &dev).unwrap()).unwrap();
        let loss = enh.forward(&h, var.as_tensor()).unwrap().sqr().unwrap().sum_all().unwrap();
        let g = loss.backward().unwrap().get(var.as_tensor()).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        for i in 0..6 {
            let (mut up, mut dn) = (d0.clone(), d0.clone());
            up[i] += 1e-5;
            dn[i] -= 1e-5;
            let fd = (f(&up) - f(&dn)) / 2e-5;
            let rel = (fd - g[i]).abs() / fd.abs().max(1e-8);
            assert!(rel < 1e-3, "entry {i}: fd {fd} vs autodiff {}", g[i]);
        }
    }

    #[test]
    fn trained_codec_beats_a_gray_image() {
        use crate::corpus::{synthetic_corpus, synthetic_image};
        use crate::metrics::psnr;
        use crate::nn::mse_loss;
        use candle_nn::{AdamW, Optimizer, ParamsAdamW};

        let cfg = toy();
        let mut store = ParamStore::new(4, DType::F32, &Device::Cpu);
        let codec = LicCodec::new(&mut store, &cfg).unwrap();
        let params = ParamsAdamW { lr: 2e-3, weight_decay: 0.0, ..Default::default() };
        let mut opt = AdamW::new(store.vars(), params).unwrap();
        for step in 0..400u64 {
            let imgs: Vec<Image> = (0..4).map(|j| synthetic_image(64, 500 + 4 * step + j)).collect();
            let x = Image::batch_to_tensor(&imgs, DType::F32, &Device::Cpu).unwrap();
            let x_hat = codec.synthesis(&codec.quantize(&codec.analysis(&x).unwrap()).unwrap(), 64, 64).unwrap();
            opt.backward_step(&mse_loss(&x_hat, &x).unwrap()).unwrap();
        }
        let gray = Image::new(64, 64, vec![0.5; 3 * 64 * 64]).unwrap();
        let (mut coded, mut flat) = (0.0, 0.0);
        let held_out = synthetic_corpus(8, 64, 0xBEEF);
        for x in &held_out {
            let (_, payload) = lic_encode(x, &codec).unwrap();
            coded += psnr(x, &lic_decode(&payload, &codec, 64, 64).unwrap()).unwrap();
            flat += psnr(x, &gray).unwrap();
        }
        let n = held_out.len() as f64;
        assert!(coded / n > flat / n, "LIC {:.2} dB vs gray {:.2} dB", coded / n, flat / n);
    }
}
