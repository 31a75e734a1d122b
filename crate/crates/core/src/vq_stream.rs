//! Generative stream backbone: VQ encoder, learned codebook, nearest-codeword
//! quantization, codeword lookup and the base VQ decoder.

use candle_core::{DType, Device, Tensor, Var};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::{center, ConvDecoder, ConvEncoder};
use crate::bitstream::IndexMap;
use crate::config::VqConfig;
use crate::error::{shape_err, Error, Result};
use crate::image::Image;
use crate::nn::{mse_loss, scalar, Init, ParamStore};
use crate::pipeline::loss::ImageLoss;

/// K codewords of dimension C_vq, stored as a trainable (K, C_vq) matrix.
#[derive(Debug, Clone)]
pub struct Codebook {
    weight: Tensor,
    var: Var,
}

impl Codebook {
    pub const PARAM: &'static str = "codebook.weight";

    /// Uniform init in [-1/K, 1/K].
    pub fn new(store: &mut ParamStore, size: usize, dim: usize) -> Result<Self> {
        let bound = 1.0 / size as f64;
        let weight = store
            .root()
            .get(Self::PARAM, &[size, dim], Init::Uniform(-bound, bound))?;
        let var = store
            .var(Self::PARAM)
            .cloned()
            .expect("created just above");
        Ok(Self { weight, var })
    }

    pub fn from_codewords(store: &mut ParamStore, size: usize, dim: usize, values: &[f32]) -> Result<Self> {
        let cb = Self::new(store, size, dim)?;
        let t = Tensor::from_slice(values, (size, dim), store.device())?.to_dtype(store.dtype())?;
        cb.var.set(&t)?;
        Ok(cb)
    }

    pub fn size(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn dim(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.weight
    }

    /// Row-major copy of all codewords.
    pub fn codewords(&self) -> Result<Vec<f32>> {
        Ok(self.weight.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?)
    }

    fn overwrite_rows(&self, rows: &[(usize, Vec<f32>)]) -> Result<()> {
        let mut all = self.codewords()?;
        let d = self.dim();
        for (k, v) in rows {
            all[k * d..(k + 1) * d].copy_from_slice(v);
        }
        let t = Tensor::from_vec(all, (self.size(), d), self.weight.device())?
            .to_dtype(self.weight.dtype())?;
        self.var.set(&t)?;
        Ok(())
    }
}

/// (H/n) x (W/n) grid of C_vq-dim vectors, cell-major.
#[derive(Debug, Clone, PartialEq)]
pub struct VqLatent {
    pub grid_h: usize,
    pub grid_w: usize,
    pub dim: usize,
    pub data: Vec<f32>,
}

impl VqLatent {
    pub fn cell(&self, row: usize, col: usize) -> &[f32] {
        let start = (row * self.grid_w + col) * self.dim;
        &self.data[start..start + self.dim]
    }

    /// (1, dim, grid_h, grid_w).
    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        let t = Tensor::from_slice(&self.data, (1, self.grid_h, self.grid_w, self.dim), device)?;
        Ok(t.permute((0, 3, 1, 2))?.contiguous()?.to_dtype(dtype)?)
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (b, dim, grid_h, grid_w) = t.dims4()?;
        if b != 1 {
            return Err(shape_err(format!("expected a single latent, got batch {b}")));
        }
        let data = t
            .permute((0, 2, 3, 1))?
            .to_dtype(DType::F32)?
            .flatten_all()?
            .to_vec1::<f32>()?;
        Ok(Self {
            grid_h,
            grid_w,
            dim,
            data,
        })
    }
}

/// Index of the codeword nearest to `y` in squared L2; the smallest index wins ties.
pub fn nearest_codeword(y: &[f32], codewords: &[f32], dim: usize) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (k, c) in codewords.chunks_exact(dim).enumerate() {
        let d: f64 = c
            .iter()
            .zip(y)
            .map(|(&a, &b)| {
                let diff = a as f64 - b as f64;
                diff * diff
            })
            .sum();
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

pub fn encode_vq(image: &Image, encoder: &ConvEncoder) -> Result<VqLatent> {
    let f = encoder.factor();
    if !image.height.is_multiple_of(f) || !image.width.is_multiple_of(f) {
        return Err(shape_err(format!(
            "{}x{} image not divisible by n={f}",
            image.height, image.width
        )));
    }
    let x = image.to_tensor(DType::F32, &Device::Cpu)?;
    VqLatent::from_tensor(&latent_of(&x, encoder)?)
}

/// E_vq with every cell rescaled to unit RMS over channels, which keeps the
/// encoder from outrunning the codebook early in training.
fn latent_of(x: &Tensor, encoder: &ConvEncoder) -> Result<Tensor> {
    let z = encoder.forward(&center(x)?)?;
    let rms = (z.sqr()?.mean_keepdim(1)? + 1e-6)?.sqrt()?;
    Ok(z.broadcast_div(&rms)?)
}

pub fn quantize(latent: &VqLatent, codebook: &Codebook) -> Result<IndexMap> {
    if latent.dim != codebook.dim() {
        return Err(shape_err(format!(
            "latent dim {} != codeword dim {}",
            latent.dim,
            codebook.dim()
        )));
    }
    let cw = codebook.codewords()?;
    let ids = latent
        .data
        .chunks_exact(latent.dim)
        .map(|y| nearest_codeword(y, &cw, latent.dim).0 as u32)
        .collect();
    IndexMap::new(latent.grid_h, latent.grid_w, ids)
}

pub fn lookup(map: &IndexMap, codebook: &Codebook) -> Result<VqLatent> {
    map.check_range(codebook.size())?;
    let cw = codebook.codewords()?;
    let d = codebook.dim();
    let mut data = Vec::with_capacity(map.len() * d);
    for &id in &map.ids {
        data.extend_from_slice(&cw[id as usize * d..(id as usize + 1) * d]);
    }
    Ok(VqLatent {
        grid_h: map.grid_h,
        grid_w: map.grid_w,
        dim: d,
        data,
    })
}

pub fn decode_vq(latent: &VqLatent, decoder: &ConvDecoder) -> Result<Image> {
    let z = latent.to_tensor(DType::F32, &Device::Cpu)?;
    Image::from_tensor(&decoder.forward(&z)?)
}

/// Encoder, codebook and decoder of the generative stream.
#[derive(Debug, Clone)]
pub struct VqAutoencoder {
    pub encoder: ConvEncoder,
    pub codebook: Codebook,
    pub decoder: ConvDecoder,
}

/// Output of quantizing a batch inside the training graph.
pub struct BatchQuantized {
    /// Nearest codewords, differentiable w.r.t. the codebook.
    pub quantized: Tensor,
    /// Straight-through output: forward value of `quantized`, gradient of identity w.r.t. `z`.
    pub straight_through: Tensor,
    pub ids: Vec<u32>,
}

impl VqAutoencoder {
    pub fn new(
        enc: &mut ParamStore,
        cb: &mut ParamStore,
        dec: &mut ParamStore,
        cfg: &VqConfig,
    ) -> Result<Self> {
        Ok(Self {
            encoder: ConvEncoder::new(
                &mut enc.root(),
                3,
                &cfg.channels,
                cfg.res_blocks,
                cfg.latent_dim,
            )?,
            codebook: Codebook::new(cb, cfg.codebook_size, cfg.latent_dim)?,
            decoder: ConvDecoder::new(&mut dec.root(), cfg.latent_dim, &cfg.channels, cfg.res_blocks)?,
        })
    }

    /// (B,3,H,W) pixels -> (B,C_vq,H/n,W/n) continuous latent.
    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        latent_of(x, &self.encoder)
    }

    pub fn quantize_batch(&self, z: &Tensor) -> Result<BatchQuantized> {
        let (b, d, gh, gw) = z.dims4()?;
        let cells = z
            .permute((0, 2, 3, 1))?
            .to_dtype(DType::F32)?
            .flatten_all()?
            .to_vec1::<f32>()?;
        let cw = self.codebook.codewords()?;
        let ids: Vec<u32> = cells
            .chunks_exact(d)
            .map(|y| nearest_codeword(y, &cw, d).0 as u32)
            .collect();
        let quantized = self.lookup_batch(&ids, b, gh, gw)?;
        let straight_through = (z + (&quantized - z)?.detach())?;
        Ok(BatchQuantized {
            quantized,
            straight_through,
            ids,
        })
    }

    /// Row-major ids of `b` grids -> (B, C_vq, gh, gw) codeword tensor.
    pub fn lookup_batch(&self, ids: &[u32], b: usize, gh: usize, gw: usize) -> Result<Tensor> {
        let k = self.codebook.size();
        if let Some(&id) = ids.iter().find(|&&id| id as usize >= k) {
            return Err(Error::Range {
                id,
                codebook_size: k as u32,
            });
        }
        let idx = Tensor::from_slice(ids, ids.len(), self.codebook.tensor().device())?;
        let q = self.codebook.tensor().index_select(&idx, 0)?;
        Ok(q
            .reshape((b, gh, gw, self.codebook.dim()))?
            .permute((0, 3, 1, 2))?
            .contiguous()?)
    }

    pub fn decode(&self, q: &Tensor) -> Result<Tensor> {
        self.decoder.forward(q)
    }

    /// Full single-image round trip through the quantizer.
    pub fn reconstruct(&self, image: &Image) -> Result<Image> {
        let latent = encode_vq(image, &self.encoder)?;
        let map = quantize(&latent, &self.codebook)?;
        decode_vq(&lookup(&map, &self.codebook)?, &self.decoder)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct VqLosses {
    pub image: f64,
    pub codebook: f64,
    pub commitment: f64,
    pub total: f64,
}

/// Owns the optimizer state of generative-stream pre-training.
pub struct VqTrainer {
    opt: AdamW,
    usage: Vec<u64>,
    steps: usize,
    dead_code_interval: usize,
    commitment: f64,
    rng: ChaCha8Rng,
}

impl VqTrainer {
    pub fn new(vars: Vec<Var>, lr: f64, cfg: &VqConfig, seed: u64) -> Result<Self> {
        let opt = AdamW::new(
            vars,
            ParamsAdamW {
                lr,
                weight_decay: 0.0,
                ..Default::default()
            },
        )?;
        Ok(Self {
            opt,
            usage: vec![0; cfg.codebook_size],
            steps: 0,
            dead_code_interval: cfg.dead_code_interval,
            commitment: cfg.commitment,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    /// One gradient step of image loss + codebook loss + commitment loss.
    pub fn step(&mut self, vq: &VqAutoencoder, batch: &Tensor, loss: &ImageLoss) -> Result<VqLosses> {
        let z = vq.encode(batch)?;
        let q = vq.quantize_batch(&z)?;
        let x_hat = vq.decode(&q.straight_through)?;
        let image = loss.terms(&x_hat, batch)?;
        let codebook_loss = mse_loss(&q.quantized, &z.detach())?;
        let commitment = mse_loss(&z, &q.quantized.detach())?;
        let total = ((&image.total + &codebook_loss)? + (commitment.clone() * self.commitment)?)?;
        let losses = VqLosses {
            image: scalar(&image.total)?,
            codebook: scalar(&codebook_loss)?,
            commitment: scalar(&commitment)?,
            total: scalar(&total)?,
        };
        if !losses.total.is_finite() {
            return Err(Error::Diverged {
                step: self.steps,
                detail: format!("{losses:?}"),
            });
        }
        self.opt.backward_step(&total)?;
        for &id in &q.ids {
            self.usage[id as usize] += 1;
        }
        self.steps += 1;
        if self.dead_code_interval > 0 && self.steps.is_multiple_of(self.dead_code_interval) {
            self.reseed_dead_codes(vq, &z)?;
        }
        Ok(losses)
    }

    /// Replaces codewords unused since the last reseed with random encoder outputs.
    fn reseed_dead_codes(&mut self, vq: &VqAutoencoder, z: &Tensor) -> Result<usize> {
        let d = vq.codebook.dim();
        let cells = z
            .permute((0, 2, 3, 1))?
            .to_dtype(DType::F32)?
            .flatten_all()?
            .to_vec1::<f32>()?;
        let n_cells = cells.len() / d;
        let rows: Vec<(usize, Vec<f32>)> = self
            .usage
            .iter()
            .enumerate()
            .filter(|(_, &u)| u == 0)
            .map(|(k, _)| {
                let src = self.rng.random_range(0..n_cells);
                let v = cells[src * d..(src + 1) * d]
                    .iter()
                    .map(|&x| x + 0.01 * (self.rng.random::<f32>() - 0.5))
                    .collect();
                (k, v)
            })
            .collect();
        if !rows.is_empty() {
            vq.codebook.overwrite_rows(&rows)?;
        }
        self.usage.iter_mut().for_each(|u| *u = 0);
        Ok(rows.len())
    }
}
