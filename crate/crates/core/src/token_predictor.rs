//! DRV-fused masked-token predictor: recovers the full index map from the
//! transmitted (masked) ids, the predictor DRV and features of x̂_lic.
//!
//! Sequence layout: slot 0 carries the (projected) DRV, slots 1..=L the grid
//! cells in row-major order.

use candle_core::{DType, Device, Tensor, D};

use crate::backbone::{center, ConvEncoder};
use crate::bitstream::{BinaryMask, IndexMap, MaskedIndexMap};
use crate::config::{PredictorConfig, VqConfig};
use crate::error::{shape_err, Error, Result};
use crate::image::Image;
use crate::nn::{log_softmax_last, to_tokens, Attention, Init, LayerNorm, Linear, Mlp, Scope, TransformerBlock};

#[derive(Debug, Clone)]
struct DecoderBlock {
    norm1: LayerNorm,
    self_attn: Attention,
    norm2: LayerNorm,
    cross_attn: Attention,
    norm3: LayerNorm,
    mlp: Mlp,
}

impl DecoderBlock {
    fn new(s: &mut Scope, dim: usize, cfg: &PredictorConfig) -> Result<Self> {
        Ok(Self {
            norm1: LayerNorm::new(&mut s.pp("norm1"), dim)?,
            self_attn: Attention::new(&mut s.pp("self_attn"), dim, dim, cfg.heads, 1.0)?,
            norm2: LayerNorm::new(&mut s.pp("norm2"), dim)?,
            cross_attn: Attention::new(&mut s.pp("cross_attn"), dim, dim, cfg.heads, 1.0)?,
            norm3: LayerNorm::new(&mut s.pp("norm3"), dim)?,
            mlp: Mlp::new(&mut s.pp("mlp"), dim, cfg.mlp_ratio * dim, 1.0)?,
        })
    }

    fn forward(&self, x: &Tensor, memory: &Tensor) -> Result<Tensor> {
        let n = self.norm1.forward(x)?;
        let x = (x + self.self_attn.forward(&n, &n)?)?;
        let x = (&x + self.cross_attn.forward(&self.norm2.forward(&x)?, memory)?)?;
        Ok((&x + self.mlp.forward(&self.norm3.forward(&x)?)?)?)
    }
}

/// Learned row/column codes for grid cells plus one code for slot 0.
#[derive(Debug, Clone)]
struct Positions {
    rows: Tensor,
    cols: Tensor,
    slot0: Tensor,
}

impl Positions {
    fn new(s: &mut Scope, max_grid: usize, dim: usize) -> Result<Self> {
        Ok(Self {
            rows: s.get("rows", &[max_grid, dim], Init::Normal(0.02))?,
            cols: s.get("cols", &[max_grid, dim], Init::Normal(0.02))?,
            slot0: s.get("slot0", &[dim], Init::Normal(0.02))?,
        })
    }

    /// (L, dim) codes for a gh x gw grid.
    fn grid(&self, gh: usize, gw: usize) -> Result<Tensor> {
        let max = self.rows.dim(0)?;
        if gh > max || gw > max {
            return Err(shape_err(format!("{gh}x{gw} grid exceeds max_grid {max}")));
        }
        let dev = self.rows.device();
        let r: Vec<u32> = (0..gh * gw).map(|i| (i / gw) as u32).collect();
        let c: Vec<u32> = (0..gh * gw).map(|i| (i % gw) as u32).collect();
        let r = self.rows.index_select(&Tensor::new(r, dev)?, 0)?;
        let c = self.cols.index_select(&Tensor::new(c, dev)?, 0)?;
        Ok((r + c)?)
    }

    /// (L + 1, dim) codes including slot 0.
    fn sequence(&self, gh: usize, gw: usize) -> Result<Tensor> {
        Ok(Tensor::cat(&[&self.slot0.unsqueeze(0)?, &self.grid(gh, gw)?], 0)?)
    }
}

/// Embedding tables, encoder, decoder and classifier head of T.
#[derive(Debug, Clone)]
pub struct TokenPredictor {
    token_emb: Tensor,
    mask_emb: Tensor,
    drv_proj: Option<Linear>,
    /// Replaces the DRV slot in the no-DRV ablation.
    null_token: Option<Tensor>,
    enc_pos: Positions,
    dec_pos: Positions,
    mem_pos: Positions,
    encoder: Vec<TransformerBlock>,
    enc_norm: LayerNorm,
    decoder: Vec<DecoderBlock>,
    dec_norm: LayerNorm,
    head: Linear,
    dim: usize,
    codebook_size: usize,
    drv_dim: usize,
}

impl TokenPredictor {
    pub fn new(s: &mut Scope, cfg: &PredictorConfig, codebook_size: usize, drv_dim: usize) -> Result<Self> {
        let dim = cfg.hidden_dim;
        let token_emb = s.get("token_emb", &[codebook_size, dim], Init::Normal(0.5))?;
        let mask_emb = s.get("mask_emb", &[dim], Init::Normal(0.5))?;
        let enc_pos = Positions::new(&mut s.pp("enc_pos"), cfg.max_grid, dim)?;
        let dec_pos = Positions::new(&mut s.pp("dec_pos"), cfg.max_grid, dim)?;
        let mem_pos = Positions::new(&mut s.pp("mem_pos"), cfg.max_grid, dim)?;
        let encoder = (0..cfg.encoder_layers)
            .map(|i| TransformerBlock::new(&mut s.pp(format!("enc{i}")), dim, cfg.heads, cfg.mlp_ratio, 1.0))
            .collect::<Result<Vec<_>>>()?;
        let enc_norm = LayerNorm::new(&mut s.pp("enc_norm"), dim)?;
        let decoder = (0..cfg.decoder_layers)
            .map(|i| DecoderBlock::new(&mut s.pp(format!("dec{i}")), dim, cfg))
            .collect::<Result<Vec<_>>>()?;
        let dec_norm = LayerNorm::new(&mut s.pp("dec_norm"), dim)?;
        let head = Linear::new(&mut s.pp("head"), dim, codebook_size)?;
        // Created last so the DRV and ablation variants share every other initial value.
        let (drv_proj, null_token) = if cfg.use_drv {
            (Some(Linear::new(&mut s.pp("drv_proj"), drv_dim, dim)?), None)
        } else {
            (None, Some(s.get("null_token", &[dim], Init::Normal(0.02))?))
        };
        Ok(Self {
            token_emb,
            mask_emb,
            drv_proj,
            null_token,
            enc_pos,
            dec_pos,
            mem_pos,
            encoder,
            enc_norm,
            decoder,
            dec_norm,
            head,
            dim,
            codebook_size,
            drv_dim,
        })
    }

    pub fn uses_drv(&self) -> bool {
        self.drv_proj.is_some()
    }

    pub fn hidden_dim(&self) -> usize {
        self.dim
    }

    /// emb_P: (B, L + 1, h). `ids` holds B row-major grids; values at masked
    /// positions are ignored. `drv` is (B, D) and unused by the ablation.
    pub fn build_embedding(&self, ids: &[u32], mask: &BinaryMask, drv: Option<&Tensor>) -> Result<Tensor> {
        let (gh, gw) = (mask.grid_h, mask.grid_w);
        let l = gh * gw;
        if ids.is_empty() || !ids.len().is_multiple_of(l) {
            return Err(shape_err(format!("{} ids for a {gh}x{gw} grid", ids.len())));
        }
        let b = ids.len() / l;
        let dev = self.token_emb.device().clone();
        let dtype = self.token_emb.dtype();
        let k = self.codebook_size as u32;
        // Masked ids are never looked at; any in-range value keeps index_select happy.
        let mut safe = Vec::with_capacity(ids.len());
        for (i, &id) in ids.iter().enumerate() {
            if mask.bits[i % l] {
                if id >= k {
                    return Err(Error::Range { id, codebook_size: k });
                }
                safe.push(id);
            } else {
                safe.push(0);
            }
        }
        let kept = self
            .token_emb
            .index_select(&Tensor::new(safe, &dev)?, 0)?
            .reshape((b, l, self.dim))?;
        let m: Vec<f32> = mask.bits.iter().map(|&k| if k { 1.0 } else { 0.0 }).collect();
        let m = Tensor::from_vec(m, (1, l, 1), &dev)?.to_dtype(dtype)?;
        let masked = self.mask_emb.reshape((1, 1, self.dim))?;
        let tokens = kept.broadcast_mul(&m)?.broadcast_add(&masked.broadcast_mul(&(1.0 - &m)?)?)?;
        let slot0 = match (&self.drv_proj, &self.null_token) {
            (Some(p), _) => {
                let v = drv.ok_or_else(|| shape_err("DRV-fused predictor needs a DRV"))?;
                let (vb, vd) = v.dims2()?;
                if vb != b || vd != self.drv_dim {
                    return Err(shape_err(format!("DRV {:?}, expected ({b}, {})", v.dims(), self.drv_dim)));
                }
                p.forward(v)?.unsqueeze(1)?
            }
            (None, Some(t)) => t.reshape((1, 1, self.dim))?.broadcast_as((b, 1, self.dim))?,
            (None, None) => unreachable!("one of drv_proj/null_token is always set"),
        };
        let seq = Tensor::cat(&[&slot0, &tokens], 1)?;
        Ok(seq.broadcast_add(&self.enc_pos.sequence(gh, gw)?.unsqueeze(0)?)?)
    }

    /// enc_P: same length as the embedding; slot 0 is enc_v.
    pub fn encode_tokens(&self, emb: &Tensor) -> Result<Tensor> {
        let mut h = emb.clone();
        for blk in &self.encoder {
            h = blk.forward(&h)?;
        }
        self.enc_norm.forward(&h)
    }

    /// (B, L + 1, h) decoder input -> (B, L, K) logits over grid cells.
    /// `memory` is fm_P as (B, L, h).
    pub fn decode_logits(&self, enc: &Tensor, memory: &Tensor, gh: usize, gw: usize) -> Result<Tensor> {
        let (b, l1, _) = enc.dims3()?;
        let (mb, ml, md) = memory.dims3()?;
        if l1 != gh * gw + 1 || ml != gh * gw || mb != b || md != self.dim {
            return Err(shape_err(format!(
                "sequence {:?} and feature map {:?} disagree for a {gh}x{gw} grid",
                enc.dims(),
                memory.dims()
            )));
        }
        let mut h = enc.broadcast_add(&self.dec_pos.sequence(gh, gw)?.unsqueeze(0)?)?;
        let mem = memory.broadcast_add(&self.mem_pos.grid(gh, gw)?.unsqueeze(0)?)?;
        for blk in &self.decoder {
            h = blk.forward(&h, &mem)?;
        }
        let h = self.dec_norm.forward(&h)?.narrow(1, 1, gh * gw)?;
        self.head.forward(&h)
    }

    /// Full forward: embedding, encoder, enc_v replacement, decoder.
    pub fn forward(&self, ids: &[u32], mask: &BinaryMask, drv: Option<&Tensor>, memory: &Tensor) -> Result<Tensor> {
        let enc = self.encode_tokens(&self.build_embedding(ids, mask, drv)?)?;
        let enc = replace_mask_encodings(&enc, mask)?;
        self.decode_logits(&enc, memory, mask.grid_h, mask.grid_w)
    }
}

/// Copies enc_v (slot 0) into every masked position; kept positions and
/// slot 0 are untouched.
pub fn replace_mask_encodings(enc: &Tensor, mask: &BinaryMask) -> Result<Tensor> {
    let l = mask.grid_h * mask.grid_w;
    if enc.dim(1)? != l + 1 {
        return Err(shape_err(format!("sequence of {} for {l} cells", enc.dim(1)?)));
    }
    let idx: Vec<u32> = std::iter::once(0)
        .chain((0..l).map(|i| if mask.bits[i] { (i + 1) as u32 } else { 0 }))
        .collect();
    Ok(enc.index_select(&Tensor::new(idx, enc.device())?, 1)?)
}

/// fm_P: (B, L, h) tokens from the forked VQ-style encoder applied to x̂_lic.
pub fn feature_map_batch(x_lic: &Tensor, encoder: &ConvEncoder) -> Result<Tensor> {
    to_tokens(&encoder.forward(&center(x_lic)?)?)
}

pub fn extract_feature_map(x_lic: &Image, encoder: &ConvEncoder) -> Result<Tensor> {
    feature_map_batch(&x_lic.to_tensor(DType::F32, &Device::Cpu)?, encoder)
}

/// Encoder producing fm_P: the VQ encoder layout with an h_dim-wide head.
pub fn feature_encoder(s: &mut Scope, vq: &VqConfig, hidden_dim: usize) -> Result<ConvEncoder> {
    ConvEncoder::new(s, 3, &vq.channels, vq.res_blocks, hidden_dim)
}

/// Merges transmitted ids with the argmax prediction at masked cells.
/// `logits` is (1, L, K) or (L, K).
pub fn predict_indices(logits: &Tensor, masked: &MaskedIndexMap) -> Result<IndexMap> {
    let l = masked.grid_h * masked.grid_w;
    let logits = logits.to_dtype(DType::F32)?.reshape(((), logits.dim(D::Minus1)?))?;
    if logits.dim(0)? != l {
        return Err(shape_err(format!("{} logit rows for {l} cells", logits.dim(0)?)));
    }
    let rows = logits.to_vec2::<f32>()?;
    let mask = masked.mask();
    let mut kept = masked.kept_ids.iter();
    let ids = (0..l)
        .map(|i| {
            if mask.bits[i] {
                *kept.next().expect("kept count matches the mask")
            } else {
                argmax(&rows[i])
            }
        })
        .collect();
    IndexMap::new(masked.grid_h, masked.grid_w, ids)
}

/// Batched merge for training: true ids at kept cells, argmax elsewhere.
/// `logits` is (B, L, K), `ids` B row-major grids.
pub fn predict_indices_batch(logits: &Tensor, ids: &[u32], mask: &BinaryMask) -> Result<Vec<u32>> {
    let (b, l, _) = logits.dims3()?;
    if ids.len() != b * l || mask.bits.len() != l {
        return Err(shape_err(format!("{} ids, {}-cell mask, logits {:?}", ids.len(), mask.bits.len(), logits.dims())));
    }
    let rows = logits.to_dtype(DType::F32)?.reshape((b * l, ()))?.to_vec2::<f32>()?;
    Ok((0..b * l)
        .map(|i| if mask.bits[i % l] { ids[i] } else { argmax(&rows[i]) })
        .collect())
}

/// Smallest index among the maxima.
fn argmax(row: &[f32]) -> u32 {
    let mut best = 0;
    for (k, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = k;
        }
    }
    best as u32
}

/// L_T: mean NLL of the true ids over masked cells only; zero when nothing is masked.
/// `logits` is (B, L, K), `targets` B row-major grids.
pub fn token_loss(logits: &Tensor, targets: &[u32], mask: &BinaryMask) -> Result<Tensor> {
    let (b, l, k) = logits.dims3()?;
    if targets.len() != b * l || mask.bits.len() != l {
        return Err(shape_err(format!(
            "{} targets and a {}-cell mask for logits {:?}",
            targets.len(),
            mask.bits.len(),
            logits.dims()
        )));
    }
    let masked: Vec<usize> = mask.masked_positions().collect();
    if masked.is_empty() {
        return Ok(logits.sum_all()?.zeros_like()?);
    }
    let mut rows = Vec::with_capacity(b * masked.len());
    let mut ids = Vec::with_capacity(b * masked.len());
    for bi in 0..b {
        for &p in &masked {
            let t = targets[bi * l + p];
            if t as usize >= k {
                return Err(Error::Range { id: t, codebook_size: k as u32 });
            }
            rows.push((bi * l + p) as u32);
            ids.push(t);
        }
    }
    let dev = logits.device();
    let n = rows.len();
    let picked = logits
        .reshape((b * l, k))?
        .index_select(&Tensor::new(rows, dev)?, 0)?;
    let logp = log_softmax_last(&picked)?;
    let nll = logp.gather(&Tensor::new(ids, dev)?.reshape((n, 1))?, 1)?;
    Ok((nll.mean_all()? * -1.0)?)
}
