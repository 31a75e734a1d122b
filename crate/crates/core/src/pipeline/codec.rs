//! Image-level encode and decode through both streams.

use candle_core::{DType, Device};
use log::warn;

use crate::backbone::ConvDecoder;
use crate::bitstream::{apply_mask, make_mask, Bitstream, IndexMap, MaskSchedule, StreamHeader};
use crate::drv_diffusion::sample_drv;
use crate::error::{shape_err, Error, Result};
use crate::image::Image;
use crate::lic_stream::{lic_encode, LicLatent};
use crate::pipeline::model::HdcModel;
use crate::token_predictor::predict_indices;

/// Encodes masked VQ indices and the LIC payload. Nothing DRV-related is written.
pub fn encode_image(x: &Image, model: &HdcModel, schedule: MaskSchedule) -> Result<Bitstream> {
    if !model.is_fully_trained() {
        warn!("encoding with a model that has not completed every training stage");
    }
    let n = model.cfg.vq.patch_size;
    if !x.height.is_multiple_of(n) || !x.width.is_multiple_of(n) {
        return Err(shape_err(format!("{}x{} is not divisible by n={n}", x.height, x.width)));
    }
    let header = StreamHeader::new(x.height, x.width, n, model.cfg.vq.codebook_size)?;
    let (gh, gw) = header.grid()?;
    let t = x.to_tensor(DType::F32, &Device::Cpu)?;
    let map = IndexMap::new(gh, gw, model.vq_ids(&t)?)?;
    let masked = apply_mask(&map, &make_mask(schedule, gh, gw))?;
    let (_, lic_payload) = lic_encode(x, &model.lic)?;
    Ok(Bitstream {
        header,
        masked,
        lic_payload,
    })
}

/// How the decoder obtains its two DRVs.
#[derive(Debug, Clone, Copy)]
pub enum DrvSource<'a> {
    /// Diffusion sampling from the seed; the real decoder.
    Sampled { seed: u64 },
    /// Extracted from the ground truth; an evaluation upper bound.
    Oracle(&'a Image),
}

/// Every intermediate of one decode.
#[derive(Debug, Clone)]
pub struct Decoded {
    pub x_hat: Image,
    pub x_lic: Image,
    pub indices: IndexMap,
    pub image: Image,
}

/// Seed of the second diffusion chain, derived so the two chains never share noise.
fn predictor_seed(seed: u64) -> u64 {
    seed ^ 0xA5A5_5A5A_C3C3_3C3C
}

pub fn decode_with(bs: &Bitstream, model: &HdcModel, drv: DrvSource) -> Result<Decoded> {
    let (h, w) = (bs.header.height as usize, bs.header.width as usize);
    let (gh, gw) = bs.header.grid()?;
    if bs.header.patch_size as usize != model.cfg.vq.patch_size
        || bs.header.codebook_size as usize != model.cfg.vq.codebook_size
    {
        return Err(Error::CorruptStream(format!(
            "stream was coded with n={} K={}, model has n={} K={}",
            bs.header.patch_size, bs.header.codebook_size, model.cfg.vq.patch_size, model.cfg.vq.codebook_size
        )));
    }
    let dev = Device::Cpu;
    let yq = LicLatent::from_payload(&bs.lic_payload)?.to_tensor(DType::F32, &dev)?;
    let x_hat = model.lic.synthesis(&yq, h, w)?;

    let (x_lic, v_p) = match drv {
        DrvSource::Oracle(x) => {
            let x = x.to_tensor(DType::F32, &dev)?;
            let x_lic = model.enhanced(&yq, &model.drv_e(&x, &x_hat)?, h, w)?;
            let v_p = if model.transformer.uses_drv() { Some(model.drv_p(&x, &x_hat)?) } else { None };
            (x_lic, v_p)
        }
        DrvSource::Sampled { seed } => {
            let v_e = sample_drv(&model.cond_e(&x_hat)?, &model.denoiser_e, &model.schedule, seed)?;
            let x_lic = model.enhanced(&yq, &v_e, h, w)?;
            let v_p = if model.transformer.uses_drv() {
                let c = model.cond_p(&x_lic)?;
                Some(sample_drv(&c, &model.denoiser_p, &model.schedule, predictor_seed(seed))?)
            } else {
                None
            };
            (x_lic, v_p)
        }
    };

    let mask = bs.masked.mask();
    let ids = bs.masked.scatter(0);
    let logits = model.predict_logits(&ids, &mask, v_p.as_ref(), &x_lic)?;
    let indices = predict_indices(&logits, &bs.masked)?;
    let x_final = model.fused(&indices.ids, gh, gw, &x_lic)?;
    Ok(Decoded {
        x_hat: Image::from_tensor(&x_hat)?,
        x_lic: Image::from_tensor(&x_lic)?,
        indices,
        image: Image::from_tensor(&x_final)?,
    })
}

/// Full decode; deterministic in (bitstream, model, seed).
pub fn decode_image(bs: &Bitstream, model: &HdcModel, seed: u64) -> Result<Image> {
    Ok(decode_with(bs, model, DrvSource::Sampled { seed })?.image)
}

/// Plain generative-stream reconstruction of an index map with `decoder`.
pub fn decode_vq_plain(map: &IndexMap, model: &HdcModel, decoder: &ConvDecoder) -> Result<Image> {
    let q = model.vq.lookup_batch(&map.ids, 1, map.grid_h, map.grid_w)?;
    Image::from_tensor(&decoder.forward(&q)?)
}

/// Round trip through bytes, as the CLI does.
pub fn roundtrip(x: &Image, model: &HdcModel, schedule: MaskSchedule, seed: u64) -> Result<(Vec<u8>, Image)> {
    let bytes = encode_image(x, model, schedule)?.to_bytes()?;
    let img = decode_image(&Bitstream::from_bytes(&bytes)?, model, seed)?;
    Ok((bytes, img))
}
