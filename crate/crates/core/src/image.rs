//! Planar RGB images in [0, 1] and their tensor views.

use std::path::Path;

use candle_core::{DType, Device, Tensor};

use crate::error::{shape_err, Result};

/// H x W x 3 image stored channel-planar (CHW), values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != 3 * height * width || height == 0 || width == 0 {
            return Err(shape_err(format!(
                "{height}x{width}x3 image needs {} values, got {}",
                3 * height * width,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        Self {
            height,
            width,
            data: vec![value; 3 * height * width],
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn at(&self, channel: usize, row: usize, col: usize) -> f32 {
        self.data[(channel * self.height + row) * self.width + col]
    }

    pub fn at_mut(&mut self, channel: usize, row: usize, col: usize) -> &mut f32 {
        &mut self.data[(channel * self.height + row) * self.width + col]
    }

    /// (1, 3, H, W) tensor.
    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        let t = Tensor::from_slice(&self.data, (1, 3, self.height, self.width), device)?;
        Ok(t.to_dtype(dtype)?)
    }

    /// Accepts (3, H, W) or (1, 3, H, W); clamps into [0, 1].
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let t = match t.rank() {
            4 if t.dim(0)? == 1 => t.squeeze(0)?,
            3 => t.clone(),
            _ => return Err(shape_err(format!("expected one CHW image, got {:?}", t.dims()))),
        };
        let (c, height, width) = t.dims3()?;
        if c != 3 {
            return Err(shape_err(format!("expected 3 channels, got {c}")));
        }
        let data = t
            .to_dtype(DType::F32)?
            .flatten_all()?
            .to_vec1::<f32>()?
            .into_iter()
            .map(|v| v.clamp(0.0, 1.0))
            .collect();
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn batch_to_tensor(images: &[Image], dtype: DType, device: &Device) -> Result<Tensor> {
        let first = images
            .first()
            .ok_or_else(|| shape_err("empty image batch"))?;
        let mut data = Vec::with_capacity(images.len() * first.data.len());
        for img in images {
            if img.dims() != first.dims() {
                return Err(shape_err("images in a batch must share dimensions"));
            }
            data.extend_from_slice(&img.data);
        }
        let t = Tensor::from_vec(data, (images.len(), 3, first.height, first.width), device)?;
        Ok(t.to_dtype(dtype)?)
    }

    pub fn batch_from_tensor(t: &Tensor) -> Result<Vec<Image>> {
        (0..t.dim(0)?).map(|i| Image::from_tensor(&t.get(i)?)).collect()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let rgb = image::open(path)?.to_rgb8();
        let (w, h) = (rgb.width() as usize, rgb.height() as usize);
        let mut data = vec![0f32; 3 * h * w];
        for (x, y, px) in rgb.enumerate_pixels() {
            for c in 0..3 {
                data[(c * h + y as usize) * w + x as usize] = px[c] as f32 / 255.0;
            }
        }
        Self::new(h, w, data)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut rgb = image::RgbImage::new(self.width as u32, self.height as u32);
        for (x, y, px) in rgb.enumerate_pixels_mut() {
            for c in 0..3 {
                let v = self.at(c, y as usize, x as usize);
                px[c] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
        rgb.save(path)?;
        Ok(())
    }

    /// Top-left crop to the largest multiple of `factor` in each dimension.
    pub fn crop_to_multiple(&self, factor: usize) -> Result<Self> {
        let (h, w) = (self.height / factor * factor, self.width / factor * factor);
        if h == 0 || w == 0 {
            return Err(shape_err(format!(
                "{}x{} is smaller than one {factor}x{factor} patch",
                self.height, self.width
            )));
        }
        let mut data = Vec::with_capacity(3 * h * w);
        for c in 0..3 {
            for r in 0..h {
                let start = (c * self.height + r) * self.width;
                data.extend_from_slice(&self.data[start..start + w]);
            }
        }
        Self::new(h, w, data)
    }

    /// Separable box blur with the given radius, edges clamped.
    pub fn box_blur(&self, radius: usize) -> Self {
        let (h, w) = self.dims();
        let r = radius as isize;
        let mut tmp = self.clone();
        let mut out = self.clone();
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    let mut acc = 0.0;
                    for d in -r..=r {
                        let xx = (x as isize + d).clamp(0, w as isize - 1) as usize;
                        acc += self.at(c, y, xx);
                    }
                    *tmp.at_mut(c, y, x) = acc / (2 * r + 1) as f32;
                }
            }
            for y in 0..h {
                for x in 0..w {
                    let mut acc = 0.0;
                    for d in -r..=r {
                        let yy = (y as isize + d).clamp(0, h as isize - 1) as usize;
                        acc += tmp.at(c, yy, x);
                    }
                    *out.at_mut(c, y, x) = acc / (2 * r + 1) as f32;
                }
            }
        }
        out
    }

    pub fn resize_bilinear(&self, height: usize, width: usize) -> Result<Self> {
        let t = self.to_tensor(DType::F32, &Device::Cpu)?;
        Image::from_tensor(&resize_bilinear(&t, height, width)?)
    }
}

/// Row-stochastic (out x in) interpolation matrix using half-pixel centers
/// and edge clamping, i.e. bilinear resampling without antialiasing.
pub fn bilinear_matrix(input: usize, output: usize) -> Vec<f64> {
    let scale = input as f64 / output as f64;
    let mut m = vec![0.0; output * input];
    for i in 0..output {
        let src = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (input - 1) as f64);
        let i0 = src.floor() as usize;
        let i1 = (i0 + 1).min(input - 1);
        let frac = src - i0 as f64;
        m[i * input + i0] += 1.0 - frac;
        m[i * input + i1] += frac;
    }
    m
}

/// Differentiable bilinear resize of a (B, C, H, W) tensor, built from two
/// dense interpolation matmuls.
pub fn resize_bilinear(x: &Tensor, height: usize, width: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    if (h, w) == (height, width) {
        return Ok(x.clone());
    }
    let dev = x.device();
    let dtype = x.dtype();
    let rw_t = Tensor::from_vec(bilinear_matrix(w, width), (width, w), dev)?
        .to_dtype(dtype)?
        .t()?;
    let rh_t = Tensor::from_vec(bilinear_matrix(h, height), (height, h), dev)?
        .to_dtype(dtype)?
        .t()?;
    let cols = x.reshape((b * c * h, w))?.matmul(&rw_t)?; // (bch, width)
    let cols = cols
        .reshape((b * c, h, width))?
        .transpose(1, 2)?
        .contiguous()?
        .reshape((b * c * width, h))?;
    let out = cols.matmul(&rh_t)?.reshape((b * c, width, height))?;
    Ok(out.transpose(1, 2)?.contiguous()?.reshape((b, c, height, width))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn halving_is_two_by_two_average() {
        let data: Vec<f32> = (0..3 * 4 * 4).map(|v| v as f32 / 48.0).collect();
        let img = Image::new(4, 4, data).unwrap();
        let half = img.resize_bilinear(2, 2).unwrap();
        for c in 0..3 {
            for y in 0..2 {
                for x in 0..2 {
                    let avg = (img.at(c, 2 * y, 2 * x)
                        + img.at(c, 2 * y + 1, 2 * x)
                        + img.at(c, 2 * y, 2 * x + 1)
                        + img.at(c, 2 * y + 1, 2 * x + 1))
                        / 4.0;
                    assert!((half.at(c, y, x) - avg).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn constant_image_survives_resizing() {
        let img = Image::filled(8, 12, 0.25);
        let up = img.resize_bilinear(17, 5).unwrap();
        assert!(up.data.iter().all(|&v| (v - 0.25).abs() < 1e-6));
    }

    #[test]
    fn crop_to_multiple_keeps_top_left() {
        let data: Vec<f32> = (0..3 * 5 * 7).map(|v| v as f32 / 105.0).collect();
        let img = Image::new(5, 7, data).unwrap();
        let cropped = img.crop_to_multiple(4).unwrap();
        assert_eq!(cropped.dims(), (4, 4));
        assert_eq!(cropped.at(2, 3, 3), img.at(2, 3, 3));
    }

    #[test]
    fn png_round_trip_is_quantized_to_eight_bits() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.png");
        let img = Image::new(2, 2, (0..12).map(|v| v as f32 / 11.0).collect()).unwrap();
        img.save(&path).unwrap();
        let back = Image::load(&path).unwrap();
        for (a, b) in img.data.iter().zip(&back.data) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
    }
}
