//! Convolutional backbones shared by both streams.

use candle_core::{Tensor, D};

use crate::error::{shape_err, Result};
use crate::nn::{Conv2d, LayerNorm, Linear, ResBlock, Scope};

/// Stack of stride-2 stages, each followed by residual blocks, then a 1x1 head.
/// Downsamples by 2^stages.
#[derive(Debug, Clone)]
pub struct ConvEncoder {
    stages: Vec<(Conv2d, Vec<ResBlock>)>,
    head: Conv2d,
}

impl ConvEncoder {
    pub fn new(
        s: &mut Scope,
        in_channels: usize,
        channels: &[usize],
        res_blocks: usize,
        out_channels: usize,
    ) -> Result<Self> {
        let mut stages = Vec::with_capacity(channels.len());
        let mut prev = in_channels;
        for (i, &ch) in channels.iter().enumerate() {
            let mut st = s.pp(format!("stage{i}"));
            let down = Conv2d::new(&mut st.pp("down"), prev, ch, 3, 2, 1.0)?;
            let blocks = (0..res_blocks)
                .map(|j| ResBlock::new(&mut st.pp(format!("res{j}")), ch))
                .collect::<Result<Vec<_>>>()?;
            stages.push((down, blocks));
            prev = ch;
        }
        let head = Conv2d::new(&mut s.pp("head"), prev, out_channels, 1, 1, 1.0)?;
        Ok(Self { stages, head })
    }

    pub fn factor(&self) -> usize {
        1 << self.stages.len()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = x.dims4()?;
        let f = self.factor();
        if h % f != 0 || w % f != 0 {
            return Err(shape_err(format!("{h}x{w} input not divisible by {f}")));
        }
        let mut h = x.clone();
        for (i, (down, blocks)) in self.stages.iter().enumerate() {
            h = if i == 0 { down.forward(&h)? } else { down.forward(&h.silu()?)? };
            for b in blocks {
                h = b.forward(&h)?;
            }
        }
        self.head.forward(&h.silu()?)
    }
}

/// Mirror of [`ConvEncoder`]: 3x3 stem, then nearest-upsample + conv stages.
/// Output is offset by 0.5 so an untrained decoder starts near mid-gray.
#[derive(Debug, Clone)]
pub struct ConvDecoder {
    stem: Conv2d,
    stem_block: ResBlock,
    stages: Vec<(Conv2d, Vec<ResBlock>)>,
    head: Conv2d,
    stage_channels: Vec<usize>,
}

impl ConvDecoder {
    pub fn new(
        s: &mut Scope,
        latent_channels: usize,
        channels: &[usize],
        res_blocks: usize,
    ) -> Result<Self> {
        let top = *channels.last().ok_or_else(|| shape_err("decoder needs stages"))?;
        let stem = Conv2d::new(&mut s.pp("stem"), latent_channels, top, 3, 1, 1.0)?;
        let stem_block = ResBlock::new(&mut s.pp("stem_res"), top)?;
        let n = channels.len();
        let mut stages = Vec::with_capacity(n);
        let mut stage_channels = Vec::with_capacity(n);
        let mut prev = top;
        for j in 0..n {
            let ch = channels[n.saturating_sub(j + 2)];
            let mut st = s.pp(format!("stage{j}"));
            let conv = Conv2d::new(&mut st.pp("conv"), prev, ch, 3, 1, 1.0)?;
            let blocks = (0..res_blocks)
                .map(|k| ResBlock::new(&mut st.pp(format!("res{k}")), ch))
                .collect::<Result<Vec<_>>>()?;
            stages.push((conv, blocks));
            stage_channels.push(ch);
            prev = ch;
        }
        let head = Conv2d::new(&mut s.pp("head"), prev, 3, 3, 1, 0.5)?;
        Ok(Self {
            stem,
            stem_block,
            stages,
            head,
            stage_channels,
        })
    }

    /// Channel width after each upsampling stage.
    pub fn stage_channels(&self) -> &[usize] {
        &self.stage_channels
    }

    pub fn forward(&self, z: &Tensor) -> Result<Tensor> {
        self.forward_hooked(z, &mut |_, h| Ok(h))
    }

    /// Runs the decoder, passing each upsampling stage's output through `hook`
    /// before the next stage consumes it.
    pub fn forward_hooked(
        &self,
        z: &Tensor,
        hook: &mut dyn FnMut(usize, Tensor) -> Result<Tensor>,
    ) -> Result<Tensor> {
        let h = self.stages_hooked(z, hook)?;
        Ok((self.head.forward(&h.silu()?)? + 0.5)?)
    }

    /// Per-stage features only, without the pixel head.
    pub fn stage_features(&self, z: &Tensor) -> Result<Vec<Tensor>> {
        let mut feats = Vec::with_capacity(self.stages.len());
        self.stages_hooked(z, &mut |_, h| {
            feats.push(h.clone());
            Ok(h)
        })?;
        Ok(feats)
    }

    fn stages_hooked(
        &self,
        z: &Tensor,
        hook: &mut dyn FnMut(usize, Tensor) -> Result<Tensor>,
    ) -> Result<Tensor> {
        let mut h = self.stem_block.forward(&self.stem.forward(z)?)?;
        for (j, (conv, blocks)) in self.stages.iter().enumerate() {
            let (_, _, hh, ww) = h.dims4()?;
            h = conv.forward(&h.silu()?.upsample_nearest2d(2 * hh, 2 * ww)?)?;
            for b in blocks {
                h = b.forward(&h)?;
            }
            h = hook(j, h)?;
        }
        Ok(h)
    }
}

/// Image(s) to one dense vector: conv encoder, global average pool, linear,
/// then a parameter-free layer norm so every DRV is zero-mean, unit-variance.
#[derive(Debug, Clone)]
pub struct DrvExtractor {
    body: ConvEncoder,
    proj: Linear,
    norm: LayerNorm,
    in_channels: usize,
}

impl DrvExtractor {
    pub fn new(s: &mut Scope, in_channels: usize, channels: &[usize], dim: usize) -> Result<Self> {
        let top = *channels.last().ok_or_else(|| shape_err("extractor needs stages"))?;
        Ok(Self {
            body: ConvEncoder::new(&mut s.pp("body"), in_channels, channels, 0, top)?,
            proj: Linear::new(&mut s.pp("proj"), top, dim)?,
            norm: LayerNorm::plain(),
            in_channels,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    /// x: (B, in_channels, H, W) with H, W divisible by 2^stages -> (B, dim).
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let c = x.dim(1)?;
        if c != self.in_channels {
            return Err(shape_err(format!(
                "extractor expects {} channels, got {c}",
                self.in_channels
            )));
        }
        let f = self.body.forward(x)?.silu()?;
        let pooled = f.mean(D::Minus1)?.mean(D::Minus1)?;
        self.norm.forward(&self.proj.forward(&pooled)?)
    }
}

/// Maps [0,1] pixels to [-1,1] network inputs.
pub fn center(x: &Tensor) -> Result<Tensor> {
    Ok(x.affine(2.0, -1.0)?)
}
