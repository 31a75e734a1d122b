//! Model, loss and training configuration. Serialized as TOML.
//!
//! [`CodecConfig::default`] is the full-size codec (256x256 patches, K=1024,
//! n=m=16). [`CodecConfig::toy`] shrinks every width so all five training
//! stages run on a single CPU core in minutes at 64x64.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VqConfig {
    /// Downsampling factor n; must equal 2^stages.
    pub patch_size: usize,
    pub codebook_size: usize,
    pub latent_dim: usize,
    pub channels: Vec<usize>,
    pub res_blocks: usize,
    pub commitment: f64,
    pub dead_code_interval: usize,
}

impl Default for VqConfig {
    fn default() -> Self {
        Self {
            patch_size: 16,
            codebook_size: 1024,
            latent_dim: 64,
            channels: vec![64, 128, 128, 256],
            res_blocks: 2,
            commitment: 0.25,
            dead_code_interval: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LicConfig {
    /// Side of the square the LIC stream downsizes every input to.
    pub input_size: usize,
    pub downsample: usize,
    pub channels: Vec<usize>,
    pub latent_channels: usize,
    /// Signed fixed-width integer coding of the rounded latent.
    pub bit_width: u8,
    pub enhancer_blocks: usize,
    pub enhancer_heads: usize,
    /// Key/value tokens the DRV is projected into for cross-attention.
    pub drv_tokens: usize,
}

impl Default for LicConfig {
    fn default() -> Self {
        Self {
            input_size: 128,
            downsample: 16,
            channels: vec![64, 96, 128, 128],
            latent_channels: 5,
            bit_width: 5,
            enhancer_blocks: 4,
            enhancer_heads: 4,
            drv_tokens: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DrvConfig {
    pub dim: usize,
    pub extractor_channels: Vec<usize>,
}

impl Default for DrvConfig {
    fn default() -> Self {
        Self {
            dim: 256,
            extractor_channels: vec![32, 64, 128, 128],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionConfig {
    pub betas: Vec<f64>,
    pub blocks: usize,
    pub hidden: usize,
    pub time_dim: usize,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            betas: vec![0.1, 0.3, 0.5, 0.7],
            blocks: 4,
            hidden: 512,
            time_dim: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictorConfig {
    pub hidden_dim: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Upper bound on grid rows/cols covered by learned positional codes.
    pub max_grid: usize,
    /// false builds the ablation that puts a learned constant token in slot 0.
    pub use_drv: bool,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 256,
            encoder_layers: 4,
            decoder_layers: 4,
            heads: 8,
            mlp_ratio: 4,
            max_grid: 64,
            use_drv: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    /// Parallel correction channels S.
    pub channels: usize,
    pub rstb_blocks: usize,
    pub rstb_depth: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub window: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            channels: 4,
            rstb_blocks: 2,
            rstb_depth: 2,
            embed_dim: 64,
            heads: 4,
            window: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub w1: f64,
    pub w2: f64,
    pub w3: f64,
    pub perceptual_channels: Vec<usize>,
    pub perceptual_seed: u64,
    pub discriminator_channels: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            w1: 1.2,
            w2: 0.8,
            w3: 0.12,
            perceptual_channels: vec![16, 32, 32, 64, 64],
            perceptual_seed: 0x05ee_d1b5,
            discriminator_channels: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageSteps {
    pub base_pretrain: usize,
    pub enhancer: usize,
    pub predictor: usize,
    pub vq_correction: usize,
    pub drv_diffusion: usize,
}

impl Default for StageSteps {
    fn default() -> Self {
        Self {
            base_pretrain: 20_000,
            enhancer: 10_000,
            predictor: 10_000,
            vq_correction: 10_000,
            drv_diffusion: 10_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub image_size: usize,
    pub seed: u64,
    pub steps: StageSteps,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            batch_size: 16,
            image_size: 64,
            seed: 0,
            steps: StageSteps::default(),
            log_every: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CodecConfig {
    pub seed: u64,
    pub vq: VqConfig,
    pub lic: LicConfig,
    pub drv: DrvConfig,
    pub diffusion: DiffusionConfig,
    pub predictor: PredictorConfig,
    pub fusion: FusionConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
}

impl CodecConfig {
    /// Narrow widths for 64x64 training on one core.
    pub fn toy() -> Self {
        Self {
            seed: 7,
            vq: VqConfig {
                patch_size: 8,
                codebook_size: 64,
                latent_dim: 16,
                channels: vec![16, 24, 32],
                res_blocks: 1,
                commitment: 0.25,
                dead_code_interval: 100,
            },
            lic: LicConfig {
                input_size: 32,
                downsample: 16,
                channels: vec![16, 24, 32, 32],
                latent_channels: 5,
                bit_width: 5,
                enhancer_blocks: 2,
                enhancer_heads: 2,
                drv_tokens: 4,
            },
            drv: DrvConfig {
                dim: 32,
                extractor_channels: vec![16, 24, 32, 32],
            },
            diffusion: DiffusionConfig {
                betas: vec![0.1, 0.3, 0.5, 0.7],
                blocks: 4,
                hidden: 64,
                time_dim: 16,
            },
            predictor: PredictorConfig {
                hidden_dim: 32,
                encoder_layers: 2,
                decoder_layers: 2,
                heads: 4,
                mlp_ratio: 2,
                max_grid: 16,
                use_drv: true,
            },
            fusion: FusionConfig {
                channels: 4,
                rstb_blocks: 2,
                rstb_depth: 2,
                embed_dim: 32,
                heads: 2,
                window: 4,
            },
            loss: LossConfig {
                w1: 1.2,
                w2: 0.8,
                w3: 0.0,
                perceptual_channels: vec![16, 32, 32, 64, 64],
                perceptual_seed: 0x05ee_d1b5,
                discriminator_channels: 16,
            },
            train: TrainConfig {
                learning_rate: 2e-3,
                batch_size: 8,
                image_size: 64,
                seed: 11,
                steps: StageSteps {
                    base_pretrain: 600,
                    enhancer: 300,
                    predictor: 1500,
                    vq_correction: 450,
                    drv_diffusion: 1500,
                },
                log_every: 50,
            },
        }
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_toml_string()?)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let pow2_stages = |factor: usize, stages: usize| 1usize << stages == factor;
        if self.vq.codebook_size < 2 || self.vq.codebook_size > u16::MAX as usize {
            return bad(format!("codebook size {} outside 2..=65535", self.vq.codebook_size));
        }
        if !pow2_stages(self.vq.patch_size, self.vq.channels.len()) {
            return bad(format!(
                "VQ downsampling {} needs log2(n) encoder stages, got {}",
                self.vq.patch_size,
                self.vq.channels.len()
            ));
        }
        if !pow2_stages(self.lic.downsample, self.lic.channels.len()) {
            return bad(format!(
                "LIC downsampling {} needs log2(m) stages, got {}",
                self.lic.downsample,
                self.lic.channels.len()
            ));
        }
        if !self.lic.input_size.is_multiple_of(self.lic.downsample) {
            return bad(format!(
                "LIC input size {} not divisible by m={}",
                self.lic.input_size, self.lic.downsample
            ));
        }
        if !(1..=16).contains(&self.lic.bit_width) {
            return bad(format!("LIC bit width {} outside 1..=16", self.lic.bit_width));
        }
        if self.lic.drv_tokens == 0 || self.lic.enhancer_heads == 0 {
            return bad("enhancer needs at least one head and one DRV token".into());
        }
        if !self.lic.channels[self.lic.channels.len() - 1].is_multiple_of(self.lic.enhancer_heads) {
            return bad("enhancer width must divide into heads".into());
        }
        if !self.predictor.hidden_dim.is_multiple_of(self.predictor.heads) {
            return bad("predictor hidden_dim must divide into heads".into());
        }
        if !self.fusion.embed_dim.is_multiple_of(self.fusion.heads) || self.fusion.channels == 0 {
            return bad("fusion embed_dim must divide into heads and S >= 1".into());
        }
        if self.diffusion.betas.is_empty() || self.diffusion.betas.iter().any(|&b| !(b > 0.0 && b < 1.0)) {
            return bad(format!("betas must lie in (0,1): {:?}", self.diffusion.betas));
        }
        if self.drv.dim == 0 || self.drv.extractor_channels.is_empty() {
            return bad("DRV extractor needs a positive dim and at least one stage".into());
        }
        if !self.train.image_size.is_multiple_of(self.vq.patch_size) {
            return bad("training image size must be divisible by n".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_echo_loss_weights() {
        let cfg = CodecConfig::default();
        assert_eq!((cfg.loss.w1, cfg.loss.w2, cfg.loss.w3), (1.2, 0.8, 0.12));
        assert_eq!(cfg.diffusion.betas.len(), 4);
        assert_eq!((cfg.vq.patch_size, cfg.lic.downsample), (16, 16));
        cfg.validate().unwrap();
        CodecConfig::toy().validate().unwrap();
    }

    #[test]
    fn toml_round_trip() {
        let cfg = CodecConfig::toy();
        let text = cfg.to_toml_string().unwrap();
        assert_eq!(CodecConfig::from_toml_str(&text).unwrap(), cfg);
    }

    #[test]
    fn partial_file_fills_defaults() {
        let cfg = CodecConfig::from_toml_str("[vq]\ncodebook_size = 512\n").unwrap();
        assert_eq!(cfg.vq.codebook_size, 512);
        assert_eq!(cfg.lic, LicConfig::default());
    }

    #[test]
    fn rejects_bad_betas() {
        let err = CodecConfig::from_toml_str("[diffusion]\nbetas = [0.1, 1.0]\n").unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }
}
