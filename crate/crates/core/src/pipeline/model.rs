//! The assembled codec: every network, grouped into independently seeded and
//! independently trainable parameter groups.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use candle_core::{DType, Device, Tensor, Var};

use crate::backbone::{ConvEncoder, DrvExtractor};
use crate::bitstream::BinaryMask;
use crate::config::CodecConfig;
use crate::drv_diffusion::{Denoiser, DiffusionSchedule};
use crate::error::{Error, Result};
use crate::fusion::{decode_fused, vq_correct, AssistiveDecoder, CorrectionChannels, WeightExtractor};
use crate::lic_stream::{condition_batch, joint_drv_batch, Enhancer, LicCodec};
use crate::metrics::RandomFeatureMetric;
use crate::nn::ParamStore;
use crate::pipeline::loss::Discriminator;
use crate::token_predictor::{feature_encoder, feature_map_batch, TokenPredictor};
use crate::vq_stream::VqAutoencoder;

/// Independently trainable parameter groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ParamGroup {
    VqEncoder,
    Codebook,
    VqDecoder,
    LicCodec,
    DrvExtractorE,
    Enhancer,
    CondExtractorE,
    DrvExtractorP,
    FeatureEncoderP,
    Transformer,
    CondExtractorP,
    WeightExtractor,
    Correction,
    AssistiveDecoder,
    DenoiserE,
    DenoiserP,
    Discriminator,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 17] = [
        ParamGroup::VqEncoder,
        ParamGroup::Codebook,
        ParamGroup::VqDecoder,
        ParamGroup::LicCodec,
        ParamGroup::DrvExtractorE,
        ParamGroup::Enhancer,
        ParamGroup::CondExtractorE,
        ParamGroup::DrvExtractorP,
        ParamGroup::FeatureEncoderP,
        ParamGroup::Transformer,
        ParamGroup::CondExtractorP,
        ParamGroup::WeightExtractor,
        ParamGroup::Correction,
        ParamGroup::AssistiveDecoder,
        ParamGroup::DenoiserE,
        ParamGroup::DenoiserP,
        ParamGroup::Discriminator,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::VqEncoder => "vq_encoder",
            ParamGroup::Codebook => "codebook",
            ParamGroup::VqDecoder => "vq_decoder",
            ParamGroup::LicCodec => "lic_codec",
            ParamGroup::DrvExtractorE => "drv_extractor_e",
            ParamGroup::Enhancer => "enhancer",
            ParamGroup::CondExtractorE => "cond_extractor_e",
            ParamGroup::DrvExtractorP => "drv_extractor_p",
            ParamGroup::FeatureEncoderP => "feature_encoder_p",
            ParamGroup::Transformer => "transformer",
            ParamGroup::CondExtractorP => "cond_extractor_p",
            ParamGroup::WeightExtractor => "weight_extractor",
            ParamGroup::Correction => "correction",
            ParamGroup::AssistiveDecoder => "assistive_decoder",
            ParamGroup::DenoiserE => "denoiser_e",
            ParamGroup::DenoiserP => "denoiser_p",
            ParamGroup::Discriminator => "discriminator",
        }
    }

    fn seed(self, base: u64) -> u64 {
        let idx = Self::ALL.iter().position(|&g| g == self).expect("listed") as u64;
        base.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(idx + 1)
    }
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.name())
    }
}

/// Training stages, in their required order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    BasePretrain,
    Enhancer,
    Predictor,
    VqCorrection,
    DrvDiffusion,
}

impl Stage {
    pub const ALL: [Stage; 5] = [
        Stage::BasePretrain,
        Stage::Enhancer,
        Stage::Predictor,
        Stage::VqCorrection,
        Stage::DrvDiffusion,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::BasePretrain => "BASE_PRETRAIN",
            Stage::Enhancer => "ENHANCER",
            Stage::Predictor => "PREDICTOR",
            Stage::VqCorrection => "VQ_CORRECTION",
            Stage::DrvDiffusion => "DRV_DIFFUSION",
        }
    }

    /// 1-based position in the stage order.
    pub fn number(self) -> usize {
        Self::ALL.iter().position(|&s| s == self).expect("listed") + 1
    }

    pub fn prerequisite(self) -> Option<Stage> {
        match self.number() {
            1 => None,
            n => Some(Self::ALL[n - 2]),
        }
    }

    /// Groups updated by this stage. The discriminator joins image-loss stages
    /// only when the adversarial weight is non-zero.
    pub fn trainable(self, adversarial: bool) -> Vec<ParamGroup> {
        use ParamGroup::*;
        let mut g = match self {
            Stage::BasePretrain => vec![VqEncoder, Codebook, VqDecoder, LicCodec],
            Stage::Enhancer => vec![DrvExtractorE, Enhancer],
            Stage::Predictor => vec![DrvExtractorP, FeatureEncoderP, Transformer],
            Stage::VqCorrection => vec![VqDecoder, WeightExtractor, Correction, AssistiveDecoder],
            Stage::DrvDiffusion => vec![CondExtractorE, DenoiserE, CondExtractorP, DenoiserP],
        };
        if adversarial && matches!(self, Stage::BasePretrain | Stage::Enhancer | Stage::VqCorrection) {
            g.push(Discriminator);
        }
        g
    }

    pub fn frozen(self, adversarial: bool) -> Vec<ParamGroup> {
        let t = self.trainable(adversarial);
        ParamGroup::ALL.iter().copied().filter(|g| !t.contains(g)).collect()
    }

    pub fn steps(self, cfg: &CodecConfig) -> usize {
        let s = &cfg.train.steps;
        match self {
            Stage::BasePretrain => s.base_pretrain,
            Stage::Enhancer => s.enhancer,
            Stage::Predictor => s.predictor,
            Stage::VqCorrection => s.vq_correction,
            Stage::DrvDiffusion => s.drv_diffusion,
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_uppercase().replace('-', "_");
        Stage::ALL
            .iter()
            .copied()
            .find(|st| st.name() == norm || st.number().to_string() == norm)
            .ok_or_else(|| Error::Config(format!("unknown stage {s:?}")))
    }
}

/// Per-stage training settings.
#[derive(Debug, Clone, PartialEq)]
pub struct StageConfig {
    pub stage: Stage,
    pub trainable: Vec<ParamGroup>,
    pub frozen: Vec<ParamGroup>,
    pub steps: usize,
    pub learning_rate: f64,
    pub weights: crate::pipeline::loss::LossWeights,
}

impl StageConfig {
    pub fn new(stage: Stage, cfg: &CodecConfig) -> Self {
        let adv = cfg.loss.w3 != 0.0;
        Self {
            stage,
            trainable: stage.trainable(adv),
            frozen: stage.frozen(adv),
            steps: stage.steps(cfg),
            learning_rate: cfg.train.learning_rate,
            weights: (&cfg.loss).into(),
        }
    }
}

/// Every network of the codec plus the stores that own their parameters.
pub struct HdcModel {
    pub cfg: CodecConfig,
    stores: BTreeMap<ParamGroup, ParamStore>,
    pub vq: VqAutoencoder,
    pub lic: LicCodec,
    pub drv_extractor_e: DrvExtractor,
    pub enhancer: Enhancer,
    pub cond_extractor_e: DrvExtractor,
    pub drv_extractor_p: DrvExtractor,
    pub feature_encoder_p: ConvEncoder,
    pub transformer: TokenPredictor,
    pub cond_extractor_p: DrvExtractor,
    pub weight_extractor: WeightExtractor,
    pub correction: CorrectionChannels,
    pub assistive: AssistiveDecoder,
    pub denoiser_e: Denoiser,
    pub denoiser_p: Denoiser,
    pub discriminator: Discriminator,
    pub schedule: DiffusionSchedule,
    pub perceptual: RandomFeatureMetric,
    /// Stages whose checkpoint this model's weights come from.
    pub trained: Vec<Stage>,
}

impl HdcModel {
    pub fn new(cfg: &CodecConfig) -> Result<Self> {
        cfg.validate()?;
        let dev = Device::Cpu;
        let mut stores: BTreeMap<ParamGroup, ParamStore> = ParamGroup::ALL
            .iter()
            .map(|&g| (g, ParamStore::new(g.seed(cfg.seed), DType::F32, &dev)))
            .collect();
        let mut take = |g: ParamGroup| stores.remove(&g).expect("created above");
        let (mut enc, mut cb, mut dec) = (
            take(ParamGroup::VqEncoder),
            take(ParamGroup::Codebook),
            take(ParamGroup::VqDecoder),
        );
        let vq = VqAutoencoder::new(&mut enc, &mut cb, &mut dec, &cfg.vq)?;
        let mut lic_store = take(ParamGroup::LicCodec);
        let lic = LicCodec::new(&mut lic_store, &cfg.lic)?;
        let d = cfg.drv.dim;
        let ch = &cfg.drv.extractor_channels;
        let mut ext = |g: ParamGroup, inputs: usize| -> Result<(ParamStore, DrvExtractor)> {
            let mut s = take(g);
            let e = DrvExtractor::new(&mut s.root(), inputs, ch, d)?;
            Ok((s, e))
        };
        let (s_el, drv_extractor_e) = ext(ParamGroup::DrvExtractorE, 6)?;
        let (s_ec, cond_extractor_e) = ext(ParamGroup::CondExtractorE, 3)?;
        let (s_ep, drv_extractor_p) = ext(ParamGroup::DrvExtractorP, 6)?;
        let (s_cp, cond_extractor_p) = ext(ParamGroup::CondExtractorP, 3)?;
        let mut s_enh = take(ParamGroup::Enhancer);
        let enhancer = Enhancer::new(&mut s_enh.root(), lic.enhancer_channels(), d, &cfg.lic)?;
        let mut s_fe = take(ParamGroup::FeatureEncoderP);
        let feature_encoder_p = feature_encoder(&mut s_fe.root(), &cfg.vq, cfg.predictor.hidden_dim)?;
        let mut s_t = take(ParamGroup::Transformer);
        let transformer = TokenPredictor::new(&mut s_t.root(), &cfg.predictor, cfg.vq.codebook_size, d)?;
        let mut s_we = take(ParamGroup::WeightExtractor);
        let weight_extractor = WeightExtractor::new(&mut s_we.root(), &cfg.fusion, cfg.vq.patch_size)?;
        let mut s_c = take(ParamGroup::Correction);
        let correction = CorrectionChannels::new(&mut s_c.root(), cfg.fusion.channels, cfg.vq.latent_dim)?;
        let mut s_da = take(ParamGroup::AssistiveDecoder);
        let assistive = AssistiveDecoder::new(&mut s_da.root(), &cfg.vq)?;
        let mut s_de = take(ParamGroup::DenoiserE);
        let denoiser_e = Denoiser::new(&mut s_de.root(), d, &cfg.diffusion)?;
        let mut s_dp = take(ParamGroup::DenoiserP);
        let denoiser_p = Denoiser::new(&mut s_dp.root(), d, &cfg.diffusion)?;
        let mut s_disc = take(ParamGroup::Discriminator);
        let discriminator = Discriminator::new(&mut s_disc.root(), cfg.loss.discriminator_channels)?;
        let stores = [
            (ParamGroup::VqEncoder, enc),
            (ParamGroup::Codebook, cb),
            (ParamGroup::VqDecoder, dec),
            (ParamGroup::LicCodec, lic_store),
            (ParamGroup::DrvExtractorE, s_el),
            (ParamGroup::Enhancer, s_enh),
            (ParamGroup::CondExtractorE, s_ec),
            (ParamGroup::DrvExtractorP, s_ep),
            (ParamGroup::FeatureEncoderP, s_fe),
            (ParamGroup::Transformer, s_t),
            (ParamGroup::CondExtractorP, s_cp),
            (ParamGroup::WeightExtractor, s_we),
            (ParamGroup::Correction, s_c),
            (ParamGroup::AssistiveDecoder, s_da),
            (ParamGroup::DenoiserE, s_de),
            (ParamGroup::DenoiserP, s_dp),
            (ParamGroup::Discriminator, s_disc),
        ]
        .into_iter()
        .collect();
        Ok(Self {
            cfg: cfg.clone(),
            stores,
            vq,
            lic,
            drv_extractor_e,
            enhancer,
            cond_extractor_e,
            drv_extractor_p,
            feature_encoder_p,
            transformer,
            cond_extractor_p,
            weight_extractor,
            correction,
            assistive,
            denoiser_e,
            denoiser_p,
            discriminator,
            schedule: DiffusionSchedule::new(&cfg.diffusion.betas)?,
            perceptual: RandomFeatureMetric::new(&cfg.loss.perceptual_channels, cfg.loss.perceptual_seed)?,
            trained: Vec::new(),
        })
    }

    pub fn store(&self, g: ParamGroup) -> &ParamStore {
        &self.stores[&g]
    }

    pub fn vars(&self, groups: &[ParamGroup]) -> Vec<Var> {
        groups.iter().flat_map(|g| self.stores[g].vars()).collect()
    }

    pub fn fingerprints(&self) -> Result<BTreeMap<ParamGroup, u64>> {
        self.stores.iter().map(|(&g, s)| Ok((g, s.fingerprint()?))).collect()
    }

    pub fn num_params(&self) -> usize {
        self.stores.values().map(|s| s.num_params()).sum()
    }

    /// All parameters as `group/name` tensors.
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        self.stores
            .iter()
            .flat_map(|(g, s)| s.tensors().map(move |(n, t)| (format!("{g}/{n}"), t.clone())))
            .collect()
    }

    pub fn load_tensors(&self, map: &std::collections::HashMap<String, Tensor>) -> Result<()> {
        for (g, s) in &self.stores {
            s.load(map, &format!("{g}/"))?;
        }
        Ok(())
    }

    /// Copies every parameter (all groups) from a model of identical layout.
    pub fn copy_from(&self, other: &HdcModel) -> Result<()> {
        for (g, s) in &self.stores {
            s.copy_from(&other.stores[g])?;
        }
        Ok(())
    }

    /// Copies only `groups`; the two models may differ elsewhere.
    pub fn copy_groups_from(&self, other: &HdcModel, groups: &[ParamGroup]) -> Result<()> {
        for g in groups {
            self.stores[g].copy_from(&other.stores[g])?;
        }
        Ok(())
    }

    /// Seeds fm_P's encoder from the trained VQ encoder wherever shapes agree
    /// (everything but the widened head).
    pub fn fork_feature_encoder(&self) -> Result<usize> {
        let src = &self.stores[&ParamGroup::VqEncoder];
        let dst = &self.stores[&ParamGroup::FeatureEncoderP];
        let mut copied = 0;
        for (name, t) in src.tensors() {
            if let Some(v) = dst.var(name) {
                if v.dims() == t.dims() {
                    v.set(t)?;
                    copied += 1;
                }
            }
        }
        Ok(copied)
    }

    pub fn is_fully_trained(&self) -> bool {
        Stage::ALL.iter().all(|s| self.trained.contains(s))
    }

    pub fn grid(&self, height: usize, width: usize) -> (usize, usize) {
        (height / self.cfg.vq.patch_size, width / self.cfg.vq.patch_size)
    }

    // Batched forward pieces shared by training, the codec and evaluation.

    /// Rounded LIC latent and the base reconstruction x̂ at input resolution.
    pub fn lic_base(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let (_, _, h, w) = x.dims4()?;
        let yq = self.lic.quantize(&self.lic.analysis(x)?)?;
        let x_hat = self.lic.synthesis(&yq, h, w)?;
        Ok((yq, x_hat))
    }

    /// v_joint_E = E_L(x, x̂).
    pub fn drv_e(&self, x: &Tensor, x_hat: &Tensor) -> Result<Tensor> {
        joint_drv_batch(x, x_hat, &self.drv_extractor_e)
    }

    /// v_joint_P = E_P(x, x̂).
    pub fn drv_p(&self, x: &Tensor, x_hat: &Tensor) -> Result<Tensor> {
        joint_drv_batch(x, x_hat, &self.drv_extractor_p)
    }

    /// c = E_C(x̂).
    pub fn cond_e(&self, x_hat: &Tensor) -> Result<Tensor> {
        condition_batch(x_hat, &self.cond_extractor_e)
    }

    /// c_P, extracted from x̂_lic.
    pub fn cond_p(&self, x_lic: &Tensor) -> Result<Tensor> {
        condition_batch(x_lic, &self.cond_extractor_p)
    }

    pub fn enhanced(&self, yq: &Tensor, drv: &Tensor, height: usize, width: usize) -> Result<Tensor> {
        self.lic.synthesis_enhanced(yq, drv, &self.enhancer, height, width)
    }

    /// Row-major index maps of a batch.
    pub fn vq_ids(&self, x: &Tensor) -> Result<Vec<u32>> {
        let z = self.vq.encode(x)?;
        Ok(self.vq.quantize_batch(&z)?.ids)
    }

    /// Predictor logits (B, L, K).
    pub fn predict_logits(
        &self,
        ids: &[u32],
        mask: &BinaryMask,
        drv_p: Option<&Tensor>,
        x_lic: &Tensor,
    ) -> Result<Tensor> {
        let fm = feature_map_batch(x_lic, &self.feature_encoder_p)?;
        self.transformer.forward(ids, mask, drv_p, &fm)
    }

    /// x̂_final for full index maps `ids` (B grids of gh x gw), guided by x̂_lic.
    pub fn fused(&self, ids: &[u32], gh: usize, gw: usize, x_lic: &Tensor) -> Result<Tensor> {
        let b = x_lic.dim(0)?;
        let y_hat = self.vq.lookup_batch(ids, b, gh, gw)?;
        let w = self.weight_extractor.forward(x_lic)?;
        let y_correct = vq_correct(&y_hat, &w, &self.correction)?;
        decode_fused(&y_correct, &self.assistive, &self.vq.decoder)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_sets_partition_all_groups() {
        for adv in [false, true] {
            let mut covered: Vec<ParamGroup> = Vec::new();
            for s in Stage::ALL {
                let t = s.trainable(adv);
                let f = s.frozen(adv);
                assert!(t.iter().all(|g| !f.contains(g)));
                assert_eq!(t.len() + f.len(), ParamGroup::ALL.len());
                covered.extend(t);
            }
            for g in ParamGroup::ALL {
                if g != ParamGroup::Discriminator || adv {
                    assert!(covered.contains(&g), "{g} never trained");
                }
            }
        }
        assert!(Stage::VqCorrection.frozen(false).contains(&ParamGroup::VqEncoder));
        assert!(Stage::VqCorrection.frozen(false).contains(&ParamGroup::Codebook));
        assert_eq!(Stage::Predictor.prerequisite(), Some(Stage::Enhancer));
        assert_eq!("vq-correction".parse::<Stage>().unwrap(), Stage::VqCorrection);
        assert_eq!("5".parse::<Stage>().unwrap(), Stage::DrvDiffusion);
    }

    #[test]
    fn model_builds_deterministically() {
        let cfg = CodecConfig::toy();
        let a = HdcModel::new(&cfg).unwrap();
        let b = HdcModel::new(&cfg).unwrap();
        assert_eq!(a.fingerprints().unwrap(), b.fingerprints().unwrap());
        assert!(a.fork_feature_encoder().unwrap() > 0);
    }
}
