//! Five-stage training. Each stage updates only its own parameter groups and
//! requires the checkpoint of the stage before it.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor, Var};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use log::{info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bitstream::{make_mask, MaskSchedule};
use crate::checkpoint;
use crate::config::CodecConfig;
use crate::corpus::synthetic_image;
use crate::drv_diffusion::diffusion_loss;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::nn::{mse_loss, randn, scalar};
use crate::pipeline::loss::{AdversarialTrainer, ImageLoss};
use crate::pipeline::model::{HdcModel, ParamGroup, Stage, StageConfig};
use crate::token_predictor::{predict_indices_batch, token_loss};
use crate::vq_stream::VqTrainer;

/// Where training images come from.
#[derive(Debug, Clone)]
pub enum Dataset {
    /// Endless generated images; batch k is fixed by (seed, k).
    Synthetic { seed: u64 },
    /// Random crops (or upscales) of a fixed image set.
    Images(Vec<Image>),
}

impl Dataset {
    pub fn batch(&self, index: usize, size: usize, count: usize, seed: u64) -> Result<Vec<Image>> {
        match self {
            Dataset::Synthetic { seed: s } => {
                let base = s.wrapping_mul(0x2545_F491_4F6C_DD1D) ^ seed.rotate_left(32) ^ ((index as u64) << 16);
                Ok((0..count).map(|i| synthetic_image(size, base.wrapping_add(i as u64))).collect())
            }
            Dataset::Images(images) => {
                if images.is_empty() {
                    return Err(Error::Config("empty training set".into()));
                }
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (index as u64).wrapping_mul(0x9E37_79B9));
                (0..count)
                    .map(|_| random_crop(&images[rng.random_range(0..images.len())], size, &mut rng))
                    .collect()
            }
        }
    }
}

fn random_crop(img: &Image, size: usize, rng: &mut ChaCha8Rng) -> Result<Image> {
    let src = if img.height < size || img.width < size {
        let scale = size as f64 / img.height.min(img.width) as f64;
        let (h, w) = ((img.height as f64 * scale).ceil() as usize, (img.width as f64 * scale).ceil() as usize);
        img.resize_bilinear(h.max(size), w.max(size))?
    } else {
        img.clone()
    };
    let (y0, x0) = (rng.random_range(0..=src.height - size), rng.random_range(0..=src.width - size));
    let mut out = Image::filled(size, size, 0.0);
    for c in 0..3 {
        for y in 0..size {
            for x in 0..size {
                *out.at_mut(c, y, x) = src.at(c, y0 + y, x0 + x);
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Overrides the configured step count.
    pub steps: Option<usize>,
    /// Tab-separated `step  loss` log.
    pub log_path: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct StageReport {
    pub stage: Stage,
    pub losses: Vec<f64>,
}

impl StageReport {
    fn window(&self) -> usize {
        (self.losses.len() / 10).max(1)
    }

    /// Mean of the first tenth of the loss curve.
    pub fn smoothed_start(&self) -> f64 {
        let w = self.window().min(self.losses.len());
        self.losses[..w].iter().sum::<f64>() / w as f64
    }

    /// Mean of the last tenth of the loss curve.
    pub fn smoothed_end(&self) -> f64 {
        let w = self.window().min(self.losses.len());
        self.losses[self.losses.len() - w..].iter().sum::<f64>() / w as f64
    }
}

struct Adam {
    opt: AdamW,
    step: usize,
}

impl Adam {
    fn new(vars: Vec<Var>, lr: f64) -> Result<Self> {
        let opt = AdamW::new(
            vars,
            ParamsAdamW {
                lr,
                weight_decay: 0.0,
                ..Default::default()
            },
        )?;
        Ok(Self { opt, step: 0 })
    }

    fn apply(&mut self, loss: &Tensor, what: &str) -> Result<f64> {
        let v = scalar(loss)?;
        if !v.is_finite() {
            return Err(Error::Diverged {
                step: self.step,
                detail: format!("{what} loss {v}"),
            });
        }
        self.opt.backward_step(loss)?;
        self.step += 1;
        Ok(v)
    }
}

fn stage_seed(cfg: &CodecConfig, stage: Stage) -> u64 {
    cfg.train.seed.wrapping_mul(31).wrapping_add(stage.number() as u64)
}

/// Trains one stage in place. The model must already carry every earlier stage.
pub fn train_stage(model: &mut HdcModel, stage: Stage, data: &Dataset, opts: &TrainOptions) -> Result<StageReport> {
    for earlier in Stage::ALL.iter().take(stage.number() - 1) {
        if !model.trained.contains(earlier) {
            return Err(Error::Dependency {
                stage: stage.name().into(),
                missing: earlier.name().into(),
            });
        }
    }
    let sc = StageConfig::new(stage, &model.cfg);
    let steps = opts.steps.unwrap_or(sc.steps);
    let frozen_before: BTreeMap<ParamGroup, u64> = sc
        .frozen
        .iter()
        .map(|&g| Ok((g, model.store(g).fingerprint()?)))
        .collect::<Result<_>>()?;

    let mut ctx = Ctx::new(model, &sc, data)?;
    let mut losses = Vec::with_capacity(steps);
    for step in 0..steps {
        let x = ctx.batch(step)?;
        let v = match stage {
            Stage::BasePretrain => ctx.base_pretrain(&x)?,
            Stage::Enhancer => ctx.enhancer(&x)?,
            Stage::Predictor => ctx.predictor(&x)?,
            Stage::VqCorrection => ctx.vq_correction(&x)?,
            Stage::DrvDiffusion => ctx.drv_diffusion(&x)?,
        };
        losses.push(v);
        let every = model.cfg.train.log_every.max(1);
        if step % every == 0 || step + 1 == steps {
            info!("{stage} step {step}/{steps} loss {v:.5}");
        }
    }
    drop(ctx);

    for (g, before) in frozen_before {
        if model.store(g).fingerprint()? != before {
            return Err(Error::Checkpoint(format!("{stage} modified frozen group {g}")));
        }
    }
    if !model.trained.contains(&stage) {
        model.trained.push(stage);
    }
    if let Some(path) = &opts.log_path {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "step\tloss")?;
        for (i, l) in losses.iter().enumerate() {
            writeln!(f, "{i}\t{l}")?;
        }
    }
    Ok(StageReport { stage, losses })
}

/// Loads the prerequisite checkpoint from `dir` (or builds a fresh model for
/// the first stage), trains, and writes `stage-N.safetensors` plus its loss log.
/// On failure nothing new is written.
pub fn run_stage(
    dir: impl AsRef<Path>,
    stage: Stage,
    cfg: &CodecConfig,
    data: &Dataset,
    steps: Option<usize>,
) -> Result<StageReport> {
    let dir = dir.as_ref();
    let mut model = match stage.prerequisite() {
        None => HdcModel::new(cfg)?,
        Some(prev) => {
            let path = checkpoint::stage_file(dir, prev);
            if !path.exists() {
                return Err(Error::Dependency {
                    stage: stage.name().into(),
                    missing: path.display().to_string(),
                });
            }
            let m = checkpoint::load(&path)?;
            if m.cfg != *cfg {
                warn!("using the configuration stored in {}", path.display());
            }
            m
        }
    };
    std::fs::create_dir_all(dir)?;
    let log_tmp = dir.join(format!("stage-{}.loss.tsv.tmp", stage.number()));
    let opts = TrainOptions {
        steps,
        log_path: Some(log_tmp.clone()),
    };
    let report = match train_stage(&mut model, stage, data, &opts) {
        Ok(r) => r,
        Err(e) => {
            let _ = std::fs::remove_file(&log_tmp);
            return Err(e);
        }
    };
    checkpoint::save(&model, checkpoint::stage_file(dir, stage))?;
    std::fs::rename(&log_tmp, dir.join(format!("stage-{}.loss.tsv", stage.number())))?;
    Ok(report)
}

/// Runs every stage in order in memory.
pub fn train_all(model: &mut HdcModel, data: &Dataset) -> Result<Vec<StageReport>> {
    Stage::ALL
        .iter()
        .map(|&s| train_stage(model, s, data, &TrainOptions::default()))
        .collect()
}

struct Ctx<'a> {
    model: &'a HdcModel,
    data: &'a Dataset,
    opt: Adam,
    vq: Option<VqTrainer>,
    disc: Option<AdversarialTrainer>,
    rng: ChaCha8Rng,
    seed: u64,
    loss: ImageLoss<'a>,
}

impl<'a> Ctx<'a> {
    fn new(model: &'a HdcModel, sc: &StageConfig, data: &'a Dataset) -> Result<Self> {
        let lr = sc.learning_rate;
        let adv = sc.trainable.contains(&ParamGroup::Discriminator);
        let seed = stage_seed(&model.cfg, sc.stage);
        let main: Vec<ParamGroup> = sc
            .trainable
            .iter()
            .copied()
            .filter(|g| *g != ParamGroup::Discriminator)
            .collect();
        let (opt, vq) = if sc.stage == Stage::BasePretrain {
            let vq_groups = [ParamGroup::VqEncoder, ParamGroup::Codebook, ParamGroup::VqDecoder];
            (
                Adam::new(model.vars(&[ParamGroup::LicCodec]), lr)?,
                Some(VqTrainer::new(model.vars(&vq_groups), lr, &model.cfg.vq, seed)?),
            )
        } else {
            (Adam::new(model.vars(&main), lr)?, None)
        };
        if sc.stage == Stage::Predictor {
            let n = model.fork_feature_encoder()?;
            info!("feature encoder: {n} tensors copied from the VQ encoder");
        }
        Ok(Self {
            model,
            data,
            opt,
            vq,
            disc: if adv {
                Some(AdversarialTrainer::new(model.vars(&[ParamGroup::Discriminator]), lr)?)
            } else {
                None
            },
            rng: ChaCha8Rng::seed_from_u64(seed),
            seed,
            loss: ImageLoss {
                weights: sc.weights,
                perceptual: &model.perceptual,
                discriminator: adv.then_some(&model.discriminator),
            },
        })
    }

    fn batch(&self, step: usize) -> Result<Tensor> {
        let t = &self.model.cfg.train;
        let imgs = self.data.batch(step, t.image_size, t.batch_size, self.seed)?;
        Image::batch_to_tensor(&imgs, DType::F32, &Device::Cpu)
    }

    fn adversarial(&mut self, real: &Tensor, fake: &Tensor) -> Result<()> {
        if let Some(d) = &mut self.disc {
            d.step(&self.model.discriminator, real, &fake.detach())?;
        }
        Ok(())
    }

    fn random_schedule(&mut self, from: &[MaskSchedule]) -> MaskSchedule {
        from[self.rng.random_range(0..from.len())]
    }

    fn base_pretrain(&mut self, x: &Tensor) -> Result<f64> {
        let m = self.model;
        let vq = self
            .vq
            .as_mut()
            .expect("built for this stage")
            .step(&m.vq, x, &self.loss)?;
        let (_, x_hat) = m.lic_base(x)?;
        let lic = self.opt.apply(&mse_loss(&x_hat, x)?, "LIC")?;
        if self.disc.is_some() {
            let q = m.vq.quantize_batch(&m.vq.encode(x)?)?;
            let fake = m.vq.decode(&q.quantized)?;
            self.adversarial(x, &fake)?;
        }
        Ok(vq.total + lic)
    }

    fn enhancer(&mut self, x: &Tensor) -> Result<f64> {
        let m = self.model;
        let (_, _, h, w) = x.dims4()?;
        let (yq, x_hat) = m.lic_base(x)?;
        let (yq, x_hat) = (yq.detach(), x_hat.detach());
        let v = m.drv_e(x, &x_hat)?;
        let x_lic = m.enhanced(&yq, &v, h, w)?;
        let terms = self.loss.terms(&x_lic, x)?;
        let l = self.opt.apply(&terms.total, "enhancer")?;
        self.adversarial(x, &x_lic)?;
        Ok(l)
    }

    /// x̂ and the GT-DRV enhanced x̂_lic, both outside the graph.
    fn lic_pair(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let m = self.model;
        let (_, _, h, w) = x.dims4()?;
        let (yq, x_hat) = m.lic_base(x)?;
        let v = m.drv_e(x, &x_hat)?;
        let x_lic = m.enhanced(&yq, &v, h, w)?;
        Ok((x_hat.detach(), x_lic.detach()))
    }

    fn predictor(&mut self, x: &Tensor) -> Result<f64> {
        let m = self.model;
        let (_, _, h, w) = x.dims4()?;
        let (gh, gw) = m.grid(h, w);
        let ids = m.vq_ids(x)?;
        let mask = make_mask(self.random_schedule(&MaskSchedule::TRAINING), gh, gw);
        let (x_hat, x_lic) = self.lic_pair(x)?;
        let drv = if m.transformer.uses_drv() {
            Some(m.drv_p(x, &x_hat)?)
        } else {
            None
        };
        let logits = m.predict_logits(&ids, &mask, drv.as_ref(), &x_lic)?;
        self.opt.apply(&token_loss(&logits, &ids, &mask)?, "token")
    }

    fn vq_correction(&mut self, x: &Tensor) -> Result<f64> {
        let m = self.model;
        let (_, _, h, w) = x.dims4()?;
        let (gh, gw) = m.grid(h, w);
        let ids = m.vq_ids(x)?;
        let mask = make_mask(self.random_schedule(&MaskSchedule::ALL), gh, gw);
        let (x_hat, x_lic) = self.lic_pair(x)?;
        let drv = if m.transformer.uses_drv() {
            Some(m.drv_p(x, &x_hat)?)
        } else {
            None
        };
        let logits = m.predict_logits(&ids, &mask, drv.as_ref(), &x_lic)?;
        let predicted = predict_indices_batch(&logits, &ids, &mask)?;
        let x_final = m.fused(&predicted, gh, gw, &x_lic)?;
        let terms = self.loss.terms(&x_final, x)?;
        let l = self.opt.apply(&terms.total, "fusion")?;
        self.adversarial(x, &x_final)?;
        Ok(l)
    }

    fn drv_diffusion(&mut self, x: &Tensor) -> Result<f64> {
        let m = self.model;
        let (x_hat, x_lic) = self.lic_pair(x)?;
        let v_e = m.drv_e(x, &x_hat)?.detach();
        let v_p = m.drv_p(x, &x_hat)?.detach();
        let c_e = m.cond_e(&x_hat)?;
        let c_p = m.cond_p(&x_lic)?;
        let n_e = randn(&mut self.rng, v_e.dims(), v_e.dtype(), v_e.device())?;
        let n_p = randn(&mut self.rng, v_p.dims(), v_p.dtype(), v_p.device())?;
        let loss = (diffusion_loss(&v_e, &c_e, &m.denoiser_e, &m.schedule, &n_e)?
            + diffusion_loss(&v_p, &c_p, &m.denoiser_p, &m.schedule, &n_p)?)?;
        self.opt.apply(&loss, "diffusion")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> CodecConfig {
        let mut cfg = CodecConfig::toy();
        cfg.train.image_size = 32;
        cfg.train.batch_size = 2;
        cfg
    }

    #[test]
    fn out_of_order_stage_is_rejected() {
        let mut model = HdcModel::new(&tiny()).unwrap();
        let err = train_stage(&mut model, Stage::Predictor, &Dataset::Synthetic { seed: 0 }, &TrainOptions::default());
        assert!(matches!(err, Err(Error::Dependency { .. })));
        let dir = tempfile::tempdir().unwrap();
        let err = run_stage(dir.path(), Stage::Enhancer, &tiny(), &Dataset::Synthetic { seed: 0 }, Some(1));
        assert!(matches!(err, Err(Error::Dependency { .. })));
        assert!(!checkpoint::stage_file(dir.path(), Stage::Enhancer).exists());
    }

    #[test]
    fn each_stage_touches_only_its_groups() {
        let cfg = tiny();
        let mut model = HdcModel::new(&cfg).unwrap();
        let data = Dataset::Synthetic { seed: 1 };
        let opts = TrainOptions {
            steps: Some(2),
            log_path: None,
        };
        for stage in Stage::ALL {
            let before = model.fingerprints().unwrap();
            let r = train_stage(&mut model, stage, &data, &opts).unwrap();
            assert_eq!(r.losses.len(), 2);
            let after = model.fingerprints().unwrap();
            let trainable = stage.trainable(false);
            for g in ParamGroup::ALL {
                if trainable.contains(&g) {
                    assert_ne!(before[&g], after[&g], "{stage}: {g} did not update");
                } else {
                    assert_eq!(before[&g], after[&g], "{stage}: {g} changed");
                }
            }
        }
        assert!(model.is_fully_trained());
    }

    #[test]
    fn image_dataset_crops_to_size() {
        let data = Dataset::Images(vec![synthetic_image(20, 0), synthetic_image(48, 1)]);
        let b = data.batch(3, 32, 4, 9).unwrap();
        assert!(b.iter().all(|i| i.dims() == (32, 32)));
        assert_eq!(b, data.batch(3, 32, 4, 9).unwrap());
    }
}
