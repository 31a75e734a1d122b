//! Lightweight diffusion over dense representative vectors (DRVs).
//!
//! Forward: v_t = sqrt(abar_t) v + sqrt(1 - abar_t) z.
//! Reverse: v_{t-1} = (v_t - (1 - a_t) / sqrt(1 - abar_t) * eps(v_t, t, c)) / sqrt(a_t),
//! with no stochastic term between steps.

use candle_core::{DType, Device, Tensor, Var};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::DiffusionConfig;
use crate::error::{shape_err, Error, Result};
use crate::nn::{mse_loss, randn, scalar, LayerNorm, Linear, Scope};

#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl DiffusionSchedule {
    pub fn new(betas: &[f64]) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::Config("diffusion needs at least one step".into()));
        }
        if let Some(b) = betas.iter().find(|&&b| !(b > 0.0 && b < 1.0)) {
            return Err(Error::Config(format!("beta {b} outside (0, 1)")));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let alpha_bars = alphas
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Ok(Self {
            betas: betas.to_vec(),
            alphas,
            alpha_bars,
        })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    fn check(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::Step {
                t,
                steps: self.steps(),
            });
        }
        Ok(())
    }

    /// alpha_t for 1 <= t <= T.
    pub fn alpha(&self, t: usize) -> Result<f64> {
        self.check(t)?;
        Ok(self.alphas[t - 1])
    }

    /// alpha_bar_t for 0 <= t <= T, with alpha_bar_0 = 1.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        if t == 0 {
            return Ok(1.0);
        }
        self.check(t)?;
        Ok(self.alpha_bars[t - 1])
    }
}

pub fn make_schedule(steps: usize, betas: &[f64]) -> Result<DiffusionSchedule> {
    if steps != betas.len() {
        return Err(Error::Config(format!(
            "{steps} steps but {} betas",
            betas.len()
        )));
    }
    DiffusionSchedule::new(betas)
}

/// Closed-form noising of `v` to step `t`.
pub fn diffuse_forward(v: &Tensor, sched: &DiffusionSchedule, t: usize, noise: &Tensor) -> Result<Tensor> {
    if v.dims() != noise.dims() {
        return Err(shape_err(format!("{:?} vs noise {:?}", v.dims(), noise.dims())));
    }
    let ab = sched.alpha_bar(t)?;
    Ok(((v * ab.sqrt())? + (noise * (1.0 - ab).sqrt())?)?)
}

/// Anything that predicts the injected noise from (v_t, t, condition).
pub trait NoisePredictor {
    fn predict_noise(&self, v_t: &Tensor, t: usize, cond: &Tensor) -> Result<Tensor>;
}

impl<F> NoisePredictor for F
where
    F: Fn(&Tensor, usize, &Tensor) -> Result<Tensor>,
{
    fn predict_noise(&self, v_t: &Tensor, t: usize, cond: &Tensor) -> Result<Tensor> {
        self(v_t, t, cond)
    }
}

pub fn denoise_step(
    v_t: &Tensor,
    t: usize,
    cond: &Tensor,
    model: &dyn NoisePredictor,
    sched: &DiffusionSchedule,
) -> Result<Tensor> {
    if v_t.dims() != cond.dims() {
        return Err(shape_err(format!(
            "v_t {:?} and condition {:?} differ",
            v_t.dims(),
            cond.dims()
        )));
    }
    let alpha = sched.alpha(t)?;
    let ab = sched.alpha_bar(t)?;
    let eps = model.predict_noise(v_t, t, cond)?;
    let coef = (1.0 - alpha) / (1.0 - ab).sqrt();
    Ok(((v_t - (eps * coef)?)? * (1.0 / alpha.sqrt()))?)
}

/// Runs t = T..1 from `v_start`.
pub fn denoise_from(
    v_start: &Tensor,
    cond: &Tensor,
    model: &dyn NoisePredictor,
    sched: &DiffusionSchedule,
) -> Result<Tensor> {
    let mut v = v_start.clone();
    for t in (1..=sched.steps()).rev() {
        v = denoise_step(&v, t, cond, model, sched)?;
    }
    Ok(v)
}

/// Draws v_T ~ N(0, I) from `seed` and denoises it under condition `cond` (B, D).
pub fn sample_drv(
    cond: &Tensor,
    model: &dyn NoisePredictor,
    sched: &DiffusionSchedule,
    seed: u64,
) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v_t = randn(&mut rng, cond.dims(), cond.dtype(), cond.device())?;
    denoise_from(&v_t, cond, model, sched)
}

/// Sinusoidal embedding of an integer step, (dim,) with sin/cos halves.
pub fn time_embedding(t: usize, dim: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let half = dim / 2;
    let mut v = vec![0f64; dim];
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half.max(1) as f64).exp();
        v[i] = (t as f64 * freq).sin();
        v[half + i] = (t as f64 * freq).cos();
    }
    Ok(Tensor::from_vec(v, dim, device)?.to_dtype(dtype)?)
}

#[derive(Debug, Clone)]
struct ResMlpBlock {
    norm: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

/// eps_theta: residual MLP blocks; each block sees [norm(h), c, time embedding].
#[derive(Debug, Clone)]
pub struct Denoiser {
    blocks: Vec<ResMlpBlock>,
    out: Linear,
    dim: usize,
    time_dim: usize,
}

impl Denoiser {
    pub fn new(s: &mut Scope, dim: usize, cfg: &DiffusionConfig) -> Result<Self> {
        let blocks = (0..cfg.blocks)
            .map(|i| {
                let mut b = s.pp(format!("block{i}"));
                Ok(ResMlpBlock {
                    norm: LayerNorm::new(&mut b.pp("norm"), dim)?,
                    fc1: Linear::new(&mut b.pp("fc1"), 2 * dim + cfg.time_dim, cfg.hidden)?,
                    fc2: Linear::with_gain(&mut b.pp("fc2"), cfg.hidden, dim, 0.5)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            blocks,
            // Starts as the zero noise prediction; a random head is amplified by the reverse chain.
            out: Linear::with_gain(&mut s.pp("out"), dim, dim, 0.0)?,
            dim,
            time_dim: cfg.time_dim,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
}

impl NoisePredictor for Denoiser {
    fn predict_noise(&self, v_t: &Tensor, t: usize, cond: &Tensor) -> Result<Tensor> {
        let (b, d) = v_t.dims2()?;
        if d != self.dim || cond.dims() != v_t.dims() {
            return Err(shape_err(format!(
                "denoiser of dim {} got v_t {:?}, c {:?}",
                self.dim,
                v_t.dims(),
                cond.dims()
            )));
        }
        let temb = time_embedding(t, self.time_dim, v_t.dtype(), v_t.device())?
            .unsqueeze(0)?
            .broadcast_as((b, self.time_dim))?;
        let mut h = v_t.clone();
        for blk in &self.blocks {
            let input = Tensor::cat(&[&blk.norm.forward(&h)?, cond, &temb], 1)?;
            h = (&h + blk.fc2.forward(&blk.fc1.forward(&input)?.silu()?)?)?;
        }
        self.out.forward(&h)
    }
}

/// Loss after the full T-step chain: v_T is the forward-noised ground truth,
/// every reverse step stays in the graph, and the result is compared to v_gt.
pub fn diffusion_loss(
    v_gt: &Tensor,
    cond: &Tensor,
    model: &dyn NoisePredictor,
    sched: &DiffusionSchedule,
    noise: &Tensor,
) -> Result<Tensor> {
    let v_t = diffuse_forward(v_gt, sched, sched.steps(), noise)?;
    let v_hat = denoise_from(&v_t, cond, model, sched)?;
    mse_loss(&v_hat, v_gt)
}

pub struct DiffusionTrainer {
    opt: AdamW,
    rng: ChaCha8Rng,
    steps: usize,
}

impl DiffusionTrainer {
    pub fn new(vars: Vec<Var>, lr: f64, seed: u64) -> Result<Self> {
        Ok(Self {
            opt: AdamW::new(
                vars,
                ParamsAdamW {
                    lr,
                    weight_decay: 0.0,
                    ..Default::default()
                },
            )?,
            rng: ChaCha8Rng::seed_from_u64(seed),
            steps: 0,
        })
    }

    /// One optimizer step; `cond` may itself be produced by a trainable extractor.
    pub fn step(
        &mut self,
        v_gt: &Tensor,
        cond: &Tensor,
        model: &dyn NoisePredictor,
        sched: &DiffusionSchedule,
    ) -> Result<f64> {
        let loss = self.loss(v_gt, cond, model, sched)?;
        self.apply(&loss)
    }

    pub fn loss(
        &mut self,
        v_gt: &Tensor,
        cond: &Tensor,
        model: &dyn NoisePredictor,
        sched: &DiffusionSchedule,
    ) -> Result<Tensor> {
        let noise = randn(&mut self.rng, v_gt.dims(), v_gt.dtype(), v_gt.device())?;
        diffusion_loss(&v_gt.detach(), cond, model, sched, &noise)
    }

    pub fn apply(&mut self, loss: &Tensor) -> Result<f64> {
        let v = scalar(loss)?;
        if !v.is_finite() {
            return Err(Error::Diverged {
                step: self.steps,
                detail: format!("diffusion loss {v}"),
            });
        }
        self.opt.backward_step(loss)?;
        self.steps += 1;
        Ok(v)
    }
}
