//! Seeded parameter storage and the small set of layers the codec is built from.
//!
//! Parameters are created through a [`ParamStore`] so that initialization is
//! reproducible bit-for-bit from a seed; candle's own RNG is never used.

use std::collections::hash_map::DefaultHasher;
use std::collections::{BTreeMap, HashMap};
use std::hash::Hasher;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{shape_err, Error, Result};

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Const(f64),
    Uniform(f64, f64),
    /// Uniform with variance gain^2 / fan_in.
    Fan { fan_in: usize, gain: f64 },
    Normal(f64),
    /// Conv weight (out, in, k, k) equal to a centered delta on matching
    /// channels, plus N(0, noise^2).
    ConvIdentity { noise: f64 },
}

/// Named, seeded trainable tensors of one parameter group.
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
    device: Device,
    rng: ChaCha8Rng,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType, device: &Device) -> Self {
        Self {
            vars: BTreeMap::new(),
            dtype,
            device: device.clone(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn root(&mut self) -> Scope<'_> {
        Scope {
            store: self,
            prefix: String::new(),
        }
    }

    fn create(&mut self, name: String, shape: &[usize], init: Init) -> Result<Tensor> {
        if let Some(v) = self.vars.get(&name) {
            if v.dims() != shape {
                return Err(shape_err(format!(
                    "parameter {name} exists with shape {:?}, requested {shape:?}",
                    v.dims()
                )));
            }
            return Ok(v.as_tensor().clone());
        }
        let n: usize = shape.iter().product();
        let values: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Const(c) => vec![c; n],
            Init::Uniform(lo, hi) => (0..n).map(|_| lo + (hi - lo) * self.rng.random::<f64>()).collect(),
            Init::Fan { fan_in, gain } => {
                let bound = gain * (3.0 / fan_in.max(1) as f64).sqrt();
                (0..n).map(|_| bound * (2.0 * self.rng.random::<f64>() - 1.0)).collect()
            }
            Init::Normal(std) => (0..n)
                .map(|_| std * self.rng.sample::<f64, _>(StandardNormal))
                .collect(),
            Init::ConvIdentity { noise } => {
                let &[_, cin, kh, kw] = shape else {
                    return Err(shape_err(format!("identity init needs a 4-d shape, got {shape:?}")));
                };
                (0..n)
                    .map(|i| {
                        let (x, y) = (i % kw, (i / kw) % kh);
                        let (ci, co) = ((i / (kw * kh)) % cin, i / (kw * kh * cin));
                        let delta = if co == ci && y == kh / 2 && x == kw / 2 { 1.0 } else { 0.0 };
                        delta + noise * self.rng.sample::<f64, _>(StandardNormal)
                    })
                    .collect()
            }
        };
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.vars.insert(name, var);
        Ok(out)
    }

    pub fn vars(&self) -> Vec<Var> {
        self.vars.values().cloned().collect()
    }

    pub fn var(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.vars.keys()
    }

    pub fn tensors(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.vars.iter().map(|(k, v)| (k, v.as_tensor()))
    }

    pub fn num_params(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Overwrites every parameter from `map[prefix + name]`; all must be present.
    pub fn load(&self, map: &HashMap<String, Tensor>, prefix: &str) -> Result<()> {
        for (name, var) in &self.vars {
            let key = format!("{prefix}{name}");
            let t = map
                .get(&key)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {key}")))?;
            if t.dims() != var.dims() {
                return Err(Error::Checkpoint(format!(
                    "tensor {key} has shape {:?}, model expects {:?}",
                    t.dims(),
                    var.dims()
                )));
            }
            var.set(&t.to_dtype(self.dtype)?)?;
        }
        Ok(())
    }

    /// Copies values from a store with the same layout.
    pub fn copy_from(&self, other: &ParamStore) -> Result<()> {
        let map: HashMap<String, Tensor> = other
            .tensors()
            .map(|(k, t)| (k.clone(), t.clone()))
            .collect();
        self.load(&map, "")
    }

    /// Overwrites every parameter with N(0, std^2) draws. Used to move off
    /// zero-initialized residual branches before gradient checks.
    pub fn randomize(&self, seed: u64, std: f64) -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for var in self.vars.values() {
            let t = (randn(&mut rng, var.dims(), self.dtype, &self.device)? * std)?;
            var.set(&t)?;
        }
        Ok(())
    }

    /// Hash of every parameter's bit pattern; equal iff values are bit-identical
    /// (up to hash collisions).
    pub fn fingerprint(&self) -> Result<u64> {
        let mut h = DefaultHasher::new();
        for (name, var) in &self.vars {
            h.write(name.as_bytes());
            let flat = var.as_tensor().flatten_all()?;
            match self.dtype {
                DType::F64 => flat.to_vec1::<f64>()?.iter().for_each(|v| h.write_u64(v.to_bits())),
                _ => flat
                    .to_dtype(DType::F32)?
                    .to_vec1::<f32>()?
                    .iter()
                    .for_each(|v| h.write_u32(v.to_bits())),
            }
        }
        Ok(h.finish())
    }
}

pub struct Scope<'a> {
    store: &'a mut ParamStore,
    prefix: String,
}

impl Scope<'_> {
    pub fn pp(&mut self, name: impl AsRef<str>) -> Scope<'_> {
        let prefix = if self.prefix.is_empty() {
            name.as_ref().to_string()
        } else {
            format!("{}.{}", self.prefix, name.as_ref())
        };
        Scope {
            store: self.store,
            prefix,
        }
    }

    pub fn get(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let full = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        self.store.create(full, shape, init)
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype
    }

    pub fn device(&self) -> Device {
        self.store.device.clone()
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    pub fn new(s: &mut Scope, input: usize, output: usize) -> Result<Self> {
        Self::with_gain(s, input, output, 1.0)
    }

    pub fn with_gain(s: &mut Scope, input: usize, output: usize, gain: f64) -> Result<Self> {
        let init = if gain == 0.0 {
            Init::Zeros
        } else {
            Init::Fan { fan_in: input, gain }
        };
        Ok(Self {
            weight: s.get("weight", &[output, input], init)?,
            bias: s.get("bias", &[output], Init::Zeros)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.broadcast_matmul(&self.weight.t()?)?;
        Ok(y.broadcast_add(&self.bias)?)
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Tensor,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    pub fn new(
        s: &mut Scope,
        input: usize,
        output: usize,
        kernel: usize,
        stride: usize,
        gain: f64,
    ) -> Result<Self> {
        let init = if gain == 0.0 {
            Init::Zeros
        } else {
            Init::Fan {
                fan_in: input * kernel * kernel,
                gain,
            }
        };
        Ok(Self {
            weight: s.get("weight", &[output, input, kernel, kernel], init)?,
            bias: s.get("bias", &[output], Init::Zeros)?,
            stride,
            padding: kernel / 2,
        })
    }

    /// Non-overlapping patch embedding: kernel = stride = `patch`.
    pub fn patchify(s: &mut Scope, input: usize, output: usize, patch: usize) -> Result<Self> {
        Ok(Self {
            weight: s.get(
                "weight",
                &[output, input, patch, patch],
                Init::Fan {
                    fan_in: input * patch * patch,
                    gain: 1.0,
                },
            )?,
            bias: s.get("bias", &[output], Init::Zeros)?,
            stride: patch,
            padding: 0,
        })
    }

    pub fn from_tensors(weight: Tensor, bias: Tensor, stride: usize, padding: usize) -> Self {
        Self {
            weight,
            bias,
            stride,
            padding,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = conv2d(x, &self.weight, self.stride, self.padding)?;
        let c = self.bias.dim(0)?;
        Ok(y.broadcast_add(&self.bias.reshape((1, c, 1, 1))?)?)
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }
}

/// `count` slices along `dim`, `stride` apart, starting at `start`.
fn strided(x: &Tensor, dim: usize, start: usize, count: usize, stride: usize) -> Result<Tensor> {
    if stride == 1 {
        return Ok(x.narrow(dim, start, count)?);
    }
    let avail = x.dim(dim)? - start;
    let want = stride * count;
    let t = x.narrow(dim, start, want.min(avail))?;
    let t = if want > avail { t.pad_with_zeros(dim, 0, want - avail)? } else { t };
    let mut shape = t.dims().to_vec();
    shape.splice(dim..=dim, [count, stride]);
    Ok(t.reshape(shape)?.narrow(dim + 1, 0, 1)?.squeeze(dim + 1)?)
}

/// Bias-free 2-d convolution lowered to im2col + matmul. Candle's CPU
/// backward for its native conv runs a naive transposed convolution that is
/// an order of magnitude slower; this keeps both passes on gemm.
pub fn conv2d(x: &Tensor, w: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let (b, cin, h, wd) = x.dims4()?;
    let (cout, wcin, kh, kw) = w.dims4()?;
    if wcin != cin {
        return Err(shape_err(format!("conv of {cin} channels with kernel {:?}", w.dims())));
    }
    let (hp, wp) = (h + 2 * padding, wd + 2 * padding);
    if hp < kh || wp < kw || stride == 0 {
        return Err(shape_err(format!("kernel {kh}x{kw} on padded {hp}x{wp}")));
    }
    let (oh, ow) = ((hp - kh) / stride + 1, (wp - kw) / stride + 1);
    let wm = w.reshape((cout, cin * kh * kw))?;
    let col = if padding == 0 && kh == stride && kw == stride && h % stride == 0 && wd % stride == 0 {
        // Non-overlapping patches: a pure reshuffle.
        x.reshape((b, cin, oh, kh, ow, kw))?
            .permute((0, 1, 3, 5, 2, 4))?
            .reshape((b, cin * kh * kw, oh * ow))?
    } else if kh == 1 && kw == 1 && stride == 1 && padding == 0 {
        x.reshape((b, cin, h * wd))?
    } else {
        let xp = if padding > 0 {
            x.pad_with_zeros(2, padding, padding)?.pad_with_zeros(3, padding, padding)?
        } else {
            x.clone()
        };
        let mut cols = Vec::with_capacity(kh * kw);
        for ky in 0..kh {
            let rows = strided(&xp, 2, ky, oh, stride)?;
            for kx in 0..kw {
                cols.push(strided(&rows, 3, kx, ow, stride)?);
            }
        }
        Tensor::stack(&cols, 2)?.reshape((b, cin * kh * kw, oh * ow))?
    };
    Ok(wm.broadcast_matmul(&col)?.reshape((b, cout, oh, ow))?)
}

/// Layer norm over the last dimension; `affine = false` gives a parameter-free norm.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    affine: Option<(Tensor, Tensor)>,
    eps: f64,
}

impl LayerNorm {
    pub fn new(s: &mut Scope, dim: usize) -> Result<Self> {
        Ok(Self {
            affine: Some((
                s.get("gamma", &[dim], Init::Const(1.0))?,
                s.get("beta", &[dim], Init::Zeros)?,
            )),
            eps: 1e-5,
        })
    }

    pub fn plain() -> Self {
        Self {
            affine: None,
            eps: 1e-5,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let y = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        match &self.affine {
            Some((g, b)) => Ok(y.broadcast_mul(g)?.broadcast_add(b)?),
            None => Ok(y),
        }
    }
}

pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

pub fn log_softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let shifted = x.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

/// Pre-activation residual block: x + conv(silu(conv(silu(x)))).
#[derive(Debug, Clone)]
pub struct ResBlock {
    conv1: Conv2d,
    conv2: Conv2d,
}

impl ResBlock {
    pub fn new(s: &mut Scope, channels: usize) -> Result<Self> {
        Ok(Self {
            conv1: Conv2d::new(&mut s.pp("conv1"), channels, channels, 3, 1, 1.0)?,
            conv2: Conv2d::new(&mut s.pp("conv2"), channels, channels, 3, 1, 0.5)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward(&x.silu()?)?;
        let h = self.conv2.forward(&h.silu()?)?;
        Ok((x + h)?)
    }
}

/// Multi-head attention from `dim`-wide queries to `kv_dim`-wide context tokens.
#[derive(Debug, Clone)]
pub struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    heads: usize,
    dim: usize,
}

impl Attention {
    pub fn new(s: &mut Scope, dim: usize, kv_dim: usize, heads: usize, out_gain: f64) -> Result<Self> {
        if !dim.is_multiple_of(heads) {
            return Err(shape_err(format!("width {dim} not divisible by {heads} heads")));
        }
        Ok(Self {
            q: Linear::new(&mut s.pp("q"), dim, dim)?,
            k: Linear::new(&mut s.pp("k"), kv_dim, dim)?,
            v: Linear::new(&mut s.pp("v"), kv_dim, dim)?,
            out: Linear::with_gain(&mut s.pp("out"), dim, dim, out_gain)?,
            heads,
            dim,
        })
    }

    fn split(&self, x: &Tensor) -> Result<Tensor> {
        let (b, l, _) = x.dims3()?;
        Ok(x
            .reshape((b, l, self.heads, self.dim / self.heads))?
            .transpose(1, 2)?
            .contiguous()?)
    }

    /// x: (B, Lq, dim), ctx: (B, Lk, kv_dim) -> (B, Lq, dim).
    pub fn forward(&self, x: &Tensor, ctx: &Tensor) -> Result<Tensor> {
        let (b, lq, _) = x.dims3()?;
        let q = self.split(&self.q.forward(x)?)?;
        let k = self.split(&self.k.forward(ctx)?)?;
        let v = self.split(&self.v.forward(ctx)?)?;
        let scale = 1.0 / ((self.dim / self.heads) as f64).sqrt();
        let scores = (q.matmul(&k.t()?.contiguous()?)? * scale)?;
        let attn = softmax_last(&scores)?;
        let y = attn
            .matmul(&v)?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b, lq, self.dim))?;
        self.out.forward(&y)
    }
}

#[derive(Debug, Clone)]
pub struct Mlp {
    fc1: Linear,
    fc2: Linear,
}

impl Mlp {
    pub fn new(s: &mut Scope, dim: usize, hidden: usize, out_gain: f64) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(&mut s.pp("fc1"), dim, hidden)?,
            fc2: Linear::with_gain(&mut s.pp("fc2"), hidden, dim, out_gain)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.fc2.forward(&self.fc1.forward(x)?.gelu()?)
    }
}

/// Pre-norm self-attention + MLP block. Both residual branches start at zero
/// when `out_gain` is 0.
#[derive(Debug, Clone)]
pub struct TransformerBlock {
    norm1: LayerNorm,
    attn: Attention,
    norm2: LayerNorm,
    mlp: Mlp,
}

impl TransformerBlock {
    pub fn new(s: &mut Scope, dim: usize, heads: usize, mlp_ratio: usize, out_gain: f64) -> Result<Self> {
        Ok(Self {
            norm1: LayerNorm::new(&mut s.pp("norm1"), dim)?,
            attn: Attention::new(&mut s.pp("attn"), dim, dim, heads, out_gain)?,
            norm2: LayerNorm::new(&mut s.pp("norm2"), dim)?,
            mlp: Mlp::new(&mut s.pp("mlp"), dim, mlp_ratio * dim, out_gain)?,
        })
    }

    /// x: (B, L, dim).
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let n = self.norm1.forward(x)?;
        let x = (x + self.attn.forward(&n, &n)?)?;
        Ok((&x + self.mlp.forward(&self.norm2.forward(&x)?)?)?)
    }
}

/// (B, C, H, W) -> (B, H*W, C), row-major positions.
pub fn to_tokens(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    Ok(x.reshape((b, c, h * w))?.transpose(1, 2)?.contiguous()?)
}

/// (B, H*W, C) -> (B, C, H, W).
pub fn from_tokens(x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (b, _, c) = x.dims3()?;
    Ok(x.transpose(1, 2)?.contiguous()?.reshape((b, c, h, w))?)
}

pub fn l1_loss(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    Ok((a - b)?.abs()?.mean_all()?)
}

pub fn mse_loss(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    Ok((a - b)?.sqr()?.mean_all()?)
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Standard-normal tensor drawn from a seeded RNG.
pub fn randn(rng: &mut impl Rng, shape: &[usize], dtype: DType, device: &Device) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Ok(Tensor::from_vec(v, shape, device)?.to_dtype(dtype)?)
}
