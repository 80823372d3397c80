//! Shared neural building blocks on top of candle.

use candle_core::{DType, Device, Module, Shape, Tensor, Var, D};
use candle_nn::init::NormalOrUniform;
use candle_nn::var_builder::SimpleBackend;
use candle_nn::{Conv2d, Conv2dConfig, GroupNorm, Init, Linear, VarBuilder, VarMap};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Parameter storage whose initial values depend only on the seed and the
/// parameter name.
#[derive(Clone)]
pub struct ParamStore {
    pub varmap: VarMap,
    seed: u64,
    dtype: DType,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        Self::with_dtype(seed, DType::F32)
    }

    pub fn with_dtype(seed: u64, dtype: DType) -> Self {
        Self {
            varmap: VarMap::new(),
            seed,
            dtype,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn vb(&self) -> VarBuilder<'static> {
        VarBuilder::from_backend(Box::new(self.clone()), self.dtype, Device::Cpu)
    }

    /// Variables sorted by name.
    pub fn named_vars(&self) -> Vec<(String, Var)> {
        let data = self.varmap.data().lock().unwrap();
        let mut v: Vec<(String, Var)> = data.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        v.sort_by(|a, b| a.0.cmp(&b.0));
        v
    }

    pub fn vars(&self) -> Vec<Var> {
        self.named_vars().into_iter().map(|(_, v)| v).collect()
    }

    pub fn num_params(&self) -> usize {
        self.named_vars().iter().map(|(_, v)| v.elem_count()).sum()
    }

    fn rng_for(&self, name: &str) -> ChaCha8Rng {
        // FNV-1a keeps the seed stable across toolchains.
        let h = name
            .bytes()
            .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3));
        ChaCha8Rng::seed_from_u64(self.seed ^ h)
    }

    fn init(&self, shape: &Shape, name: &str, init: Init) -> candle_core::Result<Tensor> {
        let n = shape.elem_count();
        let mut rng = self.rng_for(name);
        let mut normal = |mean: f64, std: f64| -> Vec<f32> {
            (0..n)
                .map(|_| (mean + std * rng.sample::<f64, _>(StandardNormal)) as f32)
                .collect()
        };
        let data: Vec<f32> = match init {
            Init::Const(c) => vec![c as f32; n],
            Init::Randn { mean, stdev } => normal(mean, stdev),
            Init::Uniform { lo, up } => (0..n).map(|_| rng.random_range(lo..=up) as f32).collect(),
            Init::Kaiming {
                dist,
                fan,
                non_linearity,
            } => {
                let std = non_linearity.gain() / (fan.for_shape(shape) as f64).sqrt();
                match dist {
                    NormalOrUniform::Normal => normal(0.0, std),
                    NormalOrUniform::Uniform => {
                        let b = 3f64.sqrt() * std;
                        (0..n).map(|_| rng.random_range(-b..=b) as f32).collect()
                    }
                }
            }
        };
        Tensor::from_vec(data, shape.clone(), &Device::Cpu)
    }
}

impl SimpleBackend for ParamStore {
    fn get(&self, s: Shape, name: &str, h: Init, dtype: DType, dev: &Device) -> candle_core::Result<Tensor> {
        let mut data = self.varmap.data().lock().unwrap();
        if let Some(v) = data.get(name) {
            if v.shape() != &s {
                candle_core::bail!("parameter `{name}` has shape {:?}, requested {s:?}", v.shape());
            }
            return Ok(v.as_tensor().clone());
        }
        let t = self.init(&s, name, h)?.to_dtype(dtype)?.to_device(dev)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        data.insert(name.to_string(), var);
        Ok(out)
    }

    fn get_unchecked(&self, name: &str, _dtype: DType, _dev: &Device) -> candle_core::Result<Tensor> {
        let data = self.varmap.data().lock().unwrap();
        data.get(name)
            .map(|v| v.as_tensor().clone())
            .ok_or_else(|| candle_core::Error::Msg(format!("unknown parameter `{name}`")))
    }

    fn contains_tensor(&self, name: &str) -> bool {
        self.varmap.data().lock().unwrap().contains_key(name)
    }
}

/// Standard-normal tensor from a seeded generator.
pub fn randn(shape: impl Into<Shape>, rng: &mut ChaCha8Rng) -> candle_core::Result<Tensor> {
    let shape = shape.into();
    let data: Vec<f32> = (0..shape.elem_count()).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
    Tensor::from_vec(data, shape, &Device::Cpu)
}

/// Layer norm over the last dimension, built from differentiable primitives.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    weight: Option<Tensor>,
    bias: Option<Tensor>,
    eps: f64,
}

impl LayerNorm {
    pub fn new(dim: usize, vb: VarBuilder) -> candle_core::Result<Self> {
        Ok(Self {
            weight: Some(vb.get_with_hints(dim, "weight", Init::Const(1.0))?),
            bias: Some(vb.get_with_hints(dim, "bias", Init::Const(0.0))?),
            eps: 1e-6,
        })
    }

    /// Parameter-free variant used under adaptive modulation.
    pub fn plain() -> Self {
        Self {
            weight: None,
            bias: None,
            eps: 1e-6,
        }
    }
}

impl Module for LayerNorm {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let xc = x.broadcast_sub(&mean)?;
        let var = xc.sqr()?.mean_keepdim(D::Minus1)?;
        let mut y = xc.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        if let Some(w) = &self.weight {
            y = y.broadcast_mul(w)?;
        }
        if let Some(b) = &self.bias {
            y = y.broadcast_add(b)?;
        }
        Ok(y)
    }
}

/// Linear layer with zero weights and bias.
pub fn linear_zero(in_dim: usize, out_dim: usize, vb: VarBuilder) -> candle_core::Result<Linear> {
    let w = vb.get_with_hints((out_dim, in_dim), "weight", Init::Const(0.0))?;
    let b = vb.get_with_hints(out_dim, "bias", Init::Const(0.0))?;
    Ok(Linear::new(w, Some(b)))
}

/// Linear layer with normal weights of the given standard deviation and zero bias.
pub fn linear_std(in_dim: usize, out_dim: usize, std: f64, vb: VarBuilder) -> candle_core::Result<Linear> {
    let w = vb.get_with_hints((out_dim, in_dim), "weight", Init::Randn { mean: 0.0, stdev: std })?;
    let b = vb.get_with_hints(out_dim, "bias", Init::Const(0.0))?;
    Ok(Linear::new(w, Some(b)))
}

/// Xavier-style linear layer used throughout the transformers.
pub fn linear(in_dim: usize, out_dim: usize, vb: VarBuilder) -> candle_core::Result<Linear> {
    linear_std(in_dim, out_dim, (1.0 / in_dim as f64).sqrt(), vb)
}

/// Multi-head self-attention over `[B, N, D]`.
#[derive(Debug, Clone)]
pub struct Attention {
    qkv: Linear,
    proj: Linear,
    heads: usize,
}

impl Attention {
    pub fn new(dim: usize, heads: usize, zero_out: bool, vb: VarBuilder) -> candle_core::Result<Self> {
        if dim % heads != 0 {
            candle_core::bail!("width {dim} is not divisible by {heads} heads");
        }
        let proj = if zero_out {
            linear_zero(dim, dim, vb.pp("proj"))?
        } else {
            linear(dim, dim, vb.pp("proj"))?
        };
        Ok(Self {
            qkv: linear(dim, 3 * dim, vb.pp("qkv"))?,
            proj,
            heads,
        })
    }

    /// `bias` is added to the attention logits and must broadcast to `[B, H, N, N]`.
    pub fn forward(&self, x: &Tensor, bias: Option<&Tensor>) -> candle_core::Result<Tensor> {
        let (b, n, d) = x.dims3()?;
        let dh = d / self.heads;
        let qkv = self.qkv.forward(x)?.reshape((b, n, 3, self.heads, dh))?.permute((2, 0, 3, 1, 4))?;
        let q = qkv.get(0)?.contiguous()?;
        let k = qkv.get(1)?.contiguous()?;
        let v = qkv.get(2)?.contiguous()?;
        let mut logits = (q.matmul(&k.t()?.contiguous()?)? * (1.0 / (dh as f64).sqrt()))?;
        if let Some(bias) = bias {
            logits = logits.broadcast_add(bias)?;
        }
        let attn = candle_nn::ops::softmax(&logits, D::Minus1)?;
        let y = attn.matmul(&v)?.transpose(1, 2)?.reshape((b, n, d))?;
        self.proj.forward(&y)
    }
}

/// Two-layer GELU feed-forward.
#[derive(Debug, Clone)]
pub struct Mlp {
    fc1: Linear,
    fc2: Linear,
}

impl Mlp {
    pub fn new(dim: usize, hidden: usize, zero_out: bool, vb: VarBuilder) -> candle_core::Result<Self> {
        let fc2 = if zero_out {
            linear_zero(hidden, dim, vb.pp("fc2"))?
        } else {
            linear(hidden, dim, vb.pp("fc2"))?
        };
        Ok(Self {
            fc1: linear(dim, hidden, vb.pp("fc1"))?,
            fc2,
        })
    }
}

impl Module for Mlp {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        self.fc2.forward(&self.fc1.forward(x)?.gelu()?)
    }
}

/// Sinusoidal features `[n, dim]` of scalar inputs.
pub fn sinusoidal(values: &[f64], dim: usize, max_period: f64) -> candle_core::Result<Tensor> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(values.len() * dim);
    for &v in values {
        for i in 0..dim {
            let k = i % half.max(1);
            let freq = (-(max_period.ln()) * k as f64 / half.max(1) as f64).exp();
            let a = v * freq;
            data.push(if i < half { a.cos() } else { a.sin() } as f32);
        }
    }
    Tensor::from_vec(data, (values.len(), dim), &Device::Cpu)
}

pub fn conv3x3(cin: usize, cout: usize, stride: usize, vb: VarBuilder) -> candle_core::Result<Conv2d> {
    let cfg = Conv2dConfig {
        padding: 1,
        stride,
        ..Default::default()
    };
    candle_nn::conv2d(cin, cout, 3, cfg, vb)
}

fn groups_for(channels: usize) -> usize {
    [8, 4, 2, 1].into_iter().find(|g| channels % g == 0).unwrap_or(1)
}

/// Pre-activation residual block with group norm and SiLU.
#[derive(Debug, Clone)]
pub struct ResBlock {
    n1: GroupNorm,
    c1: Conv2d,
    n2: GroupNorm,
    c2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    pub fn new(cin: usize, cout: usize, vb: VarBuilder) -> candle_core::Result<Self> {
        let skip = if cin != cout {
            Some(candle_nn::conv2d(cin, cout, 1, Default::default(), vb.pp("skip"))?)
        } else {
            None
        };
        Ok(Self {
            n1: candle_nn::group_norm(groups_for(cin), cin, 1e-6, vb.pp("n1"))?,
            c1: conv3x3(cin, cout, 1, vb.pp("c1"))?,
            n2: candle_nn::group_norm(groups_for(cout), cout, 1e-6, vb.pp("n2"))?,
            c2: conv3x3(cout, cout, 1, vb.pp("c2"))?,
            skip,
        })
    }
}

impl Module for ResBlock {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let h = self.c1.forward(&candle_nn::ops::silu(&self.n1.forward(x)?)?)?;
        let h = self.c2.forward(&candle_nn::ops::silu(&self.n2.forward(&h)?)?)?;
        let s = match &self.skip {
            Some(c) => c.forward(x)?,
            None => x.clone(),
        };
        h + s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn params_are_seeded_by_name() {
        let a = ParamStore::new(3);
        let b = ParamStore::new(3);
        let _ = linear(4, 5, a.vb().pp("x")).unwrap();
        let _ = linear(2, 2, b.vb().pp("y")).unwrap();
        let _ = linear(4, 5, b.vb().pp("x")).unwrap();
        let wa: Vec<f32> = a.named_vars()[1].1.flatten_all().unwrap().to_vec1().unwrap();
        let wb: Vec<f32> = b.named_vars().iter().find(|(n, _)| n == "x.weight").unwrap().1.flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(wa, wb);
    }

    #[test]
    fn layer_norm_has_gradients() {
        let x = Var::from_vec(vec![1f32, 2.0, 4.0, -1.0, 0.5, 3.0], (2, 3), &Device::Cpu).unwrap();
        let y = LayerNorm::plain().forward(x.as_tensor()).unwrap();
        let row: Vec<f32> = y.get(0).unwrap().to_vec1().unwrap();
        assert!(row.iter().sum::<f32>().abs() < 1e-5);
        let w = Tensor::new(&[[1f32, -2.0, 0.5], [0.3, 0.2, 1.0]], &Device::Cpu).unwrap();
        let g = (y * w).unwrap().sum_all().unwrap().backward().unwrap();
        assert!(g.get(x.as_tensor()).is_some());
    }
}
