//! Transformer building blocks on candle tensors.
//!
//! Parameters live in a [`ParamStore`] keyed by hierarchical names so they
//! can be checkpointed and reloaded bit-exactly. Initialization draws from a
//! caller-supplied ChaCha stream; candle's own RNG is never used.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Ones,
    /// Uniform with the Glorot bound for a `fan_in × fan_out` matrix.
    Xavier {
        fan_in: usize,
        fan_out: usize,
    },
    Normal {
        std: f64,
    },
}

/// Named trainable tensors.
#[derive(Clone, Debug)]
pub struct ParamStore {
    dtype: DType,
    device: Device,
    vars: BTreeMap<String, Var>,
}

impl ParamStore {
    pub fn new(dtype: DType) -> Self {
        Self {
            dtype,
            device: Device::Cpu,
            vars: BTreeMap::new(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn create<R: Rng + ?Sized>(&mut self, name: &str, shape: &[usize], init: Init, rng: &mut R) -> Result<Var> {
        if self.vars.contains_key(name) {
            return Err(Error::Config(format!("parameter {name} defined twice")));
        }
        let count: usize = shape.iter().product();
        let values: Vec<f64> = match init {
            Init::Zeros => vec![0.0; count],
            Init::Ones => vec![1.0; count],
            Init::Xavier { fan_in, fan_out } => {
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                (0..count).map(|_| rng.random_range(-bound..bound)).collect()
            }
            Init::Normal { std } => (0..count)
                .map(|_| std * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
                .collect(),
        };
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        self.vars.insert(name.to_string(), var.clone());
        Ok(var)
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn parameter_count(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Every parameter as f64 values with its shape.
    pub fn export(&self) -> Result<BTreeMap<String, (Vec<usize>, Vec<f64>)>> {
        let mut out = BTreeMap::new();
        for (name, var) in &self.vars {
            let shape = var.dims().to_vec();
            let values = var.as_tensor().to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
            out.insert(name.clone(), (shape, values));
        }
        Ok(out)
    }

    /// Overwrites parameters in place from exported values; names and shapes
    /// must match exactly.
    pub fn import(&self, values: &BTreeMap<String, (Vec<usize>, Vec<f64>)>) -> Result<()> {
        if values.len() != self.vars.len() {
            return Err(Error::Validation(format!(
                "checkpoint holds {} parameters, model has {}",
                values.len(),
                self.vars.len()
            )));
        }
        for (name, var) in &self.vars {
            let (shape, data) = values
                .get(name)
                .ok_or_else(|| Error::Validation(format!("checkpoint lacks parameter {name}")))?;
            if shape.as_slice() != var.dims() {
                return Err(Error::Validation(format!(
                    "parameter {name}: checkpoint shape {shape:?}, model shape {:?}",
                    var.dims()
                )));
            }
            let t = Tensor::from_vec(data.clone(), shape.as_slice(), &self.device)?.to_dtype(self.dtype)?;
            var.set(&t)?;
        }
        Ok(())
    }

    /// Independent copy with freshly allocated storage.
    pub fn deep_copy(&self) -> Result<Self> {
        let mut vars = BTreeMap::new();
        for (name, var) in &self.vars {
            vars.insert(name.clone(), Var::from_tensor(&var.as_tensor().copy()?)?);
        }
        Ok(Self {
            dtype: self.dtype,
            device: self.device.clone(),
            vars,
        })
    }
}

/// Affine map on the last axis; weight stored `in × out`.
#[derive(Clone, Debug)]
pub struct Linear {
    weight: Var,
    bias: Var,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = store.create(
            &format!("{name}.weight"),
            &[input, output],
            Init::Xavier {
                fan_in: input,
                fan_out: output,
            },
            rng,
        )?;
        let bias = store.create(&format!("{name}.bias"), &[output], Init::Zeros, rng)?;
        Ok(Self { weight, bias })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let input = *dims.last().expect("non-scalar input");
        let rows: usize = dims[..dims.len() - 1].iter().product();
        let y = x
            .reshape((rows, input))?
            .matmul(self.weight.as_tensor())?
            .broadcast_add(self.bias.as_tensor())?;
        let mut out_dims = dims;
        *out_dims.last_mut().unwrap() = self.weight.dims()[1];
        Ok(y.reshape(out_dims)?)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    gamma: Var,
    beta: Var,
}

const LN_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dim: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            gamma: store.create(&format!("{name}.gamma"), &[dim], Init::Ones, rng)?,
            beta: store.create(&format!("{name}.beta"), &[dim], Init::Zeros, rng)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + LN_EPS)?.sqrt()?)?;
        Ok(normed
            .broadcast_mul(self.gamma.as_tensor())?
            .broadcast_add(self.beta.as_tensor())?)
    }
}

/// Tanh-approximated GELU built from primitive ops so its gradient is exact.
pub fn gelu(x: &Tensor) -> Result<Tensor> {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    let inner = ((x.sqr()?.mul(x)? * 0.044715)? + x)?;
    let t = (inner * c)?.tanh()?;
    Ok(((t + 1.0)? * x)?.affine(0.5, 0.0)?)
}

/// Softmax over the last axis; the max shift is detached since softmax is
/// shift-invariant.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    let s = e.sum_keepdim(D::Minus1)?;
    Ok(e.broadcast_div(&s)?)
}

/// Additive key mask `(B, 1, 1, L)`: 0 for valid keys, a large negative
/// value for padding.
pub fn key_padding_mask(lengths: &[usize], total: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let b = lengths.len();
    let mut m = vec![0.0f64; b * total];
    for (i, &len) in lengths.iter().enumerate() {
        for v in &mut m[i * total + len.min(total)..(i + 1) * total] {
            *v = -1e9;
        }
    }
    Ok(Tensor::from_vec(m, (b, 1, 1, total), device)?.to_dtype(dtype)?)
}

#[derive(Clone, Debug)]
pub struct Attention {
    query: Linear,
    key_value: Linear,
    out: Linear,
    heads: usize,
    d_model: usize,
}

impl Attention {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d_model: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || d_model % heads != 0 {
            return Err(Error::Config(format!(
                "d_model {d_model} not divisible into {heads} heads"
            )));
        }
        Ok(Self {
            query: Linear::new(store, &format!("{name}.query"), d_model, d_model, rng)?,
            key_value: Linear::new(store, &format!("{name}.key_value"), d_model, 2 * d_model, rng)?,
            out: Linear::new(store, &format!("{name}.out"), d_model, d_model, rng)?,
            heads,
            d_model,
        })
    }

    fn split_heads(&self, x: &Tensor) -> Result<Tensor> {
        let (b, l, _) = x.dims3()?;
        Ok(x.reshape((b, l, self.heads, self.d_model / self.heads))?
            .transpose(1, 2)?
            .contiguous()?)
    }

    /// `query` (B, Lq, d) attends over `memory` (B, Lk, d).
    pub fn forward(&self, query: &Tensor, memory: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
        let (b, lq, _) = query.dims3()?;
        let q = self.split_heads(&self.query.forward(query)?)?;
        let kv = self.key_value.forward(memory)?;
        let k = self.split_heads(&kv.narrow(D::Minus1, 0, self.d_model)?)?;
        let v = self.split_heads(&kv.narrow(D::Minus1, self.d_model, self.d_model)?)?;
        let scale = 1.0 / ((self.d_model / self.heads) as f64).sqrt();
        let mut scores = (q.matmul(&k.t()?.contiguous()?)? * scale)?;
        if let Some(m) = mask {
            scores = scores.broadcast_add(m)?;
        }
        let weights = softmax_last(&scores)?;
        let ctx = weights
            .matmul(&v)?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b, lq, self.d_model))?;
        self.out.forward(&ctx)
    }
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    up: Linear,
    down: Linear,
}

impl FeedForward {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d_model: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            up: Linear::new(store, &format!("{name}.up"), d_model, hidden, rng)?,
            down: Linear::new(store, &format!("{name}.down"), hidden, d_model, rng)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.down.forward(&gelu(&self.up.forward(x)?)?)
    }
}

/// Post-norm transformer encoder layer.
#[derive(Clone, Debug)]
pub struct EncoderLayer {
    attn: Attention,
    norm1: LayerNorm,
    ff: FeedForward,
    norm2: LayerNorm,
}

impl EncoderLayer {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d_model: usize,
        heads: usize,
        ff_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            attn: Attention::new(store, &format!("{name}.attn"), d_model, heads, rng)?,
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), d_model, rng)?,
            ff: FeedForward::new(store, &format!("{name}.ff"), d_model, ff_dim, rng)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), d_model, rng)?,
        })
    }

    pub fn forward(&self, x: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
        let h = self.norm1.forward(&(x + self.attn.forward(x, x, mask)?)?)?;
        self.norm2.forward(&(&h + self.ff.forward(&h)?)?)
    }
}

/// Post-norm transformer decoder layer: self-attention, cross-attention
/// over `memory`, feed-forward.
#[derive(Clone, Debug)]
pub struct DecoderLayer {
    self_attn: Attention,
    norm1: LayerNorm,
    cross_attn: Attention,
    norm2: LayerNorm,
    ff: FeedForward,
    norm3: LayerNorm,
}

impl DecoderLayer {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d_model: usize,
        heads: usize,
        ff_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            self_attn: Attention::new(store, &format!("{name}.self_attn"), d_model, heads, rng)?,
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), d_model, rng)?,
            cross_attn: Attention::new(store, &format!("{name}.cross_attn"), d_model, heads, rng)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), d_model, rng)?,
            ff: FeedForward::new(store, &format!("{name}.ff"), d_model, ff_dim, rng)?,
            norm3: LayerNorm::new(store, &format!("{name}.norm3"), d_model, rng)?,
        })
    }

    pub fn forward(
        &self,
        x: &Tensor,
        memory: &Tensor,
        self_mask: Option<&Tensor>,
        memory_mask: Option<&Tensor>,
    ) -> Result<Tensor> {
        let h = self.norm1.forward(&(x + self.self_attn.forward(x, x, self_mask)?)?)?;
        let h = self
            .norm2
            .forward(&(&h + self.cross_attn.forward(&h, memory, memory_mask)?)?)?;
        self.norm3.forward(&(&h + self.ff.forward(&h)?)?)
    }
}

/// Fixed sinusoidal table, `rows × width`, computed in f64.
pub fn sinusoidal_table(rows: usize, width: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * width];
    for pos in 0..rows {
        for i in 0..width {
            let pair = (i / 2) as f64;
            let freq = (-(10000f64.ln()) * 2.0 * pair / width as f64).exp();
            let angle = pos as f64 * freq;
            out[pos * width + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    out
}
