//! The cross-domain denoiser.
//!
//! Either domain is encoded by its own encoder, then by a shared encoder
//! whose every layer output is kept. Each target decoder's layer `i`
//! cross-attends to shared level `i`, so all four pathways
//! `G(source -> target)` share one feature space.

use candle_core::{DType, Device, Tensor, Var, D};
use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layout::{Domain, FeatureLayout};
use crate::nn::{key_padding_mask, sinusoidal_table, DecoderLayer, EncoderLayer, Init, Linear, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> DType {
        match self {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub heads: usize,
    pub ff_dim: usize,
    /// Layers of each domain encoder.
    pub encoder_layers: usize,
    /// Layers of the shared encoder and of each decoder.
    pub shared_layers: usize,
    pub root_encoder_layers: usize,
    pub root_decoder_layers: usize,
    /// Capacity of the learnable query tokens and positional table.
    pub max_frames: usize,
    pub text_dim: usize,
    pub non_root_joints: usize,
    /// Largest diffusion step the step embedding accepts.
    pub diffusion_steps: usize,
    pub precision: Precision,
    #[serde(default)]
    pub root_decoupled: bool,
}

impl ModelConfig {
    /// Full-size transformer.
    pub fn full(non_root_joints: usize, text_dim: usize) -> Self {
        Self {
            d_model: 512,
            heads: 8,
            ff_dim: 1024,
            encoder_layers: 2,
            shared_layers: 6,
            root_encoder_layers: 2,
            root_decoder_layers: 2,
            max_frames: 196,
            text_dim,
            non_root_joints,
            diffusion_steps: 1000,
            precision: Precision::F32,
            root_decoupled: false,
        }
    }

    /// Small model for the desk dataset.
    pub fn desk(non_root_joints: usize, text_dim: usize) -> Self {
        Self {
            d_model: 64,
            heads: 4,
            ff_dim: 128,
            encoder_layers: 1,
            shared_layers: 2,
            root_encoder_layers: 2,
            root_decoder_layers: 2,
            max_frames: 64,
            text_dim,
            non_root_joints,
            diffusion_steps: 100,
            precision: Precision::F32,
            root_decoupled: false,
        }
    }

    /// Tiny 64-bit model for gradient checks.
    pub fn micro(non_root_joints: usize, text_dim: usize) -> Self {
        Self {
            d_model: 8,
            heads: 2,
            ff_dim: 16,
            encoder_layers: 1,
            shared_layers: 1,
            root_encoder_layers: 1,
            root_decoder_layers: 1,
            max_frames: 8,
            text_dim,
            non_root_joints,
            diffusion_steps: 10,
            precision: Precision::F64,
            root_decoupled: false,
        }
    }

    pub fn layout(&self, domain: Domain) -> FeatureLayout {
        FeatureLayout::new(domain, self.non_root_joints)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of heads {}",
                self.d_model, self.heads
            )));
        }
        if self.shared_layers == 0 || self.encoder_layers == 0 {
            return Err(Error::Config("encoder and shared layer counts must be positive".into()));
        }
        if self.root_decoder_layers > self.shared_layers {
            return Err(Error::Config(format!(
                "root decoder needs {} decoder outputs but decoders have {} layers",
                self.root_decoder_layers, self.shared_layers
            )));
        }
        if self.root_encoder_layers == 0 || self.root_decoder_layers == 0 {
            return Err(Error::Config("root head layer counts must be positive".into()));
        }
        if self.max_frames == 0 || self.text_dim == 0 {
            return Err(Error::Config("max_frames and text_dim must be positive".into()));
        }
        Ok(())
    }
}

/// Batched denoiser condition.
#[derive(Clone, Debug)]
pub struct Condition {
    /// One text embedding per sample.
    pub text: Vec<Vec<f64>>,
    pub steps: Vec<usize>,
    /// Samples that use the learned null embedding.
    pub null: Vec<bool>,
}

impl Condition {
    pub fn new(text: Vec<Vec<f64>>, steps: Vec<usize>, null: Vec<bool>) -> Result<Self> {
        if text.len() != steps.len() || text.len() != null.len() {
            return Err(Error::Validation(format!(
                "condition batch sizes differ: {} texts, {} steps, {} flags",
                text.len(),
                steps.len(),
                null.len()
            )));
        }
        Ok(Self { text, steps, null })
    }

    /// Null condition at a single step for `batch` samples of width `text_dim`.
    pub fn unconditional(batch: usize, text_dim: usize, step: usize) -> Self {
        Self {
            text: vec![vec![0.0; text_dim]; batch],
            steps: vec![step; batch],
            null: vec![true; batch],
        }
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

/// Additive padding masks for a batch of variable-length sequences.
#[derive(Clone, Debug)]
pub struct PaddingMask {
    lengths: Vec<usize>,
    encoder: Tensor,
    decoder: Tensor,
}

impl PaddingMask {
    pub fn new(lengths: &[usize], frames: usize, dtype: DType) -> Result<Self> {
        if lengths.iter().any(|&l| l == 0 || l > frames) {
            return Err(Error::Validation(format!(
                "sequence lengths {lengths:?} must lie in [1, {frames}]"
            )));
        }
        let with_token: Vec<usize> = lengths.iter().map(|l| l + 1).collect();
        Ok(Self {
            lengths: lengths.to_vec(),
            encoder: key_padding_mask(&with_token, frames + 1, dtype, &Device::Cpu)?,
            decoder: key_padding_mask(lengths, frames, dtype, &Device::Cpu)?,
        })
    }

    pub fn lengths(&self) -> &[usize] {
        &self.lengths
    }
}

/// Output of [`CrossDiffModel::cross_decode`].
#[derive(Clone, Debug)]
pub struct Decoded {
    /// Per decoder layer outputs, each `(B, N, d_model)`.
    pub hidden: Vec<Tensor>,
    /// Clean-motion prediction `(B, N, d_target)`.
    pub output: Tensor,
}

#[derive(Clone, Debug)]
struct RootHeads {
    input: [Linear; 2],
    encoder: Vec<EncoderLayer>,
    decoders: [Vec<DecoderLayer>; 2],
    output: [Linear; 2],
}

#[derive(Clone, Debug)]
pub struct CrossDiffModel {
    config: ModelConfig,
    store: ParamStore,
    input: [Linear; 2],
    text_proj: Linear,
    null_text: Var,
    step_hidden: Linear,
    step_out: Linear,
    encoders: [Vec<EncoderLayer>; 2],
    shared: Vec<EncoderLayer>,
    tokens: [Var; 2],
    decoders: [Vec<DecoderLayer>; 2],
    heads: [Linear; 2],
    root: Option<RootHeads>,
    positions: Tensor,
    step_table: Vec<f64>,
}

fn encoder_stack<R: Rng + ?Sized>(
    store: &mut ParamStore,
    name: &str,
    count: usize,
    c: &ModelConfig,
    rng: &mut R,
) -> Result<Vec<EncoderLayer>> {
    (0..count)
        .map(|i| EncoderLayer::new(store, &format!("{name}.{i}"), c.d_model, c.heads, c.ff_dim, rng))
        .collect()
}

fn decoder_stack<R: Rng + ?Sized>(
    store: &mut ParamStore,
    name: &str,
    count: usize,
    c: &ModelConfig,
    rng: &mut R,
) -> Result<Vec<DecoderLayer>> {
    (0..count)
        .map(|i| DecoderLayer::new(store, &format!("{name}.{i}"), c.d_model, c.heads, c.ff_dim, rng))
        .collect()
}

impl CrossDiffModel {
    /// Builds the model with parameters drawn from `rng` in a fixed order.
    /// Root heads are created when `config.root_decoupled` is set.
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let mut store = ParamStore::new(c.precision.dtype());
        let s = &mut store;
        let dim = |d: Domain| c.layout(d).dim();

        let input = [
            Linear::new(s, "input.d3", dim(Domain::ThreeD), c.d_model, rng)?,
            Linear::new(s, "input.d2", dim(Domain::TwoD), c.d_model, rng)?,
        ];
        let text_proj = Linear::new(s, "cond.text", c.text_dim, c.d_model, rng)?;
        let null_text = s.create(
            "cond.null",
            &[1, c.text_dim],
            Init::Normal {
                std: 1.0 / (c.text_dim as f64).sqrt(),
            },
            rng,
        )?;
        let step_hidden = Linear::new(s, "cond.step.hidden", c.d_model, c.d_model, rng)?;
        let step_out = Linear::new(s, "cond.step.out", c.d_model, c.d_model, rng)?;
        let encoders = [
            encoder_stack(s, "encoder.d3", c.encoder_layers, c, rng)?,
            encoder_stack(s, "encoder.d2", c.encoder_layers, c, rng)?,
        ];
        let shared = encoder_stack(s, "shared", c.shared_layers, c, rng)?;
        let token_init = Init::Normal { std: 0.02 };
        let tokens = [
            s.create("tokens.d3", &[c.max_frames, c.d_model], token_init, rng)?,
            s.create("tokens.d2", &[c.max_frames, c.d_model], token_init, rng)?,
        ];
        let decoders = [
            decoder_stack(s, "decoder.d3", c.shared_layers, c, rng)?,
            decoder_stack(s, "decoder.d2", c.shared_layers, c, rng)?,
        ];
        let heads = [
            Linear::new(s, "head.d3", c.d_model, dim(Domain::ThreeD), rng)?,
            Linear::new(s, "head.d2", c.d_model, dim(Domain::TwoD), rng)?,
        ];
        let positions = Tensor::from_vec(
            sinusoidal_table(c.max_frames + 1, c.d_model),
            (c.max_frames + 1, c.d_model),
            &Device::Cpu,
        )?
        .to_dtype(c.precision.dtype())?;
        let step_table = sinusoidal_table(c.diffusion_steps + 1, c.d_model);

        let mut model = Self {
            config: config.clone(),
            store,
            input,
            text_proj,
            null_text,
            step_hidden,
            step_out,
            encoders,
            shared,
            tokens,
            decoders,
            heads,
            root: None,
            positions,
            step_table,
        };
        if config.root_decoupled {
            model.config.root_decoupled = false;
            model.enable_root_decoupled(rng)?;
        }
        Ok(model)
    }

    /// Adds the root encoder/decoder heads used for 2D fine-tuning.
    pub fn enable_root_decoupled<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<()> {
        if self.root.is_some() {
            return Err(Error::Config("root-decoupled heads already enabled".into()));
        }
        let c = self.config.clone();
        let s = &mut self.store;
        let input = [
            Linear::new(s, "root.input.d3", Domain::ThreeD.root_width(), c.d_model, rng)?,
            Linear::new(s, "root.input.d2", Domain::TwoD.root_width(), c.d_model, rng)?,
        ];
        let encoder = encoder_stack(s, "root.encoder", c.root_encoder_layers, &c, rng)?;
        let decoders = [
            decoder_stack(s, "root.decoder.d3", c.root_decoder_layers, &c, rng)?,
            decoder_stack(s, "root.decoder.d2", c.root_decoder_layers, &c, rng)?,
        ];
        let output = [
            Linear::new(s, "root.output.d3", c.d_model, Domain::ThreeD.root_width(), rng)?,
            Linear::new(s, "root.output.d2", c.d_model, Domain::TwoD.root_width(), rng)?,
        ];
        self.root = Some(RootHeads {
            input,
            encoder,
            decoders,
            output,
        });
        self.config.root_decoupled = true;
        Ok(())
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn dim(&self, domain: Domain) -> usize {
        self.config.layout(domain).dim()
    }

    pub fn is_root_decoupled(&self) -> bool {
        self.root.is_some()
    }

    /// Condition tokens `(B, d_model)`: projected text (or the null vector)
    /// plus the embedded step.
    pub fn embed_condition(&self, cond: &Condition) -> Result<Tensor> {
        let c = &self.config;
        let b = cond.len();
        let mut text = Vec::with_capacity(b * c.text_dim);
        for (i, row) in cond.text.iter().enumerate() {
            if cond.null[i] {
                text.extend(std::iter::repeat_n(0.0, c.text_dim));
            } else if row.len() != c.text_dim {
                return Err(Error::Validation(format!(
                    "text embedding width {} != {}",
                    row.len(),
                    c.text_dim
                )));
            } else {
                text.extend_from_slice(row);
            }
        }
        let mut steps = Vec::with_capacity(b * c.d_model);
        for &t in &cond.steps {
            if t > c.diffusion_steps {
                return Err(Error::Step {
                    step: t,
                    min: 0,
                    max: c.diffusion_steps,
                });
            }
            steps.extend_from_slice(&self.step_table[t * c.d_model..(t + 1) * c.d_model]);
        }
        let null: Vec<f64> = cond.null.iter().map(|&n| if n { 1.0 } else { 0.0 }).collect();
        let dev = &Device::Cpu;
        let dtype = self.dtype();
        let text = Tensor::from_vec(text, (b, c.text_dim), dev)?.to_dtype(dtype)?;
        let null = Tensor::from_vec(null, (b, 1), dev)?.to_dtype(dtype)?;
        let steps = Tensor::from_vec(steps, (b, c.d_model), dev)?.to_dtype(dtype)?;
        let mixed = text.add(&null.broadcast_mul(self.null_text.as_tensor())?)?;
        let text_part = self.text_proj.forward(&mixed)?;
        let step_part = self.step_out.forward(&self.step_hidden.forward(&steps)?.silu()?)?;
        Ok((text_part + step_part)?)
    }

    fn check_input(&self, x: &Tensor, domain: Domain) -> Result<(usize, usize)> {
        let (b, n, d) = x.dims3()?;
        if d != self.dim(domain) {
            return Err(Error::Validation(format!(
                "input width {d} does not match {domain} feature width {}",
                self.dim(domain)
            )));
        }
        if n == 0 || n > self.config.max_frames {
            return Err(Error::Validation(format!(
                "sequence length {n} outside [1, {}]",
                self.config.max_frames
            )));
        }
        Ok((b, n))
    }

    /// Shared-encoder levels `z^1..z^L2`, each `(B, N + 1, d_model)` with the
    /// condition token in slot 0.
    pub fn encode_unified(
        &self,
        x_t: &Tensor,
        z_tk: &Tensor,
        domain: Domain,
        mask: Option<&PaddingMask>,
    ) -> Result<Vec<Tensor>> {
        let (_, n) = self.check_input(x_t, domain)?;
        let x = self.input[domain.index()].forward(x_t)?;
        let tokens =
            Tensor::cat(&[&z_tk.unsqueeze(1)?, &x], 1)?.broadcast_add(&self.positions.narrow(0, 0, n + 1)?)?;
        let m = mask.map(|m| &m.encoder);
        let mut h = tokens;
        for layer in &self.encoders[domain.index()] {
            h = layer.forward(&h, m)?;
        }
        let mut levels = Vec::with_capacity(self.shared.len());
        for layer in &self.shared {
            h = layer.forward(&h, m)?;
            levels.push(h.clone());
        }
        Ok(levels)
    }

    /// Decodes shared levels into `target`; decoder layer `i` attends to
    /// level `i`.
    pub fn cross_decode(&self, levels: &[Tensor], target: Domain, mask: Option<&PaddingMask>) -> Result<Decoded> {
        if levels.len() != self.config.shared_layers {
            return Err(Error::Validation(format!(
                "cross decoding needs {} feature levels, got {}",
                self.config.shared_layers,
                levels.len()
            )));
        }
        let (b, slots, _) = levels[0].dims3()?;
        let n = slots - 1;
        let queries = self.tokens[target.index()]
            .as_tensor()
            .narrow(0, 0, n)?
            .add(&self.positions.narrow(0, 1, n)?)?;
        let mut h = queries.unsqueeze(0)?.repeat((b, 1, 1))?;
        let (self_mask, memory_mask) = match mask {
            Some(m) => (Some(&m.decoder), Some(&m.encoder)),
            None => (None, None),
        };
        let mut hidden = Vec::with_capacity(levels.len());
        for (layer, level) in self.decoders[target.index()].iter().zip(levels) {
            h = layer.forward(&h, level, self_mask, memory_mask)?;
            hidden.push(h.clone());
        }
        let output = self.heads[target.index()].forward(&h)?;
        Ok(Decoded { hidden, output })
    }

    /// Root block prediction `(B, N, root_width(target))` from the noised
    /// source root block, attending to the last decoder layers' outputs.
    pub fn root_decoupled_forward(
        &self,
        hidden: &[Tensor],
        root_noised: &Tensor,
        z_tk: &Tensor,
        source: Domain,
        target: Domain,
        mask: Option<&PaddingMask>,
    ) -> Result<Tensor> {
        let heads = self
            .root
            .as_ref()
            .ok_or_else(|| Error::Config("root-decoupled forward called on a model without root heads".into()))?;
        let (_, n, w) = root_noised.dims3()?;
        if w != source.root_width() {
            return Err(Error::Validation(format!(
                "root block width {w} does not match {source} root width {}",
                source.root_width()
            )));
        }
        let l4 = self.config.root_decoder_layers;
        if hidden.len() < l4 {
            return Err(Error::Validation(format!(
                "root decoder needs {l4} decoder outputs, got {}",
                hidden.len()
            )));
        }
        let x = heads.input[source.index()].forward(root_noised)?;
        let tokens =
            Tensor::cat(&[&z_tk.unsqueeze(1)?, &x], 1)?.broadcast_add(&self.positions.narrow(0, 0, n + 1)?)?;
        let enc_mask = mask.map(|m| &m.encoder);
        let mut h = tokens;
        for layer in &heads.encoder {
            h = layer.forward(&h, enc_mask)?;
        }
        let mut q = h.narrow(1, 1, n)?;
        let dec_mask = mask.map(|m| &m.decoder);
        let memories = &hidden[hidden.len() - l4..];
        for (layer, memory) in heads.decoders[target.index()].iter().zip(memories) {
            q = layer.forward(&q, memory, dec_mask, dec_mask)?;
        }
        heads.output[target.index()].forward(&q)
    }

    /// Predictions for several targets from one encoding of `x_t`.
    pub fn predict(
        &self,
        x_t: &Tensor,
        z_tk: &Tensor,
        source: Domain,
        targets: &[Domain],
        mask: Option<&PaddingMask>,
    ) -> Result<Vec<Tensor>> {
        let levels = self.encode_unified(x_t, z_tk, source, mask)?;
        let mut out = Vec::with_capacity(targets.len());
        for &target in targets {
            let decoded = self.cross_decode(&levels, target, mask)?;
            if self.root.is_some() {
                let root_in = x_t.narrow(D::Minus1, 0, source.root_width())?;
                let root = self.root_decoupled_forward(&decoded.hidden, &root_in, z_tk, source, target, mask)?;
                let w = target.root_width();
                let rest = decoded.output.narrow(D::Minus1, w, self.dim(target) - w)?;
                out.push(Tensor::cat(&[&root, &rest], D::Minus1)?);
            } else {
                out.push(decoded.output);
            }
        }
        Ok(out)
    }

    /// `G(source -> target)(x_t, t, c)`.
    pub fn denoise(
        &self,
        x_t: &Tensor,
        cond: &Condition,
        source: Domain,
        target: Domain,
        mask: Option<&PaddingMask>,
    ) -> Result<Tensor> {
        let (b, _) = self.check_input(x_t, source)?;
        if cond.len() != b {
            return Err(Error::Validation(format!(
                "condition batch {} != input batch {b}",
                cond.len()
            )));
        }
        let z = self.embed_condition(cond)?;
        Ok(self.predict(x_t, &z, source, &[target], mask)?.remove(0))
    }

    /// Host-side convenience wrapper around [`CrossDiffModel::denoise`].
    pub fn denoise_arrays(
        &self,
        x_t: &[Array2<f64>],
        cond: &Condition,
        source: Domain,
        target: Domain,
    ) -> Result<Vec<Array2<f64>>> {
        let x = stack_batch(x_t, self.dtype())?;
        unstack_batch(&self.denoise(&x, cond, source, target, None)?)
    }
}

/// Classifier-free guidance `null + s (cond - null)`.
pub fn cfg_combine(pred_cond: &Tensor, pred_null: &Tensor, scale: f64) -> Result<Tensor> {
    if pred_cond.dims() != pred_null.dims() {
        return Err(Error::Validation(format!(
            "guidance branches differ in shape: {:?} vs {:?}",
            pred_cond.dims(),
            pred_null.dims()
        )));
    }
    if scale == 1.0 {
        return Ok(pred_cond.clone());
    }
    if scale == 0.0 {
        return Ok(pred_null.clone());
    }
    Ok(pred_null.add(&(pred_cond.sub(pred_null)? * scale)?)?)
}

/// Stacks equally shaped `(N, d)` arrays into a `(B, N, d)` tensor.
pub fn stack_batch(items: &[Array2<f64>], dtype: DType) -> Result<Tensor> {
    let first = items.first().ok_or_else(|| Error::Validation("empty batch".into()))?;
    let (n, d) = first.dim();
    let mut data = Vec::with_capacity(items.len() * n * d);
    for item in items {
        if item.dim() != (n, d) {
            return Err(Error::Validation(format!(
                "batch items differ in shape: {:?} vs {:?}",
                item.dim(),
                (n, d)
            )));
        }
        data.extend(item.iter().copied());
    }
    Ok(Tensor::from_vec(data, (items.len(), n, d), &Device::Cpu)?.to_dtype(dtype)?)
}

pub fn unstack_batch(t: &Tensor) -> Result<Vec<Array2<f64>>> {
    let (b, n, d) = t.dims3()?;
    let data = t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    Ok(data
        .chunks(n * d)
        .take(b)
        .map(|c| Array2::from_shape_vec((n, d), c.to_vec()).expect("chunk size"))
        .collect())
}
