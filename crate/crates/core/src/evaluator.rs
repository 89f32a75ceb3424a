//! Contrastive motion/text embedders used by the metrics.
//!
//! The motion encoder is a per-frame MLP followed by masked mean pooling and
//! a projection; the text encoder is a two-layer MLP over text embeddings.
//! Both outputs are unit-normalized and trained with a symmetric InfoNCE
//! loss in which every pair sharing a caption counts as a positive. Part
//! evaluators see only the feature dimensions of the upper or lower body.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor, D};
use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dataset::{PreparedDataset, Split};
use crate::error::{Error, Result};
use crate::features::{FeatureStats, MotionFeatures};
use crate::layout::FeatureLayout;
use crate::metrics;
use crate::nn::{Linear, ParamStore};
use crate::optim::{AdamW, AdamWConfig};
use crate::seed::{stream, Stream};
use crate::skeleton::Skeleton;
use crate::text::TextEmbedder;
use crate::training::TrainItem;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BodyPart {
    Full,
    Upper,
    Lower,
}

impl BodyPart {
    pub const ALL: [BodyPart; 3] = [BodyPart::Full, BodyPart::Upper, BodyPart::Lower];

    /// Feature dimensions the part evaluator reads. The root block belongs
    /// to neither part; contacts go with the lower body.
    pub fn dims(self, layout: FeatureLayout, skeleton: &Skeleton) -> Vec<usize> {
        let slots =
            |joints: &[usize]| -> Vec<usize> { joints.iter().filter_map(|&j| skeleton.feature_slot(j)).collect() };
        match self {
            BodyPart::Full => (0..layout.dim()).collect(),
            BodyPart::Upper => layout.joint_dims(&slots(&skeleton.upper_body_indices)),
            BodyPart::Lower => {
                let mut d = layout.joint_dims(&slots(&skeleton.lower_body_indices));
                d.extend(layout.contacts());
                d
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluatorConfig {
    pub hidden: usize,
    pub embed: usize,
    pub temperature: f64,
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub log_every: usize,
    pub seed: u64,
}

impl Default for EvaluatorConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            embed: 32,
            temperature: 0.1,
            steps: 300,
            lr: 1e-3,
            batch_size: 32,
            log_every: 25,
            seed: 0,
        }
    }
}

struct Net {
    frame_in: Linear,
    frame_mid: Linear,
    motion_out: Linear,
    text_in: Linear,
    text_out: Linear,
}

/// One trained embedder pair.
pub struct Evaluator {
    pub part: BodyPart,
    pub config: EvaluatorConfig,
    pub dims: Vec<usize>,
    pub stats: FeatureStats,
    pub text_dim: usize,
    /// Mean mismatched minus mean matched distance on the validation split.
    pub gate_margin: f64,
    /// `(step, mm_dist)` on the validation split during training.
    pub curve: Vec<(usize, f64)>,
    params: ParamStore,
    net: Net,
}

fn build(config: &EvaluatorConfig, input: usize, text_dim: usize, index: u64) -> Result<(ParamStore, Net)> {
    let mut rng = stream(config.seed, Stream::Init, index);
    let mut store = ParamStore::new(DType::F64);
    let h = config.hidden;
    let net = Net {
        frame_in: Linear::new(&mut store, "motion.frame_in", input, h, &mut rng)?,
        frame_mid: Linear::new(&mut store, "motion.frame_mid", h, h, &mut rng)?,
        motion_out: Linear::new(&mut store, "motion.out", h, config.embed, &mut rng)?,
        text_in: Linear::new(&mut store, "text.in", text_dim, h, &mut rng)?,
        text_out: Linear::new(&mut store, "text.out", h, config.embed, &mut rng)?,
    };
    Ok((store, net))
}

fn unit_rows(x: &Tensor) -> Result<Tensor> {
    let norm = (x.sqr()?.sum_keepdim(D::Minus1)? + 1e-12)?.sqrt()?;
    Ok(x.broadcast_div(&norm)?)
}

fn log_softmax(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let shifted = x.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

/// Pads selected, normalized columns to a `(B, N, d)` tensor with pooling
/// weights `1 / len` on valid frames.
fn motion_batch(seqs: &[&Array2<f64>], dims: &[usize]) -> Result<(Tensor, Tensor)> {
    let n = seqs.iter().map(|s| s.nrows()).max().unwrap_or(0);
    if n == 0 {
        return Err(Error::Data("no motion frames to embed".into()));
    }
    let d = dims.len();
    let mut data = vec![0.0; seqs.len() * n * d];
    let mut weights = vec![0.0; seqs.len() * n];
    for (b, s) in seqs.iter().enumerate() {
        for k in 0..s.nrows() {
            for (c, &dim) in dims.iter().enumerate() {
                data[(b * n + k) * d + c] = s[[k, dim]];
            }
            weights[b * n + k] = 1.0 / s.nrows() as f64;
        }
    }
    Ok((
        Tensor::from_vec(data, (seqs.len(), n, d), &Device::Cpu)?,
        Tensor::from_vec(weights, (seqs.len(), n, 1), &Device::Cpu)?,
    ))
}

fn tensor_to_array(t: &Tensor) -> Result<Array2<f64>> {
    let (r, c) = t.dims2()?;
    Ok(Array2::from_shape_vec((r, c), t.flatten_all()?.to_vec1::<f64>()?).expect("shape from tensor"))
}

impl Net {
    fn motion(&self, x: &Tensor, w: &Tensor) -> Result<Tensor> {
        let h = self.frame_in.forward(x)?.relu()?;
        let h = self.frame_mid.forward(&h)?.relu()?;
        let pooled = h.broadcast_mul(w)?.sum(1)?;
        unit_rows(&self.motion_out.forward(&pooled)?)
    }

    fn text(&self, t: &Tensor) -> Result<Tensor> {
        unit_rows(&self.text_out.forward(&self.text_in.forward(t)?.relu()?)?)
    }
}

fn text_tensor(texts: &[&Vec<f64>], dim: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(texts.len() * dim);
    for t in texts {
        if t.len() != dim {
            return Err(Error::Validation(format!("text embedding width {} != {dim}", t.len())));
        }
        data.extend_from_slice(t);
    }
    Ok(Tensor::from_vec(data, (texts.len(), dim), &Device::Cpu)?)
}

/// A normalized motion with the caption it was paired with.
pub struct Pair<'a> {
    pub motion: &'a Array2<f64>,
    pub text: &'a Vec<f64>,
}

fn contrastive_loss(net: &Net, pairs: &[&Pair], dims: &[usize], text_dim: usize, temperature: f64) -> Result<Tensor> {
    let motions: Vec<&Array2<f64>> = pairs.iter().map(|p| p.motion).collect();
    let texts: Vec<&Vec<f64>> = pairs.iter().map(|p| p.text).collect();
    let (x, w) = motion_batch(&motions, dims)?;
    let m = net.motion(&x, &w)?;
    let t = net.text(&text_tensor(&texts, text_dim)?)?;
    let logits = (m.matmul(&t.t()?)? / temperature)?;
    let b = pairs.len();
    let mut targets = vec![0.0; b * b];
    for i in 0..b {
        let same: Vec<usize> = (0..b).filter(|&j| texts[j] == texts[i]).collect();
        for &j in &same {
            targets[i * b + j] = 1.0 / same.len() as f64;
        }
    }
    let y = Tensor::from_vec(targets, (b, b), &Device::Cpu)?;
    let rows = (log_softmax(&logits)? * &y)?.sum_all()?;
    let cols = (log_softmax(&logits.t()?)? * &y)?.sum_all()?;
    Ok(((rows + cols)? / (-2.0 * b as f64))?)
}

impl Evaluator {
    pub fn train(
        part: BodyPart,
        skeleton: &Skeleton,
        stats: &FeatureStats,
        train: &[Pair],
        validation: &[Pair],
        text_dim: usize,
        config: EvaluatorConfig,
    ) -> Result<Self> {
        if train.len() < 2 {
            return Err(Error::Data("evaluator training needs at least two pairs".into()));
        }
        let dims = part.dims(stats.layout, skeleton);
        let index = BodyPart::ALL.iter().position(|p| *p == part).expect("known part") as u64;
        let (params, net) = build(&config, dims.len(), text_dim, index)?;
        let mut opt = AdamW::new(AdamWConfig {
            lr: config.lr,
            weight_decay: 0.0,
            ..AdamWConfig::default()
        });
        let mut eval = Self {
            part,
            config,
            dims,
            stats: stats.clone(),
            text_dim,
            gate_margin: 0.0,
            curve: Vec::new(),
            params,
            net,
        };
        let mut order: Vec<usize> = (0..train.len()).collect();
        for step in 0..config.steps {
            if step % config.log_every.max(1) == 0 {
                eval.curve.push((step, eval.pair_mm_dist(validation)?));
            }
            let mut rng = stream(config.seed, Stream::Batch, (index << 32) | step as u64);
            order.shuffle(&mut rng);
            let batch: Vec<&Pair> = order
                .iter()
                .take(config.batch_size.max(2))
                .map(|&i| &train[i])
                .collect();
            let loss = contrastive_loss(&eval.net, &batch, &eval.dims, text_dim, config.temperature)?;
            let value = loss.to_scalar::<f64>()?;
            if !value.is_finite() {
                return Err(Error::Diverged {
                    step,
                    batch: 0,
                    timesteps: vec![],
                    message: "evaluator loss is not finite".into(),
                });
            }
            opt.step(&eval.params, &loss.backward()?)?;
        }
        eval.curve.push((config.steps, eval.pair_mm_dist(validation)?));
        eval.gate_margin = eval.margin(validation)?;
        if eval.gate_margin <= 0.0 {
            return Err(Error::Validation(format!(
                "{part:?} evaluator rejected: matched pairs are not closer than mismatched (margin {:.4})",
                eval.gate_margin
            )));
        }
        Ok(eval)
    }

    fn embed_normalized(&self, seqs: &[&Array2<f64>]) -> Result<Array2<f64>> {
        let (x, w) = motion_batch(seqs, &self.dims)?;
        tensor_to_array(&self.net.motion(&x, &w)?)
    }

    /// Embeds raw (denormalized) 3D features.
    pub fn embed_motions(&self, motions: &[&MotionFeatures]) -> Result<Array2<f64>> {
        let norm: Vec<Array2<f64>> = motions
            .iter()
            .map(|m| self.stats.normalize(m).map(|f| f.data))
            .collect::<Result<_>>()?;
        self.embed_normalized(&norm.iter().collect::<Vec<_>>())
    }

    pub fn embed_texts(&self, texts: &[&Vec<f64>]) -> Result<Array2<f64>> {
        tensor_to_array(&self.net.text(&text_tensor(texts, self.text_dim)?)?)
    }

    fn pair_embeddings(&self, pairs: &[Pair]) -> Result<(Array2<f64>, Array2<f64>)> {
        let m = self.embed_normalized(&pairs.iter().map(|p| p.motion).collect::<Vec<_>>())?;
        let t = self.embed_texts(&pairs.iter().map(|p| p.text).collect::<Vec<_>>())?;
        Ok((m, t))
    }

    fn pair_mm_dist(&self, pairs: &[Pair]) -> Result<f64> {
        let (m, t) = self.pair_embeddings(pairs)?;
        metrics::mm_dist(m.view(), t.view())
    }

    /// Mismatched pairs are those with different captions.
    fn margin(&self, pairs: &[Pair]) -> Result<f64> {
        let (m, t) = self.pair_embeddings(pairs)?;
        let dist = |i: usize, j: usize| {
            m.row(i)
                .iter()
                .zip(t.row(j).iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
        };
        let matched = metrics::mm_dist(m.view(), t.view())?;
        let (mut sum, mut count) = (0.0, 0usize);
        for i in 0..pairs.len() {
            for j in 0..pairs.len() {
                if pairs[i].text != pairs[j].text {
                    sum += dist(i, j);
                    count += 1;
                }
            }
        }
        if count == 0 {
            return Err(Error::Data(
                "validation split has a single caption; no mismatched pairs".into(),
            ));
        }
        Ok(sum / count as f64 - matched)
    }
}

/// Full-body and part evaluators sharing one text space width.
pub struct EvaluatorSet {
    pub evaluators: BTreeMap<String, Evaluator>,
}

fn part_key(part: BodyPart) -> String {
    serde_json::to_value(part)
        .expect("part serializes")
        .as_str()
        .expect("string")
        .to_string()
}

#[derive(Serialize, Deserialize)]
struct StoredEvaluator {
    part: BodyPart,
    config: EvaluatorConfig,
    dims: Vec<usize>,
    stats: FeatureStats,
    text_dim: usize,
    gate_margin: f64,
    curve: Vec<(usize, f64)>,
    params: BTreeMap<String, (Vec<usize>, Vec<f64>)>,
}

impl EvaluatorSet {
    pub fn get(&self, part: BodyPart) -> Result<&Evaluator> {
        self.evaluators
            .get(&part_key(part))
            .ok_or_else(|| Error::Config(format!("no {} evaluator available", part_key(part))))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut stored = Vec::new();
        for e in self.evaluators.values() {
            if e.gate_margin <= 0.0 {
                return Err(Error::Validation(format!(
                    "{:?} evaluator has margin {}",
                    e.part, e.gate_margin
                )));
            }
            stored.push(StoredEvaluator {
                part: e.part,
                config: e.config,
                dims: e.dims.clone(),
                stats: e.stats.clone(),
                text_dim: e.text_dim,
                gate_margin: e.gate_margin,
                curve: e.curve.clone(),
                params: e.params.export()?,
            });
        }
        let text = serde_json::to_string(&stored)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let stored: Vec<StoredEvaluator> =
            serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        let mut evaluators = BTreeMap::new();
        for s in stored {
            if s.gate_margin <= 0.0 {
                return Err(Error::format(path, format!("{:?} evaluator failed its gate", s.part)));
            }
            let index = BodyPart::ALL.iter().position(|p| *p == s.part).expect("known part") as u64;
            let (params, net) = build(&s.config, s.dims.len(), s.text_dim, index)?;
            params.import(&s.params)?;
            evaluators.insert(
                part_key(s.part),
                Evaluator {
                    part: s.part,
                    config: s.config,
                    dims: s.dims,
                    stats: s.stats,
                    text_dim: s.text_dim,
                    gate_margin: s.gate_margin,
                    curve: s.curve,
                    params,
                    net,
                },
            );
        }
        Ok(Self { evaluators })
    }
}

/// One pair per caption of every item.
fn pairs_of(items: &[TrainItem]) -> Result<Vec<Pair<'_>>> {
    let mut out = Vec::new();
    for it in items {
        let motion = it
            .motion_3d
            .as_ref()
            .ok_or_else(|| Error::Data(format!("{} has no 3D motion", it.id)))?;
        out.extend(it.texts.iter().map(|text| Pair { motion, text }));
    }
    Ok(out)
}

/// Trains full, upper and lower evaluators on the train split and gates
/// them on the test split.
pub fn train_desk_evaluator(
    dataset: &PreparedDataset,
    embedder: &dyn TextEmbedder,
    config: EvaluatorConfig,
) -> Result<EvaluatorSet> {
    let train = dataset.train_items(Split::Train, embedder)?;
    let test = dataset.train_items(Split::Test, embedder)?;
    let train_pairs = pairs_of(&train)?;
    let test_pairs = pairs_of(&test)?;
    let mut evaluators = BTreeMap::new();
    for part in BodyPart::ALL {
        let e = Evaluator::train(
            part,
            &dataset.skeleton,
            &dataset.stats_3d,
            &train_pairs,
            &test_pairs,
            embedder.dim(),
            config,
        )?;
        evaluators.insert(part_key(part), e);
    }
    Ok(EvaluatorSet { evaluators })
}

/// FID between part-restricted embeddings of two motion sets.
pub fn fid_split(
    set: &EvaluatorSet,
    generated: &[&MotionFeatures],
    reference: &[&MotionFeatures],
    part: BodyPart,
) -> Result<f64> {
    let e = set.get(part)?;
    let g = e.embed_motions(generated)?;
    let r = e.embed_motions(reference)?;
    metrics::fid(g.view(), r.view())
}

/// Row-wise mean of an embedding set.
pub fn centroid(x: &Array2<f64>) -> Vec<f64> {
    x.mean_axis(Axis(0)).map(|m| m.to_vec()).unwrap_or_default()
}
