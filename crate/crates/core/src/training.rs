//! Four-pathway objective and the staged training loop.

use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::{Tensor, D};
use ndarray::{s, Array2};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, CheckpointMeta, TrainProgress};
use crate::diffusion::{gaussian, NoiseSchedule};
use crate::error::{Error, Result};
use crate::layout::Domain;
use crate::model::{stack_batch, Condition, CrossDiffModel, PaddingMask};
use crate::optim::{AdamW, AdamWConfig};
use crate::projection::View;
use crate::seed::{stream, Stream};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    #[serde(rename = "I")]
    One,
    #[serde(rename = "II")]
    Two,
    #[serde(rename = "finetune2d")]
    Finetune2d,
}

impl Stage {
    pub fn label(self) -> &'static str {
        match self {
            Stage::One => "I",
            Stage::Two => "II",
            Stage::Finetune2d => "finetune2d",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "I" | "1" | "one" => Some(Stage::One),
            "II" | "2" | "two" => Some(Stage::Two),
            "finetune2d" | "finetune2D" => Some(Stage::Finetune2d),
            _ => None,
        }
    }
}

/// Relative weights of the cross and 2D pathways; the 3D-to-3D term always
/// has weight one.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub w23: f64,
    pub w32: f64,
    pub w22: f64,
}

impl LossWeights {
    pub const STAGE_ONE: LossWeights = LossWeights {
        w23: 1.0,
        w32: 1.0,
        w22: 1.0,
    };
    pub const ZERO: LossWeights = LossWeights {
        w23: 0.0,
        w32: 0.0,
        w22: 0.0,
    };
    pub const FINETUNE: LossWeights = LossWeights {
        w23: 0.1,
        w32: 0.1,
        w22: 1.0,
    };

    pub fn validate(&self) -> Result<()> {
        for (name, w) in [("w23", self.w23), ("w32", self.w32), ("w22", self.w22)] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::Config(format!(
                    "loss weight {name} = {w} must be finite and >= 0"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    Constant,
    /// Cosine decay to a tenth of the base rate at the last step.
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub stage: Stage,
    pub weights: LossWeights,
    pub lr: f64,
    pub lr_schedule: LrSchedule,
    pub warmup_steps: usize,
    pub batch_size: usize,
    pub epochs: usize,
    /// Caps the optimizer steps below `epochs` worth of batches.
    pub max_steps: Option<usize>,
    /// Crop length; shorter sequences are padded and masked.
    pub frames: usize,
    pub cond_dropout: f64,
    pub views: Vec<View>,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub log_every: usize,
    /// Zero disables intermediate checkpoints.
    pub checkpoint_every: usize,
}

impl TrainConfig {
    /// Full-size stage I.
    pub fn stage_one() -> Self {
        Self {
            stage: Stage::One,
            weights: LossWeights::STAGE_ONE,
            lr: 1e-4,
            lr_schedule: LrSchedule::Constant,
            warmup_steps: 0,
            batch_size: 32,
            epochs: 4000,
            max_steps: None,
            frames: 196,
            cond_dropout: 0.1,
            views: View::default_set(),
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            log_every: 1,
            checkpoint_every: 0,
        }
    }

    pub fn stage_two() -> Self {
        Self {
            stage: Stage::Two,
            weights: LossWeights::ZERO,
            lr: 1e-5,
            epochs: 1000,
            ..Self::stage_one()
        }
    }

    pub fn finetune() -> Self {
        Self {
            stage: Stage::Finetune2d,
            weights: LossWeights::FINETUNE,
            lr: 1e-5,
            epochs: 1000,
            ..Self::stage_one()
        }
    }

    pub fn for_stage(stage: Stage) -> Self {
        match stage {
            Stage::One => Self::stage_one(),
            Stage::Two => Self::stage_two(),
            Stage::Finetune2d => Self::finetune(),
        }
    }

    /// Desk-scale variant of [`TrainConfig::for_stage`].
    pub fn desk(stage: Stage) -> Self {
        let base = Self::for_stage(stage);
        let lr = match stage {
            Stage::One => 1e-3,
            Stage::Two | Stage::Finetune2d => 1e-4,
        };
        Self {
            lr,
            lr_schedule: LrSchedule::Cosine,
            warmup_steps: 100,
            batch_size: 8,
            epochs: match stage {
                Stage::One => 3000,
                _ => 300,
            },
            frames: 40,
            log_every: 10,
            ..base
        }
    }

    /// Weights actually applied; stage II forces all three to zero.
    pub fn effective_weights(&self) -> LossWeights {
        match self.stage {
            Stage::Two => LossWeights::ZERO,
            _ => self.weights,
        }
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if self.batch_size == 0 || self.frames == 0 {
            return Err(Error::Config("batch_size and frames must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.cond_dropout) {
            return Err(Error::Config(format!(
                "condition dropout {} outside [0, 1]",
                self.cond_dropout
            )));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        if self.views.is_empty() {
            return Err(Error::Config("view set is empty".into()));
        }
        Ok(())
    }

    pub fn total_steps(&self, dataset_len: usize) -> usize {
        let per_epoch = dataset_len.div_ceil(self.batch_size);
        let steps = per_epoch * self.epochs;
        self.max_steps.map_or(steps, |m| m.min(steps))
    }

    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        let warm = if self.warmup_steps > 0 && step < self.warmup_steps {
            (step + 1) as f64 / self.warmup_steps as f64
        } else {
            1.0
        };
        let decay = match self.lr_schedule {
            LrSchedule::Constant => 1.0,
            LrSchedule::Cosine => {
                let span = total.saturating_sub(self.warmup_steps).max(1) as f64;
                let p = (step.saturating_sub(self.warmup_steps) as f64 / span).min(1.0);
                0.1 + 0.9 * 0.5 * (1.0 + (std::f64::consts::PI * p).cos())
            }
        };
        self.lr * warm * decay
    }
}

/// One training sequence in normalized feature units.
#[derive(Clone, Debug)]
pub struct TrainItem {
    pub id: String,
    /// Ground-truth or pseudo-label 3D features.
    pub motion_3d: Option<Array2<f64>>,
    /// Paired 2D features; one entry per available view.
    pub motion_2d: Vec<Array2<f64>>,
    /// View of each `motion_2d` entry; empty when unknown, which admits
    /// every entry regardless of the configured view set.
    pub views: Vec<View>,
    /// Embeddings of the sequence's captions.
    pub texts: Vec<Vec<f64>>,
}

/// Noised batch shared by all pathways of one step.
#[derive(Clone, Debug)]
pub struct PreparedBatch {
    pub clean_3d: Tensor,
    pub clean_2d: Tensor,
    pub noised_3d: Tensor,
    pub noised_2d: Tensor,
    pub cond: Condition,
    pub mask: Option<PaddingMask>,
}

fn crop(x: &Array2<f64>, offset: usize, frames: usize) -> Array2<f64> {
    let mut out = Array2::zeros((frames, x.ncols()));
    let n = (x.nrows() - offset).min(frames);
    out.slice_mut(s![..n, ..]).assign(&x.slice(s![offset..offset + n, ..]));
    out
}

/// Draws per sample, in order: view, caption, crop offset, step `t`,
/// dropout flag, 3D noise, 2D noise.
pub fn prepare_batch<R: Rng + ?Sized>(
    model: &CrossDiffModel,
    schedule: &NoiseSchedule,
    items: &[&TrainItem],
    config: &TrainConfig,
    rng: &mut R,
) -> Result<PreparedBatch> {
    let frames = config.frames;
    let (d3, d2) = (model.dim(Domain::ThreeD), model.dim(Domain::TwoD));
    let mut c3 = Vec::new();
    let mut c2 = Vec::new();
    let mut n3 = Vec::new();
    let mut n2 = Vec::new();
    let mut text = Vec::new();
    let mut steps = Vec::new();
    let mut null = Vec::new();
    let mut lengths = Vec::new();
    for item in items {
        let m3 = item
            .motion_3d
            .as_ref()
            .ok_or_else(|| Error::Data(format!("sequence {} has no 3D target", item.id)))?;
        if item.motion_2d.is_empty() {
            return Err(Error::Data(format!("sequence {} has no 2D features", item.id)));
        }
        if m3.ncols() != d3 || item.motion_2d.iter().any(|m| m.ncols() != d2) {
            return Err(Error::Validation(format!(
                "sequence {} feature widths do not match the model",
                item.id
            )));
        }
        if item.texts.is_empty() {
            return Err(Error::Data(format!("sequence {} has no captions", item.id)));
        }
        let admitted: Vec<usize> = if item.views.is_empty() {
            (0..item.motion_2d.len()).collect()
        } else {
            (0..item.motion_2d.len())
                .filter(|&i| item.views.get(i).is_some_and(|v| config.views.contains(v)))
                .collect()
        };
        if admitted.is_empty() {
            return Err(Error::Data(format!(
                "sequence {} has no 2D view in the training view set",
                item.id
            )));
        }
        let view = admitted[rng.random_range(0..admitted.len())];
        let caption = rng.random_range(0..item.texts.len());
        let m2 = &item.motion_2d[view];
        if m2.nrows() != m3.nrows() {
            return Err(Error::Validation(format!(
                "sequence {}: 3D has {} frames, 2D has {}",
                item.id,
                m3.nrows(),
                m2.nrows()
            )));
        }
        let offset = if m3.nrows() > frames {
            rng.random_range(0..=m3.nrows() - frames)
        } else {
            0
        };
        let t = rng.random_range(1..=schedule.steps());
        let drop = rng.random::<f64>() < config.cond_dropout;
        let e3 = gaussian(rng, frames, d3);
        let e2 = gaussian(rng, frames, d2);
        let x3 = crop(m3, offset, frames);
        let x2 = crop(m2, offset, frames);
        n3.push(schedule.q_sample(x3.view(), t, e3.view())?);
        n2.push(schedule.q_sample(x2.view(), t, e2.view())?);
        c3.push(x3);
        c2.push(x2);
        lengths.push((m3.nrows() - offset).min(frames));
        text.push(item.texts[caption].clone());
        steps.push(t);
        null.push(drop);
    }
    let dtype = model.dtype();
    let mask = if lengths.iter().all(|&l| l == frames) {
        None
    } else {
        Some(PaddingMask::new(&lengths, frames, dtype)?)
    };
    Ok(PreparedBatch {
        clean_3d: stack_batch(&c3, dtype)?,
        clean_2d: stack_batch(&c2, dtype)?,
        noised_3d: stack_batch(&n3, dtype)?,
        noised_2d: stack_batch(&n2, dtype)?,
        cond: Condition::new(text, steps, null)?,
        mask,
    })
}

/// Mean over valid frames of the per-frame squared error norm.
pub fn pathway_loss(prediction: &Tensor, target: &Tensor, mask: Option<&PaddingMask>) -> Result<Tensor> {
    if prediction.dims() != target.dims() {
        return Err(Error::Validation(format!(
            "prediction shape {:?} differs from target {:?}",
            prediction.dims(),
            target.dims()
        )));
    }
    let per_frame = prediction.sub(target)?.sqr()?.sum(D::Minus1)?;
    match mask {
        None => Ok(per_frame.mean_all()?),
        Some(m) => {
            let (b, n) = per_frame.dims2()?;
            let mut w = vec![0.0f64; b * n];
            for (i, &len) in m.lengths().iter().enumerate() {
                w[i * n..i * n + len].fill(1.0);
            }
            let count: f64 = w.iter().sum();
            let w = Tensor::from_vec(w, (b, n), per_frame.device())?.to_dtype(per_frame.dtype())?;
            Ok((per_frame.mul(&w)?.sum_all()? / count)?)
        }
    }
}

/// Per-pathway losses of one step; `None` for pathways with zero weight,
/// which are not evaluated.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub l33: f64,
    pub l23: Option<f64>,
    pub l32: Option<f64>,
    pub l22: Option<f64>,
}

/// Weighted objective `L33 + w23 L23 + w32 L32 + w22 L22` as a graph.
pub fn objective(
    model: &CrossDiffModel,
    batch: &PreparedBatch,
    weights: LossWeights,
) -> Result<(Tensor, LossBreakdown)> {
    let z = model.embed_condition(&batch.cond)?;
    let mask = batch.mask.as_ref();
    let mut from_3d = vec![Domain::ThreeD];
    if weights.w32 > 0.0 {
        from_3d.push(Domain::TwoD);
    }
    let p3 = model.predict(&batch.noised_3d, &z, Domain::ThreeD, &from_3d, mask)?;
    let l33 = pathway_loss(&p3[0], &batch.clean_3d, mask)?;
    let mut total = l33.clone();
    let scalar = |t: &Tensor| -> Result<f64> { Ok(t.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?) };
    let mut breakdown = LossBreakdown {
        total: 0.0,
        l33: scalar(&l33)?,
        l23: None,
        l32: None,
        l22: None,
    };
    if weights.w32 > 0.0 {
        let l = pathway_loss(&p3[1], &batch.clean_2d, mask)?;
        breakdown.l32 = Some(scalar(&l)?);
        total = (total + (l * weights.w32)?)?;
    }
    let mut from_2d = Vec::new();
    if weights.w23 > 0.0 {
        from_2d.push(Domain::ThreeD);
    }
    if weights.w22 > 0.0 {
        from_2d.push(Domain::TwoD);
    }
    if !from_2d.is_empty() {
        let p2 = model.predict(&batch.noised_2d, &z, Domain::TwoD, &from_2d, mask)?;
        for (pred, target) in p2.iter().zip(&from_2d) {
            match target {
                Domain::ThreeD => {
                    let l = pathway_loss(pred, &batch.clean_3d, mask)?;
                    breakdown.l23 = Some(scalar(&l)?);
                    total = (total + (l * weights.w23)?)?;
                }
                Domain::TwoD => {
                    let l = pathway_loss(pred, &batch.clean_2d, mask)?;
                    breakdown.l22 = Some(scalar(&l)?);
                    total = (total + (l * weights.w22)?)?;
                }
            }
        }
    }
    breakdown.total = scalar(&total)?;
    Ok((total, breakdown))
}

/// Forward, backward and one optimizer update with the stage's weights.
pub fn train_step<R: Rng + ?Sized>(
    model: &CrossDiffModel,
    optimizer: &mut AdamW,
    schedule: &NoiseSchedule,
    items: &[&TrainItem],
    config: &TrainConfig,
    rng: &mut R,
) -> Result<(LossBreakdown, Vec<usize>)> {
    if config.stage == Stage::Finetune2d && !model.is_root_decoupled() {
        return Err(Error::Config("2D fine-tuning requires root-decoupled heads".into()));
    }
    let batch = prepare_batch(model, schedule, items, config, rng)?;
    let (loss, breakdown) = objective(model, &batch, config.effective_weights())?;
    let steps = batch.cond.steps.clone();
    if !breakdown.total.is_finite() {
        return Err(Error::Diverged {
            step: optimizer.step_count() as usize,
            batch: 0,
            timesteps: steps,
            message: format!("non-finite loss {:?}", breakdown),
        });
    }
    let grads = loss.backward()?;
    optimizer.step(model.params(), &grads)?;
    Ok((breakdown, steps))
}

fn require_stage(config: &TrainConfig, stage: Stage) -> Result<()> {
    if config.stage != stage {
        return Err(Error::Config(format!(
            "{} step called with a stage {} config",
            stage.label(),
            config.stage.label()
        )));
    }
    Ok(())
}

pub fn stage1_step<R: Rng + ?Sized>(
    model: &CrossDiffModel,
    optimizer: &mut AdamW,
    schedule: &NoiseSchedule,
    items: &[&TrainItem],
    config: &TrainConfig,
    rng: &mut R,
) -> Result<LossBreakdown> {
    require_stage(config, Stage::One)?;
    Ok(train_step(model, optimizer, schedule, items, config, rng)?.0)
}

pub fn stage2_step<R: Rng + ?Sized>(
    model: &CrossDiffModel,
    optimizer: &mut AdamW,
    schedule: &NoiseSchedule,
    items: &[&TrainItem],
    config: &TrainConfig,
    rng: &mut R,
) -> Result<LossBreakdown> {
    require_stage(config, Stage::Two)?;
    Ok(train_step(model, optimizer, schedule, items, config, rng)?.0)
}

pub fn finetune2d_step<R: Rng + ?Sized>(
    model: &CrossDiffModel,
    optimizer: &mut AdamW,
    schedule: &NoiseSchedule,
    items: &[&TrainItem],
    config: &TrainConfig,
    rng: &mut R,
) -> Result<LossBreakdown> {
    require_stage(config, Stage::Finetune2d)?;
    Ok(train_step(model, optimizer, schedule, items, config, rng)?.0)
}

/// Indices of the batch taken at `step`: epoch-wise shuffles from the
/// `Shuffle` stream, consecutive chunks within an epoch.
pub fn batch_indices(config: &TrainConfig, dataset_len: usize, step: usize) -> Vec<usize> {
    let per_epoch = dataset_len.div_ceil(config.batch_size);
    let epoch = step / per_epoch;
    let within = step % per_epoch;
    let mut order: Vec<usize> = (0..dataset_len).collect();
    order.shuffle(&mut stream(config.seed, Stream::Shuffle, epoch as u64));
    let start = within * config.batch_size;
    order[start..(start + config.batch_size).min(dataset_len)].to_vec()
}

/// One line of the training log.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LogRecord {
    pub stage: Stage,
    pub step: usize,
    pub lr: f64,
    pub loss: LossBreakdown,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub final_checkpoint: PathBuf,
    pub checkpoints: Vec<PathBuf>,
    pub log: PathBuf,
    /// Loss of every step run in this invocation.
    pub losses: Vec<LossBreakdown>,
}

/// Everything a run needs besides the data.
pub struct TrainSession {
    pub model: CrossDiffModel,
    pub optimizer: AdamW,
    pub schedule: NoiseSchedule,
    pub meta: CheckpointMeta,
    pub config: TrainConfig,
    /// Steps already completed in this stage.
    pub start_step: usize,
}

impl TrainSession {
    /// Starts a stage from `model`, or continues a checkpoint of the same
    /// stage when `resume` carries matching progress.
    pub fn new(
        model: CrossDiffModel,
        schedule: NoiseSchedule,
        meta: CheckpointMeta,
        config: TrainConfig,
        resume: Option<&Checkpoint>,
    ) -> Result<Self> {
        config.validate()?;
        if schedule.steps() != model.config().diffusion_steps {
            return Err(Error::Config(format!(
                "schedule has {} steps, model embeds {}",
                schedule.steps(),
                model.config().diffusion_steps
            )));
        }
        let mut optimizer = AdamW::new(config.optimizer());
        let mut start_step = 0;
        if let Some(ckpt) = resume {
            if let Some(p) = &ckpt.meta.progress {
                if p.stage == config.stage {
                    ckpt.restore_optimizer(&model, &mut optimizer)?;
                    start_step = p.step;
                }
            }
        }
        Ok(Self {
            model,
            optimizer,
            schedule,
            meta,
            config,
            start_step,
        })
    }

    fn snapshot(&mut self, step: usize) -> Result<Checkpoint> {
        self.meta.progress = Some(TrainProgress {
            stage: self.config.stage,
            step,
            config: self.config.clone(),
        });
        if self.config.stage == Stage::One && step > 0 {
            self.meta.stage_one_trained = true;
        }
        Checkpoint::capture(self.meta.clone(), &self.model, Some(&self.optimizer))
    }

    /// Runs the remaining steps, logging to `out_dir/train_log.jsonl` and
    /// writing checkpoints into `out_dir`.
    pub fn run(&mut self, data: &[TrainItem], out_dir: &Path) -> Result<TrainOutcome> {
        if data.is_empty() {
            return Err(Error::Data("training set is empty".into()));
        }
        std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
        let log_path = out_dir.join("train_log.jsonl");
        let mut log = std::fs::OpenOptions::new()
            .create(true)
            .append(self.start_step > 0)
            .write(true)
            .truncate(self.start_step == 0)
            .open(&log_path)
            .map_err(|e| Error::io(&log_path, e))?;
        let total = self.config.total_steps(data.len());
        let mut losses = Vec::new();
        let mut checkpoints = Vec::new();
        for step in self.start_step..total {
            let lr = self.config.lr_at(step, total);
            self.optimizer.set_lr(lr);
            let idx = batch_indices(&self.config, data.len(), step);
            let items: Vec<&TrainItem> = idx.iter().map(|&i| &data[i]).collect();
            let mut rng = stream(self.config.seed, Stream::Batch, step as u64);
            let (loss, _) = train_step(
                &self.model,
                &mut self.optimizer,
                &self.schedule,
                &items,
                &self.config,
                &mut rng,
            )
            .map_err(|e| match e {
                Error::Diverged { timesteps, message, .. } => Error::Diverged {
                    step,
                    batch: step % data.len().div_ceil(self.config.batch_size),
                    timesteps,
                    message,
                },
                other => other,
            })?;
            let done = step + 1;
            if self.config.log_every > 0 && (done % self.config.log_every == 0 || done == total) {
                let record = LogRecord {
                    stage: self.config.stage,
                    step: done,
                    lr,
                    loss: loss.clone(),
                };
                writeln!(log, "{}", serde_json::to_string(&record)?).map_err(|e| Error::io(&log_path, e))?;
                log::info!(
                    "stage {} step {done}/{total} loss {:.5}",
                    self.config.stage.label(),
                    loss.total
                );
            }
            losses.push(loss);
            if self.config.checkpoint_every > 0 && done % self.config.checkpoint_every == 0 && done < total {
                let path = out_dir.join(format!("step-{done:06}.xdck"));
                self.snapshot(done)?.save(&path)?;
                checkpoints.push(path);
            }
        }
        let final_path = out_dir.join("final.xdck");
        self.snapshot(total.max(self.start_step))?.save(&final_path)?;
        checkpoints.push(final_path.clone());
        Ok(TrainOutcome {
            final_checkpoint: final_path,
            checkpoints,
            log: log_path,
            losses,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::ScheduleKind;
    use crate::features::FeatureStats;
    use crate::layout::FeatureLayout;
    use crate::model::ModelConfig;
    use crate::text::EmbedderSpec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (CrossDiffModel, NoiseSchedule, Vec<TrainItem>) {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let model = CrossDiffModel::new(ModelConfig::micro(21, 6), &mut rng).unwrap();
        let schedule = NoiseSchedule::new(10, ScheduleKind::Cosine).unwrap();
        let items = (0..3)
            .map(|i| TrainItem {
                id: format!("s{i}"),
                motion_3d: Some(gaussian(&mut rng, 5, 260)),
                motion_2d: (0..2).map(|_| gaussian(&mut rng, 5, 132)).collect(),
                views: vec![],
                texts: vec![vec![i as f64 * 0.1; 6]],
            })
            .collect();
        (model, schedule, items)
    }

    fn config(stage: Stage) -> TrainConfig {
        TrainConfig {
            batch_size: 2,
            frames: 4,
            lr: 1e-3,
            epochs: 2,
            ..TrainConfig::for_stage(stage)
        }
    }

    fn meta(model: &CrossDiffModel, schedule: &NoiseSchedule) -> CheckpointMeta {
        let stats = |d| {
            let layout = FeatureLayout::new(d, 21);
            FeatureStats {
                layout,
                mean: vec![0.0; layout.dim()],
                std: vec![1.0; layout.dim()],
            }
        };
        CheckpointMeta {
            model: model.config().clone(),
            schedule: schedule.spec(),
            stats_3d: stats(Domain::ThreeD),
            stats_2d: stats(Domain::TwoD),
            skeleton_hash: String::new(),
            embedder: EmbedderSpec::Hash { dim: 6, seed: 0 },
            stage_one_trained: false,
            progress: None,
        }
    }

    #[test]
    fn view_set_restricts_the_paired_2d_entry() {
        let (model, schedule, mut items) = setup();
        for item in &mut items {
            item.views = vec![View::FRONT, View::LEFT];
            item.motion_2d[1].fill(7.0);
        }
        let refs: Vec<&TrainItem> = items.iter().collect();
        let mut cfg = config(Stage::One);
        cfg.views = vec![View::LEFT];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..5 {
            let b = prepare_batch(&model, &schedule, &refs, &cfg, &mut rng).unwrap();
            let clean: Vec<f64> = b.clean_2d.flatten_all().unwrap().to_vec1().unwrap();
            assert!(clean.iter().all(|&v| v == 7.0));
        }
        cfg.views = vec![View::BACK];
        assert!(prepare_batch(&model, &schedule, &refs, &cfg, &mut rng).is_err());
    }

    #[test]
    fn zero_prediction_loss_is_mean_squared_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = gaussian(&mut rng, 6, 5);
        let expected: f64 = x.rows().into_iter().map(|r| r.dot(&r)).sum::<f64>() / 6.0;
        let t = stack_batch(&[x], candle_core::DType::F64).unwrap();
        let got = pathway_loss(&t.zeros_like().unwrap(), &t, None)
            .unwrap()
            .to_scalar::<f64>()
            .unwrap();
        assert!((got - expected).abs() < 1e-12);
        assert_eq!(pathway_loss(&t, &t, None).unwrap().to_scalar::<f64>().unwrap(), 0.0);
    }

    #[test]
    fn masked_loss_ignores_padding() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = gaussian(&mut rng, 4, 3);
        let mut b = a.clone();
        b.row_mut(3).fill(100.0);
        b[[0, 0]] += 1.0;
        let dt = candle_core::DType::F64;
        let mask = PaddingMask::new(&[3], 4, dt).unwrap();
        let l = pathway_loss(
            &stack_batch(&[a], dt).unwrap(),
            &stack_batch(&[b], dt).unwrap(),
            Some(&mask),
        )
        .unwrap()
        .to_scalar::<f64>()
        .unwrap();
        assert!((l - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn total_is_weighted_sum_of_pathways() {
        let (model, schedule, items) = setup();
        let refs: Vec<&TrainItem> = items.iter().collect();
        let cfg = config(Stage::One);
        let batch = prepare_batch(&model, &schedule, &refs, &cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let w = LossWeights {
            w23: 0.3,
            w32: 0.7,
            w22: 1.9,
        };
        let (_, b) = objective(&model, &batch, w).unwrap();
        let sum = b.l33 + w.w23 * b.l23.unwrap() + w.w32 * b.l32.unwrap() + w.w22 * b.l22.unwrap();
        assert!((b.total - sum).abs() < 1e-12 * sum.abs().max(1.0));
    }

    #[test]
    fn stage_two_matches_stage_one_with_zero_weights() {
        let (model_a, schedule, items) = setup();
        let model_b = {
            let (m, _, _) = setup();
            m
        };
        let refs: Vec<&TrainItem> = items.iter().collect();
        let cfg_two = config(Stage::Two);
        let cfg_one = TrainConfig {
            weights: LossWeights::ZERO,
            ..config(Stage::One)
        };
        let mut opt_a = AdamW::new(cfg_two.optimizer());
        let mut opt_b = AdamW::new(cfg_two.optimizer());
        for step in 0..3 {
            let la = stage2_step(
                &model_a,
                &mut opt_a,
                &schedule,
                &refs,
                &cfg_two,
                &mut stream(0, Stream::Batch, step),
            )
            .unwrap();
            let lb = stage1_step(
                &model_b,
                &mut opt_b,
                &schedule,
                &refs,
                &cfg_one,
                &mut stream(0, Stream::Batch, step),
            )
            .unwrap();
            assert_eq!(la, lb);
        }
        assert_eq!(model_a.params().export().unwrap(), model_b.params().export().unwrap());
    }

    #[test]
    fn stage_two_leaves_2d_only_parameters_without_gradient() {
        let (model, schedule, items) = setup();
        let refs: Vec<&TrainItem> = items.iter().collect();
        let cfg = config(Stage::Two);
        let batch = prepare_batch(&model, &schedule, &refs, &cfg, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let (loss, b) = objective(&model, &batch, cfg.effective_weights()).unwrap();
        assert_eq!(b.total, b.l33);
        let grads = loss.backward().unwrap();
        let norm = |name: &str| -> f64 {
            let v = model.params().get(name).unwrap();
            grads
                .get(v.as_tensor())
                .map_or(0.0, |g| g.abs().unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap())
        };
        for (name, _) in model.params().iter() {
            let two_d_only = name.starts_with("head.d2")
                || name.starts_with("decoder.d2")
                || name.starts_with("tokens.d2")
                || name.starts_with("encoder.d2")
                || name.starts_with("input.d2");
            if two_d_only {
                assert_eq!(norm(name), 0.0, "{name}");
            }
        }
        assert!(norm("shared.0.attn.query.weight") > 0.0);
    }

    #[test]
    fn finetune_requires_root_heads_and_pseudo_labels() {
        let (model, schedule, mut items) = setup();
        let cfg = config(Stage::Finetune2d);
        assert_eq!(
            cfg.weights,
            LossWeights {
                w23: 0.1,
                w32: 0.1,
                w22: 1.0
            }
        );
        let refs: Vec<&TrainItem> = items.iter().collect();
        let mut opt = AdamW::new(cfg.optimizer());
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        assert!(matches!(
            finetune2d_step(&model, &mut opt, &schedule, &refs, &cfg, &mut rng),
            Err(Error::Config(_))
        ));
        let mut model = model;
        model.enable_root_decoupled(&mut rng).unwrap();
        items[0].motion_3d = None;
        let refs: Vec<&TrainItem> = items.iter().collect();
        assert!(matches!(
            finetune2d_step(&model, &mut opt, &schedule, &refs, &cfg, &mut rng),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn resume_reproduces_uninterrupted_run() {
        let dir = tempfile::tempdir().unwrap();
        let (model, schedule, items) = setup();
        let cfg = TrainConfig {
            epochs: 3,
            checkpoint_every: 2,
            ..config(Stage::One)
        };
        let m = meta(&model, &schedule);
        let mut full = TrainSession::new(model, schedule.clone(), m.clone(), cfg.clone(), None).unwrap();
        let out = full.run(&items, &dir.path().join("full")).unwrap();
        assert_eq!(out.losses.len(), 6);

        let mid = Checkpoint::load(&dir.path().join("full/step-000002.xdck")).unwrap();
        let model = mid.model().unwrap();
        let mut resumed = TrainSession::new(model, schedule, mid.meta.clone(), cfg, Some(&mid)).unwrap();
        assert_eq!(resumed.start_step, 2);
        let out2 = resumed.run(&items, &dir.path().join("resumed")).unwrap();
        assert_eq!(out2.losses.len(), 4);
        assert_eq!(out2.losses[..], out.losses[2..]);
        let a = std::fs::read(dir.path().join("full/final.xdck")).unwrap();
        let b = std::fs::read(dir.path().join("resumed/final.xdck")).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn batches_cover_each_epoch() {
        let cfg = TrainConfig {
            batch_size: 3,
            ..config(Stage::One)
        };
        let mut seen: Vec<usize> = (0..3).flat_map(|s| batch_indices(&cfg, 8, s)).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..8).collect::<Vec<_>>());
    }
}
