//! Ancestral sampling: plain 3D denoising and mixture sampling, which runs
//! the early steps in 2D and switches to 3D at step `alpha`.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::diffusion::{gaussian, NoiseSchedule};
use crate::error::{Error, Result};
use crate::features::{FeatureStats, MotionFeatures};
use crate::layout::Domain;
use crate::model::{cfg_combine, stack_batch, unstack_batch, Condition, CrossDiffModel};
use crate::seed::{stream, Stream};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplingMode {
    Standard,
    Mixture,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplingPlan {
    pub mode: SamplingMode,
    /// Number of final steps run in 3D (mixture only).
    pub alpha: usize,
    pub scale: f64,
    /// Apply guidance during the 2D phase as well.
    pub guide_2d: bool,
    pub seed: u64,
    pub frames: usize,
    /// Optional symmetric clamp on every clean prediction.
    pub clamp: Option<f64>,
}

impl SamplingPlan {
    pub fn standard(frames: usize, seed: u64) -> Self {
        Self {
            mode: SamplingMode::Standard,
            alpha: 0,
            scale: 2.5,
            guide_2d: true,
            seed,
            frames,
            clamp: None,
        }
    }

    pub fn mixture(frames: usize, alpha: usize, seed: u64) -> Self {
        Self {
            mode: SamplingMode::Mixture,
            alpha,
            ..Self::standard(frames, seed)
        }
    }

    pub fn validate(&self, schedule: &NoiseSchedule) -> Result<()> {
        if self.mode == SamplingMode::Mixture && self.alpha > schedule.steps() {
            return Err(Error::Config(format!(
                "switch step alpha = {} outside [0, {}]",
                self.alpha,
                schedule.steps()
            )));
        }
        if self.frames == 0 {
            return Err(Error::Config("sampling needs at least one frame".into()));
        }
        if !self.scale.is_finite() {
            return Err(Error::Config("guidance scale must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StepKind {
    /// A guided denoising step at diffusion step `t`.
    Predict,
    /// The unguided `t = 0` lift that ends an `alpha = 0` mixture run.
    Lift,
}

/// One denoiser call of a trajectory.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: usize,
    pub kind: StepKind,
    pub source: Domain,
    pub target: Domain,
    pub input_width: usize,
    pub output_width: usize,
}

#[derive(Clone, Debug)]
pub struct SampleResult {
    /// Normalized 3D features.
    pub normalized: Array2<f64>,
    pub features: MotionFeatures,
    pub trace: Vec<StepRecord>,
}

impl SampleResult {
    pub fn prediction_steps(&self) -> usize {
        self.trace.iter().filter(|r| r.kind == StepKind::Predict).count()
    }
}

struct Batch<'a> {
    model: &'a CrossDiffModel,
    texts: &'a [Vec<f64>],
    plan: &'a SamplingPlan,
    trace: Vec<StepRecord>,
}

impl Batch<'_> {
    /// Clean predictions for every trajectory; guided unless `unguided`.
    fn predict(
        &mut self,
        x: &[Array2<f64>],
        t: usize,
        source: Domain,
        target: Domain,
        guided: bool,
        kind: StepKind,
    ) -> Result<Vec<Array2<f64>>> {
        let b = x.len();
        let dtype = self.model.dtype();
        let text_dim = self.model.config().text_dim;
        let scale = if guided { self.plan.scale } else { 1.0 };
        let both = scale != 1.0;
        let (inputs, cond) = if !guided && kind == StepKind::Lift {
            (x.to_vec(), Condition::unconditional(b, text_dim, t))
        } else if both {
            let mut inputs = x.to_vec();
            inputs.extend_from_slice(x);
            let mut text = self.texts.to_vec();
            text.extend(std::iter::repeat_n(vec![0.0; text_dim], b));
            let null = (0..2 * b).map(|i| i >= b).collect();
            (inputs, Condition::new(text, vec![t; 2 * b], null)?)
        } else {
            (
                x.to_vec(),
                Condition::new(self.texts.to_vec(), vec![t; b], vec![false; b])?,
            )
        };
        let xt = stack_batch(&inputs, dtype)?;
        let out = self.model.denoise(&xt, &cond, source, target, None)?;
        let out = if both {
            cfg_combine(&out.narrow(0, 0, b)?, &out.narrow(0, b, b)?, scale)?
        } else {
            out
        };
        let mut preds = unstack_batch(&out)?;
        if let Some(c) = self.plan.clamp {
            for p in &mut preds {
                p.mapv_inplace(|v| v.clamp(-c, c));
            }
        }
        if preds.iter().any(|p| p.iter().any(|v| !v.is_finite())) {
            return Err(Error::Sampling {
                step: t,
                message: format!("non-finite {source}->{target} prediction"),
            });
        }
        self.trace.push(StepRecord {
            t,
            kind,
            source,
            target,
            input_width: self.model.dim(source),
            output_width: self.model.dim(target),
        });
        Ok(preds)
    }
}

/// Samples one trajectory per text embedding. Trajectory `i` takes its
/// noise from stream `first_index + i` of the plan seed, so results do not
/// depend on how prompts are grouped into batches.
pub fn sample_batch(
    model: &CrossDiffModel,
    schedule: &NoiseSchedule,
    stats_3d: &FeatureStats,
    texts: &[Vec<f64>],
    plan: &SamplingPlan,
    first_index: u64,
) -> Result<Vec<SampleResult>> {
    plan.validate(schedule)?;
    if texts.is_empty() {
        return Ok(Vec::new());
    }
    if schedule.steps() != model.config().diffusion_steps {
        return Err(Error::Config(format!(
            "schedule has {} steps, model embeds {}",
            schedule.steps(),
            model.config().diffusion_steps
        )));
    }
    let mut rngs: Vec<_> = (0..texts.len())
        .map(|i| stream(plan.seed, Stream::Trajectory, first_index + i as u64))
        .collect();
    let n = plan.frames;
    let big_t = schedule.steps();
    let mut batch = Batch {
        model,
        texts,
        plan,
        trace: Vec::new(),
    };
    let step_all = |x: &[Array2<f64>], x0: &[Array2<f64>], t: usize, rngs: &mut [rand_chacha::ChaCha8Rng]| {
        x.iter()
            .zip(x0)
            .zip(rngs.iter_mut())
            .map(|((xt, p), rng)| schedule.posterior_step(xt.view(), p.view(), t, rng))
            .collect::<Result<Vec<_>>>()
    };

    let x0_3d: Vec<Array2<f64>> = match plan.mode {
        SamplingMode::Standard => {
            let mut x: Vec<_> = rngs
                .iter_mut()
                .map(|r| gaussian(r, n, model.dim(Domain::ThreeD)))
                .collect();
            for t in (1..=big_t).rev() {
                let x0 = batch.predict(&x, t, Domain::ThreeD, Domain::ThreeD, true, StepKind::Predict)?;
                x = step_all(&x, &x0, t, &mut rngs)?;
            }
            x
        }
        SamplingMode::Mixture => {
            let alpha = plan.alpha;
            let mut x2: Vec<_> = rngs
                .iter_mut()
                .map(|r| gaussian(r, n, model.dim(Domain::TwoD)))
                .collect();
            for t in (alpha + 1..=big_t).rev() {
                let x0 = batch.predict(&x2, t, Domain::TwoD, Domain::TwoD, plan.guide_2d, StepKind::Predict)?;
                x2 = step_all(&x2, &x0, t, &mut rngs)?;
            }
            if alpha == 0 {
                batch.predict(&x2, 0, Domain::TwoD, Domain::ThreeD, false, StepKind::Lift)?
            } else {
                let lifted = batch.predict(&x2, alpha, Domain::TwoD, Domain::ThreeD, true, StepKind::Predict)?;
                let mut x3 = lifted
                    .iter()
                    .zip(rngs.iter_mut())
                    .map(|(p, rng)| {
                        let e = gaussian(rng, n, model.dim(Domain::ThreeD));
                        schedule.q_sample(p.view(), alpha - 1, e.view())
                    })
                    .collect::<Result<Vec<_>>>()?;
                for t in (1..alpha).rev() {
                    let x0 = batch.predict(&x3, t, Domain::ThreeD, Domain::ThreeD, true, StepKind::Predict)?;
                    x3 = step_all(&x3, &x0, t, &mut rngs)?;
                }
                x3
            }
        }
    };
    let trace = batch.trace;
    x0_3d
        .into_iter()
        .map(|normalized| {
            let layout = stats_3d.layout;
            let features = stats_3d.denormalize(&MotionFeatures::new(layout, normalized.clone())?)?;
            Ok(SampleResult {
                normalized,
                features,
                trace: trace.clone(),
            })
        })
        .collect()
}

pub fn sample_standard(
    model: &CrossDiffModel,
    schedule: &NoiseSchedule,
    stats_3d: &FeatureStats,
    text: &[f64],
    plan: &SamplingPlan,
) -> Result<SampleResult> {
    if plan.mode != SamplingMode::Standard {
        return Err(Error::Config("sample_standard needs a standard plan".into()));
    }
    Ok(sample_batch(model, schedule, stats_3d, &[text.to_vec()], plan, 0)?.remove(0))
}

pub fn sample_mixture(
    model: &CrossDiffModel,
    schedule: &NoiseSchedule,
    stats_3d: &FeatureStats,
    text: &[f64],
    plan: &SamplingPlan,
) -> Result<SampleResult> {
    if plan.mode != SamplingMode::Mixture {
        return Err(Error::Config("sample_mixture needs a mixture plan".into()));
    }
    Ok(sample_batch(model, schedule, stats_3d, &[text.to_vec()], plan, 0)?.remove(0))
}
