//! Generation-based evaluation: sample from a model for every reference
//! caption, embed with trained evaluators and reduce to an [`EvalReport`].

use std::collections::BTreeMap;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::dataset::{PreparedDataset, Split};
use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::evaluator::{fid_split, BodyPart, EvaluatorSet};
use crate::features::MotionFeatures;
use crate::metrics::{self, foot_skate_ratio, EvalReport, SkateThresholds, R_PRECISION_BATCH};
use crate::model::CrossDiffModel;
use crate::sampling::{sample_batch, SamplingMode, SamplingPlan};
use crate::seed::{stream, Stream};
use crate::text::TextEmbedder;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    pub split: Split,
    pub runs: usize,
    /// Generations per run; rounded up to a multiple of the retrieval batch.
    pub samples: usize,
    pub frames: usize,
    pub diversity_pairs: usize,
    pub mm_texts: usize,
    pub mm_repeats: usize,
    pub scale: f64,
    pub skate: SkateThresholds,
    pub seed: u64,
}

impl EvalSettings {
    pub fn desk() -> Self {
        Self {
            split: Split::Test,
            runs: 20,
            samples: 32,
            frames: 40,
            diversity_pairs: 16,
            mm_texts: 2,
            mm_repeats: 4,
            scale: 2.5,
            skate: SkateThresholds::default(),
            seed: 0,
        }
    }
}

/// How generations are drawn.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sampler {
    pub mode: SamplingMode,
    pub alpha: usize,
}

impl Sampler {
    pub const STANDARD: Sampler = Sampler {
        mode: SamplingMode::Standard,
        alpha: 0,
    };

    fn plan(&self, settings: &EvalSettings, seed: u64) -> SamplingPlan {
        let mut plan = match self.mode {
            SamplingMode::Standard => SamplingPlan::standard(settings.frames, seed),
            SamplingMode::Mixture => SamplingPlan::mixture(settings.frames, self.alpha, seed),
        };
        plan.scale = settings.scale;
        plan
    }
}

pub struct EvalContext<'a> {
    pub model: &'a CrossDiffModel,
    pub schedule: &'a NoiseSchedule,
    pub dataset: &'a PreparedDataset,
    pub embedder: &'a dyn TextEmbedder,
    pub evaluators: &'a EvaluatorSet,
}

/// Runs `settings.runs` independent generation rounds and averages them.
pub fn evaluate_model(ctx: &EvalContext, settings: &EvalSettings, sampler: Sampler) -> Result<EvalReport> {
    if settings.runs == 0 {
        return Err(Error::Config("evaluation needs at least one run".into()));
    }
    let ids = ctx.dataset.ids(settings.split);
    if ids.is_empty() {
        return Err(Error::Data("evaluation split is empty".into()));
    }
    let mut reference = Vec::new();
    let mut captions = Vec::new();
    for id in &ids {
        reference.push(ctx.dataset.features_3d(id)?);
        let entry = ctx.dataset.entry(id)?;
        let text = entry
            .texts
            .first()
            .ok_or_else(|| Error::Data(format!("{id} has no caption")))?;
        captions.push(text.clone());
    }
    let reference_refs: Vec<&MotionFeatures> = reference.iter().collect();
    let distinct: Vec<String> = captions
        .iter()
        .fold(Vec::<String>::new(), |mut acc, c| {
            if !acc.contains(c) {
                acc.push(c.clone());
            }
            acc
        })
        .into_iter()
        .take(settings.mm_texts.max(1))
        .collect();
    let mut embedded: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for c in captions.iter().chain(&distinct) {
        if !embedded.contains_key(c) {
            embedded.insert(c.clone(), ctx.embedder.embed(c)?);
        }
    }
    let count = settings.samples.max(1).div_ceil(R_PRECISION_BATCH) * R_PRECISION_BATCH;
    let full = ctx.evaluators.get(BodyPart::Full)?;
    let mut reports = Vec::new();
    for run in 0..settings.runs {
        let run_seed = settings.seed.wrapping_add(run as u64);
        let plan = sampler.plan(settings, run_seed);
        let texts: Vec<&String> = (0..count).map(|i| &captions[i % captions.len()]).collect();
        let vectors: Vec<Vec<f64>> = texts.iter().map(|t| embedded[*t].clone()).collect();
        let generated = sample_batch(ctx.model, ctx.schedule, &ctx.dataset.stats_3d, &vectors, &plan, 0)?;
        let gen_refs: Vec<&MotionFeatures> = generated.iter().map(|g| &g.features).collect();

        let gen_emb = full.embed_motions(&gen_refs)?;
        let ref_emb = full.embed_motions(&reference_refs)?;
        let text_emb = full.embed_texts(&vectors.iter().collect::<Vec<_>>())?;
        let rp = metrics::r_precision(gen_emb.view(), text_emb.view())?;
        let mut rng = stream(run_seed, Stream::Evaluation, 0);
        let pairs = settings.diversity_pairs.min(count / 2).max(1);

        let mm_vectors: Vec<Vec<f64>> = distinct
            .iter()
            .flat_map(|c| std::iter::repeat_n(embedded[c].clone(), settings.mm_repeats.max(2)))
            .collect();
        let mm = sample_batch(
            ctx.model,
            ctx.schedule,
            &ctx.dataset.stats_3d,
            &mm_vectors,
            &plan,
            count as u64,
        )?;
        let mm_refs: Vec<&MotionFeatures> = mm.iter().map(|g| &g.features).collect();
        let mm_emb = full.embed_motions(&mm_refs)?;
        let per = settings.mm_repeats.max(2);
        let groups: Vec<Array2<f64>> = (0..distinct.len())
            .map(|g| mm_emb.slice(ndarray::s![g * per..(g + 1) * per, ..]).to_owned())
            .collect();

        let skate = gen_refs
            .iter()
            .map(|m| foot_skate_ratio(m, &ctx.dataset.skeleton, settings.skate))
            .collect::<Result<Vec<_>>>()?;
        reports.push(EvalReport {
            fid: metrics::fid(gen_emb.view(), ref_emb.view())?,
            r_precision_top1: rp.top1,
            r_precision_top2: rp.top2,
            r_precision_top3: rp.top3,
            mm_dist: metrics::mm_dist(gen_emb.view(), text_emb.view())?,
            diversity: metrics::diversity(gen_emb.view(), pairs, &mut rng)?,
            mmodality: metrics::mmodality(&groups, settings.mm_repeats.max(2) / 2, &mut rng)?,
            fid_upper: fid_split(ctx.evaluators, &gen_refs, &reference_refs, BodyPart::Upper)?,
            fid_lower: fid_split(ctx.evaluators, &gen_refs, &reference_refs, BodyPart::Lower)?,
            foot_skate_ratio: skate.iter().sum::<f64>() / skate.len() as f64,
            generated: count,
            reference: reference.len(),
            runs: 1,
            seed: settings.seed,
        });
    }
    let report = EvalReport::average(&reports)?;
    report.validate()?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlphaPoint {
    pub alpha: usize,
    pub report: EvalReport,
}

/// Mixture-sampling evaluation at each switch step.
pub fn sweep_alpha(ctx: &EvalContext, settings: &EvalSettings, alphas: &[usize]) -> Result<Vec<AlphaPoint>> {
    if alphas.is_empty() {
        return Err(Error::Config("alpha list is empty".into()));
    }
    alphas
        .iter()
        .map(|&alpha| {
            let report = evaluate_model(
                ctx,
                settings,
                Sampler {
                    mode: SamplingMode::Mixture,
                    alpha,
                },
            )?;
            Ok(AlphaPoint { alpha, report })
        })
        .collect()
}

/// CSV with one row per switch step.
pub fn alpha_curve_csv(points: &[AlphaPoint]) -> String {
    let mut out = String::from(
        "alpha,fid,r_precision_top1,r_precision_top3,mm_dist,diversity,fid_upper,fid_lower,foot_skate_ratio\n",
    );
    for p in points {
        let r = &p.report;
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            p.alpha,
            r.fid,
            r.r_precision_top1,
            r.r_precision_top3,
            r.mm_dist,
            r.diversity,
            r.fid_upper,
            r.fid_lower,
            r.foot_skate_ratio
        ));
    }
    out
}
