//! Top-level commands. Each one reads its inputs, writes into an output
//! directory and leaves a [`RunManifest`] there.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, CheckpointMeta};
use crate::container::{read_features, read_sidecar, write_features, Sidecar};
use crate::dataset::{prepare_data, DataSource, DatasetIndex, PrepareConfig, PreparedDataset, SequenceEntry, Split};
use crate::diffusion::{ScheduleKind, ScheduleSpec};
use crate::error::{Error, Result};
use crate::evaluator::{train_desk_evaluator, EvaluatorConfig, EvaluatorSet};
use crate::features::MotionFeatures;
use crate::manifest::{hash_bytes, hash_tree, RunManifest};
use crate::model::{CrossDiffModel, ModelConfig};
use crate::protocol::{alpha_curve_csv, evaluate_model, sweep_alpha, EvalContext, EvalSettings, Sampler};
use crate::pseudo_label::{
    ingest_keypoints, read_keypoint_file, smooth_motion, IngestConfig, JointMapping, Lifter, SmoothMethod,
    DEFAULT_WINDOW,
};
use crate::render::{encode_video, render_features, write_frames, RenderConfig};
use crate::sampling::{sample_batch, SamplingMode, SamplingPlan};
use crate::seed::{stream, Stream};
use crate::skeleton::Skeleton;
use crate::text::EmbedderSpec;
use crate::training::{Stage, TrainConfig, TrainSession};

/// Optional TOML sections; a present section replaces the desk default
/// for that part wholesale.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Settings {
    pub prepare: Option<PrepareConfig>,
    pub model: Option<ModelConfig>,
    pub schedule: Option<ScheduleKind>,
    pub embedder: Option<EmbedderSpec>,
    pub train: Option<TrainConfig>,
    pub sampling: Option<SamplingPlan>,
    pub ingest: Option<IngestConfig>,
    pub smoothing: Option<SmoothSettings>,
    pub evaluator: Option<EvaluatorConfig>,
    pub evaluation: Option<EvalSettings>,
    pub render: Option<RenderConfig>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SmoothSettings {
    pub window: usize,
    pub method: SmoothMethod,
}

impl Default for SmoothSettings {
    fn default() -> Self {
        Self {
            window: DEFAULT_WINDOW,
            method: SmoothMethod::default(),
        }
    }
}

impl Settings {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("settings: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn prepare(&self) -> PrepareConfig {
        self.prepare.clone().unwrap_or_else(PrepareConfig::desk)
    }

    pub fn embedder(&self) -> EmbedderSpec {
        self.embedder.clone().unwrap_or(EmbedderSpec::Hash { dim: 32, seed: 0 })
    }

    pub fn model(&self, non_root: usize, text_dim: usize) -> ModelConfig {
        self.model
            .clone()
            .unwrap_or_else(|| ModelConfig::desk(non_root, text_dim))
    }

    pub fn train(&self, stage: Stage) -> TrainConfig {
        match &self.train {
            Some(t) => TrainConfig { stage, ..t.clone() },
            None => TrainConfig::desk(stage),
        }
    }

    pub fn evaluation(&self) -> EvalSettings {
        self.evaluation.clone().unwrap_or_else(EvalSettings::desk)
    }

    /// Applies a global seed to every seeded section.
    pub fn with_seed(mut self, seed: u64) -> Self {
        let mut prepare = self.prepare();
        prepare.seed = seed;
        self.prepare = Some(prepare);
        if let Some(t) = self.train.as_mut() {
            t.seed = seed;
        }
        if let Some(s) = self.sampling.as_mut() {
            s.seed = seed;
        }
        let mut ev = self.evaluator.unwrap_or_default();
        ev.seed = seed;
        self.evaluator = Some(ev);
        let mut es = self.evaluation();
        es.seed = seed;
        self.evaluation = Some(es);
        self
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum Command {
    PrepareData {
        /// HumanML3D-format directory; synthetic when absent and the
        /// settings do not name a source.
        source: Option<PathBuf>,
    },
    Train {
        data: PathBuf,
        stage: Stage,
        resume: Option<PathBuf>,
        steps: Option<usize>,
    },
    Sample {
        checkpoint: PathBuf,
        texts: Vec<String>,
        count: usize,
        mode: SamplingMode,
        alpha: Option<usize>,
        scale: Option<f64>,
        frames: Option<usize>,
        /// Also render each sample into `render_XXX/`.
        render: bool,
    },
    Lift {
        checkpoint: PathBuf,
        keypoints: PathBuf,
        mapping: PathBuf,
    },
    Evaluate {
        checkpoint: PathBuf,
        data: PathBuf,
        evaluator: Option<PathBuf>,
        split: Option<Split>,
        runs: Option<usize>,
    },
    Render {
        features: PathBuf,
        skeleton: Option<PathBuf>,
        video: bool,
    },
    SweepAlpha {
        checkpoint: PathBuf,
        data: PathBuf,
        evaluator: Option<PathBuf>,
        alphas: Option<Vec<usize>>,
        runs: Option<usize>,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::PrepareData { .. } => "prepare-data",
            Command::Train { .. } => "train",
            Command::Sample { .. } => "sample",
            Command::Lift { .. } => "lift",
            Command::Evaluate { .. } => "evaluate",
            Command::Render { .. } => "render",
            Command::SweepAlpha { .. } => "sweep-alpha",
        }
    }

    fn inputs(&self) -> Vec<PathBuf> {
        let mut v = Vec::new();
        match self {
            Command::PrepareData { source } => v.extend(source.clone()),
            Command::Train { data, resume, .. } => {
                v.push(data.clone());
                v.extend(resume.clone());
            }
            Command::Sample { checkpoint, .. } => v.push(checkpoint.clone()),
            Command::Lift {
                checkpoint,
                keypoints,
                mapping,
            } => v.extend([checkpoint.clone(), keypoints.clone(), mapping.clone()]),
            Command::Evaluate {
                checkpoint,
                data,
                evaluator,
                ..
            }
            | Command::SweepAlpha {
                checkpoint,
                data,
                evaluator,
                ..
            } => {
                v.extend([checkpoint.clone(), data.clone()]);
                v.extend(evaluator.clone());
            }
            Command::Render { features, skeleton, .. } => {
                v.push(features.clone());
                v.extend(skeleton.clone());
            }
        }
        v
    }
}

/// What a command produced besides its files.
#[derive(Clone, Debug)]
pub struct CommandOutcome {
    pub manifest: RunManifest,
    pub summary: serde_json::Value,
}

/// Runs `command` into `out` and writes `out/manifest.json`.
pub fn run_command(command: &Command, settings: &Settings, seed: Option<u64>, out: &Path) -> Result<CommandOutcome> {
    let settings = match seed {
        Some(s) => settings.clone().with_seed(s),
        None => settings.clone(),
    };
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut inputs = Vec::new();
    for p in command.inputs() {
        let mut hashes = hash_tree(&p)?;
        if p.is_dir() {
            for h in &mut hashes {
                h.path = p.join(&h.path).display().to_string();
            }
        }
        inputs.extend(hashes);
    }
    let clock = Instant::now();
    let (summary, seeds) = match command {
        Command::PrepareData { source } => prepare_data_cmd(source.as_deref(), &settings, out)?,
        Command::Train {
            data,
            stage,
            resume,
            steps,
        } => train_cmd(data, *stage, resume.as_deref(), *steps, &settings, out)?,
        Command::Sample {
            checkpoint,
            texts,
            count,
            mode,
            alpha,
            scale,
            frames,
            render,
        } => {
            let opts = SampleOptions {
                count: *count,
                mode: *mode,
                alpha: *alpha,
                scale: *scale,
                frames: *frames,
                render: *render,
            };
            sample_cmd(checkpoint, texts, opts, &settings, out)?
        }
        Command::Lift {
            checkpoint,
            keypoints,
            mapping,
        } => lift_cmd(checkpoint, keypoints, mapping, &settings, out)?,
        Command::Evaluate {
            checkpoint,
            data,
            evaluator,
            split,
            runs,
        } => evaluate_cmd(checkpoint, data, evaluator.as_deref(), *split, *runs, &settings, out)?,
        Command::Render {
            features,
            skeleton,
            video,
        } => render_cmd(features, skeleton.as_deref(), *video, &settings, out)?,
        Command::SweepAlpha {
            checkpoint,
            data,
            evaluator,
            alphas,
            runs,
        } => sweep_cmd(
            checkpoint,
            data,
            evaluator.as_deref(),
            alphas.as_deref(),
            *runs,
            &settings,
            out,
        )?,
    };
    let manifest = RunManifest {
        command: command.name().to_string(),
        args: serde_json::to_value(command)?,
        config: serde_json::to_value(&settings)?,
        seeds,
        inputs,
        outputs: hash_tree(out)?,
        version: env!("CARGO_PKG_VERSION").to_string(),
        wall_ms: clock.elapsed().as_millis(),
    };
    manifest.save(out)?;
    Ok(CommandOutcome { manifest, summary })
}

type Done = (serde_json::Value, BTreeMap<String, u64>);

fn seeds(pairs: &[(&str, u64)]) -> BTreeMap<String, u64> {
    pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn prepare_data_cmd(source: Option<&Path>, settings: &Settings, out: &Path) -> Result<Done> {
    let mut config = settings.prepare();
    if let Some(path) = source {
        config.source = DataSource::Humanml3d {
            path: path.to_path_buf(),
        };
    }
    let ds = prepare_data(&config, &Skeleton::humanml22(), out)?;
    let summary = serde_json::json!({
        "sequences": ds.index.sequences.len(),
        "train": ds.index.train.len(),
        "test": ds.index.test.len(),
        "issues": ds.index.issues,
    });
    Ok((summary, seeds(&[("prepare", config.seed)])))
}

fn train_cmd(
    data: &Path,
    stage: Stage,
    resume: Option<&Path>,
    steps: Option<usize>,
    settings: &Settings,
    out: &Path,
) -> Result<Done> {
    let ds = PreparedDataset::load(data)?;
    let resume = resume.map(Checkpoint::load).transpose()?;
    let mut config = settings.train(stage);
    if let Some(ck) = &resume {
        if let Some(p) = ck
            .meta
            .progress
            .as_ref()
            .filter(|p| p.stage == stage && settings.train.is_none())
        {
            config = p.config.clone();
        }
    }
    if steps.is_some() {
        config.max_steps = steps;
    }
    if stage == Stage::Finetune2d && resume.is_none() {
        return Err(Error::Config(
            "2D fine-tuning starts from a stage-I checkpoint (--resume)".into(),
        ));
    }
    let (mut model, mut meta) = match &resume {
        Some(ck) => {
            if ck.meta.skeleton_hash != ds.skeleton.hash() {
                return Err(Error::Validation(
                    "checkpoint and dataset use different skeletons".into(),
                ));
            }
            (ck.model()?, ck.meta.clone())
        }
        None => {
            let embedder = settings.embedder();
            let dim = embedder.build()?.dim();
            let mc = settings.model(ds.skeleton.non_root_count(), dim);
            let model = CrossDiffModel::new(mc.clone(), &mut stream(config.seed, Stream::Init, 0))?;
            let meta = CheckpointMeta {
                model: mc.clone(),
                schedule: ScheduleSpec {
                    steps: mc.diffusion_steps,
                    kind: settings.schedule.unwrap_or(ScheduleKind::Cosine),
                },
                stats_3d: ds.stats_3d.clone(),
                stats_2d: ds.stats_2d.clone(),
                skeleton_hash: ds.skeleton.hash(),
                embedder,
                stage_one_trained: false,
                progress: None,
            };
            (model, meta)
        }
    };
    if stage == Stage::Finetune2d && !model.is_root_decoupled() {
        model.enable_root_decoupled(&mut stream(config.seed, Stream::Init, 1))?;
        meta.model = model.config().clone();
    }
    let schedule = meta.schedule.build()?;
    let embedder = meta.embedder.build()?;
    let items = ds.train_items(Split::Train, embedder.as_ref())?;
    let resume_same = resume
        .as_ref()
        .filter(|ck| ck.meta.progress.as_ref().is_some_and(|p| p.stage == stage));
    let mut session = TrainSession::new(model, schedule, meta, config.clone(), resume_same)?;
    let outcome = session.run(&items, out)?;
    let first = outcome.losses.first().map(|l| l.total);
    let last = outcome.losses.last().map(|l| l.total);
    let summary = serde_json::json!({
        "stage": stage.label(),
        "steps": outcome.losses.len(),
        "first_loss": first,
        "last_loss": last,
        "final_checkpoint": outcome.final_checkpoint,
    });
    Ok((summary, seeds(&[("train", config.seed)])))
}

struct SampleOptions {
    count: usize,
    mode: SamplingMode,
    alpha: Option<usize>,
    scale: Option<f64>,
    frames: Option<usize>,
    render: bool,
}

fn sample_cmd(
    checkpoint: &Path,
    texts: &[String],
    opts: SampleOptions,
    settings: &Settings,
    out: &Path,
) -> Result<Done> {
    let SampleOptions {
        count,
        mode,
        alpha,
        scale,
        frames,
        render,
    } = opts;
    if texts.is_empty() || count == 0 {
        return Err(Error::Config(
            "sample needs at least one text and a positive count".into(),
        ));
    }
    let ck = Checkpoint::load(checkpoint)?;
    let model = ck.model()?;
    let schedule = ck.meta.schedule.build()?;
    let embedder = ck.meta.embedder.build()?;
    let mut plan = settings
        .sampling
        .clone()
        .unwrap_or_else(|| SamplingPlan::standard(40, 0));
    plan.mode = mode;
    if let Some(a) = alpha {
        plan.alpha = a;
    } else if mode == SamplingMode::Mixture && settings.sampling.is_none() {
        plan.alpha = schedule.steps() / 2;
    }
    if let Some(f) = frames {
        plan.frames = f;
    }
    if let Some(w) = scale {
        plan.scale = w;
    }
    let mut prompts = Vec::new();
    for t in texts {
        let v = embedder.embed(t)?;
        prompts.extend(std::iter::repeat_n((t.clone(), v), count));
    }
    let vectors: Vec<Vec<f64>> = prompts.iter().map(|p| p.1.clone()).collect();
    let results = sample_batch(&model, &schedule, &ck.meta.stats_3d, &vectors, &plan, 0)?;
    let mut files = Vec::new();
    for (i, (r, (text, _))) in results.iter().zip(&prompts).enumerate() {
        let name = format!("sample_{i:03}.xdmf");
        let side = Sidecar {
            source: format!("sample:{}", plan_label(&plan)),
            fps: 20.0,
            texts: vec![text.clone()],
            view: None,
            degenerate_frames: vec![],
        };
        write_features(&out.join(&name), &r.features, &side)?;
        if render {
            let config = settings.render.clone().unwrap_or_default();
            let images = render_features(&r.features, &Skeleton::humanml22(), &config)?;
            write_frames(&images, &out.join(format!("render_{i:03}")))?;
        }
        files.push(serde_json::json!({"file": name, "text": text, "prediction_steps": r.prediction_steps()}));
    }
    write_json(&out.join("samples.json"), &files)?;
    Ok((
        serde_json::json!({ "samples": files.len(), "plan": plan }),
        seeds(&[("sampling", plan.seed)]),
    ))
}

fn plan_label(plan: &SamplingPlan) -> String {
    match plan.mode {
        SamplingMode::Standard => "standard".into(),
        SamplingMode::Mixture => format!("mixture-alpha{}", plan.alpha),
    }
}

fn lift_cmd(checkpoint: &Path, keypoints: &Path, mapping: &Path, settings: &Settings, out: &Path) -> Result<Done> {
    let ck = Checkpoint::load(checkpoint)?;
    let skeleton = Skeleton::humanml22();
    if ck.meta.skeleton_hash != skeleton.hash() {
        return Err(Error::Validation(
            "checkpoint skeleton is not the built-in 22-joint skeleton".into(),
        ));
    }
    let map = JointMapping::load(mapping)?;
    let seqs = read_keypoint_file(keypoints)?;
    let report = ingest_keypoints(&seqs, &map, &skeleton, settings.ingest.unwrap_or_default())?;
    let Some(first) = report.kept.first() else {
        return Err(Error::Ingestion(format!(
            "all {} keypoint sequences were dropped",
            seqs.len()
        )));
    };
    let fps = first.fps;
    let lifter = Lifter::from_checkpoint(&ck)?;
    let smoothing = settings.smoothing.unwrap_or_default();
    let thresholds = settings.prepare().thresholds;
    let mut entries = Vec::new();
    for (i, seq) in report.kept.iter().enumerate() {
        let id = format!("kp_{i:03}");
        let f2 = seq.features(&skeleton, thresholds)?;
        let lifted = lifter.lift(&f2.features)?;
        let window = smoothing.window.min(odd_floor(lifted.frames()));
        let smoothed = smooth_motion(&lifted, window, smoothing.method)?;
        smoothed.validate()?;
        let file_3d = format!("motions_3d/{id}.xdmf");
        let file_2d = format!("motions_2d/{id}_est.xdmf");
        let side = |view_source: &str| Sidecar {
            source: format!("{view_source}:{}", seq.source),
            fps: seq.fps,
            texts: seq.texts.clone(),
            view: None,
            degenerate_frames: f2
                .degenerate_frames
                .iter()
                .enumerate()
                .filter(|(_, d)| **d)
                .map(|(k, _)| k)
                .collect(),
        };
        write_features(&out.join(&file_3d), &smoothed, &side("pseudo"))?;
        write_features(&out.join(&file_2d), &f2.features, &side("keypoints"))?;
        entries.push(SequenceEntry {
            id,
            texts: seq.texts.clone(),
            frames: smoothed.frames(),
            file_3d,
            files_2d: vec![file_2d],
        });
    }
    let ids: Vec<String> = entries.iter().map(|e| e.id.clone()).collect();
    let index = DatasetIndex {
        fps,
        views: vec![],
        thresholds,
        skeleton_hash: skeleton.hash(),
        sequences: entries,
        train: ids.clone(),
        test: ids,
        issues: report
            .dropped
            .iter()
            .map(|(source, reason)| crate::dataset::IngestIssue {
                id: source.clone(),
                message: serde_json::to_string(reason).unwrap_or_default(),
            })
            .collect(),
    };
    skeleton.save(&out.join("skeleton.toml"))?;
    write_json(&out.join("stats_3d.json"), &ck.meta.stats_3d)?;
    write_json(&out.join("stats_2d.json"), &ck.meta.stats_2d)?;
    write_json(&out.join("dataset.json"), &index)?;
    let summary = serde_json::json!({
        "kept": report.kept.len(),
        "dropped": report.dropped,
        "warning": lifter.warning(),
    });
    Ok((summary, BTreeMap::new()))
}

fn odd_floor(n: usize) -> usize {
    if n % 2 == 1 {
        n
    } else {
        n.saturating_sub(1).max(1)
    }
}

fn load_or_train_evaluators(
    evaluator: Option<&Path>,
    ds: &PreparedDataset,
    embedder: &dyn crate::text::TextEmbedder,
    settings: &Settings,
    out: &Path,
) -> Result<EvaluatorSet> {
    match evaluator {
        Some(p) => EvaluatorSet::load(p),
        None => {
            let set = train_desk_evaluator(ds, embedder, settings.evaluator.unwrap_or_default())?;
            set.save(&out.join("evaluator.json"))?;
            Ok(set)
        }
    }
}

fn config_hashes(checkpoint: &Path, settings: &Settings) -> Result<serde_json::Value> {
    let ck = std::fs::read(checkpoint).map_err(|e| Error::io(checkpoint, e))?;
    Ok(serde_json::json!({
        "checkpoint_sha256": hash_bytes(&ck),
        "settings_sha256": hash_bytes(serde_json::to_string(settings)?.as_bytes()),
    }))
}

fn evaluate_cmd(
    checkpoint: &Path,
    data: &Path,
    evaluator: Option<&Path>,
    split: Option<Split>,
    runs: Option<usize>,
    settings: &Settings,
    out: &Path,
) -> Result<Done> {
    let ck = Checkpoint::load(checkpoint)?;
    let ds = PreparedDataset::load(data)?;
    let model = ck.model()?;
    let schedule = ck.meta.schedule.build()?;
    let embedder = ck.meta.embedder.build()?;
    let evaluators = load_or_train_evaluators(evaluator, &ds, embedder.as_ref(), settings, out)?;
    let mut es = settings.evaluation();
    if let Some(s) = split {
        es.split = s;
    }
    if let Some(r) = runs {
        es.runs = r;
    }
    let ctx = EvalContext {
        model: &model,
        schedule: &schedule,
        dataset: &ds,
        embedder: embedder.as_ref(),
        evaluators: &evaluators,
    };
    let report = evaluate_model(&ctx, &es, Sampler::STANDARD)?;
    let doc = serde_json::json!({
        "report": report,
        "settings": es,
        "hashes": config_hashes(checkpoint, settings)?,
    });
    write_json(&out.join("report.json"), &doc)?;
    Ok((serde_json::to_value(&report)?, seeds(&[("evaluation", es.seed)])))
}

fn sweep_cmd(
    checkpoint: &Path,
    data: &Path,
    evaluator: Option<&Path>,
    alphas: Option<&[usize]>,
    runs: Option<usize>,
    settings: &Settings,
    out: &Path,
) -> Result<Done> {
    let ck = Checkpoint::load(checkpoint)?;
    let ds = PreparedDataset::load(data)?;
    let model = ck.model()?;
    let schedule = ck.meta.schedule.build()?;
    let embedder = ck.meta.embedder.build()?;
    let evaluators = load_or_train_evaluators(evaluator, &ds, embedder.as_ref(), settings, out)?;
    let t = schedule.steps();
    let alphas = alphas
        .map(|a| a.to_vec())
        .unwrap_or_else(|| vec![0, 1, t / 4, t / 2, 3 * t / 4, t]);
    let mut es = settings.evaluation();
    if let Some(r) = runs {
        es.runs = r;
    }
    let ctx = EvalContext {
        model: &model,
        schedule: &schedule,
        dataset: &ds,
        embedder: embedder.as_ref(),
        evaluators: &evaluators,
    };
    let points = sweep_alpha(&ctx, &es, &alphas)?;
    write_json(
        &out.join("alpha_sweep.json"),
        &serde_json::json!({
            "points": points,
            "settings": es,
            "hashes": config_hashes(checkpoint, settings)?,
        }),
    )?;
    let csv = alpha_curve_csv(&points);
    std::fs::write(out.join("alpha_curve.csv"), &csv).map_err(|e| Error::io(out.join("alpha_curve.csv"), e))?;
    Ok((
        serde_json::json!({ "alphas": alphas, "table": csv }),
        seeds(&[("evaluation", es.seed)]),
    ))
}

fn render_cmd(features: &Path, skeleton: Option<&Path>, video: bool, settings: &Settings, out: &Path) -> Result<Done> {
    let skeleton = match skeleton {
        Some(p) => Skeleton::load(p)?,
        None => Skeleton::humanml22(),
    };
    let f: MotionFeatures = read_features(features)?;
    let mut config = settings.render.clone().unwrap_or_default();
    if let Ok(side) = read_sidecar(features) {
        config.fps = side.fps;
    }
    let frames = render_features(&f, &skeleton, &config)?;
    let dir = out.join("frames");
    let paths = write_frames(&frames, &dir)?;
    let mut video_path = None;
    if video {
        let p = out.join("motion.mp4");
        encode_video(&dir, config.fps, &p)?;
        video_path = Some(p);
    }
    let summary = serde_json::json!({ "frames": paths.len(), "video": video_path });
    Ok((summary, BTreeMap::new()))
}

/// Output hashes of two runs agree file by file.
pub fn outputs_match(a: &RunManifest, b: &RunManifest) -> bool {
    a.outputs == b.outputs
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn settings_parse_and_reject_unknown_sections() {
        assert_eq!(Settings::from_toml("").unwrap(), Settings::default());
        assert!(Settings::from_toml("[bogus]\nx = 1\n").is_err());
        let s = Settings::from_toml("[smoothing]\nwindow = 5\nmethod = { kind = \"moving_average\" }\n").unwrap();
        assert_eq!(s.smoothing.unwrap().window, 5);
    }

    #[test]
    fn settings_round_trip_through_toml() {
        let s = Settings {
            prepare: Some(PrepareConfig::desk()),
            train: Some(TrainConfig::desk(Stage::One)),
            evaluation: Some(EvalSettings::desk()),
            ..Settings::default()
        };
        let text = toml::to_string(&s).unwrap();
        assert_eq!(Settings::from_toml(&text).unwrap(), s);
    }

    #[test]
    fn prepare_data_is_reproducible_through_manifests() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let cmd = Command::PrepareData { source: None };
        let ra = run_command(&cmd, &Settings::default(), Some(4), a.path()).unwrap();
        let rb = run_command(&cmd, &Settings::default(), Some(4), b.path()).unwrap();
        assert!(outputs_match(&ra.manifest, &rb.manifest));
        assert_eq!(ra.manifest.seeds["prepare"], 4);
        assert!(a.path().join("manifest.json").exists());
        let rc = run_command(&cmd, &Settings::default(), Some(5), b.path()).unwrap();
        assert!(!outputs_match(&ra.manifest, &rc.manifest));
    }
}
