//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

mod common;

use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::DType;
use crossdiff::checkpoint::{Checkpoint, CheckpointMeta};
use crossdiff::commands::{outputs_match, run_command, Command, Settings};
use crossdiff::dataset::{prepare_data, PrepareConfig, PreparedDataset, Split};
use crossdiff::diffusion::{gaussian, NoiseSchedule, ScheduleKind};
use crossdiff::evaluator::{fid_split, BodyPart, EvaluatorSet};
use crossdiff::features::{canonicalize, compute_features_3d, recover_positions_3d, ContactThresholds, MotionFeatures};
use crossdiff::layout::{Domain, FeatureLayout};
use crossdiff::manifest::RunManifest;
use crossdiff::metrics::{diversity, fid, mmodality, r_precision, skate_ratio_positions, SkateThresholds};
use crossdiff::model::{stack_batch, Condition, CrossDiffModel, ModelConfig};
use crossdiff::optim::AdamW;
use crossdiff::projection::{compute_features_2d, project_view, View};
use crossdiff::pseudo_label::{lift_2d_to_3d, write_keypoint_file, JointMapping, KeypointSequence};
use crossdiff::sampling::{sample_batch, sample_mixture, sample_standard, SamplingMode, SamplingPlan, StepKind};
use crossdiff::seed::{stream, Stream};
use crossdiff::skeleton::Skeleton;
use crossdiff::synthetic::{family_motion, random_smooth_motion, static_pose, FamilyParams, MotionFamily};
use crossdiff::text::{HashEmbedder, TextEmbedder};
use crossdiff::training::{
    objective, prepare_batch, stage1_step, stage2_step, LossWeights, Stage, TrainConfig, TrainItem, TrainSession,
};
use ndarray::{s, Array2, Array3, Axis};

type Verdict = std::result::Result<(bool, String), String>;

struct Report {
    failed: usize,
    total: usize,
}

impl Report {
    fn record(&mut self, id: &str, name: &str, started: Instant, verdict: Verdict) {
        let secs = started.elapsed().as_secs_f64();
        let (pass, detail) = verdict.unwrap_or_else(|e| (false, format!("error: {e}")));
        if !pass {
            self.failed += 1;
        }
        let tag = if pass { "PASS" } else { "FAIL" };
        println!("{tag} [{id:>3}] {name}: {detail} ({secs:.1}s)");
        self.total += 1;
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn rmse2(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    ((a - b).mapv(|v| v * v).mean().unwrap_or(f64::NAN)).sqrt()
}

fn rmse3(a: &Array3<f64>, b: &Array3<f64>) -> f64 {
    ((a - b).mapv(|v| v * v).mean().unwrap_or(f64::NAN)).sqrt()
}

fn forward_statistics() -> Verdict {
    let schedule = NoiseSchedule::new(100, ScheduleKind::Cosine).map_err(err)?;
    let draws = 100_000;
    let x0 = [3.0, -2.0, 1.5, 2.5];
    let mut worst_mean = 0.0f64;
    let mut worst_var = 0.0f64;
    for (i, t) in [10usize, 40, 70].into_iter().enumerate() {
        let clean = Array2::from_shape_fn((draws, x0.len()), |(_, j)| x0[j]);
        let noise = gaussian(&mut stream(1, Stream::Trajectory, i as u64), draws, x0.len());
        let xt = schedule.q_sample(clean.view(), t, noise.view()).map_err(err)?;
        let ab = schedule.alpha_bar(t);
        let mean = xt.mean_axis(Axis(0)).unwrap();
        let var = xt.var_axis(Axis(0), 1.0);
        for j in 0..x0.len() {
            let m = ab.sqrt() * x0[j];
            worst_mean = worst_mean.max((mean[j] - m).abs() / m.abs());
            worst_var = worst_var.max((var[j] - (1.0 - ab)).abs() / (1.0 - ab));
        }
    }
    Ok((
        worst_mean < 0.01 && worst_var < 0.02,
        format!(
            "max mean rel err {worst_mean:.2e} (< 1e-2), max var rel err {worst_var:.2e} (< 2e-2) at t = 10, 40, 70"
        ),
    ))
}

fn gradient_correctness() -> Verdict {
    let (worst, checked) = common::gradient_check(LossWeights::STAGE_ONE, 16, 11);
    Ok((
        worst < 1e-4,
        format!("max rel err {worst:.2e} over {checked} coordinates (< 1e-4)"),
    ))
}

fn representation_round_trip() -> Verdict {
    let sk = Skeleton::humanml22();
    let mut worst = 0.0f64;
    for i in 0..100 {
        let pos = random_smooth_motion(&sk, 40, &mut stream(3, Stream::Dataset, i));
        let f = compute_features_3d(&pos, &sk, ContactThresholds::default()).map_err(err)?;
        let rec = recover_positions_3d(&f, &sk).map_err(err)?;
        let reference = canonicalize(&pos, &sk).slice(s![..rec.dim().0, .., ..]).to_owned();
        worst = worst.max(rmse3(&rec, &reference));
    }
    let pos = random_smooth_motion(&sk, 10, &mut stream(3, Stream::Dataset, 100));
    let f2 = compute_features_2d(
        &project_view(&pos, View::FRONT).map_err(err)?,
        &sk,
        ContactThresholds::default(),
    )
    .map_err(err)?;
    let formula = FeatureLayout::new(Domain::TwoD, 21).dim();
    let width = f2.features.data.ncols();
    Ok((
        worst < 1e-4 && formula == 132 && width == 132,
        format!("max RMSE {worst:.2e} m over 100 sequences (< 1e-4); d_2D(j=21) = {formula}, concrete {width}"),
    ))
}

struct Overfit {
    data: PathBuf,
    checkpoint: PathBuf,
    model: CrossDiffModel,
    schedule: NoiseSchedule,
    dataset: PreparedDataset,
    items: Vec<TrainItem>,
    embedder: HashEmbedder,
}

fn block_means(values: &[f64], window: usize) -> Vec<f64> {
    values
        .chunks_exact(window)
        .map(|c| c.iter().sum::<f64>() / window as f64)
        .collect()
}

fn overfit(work: &Path) -> std::result::Result<(Overfit, Verdict), String> {
    let sk = Skeleton::humanml22();
    let data = work.join("desk");
    let dataset = prepare_data(&PrepareConfig::desk(), &sk, &data).map_err(err)?;
    let embedder = HashEmbedder::new(32, 0);
    let mut train = TrainConfig::desk(Stage::One);
    train.views = vec![View::FRONT];
    let config = ModelConfig::desk(sk.non_root_count(), embedder.dim());
    let model = CrossDiffModel::new(config.clone(), &mut stream(train.seed, Stream::Init, 0)).map_err(err)?;
    let schedule = NoiseSchedule::new(100, ScheduleKind::Cosine).map_err(err)?;
    let items = dataset.train_items(Split::Train, &embedder).map_err(err)?;
    let meta = CheckpointMeta {
        model: config,
        schedule: schedule.spec(),
        stats_3d: dataset.stats_3d.clone(),
        stats_2d: dataset.stats_2d.clone(),
        skeleton_hash: sk.hash(),
        embedder: embedder.describe(),
        stage_one_trained: false,
        progress: None,
    };
    let mut session = TrainSession::new(model, schedule.clone(), meta, train, None).map_err(err)?;
    let outcome = session.run(&items, &work.join("stage1")).map_err(err)?;
    let totals: Vec<f64> = outcome.losses.iter().map(|l| l.total).collect();
    let steps = totals.len();
    let means = block_means(&totals, 100);
    let ratio = means[0] / means[means.len() - 1];
    let quarter = &means[means.len() * 3 / 4..];
    let monotone = quarter.windows(2).all(|w| w[1] <= w[0]);

    let prompts = dataset.prompts(Split::Train).map_err(err)?;
    let mut worst = 0.0f64;
    let mut per_prompt = Vec::new();
    for (prompt, ids) in &prompts {
        let text = embedder.embed(prompt).map_err(err)?;
        let plan = SamplingPlan::standard(40, 7);
        let r = sample_standard(&session.model, &schedule, &dataset.stats_3d, &text, &plan).map_err(err)?;
        let best = ids
            .iter()
            .filter_map(|id| items.iter().find(|it| &it.id == id))
            .filter_map(|it| it.motion_3d.as_ref())
            .map(|m| rmse2(&r.normalized, &m.slice(s![..40, ..]).to_owned()))
            .fold(f64::INFINITY, f64::min);
        worst = worst.max(best);
        per_prompt.push(format!("{prompt:?} {best:.4}"));
    }
    let pass = ratio >= 10.0 && worst < 0.1 && steps <= 5000;
    let detail = format!(
        "{steps} steps, loss {:.1} -> {:.2} ({ratio:.1}x, >= 10x); sample RMSE {} (< 0.1); final-quarter smoothed loss non-increasing: {monotone}",
        means[0],
        means[means.len() - 1],
        per_prompt.join(", ")
    );
    let state = Overfit {
        data,
        checkpoint: outcome.final_checkpoint,
        model: session.model,
        schedule,
        dataset,
        items,
        embedder,
    };
    Ok((state, Ok((pass, detail))))
}

fn cross_pathway(o: &Overfit) -> Verdict {
    let front = o
        .dataset
        .index
        .views
        .iter()
        .position(|v| *v == View::FRONT)
        .ok_or("no front view")?;
    let mut worst = 0.0f64;
    for item in &o.items {
        let x2 = &item.motion_2d[front];
        let lifted = lift_2d_to_3d(&o.model, x2).map_err(err)?;
        worst = worst.max(rmse2(&lifted, item.motion_3d.as_ref().ok_or("no 3D")?));
    }
    Ok((
        worst < 0.1,
        format!(
            "max lift RMSE {worst:.4} over {} training motions, front view (< 0.1)",
            o.items.len()
        ),
    ))
}

fn mixture_contract(o: &Overfit, work: &Path) -> Verdict {
    let t = o.schedule.steps();
    let text = o.embedder.embed("a person walks forward").map_err(err)?;
    let d2 = o.model.dim(Domain::TwoD);
    let d3 = o.model.dim(Domain::ThreeD);
    let mut problems = Vec::new();
    for alpha in [0, 1, t / 2, t] {
        let plan = SamplingPlan::mixture(40, alpha, 5);
        let a = sample_mixture(&o.model, &o.schedule, &o.dataset.stats_3d, &text, &plan).map_err(err)?;
        let b = sample_mixture(&o.model, &o.schedule, &o.dataset.stats_3d, &text, &plan).map_err(err)?;
        if a.prediction_steps() != t {
            problems.push(format!("alpha {alpha}: {} steps", a.prediction_steps()));
        }
        for r in &a.trace {
            let source_2d = r.kind == StepKind::Lift || r.t >= alpha;
            let expected_in = if source_2d { d2 } else { d3 };
            let expected_out = if source_2d && r.t != alpha && r.kind == StepKind::Predict {
                d2
            } else {
                d3
            };
            if r.input_width != expected_in || r.output_width != expected_out {
                problems.push(format!(
                    "alpha {alpha} t {}: widths {}->{}",
                    r.t, r.input_width, r.output_width
                ));
            }
        }
        if a.normalized != b.normalized {
            problems.push(format!("alpha {alpha}: not deterministic"));
        }
    }
    let out = work.join("sweep");
    let run = run_command(
        &Command::SweepAlpha {
            checkpoint: o.checkpoint.clone(),
            data: o.data.clone(),
            evaluator: None,
            alphas: Some(vec![0, 1, t / 2, t]),
            runs: Some(1),
        },
        &Settings::default(),
        None,
        &out,
    )
    .map_err(err)?;
    let csv = std::fs::read_to_string(out.join("alpha_curve.csv")).map_err(err)?;
    let rows = csv.lines().count() - 1;
    if rows != 4 {
        problems.push(format!("curve has {rows} rows"));
    }
    let detail = if problems.is_empty() {
        format!(
            "alpha in {{0, 1, {}, {t}}}: {t} predictions each, domain widths {d2}/{d3}, seeded; curve {} ({rows} rows, {} outputs hashed)",
            t / 2,
            "alpha_curve.csv",
            run.manifest.outputs.len()
        )
    } else {
        problems.join("; ")
    };
    Ok((problems.is_empty(), detail))
}

fn metric_oracles() -> Verdict {
    let n = 10_000;
    let d = 4;
    let shift = [1.0, -0.5, 0.5, 1.0];
    let expected: f64 = shift.iter().map(|v| v * v).sum();
    let a = gaussian(&mut stream(7, Stream::Evaluation, 0), n, d);
    let b = gaussian(&mut stream(7, Stream::Evaluation, 1), n, d) + &ndarray::arr1(&shift);
    let shifted = fid(a.view(), b.view()).map_err(err)?;
    let same = fid(a.view(), a.view()).map_err(err)?;

    let batches = 10_000;
    let motion = gaussian(&mut stream(7, Stream::Evaluation, 2), batches * 32, 8);
    let texts = gaussian(&mut stream(7, Stream::Evaluation, 3), batches * 32, 8);
    let rp = r_precision(motion.view(), texts.view()).map_err(err)?;

    let flat = Array2::from_elem((64, 8), 0.3);
    let div = diversity(flat.view(), 16, &mut stream(7, Stream::Evaluation, 4)).map_err(err)?;
    let mm = mmodality(&[flat.clone(), flat.clone()], 8, &mut stream(7, Stream::Evaluation, 5)).map_err(err)?;

    let sk = Skeleton::humanml22();
    let th = SkateThresholds::default();
    let standing = static_pose(&sk, 12);
    let mut sliding = standing.clone();
    for k in 0..sliding.dim().0 {
        for j in 0..sliding.dim().1 {
            sliding[(k, j, 0)] += 0.2 * k as f64;
        }
    }
    for &f in &sk.foot_joints() {
        sliding.slice_mut(s![.., f, 1]).fill(0.0);
    }
    let skate_still = skate_ratio_positions(&standing, &sk, th);
    let skate_slide = skate_ratio_positions(&sliding, &sk, th);

    let fid_rel = (shifted - expected).abs() / expected;
    let pass = fid_rel < 0.05
        && same < 1e-6
        && (rp.top3 - 3.0 / 32.0).abs() <= 0.02
        && div == 0.0
        && mm == 0.0
        && skate_still == 0.0
        && skate_slide == 1.0;
    Ok((
        pass,
        format!(
            "FID shifted {shifted:.4} vs {expected:.4} ({:.1}%), FID identical {same:.1e}, R-prec top3 {:.4} (0.094 +- 0.02), diversity {div}, mmodality {mm}, skate {skate_still}/{skate_slide}",
            100.0 * fid_rel,
            rp.top3
        ),
    ))
}

fn part_localization(o: &Overfit, work: &Path) -> Verdict {
    let evaluators = EvaluatorSet::load(&work.join("sweep").join("evaluator.json")).map_err(err)?;
    let sk = &o.dataset.skeleton;
    let prompts: Vec<String> = o.dataset.prompts(Split::Train).map_err(err)?.into_keys().collect();
    let texts: Vec<Vec<f64>> = (0..32)
        .map(|i| o.embedder.embed(&prompts[i % prompts.len()]))
        .collect::<crossdiff::error::Result<_>>()
        .map_err(err)?;
    let plan = SamplingPlan::standard(40, 21);
    let generated: Vec<MotionFeatures> = sample_batch(&o.model, &o.schedule, &o.dataset.stats_3d, &texts, &plan, 0)
        .map_err(err)?
        .into_iter()
        .map(|r| r.features)
        .collect();
    let reference: Vec<MotionFeatures> = o
        .dataset
        .ids(Split::Test)
        .iter()
        .map(|id| o.dataset.features_3d(id))
        .collect::<crossdiff::error::Result<_>>()
        .map_err(err)?;
    let lower = BodyPart::Lower.dims(generated[0].layout, sk);
    let mut corrupted = generated.clone();
    let mut rng = stream(21, Stream::Evaluation, 9);
    for m in &mut corrupted {
        let noise = gaussian(&mut rng, m.frames(), lower.len());
        for (c, &dim) in lower.iter().enumerate() {
            let scale = o.dataset.stats_3d.std[dim];
            for k in 0..m.frames() {
                m.data[(k, dim)] += noise[(k, c)] * scale;
            }
        }
    }
    let fid_parts = |g: &[MotionFeatures]| -> crossdiff::error::Result<(f64, f64)> {
        Ok((
            fid_split(&evaluators, &refs(g), &refs(&reference), BodyPart::Upper)?,
            fid_split(&evaluators, &refs(g), &refs(&reference), BodyPart::Lower)?,
        ))
    };
    let (u0, l0) = fid_parts(&generated).map_err(err)?;
    let (u1, l1) = fid_parts(&corrupted).map_err(err)?;
    let (du, dl) = (u1 - u0, l1 - l0);
    Ok((
        dl > 0.0 && dl >= 5.0 * du.max(0.0),
        format!("fid_lower {l0:.3} -> {l1:.3} (+{dl:.3}), fid_upper {u0:.3} -> {u1:.3} (+{du:.3}); required rise_L >= 5 rise_U"),
    ))
}

fn pooled_last_level(model: &CrossDiffModel, x: &Array2<f64>, domain: Domain) -> crossdiff::error::Result<Vec<f64>> {
    let cond = Condition::unconditional(1, model.config().text_dim, 0);
    let z = model.embed_condition(&cond)?;
    let input = stack_batch(std::slice::from_ref(x), model.dtype())?;
    let levels = model.encode_unified(&input, &z, domain, None)?;
    let last = levels.last().expect("at least one shared layer");
    let n = last.dim(1)?;
    let pooled = last.narrow(1, 1, n - 1)?.mean(1)?.to_dtype(DType::F64)?;
    Ok(pooled.flatten_all()?.to_vec1()?)
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (norm(a) * norm(b))
}

fn shared_alignment(o: &Overfit) -> Verdict {
    let front = o
        .dataset
        .index
        .views
        .iter()
        .position(|v| *v == View::FRONT)
        .ok_or("no front view")?;
    let mut z3 = Vec::new();
    let mut z2 = Vec::new();
    for item in &o.items {
        z3.push(pooled_last_level(&o.model, item.motion_3d.as_ref().ok_or("no 3D")?, Domain::ThreeD).map_err(err)?);
        z2.push(pooled_last_level(&o.model, &item.motion_2d[front], Domain::TwoD).map_err(err)?);
    }
    let (mut paired, mut mismatched) = (Vec::new(), Vec::new());
    for (i, a) in z3.iter().enumerate() {
        for (j, b) in z2.iter().enumerate() {
            if i == j {
                paired.push(cosine(a, b))
            } else {
                mismatched.push(cosine(a, b))
            }
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (p, m) = (mean(&paired), mean(&mismatched));
    Ok((
        p > m,
        format!("mean cosine of pooled last shared level: paired {p:.4}, mismatched {m:.4}"),
    ))
}

fn finetune_new_verb(o: &Overfit, work: &Path) -> Verdict {
    let sk = &o.dataset.skeleton;
    let prompt = MotionFamily::Squat.prompt();
    let mut rng = stream(31, Stream::Dataset, 0);
    let clips: Vec<Array3<f64>> = (0..4)
        .map(|_| family_motion(sk, MotionFamily::Squat, FamilyParams::sample(&mut rng), 41))
        .collect();
    let mut targets = Vec::new();
    let mut sequences = Vec::new();
    for (i, pos) in clips.iter().enumerate() {
        let f = compute_features_3d(pos, sk, o.dataset.index.thresholds).map_err(err)?;
        targets.push(o.dataset.stats_3d.normalize(&f).map_err(err)?.data);
        let uv = project_view(pos, View::FRONT).map_err(err)?;
        sequences.push(KeypointSequence {
            source: format!("squat_{i}"),
            fps: 20.0,
            texts: vec![prompt.to_string()],
            frames: (0..uv.dim().0)
                .map(|k| (0..uv.dim().1).map(|j| [uv[(k, j, 0)], uv[(k, j, 1)], 1.0]).collect())
                .collect(),
        });
    }
    let dir = work.join("finetune");
    std::fs::create_dir_all(&dir).map_err(err)?;
    let keypoints = dir.join("clips.jsonl");
    let mapping = dir.join("mapping.toml");
    write_keypoint_file(&keypoints, &sequences).map_err(err)?;
    std::fs::write(&mapping, JointMapping::identity(sk).to_toml()).map_err(err)?;
    let settings = Settings::default();
    let lift = Command::Lift {
        checkpoint: o.checkpoint.clone(),
        keypoints,
        mapping,
    };
    run_command(&lift, &settings, None, &dir.join("lifted")).map_err(err)?;
    let train = Command::Train {
        data: dir.join("lifted"),
        stage: Stage::Finetune2d,
        resume: Some(o.checkpoint.clone()),
        steps: None,
    };
    let run = run_command(&train, &settings, None, &dir.join("run")).map_err(err)?;
    let tuned = Checkpoint::load(&dir.join("run").join("final.xdck"))
        .map_err(err)?
        .model()
        .map_err(err)?;
    let text = o.embedder.embed(prompt).map_err(err)?;
    let plan = SamplingPlan::standard(40, 13);
    let distance = |m: &CrossDiffModel| -> crossdiff::error::Result<f64> {
        let r = sample_standard(m, &o.schedule, &o.dataset.stats_3d, &text, &plan)?;
        Ok(targets
            .iter()
            .map(|t| (&r.normalized - t).mapv(|v| v * v).mean().unwrap_or(f64::NAN))
            .fold(f64::INFINITY, f64::min))
    };
    let before = distance(&o.model).map_err(err)?;
    let after = distance(&tuned).map_err(err)?;
    Ok((
        after < before,
        format!(
            "feature MSE to the squat clips {before:.4} -> {after:.4} after {} fine-tune steps on 4 lifted 2D clips",
            run.summary["steps"]
        ),
    ))
}

fn refs(v: &[MotionFeatures]) -> Vec<&MotionFeatures> {
    v.iter().collect()
}

fn two_stage_semantics() -> Verdict {
    let config = ModelConfig::micro(21, 6);
    let make = || CrossDiffModel::new(config.clone(), &mut stream(2, Stream::Init, 0));
    let model_a = make().map_err(err)?;
    let model_b = make().map_err(err)?;
    let schedule = NoiseSchedule::new(10, ScheduleKind::Cosine).map_err(err)?;
    let items = common::random_items(&model_a, 3, 6, 2);
    let refs: Vec<&TrainItem> = items.iter().collect();
    let mut two = TrainConfig::desk(Stage::Two);
    two.frames = 4;
    let one = TrainConfig {
        stage: Stage::One,
        weights: LossWeights::ZERO,
        ..two.clone()
    };

    let batch = prepare_batch(&model_a, &schedule, &refs, &two, &mut stream(2, Stream::Batch, 99)).map_err(err)?;
    let (loss, _) = objective(&model_a, &batch, two.effective_weights()).map_err(err)?;
    let grads = loss.backward().map_err(err)?;
    let mut two_d_only = 0;
    let mut nonzero = Vec::new();
    for (name, var) in model_a.params().iter() {
        let only_2d = ["head.d2", "decoder.d2", "tokens.d2", "encoder.d2", "input.d2"]
            .iter()
            .any(|p| name.starts_with(p));
        if only_2d {
            two_d_only += 1;
            let g = grads
                .get(var.as_tensor())
                .map(|g| g.abs().and_then(|a| a.sum_all()).and_then(|a| a.to_scalar::<f64>()))
                .transpose()
                .map_err(err)?
                .unwrap_or(0.0);
            if g != 0.0 {
                nonzero.push(name.clone());
            }
        }
    }

    let mut opt_a = AdamW::new(two.optimizer());
    let mut opt_b = AdamW::new(two.optimizer());
    let mut same_losses = true;
    for step in 0..3 {
        let la = stage2_step(
            &model_a,
            &mut opt_a,
            &schedule,
            &refs,
            &two,
            &mut stream(2, Stream::Batch, step),
        )
        .map_err(err)?;
        let lb = stage1_step(
            &model_b,
            &mut opt_b,
            &schedule,
            &refs,
            &one,
            &mut stream(2, Stream::Batch, step),
        )
        .map_err(err)?;
        same_losses &= la == lb;
    }
    let same_params = model_a.params().export().map_err(err)? == model_b.params().export().map_err(err)?;
    let finetune = TrainConfig::for_stage(Stage::Finetune2d).weights;
    let defaults = finetune
        == LossWeights {
            w23: 0.1,
            w32: 0.1,
            w22: 1.0,
        };
    Ok((
        nonzero.is_empty() && two_d_only > 0 && same_losses && same_params && defaults,
        format!(
            "{two_d_only} 2D-only tensors, {} with non-zero gradient; stage II == stage I(0,0,0) after 3 steps: {}; fine-tune weights ({}, {}, {})",
            nonzero.len(),
            same_losses && same_params,
            finetune.w23,
            finetune.w32,
            finetune.w22
        ),
    ))
}

fn reproducibility(work: &Path) -> Verdict {
    let settings = Settings::from_toml(
        r#"
[model]
d_model = 8
heads = 2
ff_dim = 16
encoder_layers = 1
shared_layers = 1
root_encoder_layers = 1
root_decoder_layers = 1
max_frames = 40
text_dim = 32
non_root_joints = 21
diffusion_steps = 10
precision = "f64"
"#,
    )
    .map_err(err)?;
    let twice =
        |name: &str, make: &dyn Fn(&Path) -> Command| -> std::result::Result<(RunManifest, RunManifest), String> {
            let a = run_command(
                &make(&work.join(format!("{name}_a"))),
                &settings,
                Some(9),
                &work.join(format!("{name}_a")),
            )
            .map_err(err)?;
            let b = run_command(
                &make(&work.join(format!("{name}_b"))),
                &settings,
                Some(9),
                &work.join(format!("{name}_b")),
            )
            .map_err(err)?;
            Ok((a.manifest, b.manifest))
        };
    let repro = work.join("repro");
    std::fs::create_dir_all(&repro).map_err(err)?;
    let (pa, pb) = twice("repro/prepare", &|_| Command::PrepareData { source: None })?;
    let data = work.join("repro/prepare_a");
    let (ta, tb) = twice("repro/train", &|_| Command::Train {
        data: data.clone(),
        stage: Stage::One,
        resume: None,
        steps: Some(4),
    })?;
    let ck = work.join("repro/train_a/final.xdck");
    let (sa, sb) = twice("repro/sample", &|_| Command::Sample {
        checkpoint: ck.clone(),
        texts: vec!["a person walks forward".into()],
        count: 2,
        mode: SamplingMode::Mixture,
        alpha: Some(5),
        scale: None,
        frames: Some(12),
        render: false,
    })?;
    let checks = [("prepare-data", &pa, &pb), ("train", &ta, &tb), ("sample", &sa, &sb)];
    let mut files = 0;
    let mut ok = true;
    for (_, a, b) in &checks {
        ok &= outputs_match(a, b) && !a.outputs.is_empty();
        files += a.outputs.len();
    }
    Ok((
        ok,
        format!(
            "{} commands re-run with seed 9: {files} output files byte-identical by sha256: {ok}",
            checks.len()
        ),
    ))
}

fn main() {
    let work = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    let _ = std::fs::remove_dir_all(&work);
    std::fs::create_dir_all(&work).expect("work directory");
    let mut report = Report { failed: 0, total: 0 };

    let t = Instant::now();
    report.record("1", "forward-process statistics", t, forward_statistics());
    let t = Instant::now();
    report.record("2", "gradient correctness", t, gradient_correctness());
    let t = Instant::now();
    report.record("3", "representation round trip", t, representation_round_trip());

    let t = Instant::now();
    let trained = match overfit(&work) {
        Ok((state, verdict)) => {
            report.record("4", "overfit generation", t, verdict);
            Some(state)
        }
        Err(e) => {
            report.record("4", "overfit generation", t, Err(e));
            None
        }
    };
    let missing = || Err::<(bool, String), String>("needs the overfit checkpoint".into());
    let t = Instant::now();
    report.record(
        "5",
        "cross-pathway consistency",
        t,
        trained.as_ref().map_or_else(missing, cross_pathway),
    );
    let t = Instant::now();
    let mixture = trained.as_ref().map_or_else(missing, |o| mixture_contract(o, &work));
    report.record("6", "mixture-sampling contract", t, mixture);
    let t = Instant::now();
    report.record("7", "metric oracles", t, metric_oracles());
    let t = Instant::now();
    let parts = trained.as_ref().map_or_else(missing, |o| part_localization(o, &work));
    report.record("8", "FID-U/FID-L localization", t, parts);
    let t = Instant::now();
    report.record("9", "two-stage semantics", t, two_stage_semantics());
    let t = Instant::now();
    report.record("10", "reproducibility", t, reproducibility(&work));

    let t = Instant::now();
    let aligned = trained.as_ref().map_or_else(missing, shared_alignment);
    report.record("i1", "shared feature space aligns 3D and 2D", t, aligned);
    let t = Instant::now();
    let tuned = trained.as_ref().map_or_else(missing, |o| finetune_new_verb(o, &work));
    report.record("i2", "2D fine-tuning on a new verb", t, tuned);

    println!("{} of {} checks failed", report.failed, report.total);
    if report.failed > 0 {
        std::process::exit(1);
    }
}
